use std::collections::BTreeSet;

use ajepa::frontend::MelSpectrogram;
use ajepa::mask::{
    draw_stats, mask_stats, patchify, sample_multiblock, sample_multiblock_blocks, sample_time, sample_time_span,
    sample_unstructured, unpatchify, MaskSpec, MaskingConfig, MultiBlockParams, StrategyKind,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ROWS: usize = 5;
const COLS: usize = 13;

fn well_formed(m: &MaskSpec, n: usize) -> bool {
    let sorted = |s: &[usize]| s.windows(2).all(|w| w[0] < w[1]);
    let c: BTreeSet<_> = m.context().iter().collect();
    !m.context().is_empty()
        && !m.target().is_empty()
        && sorted(m.context())
        && sorted(m.target())
        && m.target().iter().all(|j| !c.contains(j))
        && m.context().iter().chain(m.target()).all(|&j| j < n)
}

#[test]
fn unstructured_membership_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut hits = [0usize; ROWS * COLS];
    let draws = 10_000;
    for _ in 0..draws {
        let m = sample_unstructured(ROWS, COLS, 0.7, &mut rng).unwrap();
        assert_eq!(m.target().len(), 46);
        m.target().iter().for_each(|&j| hits[j] += 1);
    }
    for (j, h) in hits.iter().enumerate() {
        let f = *h as f64 / draws as f64;
        assert!((f - 0.7).abs() < 0.02, "index {j}: {f}");
    }
}

#[test]
fn small_grid_unstructured() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = sample_unstructured(2, 2, 0.5, &mut rng).unwrap();
    assert_eq!((m.target().len(), m.context().len()), (2, 2));
    assert!(well_formed(&m, 4));
    assert!(sample_unstructured(2, 2, 0.1, &mut rng).is_err());
    assert!(sample_unstructured(2, 2, 1.0, &mut rng).is_err());
}

#[test]
fn multiblock_targets_are_unions_of_rectangles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = MultiBlockParams::default();
    let (mut covered, mut uncovered) = (false, false);
    for _ in 0..10_000 {
        let d = sample_multiblock_blocks(ROWS, COLS, &params, &mut rng).unwrap();
        assert!(well_formed(&d.mask, ROWS * COLS));
        let t: BTreeSet<usize> = d.target_blocks.iter().flat_map(|b| b.cells(COLS).collect::<Vec<_>>()).collect();
        assert_eq!(d.mask.target(), t.iter().copied().collect::<Vec<_>>().as_slice());
        let c: Vec<usize> = d.context_block.cells(COLS).filter(|j| !t.contains(j)).collect();
        let mut c_sorted = c.clone();
        c_sorted.sort_unstable();
        assert_eq!(d.mask.context(), c_sorted.as_slice());
        let all = d.mask.context().len() + d.mask.target().len() == ROWS * COLS;
        covered |= all;
        uncovered |= !all;
    }
    assert!(covered && uncovered, "expected both covering and non-covering draws");
}

#[test]
fn whole_grid_target_block_fails() {
    let params = MultiBlockParams {
        num_target_blocks: 1,
        target_scale: (1.0, 1.0),
        target_aspect: (ROWS as f64 / COLS as f64, ROWS as f64 / COLS as f64),
        context_scale: (0.85, 1.0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = sample_multiblock(ROWS, COLS, &params, &mut rng).unwrap_err();
    assert!(err.to_string().contains("5x13"), "{err}");
}

#[test]
fn time_targets_are_whole_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let m = sample_time(ROWS, COLS, 0.5, &mut rng).unwrap();
        assert_eq!((m.target().len(), m.context().len()), (35, 30));
        let cols: BTreeSet<usize> = m.target().iter().map(|j| j % COLS).collect();
        assert_eq!(cols.len(), 7);
        for &c in &cols {
            let rows: Vec<usize> = m.target().iter().filter(|&&j| j % COLS == c).map(|j| j / COLS).collect();
            assert_eq!(rows, (0..ROWS).collect::<Vec<_>>());
        }
    }
    let span = sample_time_span(ROWS, COLS, 0.5, &mut rng).unwrap();
    let cols: Vec<usize> = span.target().iter().map(|j| j % COLS).collect::<BTreeSet<_>>().into_iter().collect();
    assert!(cols.windows(2).all(|w| w[1] == w[0] + 1));
}

#[test]
fn time_masks_are_vertically_solid() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = sample_time(ROWS, COLS, 0.5, &mut rng).unwrap();
    assert_eq!(draw_stats(&m, ROWS, COLS).freq_contiguity, 1.0);
}

#[test]
fn multiblock_is_more_contiguous_than_unstructured() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = MultiBlockParams::default();
    let blocks: Vec<MaskSpec> = (0..10_000)
        .map(|_| sample_multiblock(ROWS, COLS, &params, &mut rng).unwrap())
        .collect();
    let mb = mask_stats(&blocks, ROWS, COLS).unwrap()[0];
    let ratio = mb.mean_target / (ROWS * COLS) as f64;
    let random: Vec<MaskSpec> = (0..10_000)
        .map(|_| sample_unstructured(ROWS, COLS, ratio, &mut rng).unwrap())
        .collect();
    let un = mask_stats(&random, ROWS, COLS).unwrap()[0];
    assert_eq!(un.strategy, StrategyKind::Unstructured);
    assert!((un.mean_target - mb.mean_target).abs() <= 0.5);
    assert!(mb.contiguity > un.contiguity, "{} vs {}", mb.contiguity, un.contiguity);
}

#[test]
fn unstructured_mean_target_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let specs: Vec<MaskSpec> = (0..200).map(|_| sample_unstructured(ROWS, COLS, 0.7, &mut rng).unwrap()).collect();
    let s = mask_stats(&specs, ROWS, COLS).unwrap();
    assert_eq!(s[0].mean_target, 46.0);
    assert!(mask_stats(&[], ROWS, COLS).is_err());
}

#[test]
fn patchify_paper_grid() {
    let mel = MelSpectrogram::new(80, 208, vec![0.0; 80 * 208]).unwrap();
    let g = patchify(&mel, 16).unwrap();
    assert_eq!((g.rows, g.cols, g.len()), (5, 13, 65));
}

fn configs() -> Vec<MaskingConfig> {
    vec![
        MaskingConfig::Unstructured { target_ratio: 0.7 },
        MaskingConfig::Multiblock(MultiBlockParams::default()),
        MaskingConfig::Time {
            target_ratio: 0.5,
            contiguous: false,
        },
        MaskingConfig::Time {
            target_ratio: 0.3,
            contiguous: true,
        },
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_strategy_yields_valid_masks(seed in any::<u64>(), rows in 2usize..7, cols in 4usize..15, which in 0usize..4) {
        let cfg = &configs()[which];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = cfg.sample(rows, cols, &mut rng).unwrap();
        prop_assert!(well_formed(&m, rows * cols));
        prop_assert_eq!(m.strategy(), cfg.kind());
        if cfg.kind() != StrategyKind::Multiblock {
            prop_assert_eq!(m.context().len() + m.target().len(), rows * cols);
        }
        if cfg.kind() == StrategyKind::Time {
            let t: BTreeSet<_> = m.target().iter().copied().collect();
            for j in 0..rows * cols {
                prop_assert_eq!(t.contains(&j), t.contains(&(j % cols)));
            }
        }
        let mut again = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(cfg.sample(rows, cols, &mut again).unwrap(), m);
    }

    #[test]
    fn patchify_round_trips(rows in 1usize..4, cols in 1usize..5, side in 1usize..5, seed in any::<u64>()) {
        let (h, w) = (rows * side, cols * side);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..h * w).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
        let mel = MelSpectrogram::new(h, w, values).unwrap();
        let g = patchify(&mel, side).unwrap();
        prop_assert_eq!(g.len(), rows * cols);
        prop_assert_eq!(unpatchify(&g), mel);
    }
}
