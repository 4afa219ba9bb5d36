use ajepa::frontend::MelSpectrogram;
use ajepa::model::{encode, Indices, Model, ModelConfig, ModelParams, PosEmbedKind};
use ajepa::mask::patchify;
use ajepa::probe::{
    accuracy, collapse_metrics, evaluate_probe, extract_features, train_probe, FeatureVector, ProbeConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn fv(values: Vec<f32>) -> FeatureVector {
    FeatureVector { values }
}

fn centers(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    (0..classes)
        .map(|_| (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
        .collect()
}

/// Gaussian blobs around the given class centers.
fn around(centers: &[Vec<f32>], per_class: usize, spread: f32, rng: &mut ChaCha8Rng) -> (Vec<FeatureVector>, Vec<usize>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            x.push(fv(center.iter().map(|m| m + spread * rng.sample::<f32, _>(StandardNormal)).collect()));
            y.push(c);
        }
    }
    (x, y)
}

fn blobs(classes: usize, per_class: usize, dim: usize, spread: f32, rng: &mut ChaCha8Rng) -> (Vec<FeatureVector>, Vec<usize>) {
    let c = centers(classes, dim, rng);
    around(&c, per_class, spread, rng)
}

#[test]
fn separable_classes_fit_perfectly_and_loss_never_rises() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (x, y) = blobs(2, 40, 6, 0.05, &mut rng);
    let probe = train_probe(&x, &y, 2, &ProbeConfig::default()).unwrap();
    assert_eq!(evaluate_probe(&probe, &x, &y).unwrap(), 1.0);
    assert!(probe.loss_history.len() > 2);
    assert!(probe.loss_history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn shuffled_labels_score_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = centers(4, 16, &mut rng);
    let (train_x, mut train_y) = around(&c, 200, 0.5, &mut rng);
    let (test_x, test_y) = around(&c, 150, 0.5, &mut rng);
    assert!(test_y.len() >= 500);
    let clean = train_probe(&train_x, &train_y, 4, &ProbeConfig::default()).unwrap();
    assert!(evaluate_probe(&clean, &test_x, &test_y).unwrap() > 0.9);

    train_y.shuffle(&mut rng);
    let shuffled = train_probe(&train_x, &train_y, 4, &ProbeConfig::default()).unwrap();
    let acc = evaluate_probe(&shuffled, &test_x, &test_y).unwrap();
    assert!((acc - 0.25).abs() <= 0.05, "{acc}");
}

#[test]
fn accuracy_examples() {
    let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
    assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
    assert_eq!(accuracy(&vec![2; 40], &labels).unwrap(), 0.25);
    assert!(accuracy(&[0], &[0, 1]).is_err());
}

#[test]
fn accuracy_ignores_test_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, y) = blobs(3, 30, 5, 1.2, &mut rng);
    let probe = train_probe(&x, &y, 3, &ProbeConfig::default()).unwrap();
    let base = evaluate_probe(&probe, &x, &y).unwrap();
    let mut order: Vec<usize> = (0..x.len()).collect();
    for _ in 0..5 {
        order.shuffle(&mut rng);
        let px: Vec<FeatureVector> = order.iter().map(|&i| x[i].clone()).collect();
        let py: Vec<usize> = order.iter().map(|&i| y[i]).collect();
        assert_eq!(evaluate_probe(&probe, &px, &py).unwrap(), base);
    }
}

#[test]
fn collapse_metric_cases() {
    let same = vec![fv(vec![1.0, -2.0, 3.0]); 10];
    let c = collapse_metrics(&same).unwrap();
    assert_eq!(c.mean_std, 0.0);
    assert!(c.effective_rank <= 1.0 + 1e-6);

    // Centering n orthonormal rows leaves n - 1 equal singular values.
    let n = 50;
    let rows: Vec<FeatureVector> = (0..n)
        .map(|i| fv((0..64).map(|j| if i == j { 1.0 } else { 0.0 }).collect()))
        .collect();
    let e = collapse_metrics(&rows).unwrap().effective_rank;
    assert!((e - (n - 1) as f64).abs() < 1e-6, "{e}");
    assert!(e / n as f64 > 0.97);

    assert!(collapse_metrics(&rows[..1]).is_err());
}

#[test]
fn collapse_metrics_ignore_a_shared_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, _) = blobs(3, 20, 8, 1.0, &mut rng);
    let shifted: Vec<FeatureVector> = x
        .iter()
        .map(|f| fv(f.values.iter().enumerate().map(|(j, v)| v + 3.0 * j as f32 - 5.0).collect()))
        .collect();
    let (a, b) = (collapse_metrics(&x).unwrap(), collapse_metrics(&shifted).unwrap());
    assert!((a.mean_std - b.mean_std).abs() < 1e-5);
    assert!((a.effective_rank - b.effective_rank).abs() < 1e-4);
}

#[test]
fn probe_input_errors() {
    let x = vec![fv(vec![0.0, 1.0]), fv(vec![1.0, 0.0])];
    assert!(train_probe(&x, &[0, 0], 1, &ProbeConfig::default()).is_err());
    assert!(train_probe(&x, &[0], 2, &ProbeConfig::default()).is_err());
}

fn random_mel(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> MelSpectrogram {
    let (h, w) = (cfg.grid_rows * cfg.patch_side, cfg.grid_cols * cfg.patch_side);
    MelSpectrogram::new(h, w, (0..h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

#[test]
fn desk_features_are_rows_times_width() {
    let cfg = ModelConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = ModelParams::init(&cfg, &mut rng).unwrap();
    let model = Model::new(&cfg).unwrap();
    let mel = random_mel(&cfg, &mut rng);
    let f = extract_features(&model, &params.theta, &mel).unwrap();
    assert_eq!(f.values.len(), 320);
    assert_eq!(extract_features(&model, &params.theta, &mel).unwrap(), f);
    let wrong = MelSpectrogram::new(40, 72, vec![0.0; 40 * 72]).unwrap();
    assert!(extract_features(&model, &params.theta, &wrong).is_err());
}

#[test]
fn identical_columns_pool_to_one_column() {
    // Zeroed learned positions make the encoder blind to location, so
    // repeated patch columns produce repeated outputs.
    let cfg = ModelConfig {
        pos_embed: PosEmbedKind::Learned,
        ..ModelConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
    let i = params.theta.position("pos_embed").unwrap();
    params.theta.tensors_mut()[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
    let model = Model::new(&cfg).unwrap();

    let p = cfg.patch_side;
    let (h, w) = (cfg.grid_rows * p, cfg.grid_cols * p);
    let column: Vec<f32> = (0..h * p).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let values = (0..h * w).map(|k| column[(k / w) * p + (k % w) % p]).collect();
    let mel = MelSpectrogram::new(h, w, values).unwrap();

    let f = extract_features(&model, &params.theta, &mel).unwrap();
    let z = encode(&model, &params.theta, &patchify(&mel, p).unwrap(), Indices::All).unwrap();
    for c in 0..cfg.grid_cols {
        let single: Vec<f32> = (0..cfg.grid_rows).flat_map(|r| z.row(r * cfg.grid_cols + c).to_vec()).collect();
        for (a, b) in f.values.iter().zip(&single) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
