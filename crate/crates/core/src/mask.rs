//! Patch grids and context/target mask sampling.
//!
//! Indices are row-major over the grid with frequency patches as rows:
//! `j = row * cols + col`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use ajepa_tensor::Tensor;

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;

/// Non-overlapping square patches of a spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_side: usize,
    /// `[rows * cols, patch_side^2]`, each patch flattened row-major.
    patches: Vec<f32>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn patch(&self, j: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.patches[j * d..(j + 1) * d]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([self.len(), self.patch_dim()], self.patches.clone()).expect("grid shape")
    }
}

pub fn patchify(mel: &MelSpectrogram, patch_side: usize) -> Result<PatchGrid> {
    let (h, w) = (mel.n_mels(), mel.frames());
    if patch_side == 0 || h % patch_side != 0 || w % patch_side != 0 {
        return Err(Error::Input(format!(
            "{h}x{w} spectrogram is not divisible into {patch_side}x{patch_side} patches"
        )));
    }
    let (rows, cols) = (h / patch_side, w / patch_side);
    let mut patches = Vec::with_capacity(h * w);
    for r in 0..rows {
        for c in 0..cols {
            for i in 0..patch_side {
                let start = (r * patch_side + i) * w + c * patch_side;
                patches.extend_from_slice(&mel.values()[start..start + patch_side]);
            }
        }
    }
    Ok(PatchGrid {
        rows,
        cols,
        patch_side,
        patches,
    })
}

/// Reassembles the spectrogram a grid was cut from.
pub fn unpatchify(grid: &PatchGrid) -> MelSpectrogram {
    let p = grid.patch_side;
    let (h, w) = (grid.rows * p, grid.cols * p);
    let mut values = vec![0f32; h * w];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let patch = grid.patch(r * grid.cols + c);
            for i in 0..p {
                let start = (r * p + i) * w + c * p;
                values[start..start + p].copy_from_slice(&patch[i * p..(i + 1) * p]);
            }
        }
    }
    MelSpectrogram::new(h, w, values).expect("grid values are finite")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Unstructured,
    Multiblock,
    Time,
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StrategyKind::Unstructured => "unstructured",
            StrategyKind::Multiblock => "multiblock",
            StrategyKind::Time => "time",
        })
    }
}

/// Disjoint, sorted context and target index sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    context: Vec<usize>,
    target: Vec<usize>,
    strategy: StrategyKind,
}

impl MaskSpec {
    /// Sorts both sets and checks every invariant against a grid of `n`
    /// patches.
    pub fn new(
        mut context: Vec<usize>,
        mut target: Vec<usize>,
        strategy: StrategyKind,
        n: usize,
    ) -> Result<Self> {
        context.sort_unstable();
        target.sort_unstable();
        let bad = |why: &str| Err(Error::Input(format!("invalid mask: {why}")));
        if context.is_empty() || target.is_empty() {
            return bad("context and target must be non-empty");
        }
        if context.windows(2).any(|w| w[0] == w[1]) || target.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate indices");
        }
        if context.last().is_some_and(|&i| i >= n) || target.last().is_some_and(|&i| i >= n) {
            return bad("index out of range");
        }
        if intersects(&context, &target) {
            return bad("context and target overlap");
        }
        Ok(Self {
            context,
            target,
            strategy,
        })
    }

    pub fn context(&self) -> &[usize] {
        &self.context
    }

    pub fn target(&self) -> &[usize] {
        &self.target
    }

    pub fn strategy(&self) -> StrategyKind {
        self.strategy
    }
}

/// Both inputs sorted ascending.
fn intersects(a: &[usize], b: &[usize]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiBlockParams {
    pub num_target_blocks: usize,
    /// Fraction of grid area per target block.
    pub target_scale: (f64, f64),
    /// Height / width.
    pub target_aspect: (f64, f64),
    pub context_scale: (f64, f64),
}

impl Default for MultiBlockParams {
    fn default() -> Self {
        Self {
            num_target_blocks: 4,
            target_scale: (0.15, 0.2),
            target_aspect: (0.75, 1.5),
            context_scale: (0.85, 1.0),
        }
    }
}

impl MultiBlockParams {
    fn validate(&self) -> Result<()> {
        let scale_ok = |(lo, hi): (f64, f64)| 0.0 < lo && lo <= hi && hi <= 1.0;
        if self.num_target_blocks == 0
            || !scale_ok(self.target_scale)
            || !scale_ok(self.context_scale)
            || !(self.target_aspect.0 > 0.0 && self.target_aspect.0 <= self.target_aspect.1)
        {
            return Err(Error::Config(format!("invalid multi-block parameters {self:?}")));
        }
        Ok(())
    }
}

/// Masking strategy and its parameters, as stored in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase", deny_unknown_fields)]
pub enum MaskingConfig {
    Unstructured {
        target_ratio: f64,
    },
    Multiblock(MultiBlockParams),
    Time {
        target_ratio: f64,
        /// Pick one contiguous span of columns instead of independent ones.
        #[serde(default)]
        contiguous: bool,
    },
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig::Unstructured { target_ratio: 0.7 }
    }
}

impl MaskingConfig {
    pub fn kind(&self) -> StrategyKind {
        match self {
            MaskingConfig::Unstructured { .. } => StrategyKind::Unstructured,
            MaskingConfig::Multiblock(_) => StrategyKind::Multiblock,
            MaskingConfig::Time { .. } => StrategyKind::Time,
        }
    }

    pub fn sample(&self, rows: usize, cols: usize, rng: &mut dyn RngCore) -> Result<MaskSpec> {
        match self {
            MaskingConfig::Unstructured { target_ratio } => {
                sample_unstructured(rows, cols, *target_ratio, rng)
            }
            MaskingConfig::Multiblock(params) => sample_multiblock(rows, cols, params, rng),
            MaskingConfig::Time {
                target_ratio,
                contiguous,
            } => {
                if *contiguous {
                    sample_time_span(rows, cols, *target_ratio, rng)
                } else {
                    sample_time(rows, cols, *target_ratio, rng)
                }
            }
        }
    }
}

fn target_count(ratio: f64, total: usize, what: &str) -> Result<usize> {
    let k = (ratio * total as f64).round();
    if !(ratio > 0.0 && ratio < 1.0) || k < 1.0 || k > (total as f64 - 1.0) {
        return Err(Error::Config(format!(
            "target ratio {ratio} over {total} {what} leaves an empty context or target"
        )));
    }
    Ok(k as usize)
}

/// Uniform random target subset of size `round(ratio * N)`; the rest is
/// context.
pub fn sample_unstructured(
    rows: usize,
    cols: usize,
    target_ratio: f64,
    rng: &mut dyn RngCore,
) -> Result<MaskSpec> {
    let n = rows * cols;
    let k = target_count(target_ratio, n, "patches")?;
    let mut in_target = vec![false; n];
    for i in index::sample(rng, n, k) {
        in_target[i] = true;
    }
    let (target, context) = (0..n).partition(|&i| in_target[i]);
    MaskSpec::new(context, target, StrategyKind::Unstructured, n)
}

fn columns_to_mask(rows: usize, cols: usize, chosen: &[bool]) -> Result<MaskSpec> {
    let n = rows * cols;
    let (target, context) = (0..n).partition(|&j| chosen[j % cols]);
    MaskSpec::new(context, target, StrategyKind::Time, n)
}

/// Full-spectrum time columns chosen independently.
pub fn sample_time(
    rows: usize,
    cols: usize,
    target_ratio: f64,
    rng: &mut dyn RngCore,
) -> Result<MaskSpec> {
    let k = target_count(target_ratio, cols, "time columns")?;
    let mut chosen = vec![false; cols];
    for c in index::sample(rng, cols, k) {
        chosen[c] = true;
    }
    columns_to_mask(rows, cols, &chosen)
}

/// Full-spectrum time columns forming a single contiguous span.
pub fn sample_time_span(
    rows: usize,
    cols: usize,
    target_ratio: f64,
    rng: &mut dyn RngCore,
) -> Result<MaskSpec> {
    let k = target_count(target_ratio, cols, "time columns")?;
    let start = rng.random_range(0..=cols - k);
    let chosen: Vec<bool> = (0..cols).map(|c| c >= start && c < start + k).collect();
    columns_to_mask(rows, cols, &chosen)
}

/// Axis-aligned rectangle of grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Block {
    pub fn cells(&self, cols: usize) -> impl Iterator<Item = usize> + '_ {
        (self.top..self.top + self.height)
            .flat_map(move |r| (self.left..self.left + self.width).map(move |c| r * cols + c))
    }
}

fn sample_block(
    rows: usize,
    cols: usize,
    scale: (f64, f64),
    aspect: (f64, f64),
    rng: &mut dyn RngCore,
) -> Block {
    let s = rng.random_range(scale.0..=scale.1);
    let a = rng.random_range(aspect.0..=aspect.1);
    let area = s * (rows * cols) as f64;
    // Fit the height first; if it clamps, the width absorbs the area.
    let height = ((area * a).sqrt().round() as usize).clamp(1, rows);
    let width = ((area / height as f64).round() as usize).clamp(1, cols);
    let top = rng.random_range(0..=rows - height);
    let left = rng.random_range(0..=cols - width);
    Block {
        top,
        left,
        height,
        width,
    }
}

/// Target and context blocks drawn by [`sample_multiblock_blocks`].
#[derive(Clone, Debug)]
pub struct MultiBlockDraw {
    pub mask: MaskSpec,
    pub target_blocks: Vec<Block>,
    pub context_block: Block,
}

const MULTIBLOCK_ATTEMPTS: usize = 100;

/// Several target rectangles, one large context rectangle with the target
/// cells removed. Redraws everything when the context ends up empty.
pub fn sample_multiblock_blocks(
    rows: usize,
    cols: usize,
    params: &MultiBlockParams,
    rng: &mut dyn RngCore,
) -> Result<MultiBlockDraw> {
    params.validate()?;
    let n = rows * cols;
    if n < 2 {
        return Err(Error::Config(format!("{rows}x{cols} grid is too small to mask")));
    }
    for _ in 0..MULTIBLOCK_ATTEMPTS {
        let mut in_target = vec![false; n];
        let target_blocks: Vec<Block> = (0..params.num_target_blocks)
            .map(|_| sample_block(rows, cols, params.target_scale, params.target_aspect, rng))
            .collect();
        for b in &target_blocks {
            b.cells(cols).for_each(|j| in_target[j] = true);
        }
        let context_block = sample_block(rows, cols, params.context_scale, (1.0, 1.0), rng);
        let context: Vec<usize> = context_block.cells(cols).filter(|&j| !in_target[j]).collect();
        if context.is_empty() {
            continue;
        }
        let target = (0..n).filter(|&j| in_target[j]).collect();
        return Ok(MultiBlockDraw {
            mask: MaskSpec::new(context, target, StrategyKind::Multiblock, n)?,
            target_blocks,
            context_block,
        });
    }
    Err(Error::Sampling(format!(
        "no non-empty context after {MULTIBLOCK_ATTEMPTS} attempts on a {rows}x{cols} grid with {params:?}"
    )))
}

pub fn sample_multiblock(
    rows: usize,
    cols: usize,
    params: &MultiBlockParams,
    rng: &mut dyn RngCore,
) -> Result<MaskSpec> {
    sample_multiblock_blocks(rows, cols, params, rng).map(|d| d.mask)
}

/// Per-draw shape statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrawStats {
    pub context: usize,
    pub target: usize,
    /// Fraction of columns holding at least one target cell.
    pub column_coverage: f64,
    /// Over target cells: fraction of in-grid 4-neighbors also in the
    /// target, averaged.
    pub contiguity: f64,
    /// Same, restricted to the neighbors above and below.
    pub freq_contiguity: f64,
}

pub fn draw_stats(spec: &MaskSpec, rows: usize, cols: usize) -> DrawStats {
    let mut in_target = vec![false; rows * cols];
    spec.target.iter().for_each(|&j| in_target[j] = true);
    let mut covered = vec![false; cols];
    let (mut all, mut vertical) = (0.0, 0.0);
    for &j in &spec.target {
        let (r, c) = (j / cols, j % cols);
        covered[c] = true;
        let frac = |neigh: &[(isize, isize)]| {
            let mut hits = 0usize;
            let mut total = 0usize;
            for (dr, dc) in neigh {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                    continue;
                }
                total += 1;
                hits += in_target[nr as usize * cols + nc as usize] as usize;
            }
            if total == 0 {
                1.0
            } else {
                hits as f64 / total as f64
            }
        };
        all += frac(&[(-1, 0), (1, 0), (0, -1), (0, 1)]);
        vertical += frac(&[(-1, 0), (1, 0)]);
    }
    let nt = spec.target.len() as f64;
    DrawStats {
        context: spec.context.len(),
        target: spec.target.len(),
        column_coverage: covered.iter().filter(|&&c| c).count() as f64 / cols as f64,
        contiguity: all / nt,
        freq_contiguity: vertical / nt,
    }
}

/// Aggregate statistics for one strategy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrategySummary {
    pub strategy: StrategyKind,
    pub draws: usize,
    pub mean_context: f64,
    pub mean_target: f64,
    pub column_coverage: f64,
    pub contiguity: f64,
    pub freq_contiguity: f64,
}

pub fn mask_stats(specs: &[MaskSpec], rows: usize, cols: usize) -> Result<Vec<StrategySummary>> {
    if specs.is_empty() {
        return Err(Error::Input("mask_stats needs at least one mask".into()));
    }
    let mut groups: BTreeMap<StrategyKind, Vec<DrawStats>> = BTreeMap::new();
    for s in specs {
        groups.entry(s.strategy).or_default().push(draw_stats(s, rows, cols));
    }
    Ok(groups
        .into_iter()
        .map(|(strategy, stats)| {
            let n = stats.len() as f64;
            let mean = |f: fn(&DrawStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
            StrategySummary {
                strategy,
                draws: stats.len(),
                mean_context: mean(|s| s.context as f64),
                mean_target: mean(|s| s.target as f64),
                column_coverage: mean(|s| s.column_coverage),
                contiguity: mean(|s| s.contiguity),
                freq_contiguity: mean(|s| s.freq_contiguity),
            }
        })
        .collect())
}

/// Plain PGM (P2): 0 = context, 128 = neither, 255 = target.
pub fn render_pgm(spec: &MaskSpec, rows: usize, cols: usize) -> String {
    let mut px = vec![128u8; rows * cols];
    spec.context.iter().for_each(|&j| px[j] = 0);
    spec.target.iter().for_each(|&j| px[j] = 255);
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = px[r * cols..(r + 1) * cols].iter().map(u8::to_string).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}
