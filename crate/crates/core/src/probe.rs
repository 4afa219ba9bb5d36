//! Frozen-encoder features, a linear softmax probe, and collapse
//! diagnostics.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{Crop, FrontendConfig, MelSpectrogram, NormStats};
use crate::manifest::{Manifest, Split};
use crate::mask::patchify;
use crate::model::{encode, Indices, Model, ParamSet};
use crate::train::load_mels;

/// Time-averaged patch embeddings with the frequency rows concatenated:
/// `rows * D` values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
}

/// Encodes every patch of `mel` (already cropped and normalized) and pools
/// over time.
pub fn extract_features(model: &Model<f32>, theta: &ParamSet<f32>, mel: &MelSpectrogram) -> Result<FeatureVector> {
    let cfg = model.config();
    let grid = patchify(mel, cfg.patch_side)?;
    let z = encode(model, theta, &grid, Indices::All)?;
    let (rows, cols, d) = (cfg.grid_rows, cfg.grid_cols, cfg.embed_dim);
    let mut values = vec![0f32; rows * d];
    for r in 0..rows {
        let out = &mut values[r * d..(r + 1) * d];
        for c in 0..cols {
            for (o, v) in out.iter_mut().zip(z.row(r * cols + c)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= cols as f32);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("encoder produced non-finite features".into()));
    }
    Ok(FeatureVector { values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub l2: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iters: 2000,
            grad_tol: 1e-4,
        }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    pub classes: usize,
    pub dim: usize,
    /// `[classes x dim]` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Objective value before the first and after every iteration.
    pub loss_history: Vec<f64>,
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    k: usize,
    d: usize,
    l2: f64,
}

impl Problem<'_> {
    /// Mean cross-entropy plus `l2 / 2 * |W|^2`, and its gradient in the
    /// layout `[W row-major, b]`.
    fn eval(&self, w: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (k, d) = (self.k, self.d);
        let n = self.x.len() as f64;
        let mut loss = 0.0;
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut logits = vec![0f64; k];
        for (xi, &yi) in self.x.iter().zip(self.y) {
            for (c, l) in logits.iter_mut().enumerate() {
                *l = w[k * d + c] + w[c * d..(c + 1) * d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            loss += m + z.ln() - logits[yi];
            if let Some(g) = g.as_deref_mut() {
                for c in 0..k {
                    let p = (logits[c] - m).exp() / z - if c == yi { 1.0 } else { 0.0 };
                    for (gj, xj) in g[c * d..(c + 1) * d].iter_mut().zip(xi) {
                        *gj += p * xj / n;
                    }
                    g[k * d + c] += p / n;
                }
            }
        }
        let reg: f64 = w[..k * d].iter().map(|v| v * v).sum();
        if let Some(g) = g {
            for (gj, wj) in g[..k * d].iter_mut().zip(&w[..k * d]) {
                *gj += self.l2 * wj;
            }
        }
        loss / n + 0.5 * self.l2 * reg
    }
}

fn standardizer(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0f64; d];
    for xi in x {
        mean.iter_mut().zip(xi).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0f64; d];
    for xi in x {
        var.iter_mut()
            .zip(xi.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    let std = var
        .into_iter()
        .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, std)
}

fn check_features(features: &[FeatureVector]) -> Result<usize> {
    let d = features.first().map(|f| f.values.len()).unwrap_or(0);
    if d == 0 || features.iter().any(|f| f.values.len() != d) {
        return Err(Error::Input("features must be non-empty and of one length".into()));
    }
    Ok(d)
}

/// Full-batch gradient descent with a backtracking (Armijo) step until the
/// gradient norm drops below `grad_tol` or `max_iters` is reached.
pub fn train_probe(features: &[FeatureVector], labels: &[usize], classes: usize, config: &ProbeConfig) -> Result<ProbeModel> {
    let d = check_features(features)?;
    if features.len() != labels.len() {
        return Err(Error::Input("one label per feature vector is required".into()));
    }
    if classes < 2 {
        return Err(Error::Input(format!("a probe needs at least two classes, got {classes}")));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::Input(format!("label {y} outside {classes} classes")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Input(format!("class {c} has no training examples")));
    }
    let raw: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.values.iter().map(|&v| v as f64).collect())
        .collect();
    let (mean, std) = standardizer(&raw);
    let x: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| r.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let p = Problem {
        x: &x,
        y: labels,
        k: classes,
        d,
        l2: config.l2,
    };
    let mut w = vec![0f64; classes * d + classes];
    let mut g = vec![0f64; w.len()];
    let mut f = p.eval(&w, Some(&mut g));
    let mut history = vec![f];
    let mut step = 1.0;
    let mut trial = vec![0f64; w.len()];
    for _ in 0..config.max_iters {
        let gg: f64 = g.iter().map(|v| v * v).sum();
        if gg.sqrt() < config.grad_tol {
            break;
        }
        step *= 2.0;
        let mut accepted = None;
        while step > 1e-12 {
            trial.iter_mut().zip(w.iter().zip(&g)).for_each(|(t, (wi, gi))| *t = wi - step * gi);
            let ft = p.eval(&trial, None);
            if ft <= f - 1e-4 * step * gg {
                accepted = Some(ft);
                break;
            }
            step *= 0.5;
        }
        let Some(ft) = accepted else { break };
        std::mem::swap(&mut w, &mut trial);
        f = p.eval(&w, Some(&mut g));
        debug_assert!((f - ft).abs() <= 1e-9 * f.abs().max(1.0));
        history.push(f);
    }
    let bias = w[classes * d..].to_vec();
    w.truncate(classes * d);
    Ok(ProbeModel {
        classes,
        dim: d,
        weight: w,
        bias,
        feature_mean: mean,
        feature_std: std,
        loss_history: history,
    })
}

impl ProbeModel {
    pub fn predict(&self, f: &FeatureVector) -> Result<usize> {
        if f.values.len() != self.dim {
            return Err(Error::Input(format!(
                "feature has {} values, the probe expects {}",
                f.values.len(),
                self.dim
            )));
        }
        let x: Vec<f64> = f
            .values
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(&v, (m, s))| (v as f64 - m) / s)
            .collect();
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..self.classes {
            let l = self.bias[c]
                + self.weight[c * self.dim..(c + 1) * self.dim]
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            if l > best.1 {
                best = (c, l);
            }
        }
        Ok(best.0)
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Input("accuracy needs equal, non-empty prediction and label lists".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Top-1 accuracy on a labeled test set.
pub fn evaluate_probe(model: &ProbeModel, features: &[FeatureVector], labels: &[usize]) -> Result<f64> {
    let preds = features.iter().map(|f| model.predict(f)).collect::<Result<Vec<_>>>()?;
    accuracy(&preds, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    /// Per-dimension standard deviation, averaged over dimensions.
    pub mean_std: f64,
    /// `exp` of the entropy of the normalized singular values of the
    /// centered feature matrix.
    pub effective_rank: f64,
}

pub fn collapse_metrics(features: &[FeatureVector]) -> Result<CollapseMetrics> {
    let d = check_features(features)?;
    let n = features.len();
    if n < 2 {
        return Err(Error::Input("collapse metrics need at least two feature vectors".into()));
    }
    let mut m = DMatrix::<f64>::from_fn(n, d, |i, j| features[i].values[j] as f64);
    let scale = m.amax().max(1e-300);
    let mut std_sum = 0.0;
    for j in 0..d {
        let mut col = m.column_mut(j);
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        std_sum += (col.norm_squared() / n as f64).sqrt();
    }
    let sv = m.singular_values();
    let s_max = sv.max();
    if s_max <= 1e-9 * scale {
        return Ok(CollapseMetrics {
            mean_std: std_sum / d as f64,
            effective_rank: 1.0,
        });
    }
    let kept: Vec<f64> = sv.iter().cloned().filter(|&s| s > 1e-10 * s_max).collect();
    let total: f64 = kept.iter().sum();
    let entropy: f64 = kept.iter().map(|s| s / total).map(|p| -p * p.ln()).sum();
    Ok(CollapseMetrics {
        mean_std: std_sum / d as f64,
        effective_rank: entropy.exp(),
    })
}

/// Features of every clip in a manifest, center-cropped and normalized.
#[derive(Clone, Debug)]
pub struct LabeledFeatures {
    pub clip_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub features: Vec<FeatureVector>,
}

impl LabeledFeatures {
    pub fn split(&self, split: Split) -> (Vec<&str>, Vec<FeatureVector>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut f = Vec::new();
        let mut y = Vec::new();
        for i in 0..self.labels.len() {
            if self.splits[i] == split {
                ids.push(self.clip_ids[i].as_str());
                f.push(self.features[i].clone());
                y.push(self.labels[i]);
            }
        }
        (ids, f, y)
    }
}

/// Decodes once; the spectrograms can then be scored with any encoder.
pub fn load_probe_mels(
    manifest_path: &Path,
    frontend: &FrontendConfig,
    stats: NormStats,
    threads: usize,
) -> Result<(Manifest, Vec<MelSpectrogram>)> {
    let m = Manifest::load(manifest_path)?;
    if m.split(Split::Train).next().is_none() || m.split(Split::Test).next().is_none() {
        return Err(Error::Input(format!(
            "probe manifest {} needs both train and test clips",
            manifest_path.display()
        )));
    }
    let mels = load_mels(manifest_path, &m, frontend, threads)?
        .into_iter()
        .zip(&m.entries)
        .map(|(mel, e)| {
            let mel = mel.map_err(|err| Error::Input(format!("clip {}: {err}", e.clip_id)))?;
            let mel = crate::frontend::pad_or_crop(&mel, frontend.target_frames, Crop::Center);
            crate::frontend::normalize(&mel, stats)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((m, mels))
}

pub fn featurize(model: &Model<f32>, theta: &ParamSet<f32>, manifest: &Manifest, mels: &[MelSpectrogram]) -> Result<LabeledFeatures> {
    let features = mels
        .iter()
        .map(|mel| extract_features(model, theta, mel))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledFeatures {
        clip_ids: manifest.entries.iter().map(|e| e.clip_id.clone()).collect(),
        labels: manifest.entries.iter().map(|e| e.label as usize).collect(),
        splits: manifest.entries.iter().map(|e| e.split).collect(),
        features,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub clip_id: String,
    pub label: usize,
    pub pred: usize,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub chance: f64,
    pub mean_std: f64,
    pub effective_rank: f64,
    #[serde(skip)]
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("clip_id,label,pred,correct\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.clip_id, r.label, r.pred, r.correct as u8));
        }
        out
    }
}

/// Trains on the train split, scores the test split, and measures collapse
/// on the test features.
pub fn probe_features(data: &LabeledFeatures, config: &ProbeConfig) -> Result<ProbeReport> {
    let classes = data.labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let (_, train_x, train_y) = data.split(Split::Train);
    let (test_ids, test_x, test_y) = data.split(Split::Test);
    let probe = train_probe(&train_x, &train_y, classes, config)?;
    let preds = test_x.iter().map(|f| probe.predict(f)).collect::<Result<Vec<_>>>()?;
    let collapse = collapse_metrics(&test_x)?;
    Ok(ProbeReport {
        accuracy: accuracy(&preds, &test_y)?,
        chance: 1.0 / classes as f64,
        mean_std: collapse.mean_std,
        effective_rank: collapse.effective_rank,
        rows: test_ids
            .iter()
            .zip(preds.iter().zip(&test_y))
            .map(|(id, (&p, &y))| ProbeRow {
                clip_id: id.to_string(),
                label: y,
                pred: p,
                correct: p == y,
            })
            .collect(),
    })
}
