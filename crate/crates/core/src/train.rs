//! Pretraining loop: batching, AdamW, learning-rate and EMA schedules,
//! checkpoints and metrics.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ajepa_tensor::{Real, Tensor};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::frontend::{
    log_mel_with, mel_filterbank, normalize, pad_or_crop, Crop, FrontendConfig, MelSpectrogram,
    NormStats,
};
use crate::fsutil;
use crate::manifest::{self, Manifest};
use crate::mask::{patchify, MaskSpec, MaskingConfig, PatchGrid};
use crate::model::{
    batch_gradients, ema_update, tau_schedule, EmaSchedule, Model, ModelConfig, ModelParams,
    ParamSet,
};
use crate::wav::decode_wav;

fn default_base_lr() -> f64 {
    3e-4
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.95)
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_checkpoint_every() -> u64 {
    500
}
fn default_threads() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaConfig {
    pub tau_0: f64,
    pub tau_t: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            tau_0: 0.996,
            tau_t: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Defaults to 5% of `steps`.
    #[serde(default)]
    pub warmup_steps: Option<u64>,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub seed: u64,
    #[serde(default)]
    pub masking: MaskingConfig,
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub ema: EmaConfig,
    pub manifest: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub metrics_path: PathBuf,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Unreadable clips tolerated before loading aborts.
    #[serde(default)]
    pub max_skipped_clips: usize,
    /// Decoding workers.
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl TrainConfig {
    /// 5x8 grid, D = 64, 2+2 layers, batch 16, 2000 steps, unstructured
    /// masking.
    pub fn desk(manifest: impl Into<PathBuf>, out_dir: impl AsRef<Path>) -> Self {
        let out = out_dir.as_ref();
        Self {
            steps: 2000,
            batch_size: 16,
            base_lr: default_base_lr(),
            weight_decay: default_weight_decay(),
            warmup_steps: None,
            betas: default_betas(),
            adam_eps: default_adam_eps(),
            seed: 0,
            masking: MaskingConfig::default(),
            frontend: FrontendConfig::desk(),
            model: ModelConfig::desk(),
            ema: EmaConfig::default(),
            manifest: manifest.into(),
            checkpoint_dir: out.join("checkpoints"),
            metrics_path: out.join("metrics.csv"),
            checkpoint_every: default_checkpoint_every(),
            max_skipped_clips: 0,
            threads: 1,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_json(&text)
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_steps
            .unwrap_or_else(|| (self.steps as f64 * 0.05).round() as u64)
    }

    pub fn ema_schedule(&self) -> EmaSchedule {
        EmaSchedule {
            tau_0: self.ema.tau_0,
            tau_t: self.ema.tau_t,
            total_steps: self.steps,
        }
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("weight_decay must be >= 0 and adam_eps > 0".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas {:?} outside [0, 1)", self.betas));
        }
        if self.warmup() > self.steps {
            return bad(format!("warmup {} exceeds {} steps", self.warmup(), self.steps));
        }
        if self.checkpoint_every == 0 || self.threads == 0 {
            return bad("checkpoint_every and threads must be at least 1".into());
        }
        self.ema_schedule().validate()?;
        self.model.validate()?;
        let p = self.model.patch_side;
        self.frontend.validate(p)?;
        let grid = (self.frontend.n_mels / p, self.frontend.target_frames / p);
        if grid != (self.model.grid_rows, self.model.grid_cols) {
            return bad(format!(
                "front end gives a {}x{} grid but the model expects {}x{}",
                grid.0, grid.1, self.model.grid_rows, self.model.grid_cols
            ));
        }
        Ok(())
    }

    /// The fields that shape the optimization trajectory; file locations
    /// and worker counts are excluded.
    fn trajectory_key(&self) -> Self {
        Self {
            manifest: PathBuf::new(),
            checkpoint_dir: PathBuf::new(),
            metrics_path: PathBuf::new(),
            checkpoint_every: 0,
            max_skipped_clips: 0,
            threads: 0,
            ..self.clone()
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total`.
pub fn lr_schedule(step: u64, base_lr: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base_lr;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment buffers for one weight set.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T = f32> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One decoupled-weight-decay Adam update at 1-based step `t`:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
pub fn adamw_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    moments: &mut Moments<T>,
    t: u64,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Input("optimizer steps are 1-based".into()));
    }
    if grads.len() != params.len()
        || !params.same_layout(&moments.m)
        || !params.same_layout(&moments.v)
        || params.tensors().iter().zip(grads).any(|(p, g)| p.shape() != g.shape())
    {
        return Err(Error::Input("gradient or moment shapes do not match the weights".into()));
    }
    let c1 = 1.0 - opt.beta1.powf(t as f64);
    let c2 = 1.0 - opt.beta2.powf(t as f64);
    let ps = params.tensors_mut();
    let ms = moments.m.tensors_mut();
    let vs = moments.v.tensors_mut();
    for (((p, g), m), v) in ps.iter_mut().zip(grads).zip(ms.iter_mut()).zip(vs.iter_mut()) {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            let g = gi.to_f64_lossy();
            let mi = opt.beta1 * md[i].to_f64_lossy() + (1.0 - opt.beta1) * g;
            let vi = opt.beta2 * vd[i].to_f64_lossy() + (1.0 - opt.beta2) * g * g;
            md[i] = T::of(mi);
            vd[i] = T::of(vi);
            let m_hat = md[i].to_f64_lossy() / c1;
            let v_hat = vd[i].to_f64_lossy() / c2;
            let pi = pd[i].to_f64_lossy();
            pd[i] = T::of(pi - lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * pi));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub count: u64,
    pub sum: f64,
    pub last: f64,
}

impl LossStats {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub params: ModelParams<f32>,
    pub theta_moments: Moments<f32>,
    pub phi_moments: Moments<f32>,
    /// Drives crops and masks.
    pub rng: ChaCha8Rng,
    pub loss_stats: LossStats,
}

impl TrainState {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        init_rng.set_stream(1);
        let params = ModelParams::init(config, &mut init_rng)?;
        Ok(Self {
            step: 0,
            theta_moments: Moments::zeros_like(&params.theta),
            phi_moments: Moments::zeros_like(&params.phi),
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            loss_stats: LossStats::default(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f32,
    pub lr: f64,
    pub tau: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,loss,lr,tau,grad_norm";

impl StepMetrics {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.loss, self.lr, self.tau, self.grad_norm)
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let bad = || Error::Input(format!("malformed metrics line {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            loss: f[1].parse().map_err(|_| bad())?,
            lr: f[2].parse().map_err(|_| bad())?,
            tau: f[3].parse().map_err(|_| bad())?,
            grad_norm: f[4].parse().map_err(|_| bad())?,
        })
    }
}

pub fn metrics_csv(records: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<StepMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Input("metrics file lacks the expected header".into()));
    }
    lines.filter(|l| !l.is_empty()).map(StepMetrics::parse_csv_line).collect()
}

/// Schedules and masking shared by every step of one run.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub total_steps: u64,
    pub warmup: u64,
    pub base_lr: f64,
    pub opt: AdamW,
    pub ema: EmaSchedule,
    pub masking: MaskingConfig,
    pub seed: u64,
}

impl StepPlan {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            total_steps: c.steps,
            warmup: c.warmup(),
            base_lr: c.base_lr,
            opt: c.adamw(),
            ema: c.ema_schedule(),
            masking: c.masking.clone(),
            seed: c.seed,
        }
    }
}

fn grad_norm(groups: &[&[Tensor<f32>]]) -> f64 {
    groups
        .iter()
        .flat_map(|g| g.iter())
        .flat_map(|t| t.data())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt()
}

/// Samples one mask per element, averages the loss over the batch, updates
/// the context encoder and predictor with AdamW and then the target encoder
/// with the EMA rule.
pub fn train_step(
    state: &mut TrainState,
    model: &Model<f32>,
    batch: &[PatchGrid],
    plan: &StepPlan,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let cfg = model.config();
    let masks = batch
        .iter()
        .map(|_| plan.masking.sample(cfg.grid_rows, cfg.grid_cols, &mut state.rng))
        .collect::<Result<Vec<MaskSpec>>>()?;
    let patches: Vec<Tensor<f32>> = batch.iter().map(PatchGrid::to_tensor).collect();
    let out = batch_gradients(model, &state.params, &patches, &masks)?;
    let t = state.step + 1;
    if !out.loss.is_finite() {
        let sizes: Vec<(usize, usize)> = masks
            .iter()
            .map(|m| (m.context().len(), m.target().len()))
            .collect();
        return Err(Error::Diverged(format!(
            "loss {} at step {t} (seed {}), per-element losses {:?}, (|C|, |T|) = {sizes:?}",
            out.loss, plan.seed, out.element_losses
        )));
    }
    let norm = grad_norm(&[&out.theta, &out.phi]);
    let lr = lr_schedule(t, plan.base_lr, plan.warmup, plan.total_steps);
    adamw_step(&mut state.params.theta, &out.theta, &mut state.theta_moments, t, lr, &plan.opt)?;
    adamw_step(&mut state.params.phi, &out.phi, &mut state.phi_moments, t, lr, &plan.opt)?;
    let tau = tau_schedule(t.min(plan.ema.total_steps), &plan.ema)?;
    ema_update(&mut state.params.theta_bar, &state.params.theta, tau)?;
    state.step = t;
    state.loss_stats.count += 1;
    state.loss_stats.sum += out.loss as f64;
    state.loss_stats.last = out.loss as f64;
    Ok(StepMetrics {
        step: t,
        loss: out.loss,
        lr,
        tau,
        grad_norm: norm,
    })
}

/// Full-length log-mel spectrograms of a clip collection with the
/// statistics used to normalize them.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub ids: Vec<String>,
    pub mels: Vec<MelSpectrogram>,
    pub stats: NormStats,
}

impl Corpus {
    pub fn from_mels(ids: Vec<String>, mels: Vec<MelSpectrogram>) -> Result<Self> {
        if mels.is_empty() {
            return Err(Error::Input("training corpus is empty".into()));
        }
        let stats = NormStats::from_corpus(&mels)?;
        Ok(Self { ids, mels, stats })
    }

    pub fn len(&self) -> usize {
        self.mels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mels.is_empty()
    }

    /// Decodes every clip listed in the manifest. Unreadable clips are
    /// skipped with a warning until more than `max_skipped` have failed.
    pub fn load(manifest_path: &Path, frontend: &FrontendConfig, max_skipped: usize, threads: usize) -> Result<Self> {
        let m = Manifest::load(manifest_path)?;
        if m.entries.is_empty() {
            return Err(Error::Input(format!("manifest {} is empty", manifest_path.display())));
        }
        let mels = load_mels(manifest_path, &m, frontend, threads)?;
        let mut ids = Vec::new();
        let mut kept = Vec::new();
        let mut skipped = 0;
        for (entry, mel) in m.entries.iter().zip(mels) {
            match mel {
                Ok(mel) => {
                    ids.push(entry.clip_id.clone());
                    kept.push(mel);
                }
                Err(e) => {
                    skipped += 1;
                    warn!("skipping clip {}: {e}", entry.clip_id);
                    if skipped > max_skipped {
                        return Err(Error::Input(format!(
                            "{skipped} unreadable clips exceed the limit of {max_skipped}; last: {}: {e}",
                            entry.clip_id
                        )));
                    }
                }
            }
        }
        Self::from_mels(ids, kept)
    }
}

/// Reads and transforms every manifest entry, one result per entry, in
/// manifest order.
pub fn load_mels(
    manifest_path: &Path,
    m: &Manifest,
    frontend: &FrontendConfig,
    threads: usize,
) -> Result<Vec<Result<MelSpectrogram>>> {
    let bank = mel_filterbank(frontend)?;
    let one = |e: &manifest::ManifestEntry| -> Result<MelSpectrogram> {
        let path = manifest::resolve(manifest_path, e);
        let wave = decode_wav(&fsutil::read(&path)?)?;
        if wave.sample_rate != frontend.sample_rate {
            return Err(Error::UnsupportedAudio(format!(
                "{} is {} Hz, expected {}",
                path.display(),
                wave.sample_rate,
                frontend.sample_rate
            )));
        }
        log_mel_with(&wave, frontend, &bank)
    };
    let threads = threads.max(1);
    if threads == 1 || m.entries.len() < 2 {
        return Ok(m.entries.iter().map(one).collect());
    }
    let chunk = m.entries.len().div_ceil(threads);
    Ok(std::thread::scope(|s| {
        let handles: Vec<_> = m
            .entries
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("decoder thread panicked"))
            .collect()
    }))
}

/// Crop to the model's input length, normalize, cut into patches.
pub fn prepare(
    mel: &MelSpectrogram,
    frontend: &FrontendConfig,
    stats: NormStats,
    patch_side: usize,
    crop: Crop<'_>,
) -> Result<PatchGrid> {
    let mel = pad_or_crop(mel, frontend.target_frames, crop);
    patchify(&normalize(&mel, stats)?, patch_side)
}

/// Clip order of one epoch: a shuffle seeded by the run seed and the epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(b"epoch");
    h.update(epoch.to_le_bytes());
    let d = h.finalize();
    let mut rng = ChaCha8Rng::from_seed(d.into());
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// A training run over an in-memory corpus.
pub struct Trainer {
    config: TrainConfig,
    plan: StepPlan,
    model: Model<f32>,
    corpus: Corpus,
    state: TrainState,
    metrics: Vec<StepMetrics>,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        let state = TrainState::init(&config.model, config.seed)?;
        Ok(Self {
            plan: StepPlan::from_config(&config),
            model: Model::new(&config.model)?,
            config,
            corpus,
            state,
            metrics: Vec::new(),
            order: None,
        })
    }

    /// Continues from a checkpoint written by a run with the same
    /// trajectory-shaping settings. Normalization statistics come from the
    /// checkpoint.
    pub fn resume(config: TrainConfig, mut corpus: Corpus, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.config.trajectory_key() != config.trajectory_key() {
            return Err(Error::Config(
                "checkpoint was written with different training settings".into(),
            ));
        }
        if ckpt.state.step > config.steps {
            return Err(Error::Config(format!(
                "checkpoint is at step {} but the run has {} steps",
                ckpt.state.step, config.steps
            )));
        }
        corpus.stats = ckpt.norm;
        let metrics = match fsutil::read(&config.metrics_path) {
            Ok(bytes) => {
                let text = String::from_utf8_lossy(&bytes);
                let all = parse_metrics_csv(&text)?;
                let kept: Vec<_> = all.into_iter().filter(|r| r.step <= ckpt.state.step).collect();
                if kept.len() as u64 != ckpt.state.step {
                    warn!("metrics file does not cover steps 1..{}; it restarts here", ckpt.state.step);
                }
                kept
            }
            Err(_) => Vec::new(),
        };
        Ok(Self {
            plan: StepPlan::from_config(&config),
            model: Model::new(&config.model)?,
            config,
            corpus,
            state: ckpt.state,
            metrics,
            order: None,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn metrics(&self) -> &[StepMetrics] {
        &self.metrics
    }

    pub fn norm_stats(&self) -> NormStats {
        self.corpus.stats
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.steps
    }

    fn clip_at(&mut self, k: u64) -> usize {
        let n = self.corpus.len() as u64;
        let (epoch, pos) = (k / n, (k % n) as usize);
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            self.order = Some((epoch, epoch_order(self.config.seed, epoch, n as usize)));
        }
        self.order.as_ref().expect("just set").1[pos]
    }

    /// The next batch: clips follow the epoch order, crops use the state
    /// RNG.
    pub fn next_batch(&mut self) -> Result<Vec<PatchGrid>> {
        let b = self.config.batch_size as u64;
        (0..b)
            .map(|i| {
                let clip = self.clip_at(self.state.step * b + i);
                prepare(
                    &self.corpus.mels[clip],
                    &self.config.frontend,
                    self.corpus.stats,
                    self.config.model.patch_side,
                    Crop::Random(&mut self.state.rng),
                )
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        if self.is_done() {
            return Err(Error::Input("training already reached its final step".into()));
        }
        let batch = self.next_batch()?;
        let m = train_step(&mut self.state, &self.model, &batch, &self.plan)?;
        self.metrics.push(m);
        Ok(m)
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.config.checkpoint_dir.join(format!("step-{step:06}.ckpt"))
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.checkpoint_path(self.state.step);
        checkpoint::save(
            &path,
            &Checkpoint {
                state: self.state.clone(),
                config: self.config.clone(),
                norm: self.corpus.stats,
            },
        )?;
        fsutil::write_atomic(&self.config.metrics_path, metrics_csv(&self.metrics).as_bytes())?;
        Ok(path)
    }

    /// Trains to the final step, checkpointing every `checkpoint_every`
    /// steps and at the end. Returns the final checkpoint.
    pub fn run(&mut self) -> Result<PathBuf> {
        let mut last = None;
        while !self.is_done() {
            let m = self.step()?;
            if m.step % 50 == 0 || m.step == 1 {
                info!(
                    "step {} loss {:.5} lr {:.3e} tau {:.5} grad_norm {:.4}",
                    m.step, m.loss, m.lr, m.tau, m.grad_norm
                );
            }
            if m.step % self.config.checkpoint_every == 0 || self.is_done() {
                last = Some(self.save()?);
            }
        }
        match last {
            Some(p) => Ok(p),
            None => self.save(),
        }
    }
}

/// Loads the manifest, trains (optionally from a checkpoint) and returns
/// the final checkpoint path.
pub fn run_pretraining(config: &TrainConfig, resume: Option<&Path>) -> Result<PathBuf> {
    config.validate()?;
    let corpus = Corpus::load(
        &config.manifest,
        &config.frontend,
        config.max_skipped_clips,
        config.threads,
    )?;
    info!(
        "{} clips, normalization mean {:.4} std {:.4}",
        corpus.len(),
        corpus.stats.mean,
        corpus.stats.std
    );
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config.clone(), corpus, checkpoint::load(p)?)?,
        None => Trainer::new(config.clone(), corpus)?,
    };
    trainer.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_endpoints() {
        assert_eq!(lr_schedule(0, 3e-4, 100, 2000), 0.0);
        assert_eq!(lr_schedule(100, 3e-4, 100, 2000), 3e-4);
        assert!(lr_schedule(2000, 3e-4, 100, 2000) < 1e-8 * 3e-4);
        assert!((lr_schedule(50, 3e-4, 100, 2000) - 1.5e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new([2], vec![1.0f64, -2.0]).unwrap());
        let mut mom = Moments::zeros_like(&p);
        let opt = AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        };
        adamw_step(&mut p, &[Tensor::zeros([2])], &mut mom, 1, 0.1, &opt).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0 * (1.0 - 0.1 * 0.05), -2.0 * (1.0 - 0.1 * 0.05)]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::<f32>::zeros([2]));
        let mut mom = Moments::zeros_like(&p);
        let opt = TrainConfig::desk("m", "o").adamw();
        assert!(adamw_step(&mut p, &[Tensor::zeros([3])], &mut mom, 1, 0.1, &opt).is_err());
        assert!(adamw_step(&mut p, &[], &mut mom, 1, 0.1, &opt).is_err());
        assert!(adamw_step(&mut p, &[Tensor::zeros([2])], &mut mom, 0, 0.1, &opt).is_err());
    }

    #[test]
    fn desk_config_validates_and_round_trips() {
        let c = TrainConfig::desk("data/pretrain.jsonl", "run");
        c.validate().unwrap();
        assert_eq!(c.warmup(), 100);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), c);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["learning_rate"] = serde_json::json!(1.0);
        assert!(TrainConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn grid_mismatch_rejected() {
        let mut c = TrainConfig::desk("m", "o");
        c.frontend.n_mels = 48;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk("m", "o");
        c.base_lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn epoch_orders_are_permutations_and_differ() {
        let a = epoch_order(1, 0, 50);
        let b = epoch_order(1, 1, 50);
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(1, 0, 50));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let r = vec![StepMetrics {
            step: 1,
            loss: 0.25,
            lr: 3e-6,
            tau: 0.996002,
            grad_norm: 1.5,
        }];
        let text = metrics_csv(&r);
        assert!(text.starts_with("step,loss,lr,tau,grad_norm\n1,0.25,"));
        assert_eq!(parse_metrics_csv(&text).unwrap(), r);
    }
}
