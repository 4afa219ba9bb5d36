//! Seeded synthetic clips: tones, chirps, band-limited noise and AM tones,
//! plus a corpus builder that writes WAV files and manifests.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::manifest::{Manifest, ManifestEntry, Split};
use crate::wav::{encode_wav, WaveForm};

pub const SAMPLE_RATE: u32 = 16_000;
const NYQUIST: f64 = SAMPLE_RATE as f64 / 2.0;
const PEAK: f64 = 0.5;
const FADE_S: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    Tone { f0: f64 },
    /// Linear sweep starting at `f0`, `sweep_rate` Hz per second.
    Chirp { f0: f64, sweep_rate: f64 },
    NoiseBand { low: f64, high: f64 },
    AmTone { f0: f64, am_rate: f64, am_depth: f64 },
}

impl Generator {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Generator::Tone { .. } => "tone",
            Generator::Chirp { .. } => "chirp",
            Generator::NoiseBand { .. } => "noise_band",
            Generator::AmTone { .. } => "am_tone",
        }
    }

    pub fn kind_index(&self) -> u32 {
        match self {
            Generator::Tone { .. } => 0,
            Generator::Chirp { .. } => 1,
            Generator::NoiseBand { .. } => 2,
            Generator::AmTone { .. } => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Tone,
    Chirp,
    NoiseBand,
    AmTone,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSpec {
    pub generator: Generator,
    pub duration_s: f64,
    pub label: u32,
    pub seed: u64,
    /// Adds white noise at this signal-to-noise ratio before normalizing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
}

fn check_freq(name: &str, f: f64) -> Result<()> {
    if !(f > 0.0 && f < NYQUIST) {
        return Err(Error::Config(format!("{name} = {f} Hz is outside (0, {NYQUIST})")));
    }
    Ok(())
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config(format!("clip duration {} must be positive", self.duration_s)));
        }
        match self.generator {
            Generator::Tone { f0 } => check_freq("f0", f0),
            Generator::Chirp { f0, sweep_rate } => {
                check_freq("f0", f0)?;
                check_freq("chirp end", f0 + sweep_rate * self.duration_s)
            }
            Generator::NoiseBand { low, high } => {
                check_freq("low", low)?;
                check_freq("high", high)?;
                if low >= high {
                    return Err(Error::Config(format!("noise band {low}..{high} is empty")));
                }
                Ok(())
            }
            Generator::AmTone { f0, am_rate, am_depth } => {
                check_freq("f0", f0)?;
                check_freq("am_rate", am_rate)?;
                if !(0.0..=1.0).contains(&am_depth) {
                    return Err(Error::Config(format!("AM depth {am_depth} outside [0, 1]")));
                }
                Ok(())
            }
        }?;
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::Config("snr_db must be finite".into()));
            }
        }
        Ok(())
    }
}

fn band_noise(n: usize, low: f64, high: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = SAMPLE_RATE as f64 / n as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * df;
        if f < low || f > high {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Deterministic 16 kHz synthesis with 10 ms raised-cosine fades, peak
/// normalized to 0.5.
pub fn generate_clip(spec: &ClipSpec) -> Result<WaveForm> {
    spec.validate()?;
    let sr = SAMPLE_RATE as f64;
    let n = ((spec.duration_s * sr).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let t = |i: usize| i as f64 / sr;
    let mut x: Vec<f64> = match spec.generator {
        Generator::Tone { f0 } => (0..n).map(|i| (2.0 * PI * f0 * t(i) + phase).sin()).collect(),
        Generator::Chirp { f0, sweep_rate } => (0..n)
            .map(|i| {
                let ti = t(i);
                (2.0 * PI * (f0 * ti + 0.5 * sweep_rate * ti * ti) + phase).sin()
            })
            .collect(),
        Generator::NoiseBand { low, high } => band_noise(n, low, high, &mut rng),
        Generator::AmTone { f0, am_rate, am_depth } => (0..n)
            .map(|i| {
                let ti = t(i);
                (1.0 + am_depth * (2.0 * PI * am_rate * ti).sin()) * (2.0 * PI * f0 * ti + phase).sin()
            })
            .collect(),
    };
    if let Some(snr) = spec.snr_db {
        let power = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
        for v in &mut x {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
    }
    let fade = ((FADE_S * sr) as usize).min(n / 2);
    for i in 0..fade {
        let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
    let peak = x.iter().fold(0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::Config("generated clip is silent".into()));
    }
    WaveForm::new(x.iter().map(|v| (v * PEAK / peak) as f32).collect(), SAMPLE_RATE)
}

/// Per-clip seed: first eight bytes of SHA-256 over the master seed and the
/// clip id.
pub fn clip_seed(master_seed: u64, clip_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(clip_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PitchTaskConfig {
    pub centers_hz: Vec<f64>,
    /// Relative jitter of each clip's f0 around its class center.
    pub jitter: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Generators a clip may use; drawn uniformly per clip.
    pub kinds: Vec<GeneratorKind>,
    /// Per-clip SNR drawn uniformly from this range; `None` for clean clips.
    #[serde(default)]
    pub snr_db: Option<(f64, f64)>,
}

impl Default for PitchTaskConfig {
    fn default() -> Self {
        Self {
            centers_hz: vec![220.0, 440.0, 880.0, 1760.0],
            jitter: 0.03,
            train_per_class: 50,
            test_per_class: 50,
            kinds: vec![GeneratorKind::Tone],
            snr_db: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub master_seed: u64,
    pub clip_duration_s: f64,
    pub pretrain_clips: usize,
    pub pitch_task: PitchTaskConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            clip_duration_s: 1.0,
            pretrain_clips: 2000,
            pitch_task: PitchTaskConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.pitch_task;
        if t.centers_hz.len() < 2 || t.kinds.is_empty() {
            return Err(Error::Config("pitch task needs at least two classes and one generator".into()));
        }
        if t.train_per_class == 0 || t.test_per_class == 0 {
            return Err(Error::Config("both pitch-task splits need clips".into()));
        }
        if !(0.0..0.5).contains(&t.jitter) {
            return Err(Error::Config(format!("jitter {} outside [0, 0.5)", t.jitter)));
        }
        if let Some((a, b)) = t.snr_db {
            if !(a <= b) {
                return Err(Error::Config(format!("SNR range {a}..{b} is empty")));
            }
        }
        Ok(())
    }
}

/// Mixed-kind unlabeled clip; the manifest label is the generator kind.
pub fn pretrain_clip(config: &CorpusConfig, index: usize) -> (String, ClipSpec) {
    let id = format!("pre-{index:05}");
    let seed = clip_seed(config.master_seed, &id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let d = config.clip_duration_s;
    let generator = match rng.random_range(0..4) {
        0 => Generator::Tone {
            f0: log_uniform(&mut rng, 100.0, 4000.0),
        },
        1 => {
            let f0 = log_uniform(&mut rng, 100.0, 4000.0);
            let f1 = log_uniform(&mut rng, 100.0, 4000.0);
            Generator::Chirp {
                f0,
                sweep_rate: (f1 - f0) / d,
            }
        }
        2 => {
            let low = log_uniform(&mut rng, 100.0, 4000.0);
            let width = rng.random_range(1.2..3.0);
            Generator::NoiseBand {
                low,
                high: (low * width).min(7900.0),
            }
        }
        _ => Generator::AmTone {
            f0: log_uniform(&mut rng, 100.0, 4000.0),
            am_rate: rng.random_range(2.0..20.0),
            am_depth: rng.random_range(0.3..1.0),
        },
    };
    let spec = ClipSpec {
        label: generator.kind_index(),
        generator,
        duration_s: d,
        seed,
        snr_db: None,
    };
    (id, spec)
}

/// Labeled pitch-class clip. Indices run over all classes, train split
/// first.
pub fn pitch_clip(config: &CorpusConfig, index: usize) -> (String, ClipSpec, Split) {
    let t = &config.pitch_task;
    let classes = t.centers_hz.len();
    let n_train = classes * t.train_per_class;
    let (split, local, per) = if index < n_train {
        (Split::Train, index, t.train_per_class)
    } else {
        (Split::Test, index - n_train, t.test_per_class)
    };
    let label = (local / per) as u32;
    let id = format!("pitch-{index:05}");
    let seed = clip_seed(config.master_seed, &id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let f0 = t.centers_hz[label as usize] * (1.0 + rng.random_range(-t.jitter..=t.jitter));
    let generator = match t.kinds[rng.random_range(0..t.kinds.len())] {
        GeneratorKind::Tone => Generator::Tone { f0 },
        GeneratorKind::AmTone => Generator::AmTone {
            f0,
            am_rate: rng.random_range(2.0..20.0),
            am_depth: rng.random_range(0.3..1.0),
        },
        GeneratorKind::Chirp => Generator::Chirp {
            f0,
            sweep_rate: f0 * rng.random_range(-0.2..0.2) / config.clip_duration_s,
        },
        GeneratorKind::NoiseBand => Generator::NoiseBand {
            low: f0 / 1.1,
            high: f0 * 1.1,
        },
    };
    let snr_db = t.snr_db.map(|(a, b)| if a == b { a } else { rng.random_range(a..b) });
    let spec = ClipSpec {
        generator,
        duration_s: config.clip_duration_s,
        label,
        seed,
        snr_db,
    };
    (id, spec, split)
}

pub fn pitch_clip_count(config: &CorpusConfig) -> usize {
    let t = &config.pitch_task;
    t.centers_hz.len() * (t.train_per_class + t.test_per_class)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusPaths {
    pub pretrain_manifest: PathBuf,
    pub pitch_manifest: PathBuf,
}

fn write_clips(
    out_dir: &Path,
    sub: &str,
    clips: Vec<(String, ClipSpec, Split)>,
    threads: usize,
) -> Result<Manifest> {
    let dir = out_dir.join(sub);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let threads = threads.max(1).min(clips.len().max(1));
    let chunk = clips.len().div_ceil(threads).max(1);
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = clips
            .chunks(chunk)
            .map(|part| {
                let dir = &dir;
                s.spawn(move || -> Result<()> {
                    for (id, spec, _) in part {
                        let wave = generate_clip(spec)?;
                        fsutil::write_atomic(&dir.join(format!("{id}.wav")), &encode_wav(&wave)?)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
    });
    results.into_iter().collect::<Result<()>>()?;
    Manifest::new(
        clips
            .into_iter()
            .map(|(id, spec, split)| ManifestEntry {
                path: format!("{sub}/{id}.wav"),
                clip_id: id,
                label: spec.label,
                split,
            })
            .collect(),
    )
}

/// Writes `pretrain/*.wav`, `pretrain.jsonl`, `pitch/*.wav` and
/// `pitch.jsonl` under `out_dir`.
pub fn build_corpus(config: &CorpusConfig, out_dir: &Path, threads: usize) -> Result<CorpusPaths> {
    config.validate()?;
    let pre = (0..config.pretrain_clips)
        .map(|i| {
            let (id, spec) = pretrain_clip(config, i);
            (id, spec, Split::Train)
        })
        .collect();
    let pre = write_clips(out_dir, "pretrain", pre, threads)?;
    let pitch = (0..pitch_clip_count(config)).map(|i| pitch_clip(config, i)).collect();
    let pitch = write_clips(out_dir, "pitch", pitch, threads)?;
    let paths = CorpusPaths {
        pretrain_manifest: out_dir.join("pretrain.jsonl"),
        pitch_manifest: out_dir.join("pitch.jsonl"),
    };
    pre.save(&paths.pretrain_manifest)?;
    pitch.save(&paths.pitch_manifest)?;
    Ok(paths)
}
