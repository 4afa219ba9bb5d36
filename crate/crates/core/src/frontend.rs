//! Log-mel front end: STFT, HTK mel filterbank, log floor, pad/crop and
//! corpus normalization.

use std::f64::consts::PI;

use rand::{Rng, RngCore};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wav::WaveForm;

/// Floor added to mel energies before the log.
pub const LOG_EPS: f32 = 1e-5;

/// Value of a silent mel bin, also used for right padding.
pub fn log_floor() -> f32 {
    LOG_EPS.ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Segment duration `d` in seconds the model sees per example.
    pub duration_s: f64,
    pub target_frames: usize,
}

impl FrontendConfig {
    /// 16 kHz, 25 ms Hann window, 10 ms hop, 80 mels over 50-8000 Hz,
    /// cropped to `duration_s` rounded down to a multiple of 16 frames.
    pub fn for_duration(duration_s: f64) -> Self {
        let mut cfg = Self {
            sample_rate: 16_000,
            n_fft: 400,
            hop: 160,
            n_mels: 80,
            f_min: 50.0,
            f_max: 8000.0,
            duration_s,
            target_frames: 0,
        };
        let frames = cfg.frames_for_samples((cfg.sample_rate as f64 * duration_s).round() as usize);
        cfg.target_frames = frames / 16 * 16;
        cfg
    }

    /// 80 mels x 208 frames (d = 2.1 s).
    pub fn paper() -> Self {
        Self::for_duration(2.1)
    }

    /// 40 mels x 64 frames, for patch side 8.
    pub fn desk() -> Self {
        Self {
            n_mels: 40,
            duration_s: 0.64,
            target_frames: 64,
            ..Self::for_duration(0.64)
        }
    }

    /// Frames produced by a centered STFT over `n` samples.
    pub fn frames_for_samples(&self, n: usize) -> usize {
        n / self.hop + 1
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self, patch_side: usize) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.sample_rate == 0 || self.n_fft < 2 || self.hop == 0 {
            return bad("sample_rate, n_fft and hop must be positive".into());
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return bad(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got {}..{}",
                self.f_min, self.f_max
            ));
        }
        if patch_side == 0 || self.n_mels == 0 || !self.n_mels.is_multiple_of(patch_side) {
            return bad(format!(
                "n_mels {} is not a positive multiple of patch side {patch_side}",
                self.n_mels
            ));
        }
        if self.target_frames == 0 || !self.target_frames.is_multiple_of(patch_side) {
            return bad(format!(
                "target_frames {} is not a positive multiple of patch side {patch_side}",
                self.target_frames
            ));
        }
        Ok(())
    }
}

/// Log mel energies, `[n_mels x frames]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f32>,
    n_mels: usize,
    frames: usize,
}

impl MelSpectrogram {
    pub fn new(n_mels: usize, frames: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_mels * frames {
            return Err(Error::Input(format!(
                "{} values for a {n_mels}x{frames} spectrogram",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("spectrogram has non-finite entries".into()));
        }
        Ok(Self {
            values,
            n_mels,
            frames,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.frames + frame]
    }

    /// Mean over time for each mel row.
    pub fn time_average(&self) -> Vec<f32> {
        self.values
            .chunks(self.frames)
            .map(|r| r.iter().sum::<f32>() / self.frames as f32)
            .collect()
    }
}

/// Triangular filters on the HTK mel scale.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    weights: Vec<f32>,
    n_mels: usize,
    n_bins: usize,
    centers_hz: Vec<f64>,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[f32] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Peak frequency of each filter.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Index of the filter whose center is closest to `hz`.
    pub fn nearest_row(&self, hz: f64) -> usize {
        self.centers_hz
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - hz).abs().total_cmp(&(b.1 - hz).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self
                .row(m)
                .iter()
                .zip(power)
                .map(|(w, p)| *w as f64 * p)
                .sum();
        }
    }
}

pub fn mel_filterbank(config: &FrontendConfig) -> Result<MelFilterbank> {
    if config.n_mels == 0 || config.n_fft < 2 || config.f_min >= config.f_max {
        return Err(Error::Config(format!(
            "cannot build a filterbank from n_mels={} n_fft={} f_min={} f_max={}",
            config.n_mels, config.n_fft, config.f_min, config.f_max
        )));
    }
    let n_bins = config.n_bins();
    let bin_hz = config.sample_rate as f64 / config.n_fft as f64;
    let (lo, hi) = (hz_to_mel(config.f_min), hz_to_mel(config.f_max));
    let step = (hi - lo) / (config.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect();
    let mut weights = vec![0f32; config.n_mels * n_bins];
    for m in 0..config.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            *w = rise.min(fall).max(0.0) as f32;
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; \
                 n_mels={} is too many for n_fft={}",
                config.n_mels, config.n_fft
            )));
        }
    }
    Ok(MelFilterbank {
        weights,
        n_mels: config.n_mels,
        n_bins,
        centers_hz: edges[1..=config.n_mels].to_vec(),
    })
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Log-mel spectrogram of `wave`: centered reflect-padded Hann STFT, power,
/// mel projection, `ln(x + 1e-5)`.
pub fn log_mel(wave: &WaveForm, config: &FrontendConfig) -> Result<MelSpectrogram> {
    let bank = mel_filterbank(config)?;
    log_mel_with(wave, config, &bank)
}

/// Same as [`log_mel`] with a prebuilt filterbank.
pub fn log_mel_with(
    wave: &WaveForm,
    config: &FrontendConfig,
    bank: &MelFilterbank,
) -> Result<MelSpectrogram> {
    if wave.samples.is_empty() {
        return Err(Error::Input("empty waveform".into()));
    }
    if wave.sample_rate != config.sample_rate {
        return Err(Error::Input(format!(
            "waveform is {} Hz but the front end expects {} Hz (no resampling)",
            wave.sample_rate, config.sample_rate
        )));
    }
    let n_fft = config.n_fft;
    let pad = (n_fft / 2) as isize;
    let frames = config.frames_for_samples(wave.samples.len());
    let window = hann(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0f64; config.n_bins()];
    let mut mel = vec![0f64; config.n_mels];
    let mut values = vec![0f32; config.n_mels * frames];
    for t in 0..frames {
        let start = (t * config.hop) as isize - pad;
        for (i, (b, w)) in buf.iter_mut().zip(&window).enumerate() {
            let s = wave.samples[reflect(start + i as isize, wave.samples.len())];
            *b = Complex::new(s as f64 * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        bank.apply(&power, &mut mel);
        for (m, e) in mel.iter().enumerate() {
            values[m * frames + t] = (*e + LOG_EPS as f64).ln() as f32;
        }
    }
    MelSpectrogram::new(config.n_mels, frames, values)
}

/// How to choose the kept window when cropping.
pub enum Crop<'a> {
    Center,
    Random(&'a mut dyn RngCore),
}

/// Crops (contiguous window) or right-pads with the log floor to exactly
/// `target_frames` columns.
pub fn pad_or_crop(mel: &MelSpectrogram, target_frames: usize, crop: Crop<'_>) -> MelSpectrogram {
    let (rows, frames) = (mel.n_mels, mel.frames);
    if frames == target_frames {
        return mel.clone();
    }
    let mut values = Vec::with_capacity(rows * target_frames);
    if frames > target_frames {
        let slack = frames - target_frames;
        let start = match crop {
            Crop::Center => slack / 2,
            Crop::Random(rng) => rng.random_range(0..=slack),
        };
        for r in 0..rows {
            values.extend_from_slice(&mel.values[r * frames + start..r * frames + start + target_frames]);
        }
    } else {
        for r in 0..rows {
            values.extend_from_slice(&mel.values[r * frames..(r + 1) * frames]);
            values.extend(std::iter::repeat_n(log_floor(), target_frames - frames));
        }
    }
    MelSpectrogram {
        values,
        n_mels: rows,
        frames: target_frames,
    }
}

/// Global mean/std of a training corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: f32,
    pub std: f32,
}

impl NormStats {
    pub fn from_corpus<'a>(mels: impl IntoIterator<Item = &'a MelSpectrogram>) -> Result<Self> {
        let (mut n, mut sum, mut sum_sq) = (0usize, 0f64, 0f64);
        for mel in mels {
            for &v in &mel.values {
                n += 1;
                sum += v as f64;
                sum_sq += v as f64 * v as f64;
            }
        }
        if n == 0 {
            return Err(Error::Input("cannot compute statistics of an empty corpus".into()));
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        Ok(Self {
            mean: mean as f32,
            std: var.sqrt() as f32,
        })
    }
}

/// Elementwise `(x - mean) / std`.
pub fn normalize(mel: &MelSpectrogram, stats: NormStats) -> Result<MelSpectrogram> {
    if !(stats.std > 0.0 && stats.std.is_finite() && stats.mean.is_finite()) {
        return Err(Error::Config(format!(
            "normalization needs a positive finite std, got {}",
            stats.std
        )));
    }
    Ok(MelSpectrogram {
        values: mel
            .values
            .iter()
            .map(|v| (v - stats.mean) / stats.std)
            .collect(),
        n_mels: mel.n_mels,
        frames: mel.frames,
    })
}

const MEL_MAGIC: &[u8; 8] = b"MELSPEC1";

/// `MELSPEC1`, rows and cols as u32 LE, then row-major f32 LE.
pub fn encode_mel_dump(mel: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * mel.values.len());
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&(mel.n_mels as u32).to_le_bytes());
    out.extend_from_slice(&(mel.frames as u32).to_le_bytes());
    for v in &mel.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mel_dump(bytes: &[u8]) -> Result<MelSpectrogram> {
    if bytes.len() < 16 || &bytes[..8] != MEL_MAGIC {
        return Err(Error::Input("not a MELSPEC1 dump".into()));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != rows * cols * 4 {
        return Err(Error::Input(format!(
            "MELSPEC1 declares {rows}x{cols} but carries {} bytes",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    MelSpectrogram::new(rows, cols, values)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tone(hz: f64, seconds: f64) -> WaveForm {
        let n = (16000.0 * seconds) as usize;
        let samples = (0..n)
            .map(|i| (0.5 * (2.0 * PI * hz * i as f64 / 16000.0).sin()) as f32)
            .collect();
        WaveForm::new(samples, 16000).unwrap()
    }

    #[test]
    fn paper_config_shapes() {
        let cfg = FrontendConfig::paper();
        assert_eq!((cfg.n_mels, cfg.target_frames), (80, 208));
        assert_eq!(FrontendConfig::for_duration(3.2).target_frames, 320);
        assert_eq!(FrontendConfig::for_duration(6.4).target_frames, 640);
        cfg.validate(16).unwrap();
        FrontendConfig::desk().validate(8).unwrap();
        assert!(FrontendConfig::paper().validate(3).is_err());
    }

    #[test]
    fn invalid_band_rejected() {
        let mut cfg = FrontendConfig::paper();
        cfg.f_max = 9000.0;
        assert!(cfg.validate(16).is_err());
        cfg.f_max = 40.0;
        assert!(cfg.validate(16).is_err());
    }

    #[test]
    fn filterbank_rows_positive_and_ordered() {
        let bank = mel_filterbank(&FrontendConfig::paper()).unwrap();
        assert_eq!((bank.n_mels(), bank.n_bins()), (80, 201));
        for m in 0..80 {
            assert!(bank.row(m).iter().all(|&w| w >= 0.0));
            assert!(bank.row(m).iter().sum::<f32>() > 0.0);
        }
        assert!(bank.centers_hz().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn too_many_mels_is_config_error() {
        let cfg = FrontendConfig {
            n_fft: 64,
            n_mels: 128,
            ..FrontendConfig::paper()
        };
        assert!(matches!(mel_filterbank(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn silence_is_log_floor() {
        let cfg = FrontendConfig::paper();
        let mel = log_mel(&WaveForm::new(vec![0.0; 4000], 16000).unwrap(), &cfg).unwrap();
        assert!(mel.values().iter().all(|&v| v == log_floor()));
    }

    #[test]
    fn frame_count_for_2_1_seconds() {
        let cfg = FrontendConfig::paper();
        let mel = log_mel(&tone(300.0, 2.1), &cfg).unwrap();
        assert_eq!(mel.frames(), 211);
        assert_eq!(mel.n_mels(), 80);
    }

    #[test]
    fn errors_on_empty_and_wrong_rate() {
        let cfg = FrontendConfig::paper();
        assert!(log_mel(&WaveForm::new(vec![], 16000).unwrap(), &cfg).is_err());
        assert!(log_mel(&WaveForm::new(vec![0.0; 100], 8000).unwrap(), &cfg).is_err());
    }

    #[test]
    fn very_short_input_still_finite() {
        let cfg = FrontendConfig::paper();
        let mel = log_mel(&WaveForm::new(vec![0.3, -0.2, 0.1], 16000).unwrap(), &cfg).unwrap();
        assert_eq!(mel.frames(), 1);
        assert!(mel.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pad_crop_rules() {
        let cfg = FrontendConfig::paper();
        let mel = log_mel(&tone(500.0, 2.1), &cfg).unwrap();
        let c = pad_or_crop(&mel, 208, Crop::Center);
        assert_eq!(c.frames(), 208);
        assert_eq!(c.get(10, 0), mel.get(10, 1));
        assert_eq!(pad_or_crop(&c, 208, Crop::Center), c);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = pad_or_crop(&mel, 208, Crop::Random(&mut rng));
        assert_eq!(r.frames(), 208);

        let short = MelSpectrogram::new(2, 100, vec![1.0; 200]).unwrap();
        let p = pad_or_crop(&short, 208, Crop::Center);
        assert_eq!(p.frames(), 208);
        for row in 0..2 {
            assert!((0..100).all(|t| p.get(row, t) == 1.0));
            assert!((100..208).all(|t| p.get(row, t) == log_floor()));
        }
    }

    #[test]
    fn normalize_rules() {
        let mel = MelSpectrogram::new(2, 2, vec![3.0; 4]).unwrap();
        let id = normalize(&mel, NormStats { mean: 0.0, std: 1.0 }).unwrap();
        assert_eq!(id, mel);
        let n = normalize(&mel, NormStats { mean: 1.0, std: 4.0 }).unwrap();
        assert!(n.values().iter().all(|&v| v == 0.5));
        assert!(normalize(&mel, NormStats { mean: 0.0, std: 0.0 }).is_err());
    }

    #[test]
    fn mel_dump_round_trip_and_layout() {
        let mel = MelSpectrogram::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let bytes = encode_mel_dump(&mel);
        assert_eq!(&bytes[..8], b"MELSPEC1");
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(decode_mel_dump(&bytes).unwrap(), mel);
        assert!(decode_mel_dump(&bytes[..20]).is_err());
    }
}
