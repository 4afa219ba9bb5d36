//! Context encoder, EMA target encoder and predictor.

mod objective;
mod params;
mod vit;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use ajepa_tensor::{Real, SmoothL1Kind, Tensor};

use crate::error::{Error, Result};

pub use objective::{
    batch_gradients, ema_update, forward_training_step, jepa_loss, loss_graph, smoothed_l1,
    step_gradients, tau_schedule, BatchGradients, EmaSchedule, LossNodes, Representations,
    StepGradients,
};
pub use params::{Bound, ParamSet};
pub use vit::{encode, predict, Indices, Model};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEmbedKind {
    #[default]
    Sinusoidal,
    Learned,
}

/// Which reading of the smoothed L1 distance the loss uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Vector,
    Elementwise,
}

impl From<LossKind> for SmoothL1Kind {
    fn from(k: LossKind) -> Self {
        match k {
            LossKind::Vector => SmoothL1Kind::Vector,
            LossKind::Elementwise => SmoothL1Kind::Elementwise,
        }
    }
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub predictor_dim: usize,
    pub predictor_layers: usize,
    pub predictor_heads: usize,
    pub patch_side: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Target encoder sees the whole input; targets are picked after
    /// encoding.
    #[serde(default)]
    pub latent_target_masking: bool,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub pos_embed: PosEmbedKind,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

impl ModelConfig {
    /// ViT-Base encoder, 8-layer 512-wide predictor, 16x16 patches on an
    /// 80x208 input.
    pub fn paper() -> Self {
        Self {
            embed_dim: 768,
            encoder_layers: 12,
            encoder_heads: 12,
            predictor_dim: 512,
            predictor_layers: 8,
            predictor_heads: 16,
            patch_side: 16,
            grid_rows: 5,
            grid_cols: 13,
            latent_target_masking: false,
            loss: LossKind::Vector,
            pos_embed: PosEmbedKind::Sinusoidal,
            mlp_ratio: 4,
        }
    }

    /// 5x8 grid of 8x8 patches, D = 64.
    pub fn desk() -> Self {
        Self {
            embed_dim: 64,
            encoder_layers: 2,
            encoder_heads: 2,
            predictor_dim: 32,
            predictor_layers: 2,
            predictor_heads: 2,
            patch_side: 8,
            grid_rows: 5,
            grid_cols: 8,
            ..Self::paper()
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.encoder_heads == 0 || !self.embed_dim.is_multiple_of(self.encoder_heads) {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.encoder_heads
            ));
        }
        if self.predictor_dim == 0
            || self.predictor_heads == 0
            || !self.predictor_dim.is_multiple_of(self.predictor_heads)
        {
            return bad(format!(
                "predictor_dim {} not divisible by {} heads",
                self.predictor_dim, self.predictor_heads
            ));
        }
        if !self.embed_dim.is_multiple_of(4) || !self.predictor_dim.is_multiple_of(4) {
            return bad("embedding widths must be multiples of 4 for 2-D sin-cos positions".into());
        }
        if self.patch_side == 0 || self.num_patches() < 2 || self.mlp_ratio == 0 {
            return bad("grid needs at least two patches of positive side".into());
        }
        Ok(())
    }
}

/// 2-D sin-cos table `[rows * cols, dim]`. The first half of the channels
/// encodes the row, the second half the column; within each half channel
/// `2i` is `sin(pos * w_i)` and `2i + 1` is `cos(pos * w_i)` with
/// `w_i = 10000^(-i / (dim / 4))`.
pub fn sinusoidal_pos_embed(rows: usize, cols: usize, dim: usize) -> Result<Tensor<f64>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional embedding width {dim} is not a positive multiple of 4"
        )));
    }
    let quarter = dim / 4;
    let half = dim / 2;
    let mut data = vec![0f64; rows * cols * dim];
    for r in 0..rows {
        for c in 0..cols {
            let row = &mut data[(r * cols + c) * dim..(r * cols + c + 1) * dim];
            for i in 0..quarter {
                let w = 10000f64.powf(-(i as f64) / quarter as f64);
                row[2 * i] = (r as f64 * w).sin();
                row[2 * i + 1] = (r as f64 * w).cos();
                row[half + 2 * i] = (c as f64 * w).sin();
                row[half + 2 * i + 1] = (c as f64 * w).cos();
            }
        }
    }
    Ok(Tensor::new([rows * cols, dim], data)?)
}

/// Context encoder weights, EMA target encoder weights, predictor weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub theta: ParamSet<T>,
    pub theta_bar: ParamSet<T>,
    pub phi: ParamSet<T>,
}

const INIT_STD: f64 = 0.02;

impl ModelParams<f32> {
    /// Truncated-normal projections, zero biases, unit layer-norm gains.
    /// The target encoder starts as an exact copy of the context encoder.
    pub fn init(config: &ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        Self::init_with_std(config, INIT_STD, rng)
    }

    /// Context-encoder weights alone, drawn exactly as the first part of
    /// [`ModelParams::init`].
    pub fn init_encoder(config: &ModelConfig, rng: &mut dyn RngCore) -> Result<ParamSet<f32>> {
        config.validate()?;
        Ok(vit::init_encoder(config, INIT_STD, rng))
    }

    pub fn init_with_std(config: &ModelConfig, std: f64, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let theta = vit::init_encoder(config, std, rng);
        let phi = vit::init_predictor(config, std, rng);
        Ok(Self {
            theta_bar: theta.clone(),
            theta,
            phi,
        })
    }
}

impl<T: Real> ModelParams<T> {
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            theta: self.theta.cast(),
            theta_bar: self.theta_bar.cast(),
            phi: self.phi.cast(),
        }
    }

    pub fn numel(&self) -> usize {
        self.theta.numel() + self.theta_bar.numel() + self.phi.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_embedding_is_sin0_cos0() {
        let t = sinusoidal_pos_embed(5, 13, 64).unwrap();
        let row = t.row(0);
        for i in (0..64).step_by(2) {
            assert_eq!(row[i], 0.0);
            assert_eq!(row[i + 1], 1.0);
        }
    }

    #[test]
    fn width_must_be_multiple_of_four() {
        assert!(sinusoidal_pos_embed(5, 13, 62).is_err());
        assert!(sinusoidal_pos_embed(5, 13, 0).is_err());
    }

    #[test]
    fn configs_validate() {
        ModelConfig::paper().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        let bad = ModelConfig {
            encoder_heads: 5,
            ..ModelConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let mut v = serde_json::to_value(ModelConfig::desk()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
