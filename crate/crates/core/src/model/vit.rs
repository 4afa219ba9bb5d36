use rand::RngCore;

use ajepa_tensor::{Graph, Real, Tensor, Var};

use super::params::{trunc_normal, Bound, ParamSet};
use super::{sinusoidal_pos_embed, ModelConfig, PosEmbedKind};
use crate::error::{Error, Result};
use crate::mask::PatchGrid;

const LN_EPS: f64 = 1e-6;

fn push_linear(set: &mut ParamSet<f32>, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut dyn RngCore) {
    set.push(format!("{name}.w"), trunc_normal(&[fan_in, fan_out], std, rng));
    set.push(format!("{name}.b"), Tensor::zeros([fan_out]));
}

fn push_norm(set: &mut ParamSet<f32>, name: &str, dim: usize) {
    set.push(format!("{name}.g"), Tensor::ones([dim]));
    set.push(format!("{name}.b"), Tensor::zeros([dim]));
}

fn push_blocks(set: &mut ParamSet<f32>, layers: usize, dim: usize, mlp_ratio: usize, std: f64, rng: &mut dyn RngCore) {
    for i in 0..layers {
        let p = format!("blocks.{i}");
        push_norm(set, &format!("{p}.ln1"), dim);
        push_linear(set, &format!("{p}.attn.qkv"), dim, 3 * dim, std, rng);
        push_linear(set, &format!("{p}.attn.proj"), dim, dim, std, rng);
        push_norm(set, &format!("{p}.ln2"), dim);
        push_linear(set, &format!("{p}.mlp.fc1"), dim, mlp_ratio * dim, std, rng);
        push_linear(set, &format!("{p}.mlp.fc2"), mlp_ratio * dim, dim, std, rng);
    }
}

pub(super) fn init_encoder(config: &ModelConfig, std: f64, rng: &mut dyn RngCore) -> ParamSet<f32> {
    let d = config.embed_dim;
    let mut set = ParamSet::new();
    push_linear(&mut set, "patch_embed", config.patch_side * config.patch_side, d, std, rng);
    if config.pos_embed == PosEmbedKind::Learned {
        set.push("pos_embed", trunc_normal(&[config.num_patches(), d], std, rng));
    }
    push_blocks(&mut set, config.encoder_layers, d, config.mlp_ratio, std, rng);
    push_norm(&mut set, "norm", d);
    set
}

pub(super) fn init_predictor(config: &ModelConfig, std: f64, rng: &mut dyn RngCore) -> ParamSet<f32> {
    let (d, dp) = (config.embed_dim, config.predictor_dim);
    let mut set = ParamSet::new();
    push_linear(&mut set, "embed", d, dp, std, rng);
    set.push("mask_token", trunc_normal(&[dp], std, rng));
    push_blocks(&mut set, config.predictor_layers, dp, config.mlp_ratio, std, rng);
    push_norm(&mut set, "norm", dp);
    push_linear(&mut set, "proj", dp, d, std, rng);
    set
}

/// Which patches to encode.
#[derive(Clone, Copy, Debug)]
pub enum Indices<'a> {
    All,
    Subset(&'a [usize]),
}

/// Architecture plus its fixed positional tables.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    config: ModelConfig,
    encoder_pos: Tensor<T>,
    predictor_pos: Tensor<T>,
    all: Vec<usize>,
}

fn linear<T: Real>(g: &mut Graph<T>, p: &Bound<'_, T>, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.var(&format!("{name}.w")))?;
    Ok(g.add(y, p.var(&format!("{name}.b")))?)
}

fn norm<T: Real>(g: &mut Graph<T>, p: &Bound<'_, T>, name: &str, x: Var) -> Result<Var> {
    Ok(g.layer_norm(x, p.var(&format!("{name}.g")), p.var(&format!("{name}.b")), T::of(LN_EPS))?)
}

fn attention<T: Real>(g: &mut Graph<T>, p: &Bound<'_, T>, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let dim = g.shape(x)[1];
    let dh = dim / heads;
    let qkv = linear(g, p, &format!("{prefix}.qkv"), x)?;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice(qkv, 1, h * dh, (h + 1) * dh)?;
        let k = g.slice(qkv, 1, dim + h * dh, dim + (h + 1) * dh)?;
        let v = g.slice(qkv, 1, 2 * dim + h * dh, 2 * dim + (h + 1) * dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale);
        let att = g.softmax(scores);
        outs.push(g.matmul(att, v)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    linear(g, p, &format!("{prefix}.proj"), merged)
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
pub(crate) fn block<T: Real>(g: &mut Graph<T>, p: &Bound<'_, T>, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let h = norm(g, p, &format!("{prefix}.ln1"), x)?;
    let a = attention(g, p, &format!("{prefix}.attn"), h, heads)?;
    let x = g.add(x, a)?;
    let h = norm(g, p, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, p, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{prefix}.mlp.fc2"), h)?;
    Ok(g.add(x, h)?)
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (r, c) = (config.grid_rows, config.grid_cols);
        Ok(Self {
            config: config.clone(),
            encoder_pos: sinusoidal_pos_embed(r, c, config.embed_dim)?.cast(),
            predictor_pos: sinusoidal_pos_embed(r, c, config.predictor_dim)?.cast(),
            all: (0..r * c).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn resolve<'a>(&'a self, indices: Indices<'a>) -> Result<&'a [usize]> {
        let idx = match indices {
            Indices::All => &self.all,
            Indices::Subset(s) => s,
        };
        if idx.is_empty() {
            return Err(Error::Input("cannot encode an empty index set".into()));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= self.all.len()) {
            return Err(Error::Input(format!(
                "patch index {bad} outside a {}-patch grid",
                self.all.len()
            )));
        }
        Ok(idx)
    }

    /// Encodes the selected rows of `patches` (`[N, p^2]`). Output rows
    /// follow the order of `indices`.
    pub fn encode_graph(
        &self,
        g: &mut Graph<T>,
        theta: &Bound<'_, T>,
        patches: Var,
        indices: Indices<'_>,
    ) -> Result<Var> {
        let idx = self.resolve(indices)?;
        let n = self.config.num_patches();
        if g.shape(patches) != [n, self.config.patch_side * self.config.patch_side] {
            return Err(Error::Input(format!(
                "patch tensor {:?} does not match a {}x{} grid of {}x{} patches",
                g.shape(patches),
                self.config.grid_rows,
                self.config.grid_cols,
                self.config.patch_side,
                self.config.patch_side
            )));
        }
        let x = g.index_select(patches, idx)?;
        let x = linear(g, theta, "patch_embed", x)?;
        let table = match self.config.pos_embed {
            PosEmbedKind::Sinusoidal => g.constant(self.encoder_pos.clone()),
            PosEmbedKind::Learned => theta.var("pos_embed"),
        };
        let pos = g.index_select(table, idx)?;
        let mut x = g.add(x, pos)?;
        for i in 0..self.config.encoder_layers {
            x = block(g, theta, &format!("blocks.{i}"), x, self.config.encoder_heads)?;
        }
        norm(g, theta, "norm", x)
    }

    /// Predicts target representations from context representations.
    ///
    /// Token sequence is `[embed(Z_C) + pos(C) ; mask_token + pos(T)]`; the
    /// trailing `|T|` outputs are projected back to the encoder width.
    pub fn predict_graph(
        &self,
        g: &mut Graph<T>,
        phi: &Bound<'_, T>,
        z_context: Var,
        context: &[usize],
        target: &[usize],
    ) -> Result<Var> {
        let ctx = self.resolve(Indices::Subset(context))?;
        let tgt = self.resolve(Indices::Subset(target))?;
        if g.shape(z_context) != [ctx.len(), self.config.embed_dim] {
            return Err(Error::Input(format!(
                "context representations {:?} do not match {} context indices",
                g.shape(z_context),
                ctx.len()
            )));
        }
        let mut seen = vec![false; self.all.len()];
        ctx.iter().for_each(|&i| seen[i] = true);
        if let Some(i) = tgt.iter().find(|&&i| seen[i]) {
            return Err(Error::Input(format!(
                "index {i} is in both the context and the target set"
            )));
        }
        let table = g.constant(self.predictor_pos.clone());
        let x = linear(g, phi, "embed", z_context)?;
        let ctx_pos = g.index_select(table, ctx)?;
        let x = g.add(x, ctx_pos)?;
        let tgt_pos = g.index_select(table, tgt)?;
        let queries = g.add(tgt_pos, phi.var("mask_token"))?;
        let mut h = g.concat(&[x, queries], 0)?;
        for i in 0..self.config.predictor_layers {
            h = block(g, phi, &format!("blocks.{i}"), h, self.config.predictor_heads)?;
        }
        let h = norm(g, phi, "norm", h)?;
        let total = ctx.len() + tgt.len();
        let h = g.slice(h, 0, ctx.len(), total)?;
        linear(g, phi, "proj", h)
    }
}

/// Encoder forward pass outside any training graph.
pub fn encode(
    model: &Model<f32>,
    theta: &ParamSet<f32>,
    grid: &PatchGrid,
    indices: Indices<'_>,
) -> Result<Tensor<f32>> {
    check_grid(model.config(), grid)?;
    let mut g = Graph::new();
    let p = theta.bind(&mut g, false);
    let patches = g.constant(grid.to_tensor());
    let out = model.encode_graph(&mut g, &p, patches, indices)?;
    Ok(g.value(out).clone())
}

/// Predictor forward pass outside any training graph.
pub fn predict(
    model: &Model<f32>,
    phi: &ParamSet<f32>,
    z_context: &Tensor<f32>,
    context: &[usize],
    target: &[usize],
) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let p = phi.bind(&mut g, false);
    let z = g.constant(z_context.clone());
    let out = model.predict_graph(&mut g, &p, z, context, target)?;
    Ok(g.value(out).clone())
}

pub(crate) fn check_grid(config: &ModelConfig, grid: &PatchGrid) -> Result<()> {
    if (grid.rows, grid.cols, grid.patch_side) != (config.grid_rows, config.grid_cols, config.patch_side) {
        return Err(Error::Input(format!(
            "{}x{} grid of {}-patches does not match the model's {}x{} grid of {}-patches",
            grid.rows, grid.cols, grid.patch_side, config.grid_rows, config.grid_cols, config.patch_side
        )));
    }
    Ok(())
}
