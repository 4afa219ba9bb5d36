//! Finite-difference checks of every tensor op and of the training loss
//! with respect to the context encoder and predictor, in 64-bit floats.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ajepa_tensor::{grad_check_multi, Coords, Graph, Result as TResult, SmoothL1Kind, Tensor, Var};

use crate::error::{Error, Result};
use crate::mask::{MaskSpec, MaskingConfig};
use crate::model::{loss_graph, Bound, Indices, Model, ModelConfig, ModelParams};

/// Finite-difference step for the op checks.
pub const OP_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn randn(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Contracts `x` with a fixed random tensor so every output coordinate
/// gets a distinct, non-trivial upstream gradient.
fn project(g: &mut Graph<f64>, x: Var, rng_seed: u64) -> TResult<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = randn(g.shape(x), 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> TResult<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: OpFn,
}

/// Random batch of rows whose L1 norms of difference all stay at least
/// `margin` away from 1 and whose entries stay away from 0.
fn smooth_l1_inputs(rows: usize, cols: usize, rng: &mut ChaCha8Rng, margin: f64) -> (Tensor<f64>, Tensor<f64>) {
    let a = randn(&[rows, cols], 1.0, rng);
    let mut diff = vec![0f64; rows * cols];
    for r in 0..rows {
        // Alternate between the quadratic and the linear regime, with one
        // row just inside each side of the switch.
        let target: f64 = match r % 4 {
            0 => rng.random_range(0.2..0.8),
            1 => rng.random_range(1.3..4.0),
            2 => 1.0 - 5.0 * margin,
            _ => 1.0 + 5.0 * margin,
        };
        let raw: Vec<f64> = (0..cols)
            .map(|_| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * rng.random_range(0.5..1.5)
            })
            .collect();
        let l1: f64 = raw.iter().map(|v| v.abs()).sum();
        for c in 0..cols {
            diff[r * cols + c] = raw[c] * target / l1;
        }
    }
    let b = Tensor::from_fn([rows, cols], |i| a.data()[i] - diff[i]);
    (a, b)
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let (m, k, n) = (r.random_range(2..5), r.random_range(2..5), r.random_range(2..5));
    let mut cases: Vec<OpCase> = Vec::new();
    let mut push = |name, inputs, f: OpFn| cases.push(OpCase { name, inputs, f });
    let s = seed;
    push("add", vec![randn(&[m, n], 1.0, r), randn(&[m, n], 1.0, r)], Box::new(move |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, s)
    }));
    push("add_broadcast", vec![randn(&[2, m, n], 1.0, r), randn(&[n], 1.0, r)], Box::new(move |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, s)
    }));
    push("sub", vec![randn(&[m, n], 1.0, r), randn(&[n], 1.0, r)], Box::new(move |g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y, s)
    }));
    push("mul", vec![randn(&[m, n], 1.0, r), randn(&[m, n], 1.0, r)], Box::new(move |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, s)
    }));
    push("mul_broadcast", vec![randn(&[m, n], 1.0, r), randn(&[n], 1.0, r)], Box::new(move |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, s)
    }));
    push("scale", vec![randn(&[m, n], 1.0, r)], Box::new(move |g, v| {
        let y = g.scale(v[0], -1.7);
        project(g, y, s)
    }));
    push("matmul", vec![randn(&[m, k], 1.0, r), randn(&[k, n], 1.0, r)], Box::new(move |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, s)
    }));
    push("matmul_batched", vec![randn(&[2, m, k], 1.0, r), randn(&[2, k, n], 1.0, r)], Box::new(move |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, s)
    }));
    push("matmul_shared_rhs", vec![randn(&[2, m, k], 1.0, r), randn(&[k, n], 1.0, r)], Box::new(move |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, s)
    }));
    push("transpose", vec![randn(&[m, n], 1.0, r)], Box::new(move |g, v| {
        let y = g.transpose(v[0])?;
        project(g, y, s)
    }));
    push("softmax", vec![randn(&[m, n], 2.0, r)], Box::new(move |g, v| {
        let y = g.softmax(v[0]);
        project(g, y, s)
    }));
    push(
        "layer_norm",
        vec![randn(&[m, n + 2], 1.0, r), randn(&[n + 2], 1.0, r), randn(&[n + 2], 1.0, r)],
        Box::new(move |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
            project(g, y, s)
        }),
    );
    push("gelu", vec![randn(&[m, n], 2.0, r)], Box::new(move |g, v| {
        let y = g.gelu(v[0]);
        project(g, y, s)
    }));
    // Points straddling the GELU curvature peak and tails.
    push(
        "gelu_edges",
        vec![Tensor::new([8], vec![-4.0, -3.0, -1.5, -0.75, -1e-3, 1e-3, 0.75, 4.0]).expect("8 values")],
        Box::new(move |g, v| {
            let y = g.gelu(v[0]);
            project(g, y, s)
        }),
    );
    push("index_select", vec![randn(&[m + 2, n], 1.0, r)], Box::new(move |g, v| {
        let y = g.index_select(v[0], &[m + 1, 0, 1, 0])?;
        project(g, y, s)
    }));
    push("concat_rows", vec![randn(&[m, n], 1.0, r), randn(&[k, n], 1.0, r)], Box::new(move |g, v| {
        let y = g.concat(&[v[0], v[1]], 0)?;
        project(g, y, s)
    }));
    push("concat_cols", vec![randn(&[m, n], 1.0, r), randn(&[m, k], 1.0, r)], Box::new(move |g, v| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        project(g, y, s)
    }));
    push("slice", vec![randn(&[m, n + 3], 1.0, r)], Box::new(move |g, v| {
        let y = g.slice(v[0], 1, 1, n + 2)?;
        project(g, y, s)
    }));
    push("reshape", vec![randn(&[m, n], 1.0, r)], Box::new(move |g, v| {
        let y = g.reshape(v[0], &[n, m])?;
        project(g, y, s)
    }));
    push("sum", vec![randn(&[m, n], 1.0, r)], Box::new(move |g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.sum(y))
    }));
    push("mean", vec![randn(&[m, n], 1.0, r)], Box::new(move |g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.mean(y))
    }));
    push("sum_axis", vec![randn(&[2, m, n], 1.0, r)], Box::new(move |g, v| {
        let y = g.sum_axis(v[0], 1)?;
        project(g, y, s)
    }));
    push("mean_axis", vec![randn(&[2, m, n], 1.0, r)], Box::new(move |g, v| {
        let y = g.mean_axis(v[0], 2)?;
        project(g, y, s)
    }));
    let (a, b) = smooth_l1_inputs(8, n + 2, r, 1e-3);
    push("smooth_l1_vector", vec![a, b], Box::new(move |g, v| {
        let y = g.smooth_l1(v[0], v[1], SmoothL1Kind::Vector)?;
        project(g, y, s)
    }));
    let (a, b) = smooth_l1_inputs(8, n + 2, r, 1e-3);
    push("smooth_l1_elementwise", vec![a, b], Box::new(move |g, v| {
        let y = g.smooth_l1(v[0], v[1], SmoothL1Kind::Elementwise)?;
        project(g, y, s)
    }));
    push(
        "attention_block",
        vec![randn(&[m + 1, 8], 1.0, r), randn(&[8, 24], 0.4, r), randn(&[8, 8], 0.4, r)],
        Box::new(move |g, v| {
            let qkv = g.matmul(v[0], v[1])?;
            let mut heads = Vec::new();
            for h in 0..2 {
                let q = g.slice(qkv, 1, 4 * h, 4 * h + 4)?;
                let k = g.slice(qkv, 1, 8 + 4 * h, 12 + 4 * h)?;
                let val = g.slice(qkv, 1, 16 + 4 * h, 20 + 4 * h)?;
                let kt = g.transpose(k)?;
                let sc = g.matmul(q, kt)?;
                let sc = g.scale(sc, 0.5);
                let att = g.softmax(sc);
                heads.push(g.matmul(att, val)?);
            }
            let cat = g.concat(&heads, 1)?;
            let y = g.matmul(cat, v[2])?;
            let y = g.add(v[0], y)?;
            let y = g.gelu(y);
            project(g, y, s)
        }),
    );
    cases
}

/// Names accepted by [`op_checks`]' filter.
pub fn op_names() -> Vec<&'static str> {
    op_cases(0).into_iter().map(|c| c.name).collect()
}

/// Runs the op checks whose names are in `only` (all when `None`).
pub fn op_checks(seed: u64, only: Option<&[String]>) -> Result<Vec<CheckResult>> {
    if let Some(names) = only {
        let known = op_names();
        if let Some(bad) = names.iter().find(|n| !known.contains(&n.as_str())) {
            return Err(Error::Input(format!("unknown op {bad:?}; known: {}", known.join(", "))));
        }
    }
    let mut out = Vec::new();
    for case in op_cases(seed) {
        if only.is_some_and(|names| !names.iter().any(|n| n == case.name)) {
            continue;
        }
        let errs = grad_check_multi(&case.f, &case.inputs, OP_EPS, Coords::All)?;
        out.push(CheckResult {
            name: case.name.to_string(),
            max_rel_error: errs.into_iter().fold(0.0, f64::max),
        });
    }
    Ok(out)
}

/// Where the end-to-end check point puts the per-row loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossRegime {
    /// Every target row has `|u|_1` well below 1.
    Quadratic,
    /// Every target row has `|u|_1` well above 1 and no entry near 0.
    Linear,
    /// Every eighth row just above the switch, the rest well below.
    Mixed,
}

/// Where and how finely the end-to-end loss is probed.
///
/// Round-off in the loss is a few ulps of its value, and the error measure
/// has an absolute floor of 1e-8, so coordinates whose true gradient is zero
/// (attention key biases, for one) need `ulp(L) / eps` well under 1e-12.
/// A small predictor output keeps activations and the loss small; the step
/// grows when linear-regime rows push the loss up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckPoint {
    pub regime: LossRegime,
    pub eps: f64,
    pub init_std: f64,
    /// Multiplies the predictor's output projection.
    pub out_scale: f64,
}

impl CheckPoint {
    pub fn quadratic() -> Self {
        Self {
            regime: LossRegime::Quadratic,
            eps: 1e-5,
            init_std: 0.05,
            out_scale: 0.1,
        }
    }

    pub fn mixed() -> Self {
        Self {
            regime: LossRegime::Mixed,
            eps: 3e-4,
            init_std: 0.05,
            out_scale: 0.1,
        }
    }
}

/// Checks the gradient of the training loss with respect to every context
/// encoder and predictor tensor, at `coords` coordinates per tensor.
///
/// Targets are fixed offsets from the predictor's output at the check
/// point, chosen so no row sits near the regime switch and, in the linear
/// regime, no entry sits near the kink of `|u_i|`.
pub fn end_to_end_check(
    config: &ModelConfig,
    seed: u64,
    coords: Coords,
    point: &CheckPoint,
) -> Result<Vec<CheckResult>> {
    let CheckPoint {
        regime,
        eps,
        init_std,
        out_scale,
    } = *point;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ModelParams<f64> = ModelParams::init_with_std(config, init_std, &mut rng)?.cast();
    for name in ["proj.w", "proj.b"] {
        let i = params.phi.position(name).expect("predictor projection");
        params.phi.tensors_mut()[i].data_mut().iter_mut().for_each(|v| *v *= out_scale);
    }
    let model: Model<f64> = Model::new(config)?;
    let n = config.num_patches();
    let patches = randn(&[n, config.patch_side * config.patch_side], 1.0, &mut rng);
    let mask: MaskSpec = MaskingConfig::Unstructured { target_ratio: 0.5 }.sample(
        config.grid_rows,
        config.grid_cols,
        &mut rng,
    )?;
    let forward = |g: &mut Graph<f64>, theta: &Bound<'_, f64>, phi: &Bound<'_, f64>, zb: &Tensor<f64>| -> Result<Var> {
        let x = g.constant(patches.clone());
        let zb = g.constant(zb.clone());
        Ok(loss_graph(&model, g, theta, phi, x, zb, &mask)?.loss)
    };
    let z_hat = {
        let mut g = Graph::new();
        let theta = params.theta.bind(&mut g, false);
        let phi = params.phi.bind(&mut g, false);
        let x = g.constant(patches.clone());
        let z_c = model.encode_graph(&mut g, &theta, x, Indices::Subset(mask.context()))?;
        let z = model.predict_graph(&mut g, &phi, z_c, mask.context(), mask.target())?;
        g.value(z).clone()
    };
    let (rows, d) = (z_hat.shape()[0], z_hat.shape()[1]);
    let mut z_bar = z_hat.clone();
    for r in 0..rows {
        let l1: f64 = match regime {
            LossRegime::Quadratic => rng.random_range(0.2..0.8),
            LossRegime::Linear => rng.random_range(1.5..4.0),
            LossRegime::Mixed if r % 8 == 0 => rng.random_range(1.05..1.15),
            LossRegime::Mixed => rng.random_range(0.2..0.8),
        };
        let raw: Vec<f64> = (0..d)
            .map(|_| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * rng.random_range(0.5..1.5)
            })
            .collect();
        let total: f64 = raw.iter().map(|v| v.abs()).sum();
        for c in 0..d {
            z_bar.data_mut()[r * d + c] -= raw[c] * l1 / total;
        }
    }
    let n_theta = params.theta.len();
    let mut inputs: Vec<Tensor<f64>> = params.theta.tensors().to_vec();
    inputs.extend(params.phi.tensors().iter().cloned());
    let f = |g: &mut Graph<f64>, vars: &[Var]| -> TResult<Var> {
        let theta = Bound::from_vars(&params.theta, vars[..n_theta].to_vec()).expect("theta arity");
        let phi = Bound::from_vars(&params.phi, vars[n_theta..].to_vec()).expect("phi arity");
        match forward(g, &theta, &phi, &z_bar) {
            Ok(v) => Ok(v),
            Err(Error::Tensor(e)) => Err(e),
            Err(e) => panic!("loss graph construction failed: {e}"),
        }
    };
    let errs = grad_check_multi(f, &inputs, eps, coords)?;
    let mut out = Vec::new();
    for (i, e) in errs.iter().enumerate() {
        let name = if i < n_theta {
            format!("theta/{}", params.theta.names()[i])
        } else {
            format!("phi/{}", params.phi.names()[i - n_theta])
        };
        out.push(CheckResult {
            name,
            max_rel_error: *e,
        });
    }
    Ok(out)
}

/// Coordinates per tensor in the end-to-end check.
pub const END_TO_END_COORDS: usize = 8;

/// Every op check plus the end-to-end loss at both check points, the latter
/// summarized per weight set.
pub fn full_suite(config: &ModelConfig, seed: u64, only: Option<&[String]>) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(seed, only)?;
    if only.is_some() {
        return Ok(out);
    }
    for (label, point) in [("quadratic", CheckPoint::quadratic()), ("mixed", CheckPoint::mixed())] {
        let rs = end_to_end_check(config, seed, Coords::AtMost(END_TO_END_COORDS), &point)?;
        for set in ["theta", "phi"] {
            let worst = rs
                .iter()
                .filter(|r| r.name.starts_with(&format!("{set}/")))
                .fold(0f64, |m, r| m.max(r.max_rel_error));
            out.push(CheckResult {
                name: format!("loss/{set} ({label})"),
                max_rel_error: worst,
            });
        }
    }
    Ok(out)
}
