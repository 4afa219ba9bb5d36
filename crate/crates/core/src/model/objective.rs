use serde::{Deserialize, Serialize};

use ajepa_tensor::{smooth_l1_distance, Graph, Real, SmoothL1Kind, Tensor, Var};

use super::params::{Bound, ParamSet};
use super::vit::{check_grid, Indices, Model};
use super::{LossKind, ModelParams};
use crate::error::{Error, Result};
use crate::mask::{MaskSpec, PatchGrid};

/// Smoothed L1 distance between two vectors, switching regime on the L1
/// norm of their difference.
pub fn smoothed_l1(z: &[f64], z_prime: &[f64]) -> Result<f64> {
    Ok(smooth_l1_distance(z, z_prime, SmoothL1Kind::Vector)?)
}

/// Mean over rows of the smoothed L1 distance.
pub fn jepa_loss<T: Real>(z_hat: &Tensor<T>, z_bar: &Tensor<T>, kind: LossKind) -> Result<T> {
    if z_hat.shape() != z_bar.shape() || z_hat.rank() != 2 || z_hat.shape()[0] == 0 {
        return Err(Error::Input(format!(
            "loss needs two equal [|T|, D] matrices with |T| >= 1, got {:?} and {:?}",
            z_hat.shape(),
            z_bar.shape()
        )));
    }
    let rows = z_hat.shape()[0];
    let mut total = T::zero();
    for r in 0..rows {
        total = total + smooth_l1_distance(z_hat.row(r), z_bar.row(r), kind.into())?;
    }
    Ok(total / T::of(rows as f64))
}

/// Linear ramp of the EMA rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaSchedule {
    pub tau_0: f64,
    pub tau_t: f64,
    pub total_steps: u64,
}

impl EmaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau_0 && self.tau_0 <= self.tau_t && self.tau_t <= 1.0) || self.total_steps == 0 {
            return Err(Error::Config(format!(
                "EMA schedule needs 0 <= tau_0 <= tau_t <= 1 and total_steps >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn tau_schedule(step: u64, sched: &EmaSchedule) -> Result<f64> {
    sched.validate()?;
    if step > sched.total_steps {
        return Err(Error::Input(format!(
            "step {step} is past the schedule's {} steps",
            sched.total_steps
        )));
    }
    Ok(sched.tau_0 + (sched.tau_t - sched.tau_0) * step as f64 / sched.total_steps as f64)
}

/// `theta_bar <- tau * theta_bar + (1 - tau) * theta`, in place.
pub fn ema_update<T: Real>(theta_bar: &mut ParamSet<T>, theta: &ParamSet<T>, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Input(format!("EMA rate {tau} outside [0, 1]")));
    }
    if !theta_bar.same_layout(theta) {
        return Err(Error::Input("EMA update between differently shaped weight sets".into()));
    }
    // Blend in f64 and round once; f32 copies of tau and 1 - tau need not
    // sum to one.
    for (tb, t) in theta_bar.tensors_mut().iter_mut().zip(theta.tensors()) {
        for (a, b) in tb.data_mut().iter_mut().zip(t.data()) {
            *a = T::of(tau * a.to_f64_lossy() + (1.0 - tau) * b.to_f64_lossy());
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Representations<T = f32> {
    /// `[|C|, D]`
    pub z_context: Tensor<T>,
    /// `[|T|, D]`, from the target encoder.
    pub z_bar_target: Tensor<T>,
    /// `[|T|, D]`, from the predictor.
    pub z_hat: Tensor<T>,
}

/// Target representations; never recorded for differentiation.
pub(crate) fn target_representations<T: Real>(
    model: &Model<T>,
    theta_bar: &ParamSet<T>,
    patches: &Tensor<T>,
    mask: &MaskSpec,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = theta_bar.bind(&mut g, false);
    let x = g.constant(patches.clone());
    let out = if model.config().latent_target_masking {
        let full = model.encode_graph(&mut g, &p, x, Indices::All)?;
        g.index_select(full, mask.target())?
    } else {
        model.encode_graph(&mut g, &p, x, Indices::Subset(mask.target()))?
    };
    Ok(g.value(out).clone())
}

/// Nodes of the differentiable part of one training example.
pub struct LossNodes {
    pub z_context: Var,
    pub z_hat: Var,
    pub loss: Var,
}

/// Context encoder, predictor and loss against fixed targets `z_bar`.
pub fn loss_graph<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    theta: &Bound<'_, T>,
    phi: &Bound<'_, T>,
    patches: Var,
    z_bar: Var,
    mask: &MaskSpec,
) -> Result<LossNodes> {
    let z_context = model.encode_graph(g, theta, patches, Indices::Subset(mask.context()))?;
    let z_hat = model.predict_graph(g, phi, z_context, mask.context(), mask.target())?;
    let d = g.smooth_l1(z_hat, z_bar, model.config().loss.into())?;
    let loss = g.mean(d);
    Ok(LossNodes {
        z_context,
        z_hat,
        loss,
    })
}

/// Loss, representations and gradients for the context encoder and the
/// predictor. There is no gradient for the target encoder.
#[derive(Clone, Debug)]
pub struct StepGradients<T = f32> {
    pub loss: T,
    pub theta: Vec<Tensor<T>>,
    pub phi: Vec<Tensor<T>>,
    pub reps: Representations<T>,
}

pub fn step_gradients<T: Real>(
    model: &Model<T>,
    params: &ModelParams<T>,
    patches: &Tensor<T>,
    mask: &MaskSpec,
) -> Result<StepGradients<T>> {
    let z_bar = target_representations(model, &params.theta_bar, patches, mask)?;
    let mut g = Graph::new();
    let theta = params.theta.bind(&mut g, true);
    let phi = params.phi.bind(&mut g, true);
    let x = g.constant(patches.clone());
    let zb = g.constant(z_bar.clone());
    let nodes = loss_graph(model, &mut g, &theta, &phi, x, zb, mask)?;
    let mut grads = g.backward(nodes.loss)?;
    let mut take = |b: &Bound<'_, T>| -> Vec<Tensor<T>> {
        b.vars()
            .iter()
            .map(|&v| grads.take(v).expect("bound parameter has a gradient"))
            .collect()
    };
    let theta_grads = take(&theta);
    let phi_grads = take(&phi);
    Ok(StepGradients {
        loss: g.value(nodes.loss).item().expect("scalar"),
        theta: theta_grads,
        phi: phi_grads,
        reps: Representations {
            z_context: g.value(nodes.z_context).clone(),
            z_bar_target: z_bar,
            z_hat: g.value(nodes.z_hat).clone(),
        },
    })
}

/// Mean loss over a batch and its gradients. Every element has its own
/// mask; the weights are bound once and shared by all elements.
#[derive(Clone, Debug)]
pub struct BatchGradients<T = f32> {
    pub loss: T,
    pub element_losses: Vec<T>,
    pub theta: Vec<Tensor<T>>,
    pub phi: Vec<Tensor<T>>,
}

pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    params: &ModelParams<T>,
    patches: &[Tensor<T>],
    masks: &[MaskSpec],
) -> Result<BatchGradients<T>> {
    if patches.is_empty() || patches.len() != masks.len() {
        return Err(Error::Input(format!(
            "batch needs one mask per element and at least one element, got {} and {}",
            patches.len(),
            masks.len()
        )));
    }
    let targets = patches
        .iter()
        .zip(masks)
        .map(|(x, m)| target_representations(model, &params.theta_bar, x, m))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let theta = params.theta.bind(&mut g, true);
    let phi = params.phi.bind(&mut g, true);
    let mut losses = Vec::with_capacity(patches.len());
    for ((x, m), zb) in patches.iter().zip(masks).zip(targets) {
        let x = g.constant(x.clone());
        let zb = g.constant(zb);
        losses.push(loss_graph(model, &mut g, &theta, &phi, x, zb, m)?.loss);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    let loss = g.scale(total, T::one() / T::of(losses.len() as f64));
    let mut grads = g.backward(loss)?;
    let mut take = |b: &Bound<'_, T>| -> Vec<Tensor<T>> {
        b.vars()
            .iter()
            .map(|&v| grads.take(v).expect("bound parameter has a gradient"))
            .collect()
    };
    let theta_grads = take(&theta);
    let phi_grads = take(&phi);
    Ok(BatchGradients {
        loss: g.value(loss).item().expect("scalar"),
        element_losses: losses.iter().map(|&l| g.value(l).item().expect("scalar")).collect(),
        theta: theta_grads,
        phi: phi_grads,
    })
}

/// Loss and representations for one example, without gradients.
pub fn forward_training_step(
    model: &Model<f32>,
    params: &ModelParams<f32>,
    grid: &PatchGrid,
    mask: &MaskSpec,
) -> Result<(f32, Representations<f32>)> {
    check_grid(model.config(), grid)?;
    let patches = grid.to_tensor();
    let z_bar = target_representations(model, &params.theta_bar, &patches, mask)?;
    let mut g = Graph::new();
    let theta = params.theta.bind(&mut g, false);
    let phi = params.phi.bind(&mut g, false);
    let x = g.constant(patches);
    let zb = g.constant(z_bar.clone());
    let nodes = loss_graph(model, &mut g, &theta, &phi, x, zb, mask)?;
    let loss = g.value(nodes.loss).item().expect("scalar");
    Ok((
        loss,
        Representations {
            z_context: g.value(nodes.z_context).clone(),
            z_bar_target: z_bar,
            z_hat: g.value(nodes.z_hat).clone(),
        },
    ))
}
