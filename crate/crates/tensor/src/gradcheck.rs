//! Central finite-difference checks of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Which coordinates of each input are perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coords {
    All,
    /// At most this many evenly spaced coordinates per input tensor.
    AtMost(usize),
}

impl Coords {
    fn select(self, n: usize) -> Vec<usize> {
        match self {
            Coords::AtMost(k) if k < n => {
                // Spread picks over the whole buffer, offset so the last
                // entry is not always skipped.
                (0..k).map(|i| (i * n + n / 2) / k).map(|i| i.min(n - 1)).collect()
            }
            _ => (0..n).collect(),
        }
    }
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error<T: Real>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::of(1e-8));
    (analytic - numeric).abs() / denom
}

fn eval_scalar<T: Real, F>(f: &F, inputs: &[Tensor<T>]) -> Result<T>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    let s = v
        .item()
        .filter(|_| v.rank() <= 1)
        .ok_or_else(|| TensorError::NonScalarLoss(v.shape().to_vec()))?;
    if !s.is_finite() {
        return Err(TensorError::NonFinite("grad_check objective".into()));
    }
    Ok(s)
}

/// Checks `f` with respect to several inputs at once. Returns the max
/// relative error per input.
pub fn grad_check_multi<T: Real, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: T,
    coords: Coords,
) -> Result<Vec<T>>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).all_finite() {
        return Err(TensorError::NonFinite("grad_check objective".into()));
    }
    let grads = g.backward(out)?;
    let two = T::of(2.0);

    let mut errors = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param leaf has a gradient");
        if !analytic.all_finite() {
            return Err(TensorError::NonFinite(format!("gradient of input {which}")));
        }
        let mut worst = T::zero();
        for i in coords.select(inputs[which].numel()) {
            let orig = inputs[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (two * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        errors.push(worst);
    }
    Ok(errors)
}

/// Max relative error between the analytic gradient of scalar `f` at `x`
/// and its central-difference estimate.
pub fn grad_check<T: Real, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let errs = grad_check_multi(|g, v| f(g, v[0]), std::slice::from_ref(x), eps, Coords::All)?;
    Ok(errs[0])
}
