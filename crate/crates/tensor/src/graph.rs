//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward pass. Nodes only refer to earlier nodes, so the tape is
//! topologically ordered by construction and `backward` is a single reverse
//! sweep.

use crate::error::{Result, TensorError};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the smoothed L1 distance switches between its quadratic and linear
/// regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SmoothL1Kind {
    /// One switch per row, driven by the L1 norm of the whole difference
    /// vector: `0.5 * |u|_2^2` if `|u|_1 < 1`, else `|u|_1 - 0.5`.
    #[default]
    Vector,
    /// Elementwise Huber (beta = 1), summed over the row.
    Elementwise,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    IndexSelect {
        x: Var,
        indices: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
        scale: T,
    },
    SmoothL1 {
        pred: Var,
        target: Var,
        kind: SmoothL1Kind,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of executed operations.
#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every leaf that requires grad.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `[outer, axis, inner]` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// `c[m, n] += a[m, k] * b[k, n]`
fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

/// `c[m, k] += a[m, n] * b[k, n]^T`
fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let dot: T = arow.iter().zip(brow).map(|(x, y)| *x * *y).sum();
            c[i * k + kk] = c[i * k + kk] + dot;
        }
    }
}

/// `c[k, n] += a[m, k]^T * b[m, n]`
fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn smooth_l1_row<T: Real>(u: impl Iterator<Item = T> + Clone, kind: SmoothL1Kind) -> T {
    let half = T::of(0.5);
    match kind {
        SmoothL1Kind::Vector => {
            let l1: T = u.clone().map(|v| v.abs()).sum();
            if l1 < T::one() {
                half * u.map(|v| v * v).sum::<T>()
            } else {
                l1 - half
            }
        }
        SmoothL1Kind::Elementwise => u
            .map(|v| {
                let a = v.abs();
                if a < T::one() {
                    half * v * v
                } else {
                    a - half
                }
            })
            .sum(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn broadcast_binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = if is_suffix(sb, sa) {
            sa.to_vec()
        } else if is_suffix(sa, sb) {
            sb.to_vec()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (na, nb) = (da.len(), db.len());
        let n: usize = out_shape.iter().product();
        let data = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, op, rg))
    }

    /// Elementwise sum; the operand with fewer axes is broadcast over the
    /// leading axes of the other.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a);
        let out = Tensor::from_fn(v.shape().to_vec(), |i| v.data()[i] * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `[..., m, k] x [..., k, n]`; a rank-2 right operand is shared across
    /// the batch axes of the left one.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        if k != kb || !(lead_b.is_empty() || lead_a == lead_b) {
            return Err(mismatch());
        }
        let batch: usize = lead_a.iter().product();
        let b_stride = if lead_b.is_empty() { 0 } else { k * n };
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            gemm_acc(
                &da[bi * m * k..(bi + 1) * m * k],
                &db[bi * b_stride..bi * b_stride + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.shape();
        if s.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: format!("needs rank >= 2, got shape {s:?}"),
            });
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_data(v.data(), m, n);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose(a), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total = total + *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.numel() / d;
        let dt = T::of(d as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::from_fn(v.shape().to_vec(), |i| gelu(v.data()[i]));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Gathers entries along axis 0.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "index_select",
                reason: "scalar input".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::InvalidArgument {
                op: "index_select",
                reason: format!("index {bad} out of range for axis of size {}", s[0]),
            });
        }
        let inner: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&v.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::IndexSelect {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{end} on axis {axis} of shape {s:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&data[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidArgument {
                op: "sum_axis",
                reason: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let scale = if mean {
            T::one() / T::of(len as f64)
        } else {
            T::one()
        };
        let data = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst = *dst + *v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * scale);
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis, scale }, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Row-wise smoothed L1 distance between two same-shape tensors; the
    /// result drops the last axis.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, kind: SmoothL1Kind) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st || sp.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "smooth_l1",
                lhs: sp.to_vec(),
                rhs: st.to_vec(),
            });
        }
        let out_shape = sp[..sp.len() - 1].to_vec();
        let (p, t) = (self.value(pred), self.value(target));
        let d = p.last_dim();
        let rows = p.numel() / d;
        let out = (0..rows)
            .map(|r| {
                let u = p.row(r).iter().zip(t.row(r)).map(|(a, b)| *a - *b);
                smooth_l1_row(u, kind)
            })
            .collect();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::SmoothL1 { pred, target, kind },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every leaf that requires grad gets
    /// an entry, zero-filled if it does not reach the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 || lv.rank() > 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    let data = grads[i]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); n.value.numel()]);
                    Some(Tensor::new(n.value.shape().to_vec(), data).expect("grad shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.rg(v) {
                return;
            }
            let n = self.value(v).numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                acc(*a, &mut |ga| {
                    let n = ga.len();
                    for (i, gv) in g.iter().enumerate() {
                        ga[i % n] = ga[i % n] + *gv;
                    }
                });
                acc(*b, &mut |gb| {
                    let n = gb.len();
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + sign * *gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    let n = ga.len();
                    for (i, gv) in g.iter().enumerate() {
                        ga[i % n] = ga[i % n] + *gv * db[i % db.len()];
                    }
                });
                acc(*b, &mut |gb| {
                    let n = gb.len();
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + *gv * da[i % da.len()];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                for (x, gv) in ga.iter_mut().zip(g) {
                    *x = *x + *gv * *s;
                }
            }),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let sa = ta.shape();
                let sb = tb.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = ta.numel() / (m * k);
                let b_stride = if sb.len() == 2 { 0 } else { k * n };
                acc(*a, &mut |ga| {
                    for bi in 0..batch {
                        gemm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[bi * b_stride..bi * b_stride + k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for bi in 0..batch {
                        gemm_tn_acc(
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * b_stride..bi * b_stride + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                let gt = transpose_data(g, m, n);
                acc(*a, &mut |ga| {
                    for (x, gv) in ga.iter_mut().zip(&gt) {
                        *x = *x + *gv;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                acc(*a, &mut |ga| {
                    for r in 0..y.len() / d {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for j in 0..d {
                            ga[r * d + j] = ga[r * d + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let rows = xhat.len() / d;
                let gv = self.value(*gain).data();
                acc(*gain, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + g[r * d + j];
                        }
                    }
                });
                let dt = T::of(d as f64);
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / dt;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>() / dt;
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::IndexSelect { x, indices } => {
                let inner = node.value.numel() / indices.len().max(1);
                acc(*x, &mut |gx| {
                    for (row, &i) in indices.iter().enumerate() {
                        for j in 0..inner {
                            gx[i * inner + j] = gx[i * inner + j] + g[row * inner + j];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (dst, s) in gv[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *dst = *dst + *s;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let taken = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[(o * len + start) * inner..(o * len + start + taken) * inner];
                        for (d, s) in dst.iter_mut().zip(&g[o * taken * inner..(o + 1) * taken * inner]) {
                            *d = *d + *s;
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| {
                for (x, gv) in ga.iter_mut().zip(g) {
                    *x = *x + *gv;
                }
            }),
            Op::Sum(a) => acc(*a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x = *x + g[0];
                }
            }),
            Op::Mean(a) => acc(*a, &mut |ga| {
                let s = g[0] / T::of(ga.len() as f64);
                for x in ga.iter_mut() {
                    *x = *x + s;
                }
            }),
            Op::SumAxis { x, axis, scale } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                let k = (o * len + l) * inner + i;
                                gx[k] = gx[k] + g[o * inner + i] * *scale;
                            }
                        }
                    }
                });
            }
            Op::SmoothL1 { pred, target, kind } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let d = p.last_dim();
                let rows = p.numel() / d;
                // d(distance)/d(pred) per entry; target gets the negation.
                let mut local = vec![T::zero(); p.numel()];
                for r in 0..rows {
                    let u: Vec<T> = p.row(r).iter().zip(t.row(r)).map(|(a, b)| *a - *b).collect();
                    let l1: T = u.iter().map(|v| v.abs()).sum();
                    for (j, &uj) in u.iter().enumerate() {
                        let quadratic = match kind {
                            SmoothL1Kind::Vector => l1 < T::one(),
                            SmoothL1Kind::Elementwise => uj.abs() < T::one(),
                        };
                        let dj = if quadratic { uj } else { sign(uj) };
                        local[r * d + j] = g[r] * dj;
                    }
                }
                acc(*pred, &mut |gp| {
                    for (x, l) in gp.iter_mut().zip(&local) {
                        *x = *x + *l;
                    }
                });
                acc(*target, &mut |gt| {
                    for (x, l) in gt.iter_mut().zip(&local) {
                        *x = *x - *l;
                    }
                });
            }
        }
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Transposes the last two axes of a row-major buffer viewed as
/// `[batch, m, n]`.
fn transpose_data<T: Real>(data: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (src, dst) in data.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

/// Plain distance between two vectors, outside any graph.
pub fn smooth_l1_distance<T: Real>(z: &[T], z_prime: &[T], kind: SmoothL1Kind) -> Result<T> {
    if z.len() != z_prime.len() {
        return Err(TensorError::ShapeMismatch {
            op: "smooth_l1",
            lhs: vec![z.len()],
            rhs: vec![z_prime.len()],
        });
    }
    Ok(smooth_l1_row(
        z.iter().zip(z_prime).map(|(a, b)| *a - *b),
        kind,
    ))
}
