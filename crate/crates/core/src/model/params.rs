use std::collections::HashMap;

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use ajepa_tensor::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};

/// Ordered, named collection of weight tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: PartialEq> PartialEq for ParamSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout<U: Real>(&self, other: &ParamSet<U>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (n, t) in self.iter() {
            out.push(n, Tensor::zeros(t.shape().to_vec()));
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.push(n, t.cast());
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if !self.same_layout(other) {
            return Err(Error::Input("parameter sets have different layouts".into()));
        }
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.max_abs_diff(b).expect("same shape"))
            .fold(T::zero(), T::max))
    }

    /// Adds every tensor to `g` as a leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph<T>, requires_grad: bool) -> Bound<'a, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if requires_grad {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { set: self, vars }
    }
}

/// A [`ParamSet`] whose tensors live in a graph.
pub struct Bound<'a, T> {
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<'a, T: Real> Bound<'a, T> {
    /// Pairs `set` with graph nodes created elsewhere, one per tensor in
    /// order.
    pub fn from_vars(set: &'a ParamSet<T>, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != set.len() {
            return Err(Error::Input(format!(
                "{} graph nodes for {} parameters",
                vars.len(),
                set.len()
            )));
        }
        Ok(Self { set, vars })
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self
            .set
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Normal(0, std) truncated to two standard deviations.
pub(crate) fn trunc_normal(shape: &[usize], std: f64, rng: &mut dyn RngCore) -> Tensor<f32> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v as f32;
        }
    })
}
