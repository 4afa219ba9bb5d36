//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! The op set is exactly what a small pre-norm ViT needs: matmul,
//! broadcasting add/sub/mul, scaling, transpose, softmax, layer norm, GELU,
//! row gathering, concat, slice, reshape, reductions, and a row-wise smoothed
//! L1 distance. Everything is generic over [`Real`] so the same code runs in
//! `f32` for training and `f64` for finite-difference checks.
//!
//! ```
//! use ajepa_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_multi, relative_error, Coords};
pub use graph::{smooth_l1_distance, Gradients, Graph, SmoothL1Kind, Var};
pub use tensor::{Real, Tensor};
