//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] records each primitive as it is evaluated; [`Graph::backward`]
//! then propagates adjoints from a scalar loss back to every leaf created
//! with [`Graph::param`]. The primitive set is small on purpose: matmul,
//! stride-1 conv2d, 2×2 max pooling, batch norm, the usual pointwise maps,
//! reductions, softmax / log-softmax, concat and a row-wise Kronecker product.
//! Every primitive rejects non-finite outputs with [`Error::NonFinite`].
//!
//! ```
//! use semloc_autograd::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let y = g.constant(Tensor::from_vec(vec![4.0, 5.0, 6.0]));
//! let xy = g.mul(x, y).unwrap();
//! let loss = g.sum(xy).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[4.0, 5.0, 6.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
mod linalg;
mod nn;
mod optim;
mod params;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport, Objective};
pub use graph::{Gradients, Graph, Var};
pub use nn::{BatchStats, BnMode, Padding, BN_EPS};
pub use optim::{OptimState, SgdConfig};
pub use params::{GradMap, LayoutEntry, Param, ParamKind, ParamStore};
pub use tensor::Tensor;
