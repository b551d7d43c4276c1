//! Differentiable compute substrate: tensors on a recording tape, the
//! primitive set the network is built from, and a finite-difference oracle.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;

pub use gradcheck::{grad_check, scalar_fn, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{Init, Param, ParamId, ParamStore};
