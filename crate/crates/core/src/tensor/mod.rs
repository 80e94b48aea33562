//! Dense `f64` tensors, a recording graph with reverse-mode gradients, and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod value;

pub use gradcheck::{gradcheck, gradcheck_fn, gradcheck_many, relative_error, GradCheck};
pub(crate) use gradcheck::sample_indices;
pub use graph::{normal_cdf, Graph, Var};
pub use value::{sample_normal, Tensor};

#[cfg(test)]
mod tests;
