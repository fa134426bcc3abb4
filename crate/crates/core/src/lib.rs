//! Numerical laboratory for supervision complexity in knowledge distillation.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense symmetric matrices, jittered Cholesky, eigenvalues.
//! - [`data`]: seeded synthetic classification tasks and target encodings.
//! - [`model`]: small fully-connected networks with exact Jacobians and
//!   Jacobian/vector products, plus the binary checkpoint format.
//! - [`ntk`]: empirical neural tangent kernels, matrix-free kernel products
//!   and the teacher/student kernel similarity probe.
//! - [`kernel_machine`]: regularized kernel regression and the supervision
//!   complexity family of metrics.
//! - [`bounds`]: margin losses and the margin-based generalization bounds.
//! - [`distill`]: losses, the SGD trainer, offline and online distillation.
//! - [`linnet`]: linearized networks and their function-space gradient flow.
//! - [`harness`]: TOML experiment configs, recipes and CSV/JSON reports.
//!
//! Data-parallel inner loops (kernel assembly, per-example gradients,
//! similarity probes, bound trials) go through [`par`], which uses rayon when
//! the `parallel` feature is enabled and plain iteration otherwise. Results
//! never depend on the thread count: every parallel map produces independent
//! items and reductions run sequentially in index order.

pub mod bounds;
pub mod data;
pub mod distill;
pub mod error;
pub mod harness;
pub mod kernel_machine;
pub mod linalg;
pub mod linnet;
pub mod model;
pub mod ntk;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
