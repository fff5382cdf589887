//! Dense numeric kernel: matrices, small MLPs, automatic differentiation, and
//! an adaptive-moment optimizer.
//!
//! Two differentiation modes cover every loss in the crate:
//!
//! - forward mode ([`DualScalar`]) propagates a tangent with respect to the
//!   time input, giving `∂(net)/∂t` in one pass;
//! - reverse mode comes in two flavors: a layer-structured backward pass on
//!   [`Mlp`] (the training hot path, including a reverse-over-forward pass for
//!   losses that contain `∂(net)/∂t`), and a general scalar [`GradTape`] for
//!   small ad-hoc graphs.
//!
//! All arithmetic is `f64` and single-threaded; results are bit-reproducible
//! given parameters, inputs, and seed.

mod activation;
mod adam;
mod checkpoint;
mod dual;
mod matrix;
mod mlp;
mod tape;

pub use activation::Activation;
pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dual::DualScalar;
pub use matrix::Matrix;
pub use mlp::{DualTrace, Mlp, MlpGradients, Trace};
pub use tape::{GradTape, Var};

pub(crate) use activation::sigmoid;
pub(crate) use matrix::{dist, dist_sq, norm};
