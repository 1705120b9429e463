//! Dense numerical core: a small MLP whose designated hidden activation is
//! multiplied by a learnable mask, with exact reverse-mode gradients for both
//! the parameters and the mask, plus finite-difference Hessian-vector products
//! with respect to the mask.
//!
//! Everything is `f64` and pure: identical inputs give bitwise-identical outputs.

mod hvp;
mod mlp;
mod types;

pub use hvp::{default_hvp_eps, hvp_central, hvp_mask, mixed_theta_mask};
pub use mlp::{forward, forward_unmasked, grad_wrt_mask, init_params, loss, loss_and_grads, Gradients};
pub use types::{Activation, Batch, LayerShape, MaskVector, Matrix, MlpSpec, OwnedBatch, ParamVector};
