//! Dense numeric core: tensors, MLPs with input gradients, losses, Adam,
//! spectral normalization and finite-difference checks.

pub mod adam;
pub mod finite_diff;
pub mod loss;
pub mod mlp;
pub mod spectral;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use finite_diff::{central_difference, rel_close, rel_error, second_difference};
pub use loss::{loss_and_grad, LossKind, LossSpec};
pub use mlp::{Activation, ForwardCache, Layer, LayerGrad, Mlp, MlpGrads};
pub use spectral::{spectral_normalize, SpectralNormState};
pub use tensor::Tensor2D;
