//! Pose-guided feature distillation for person re-identification.
//!
//! A Siamese image encoder learns identity embeddings with a verification
//! head while a pose-conditioned generator, an identity discriminator and a
//! patch pose discriminator push those embeddings to drop pose information.
//! Only the encoder is needed at test time.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below name the common instantiations.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod pose;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Networks32 = models::Networks<f32>;
pub type Networks64 = models::Networks<f64>;
