//! Cross-modal decoding of noisy high-dimensional signals into images with a
//! dual VAE/GAN: a cognitive encoder distils a visual teacher's latent space
//! and shares the teacher's adversarially trained generator.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod registry;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ParamKey, Scalar, Tape, Tensor, Var};
