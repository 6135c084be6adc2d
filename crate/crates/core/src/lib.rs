//! Cascading residual super-resolution networks (standard and efficient
//! grouped/tied variants), multi-scale adversarial training, model cost
//! accounting, and image-quality metrics, all on a small CPU tensor engine.

pub mod adversarial;
pub mod analysis;
pub mod autograd;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod resample;
pub mod tensor;
pub mod training;
pub mod weights;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Shape, Tensor};
