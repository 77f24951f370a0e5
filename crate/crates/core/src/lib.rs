//! Disparity-guided stereo semantic codec whose decoded features are turned
//! directly into 3D Gaussians and splatted into novel views.

pub mod autograd;
pub mod bitstream;
pub mod detmath;
pub mod entropy;
pub mod error;
pub mod fusion;
pub mod gaussians;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod renderer;
pub mod stereo;
pub mod tensor;
pub mod transforms;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use params::ParamSet;
pub use tensor::Tensor;
