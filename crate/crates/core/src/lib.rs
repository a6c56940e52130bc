//! X2Face-style face reenactment on a single CPU.
//!
//! A source frame is warped into an embedded face by the embedding network;
//! the driving network encodes a driving frame into a driving vector and
//! decodes it into a second warp that samples the embedded face to produce
//! the generated frame. Both warps are bilinear samplers, so the whole
//! pipeline is trained end to end from video with no labels.

pub mod control;
pub mod dataset;
pub mod diffops;
pub mod editing;
pub mod networks;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod losses;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
