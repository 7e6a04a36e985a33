//! Unified interleaved text/image/video diffusion transformer at desk scale.
//!
//! Text, images and videos are turned into one token sequence with boundary
//! tokens around every vision segment, positioned by a four-axis rotary
//! embedding, and denoised by a flow-matching transformer that predicts the
//! velocity of one target segment while attending to all context.

pub mod backbone;
pub mod codec;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod harness;
pub mod layout;
pub mod optim;
pub mod packing;
pub mod real;
pub mod rope;
pub mod synth;
pub(crate) mod wide;

pub use error::{Error, Result};
pub use real::Real;
