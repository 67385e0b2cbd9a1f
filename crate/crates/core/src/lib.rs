//! Single-branch video virtual try-on.
//!
//! The first frame of a source video is edited once by an image try-on
//! editor; the edit is then propagated through a small pose- and
//! mask-conditioned space-time diffusion transformer trained with flow
//! matching and adapted with LoRA. The crate also carries the synthetic
//! data world, video-quality metrics and efficiency accounting used to
//! evaluate that architecture.

pub mod adapters;
pub mod autograd;
pub mod backbone;
pub mod codec;
pub mod conditioning;
pub mod efficiency;
pub mod error;
pub mod firstframe;
pub mod flowmatch;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::VideoTensor;
