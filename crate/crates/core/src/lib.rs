//! Desk-scale fMRI-to-video reconstruction on a synthetic world.
//!
//! The pipeline decodes simulated brain responses into short videos through
//! two trained paths: a perception reconstructor that recovers a blurry
//! low-level video from one fMRI sample, and a semantics reconstructor that
//! recovers a keyframe image. During inference a guided diffusion sampler
//! combines both (plus a caption condition) into a 16-frame, 8 FPS clip, and
//! adjacent clips can be fused into videos of up to 6 seconds.
//!
//! All stochastic behaviour derives from explicit seeds, so every artifact
//! in the pipeline is byte-reproducible. See the `neuroclips` binary for the
//! command-line surface.

pub mod ad;
pub mod error;
pub mod nn;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
