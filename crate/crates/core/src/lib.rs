//! Epipolar feature fusion for multi-view pose estimation.
//!
//! A reference pixel attends to features sampled along its epipolar line in
//! a source view and adds the weighted result to its own feature. The crate
//! also provides the geometry, triangulation, metrics and a synthetic
//! multi-camera harness needed to test that end to end.

pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod sampler;
pub mod scenario;
pub mod synth;
pub mod triangulation;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/triangulation.md")]
    mod triangulation {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
