//! Amodal instance segmentation of overlapping worms.
//!
//! A two-stage detector proposes one box per worm. Per box the mask branch
//! predicts a coarse mask, the regions shared with and exclusive from other
//! worms, and a refined mask trained to agree with their exclusive-or.
//! [`train::Trainer`] fits the whole network and [`harness`] holds the
//! command implementations behind the `brnet` binary.

pub mod boxes;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod heads;
pub mod losses;
pub mod mask_algebra;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod uam;

pub use error::{Error, Result};

/// Concept chapters of the book, compiled here so their examples run as
/// doc-tests.
pub mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    pub mod intro {}
    #[doc = include_str!("../../../book/src/mask_algebra.md")]
    pub mod mask_algebra {}
    #[doc = include_str!("../../../book/src/synthetic_data.md")]
    pub mod synthetic_data {}
    #[doc = include_str!("../../../book/src/detector.md")]
    pub mod detector {}
    #[doc = include_str!("../../../book/src/attention.md")]
    pub mod attention {}
    #[doc = include_str!("../../../book/src/heads.md")]
    pub mod heads {}
    #[doc = include_str!("../../../book/src/losses.md")]
    pub mod losses {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
}
