//! Weakly semi-supervised instance segmentation with point labels.
//!
//! A teacher network trained on a few fully labeled images turns point labels
//! into pseudo instance masks by reading, for every point, the proposal of the
//! pyramid level that is most confident about the point's category. A
//! point-guided refinement network cleans those masks, and a student network
//! trains on full plus pseudo labels. Budget accounting and COCO-style I/O and
//! evaluation round out the toolkit.

pub mod annotations;
pub mod budget;
pub mod error;
pub mod eval;
pub mod image;
pub mod mask;
pub mod pipeline;
pub mod pseudo;
pub mod refine;
pub mod registry;
pub mod rng;
pub mod segnet;
pub mod synth;

pub use error::{Result, WssisError};
