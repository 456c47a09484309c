//! Detection of unexpected objects and adversarial inputs for semantic
//! segmentation by resynthesizing the image from its predicted label map and
//! scoring the discrepancies between the two.

pub mod advdetect;
pub mod baselines;
pub mod datamodel;
pub mod discrepancy;
pub mod error;
pub mod evalharness;
pub mod nn;
pub mod par;
pub mod rng;
pub mod segmentation;
pub mod synthesis;
pub mod toyworld;

pub use error::{Error, Result};
