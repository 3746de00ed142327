//! Retinal optic-nerve-head analysis: monocular depth estimation with
//! pseudo-depth pretraining, depth-guided optic disc/cup segmentation,
//! dense-CRF refinement and glaucoma screening metrics.

pub mod crf;
pub mod data_pipeline;
mod error;
pub mod evaluation;
pub mod networks;
pub mod nn_core;
pub mod pseudo_depth;
pub mod raster;
pub mod synthetic;
pub mod training;

pub use error::{CoreError, Result};
