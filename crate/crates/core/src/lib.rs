//! Joint depth completion and multi-frame deblurring over a piecewise-planar
//! rigid scene model.

pub mod blur;
pub mod deblur;
pub mod energy;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod pipeline;
pub mod scene;
pub mod sceneflow;
pub mod sparse;
pub mod superpixels;

pub use error::{Error, Result};
