//! CPU network engine for normal-map detail enhancement: a frozen VGG-style
//! feature backbone, masked Gram losses, the material-conditioned enhancer,
//! the material classifier and the evaluation drivers.

pub mod adam;
pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod enhancer;
pub mod error;
pub mod evaluate;
pub mod gram;
pub mod ops;
pub mod real;
pub mod train;

pub use error::{Error, Result};
