//! Geometry-side machinery for patch-based garment detail enhancement.
//!
//! Normal maps live in tangent space over a garment's UV layout. This crate
//! bakes them from meshes, cuts and merges fixed-size patches, lifts an
//! enhanced map back onto a subdivided mesh, generates procedural coarse/fine
//! training corpora, and computes the distribution metrics used to score
//! enhancement results. Everything here is plain Rust with no neural-network
//! dependency, so it also builds for the browser demo.

pub mod bake;
pub mod error;
pub mod material;
pub mod mesh;
pub mod metrics;
pub mod normal_map;
pub mod patch;
pub mod procedural;
pub mod recovery;
pub mod vec3;

pub use error::{Error, Result};
pub use material::{MaterialLabel, MATERIALS};
pub use mesh::GarmentMesh;
pub use normal_map::NormalMapFrame;
pub use patch::{Patch, PATCH_SIZE};
