//! Lifting an enhanced normal map back to 3D.
//!
//! The coarse mesh is subdivided, each vertex picks up a target normal from
//! the map, vertices are moved by gradient descent so that one-ring edges
//! become perpendicular to their targets, and finally garment vertices that
//! ended up inside the body are pushed out.

mod deform;
mod penetration;
mod subdivide;

pub use deform::{
    deform_to_normals, mean_angular_error, DeformEnergy, DeformOptions, DeformReport, DEFAULT_ANCHOR_WEIGHT,
    DEFAULT_LAPLACIAN_WEIGHT,
};
pub use penetration::{
    closest_point_on_triangle, resolve_penetrations, signed_distance, winding_number, PenetrationOptions,
    PenetrationReport, DEFAULT_PENETRATION_SMOOTHNESS,
};
pub use subdivide::upsample_mesh;

use std::sync::Arc;

use crate::mesh::{from_tangent, GarmentMesh, TriMesh};
use crate::normal_map::NormalMapFrame;
use crate::vec3::{self, V3};
use crate::{Error, Result};

/// Weights of the recovery energies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecoveryWeights {
    /// Laplacian smoothness η.
    pub eta: f64,
    /// Anchor to the start positions ω.
    pub omega: f64,
    /// Penetration smoothness φ.
    pub phi: f64,
}

impl Default for RecoveryWeights {
    fn default() -> Self {
        Self { eta: DEFAULT_LAPLACIAN_WEIGHT, omega: DEFAULT_ANCHOR_WEIGHT, phi: DEFAULT_PENETRATION_SMOOTHNESS }
    }
}

impl RecoveryWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("eta", self.eta), ("omega", self.omega), ("phi", self.phi)] {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Parameter(format!("weight {name} must be positive and finite, got {w}")));
            }
        }
        Ok(())
    }
}

/// An upsampled garment together with its per-vertex target normals.
/// The mesh positions are the anchor positions `p0`.
#[derive(Clone, Debug)]
pub struct RecoveryProblem {
    pub mesh: GarmentMesh,
    pub target_normals: Vec<V3>,
    pub body: Option<Arc<TriMesh>>,
    pub weights: RecoveryWeights,
}

impl RecoveryProblem {
    /// Samples `target` at every vertex UV.
    pub fn new(mesh: GarmentMesh, target: &NormalMapFrame, weights: RecoveryWeights) -> Result<Self> {
        let target_normals = sample_target_normals(&mesh, target)?;
        let body = mesh.body.clone();
        let p = Self { mesh, target_normals, body, weights };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.mesh.validate()?;
        if self.target_normals.len() != self.mesh.positions.len() {
            return Err(Error::Shape(format!(
                "{} target normals for {} vertices",
                self.target_normals.len(),
                self.mesh.positions.len()
            )));
        }
        Ok(())
    }
}

/// World-space target normal per vertex, read from a tangent-space map.
///
/// Each vertex samples the map bilinearly at its UV and the result is
/// rotated into world space with the vertex's UV-derived frame on the
/// current (coarse) surface.
pub fn sample_target_normals(mesh: &GarmentMesh, target: &NormalMapFrame) -> Result<Vec<V3>> {
    let uvs = mesh.vertex_uvs();
    let frames = mesh.vertex_frames();
    let mut out = Vec::with_capacity(uvs.len());
    let mut missing = Vec::new();
    for (i, uv) in uvs.iter().enumerate() {
        let sampled = uv.and_then(|uv| target.sample_uv(uv));
        match sampled {
            Some(t) => {
                let w = from_tangent(&frames[i], [t[0] as f64, t[1] as f64, t[2] as f64]);
                out.push(vec3::normalize(w).unwrap_or(frames[i][2]));
            }
            None => {
                missing.push(i);
                out.push([0.0; 3]);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Lookup { vertices: missing });
    }
    Ok(out)
}

/// Uniform Laplacian `mean(q) - p` over the one ring.
pub(crate) fn uniform_laplacian(positions: &[V3], ring: &[usize], p: usize) -> V3 {
    let mut mean = [0.0; 3];
    for &q in ring {
        mean = vec3::add(mean, positions[q]);
    }
    vec3::sub(vec3::scale(mean, 1.0 / ring.len() as f64), positions[p])
}

/// Which vertices carry a smoothness term: non-boundary vertices with a
/// non-empty one ring.
pub(crate) fn smooth_vertices(mesh: &GarmentMesh, rings: &[Vec<usize>]) -> Vec<bool> {
    let boundary = mesh.boundary_vertices();
    rings.iter().zip(&boundary).map(|(r, &b)| !b && !r.is_empty()).collect()
}
