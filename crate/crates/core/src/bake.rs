//! UV-space rasterisation of meshes into tangent-space normal maps.

use log::warn;

use crate::mesh::{orthonormal_frame, to_tangent, Frame, GarmentMesh};
use crate::normal_map::{uv_to_pixel, NormalMapFrame};
use crate::vec3::{self, V3};
use crate::{Error, Result};

/// Default pixel density: a 128-pixel patch spans 0.25 m of cloth.
pub const DEFAULT_PIXELS_PER_METER: f64 = 512.0;
/// Default bake resolution (square).
pub const DEFAULT_RESOLUTION: usize = 1024;

const EDGE_EPS: f64 = 1e-9;
const INTERIOR_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub struct BakeOptions {
    pub width: usize,
    pub height: usize,
    pub pixels_per_meter: f64,
    /// Pixels allowed to fall strictly inside two UV triangles.
    pub overlap_tolerance: usize,
    pub frame_index: usize,
}

impl Default for BakeOptions {
    fn default() -> Self {
        Self {
            width: DEFAULT_RESOLUTION,
            height: DEFAULT_RESOLUTION,
            pixels_per_meter: DEFAULT_PIXELS_PER_METER,
            overlap_tolerance: 0,
            frame_index: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BakeStats {
    pub degenerate_faces: usize,
    pub overlap_pixels: usize,
    pub covered_pixels: usize,
    /// Pixels where the reference surface had no coverage.
    pub frame_fallbacks: usize,
}

/// Which surface defines the tangent frame of each pixel.
#[derive(Clone, Copy, Debug)]
pub enum FrameSource<'a> {
    /// The baked mesh's own interpolated vertex frames.
    Own,
    /// Another surface sharing the UV layout (e.g. the coarse garment).
    Reference(&'a GarmentMesh),
}

/// One rasterised pixel: owning face and barycentric weights.
#[derive(Clone, Copy, Debug)]
pub struct Fragment {
    pub face: usize,
    pub bary: [f64; 3],
}

/// Rasterises the UV layout; returns one optional fragment per pixel.
pub fn rasterize(mesh: &GarmentMesh, width: usize, height: usize) -> Result<(Vec<Option<Fragment>>, BakeStats)> {
    if width == 0 || height == 0 {
        return Err(Error::Parameter(format!("bake resolution must be positive, got {width}x{height}")));
    }
    mesh.validate()?;
    let mut frags: Vec<Option<Fragment>> = vec![None; width * height];
    let mut interior = vec![false; width * height];
    let mut stats = BakeStats::default();
    for (fi, t) in mesh.face_uvs.iter().enumerate() {
        // (row, col) pixel-space corners
        let p: Vec<(f64, f64)> = t.iter().map(|&i| uv_to_pixel(mesh.uvs[i], width, height)).collect();
        let area = (p[1].1 - p[0].1) * (p[2].0 - p[0].0) - (p[2].1 - p[0].1) * (p[1].0 - p[0].0);
        if area.abs() < 1e-12 {
            stats.degenerate_faces += 1;
            continue;
        }
        let rmin = p.iter().map(|q| q.0).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let rmax = p.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max).floor().min(height as f64 - 1.0);
        let cmin = p.iter().map(|q| q.1).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let cmax = p.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max).floor().min(width as f64 - 1.0);
        if rmax < 0.0 || cmax < 0.0 {
            continue;
        }
        for r in rmin..=rmax as usize {
            for c in cmin..=cmax as usize {
                let (y, x) = (r as f64, c as f64);
                let edge = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (x - a.1) * (b.0 - a.0);
                let l0 = edge(p[1], p[2]) / area;
                let l1 = edge(p[2], p[0]) / area;
                let l2 = edge(p[0], p[1]) / area;
                if l0 < -EDGE_EPS || l1 < -EDGE_EPS || l2 < -EDGE_EPS {
                    continue;
                }
                let i = r * width + c;
                let strictly = l0 > INTERIOR_EPS && l1 > INTERIOR_EPS && l2 > INTERIOR_EPS;
                match frags[i] {
                    None => {
                        frags[i] = Some(Fragment { face: fi, bary: [l0, l1, l2] });
                        interior[i] = strictly;
                    }
                    Some(_) => {
                        if strictly && interior[i] {
                            stats.overlap_pixels += 1;
                        }
                    }
                }
            }
        }
    }
    if stats.degenerate_faces > 0 {
        warn!("skipped {} faces with zero UV area", stats.degenerate_faces);
    }
    stats.covered_pixels = frags.iter().filter(|f| f.is_some()).count();
    Ok((frags, stats))
}

fn interpolate(values: &[V3], face: [usize; 3], bary: [f64; 3]) -> V3 {
    let mut out = [0.0; 3];
    for k in 0..3 {
        out = vec3::add(out, vec3::scale(values[face[k]], bary[k]));
    }
    out
}

/// Per-pixel tangent frames of a surface.
pub fn bake_frame_field(mesh: &GarmentMesh, width: usize, height: usize) -> Result<Vec<Option<Frame>>> {
    let (frags, _) = rasterize(mesh, width, height)?;
    let frames = mesh.vertex_frames();
    let tan: Vec<V3> = frames.iter().map(|f| f[0]).collect();
    let bit: Vec<V3> = frames.iter().map(|f| f[1]).collect();
    let nor: Vec<V3> = frames.iter().map(|f| f[2]).collect();
    Ok(frags
        .iter()
        .map(|f| {
            f.map(|f| {
                let face = mesh.faces[f.face];
                orthonormal_frame(interpolate(&tan, face, f.bary), interpolate(&bit, face, f.bary), interpolate(&nor, face, f.bary))
            })
        })
        .collect())
}

/// Bakes interpolated vertex normals into a tangent-space normal map.
///
/// Pixels whose centres fall inside a UV triangle receive the
/// barycentrically interpolated vertex normal, renormalised and expressed in
/// the tangent frame chosen by `frames`. Zero-area UV triangles are skipped
/// and counted; overlapping charts beyond `overlap_tolerance` pixels fail.
pub fn bake_normal_map(mesh: &GarmentMesh, opts: &BakeOptions, frames: FrameSource<'_>) -> Result<(NormalMapFrame, BakeStats)> {
    if !(opts.pixels_per_meter > 0.0) {
        return Err(Error::Parameter(format!("pixels_per_meter must be > 0, got {}", opts.pixels_per_meter)));
    }
    let (w, h) = (opts.width, opts.height);
    let (frags, mut stats) = rasterize(mesh, w, h)?;
    if stats.overlap_pixels > opts.overlap_tolerance {
        return Err(Error::Bake(format!(
            "{} pixels covered by overlapping UV triangles (tolerance {})",
            stats.overlap_pixels, opts.overlap_tolerance
        )));
    }
    let normals = mesh.vertex_normals();
    let own = mesh.vertex_frames();
    let own_t: Vec<V3> = own.iter().map(|f| f[0]).collect();
    let own_b: Vec<V3> = own.iter().map(|f| f[1]).collect();
    let reference = match frames {
        FrameSource::Own => None,
        FrameSource::Reference(r) => Some(bake_frame_field(r, w, h)?),
    };
    let mut map = NormalMapFrame::background(w, h, opts.pixels_per_meter, opts.frame_index);
    for (i, frag) in frags.iter().enumerate() {
        let Some(frag) = frag else { continue };
        let face = mesh.faces[frag.face];
        let Some(n) = vec3::normalize(interpolate(&normals, face, frag.bary)) else { continue };
        let own_frame = || orthonormal_frame(interpolate(&own_t, face, frag.bary), interpolate(&own_b, face, frag.bary), n);
        let frame = match &reference {
            None => own_frame(),
            Some(field) => field[i].unwrap_or_else(|| {
                stats.frame_fallbacks += 1;
                own_frame()
            }),
        };
        let t = to_tangent(&frame, n);
        map.set_normal(i / w, i % w, [t[0] as f32, t[1] as f32, t[2] as f32]);
    }
    Ok((map, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::grid_sheet;
    use crate::normal_map::pixel_to_uv;

    fn opts(n: usize) -> BakeOptions {
        BakeOptions { width: n, height: n, pixels_per_meter: 100.0, ..Default::default() }
    }

    #[test]
    fn flat_triangle_bakes_to_up_vector() {
        let m = GarmentMesh {
            positions: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            uvs: vec![[0.1, 0.1], [0.9, 0.1], [0.1, 0.9]],
            faces: vec![[0, 1, 2]],
            face_uvs: vec![[0, 1, 2]],
            body: None,
        };
        let (map, stats) = bake_normal_map(&m, &opts(32), FrameSource::Own).unwrap();
        assert_eq!(stats.degenerate_faces, 0);
        let mut inside = 0;
        for r in 0..32 {
            for c in 0..32 {
                let uv = pixel_to_uv(r as f64, c as f64, 32, 32);
                let strictly_in = uv[0] > 0.11 && uv[1] > 0.11 && uv[0] + uv[1] < 0.99;
                let strictly_out = uv[0] < 0.09 || uv[1] < 0.09 || uv[0] + uv[1] > 1.01;
                if strictly_in {
                    assert!(map.is_masked(r, c));
                    let col = map.color(r, c);
                    assert!((col[0] - 0.5).abs() < 1e-6 && (col[1] - 0.5).abs() < 1e-6 && (col[2] - 1.0).abs() < 1e-6);
                    inside += 1;
                }
                if strictly_out {
                    assert!(!map.is_masked(r, c));
                    assert_eq!(map.color(r, c), [0.5, 0.5, 0.5]);
                }
            }
        }
        assert!(inside > 100);
    }

    #[test]
    fn empty_mesh_bakes_to_background() {
        let m = GarmentMesh::default();
        let (map, _) = bake_normal_map(&m, &opts(8), FrameSource::Own).unwrap();
        assert_eq!(map.masked_count(), 0);
        map.validate().unwrap();
    }

    #[test]
    fn degenerate_uv_faces_are_counted() {
        let mut m = grid_sheet(3, 3, [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]);
        m.uvs.push([0.5, 0.5]);
        let k = m.uvs.len() - 1;
        m.positions.push([5.0, 5.0, 0.0]);
        m.faces.push([0, 1, 9]);
        m.face_uvs.push([k, k, k]);
        let (_, stats) = bake_normal_map(&m, &opts(16), FrameSource::Own).unwrap();
        assert_eq!(stats.degenerate_faces, 1);
    }

    #[test]
    fn overlapping_charts_fail() {
        let a = grid_sheet(2, 2, [1.0, 1.0], [0.1, 0.1], [0.7, 0.7]);
        let mut m = a.clone();
        let off = m.positions.len();
        let uoff = m.uvs.len();
        let b = grid_sheet(2, 2, [1.0, 1.0], [0.3, 0.3], [0.9, 0.9]);
        m.positions.extend(b.positions.iter().map(|p| [p[0], p[1], 1.0]));
        m.uvs.extend(&b.uvs);
        m.faces.extend(b.faces.iter().map(|f| f.map(|v| v + off)));
        m.face_uvs.extend(b.face_uvs.iter().map(|f| f.map(|v| v + uoff)));
        assert!(matches!(bake_normal_map(&m, &opts(32), FrameSource::Own), Err(Error::Bake(_))));
    }

    #[test]
    fn shared_chart_edges_are_not_overlaps() {
        let m = grid_sheet(9, 9, [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]);
        let (map, stats) = bake_normal_map(&m, &opts(64), FrameSource::Own).unwrap();
        assert_eq!(stats.overlap_pixels, 0);
        assert_eq!(map.masked_count(), 64 * 64);
    }

    #[test]
    fn tilted_surface_in_flat_reference_frame() {
        // A plane tilted about the v axis, baked against the flat sheet.
        let flat = grid_sheet(3, 3, [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]);
        let mut tilted = flat.clone();
        let a: f64 = 0.3;
        for p in &mut tilted.positions {
            p[2] = p[0] * a.tan();
        }
        let (map, _) = bake_normal_map(&tilted, &opts(16), FrameSource::Reference(&flat)).unwrap();
        let n = map.normal(8, 8);
        assert!((n[0] as f64 + a.sin()).abs() < 1e-5, "{n:?}");
        assert!((n[2] as f64 - a.cos()).abs() < 1e-5);
        let (own, _) = bake_normal_map(&tilted, &opts(16), FrameSource::Own).unwrap();
        assert!((own.normal(8, 8)[2] - 1.0).abs() < 1e-5);
    }
}
