//! Triangle meshes with per-corner UVs, OBJ I/O and local frames.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::vec3::{self, V3};
use crate::{Error, Result};

/// Closed triangle mesh used as a collision body.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TriMesh {
    pub positions: Vec<V3>,
    pub faces: Vec<[usize; 3]>,
}

/// Garment surface with a UV layout (per-corner UV indices).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GarmentMesh {
    pub positions: Vec<V3>,
    pub uvs: Vec<[f64; 2]>,
    pub faces: Vec<[usize; 3]>,
    pub face_uvs: Vec<[usize; 3]>,
    pub body: Option<Arc<TriMesh>>,
}

/// Orthonormal tangent frame `[tangent, bitangent, normal]`.
pub type Frame = [V3; 3];

impl TriMesh {
    /// Errors unless every edge is shared by exactly two faces.
    pub fn check_closed(&self) -> Result<()> {
        if self.faces.is_empty() {
            return Err(Error::Topology("body mesh has no faces".into()));
        }
        let counts = edge_face_counts(&self.faces);
        let open = counts.values().filter(|&&c| c != 2).count();
        if open > 0 {
            return Err(Error::Topology(format!("body mesh is not closed: {open} edges not shared by exactly two faces")));
        }
        Ok(())
    }
}

pub(crate) fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b { (a, b) } else { (b, a) }
}

pub(crate) fn edge_face_counts(faces: &[[usize; 3]]) -> HashMap<(usize, usize), usize> {
    let mut counts = HashMap::new();
    for f in faces {
        for k in 0..3 {
            *counts.entry(edge_key(f[k], f[(k + 1) % 3])).or_insert(0) += 1;
        }
    }
    counts
}

impl GarmentMesh {
    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    /// Checks index bounds and corner counts.
    pub fn validate(&self) -> Result<()> {
        if self.faces.len() != self.face_uvs.len() {
            return Err(Error::Topology(format!(
                "{} faces but {} UV triples",
                self.faces.len(),
                self.face_uvs.len()
            )));
        }
        for (i, (f, t)) in self.faces.iter().zip(&self.face_uvs).enumerate() {
            if f.iter().any(|&v| v >= self.positions.len()) || t.iter().any(|&v| v >= self.uvs.len()) {
                return Err(Error::Topology(format!("face {i} references a missing vertex or UV")));
            }
        }
        Ok(())
    }

    /// One UV per vertex: the first corner that references it.
    pub fn vertex_uvs(&self) -> Vec<Option<[f64; 2]>> {
        let mut out = vec![None; self.positions.len()];
        for (f, t) in self.faces.iter().zip(&self.face_uvs) {
            for k in 0..3 {
                out[f[k]].get_or_insert(self.uvs[t[k]]);
            }
        }
        out
    }

    /// Sorted one-ring neighbour lists.
    pub fn one_rings(&self) -> Vec<Vec<usize>> {
        let mut rings = vec![Vec::new(); self.positions.len()];
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                rings[a].push(b);
                rings[b].push(a);
            }
        }
        for r in &mut rings {
            r.sort_unstable();
            r.dedup();
        }
        rings
    }

    /// Vertices on an edge that belongs to a single face.
    pub fn boundary_vertices(&self) -> Vec<bool> {
        let mut out = vec![false; self.positions.len()];
        for ((a, b), c) in edge_face_counts(&self.faces) {
            if c == 1 {
                out[a] = true;
                out[b] = true;
            }
        }
        out
    }

    /// Area-weighted vertex normals (zero for isolated vertices).
    pub fn vertex_normals(&self) -> Vec<V3> {
        vertex_normals(&self.positions, &self.faces)
    }

    /// Per-vertex orthonormal frames derived from the UV parameterisation.
    pub fn vertex_frames(&self) -> Vec<Frame> {
        let normals = self.vertex_normals();
        let mut tan = vec![[0.0; 3]; self.positions.len()];
        let mut bit = vec![[0.0; 3]; self.positions.len()];
        for (f, t) in self.faces.iter().zip(&self.face_uvs) {
            if let Some((ft, fb)) = face_tangents(
                [self.positions[f[0]], self.positions[f[1]], self.positions[f[2]]],
                [self.uvs[t[0]], self.uvs[t[1]], self.uvs[t[2]]],
            ) {
                for &v in f {
                    tan[v] = vec3::add(tan[v], ft);
                    bit[v] = vec3::add(bit[v], fb);
                }
            }
        }
        (0..self.positions.len())
            .map(|i| orthonormal_frame(tan[i], bit[i], normals[i]))
            .collect()
    }

    /// Copy with `iterations` rounds of uniform Laplacian smoothing.
    pub fn smoothed(&self, iterations: usize, lambda: f64) -> GarmentMesh {
        let rings = self.one_rings();
        let mut pos = self.positions.clone();
        for _ in 0..iterations {
            let prev = pos.clone();
            for (i, ring) in rings.iter().enumerate() {
                if ring.is_empty() {
                    continue;
                }
                let mut mean = [0.0; 3];
                for &j in ring {
                    mean = vec3::add(mean, prev[j]);
                }
                mean = vec3::scale(mean, 1.0 / ring.len() as f64);
                pos[i] = vec3::add(prev[i], vec3::scale(vec3::sub(mean, prev[i]), lambda));
            }
        }
        GarmentMesh { positions: pos, ..self.clone() }
    }

    /// Serialises to Wavefront OBJ text with `v`, `vt` and `f v/vt` records.
    pub fn to_obj_string(&self) -> String {
        let mut s = String::new();
        for p in &self.positions {
            let _ = writeln!(s, "v {} {} {}", p[0], p[1], p[2]);
        }
        for t in &self.uvs {
            let _ = writeln!(s, "vt {} {}", t[0], t[1]);
        }
        for (f, t) in self.faces.iter().zip(&self.face_uvs) {
            let _ = writeln!(s, "f {}/{} {}/{} {}/{}", f[0] + 1, t[0] + 1, f[1] + 1, t[1] + 1, f[2] + 1, t[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_obj_string()).map_err(|e| Error::io(path, e))
    }

    /// Same connectivity and UV layout as `other`.
    pub fn same_layout(&self, other: &GarmentMesh) -> std::result::Result<(), String> {
        if self.positions.len() != other.positions.len() {
            return Err(format!("vertex count {} != {}", other.positions.len(), self.positions.len()));
        }
        if self.faces != other.faces {
            return Err("face connectivity differs".into());
        }
        if self.face_uvs != other.face_uvs || self.uvs != other.uvs {
            return Err("UV layout differs".into());
        }
        Ok(())
    }
}

pub fn vertex_normals(positions: &[V3], faces: &[[usize; 3]]) -> Vec<V3> {
    let mut acc = vec![[0.0; 3]; positions.len()];
    for f in faces {
        let n = vec3::cross(vec3::sub(positions[f[1]], positions[f[0]]), vec3::sub(positions[f[2]], positions[f[0]]));
        for &v in f {
            acc[v] = vec3::add(acc[v], n);
        }
    }
    acc.into_iter().map(|n| vec3::normalize(n).unwrap_or([0.0; 3])).collect()
}

/// Unnormalised `(dP/du, dP/dv)` of a triangle; `None` for degenerate UVs.
pub fn face_tangents(p: [V3; 3], uv: [[f64; 2]; 3]) -> Option<(V3, V3)> {
    let e1 = vec3::sub(p[1], p[0]);
    let e2 = vec3::sub(p[2], p[0]);
    let (du1, dv1) = (uv[1][0] - uv[0][0], uv[1][1] - uv[0][1]);
    let (du2, dv2) = (uv[2][0] - uv[0][0], uv[2][1] - uv[0][1]);
    let det = du1 * dv2 - du2 * dv1;
    if det.abs() < 1e-18 {
        return None;
    }
    let r = 1.0 / det;
    let t = vec3::scale(vec3::sub(vec3::scale(e1, dv2), vec3::scale(e2, dv1)), r);
    let b = vec3::scale(vec3::sub(vec3::scale(e2, du1), vec3::scale(e1, du2)), r);
    Some((t, b))
}

/// Gram-Schmidt frame with `z` along `normal`, `x` towards `tangent` and
/// `y` on the side of `bitangent`. Falls back to an arbitrary frame when the
/// inputs are degenerate.
pub fn orthonormal_frame(tangent: V3, bitangent: V3, normal: V3) -> Frame {
    let n = vec3::normalize(normal).unwrap_or([0.0, 0.0, 1.0]);
    let t = vec3::normalize(vec3::sub(tangent, vec3::scale(n, vec3::dot(tangent, n))))
        .or_else(|| {
            let b = vec3::sub(bitangent, vec3::scale(n, vec3::dot(bitangent, n)));
            vec3::normalize(b).map(|b| vec3::cross(b, n))
        })
        .unwrap_or_else(|| {
            let a = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            vec3::normalize(vec3::sub(a, vec3::scale(n, vec3::dot(a, n)))).unwrap()
        });
    let mut b = vec3::cross(n, t);
    if vec3::dot(b, bitangent) < 0.0 {
        b = vec3::scale(b, -1.0);
    }
    [t, b, n]
}

/// Tangent-space coordinates of a world vector.
#[inline]
pub fn to_tangent(frame: &Frame, v: V3) -> V3 {
    [vec3::dot(frame[0], v), vec3::dot(frame[1], v), vec3::dot(frame[2], v)]
}

/// World vector from tangent-space coordinates.
#[inline]
pub fn from_tangent(frame: &Frame, t: V3) -> V3 {
    vec3::add(vec3::add(vec3::scale(frame[0], t[0]), vec3::scale(frame[1], t[1])), vec3::scale(frame[2], t[2]))
}

struct ObjData {
    positions: Vec<V3>,
    uvs: Vec<[f64; 2]>,
    faces: Vec<[usize; 3]>,
    face_uvs: Vec<Option<[usize; 3]>>,
}

fn parse_index(tok: &str, len: usize, path: &Path, line: usize) -> Result<usize> {
    let i: i64 = tok.parse().map_err(|_| Error::Parse { path: path.into(), line, reason: format!("bad index `{tok}`") })?;
    let idx = if i < 0 { len as i64 + i } else { i - 1 };
    if idx < 0 {
        return Err(Error::Parse { path: path.into(), line, reason: format!("index {i} out of range") });
    }
    Ok(idx as usize)
}

fn parse_obj(text: &str, path: &Path) -> Result<ObjData> {
    let mut d = ObjData { positions: vec![], uvs: vec![], faces: vec![], face_uvs: vec![] };
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let mut it = raw.split_whitespace();
        let bad = |reason: &str| Error::Parse { path: path.into(), line, reason: reason.into() };
        match it.next() {
            Some("v") => {
                let v: Vec<f64> = it.take(3).map(|s| s.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad vertex"))?;
                if v.len() != 3 {
                    return Err(bad("vertex needs 3 coordinates"));
                }
                d.positions.push([v[0], v[1], v[2]]);
            }
            Some("vt") => {
                let v: Vec<f64> = it.take(2).map(|s| s.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad texture coordinate"))?;
                if v.len() != 2 {
                    return Err(bad("vt needs 2 coordinates"));
                }
                d.uvs.push([v[0], v[1]]);
            }
            Some("f") => {
                let mut vs = Vec::new();
                let mut ts = Vec::new();
                for tok in it {
                    let mut parts = tok.split('/');
                    vs.push(parse_index(parts.next().unwrap_or(""), d.positions.len(), path, line)?);
                    match parts.next() {
                        Some(t) if !t.is_empty() => ts.push(Some(parse_index(t, d.uvs.len(), path, line)?)),
                        _ => ts.push(None),
                    }
                }
                if vs.len() < 3 {
                    return Err(bad("face needs at least 3 corners"));
                }
                for k in 1..vs.len() - 1 {
                    d.faces.push([vs[0], vs[k], vs[k + 1]]);
                    d.face_uvs.push(match (ts[0], ts[k], ts[k + 1]) {
                        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
                        _ => None,
                    });
                }
            }
            _ => {}
        }
    }
    for f in &d.faces {
        if f.iter().any(|&v| v >= d.positions.len()) {
            return Err(Error::Parse { path: path.into(), line: 0, reason: "face references a missing vertex".into() });
        }
    }
    Ok(d)
}

/// Reads a garment OBJ; every face must carry `vt` indices.
pub fn read_garment_obj(path: &Path) -> Result<GarmentMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let d = parse_obj(&text, path)?;
    let mut face_uvs = Vec::with_capacity(d.faces.len());
    for (i, t) in d.face_uvs.iter().enumerate() {
        match t {
            Some(t) => face_uvs.push(*t),
            None => {
                return Err(Error::Parse {
                    path: path.into(),
                    line: 0,
                    reason: format!("face {i} has no UV coordinates (missing `vt` indices)"),
                })
            }
        }
    }
    let mesh = GarmentMesh { positions: d.positions, uvs: d.uvs, faces: d.faces, face_uvs, body: None };
    mesh.validate().map_err(|e| Error::Parse { path: path.into(), line: 0, reason: e.to_string() })?;
    Ok(mesh)
}

/// Reads any triangle OBJ, ignoring UVs.
pub fn read_trimesh_obj(path: &Path) -> Result<TriMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let d = parse_obj(&text, path)?;
    Ok(TriMesh { positions: d.positions, faces: d.faces })
}

pub fn write_trimesh_obj(mesh: &TriMesh, path: &Path) -> Result<()> {
    let mut s = String::new();
    for p in &mesh.positions {
        let _ = writeln!(s, "v {} {} {}", p[0], p[1], p[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Frame index encoded as the last run of digits in a file stem.
pub fn frame_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let end = stem.rfind(|c: char| c.is_ascii_digit())? + 1;
    let start = stem[..end].rfind(|c: char| !c.is_ascii_digit()).map_or(0, |i| i + 1);
    stem[start..end].parse().ok()
}

/// Sorted `*.obj` files of a directory, ordered by frame number.
pub fn list_obj_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("obj")) {
            let n = frame_number(&path)
                .ok_or_else(|| Error::Sequence(format!("{} has no frame index in its name", path.display())))?;
            files.push((n, path));
        }
    }
    files.sort();
    for w in files.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::Sequence(format!("duplicate frame index {} ({})", w[0].0, w[1].1.display())));
        }
    }
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

/// Loads a per-frame OBJ sequence sharing connectivity and UV layout.
pub fn load_mesh_sequence(dir: &Path) -> Result<Vec<GarmentMesh>> {
    if !dir.is_dir() {
        return Err(Error::Sequence(format!("{} is not a directory", dir.display())));
    }
    let files = list_obj_files(dir)?;
    if files.is_empty() {
        return Err(Error::Sequence(format!("no OBJ frames in {}", dir.display())));
    }
    let mut frames: Vec<GarmentMesh> = Vec::with_capacity(files.len());
    for path in &files {
        let mesh = read_garment_obj(path)?;
        if let Some(first) = frames.first() {
            first
                .same_layout(&mesh)
                .map_err(|reason| Error::Consistency { path: path.clone(), reason })?;
        }
        frames.push(mesh);
    }
    Ok(frames)
}

/// Regular `nx` x `ny` vertex grid in the z = 0 plane with UVs spanning
/// `uv_min..uv_max`. Each quad is split along the same diagonal.
pub fn grid_sheet(nx: usize, ny: usize, size: [f64; 2], uv_min: [f64; 2], uv_max: [f64; 2]) -> GarmentMesh {
    let mut m = GarmentMesh::default();
    for j in 0..ny {
        for i in 0..nx {
            let s = i as f64 / (nx - 1) as f64;
            let t = j as f64 / (ny - 1) as f64;
            m.positions.push([s * size[0], t * size[1], 0.0]);
            m.uvs.push([uv_min[0] + s * (uv_max[0] - uv_min[0]), uv_min[1] + t * (uv_max[1] - uv_min[1])]);
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let a = j * nx + i;
            let (b, c, d) = (a + 1, a + nx, a + nx + 1);
            m.faces.push([a, b, d]);
            m.faces.push([a, d, c]);
        }
    }
    m.face_uvs = m.faces.clone();
    m
}

/// Icosphere-style closed sphere built by subdividing an octahedron.
pub fn sphere_trimesh(center: V3, radius: f64, subdivisions: usize) -> TriMesh {
    let mut positions: Vec<V3> = vec![
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 2, 4],
        [2, 1, 4],
        [1, 3, 4],
        [3, 0, 4],
        [2, 0, 5],
        [1, 2, 5],
        [3, 1, 5],
        [0, 3, 5],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, positions: &mut Vec<V3>| -> usize {
            *mid.entry(edge_key(a, b)).or_insert_with(|| {
                let m = vec3::normalize(vec3::add(positions[a], positions[b])).unwrap();
                positions.push(m);
                positions.len() - 1
            })
        };
        for f in &faces {
            let ab = midpoint(f[0], f[1], &mut positions);
            let bc = midpoint(f[1], f[2], &mut positions);
            let ca = midpoint(f[2], f[0], &mut positions);
            next.extend_from_slice(&[[f[0], ab, ca], [ab, f[1], bc], [ca, bc, f[2]], [ab, bc, ca]]);
        }
        faces = next;
    }
    let positions = positions.into_iter().map(|p| vec3::add(center, vec3::scale(p, radius))).collect();
    TriMesh { positions, faces }
}
