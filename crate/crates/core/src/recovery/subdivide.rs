use std::collections::HashMap;

use crate::mesh::{edge_face_counts, edge_key, GarmentMesh};
use crate::vec3;
use crate::{Error, Result};

/// Midpoint (1→4) subdivision applied `levels` times. Edge midpoints get the
/// mean of their endpoint positions and of their endpoint UVs.
pub fn upsample_mesh(coarse: &GarmentMesh, levels: usize) -> Result<GarmentMesh> {
    if levels == 0 {
        return Err(Error::Parameter("upsampling needs at least one level".into()));
    }
    coarse.validate()?;
    if let Some(((a, b), c)) = edge_face_counts(&coarse.faces).into_iter().find(|&(_, c)| c > 2) {
        return Err(Error::Topology(format!("edge ({a}, {b}) is shared by {c} faces")));
    }
    let mut mesh = coarse.clone();
    for _ in 0..levels {
        mesh = subdivide_once(&mesh);
    }
    Ok(mesh)
}

fn subdivide_once(m: &GarmentMesh) -> GarmentMesh {
    let mut positions = m.positions.clone();
    let mut uvs = m.uvs.clone();
    let mut pmid: HashMap<(usize, usize), usize> = HashMap::new();
    let mut tmid: HashMap<(usize, usize), usize> = HashMap::new();
    let mut faces = Vec::with_capacity(m.faces.len() * 4);
    let mut face_uvs = Vec::with_capacity(m.faces.len() * 4);
    for (f, t) in m.faces.iter().zip(&m.face_uvs) {
        let mut pm = [0usize; 3];
        let mut tm = [0usize; 3];
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            pm[k] = *pmid.entry(edge_key(a, b)).or_insert_with(|| {
                positions.push(vec3::scale(vec3::add(m.positions[a], m.positions[b]), 0.5));
                positions.len() - 1
            });
            let (ta, tb) = (t[k], t[(k + 1) % 3]);
            tm[k] = *tmid.entry(edge_key(ta, tb)).or_insert_with(|| {
                uvs.push([(m.uvs[ta][0] + m.uvs[tb][0]) * 0.5, (m.uvs[ta][1] + m.uvs[tb][1]) * 0.5]);
                uvs.len() - 1
            });
        }
        // pm[0] = mid(v0,v1), pm[1] = mid(v1,v2), pm[2] = mid(v2,v0)
        faces.extend_from_slice(&[[f[0], pm[0], pm[2]], [pm[0], f[1], pm[1]], [pm[2], pm[1], f[2]], [pm[0], pm[1], pm[2]]]);
        face_uvs.extend_from_slice(&[[t[0], tm[0], tm[2]], [tm[0], t[1], tm[1]], [tm[2], tm[1], t[2]], [tm[0], tm[1], tm[2]]]);
    }
    GarmentMesh { positions, uvs, faces, face_uvs, body: m.body.clone() }
}
