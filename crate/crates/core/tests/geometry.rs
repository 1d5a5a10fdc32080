use detail_core::bake::{bake_frame_field, bake_normal_map, BakeOptions, FrameSource};
use detail_core::mesh::{load_mesh_sequence, to_tangent};
use detail_core::normal_map::{pixel_to_uv, read_sequence, write_sequence, NormalMapFrame};
use detail_core::recovery::sample_target_normals;
use detail_core::vec3::{self, V3};
use detail_core::{Error, GarmentMesh};

const Z_TOP: f64 = 0.8;

/// Cylindrical equal-area map of the unit sphere's positive octant:
/// azimuth follows u, height follows v.
fn octant_point(u: f64, v: f64) -> V3 {
    let theta = u * std::f64::consts::FRAC_PI_2;
    let z = Z_TOP * v;
    let r = (1.0 - z * z).sqrt();
    [r * theta.cos(), r * theta.sin(), z]
}

fn octant_mesh(n: usize) -> GarmentMesh {
    let mut m = detail_core::mesh::grid_sheet(n, n, [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]);
    for (p, uv) in m.positions.iter_mut().zip(&m.uvs) {
        *p = octant_point(uv[0], uv[1]);
    }
    m
}

/// Same layout, laid flat so its tangent frame is the world frame.
fn flat_twin(m: &GarmentMesh) -> GarmentMesh {
    let mut f = m.clone();
    for (p, uv) in f.positions.iter_mut().zip(&f.uvs) {
        *p = [uv[0], uv[1], 0.0];
    }
    f
}

fn opts(n: usize) -> BakeOptions {
    BakeOptions { width: n, height: n, pixels_per_meter: 100.0, ..Default::default() }
}

fn f64v(n: [f32; 3]) -> V3 {
    [n[0] as f64, n[1] as f64, n[2] as f64]
}

#[test]
fn sphere_octant_matches_analytic_normals_in_world_frame() {
    let mesh = octant_mesh(65);
    let flat = flat_twin(&mesh);
    let (map, stats) = bake_normal_map(&mesh, &opts(96), FrameSource::Reference(&flat)).unwrap();
    assert_eq!(stats.frame_fallbacks, 0);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for r in 0..96 {
        for c in 0..96 {
            if !map.is_masked(r, c) {
                continue;
            }
            let uv = pixel_to_uv(r as f64, c as f64, 96, 96);
            let expected = octant_point(uv[0], uv[1]);
            let got = f64v(map.normal(r, c));
            for k in 0..3 {
                worst = worst.max((got[k] - expected[k]).abs());
            }
            checked += 1;
        }
    }
    assert!(checked > 90 * 90);
    assert!(worst < 2e-2, "max component error {worst}");
}

#[test]
fn sphere_octant_matches_analytic_normals_in_own_frame() {
    let mesh = octant_mesh(65);
    let (map, _) = bake_normal_map(&mesh, &opts(96), FrameSource::Own).unwrap();
    let frames = bake_frame_field(&mesh, 96, 96).unwrap();
    let mut worst = 0.0f64;
    for r in 0..96 {
        for c in 0..96 {
            let i = r * 96 + c;
            let Some(frame) = frames[i] else { continue };
            let uv = pixel_to_uv(r as f64, c as f64, 96, 96);
            let expected = to_tangent(&frame, octant_point(uv[0], uv[1]));
            let got = f64v(map.normals[i]);
            for k in 0..3 {
                worst = worst.max((got[k] - expected[k]).abs());
            }
        }
    }
    assert!(worst < 2e-2, "max component error {worst}");
}

#[test]
fn baked_sphere_samples_back_within_three_degrees() {
    let mesh = octant_mesh(33);
    let (map, _) = bake_normal_map(&mesh, &opts(128), FrameSource::Own).unwrap();
    let normals = sample_target_normals(&mesh, &map).unwrap();
    let worst = normals
        .iter()
        .zip(&mesh.positions)
        .map(|(n, p)| vec3::angle(*n, vec3::normalize(*p).unwrap()).to_degrees())
        .fold(0.0, f64::max);
    assert!(worst < 3.0, "max angular error {worst} deg");
}

#[test]
fn constant_map_on_flat_sheet_gives_sheet_normal() {
    let mut sheet = detail_core::mesh::grid_sheet(6, 4, [0.5, 0.3], [0.1, 0.2], [0.9, 0.8]);
    // tilt the sheet so the world normal is not an axis
    for p in &mut sheet.positions {
        let (y, z) = (p[1], p[2]);
        p[1] = y * 0.8 - z * 0.6;
        p[2] = y * 0.6 + z * 0.8;
    }
    let mut map = NormalMapFrame::background(40, 40, 100.0, 0);
    for r in 0..40 {
        for c in 0..40 {
            map.set_normal(r, c, [0.0, 0.0, 1.0]);
        }
    }
    let normals = sample_target_normals(&sheet, &map).unwrap();
    for n in normals {
        assert!(vec3::norm(vec3::sub(n, [0.0, -0.6, 0.8])) < 1e-9, "{n:?}");
    }
}

#[test]
fn background_lookup_lists_vertices() {
    let sheet = detail_core::mesh::grid_sheet(3, 3, [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]);
    let map = NormalMapFrame::background(16, 16, 100.0, 0);
    match sample_target_normals(&sheet, &map) {
        Err(Error::Lookup { vertices }) => assert_eq!(vertices, (0..9).collect::<Vec<_>>()),
        other => panic!("expected lookup error, got {other:?}"),
    }
}

#[test]
fn mesh_sequences_load_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let base = octant_mesh(5);
    for t in 0..3 {
        let mut m = base.clone();
        m.positions.iter_mut().for_each(|p| p[2] += 0.01 * t as f64);
        m.write_obj(&dir.path().join(format!("frame_{t:04}.obj"))).unwrap();
    }
    let seq = load_mesh_sequence(dir.path()).unwrap();
    assert_eq!(seq.len(), 3);
    assert!(seq.iter().all(|m| m.faces == base.faces));
    assert!((seq[2].positions[0][2] - base.positions[0][2] - 0.02).abs() < 1e-9);

    let mut extra = base.clone();
    extra.positions.push([0.0; 3]);
    extra.write_obj(&dir.path().join("frame_0003.obj")).unwrap();
    assert!(matches!(load_mesh_sequence(dir.path()), Err(Error::Consistency { .. })));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_mesh_sequence(empty.path()), Err(Error::Sequence(_))));
}

#[test]
fn baked_sequence_survives_png_round_trip() {
    let mesh = octant_mesh(9);
    let (map, _) = bake_normal_map(&mesh, &opts(48), FrameSource::Own).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), &[map.clone(), map.clone()], Some("knit_terry"), serde_json::Value::Null).unwrap();
    let (meta, frames) = read_sequence(dir.path()).unwrap();
    assert_eq!(meta.material.as_deref(), Some("knit_terry"));
    assert_eq!(frames.len(), 2);
    assert_eq!(frames[1].mask, map.mask);
    assert_eq!(frames[1].frame_index, 1);
    for (a, b) in frames[0].normals.iter().zip(&map.normals) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-4);
        }
    }
}

#[test]
fn downsample_mixes_blocks_before_renormalising() {
    let mut m = NormalMapFrame::background(4, 2, 100.0, 0);
    m.set_normal(0, 0, [0.0, 0.0, 1.0]);
    m.set_normal(1, 1, [0.0, 0.0, 1.0]);
    m.set_normal(0, 1, [1.0, 0.0, 0.0]);
    m.set_normal(1, 0, [1.0, 0.0, 0.0]);
    let d = m.downsample(2).unwrap();
    let s = std::f32::consts::FRAC_1_SQRT_2;
    let n = d.normal(0, 0);
    assert!((n[0] - s).abs() < 1e-6 && n[1].abs() < 1e-6 && (n[2] - s).abs() < 1e-6);
    assert!(!d.is_masked(0, 1));
    assert_eq!(d.pixels_per_meter, 50.0);
    assert!(matches!(m.downsample(3), Err(Error::Shape(_))));
}
