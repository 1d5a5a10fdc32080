use std::path::Path;

use detail_core::bake::BakeOptions;
use detail_core::material::default_vocabulary;
use detail_core::mesh::grid_sheet;
use detail_core::procedural::{
    generate_pair_sequence, ingest_simulated_pairs, read_pair_sequence, write_pair_sequence, ProceduralSpec,
    DOWNSAMPLE_FACTOR,
};
use detail_core::{Error, GarmentMesh};

fn wavy(n: usize, t: usize) -> GarmentMesh {
    let mut m = grid_sheet(n, n, [0.4, 0.4], [0.05, 0.05], [0.95, 0.95]);
    for p in &mut m.positions {
        p[2] = 0.03 * (p[0] * 15.0 + t as f64 * 0.2).sin() + 0.002 * (p[1] * 120.0).sin();
    }
    m
}

fn write_meshes(dir: &Path, n: usize, frames: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for t in 0..frames {
        wavy(n, t).write_obj(&dir.join(format!("frame_{t:03}.obj"))).unwrap();
    }
}

fn bake() -> BakeOptions {
    BakeOptions { width: 48, height: 48, pixels_per_meter: 120.0, ..Default::default() }
}

#[test]
fn corpus_round_trips_through_disk() {
    let spec = ProceduralSpec::preset("silk_chiffon", 60, 48, 2, 11).unwrap();
    let pairs = generate_pair_sequence(&spec, &default_vocabulary()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_pair_sequence(dir.path(), &pairs, &spec.material, Some(&spec)).unwrap();
    let loaded = read_pair_sequence(dir.path()).unwrap();
    assert_eq!(loaded.material.as_deref(), Some("silk_chiffon"));
    assert_eq!(loaded.fine.len(), 2);
    assert_eq!(loaded.coarse[0].width, 60 / DOWNSAMPLE_FACTOR);
    let echoed: ProceduralSpec = serde_json::from_value(loaded.meta.extra["spec"].clone()).unwrap();
    assert_eq!(echoed, spec);
    for (a, b) in loaded.fine[1].normals.iter().zip(&pairs[1].fine.normals) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-4);
        }
    }

    // regenerating writes byte-identical files
    let again = tempfile::tempdir().unwrap();
    write_pair_sequence(again.path(), &generate_pair_sequence(&spec, &default_vocabulary()).unwrap(), &spec.material, Some(&spec))
        .unwrap();
    for sub in ["fine/frame_0000.png", "coarse/frame_0001.png", "fine/mask.png", "coarse/meta.json"] {
        assert_eq!(std::fs::read(dir.path().join(sub)).unwrap(), std::fs::read(again.path().join(sub)).unwrap(), "{sub}");
    }
}

#[test]
fn fine_only_ingestion_gives_training_pairs() {
    let dir = tempfile::tempdir().unwrap();
    write_meshes(&dir.path().join("fine"), 17, 3);
    let corpus = ingest_simulated_pairs(None, &dir.path().join("fine"), &bake()).unwrap();
    assert_eq!(corpus.train.len(), 3);
    assert!(corpus.test.is_empty());
    for (t, (coarse, fine)) in corpus.train.iter().enumerate() {
        assert_eq!(fine.frame_index, t);
        assert_eq!(*coarse, fine.downsample(DOWNSAMPLE_FACTOR).unwrap());
        fine.validate().unwrap();
    }
}

#[test]
fn coarse_sequence_becomes_test_inputs() {
    let dir = tempfile::tempdir().unwrap();
    write_meshes(&dir.path().join("fine"), 17, 2);
    write_meshes(&dir.path().join("coarse"), 7, 2);
    let corpus = ingest_simulated_pairs(Some(&dir.path().join("coarse")), &dir.path().join("fine"), &bake()).unwrap();
    assert_eq!(corpus.train.len(), 2);
    assert_eq!(corpus.test.len(), 2);
    assert_eq!(corpus.test[0].mask, corpus.train[0].1.mask);
}

#[test]
fn mismatched_frame_counts_name_the_shorter_sequence() {
    let dir = tempfile::tempdir().unwrap();
    write_meshes(&dir.path().join("fine"), 9, 3);
    write_meshes(&dir.path().join("coarse"), 5, 2);
    let coarse = dir.path().join("coarse");
    match ingest_simulated_pairs(Some(&coarse), &dir.path().join("fine"), &bake()) {
        Err(Error::Ingestion(msg)) => assert!(msg.contains(&coarse.display().to_string()), "{msg}"),
        other => panic!("expected ingestion error, got {other:?}"),
    }
}

#[test]
fn different_uv_layouts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_meshes(&dir.path().join("fine"), 9, 1);
    let coarse = dir.path().join("coarse");
    std::fs::create_dir_all(&coarse).unwrap();
    let mut m = grid_sheet(5, 5, [0.4, 0.4], [0.05, 0.05], [0.45, 0.45]);
    m.positions.iter_mut().for_each(|p| p[2] = 0.0);
    m.write_obj(&coarse.join("frame_000.obj")).unwrap();
    assert!(matches!(
        ingest_simulated_pairs(Some(&coarse), &dir.path().join("fine"), &bake()),
        Err(Error::Ingestion(_))
    ));
}
