use std::path::Path;
use std::process::{Command, Output};

use detail_core::mesh::grid_sheet;
use detail_core::normal_map::write_sequence;
use detail_core::NormalMapFrame;

const BIN: &str = env!("CARGO_BIN_EXE_garment-detail");

const SMALL: &str = r#"
seed = 2
materials = ["silk_chamuse", "wool_melton"]

[enhancer]
widths = [8, 16, 32, 64]

[train]
steps = 6
batch_size = 2
crops_per_frame = 4
pool_size = 8
checkpoint_every = 3

[classifier]
epochs = 5
crops_per_frame = 4

[vote]
patches_per_frame = 4
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small_corpus(root: &Path) -> std::path::PathBuf {
    let cfg = root.join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    for (i, m) in ["silk_chamuse", "wool_melton"].iter().enumerate() {
        let out = root.join("data").join(m);
        let seed = (i + 1).to_string();
        ok(&["--config", s(&cfg), "--seed", &seed, "--out", s(&out), "generate", "--material", m, "--frames", "2", "--width", "192", "--height", "192"]);
    }
    cfg
}

#[test]
fn config_defaults_print_and_reparse() {
    let out = run(&["config", "--defaults"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("eta = 5000.0") && text.contains("style = 10000.0"), "{text}");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, &text).unwrap();
    ok(&["--config", s(&path), "config"]);
}

#[test]
fn bad_config_key_exits_with_code_two_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "[recovery]\nomegaa = 3.0\n").unwrap();
    let out = run(&["--config", s(&path), "config"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("recovery") && err.contains("omegaa"), "{err}");
}

#[test]
fn train_enhance_resume_and_classify() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_corpus(root);
    let data = root.join("data");
    let model = root.join("model");
    ok(&["--config", s(&cfg), "--out", s(&model), "train", "--data", s(&data)]);
    let csv = std::fs::read_to_string(model.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(model.join("checkpoints/step_000003.safetensors").is_file());

    // resuming from step 3 continues exactly where the straight run went
    let resumed = root.join("resumed");
    ok(&[
        "--config", s(&cfg), "--out", s(&resumed), "train", "--data", s(&data),
        "--resume", s(&model.join("checkpoints/step_000003.safetensors")),
    ]);
    assert_eq!(std::fs::read_to_string(resumed.join("loss.csv")).unwrap(), csv);

    let input = data.join("wool_melton/coarse");
    let ckpt = model.join("enhancer.safetensors");
    let given = root.join("given");
    ok(&["--config", s(&cfg), "--out", s(&given), "enhance", "--model", s(&ckpt), "--input", s(&input), "--material", "wool_melton"]);
    let prov = json(&given.join("provenance.json"));
    assert_eq!(prov["source"], "given");
    assert_eq!(prov["material"], "wool_melton");
    assert!(prov["vote"].is_null());
    assert!(given.join("frame_0001.png").is_file() && given.join("mask.png").is_file());

    let out = run(&["--config", s(&cfg), "--out", s(&root.join("x")), "enhance", "--model", s(&ckpt), "--input", s(&input), "--material", "tweed"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let clf = root.join("clf");
    ok(&["--config", s(&cfg), "--out", s(&clf), "classify", "train", "--data", s(&data)]);
    let predicted = root.join("predicted");
    ok(&[
        "--config", s(&cfg), "--out", s(&predicted), "enhance", "--model", s(&ckpt), "--input", s(&input),
        "--classifier", s(&clf.join("classifier.safetensors")),
    ]);
    let prov = json(&predicted.join("provenance.json"));
    assert_eq!(prov["source"], "predicted");
    assert_eq!(prov["vote"]["histogram"].as_array().unwrap().len(), 2);
    assert_eq!(prov["vote"]["per_patch"].as_array().unwrap().len(), 8);

    let votes = root.join("votes");
    ok(&[
        "--config", s(&cfg), "--out", s(&votes), "classify", "vote",
        "--classifier", s(&clf.join("classifier.safetensors")), "--input", s(&data.join("silk_chamuse")), s(&input),
    ]);
    let v = json(&votes.join("votes.json"));
    assert_eq!(v["results"].as_array().unwrap().len(), 2);
    assert!(v["accuracy"].is_number());

    // enhance without a material or classifier is a configuration error
    let out = run(&["--config", s(&cfg), "--out", s(&root.join("y")), "enhance", "--model", s(&ckpt), "--input", s(&input)]);
    assert_eq!(out.status.code(), Some(2));
}

fn write_sheets(dir: &Path, frames: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for t in 0..frames {
        let mut m = grid_sheet(9, 9, [0.25, 0.25], [0.0, 0.0], [1.0, 1.0]);
        for p in &mut m.positions {
            p[2] = 0.01 * t as f64 * (p[0] * 10.0).sin();
        }
        m.write_obj(&dir.join(format!("frame_{t:04}.obj"))).unwrap();
    }
}

#[test]
fn bake_is_deterministic_and_reports_missing_uvs() {
    let dir = tempfile::tempdir().unwrap();
    let meshes = dir.path().join("meshes");
    write_sheets(&meshes, 2);
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[bake]\nwidth = 64\nheight = 64\npixels_per_meter = 256.0\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["--config", s(&cfg), "--out", s(out), "bake", "--meshes", s(&meshes)]);
    }
    for f in ["meta.json", "mask.png", "frame_0000.png", "frame_0001.png"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let broken = dir.path().join("broken");
    std::fs::create_dir_all(&broken).unwrap();
    std::fs::write(broken.join("frame_0000.obj"), "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
    let out = run(&["--config", s(&cfg), "--out", s(&dir.path().join("c")), "bake", "--meshes", s(&broken)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame_0000.obj"));
}

#[test]
fn lift_reduces_normal_error_and_rejects_open_bodies() {
    let dir = tempfile::tempdir().unwrap();
    let meshes = dir.path().join("meshes");
    write_sheets(&meshes, 1);
    // a gentle bump everywhere on the sheet
    let mut map = NormalMapFrame::background(64, 64, 256.0, 0);
    for r in 0..64 {
        for c in 0..64 {
            let (x, y) = ((c as f32 + 0.5) / 64.0, 1.0 - (r as f32 + 0.5) / 64.0);
            let k = std::f32::consts::PI;
            let (hx, hy) = (0.3 * (k * x).cos() * (k * y).sin(), 0.3 * (k * x).sin() * (k * y).cos());
            let n = (hx * hx + hy * hy + 1.0).sqrt();
            map.set_normal(r, c, [-hx / n, -hy / n, 1.0 / n]);
        }
    }
    let maps = dir.path().join("maps");
    write_sequence(&maps, &[map], None, serde_json::Value::Null).unwrap();
    let out = dir.path().join("lifted");
    ok(&["--out", s(&out), "lift", "--meshes", s(&meshes), "--maps", s(&maps)]);
    let report = json(&out.join("lift_report.json"));
    let f = &report[0];
    assert!(f["angular_error_after"].as_f64().unwrap() < f["angular_error_before"].as_f64().unwrap(), "{f}");
    assert!(out.join("frame_0000.obj").is_file());

    let bake_only = dir.path().join("bake_only");
    ok(&["--out", s(&bake_only), "lift", "--meshes", s(&meshes), "--bake-only"]);
    assert!(bake_only.join("frame_0000.obj").is_file() && bake_only.join("maps/frame_0000.png").is_file());

    let open = dir.path().join("open.obj");
    grid_sheet(3, 3, [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]).write_obj(&open).unwrap();
    let res = run(&["--out", s(&dir.path().join("z")), "lift", "--meshes", s(&meshes), "--maps", s(&maps), "--body", s(&open)]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("topology"), "{}", String::from_utf8_lossy(&res.stderr));
}
