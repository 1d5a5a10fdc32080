//! Procedural coarse/fine normal-map corpora and ingestion of simulated
//! mesh sequences.
//!
//! A fine map is the tangent-space normal field of a heightfield made of a
//! few low-frequency folds plus a multi-octave wrinkle field whose
//! wavelength, amplitude and anisotropy depend on the pseudo-material. The
//! coarse map of every pair is the fine map box-downsampled by
//! [`DOWNSAMPLE_FACTOR`].

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bake::{bake_normal_map, rasterize, BakeOptions, FrameSource};
use crate::material::MaterialLabel;
use crate::mesh::load_mesh_sequence;
use crate::normal_map::{read_sequence, write_sequence, NormalMapFrame, SequenceMeta};
use crate::{Error, Result};

/// Fine-to-coarse resolution ratio of every generated pair.
pub const DOWNSAMPLE_FACTOR: usize = 3;
/// Minimum ratio between fold and wrinkle wavelengths.
pub const MIN_SCALE_SEPARATION: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldParams {
    /// Height amplitude in meters.
    pub amplitude: f64,
    /// Wavelength in meters.
    pub wavelength: f64,
    /// Phase advance per frame in radians.
    pub drift: f64,
    /// Number of superposed fold waves.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrinkleParams {
    /// Height amplitude of the first octave in meters.
    pub amplitude: f64,
    /// Wavelength of the first (longest) octave in meters.
    pub wavelength: f64,
    pub octaves: usize,
    /// Waves per octave.
    pub waves: usize,
    /// 0 spreads wave directions uniformly, 1 aligns them all.
    pub anisotropy: f64,
    /// Amplitude factor between successive octaves.
    pub gain: f64,
    /// Phase advance per frame in radians.
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProceduralSpec {
    pub material: String,
    pub folds: FoldParams,
    pub wrinkles: WrinkleParams,
    pub frames: usize,
    /// Time index of the first rendered frame.
    #[serde(default)]
    pub start_frame: usize,
    pub seed: u64,
    /// Fine map size in pixels; must be divisible by the downsample factor.
    pub width: usize,
    pub height: usize,
    pub pixels_per_meter: f64,
    /// Unmasked border width in fine pixels.
    pub border: usize,
}

/// Wrinkle presets for the default material vocabulary.
pub fn material_preset(material: &str) -> Result<WrinkleParams> {
    let (amplitude, wavelength, octaves, anisotropy) = match material {
        "silk_chamuse" => (0.0012, 0.016, 2, 0.3),
        "denim_lightweight" => (0.0040, 0.040, 2, 0.75),
        "knit_terry" => (0.0020, 0.025, 3, 0.0),
        "wool_melton" => (0.0050, 0.060, 1, 0.5),
        "silk_chiffon" => (0.0006, 0.012, 2, 0.85),
        other => return Err(Error::Material(format!("no procedural preset for material '{other}'"))),
    };
    Ok(WrinkleParams { amplitude, wavelength, octaves, waves: 6, anisotropy, gain: 0.5, drift: 0.02 })
}

impl ProceduralSpec {
    /// Spec for a preset material with default folds.
    pub fn preset(material: &str, width: usize, height: usize, frames: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            material: material.to_string(),
            folds: FoldParams { amplitude: 0.02, wavelength: 0.3, drift: 0.05, count: 3 },
            wrinkles: material_preset(material)?,
            frames,
            start_frame: 0,
            seed,
            width,
            height,
            pixels_per_meter: crate::bake::DEFAULT_PIXELS_PER_METER,
            border: 4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.folds;
        let w = &self.wrinkles;
        if self.frames == 0 {
            return Err(Error::Spec("frame count must be positive".into()));
        }
        if self.width == 0 || self.height == 0 || self.width % DOWNSAMPLE_FACTOR != 0 || self.height % DOWNSAMPLE_FACTOR != 0 {
            return Err(Error::Spec(format!(
                "map size {}x{} must be positive multiples of {DOWNSAMPLE_FACTOR}",
                self.width, self.height
            )));
        }
        if !(self.pixels_per_meter > 0.0) {
            return Err(Error::Spec("pixels_per_meter must be positive".into()));
        }
        if 2 * self.border >= self.width.min(self.height) {
            return Err(Error::Spec(format!("border {} leaves no masked area", self.border)));
        }
        if !(f.wavelength > 0.0 && w.wavelength > 0.0) || f.amplitude < 0.0 || w.amplitude < 0.0 {
            return Err(Error::Spec("wavelengths must be positive and amplitudes non-negative".into()));
        }
        if !(0.0..=1.0).contains(&w.anisotropy) {
            return Err(Error::Spec(format!("anisotropy {} outside [0, 1]", w.anisotropy)));
        }
        let ratio = f.wavelength / w.wavelength;
        if ratio < MIN_SCALE_SEPARATION {
            return Err(Error::Spec(format!(
                "fold wavelength {} m is only {ratio:.2}x the wrinkle wavelength {} m (need >= {MIN_SCALE_SEPARATION})",
                f.wavelength, w.wavelength
            )));
        }
        Ok(())
    }
}

/// One plane wave `a sin(k·x + phase + drift t)` of the heightfield.
#[derive(Clone, Copy, Debug)]
struct Wave {
    amplitude: f64,
    k: [f64; 2],
    phase: f64,
    drift: f64,
}

fn draw_waves(spec: &ProceduralSpec) -> Vec<Wave> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut waves = Vec::new();
    let f = &spec.folds;
    let fold_amp = f.amplitude / (f.count.max(1) as f64).sqrt();
    for _ in 0..f.count {
        let theta = rng.gen_range(0.0..PI);
        let lambda = f.wavelength * rng.gen_range(0.8..1.25);
        let k = 2.0 * PI / lambda;
        waves.push(Wave {
            amplitude: fold_amp,
            k: [k * theta.cos(), k * theta.sin()],
            phase: rng.gen_range(0.0..2.0 * PI),
            drift: f.drift * rng.gen_range(0.5..1.5),
        });
    }
    let w = &spec.wrinkles;
    let main = rng.gen_range(0.0..PI);
    let spread = (1.0 - w.anisotropy) * PI / 2.0;
    let per_wave = 1.0 / (w.waves.max(1) as f64).sqrt();
    for o in 0..w.octaves {
        let lambda = w.wavelength / 2f64.powi(o as i32);
        let amp = w.amplitude * w.gain.powi(o as i32) * per_wave;
        for _ in 0..w.waves {
            let theta = main + if spread > 0.0 { rng.gen_range(-spread..=spread) } else { 0.0 };
            let k = 2.0 * PI / (lambda * rng.gen_range(0.85..1.15));
            waves.push(Wave {
                amplitude: amp,
                k: [k * theta.cos(), k * theta.sin()],
                phase: rng.gen_range(0.0..2.0 * PI),
                drift: w.drift * rng.gen_range(-1.0..1.0),
            });
        }
    }
    waves
}

/// Fine map of frame `t`: tangent normal `(-h_x, -h_y, 1)` of the heightfield.
fn render_frame(spec: &ProceduralSpec, waves: &[Wave], t: usize) -> NormalMapFrame {
    let (w, h) = (spec.width, spec.height);
    let mut map = NormalMapFrame::background(w, h, spec.pixels_per_meter, t);
    let b = spec.border;
    for r in b..h - b {
        // tangent y follows +v, i.e. up the image
        let y = (h as f64 - r as f64 - 0.5) / spec.pixels_per_meter;
        for c in b..w - b {
            let x = (c as f64 + 0.5) / spec.pixels_per_meter;
            let (mut hx, mut hy) = (0.0, 0.0);
            for wave in waves {
                let arg = wave.k[0] * x + wave.k[1] * y + wave.phase + wave.drift * t as f64;
                let d = wave.amplitude * arg.cos();
                hx += d * wave.k[0];
                hy += d * wave.k[1];
            }
            let n = [-hx, -hy, 1.0];
            let len = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
            map.set_normal(r, c, [(n[0] / len) as f32, (n[1] / len) as f32, (1.0 / len) as f32]);
        }
    }
    map
}

/// A coarse/fine training pair.
#[derive(Clone, Debug)]
pub struct MapPair {
    pub coarse: NormalMapFrame,
    pub fine: NormalMapFrame,
    pub label: MaterialLabel,
}

/// Generates `spec.frames` pairs starting at time `spec.start_frame`.
/// Frames only differ by phase drift, so the sequence is temporally
/// continuous and later segments continue earlier ones.
pub fn generate_pair_sequence(spec: &ProceduralSpec, vocabulary: &[String]) -> Result<Vec<MapPair>> {
    spec.validate()?;
    let label = MaterialLabel::from_name(&spec.material, vocabulary)?;
    let waves = draw_waves(spec);
    (spec.start_frame..spec.start_frame + spec.frames)
        .map(|t| {
            let fine = render_frame(spec, &waves, t);
            let coarse = fine.downsample(DOWNSAMPLE_FACTOR)?;
            Ok(MapPair { coarse, fine, label })
        })
        .collect()
}

pub const FINE_DIR: &str = "fine";
pub const COARSE_DIR: &str = "coarse";

/// Writes `dir/fine` and `dir/coarse` sequence directories. The metadata
/// records the material and echoes the generator parameters.
pub fn write_pair_sequence(dir: &Path, pairs: &[MapPair], material: &str, spec: Option<&ProceduralSpec>) -> Result<()> {
    let extra = match spec {
        Some(s) => serde_json::json!({ "spec": s }),
        None => serde_json::Value::Null,
    };
    let fine: Vec<NormalMapFrame> = pairs.iter().map(|p| p.fine.clone()).collect();
    let coarse: Vec<NormalMapFrame> = pairs.iter().map(|p| p.coarse.clone()).collect();
    write_sequence(&dir.join(FINE_DIR), &fine, Some(material), extra.clone())?;
    write_sequence(&dir.join(COARSE_DIR), &coarse, Some(material), extra)?;
    Ok(())
}

/// Pair sequence loaded from disk.
#[derive(Clone, Debug)]
pub struct LoadedPairs {
    pub material: Option<String>,
    pub coarse: Vec<NormalMapFrame>,
    pub fine: Vec<NormalMapFrame>,
    pub meta: SequenceMeta,
}

pub fn read_pair_sequence(dir: &Path) -> Result<LoadedPairs> {
    let (meta, fine) = read_sequence(&dir.join(FINE_DIR))?;
    let (cmeta, coarse) = read_sequence(&dir.join(COARSE_DIR))?;
    if coarse.len() != fine.len() {
        return Err(Error::Sequence(format!(
            "{} has {} coarse frames but {} fine frames",
            dir.display(),
            coarse.len(),
            fine.len()
        )));
    }
    if cmeta.material != meta.material {
        return Err(Error::Consistency { path: dir.to_path_buf(), reason: "coarse and fine material labels differ".into() });
    }
    Ok(LoadedPairs { material: meta.material.clone(), coarse, fine, meta })
}

/// Training pairs from simulated meshes, plus coarse test inputs if given.
#[derive(Clone, Debug, Default)]
pub struct IngestedCorpus {
    /// `(downsampled fine, fine)` per frame.
    pub train: Vec<(NormalMapFrame, NormalMapFrame)>,
    /// Maps baked from the coarse simulation.
    pub test: Vec<NormalMapFrame>,
}

/// Minimum intersection-over-union of coarse and fine UV coverage.
const LAYOUT_IOU: f64 = 0.9;

fn coverage(mesh: &crate::GarmentMesh, w: usize, h: usize) -> Result<Vec<bool>> {
    Ok(rasterize(mesh, w, h)?.0.iter().map(Option::is_some).collect())
}

/// Bakes per-frame OBJ sequences into training pairs.
///
/// Fine maps use the Laplacian-smoothed fine surface as their tangent
/// frame, so folds stay in the frame and wrinkles end up in the map. The
/// coarse directory is optional; when given, its frames are baked with
/// their own frames as test inputs and must match the fine sequence in
/// length and UV coverage.
pub fn ingest_simulated_pairs(coarse_dir: Option<&Path>, fine_dir: &Path, bake: &BakeOptions) -> Result<IngestedCorpus> {
    let fine = load_mesh_sequence(fine_dir)?;
    let coarse = coarse_dir.map(load_mesh_sequence).transpose()?;
    if let (Some(c), Some(dir)) = (&coarse, coarse_dir) {
        if c.len() != fine.len() {
            let (short, n) = if c.len() < fine.len() { (dir, c.len()) } else { (fine_dir, fine.len()) };
            return Err(Error::Ingestion(format!(
                "frame counts differ ({} coarse vs {} fine); {} is shorter with {n} frames",
                c.len(),
                fine.len(),
                short.display()
            )));
        }
        let a = coverage(&c[0], bake.width, bake.height)?;
        let b = coverage(&fine[0], bake.width, bake.height)?;
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        let iou = inter as f64 / union.max(1) as f64;
        if iou < LAYOUT_IOU {
            return Err(Error::Ingestion(format!("UV layouts of coarse and fine meshes differ (coverage IoU {iou:.3})")));
        }
    }
    let mut out = IngestedCorpus::default();
    for (t, mesh) in fine.iter().enumerate() {
        let opts = BakeOptions { frame_index: t, ..*bake };
        let reference = mesh.smoothed(10, 0.5);
        let (map, _) = bake_normal_map(mesh, &opts, FrameSource::Reference(&reference))?;
        out.train.push((map.downsample(DOWNSAMPLE_FACTOR)?, map));
    }
    if let Some(coarse) = coarse {
        for (t, mesh) in coarse.iter().enumerate() {
            let opts = BakeOptions { frame_index: t, ..*bake };
            out.test.push(bake_normal_map(mesh, &opts, FrameSource::Own)?.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::default_vocabulary;

    fn spec(material: &str) -> ProceduralSpec {
        ProceduralSpec::preset(material, 96, 96, 3, 7).unwrap()
    }

    #[test]
    fn presets_are_valid() {
        for m in crate::MATERIALS {
            spec(m).validate().unwrap();
        }
        assert!(matches!(material_preset("tweed"), Err(Error::Material(_))));
    }

    #[test]
    fn later_segment_continues_the_sequence() {
        let vocab = default_vocabulary();
        let whole = generate_pair_sequence(&ProceduralSpec { frames: 5, ..spec("knit_terry") }, &vocab).unwrap();
        let tail = generate_pair_sequence(&ProceduralSpec { frames: 2, start_frame: 3, ..spec("knit_terry") }, &vocab).unwrap();
        for (a, b) in whole[3..].iter().zip(&tail) {
            assert_eq!(a.fine, b.fine);
            assert_eq!(a.coarse, b.coarse);
        }
    }

    #[test]
    fn scale_separation_enforced() {
        let mut s = spec("wool_melton");
        s.folds.wavelength = 3.9 * s.wrinkles.wavelength;
        assert!(matches!(s.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let v = default_vocabulary();
        let a = generate_pair_sequence(&spec("knit_terry"), &v).unwrap();
        let b = generate_pair_sequence(&spec("knit_terry"), &v).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.fine, y.fine);
            assert_eq!(x.coarse, y.coarse);
        }
    }

    #[test]
    fn coarse_is_downsampled_fine() {
        let pairs = generate_pair_sequence(&spec("silk_chamuse"), &default_vocabulary()).unwrap();
        for p in &pairs {
            p.fine.validate().unwrap();
            assert_eq!(p.coarse, p.fine.downsample(DOWNSAMPLE_FACTOR).unwrap());
        }
    }

    #[test]
    fn zero_wrinkles_survive_round_trip() {
        let mut s = spec("denim_lightweight");
        s.wrinkles.amplitude = 0.0;
        for p in generate_pair_sequence(&s, &default_vocabulary()).unwrap() {
            let up = p.coarse.resize(p.fine.width, p.fine.height).unwrap();
            let mut worst = 0.0f32;
            for i in 0..p.fine.normals.len() {
                if p.fine.mask[i] && up.mask[i] {
                    for k in 0..3 {
                        worst = worst.max((p.fine.normals[i][k] - up.normals[i][k]).abs());
                    }
                }
            }
            assert!(worst < 2e-2, "{worst}");
        }
    }

    #[test]
    fn frames_drift_slowly() {
        let pairs = generate_pair_sequence(&spec("wool_melton"), &default_vocabulary()).unwrap();
        let a = &pairs[0].fine;
        let b = &pairs[1].fine;
        assert_ne!(a, b);
        let mean: f32 = a.normals.iter().zip(&b.normals).map(|(x, y)| (x[0] - y[0]).abs()).sum::<f32>() / a.normals.len() as f32;
        assert!(mean < 0.05, "{mean}");
    }
}
