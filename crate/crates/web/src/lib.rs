//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Each export renders into an RGBA buffer the page blits to a canvas.
//! The `*_image` functions hold the logic and are plain Rust so they can
//! be tested natively; the exported wrappers only convert errors.

use detail_core::bake::{bake_normal_map, BakeOptions, FrameSource};
use detail_core::mesh::grid_sheet;
use detail_core::patch::{augment, merge_patches, regular_grid_crops};
use detail_core::procedural::{generate_pair_sequence, ProceduralSpec};
use detail_core::{NormalMapFrame, Patch, MATERIALS, PATCH_SIZE};
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Image {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    /// Operation-specific scalar shown next to the canvas.
    value: f64,
}

#[wasm_bindgen]
impl Image {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

fn to_js(e: detail_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn rgba(width: usize, height: usize, normals: &[[f32; 3]], mask: &[bool]) -> Vec<u8> {
    let mut out = Vec::with_capacity(width * height * 4);
    for (n, &m) in normals.iter().zip(mask) {
        if m {
            out.extend(n.iter().map(|&c| ((c + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8));
        } else {
            out.extend([24, 24, 24]);
        }
        out.push(255);
    }
    out
}

fn frame_image(f: &NormalMapFrame, value: f64) -> Image {
    Image { width: f.width, height: f.height, rgba: rgba(f.width, f.height, &f.normals, &f.mask), value }
}

/// Material names the page offers.
#[wasm_bindgen]
pub fn materials() -> Vec<String> {
    MATERIALS.iter().map(|m| m.to_string()).collect()
}

/// Fine (`fine = true`) or coarse map of one procedural frame, coarse
/// upsampled to the fine size. `value` is the wrinkle wavelength in mm.
/// `size` must be a multiple of the 3x downsampling factor.
pub fn pair_image(material: &str, size: usize, seed: u64, frame: usize, fine: bool) -> detail_core::Result<Image> {
    let spec = ProceduralSpec { start_frame: frame, ..ProceduralSpec::preset(material, size, size, 1, seed)? };
    let vocab: Vec<String> = vec![material.to_string()];
    let pair = generate_pair_sequence(&spec, &vocab)?.remove(0);
    let wavelength = spec.wrinkles.wavelength * 1000.0;
    if fine {
        return Ok(frame_image(&pair.fine, wavelength));
    }
    let up = detail_core::patch::rescale_to(&pair.coarse, &pair.fine)?;
    Ok(frame_image(&up, wavelength))
}

#[wasm_bindgen]
pub fn procedural_pair(material: &str, size: usize, seed: u64, frame: usize, fine: bool) -> Result<Image, JsValue> {
    pair_image(material, size, seed, frame, fine).map_err(to_js)
}

/// Cuts the fine map into a stride grid, applies dihedral element `op_id`
/// to every patch and back, and merges. `value` is the largest per-channel
/// deviation from the original.
pub fn round_trip_image(material: &str, size: usize, seed: u64, stride: usize, op_id: usize) -> detail_core::Result<Image> {
    let spec = ProceduralSpec::preset(material, size, size, 1, seed)?;
    let fine = generate_pair_sequence(&spec, &[material.to_string()])?.remove(0).fine;
    let inv = detail_core::patch::inverse_op(op_id);
    let patches = regular_grid_crops(&fine, stride, PATCH_SIZE)?
        .iter()
        .map(|p| augment(p, op_id).and_then(|a| augment(&a, inv)))
        .collect::<detail_core::Result<Vec<Patch>>>()?;
    let merged = merge_patches(&patches, fine.width, fine.height, &fine.mask, fine.pixels_per_meter, 0)?;
    let err = merged
        .normals
        .iter()
        .zip(&fine.normals)
        .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs() as f64))
        .fold(0.0, f64::max);
    Ok(frame_image(&merged, err))
}

#[wasm_bindgen]
pub fn patch_round_trip(material: &str, size: usize, seed: u64, stride: usize, op_id: usize) -> Result<Image, JsValue> {
    round_trip_image(material, size, seed, stride, op_id).map_err(to_js)
}

/// Bakes a 0.25 m sheet carrying sinusoidal wrinkles into the tangent
/// frames of the flat sheet. `value` is the fraction of covered pixels.
pub fn bake_image(size: usize, amplitude_mm: f64, wavelength_mm: f64, angle_deg: f64) -> detail_core::Result<Image> {
    let extent = 0.25;
    let flat = grid_sheet(96, 96, [extent, extent], [0.0, 0.0], [1.0, 1.0]);
    let mut wrinkled = flat.clone();
    let (s, c) = angle_deg.to_radians().sin_cos();
    let k = 2.0 * std::f64::consts::PI / (wavelength_mm / 1000.0);
    for p in &mut wrinkled.positions {
        p[2] = amplitude_mm / 1000.0 * (k * (c * p[0] + s * p[1])).sin();
    }
    let opts = BakeOptions { width: size, height: size, pixels_per_meter: size as f64 / extent, ..Default::default() };
    let (map, _) = bake_normal_map(&wrinkled, &opts, FrameSource::Reference(&flat))?;
    let covered = map.mask.iter().filter(|&&m| m).count() as f64 / map.mask.len() as f64;
    Ok(frame_image(&map, covered))
}

#[wasm_bindgen]
pub fn bake_sheet(size: usize, amplitude_mm: f64, wavelength_mm: f64, angle_deg: f64) -> Result<Image, JsValue> {
    bake_image(size, amplitude_mm, wavelength_mm, angle_deg).map_err(to_js)
}
