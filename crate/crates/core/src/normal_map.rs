//! Masked tangent-space normal maps.
//!
//! Pixels are stored as decoded normal vectors `n` (not RGB), so that sign
//! flips and axis swaps are exact. The RGB encoding `c = (n + 1) / 2` is
//! produced on demand for the networks and for PNG output. Unmasked pixels
//! hold the zero vector, which encodes to the neutral grey (0.5, 0.5, 0.5).
//!
//! Image rows run top to bottom while the UV `v` axis runs bottom to top:
//! pixel `(row, col)` has its centre at `u = (col + 0.5) / W`,
//! `v = 1 - (row + 0.5) / H`. The tangent-space `x` axis follows `+u` and
//! `y` follows `+v`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Background normal (encodes to RGB 0.5 grey).
pub const BACKGROUND: [f32; 3] = [0.0, 0.0, 0.0];
/// Tolerance on `|‖n‖ - 1|` for masked pixels.
pub const UNIT_TOLERANCE: f32 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct NormalMapFrame {
    pub width: usize,
    pub height: usize,
    /// Row-major decoded normals.
    pub normals: Vec<[f32; 3]>,
    /// Row-major chart coverage.
    pub mask: Vec<bool>,
    pub pixels_per_meter: f64,
    pub frame_index: usize,
}

#[inline]
pub fn encode(n: f32) -> f32 {
    (n + 1.0) * 0.5
}

#[inline]
pub fn decode(c: f32) -> f32 {
    2.0 * c - 1.0
}

/// Unit vector along `v`, or `None` if `v` is too short to normalise.
#[inline]
pub fn normalize3(v: [f32; 3]) -> Option<[f32; 3]> {
    let len = (v[0] as f64 * v[0] as f64 + v[1] as f64 * v[1] as f64 + v[2] as f64 * v[2] as f64).sqrt();
    if len > 1e-12 {
        Some([(v[0] as f64 / len) as f32, (v[1] as f64 / len) as f32, (v[2] as f64 / len) as f32])
    } else {
        None
    }
}

/// UV coordinate of a pixel centre.
#[inline]
pub fn pixel_to_uv(row: f64, col: f64, width: usize, height: usize) -> [f64; 2] {
    [(col + 0.5) / width as f64, 1.0 - (row + 0.5) / height as f64]
}

/// Fractional pixel coordinates `(row, col)` of a UV point.
#[inline]
pub fn uv_to_pixel(uv: [f64; 2], width: usize, height: usize) -> (f64, f64) {
    ((1.0 - uv[1]) * height as f64 - 0.5, uv[0] * width as f64 - 0.5)
}

impl NormalMapFrame {
    /// All-background frame.
    pub fn background(width: usize, height: usize, pixels_per_meter: f64, frame_index: usize) -> Self {
        Self {
            width,
            height,
            normals: vec![BACKGROUND; width * height],
            mask: vec![false; width * height],
            pixels_per_meter,
            frame_index,
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn normal(&self, row: usize, col: usize) -> [f32; 3] {
        self.normals[self.idx(row, col)]
    }

    #[inline]
    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.mask[self.idx(row, col)]
    }

    /// RGB encoding of one pixel.
    pub fn color(&self, row: usize, col: usize) -> [f32; 3] {
        let n = self.normal(row, col);
        [encode(n[0]), encode(n[1]), encode(n[2])]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Sets a masked pixel from an arbitrary vector (normalised here).
    pub fn set_normal(&mut self, row: usize, col: usize, n: [f32; 3]) {
        let i = self.idx(row, col);
        match normalize3(n) {
            Some(u) => {
                self.normals[i] = u;
                self.mask[i] = true;
            }
            None => {
                self.normals[i] = BACKGROUND;
                self.mask[i] = false;
            }
        }
    }

    /// Checks the unit-normal and background invariants.
    pub fn validate(&self) -> Result<()> {
        if self.normals.len() != self.width * self.height || self.mask.len() != self.normals.len() {
            return Err(Error::Shape(format!(
                "buffer sizes {} / {} do not match {}x{}",
                self.normals.len(),
                self.mask.len(),
                self.width,
                self.height
            )));
        }
        if !(self.pixels_per_meter > 0.0) {
            return Err(Error::Parameter(format!("pixels_per_meter must be > 0, got {}", self.pixels_per_meter)));
        }
        for (i, (n, &m)) in self.normals.iter().zip(&self.mask).enumerate() {
            if m {
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if (len - 1.0).abs() > UNIT_TOLERANCE || !len.is_finite() {
                    return Err(Error::Numerical(format!(
                        "pixel ({}, {}) has normal length {len}",
                        i / self.width,
                        i % self.width
                    )));
                }
            } else if *n != BACKGROUND {
                return Err(Error::Numerical(format!(
                    "unmasked pixel ({}, {}) is not background",
                    i / self.width,
                    i % self.width
                )));
            }
        }
        Ok(())
    }

    /// Box-filter downsampling over masked pixels with renormalisation.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::Parameter(format!("downsample factor must be >= 2, got {factor}")));
        }
        if self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Shape(format!(
                "factor {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Self::background(w, h, self.pixels_per_meter / factor as f64, self.frame_index);
        for r in 0..h {
            for c in 0..w {
                let mut sum = [0.0f64; 3];
                let mut first = None;
                for dr in 0..factor {
                    for dc in 0..factor {
                        let (sr, sc) = (r * factor + dr, c * factor + dc);
                        if self.is_masked(sr, sc) {
                            let n = self.normal(sr, sc);
                            first.get_or_insert(n);
                            for k in 0..3 {
                                sum[k] += n[k] as f64;
                            }
                        }
                    }
                }
                if let Some(first) = first {
                    let avg = [sum[0] as f32, sum[1] as f32, sum[2] as f32];
                    let i = out.idx(r, c);
                    out.normals[i] = normalize3(avg).unwrap_or(first);
                    out.mask[i] = true;
                }
            }
        }
        Ok(out)
    }

    /// Bilinear resampling to an explicit size. The mask follows the nearest
    /// source pixel; values blend masked neighbours only.
    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Shape(format!("cannot resize {}x{} to {width}x{height}", self.width, self.height)));
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let ppm = self.pixels_per_meter * width as f64 / self.width as f64;
        let mut out = Self::background(width, height, ppm, self.frame_index);
        for r in 0..height {
            let fr = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for c in 0..width {
                let fc = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let near = (fr.round() as usize, fc.round() as usize);
                if !self.is_masked(near.0, near.1) {
                    continue;
                }
                if let Some(n) = self.blend_masked(fr, fc) {
                    let i = out.idx(r, c);
                    out.normals[i] = n;
                    out.mask[i] = true;
                }
            }
        }
        Ok(out)
    }

    /// Resamples so that the physical pixel size matches `pixels_per_meter`.
    pub fn resize_to_scale(&self, pixels_per_meter: f64) -> Result<Self> {
        let ratio = pixels_per_meter / self.pixels_per_meter;
        let w = (self.width as f64 * ratio).round() as usize;
        let h = (self.height as f64 * ratio).round() as usize;
        let mut out = self.resize(w, h)?;
        out.pixels_per_meter = pixels_per_meter;
        Ok(out)
    }

    /// Bilinear blend of the masked pixels among the four neighbours of a
    /// fractional position, renormalised. `None` if no neighbour is masked.
    pub fn blend_masked(&self, row: f64, col: f64) -> Option<[f32; 3]> {
        let row = row.clamp(0.0, (self.height - 1) as f64);
        let col = col.clamp(0.0, (self.width - 1) as f64);
        let r0 = row.floor() as usize;
        let c0 = col.floor() as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        let c1 = (c0 + 1).min(self.width - 1);
        let fr = row - r0 as f64;
        let fc = col - c0 as f64;
        let taps = [
            (r0, c0, (1.0 - fr) * (1.0 - fc)),
            (r0, c1, (1.0 - fr) * fc),
            (r1, c0, fr * (1.0 - fc)),
            (r1, c1, fr * fc),
        ];
        let mut sum = [0.0f64; 3];
        let mut weight = 0.0;
        let mut any = None;
        for (r, c, w) in taps {
            if self.is_masked(r, c) {
                let n = self.normal(r, c);
                any.get_or_insert(n);
                for k in 0..3 {
                    sum[k] += w * n[k] as f64;
                }
                weight += w;
            }
        }
        let first = any?;
        if weight <= 0.0 {
            return Some(first);
        }
        normalize3([sum[0] as f32, sum[1] as f32, sum[2] as f32]).or(Some(first))
    }

    /// Bilinear lookup at a UV coordinate.
    pub fn sample_uv(&self, uv: [f64; 2]) -> Option<[f32; 3]> {
        let (row, col) = uv_to_pixel(uv, self.width, self.height);
        if row < -0.5 || col < -0.5 || row > self.height as f64 - 0.5 || col > self.width as f64 - 0.5 {
            return None;
        }
        self.blend_masked(row, col)
    }

    /// Resets unmasked pixels to background and renormalises masked ones.
    pub fn sanitize(&mut self) {
        for (n, &m) in self.normals.iter_mut().zip(&self.mask) {
            if m {
                *n = normalize3(*n).unwrap_or([0.0, 0.0, 1.0]);
            } else {
                *n = BACKGROUND;
            }
        }
    }
}

/// Per-sequence sidecar metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub pixels_per_meter: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material: Option<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

pub const META_FILE: &str = "meta.json";
pub const MASK_FILE: &str = "mask.png";

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

/// Writes the RGB encoding as a 16-bit PNG.
pub fn save_png16(frame: &NormalMapFrame, path: &Path) -> Result<()> {
    let mut img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::new(frame.width as u32, frame.height as u32);
    for r in 0..frame.height {
        for c in 0..frame.width {
            let col = frame.color(r, c);
            let q = col.map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16);
            img.put_pixel(c as u32, r as u32, Rgb(q));
        }
    }
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn save_mask_png(width: usize, height: usize, mask: &[bool], path: &Path) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(width as u32, height as u32, |c, r| Luma([if mask[r as usize * width + c as usize] { 255 } else { 0 }]));
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn load_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.pixels().map(|p| p.0[0] >= 128).collect()))
}

/// Reads a 16-bit normal-map PNG and applies `mask`.
pub fn load_png16(path: &Path, mask: &[bool], pixels_per_meter: f64, frame_index: usize) -> Result<NormalMapFrame> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if mask.len() != w * h {
        return Err(Error::Shape(format!("{}: {w}x{h} does not match mask size {}", path.display(), mask.len())));
    }
    let mut frame = NormalMapFrame::background(w, h, pixels_per_meter, frame_index);
    for (i, p) in img.pixels().enumerate() {
        if mask[i] {
            let n = p.0.map(|q| decode(q as f32 / 65535.0));
            frame.normals[i] = n;
            frame.mask[i] = true;
        }
    }
    frame.sanitize();
    Ok(frame)
}

/// Writes a sequence directory: numbered frame PNGs, one mask and metadata.
pub fn write_sequence(dir: &Path, frames: &[NormalMapFrame], material: Option<&str>, extra: serde_json::Value) -> Result<SequenceMeta> {
    let first = frames.first().ok_or_else(|| Error::Sequence("no frames to write".into()))?;
    for f in frames {
        if f.width != first.width || f.height != first.height || f.mask != first.mask {
            return Err(Error::Consistency {
                path: dir.to_path_buf(),
                reason: format!("frame {} does not share the sequence mask", f.frame_index),
            });
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_mask_png(first.width, first.height, &first.mask, &dir.join(MASK_FILE))?;
    for (i, f) in frames.iter().enumerate() {
        save_png16(f, &dir.join(frame_file_name(i)))?;
    }
    let meta = SequenceMeta {
        width: first.width,
        height: first.height,
        frame_count: frames.len(),
        pixels_per_meter: first.pixels_per_meter,
        material: material.map(str::to_string),
        extra,
    };
    write_json(&dir.join(META_FILE), &meta)?;
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<SequenceMeta> {
    read_json(&dir.join(META_FILE))
}

/// Reads a sequence directory written by [`write_sequence`].
pub fn read_sequence(dir: &Path) -> Result<(SequenceMeta, Vec<NormalMapFrame>)> {
    let meta = read_meta(dir)?;
    let (w, h, mask) = load_mask_png(&dir.join(MASK_FILE))?;
    if (w, h) != (meta.width, meta.height) {
        return Err(Error::Consistency { path: dir.to_path_buf(), reason: "mask size differs from metadata".into() });
    }
    let mut frames = Vec::with_capacity(meta.frame_count);
    for i in 0..meta.frame_count {
        let path = dir.join(frame_file_name(i));
        if !path.exists() {
            return Err(Error::Sequence(format!("missing frame file {}", path.display())));
        }
        frames.push(load_png16(&path, &mask, meta.pixels_per_meter, i)?);
    }
    Ok((meta, frames))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: PathBuf::from(path), source })
}
