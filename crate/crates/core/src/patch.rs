//! Fixed-size patches: random training crops, regular inference grids,
//! dihedral augmentation and overlap-averaging merge.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::normal_map::{normalize3, NormalMapFrame, BACKGROUND};
use crate::{Error, Result};

/// Side length of network patches.
pub const PATCH_SIZE: usize = 128;
/// Default inference stride (half-patch overlap).
pub const DEFAULT_STRIDE: usize = 64;
/// Default minimum masked fraction for training crops.
pub const DEFAULT_MIN_MASKED_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub normals: Vec<[f32; 3]>,
    pub mask: Vec<bool>,
    /// `(row, col)` of the top-left pixel in the source map.
    pub origin: (usize, usize),
    /// Pixels per meter of the source map.
    pub source_scale: f64,
}

impl Patch {
    /// Copies a `size` x `size` window of `map`.
    pub fn cut(map: &NormalMapFrame, origin: (usize, usize), size: usize) -> Result<Self> {
        if origin.0 + size > map.height || origin.1 + size > map.width {
            return Err(Error::Crop(format!(
                "patch at {:?} of size {size} exceeds {}x{} map",
                origin, map.width, map.height
            )));
        }
        let mut normals = Vec::with_capacity(size * size);
        let mut mask = Vec::with_capacity(size * size);
        for r in origin.0..origin.0 + size {
            let row = map.idx(r, origin.1);
            normals.extend_from_slice(&map.normals[row..row + size]);
            mask.extend_from_slice(&map.mask[row..row + size]);
        }
        Ok(Self { size, normals, mask, origin, source_scale: map.pixels_per_meter })
    }

    /// Copies a window of `map` but takes coverage from `mask_source`.
    pub fn cut_with_mask(map: &NormalMapFrame, mask_source: &NormalMapFrame, origin: (usize, usize), size: usize) -> Result<Self> {
        let mut p = Self::cut(map, origin, size)?;
        let m = Self::cut(mask_source, origin, size)?;
        p.mask = m.mask;
        p.sanitize();
        Ok(p)
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_count() == 0
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.size + col
    }

    /// Resets unmasked pixels to background and renormalises masked ones.
    /// Masked pixels that cannot be normalised fall back to `+z`.
    pub fn sanitize(&mut self) {
        for (n, &m) in self.normals.iter_mut().zip(&self.mask) {
            *n = if m { normalize3(*n).unwrap_or([0.0, 0.0, 1.0]) } else { BACKGROUND };
        }
    }

    /// Same geometry with new pixel values.
    pub fn with_normals(&self, normals: Vec<[f32; 3]>) -> Self {
        Self { normals, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CropOptions {
    pub size: usize,
    pub min_masked_fraction: f64,
}

impl Default for CropOptions {
    fn default() -> Self {
        Self { size: PATCH_SIZE, min_masked_fraction: DEFAULT_MIN_MASKED_FRACTION }
    }
}

/// Every window origin holding at least `need` masked pixels, in row-major
/// order, found with a summed-area table.
fn feasible_origins(mask: &[bool], width: usize, height: usize, size: usize, need: usize) -> Vec<(usize, usize)> {
    let w1 = width + 1;
    let mut sat = vec![0u32; w1 * (height + 1)];
    for r in 0..height {
        let mut row = 0u32;
        for c in 0..width {
            row += mask[r * width + c] as u32;
            sat[(r + 1) * w1 + c + 1] = sat[r * w1 + c + 1] + row;
        }
    }
    let mut out = Vec::new();
    for r in 0..=height - size {
        for c in 0..=width - size {
            let (r1, c1) = (r + size, c + size);
            let count = sat[r1 * w1 + c1] + sat[r * w1 + c] - sat[r * w1 + c1] - sat[r1 * w1 + c];
            if count as usize >= need {
                out.push((r, c));
            }
        }
    }
    out
}

/// Random window origins whose masked fraction reaches
/// `opts.min_masked_fraction`, drawn uniformly (with replacement) from all
/// feasible origins.
pub fn random_origins(
    mask: &[bool],
    width: usize,
    height: usize,
    count: usize,
    opts: &CropOptions,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    let size = opts.size;
    if width < size || height < size {
        return Err(Error::Crop(format!("{width}x{height} map is smaller than the {size}px patch")));
    }
    let need = ((opts.min_masked_fraction * (size * size) as f64).ceil() as usize).max(1);
    let feasible = feasible_origins(mask, width, height, size, need);
    if feasible.is_empty() {
        return Err(Error::Coverage {
            reason: format!("no {size}px window holds {need} masked pixels"),
            pixels: vec![],
        });
    }
    Ok((0..count).map(|_| feasible[rng.gen_range(0..feasible.len())]).collect())
}

/// Aligned random `(coarse, fine)` training pairs.
///
/// The coarse map is first resampled to the fine map's pixel density, so
/// one pixel covers the same physical length in both members. Both members
/// use the fine map's mask.
pub fn random_crop_pairs(
    coarse: &NormalMapFrame,
    fine: &NormalMapFrame,
    count: usize,
    rng_seed: u64,
    opts: &CropOptions,
) -> Result<Vec<(Patch, Patch)>> {
    let coarse = rescale_to(coarse, fine)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let origins = random_origins(&fine.mask, fine.width, fine.height, count, opts, &mut rng)?;
    origins
        .into_iter()
        .map(|o| Ok((Patch::cut_with_mask(&coarse, fine, o, opts.size)?, Patch::cut(fine, o, opts.size)?)))
        .collect()
}

/// Resamples `coarse` to the pixel density and size of `fine`.
pub fn rescale_to(coarse: &NormalMapFrame, fine: &NormalMapFrame) -> Result<NormalMapFrame> {
    let out = if (coarse.pixels_per_meter - fine.pixels_per_meter).abs() > 1e-9 * fine.pixels_per_meter
        || coarse.width != fine.width
        || coarse.height != fine.height
    {
        coarse.resize_to_scale(fine.pixels_per_meter)?
    } else {
        coarse.clone()
    };
    if out.width != fine.width || out.height != fine.height {
        return Err(Error::Shape(format!(
            "coarse map rescales to {}x{}, fine map is {}x{}",
            out.width, out.height, fine.width, fine.height
        )));
    }
    Ok(out)
}

/// Grid positions along one axis: multiples of `stride`, with the last
/// window clamped to touch the border.
pub fn grid_positions(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let last = extent - size;
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o < last).collect();
    v.push(last);
    v
}

/// Regular overlapping crops; windows without masked pixels are dropped.
pub fn regular_grid_crops(map: &NormalMapFrame, stride: usize, size: usize) -> Result<Vec<Patch>> {
    if stride == 0 || stride > size {
        return Err(Error::Parameter(format!("stride must be in 1..={size}, got {stride}")));
    }
    if map.width < size || map.height < size {
        return Err(Error::Crop(format!("{}x{} map is smaller than the {size}px patch", map.width, map.height)));
    }
    let rows = grid_positions(map.height, size, stride);
    let cols = grid_positions(map.width, size, stride);
    let mut out = Vec::new();
    for &r in &rows {
        for &c in &cols {
            let patch = Patch::cut(map, (r, c), size)?;
            if !patch.is_empty() {
                out.push(patch);
            }
        }
    }
    Ok(out)
}

/// Applies element `op_id` of the square's dihedral group.
///
/// `op_id = rotation + 4 * flip`: an optional mirror across the vertical
/// axis (`x -> -x`) followed by `rotation` quarter turns counter-clockwise
/// as seen on screen. The in-plane normal components `(x, y)` are rotated
/// with the image, so a constant `(1, 0, 0)` becomes `(0, 1, 0)` after one
/// quarter turn; `z` is unchanged.
pub fn augment(patch: &Patch, op_id: usize) -> Result<Patch> {
    if op_id > 7 {
        return Err(Error::Parameter(format!("augmentation id must be in 0..8, got {op_id}")));
    }
    let (rot, flip) = (op_id % 4, op_id >= 4);
    let n = patch.size;
    let mut normals = patch.normals.clone();
    let mut mask = patch.mask.clone();
    if flip {
        for r in 0..n {
            for c in 0..n {
                let v = patch.normals[r * n + (n - 1 - c)];
                normals[r * n + c] = [-v[0], v[1], v[2]];
                mask[r * n + c] = patch.mask[r * n + (n - 1 - c)];
            }
        }
    }
    for _ in 0..rot {
        let (src_n, src_m) = (normals.clone(), mask.clone());
        for r in 0..n {
            for c in 0..n {
                let s = c * n + (n - 1 - r);
                let v = src_n[s];
                normals[r * n + c] = [-v[1], v[0], v[2]];
                mask[r * n + c] = src_m[s];
            }
        }
    }
    for (v, &m) in normals.iter_mut().zip(&mask) {
        if !m {
            *v = BACKGROUND;
        }
    }
    Ok(Patch { normals, mask, ..patch.clone() })
}

/// Inverse element of `op_id` in the dihedral group.
pub fn inverse_op(op_id: usize) -> usize {
    if op_id >= 4 { op_id } else { (4 - op_id) % 4 }
}

/// Averages overlapping patches into a canvas.
///
/// Each canvas pixel takes the arithmetic mean of every covering patch
/// (a mean of RGB encodings is the encoding of the mean normal), then is
/// renormalised. Pixels outside `mask` are background; masked pixels that
/// no patch covers are a coverage error.
pub fn merge_patches(
    patches: &[Patch],
    width: usize,
    height: usize,
    mask: &[bool],
    pixels_per_meter: f64,
    frame_index: usize,
) -> Result<NormalMapFrame> {
    if mask.len() != width * height {
        return Err(Error::Shape(format!("mask has {} pixels, canvas {width}x{height}", mask.len())));
    }
    let mut sum = vec![[0.0f64; 3]; width * height];
    let mut count = vec![0u32; width * height];
    for p in patches {
        if p.origin.0 + p.size > height || p.origin.1 + p.size > width {
            return Err(Error::Crop(format!("patch at {:?} exceeds the {width}x{height} canvas", p.origin)));
        }
        for r in 0..p.size {
            for c in 0..p.size {
                let i = (p.origin.0 + r) * width + p.origin.1 + c;
                let v = p.normals[r * p.size + c];
                for k in 0..3 {
                    sum[i][k] += v[k] as f64;
                }
                count[i] += 1;
            }
        }
    }
    let mut out = NormalMapFrame::background(width, height, pixels_per_meter, frame_index);
    let mut uncovered = Vec::new();
    for i in 0..width * height {
        if !mask[i] {
            continue;
        }
        if count[i] == 0 {
            uncovered.push((i / width, i % width));
            continue;
        }
        let inv = 1.0 / count[i] as f64;
        let mean = [(sum[i][0] * inv) as f32, (sum[i][1] * inv) as f32, (sum[i][2] * inv) as f32];
        out.normals[i] = normalize3(mean).unwrap_or([0.0, 0.0, 1.0]);
        out.mask[i] = true;
    }
    if !uncovered.is_empty() {
        return Err(Error::Coverage {
            reason: format!("{} masked pixels not covered by any patch (first {:?})", uncovered.len(), uncovered[0]),
            pixels: uncovered,
        });
    }
    Ok(out)
}
