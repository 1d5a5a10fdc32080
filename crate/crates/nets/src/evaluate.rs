//! Frame-level inference and the two evaluation measures: the per-patch
//! improvement score and the Chamfer/DR distance between spectrally
//! embedded Gram distributions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use detail_core::metrics::{distribution_metrics, improvement_ratio, mean_std, DistributionMetrics, DEFAULT_KNN};
use detail_core::patch::{merge_patches, random_origins, regular_grid_crops, CropOptions};
use detail_core::{MaterialLabel, NormalMapFrame, Patch, PATCH_SIZE};

use crate::enhancer::Enhancer;
use crate::gram::{LossNetwork, StylePool};
use crate::{Error, Result};

/// Default random patches per frame for the distribution metric.
pub const DEFAULT_PATCHES_PER_FRAME: usize = 16;

/// Enhances a whole map (already at the network's pixel density) by regular
/// overlapping crops and overlap averaging.
pub fn enhance_frame(net: &Enhancer<f32>, map: &NormalMapFrame, material: &MaterialLabel, stride: usize) -> Result<NormalMapFrame> {
    let size = net.config.patch_size;
    let patches = regular_grid_crops(map, stride, size)?;
    let out: Vec<Patch> = patches.par_iter().map(|p| net.enhance_patch(p, material)).collect::<Result<_>>()?;
    Ok(merge_patches(&out, map.width, map.height, &map.mask, map.pixels_per_meter, map.frame_index)?)
}

/// `100 |(L(inp) − L(out)) / (L(inp) − L(gt))|` with style losses against
/// the ground-truth material's pool; `None` for a degenerate denominator.
pub fn improvement_score(loss_net: &LossNetwork<f32>, pool: &StylePool, inp: &Patch, out: &Patch, gt: &Patch) -> Result<Option<f64>> {
    let l_in = pool.loss(&loss_net.signature(inp)?)?;
    let l_out = pool.loss(&loss_net.signature(out)?)?;
    let l_gt = pool.loss(&loss_net.signature(gt)?)?;
    Ok(improvement_ratio(l_in, l_out, l_gt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameImprovement {
    pub frame_index: usize,
    /// Mean over the frame's non-degenerate patches.
    pub score: Option<f64>,
    pub patch_scores: Vec<Option<f64>>,
}

/// Improvement scores of `count` aligned random windows of one frame.
/// `coarse` must already be at the fine pixel density.
pub fn frame_improvement(
    loss_net: &LossNetwork<f32>,
    pool: &StylePool,
    coarse: &NormalMapFrame,
    enhanced: &NormalMapFrame,
    fine: &NormalMapFrame,
    count: usize,
    seed: u64,
) -> Result<FrameImprovement> {
    for m in [coarse, enhanced] {
        if (m.width, m.height) != (fine.width, fine.height) {
            return Err(Error::Data(format!(
                "frame {} is {}x{}, reference is {}x{}",
                m.frame_index, m.width, m.height, fine.width, fine.height
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = CropOptions { size: PATCH_SIZE, min_masked_fraction: 0.5 };
    let origins = random_origins(&fine.mask, fine.width, fine.height, count, &opts, &mut rng)?;
    let patch_scores: Vec<Option<f64>> = origins
        .par_iter()
        .map(|&o| {
            let inp = Patch::cut_with_mask(coarse, fine, o, PATCH_SIZE)?;
            let out = Patch::cut_with_mask(enhanced, fine, o, PATCH_SIZE)?;
            let gt = Patch::cut(fine, o, PATCH_SIZE)?;
            improvement_score(loss_net, pool, &inp, &out, &gt)
        })
        .collect::<Result<_>>()?;
    let valid: Vec<f64> = patch_scores.iter().flatten().copied().collect();
    let score = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
    Ok(FrameImprovement { frame_index: fine.frame_index, score, patch_scores })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementSummary {
    pub mean: f64,
    pub std: f64,
    pub frames: Vec<FrameImprovement>,
}

pub fn summarize(frames: Vec<FrameImprovement>) -> Result<ImprovementSummary> {
    let scores: Vec<f64> = frames.iter().filter_map(|f| f.score).collect();
    if scores.is_empty() {
        return Err(Error::Numerical("every frame had a degenerate improvement denominator".into()));
    }
    let (mean, std) = mean_std(&scores);
    Ok(ImprovementSummary { mean, std, frames })
}

/// Flattened Gram vectors at `layer` for `per_frame` random crops per frame.
pub fn gram_samples(
    loss_net: &LossNetwork<f32>,
    frames: &[NormalMapFrame],
    per_frame: usize,
    layer: &str,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let opts = CropOptions { size: PATCH_SIZE, min_masked_fraction: 0.5 };
    let mut patches = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        for o in random_origins(&f.mask, f.width, f.height, per_frame, &opts, &mut rng)? {
            patches.push(Patch::cut(f, o, PATCH_SIZE)?);
        }
    }
    patches
        .par_iter()
        .map(|p| {
            let sig = loss_net.signature(p)?;
            sig.layer(layer)
                .map(|l| l.gram.clone())
                .ok_or_else(|| Error::Config(format!("layer {layer:?} is not a style layer")))
        })
        .collect()
}

/// `(C1, C2, DR)` of coarse, enhanced and reference sources, all at the
/// same pixel density. The reference need not be frame-aligned.
pub fn distribution_distance(
    loss_net: &LossNetwork<f32>,
    coarse: &[NormalMapFrame],
    enhanced: &[NormalMapFrame],
    reference: &[NormalMapFrame],
    per_frame: usize,
    seed: u64,
) -> Result<DistributionMetrics> {
    if coarse.is_empty() || enhanced.is_empty() || reference.is_empty() {
        return Err(Error::Data("distribution distance needs three non-empty sources".into()));
    }
    let layer = loss_net.style_layers().last().unwrap().clone();
    // Coarse and enhanced share crop positions; the reference draws its own.
    let a = gram_samples(loss_net, coarse, per_frame, &layer, seed)?;
    let b = gram_samples(loss_net, enhanced, per_frame, &layer, seed)?;
    let c = gram_samples(loss_net, reference, per_frame, &layer, seed ^ 0x5eed)?;
    Ok(distribution_metrics(&a, &b, &c, DEFAULT_KNN)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub material: Option<String>,
    pub patches_per_frame: usize,
    pub seed: u64,
    pub improvement: Option<ImprovementSummary>,
    pub distribution: DistributionMetrics,
}
