//! Material classification from pooled backbone features: a four-layer
//! fully connected net ending in an element-wise sigmoid and a sum
//! normalisation, trained with cross-entropy, plus soft voting over the
//! patches of a sequence.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use detail_core::patch::{augment, random_origins, CropOptions};
use detail_core::{MaterialLabel, NormalMapFrame, Patch, PATCH_SIZE};

use crate::adam::{Adam, AdamConfig};
use crate::backbone::BackboneSource;
use crate::checkpoint::{self, NamedTensor};
use crate::gram::{downsample_mask, LossNetwork};
use crate::{Error, Result};

pub const DEFAULT_PATCHES_PER_VOTE: usize = 42;
pub const HISTOGRAM_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: [usize; 3],
    pub feature_layer: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Random crops per training frame.
    pub crops_per_frame: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: [256, 128, 64],
            feature_layer: "relu4_1".into(),
            epochs: 60,
            batch_size: 32,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            crops_per_frame: 16,
            seed: 0,
        }
    }
}

/// Probabilities for one patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialPrediction {
    pub frame_index: usize,
    pub patch_id: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub materials: usize,
    pub input_dim: usize,
    pub params: Vec<f64>,
    /// Feature standardisation fitted on the training set.
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

fn dims(input: usize, hidden: [usize; 3], m: usize) -> [(usize, usize); 4] {
    [(input, hidden[0]), (hidden[0], hidden[1]), (hidden[1], hidden[2]), (hidden[2], m)]
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct Activations {
    /// Input and every hidden activation after relu.
    layers: Vec<Vec<f64>>,
    sig: Vec<f64>,
    probs: Vec<f64>,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, input_dim: usize, materials: usize) -> Result<Self> {
        if materials < 2 {
            return Err(Error::Config("a classifier needs at least two materials".into()));
        }
        if input_dim == 0 || config.hidden.contains(&0) {
            return Err(Error::Config("classifier layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        for (i, o) in dims(input_dim, config.hidden, materials) {
            let n = Normal::new(0.0, (2.0 / i as f64).sqrt()).unwrap();
            params.extend((0..i * o).map(|_| n.sample(&mut rng)));
            params.extend(std::iter::repeat(0.0).take(o));
        }
        Ok(Self {
            config,
            materials,
            input_dim,
            params,
            feature_mean: vec![0.0; input_dim],
            feature_std: vec![1.0; input_dim],
        })
    }

    fn layer_ranges(&self) -> Vec<(usize, usize, usize)> {
        let mut off = 0;
        dims(self.input_dim, self.config.hidden, self.materials)
            .iter()
            .map(|&(i, o)| {
                let r = (off, i, o);
                off += i * o + o;
                r
            })
            .collect()
    }

    /// Weight and bias of the last layer.
    pub fn final_layer_mut(&mut self) -> &mut [f64] {
        let (off, _, _) = *self.layer_ranges().last().unwrap();
        &mut self.params[off..]
    }

    fn forward(&self, feature: &[f64]) -> Activations {
        let mut x: Vec<f64> = feature
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let ranges = self.layer_ranges();
        let mut layers = Vec::with_capacity(4);
        let mut logits = Vec::new();
        for (li, &(off, i, o)) in ranges.iter().enumerate() {
            let w = &self.params[off..off + i * o];
            let b = &self.params[off + i * o..off + i * o + o];
            let mut y: Vec<f64> = (0..o).map(|r| b[r] + w[r * i..(r + 1) * i].iter().zip(&x).map(|(a, c)| a * c).sum::<f64>()).collect();
            if li + 1 < ranges.len() {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
                layers.push(std::mem::replace(&mut x, y));
            } else {
                layers.push(std::mem::take(&mut x));
                logits = y;
            }
        }
        let sig: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let s: f64 = sig.iter().sum();
        let probs = sig.iter().map(|v| v / s).collect();
        Activations { layers, sig, probs }
    }

    /// Class probabilities of a backbone feature vector.
    pub fn predict(&self, feature: &[f64]) -> Vec<f64> {
        self.forward(feature).probs
    }

    /// Cross-entropy `−log p_y` and its parameter gradient, accumulated.
    fn backward(&self, feature: &[f64], label: usize, grad: &mut [f64]) -> f64 {
        let act = self.forward(feature);
        let s: f64 = act.sig.iter().sum();
        // ∂(−log p_y)/∂z_j = s_j(1 − s_j)/S − [j = y](1 − s_y)
        let mut delta: Vec<f64> = act
            .sig
            .iter()
            .enumerate()
            .map(|(j, &sj)| sj * (1.0 - sj) / s - if j == label { 1.0 - sj } else { 0.0 })
            .collect();
        let ranges = self.layer_ranges();
        for li in (0..ranges.len()).rev() {
            let (off, i, o) = ranges[li];
            let x = &act.layers[li];
            for r in 0..o {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                grad[off + i * o + r] += d;
                let gw = &mut grad[off + r * i..off + (r + 1) * i];
                gw.iter_mut().zip(x).for_each(|(g, v)| *g += d * v);
            }
            if li == 0 {
                break;
            }
            let w = &self.params[off..off + i * o];
            delta = (0..i)
                .map(|c| if x[c] > 0.0 { (0..o).map(|r| w[r * i + c] * delta[r]).sum() } else { 0.0 })
                .collect();
        }
        -act.probs[label].max(1e-300).ln()
    }
}

/// Mask-weighted spatial mean of one backbone layer.
pub fn patch_feature(loss_net: &LossNetwork<f32>, patch: &Patch, layer: &str) -> Result<Vec<f64>> {
    if patch.is_empty() {
        return Err(Error::EmptyContent("patch has no masked pixels".into()));
    }
    let f = loss_net.extract_features(patch, &[layer])?.remove(0);
    let stride = patch.size / f.h;
    let mut mask = downsample_mask(&patch.mask, patch.size, stride);
    if !mask.contains(&true) {
        mask.fill(true);
    }
    let n = mask.iter().filter(|&&m| m).count() as f64;
    Ok((0..f.c)
        .map(|c| f.channel(c).iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| *v as f64).sum::<f64>() / n)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Labelled sequences for the classifier: frames at the network's density.
pub struct LabelledFrames<'a> {
    pub label: MaterialLabel,
    pub frames: &'a [NormalMapFrame],
}

/// Features and labels of random (augmented) crops.
pub fn labelled_features(
    loss_net: &LossNetwork<f32>,
    data: &[LabelledFrames<'_>],
    crops_per_frame: usize,
    layer: &str,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let opts = CropOptions { size: PATCH_SIZE, min_masked_fraction: 0.5 };
    let mut jobs = Vec::new();
    for (si, s) in data.iter().enumerate() {
        for (fi, f) in s.frames.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((si as u64) << 32) ^ fi as u64);
            for (k, o) in random_origins(&f.mask, f.width, f.height, crops_per_frame, &opts, &mut rng)?.into_iter().enumerate() {
                jobs.push((f, o, k % 8, s.label.index()));
            }
        }
    }
    let feats = jobs
        .par_iter()
        .map(|&(f, o, op, _)| patch_feature(loss_net, &augment(&Patch::cut(f, o, PATCH_SIZE)?, op)?, layer))
        .collect::<Result<Vec<_>>>()?;
    Ok((feats, jobs.iter().map(|j| j.3).collect()))
}

/// Cross-entropy training with Adam on precomputed features. With
/// `permute_labels` the labels are shuffled first (a chance-level control).
pub fn train_classifier(
    mut net: Classifier,
    features: &[Vec<f64>],
    labels: &[usize],
    permute_labels: bool,
) -> Result<(Classifier, Vec<EpochStats>)> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Data(format!("classifier training needs at least two classes, found {classes:?}")));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= net.materials) {
        return Err(Error::Data(format!("label {bad} outside {} materials", net.materials)));
    }
    if features.iter().any(|f| f.len() != net.input_dim) {
        return Err(Error::Data("feature length does not match the classifier input".into()));
    }
    let n = features.len() as f64;
    for d in 0..net.input_dim {
        let mean = features.iter().map(|f| f[d]).sum::<f64>() / n;
        let var = features.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / n;
        net.feature_mean[d] = mean;
        net.feature_std[d] = var.sqrt().max(1e-6);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(net.config.seed ^ 0xC1A5);
    let mut labels = labels.to_vec();
    if permute_labels {
        labels.shuffle(&mut rng);
    }
    let mut adam = Adam::new(net.config.adam, net.params.len());
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut history = Vec::new();
    let bs = net.config.batch_size.max(1);
    for epoch in 0..net.config.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for chunk in order.chunks(bs) {
            let mut grad = vec![0.0; net.params.len()];
            for &i in chunk {
                loss += net.backward(&features[i], labels[i], &mut grad);
            }
            grad.iter_mut().for_each(|g| *g /= chunk.len() as f64);
            adam.step(&mut net.params, &grad);
        }
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("classifier loss diverged in epoch {epoch}")));
        }
        let train_accuracy = accuracy(&net, features, &labels);
        history.push(EpochStats { epoch, loss: loss / n, train_accuracy });
    }
    Ok((net, history))
}

pub fn argmax(v: &[f64]) -> usize {
    // first maximum wins ties
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(net: &Classifier, features: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = features.iter().zip(labels).filter(|(f, &l)| argmax(&net.predict(f)) == l).count();
    hits as f64 / features.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub label: usize,
    pub mean_probabilities: Vec<f64>,
    /// Materials sharing the top mean probability, when more than one.
    pub tie: Option<Vec<usize>>,
    /// Per material: counts of patch probabilities in ten equal bins of [0, 1].
    pub histogram: Vec<[usize; HISTOGRAM_BINS]>,
    pub per_patch: Vec<MaterialPrediction>,
}

/// Mean-probability vote over random patches. Lowest index wins ties.
pub fn vote_predictions(mut per_patch: Vec<MaterialPrediction>, materials: usize) -> Result<Vote> {
    if per_patch.is_empty() {
        return Err(Error::Data("no patch predictions to vote on".into()));
    }
    per_patch.sort_by_key(|p| (p.frame_index, p.patch_id));
    let mut mean = vec![0.0; materials];
    let mut histogram = vec![[0usize; HISTOGRAM_BINS]; materials];
    for p in &per_patch {
        for (j, &v) in p.probabilities.iter().enumerate() {
            mean[j] += v;
            histogram[j][((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)] += 1;
        }
    }
    mean.iter_mut().for_each(|v| *v /= per_patch.len() as f64);
    let label = argmax(&mean);
    let tied: Vec<usize> = (0..materials).filter(|&j| mean[j] == mean[label]).collect();
    Ok(Vote { label, mean_probabilities: mean, tie: (tied.len() > 1).then_some(tied), histogram, per_patch })
}

/// Classifies `patches_per_frame` random non-empty crops of every frame and
/// votes. Crop positions depend on the frame index, not list order.
pub fn vote_sequence(
    loss_net: &LossNetwork<f32>,
    net: &Classifier,
    frames: &[NormalMapFrame],
    patches_per_frame: usize,
    seed: u64,
) -> Result<Vote> {
    if frames.is_empty() {
        return Err(Error::Data("vote needs at least one frame".into()));
    }
    let opts = CropOptions { size: PATCH_SIZE, min_masked_fraction: 0.5 };
    let mut jobs = Vec::new();
    for f in frames {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (f.frame_index as u64).wrapping_mul(0x9E37_79B9));
        for (k, o) in random_origins(&f.mask, f.width, f.height, patches_per_frame, &opts, &mut rng)?.into_iter().enumerate() {
            jobs.push((f, k, o));
        }
    }
    let per_patch = jobs
        .par_iter()
        .map(|&(f, k, o)| {
            let feat = patch_feature(loss_net, &Patch::cut(f, o, PATCH_SIZE)?, &net.config.feature_layer)?;
            Ok(MaterialPrediction { frame_index: f.frame_index, patch_id: k, probabilities: net.predict(&feat) })
        })
        .collect::<Result<Vec<_>>>()?;
    vote_predictions(per_patch, net.materials)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub vocabulary: Vec<String>,
    pub config: ClassifierConfig,
    pub backbone: BackboneSource,
    pub input_dim: usize,
    pub history: Vec<EpochStats>,
}

pub fn save_classifier(path: &Path, net: &Classifier, meta: &ClassifierMeta) -> Result<()> {
    let f32v = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let mut tensors = Vec::new();
    for (k, (off, i, o)) in net.layer_ranges().into_iter().enumerate() {
        tensors.push(NamedTensor { name: format!("fc{}.weight", k + 1), shape: vec![o, i], data: f32v(&net.params[off..off + i * o]) });
        tensors.push(NamedTensor { name: format!("fc{}.bias", k + 1), shape: vec![o], data: f32v(&net.params[off + i * o..off + i * o + o]) });
    }
    tensors.push(NamedTensor { name: "feature.mean".into(), shape: vec![net.input_dim], data: f32v(&net.feature_mean) });
    tensors.push(NamedTensor { name: "feature.std".into(), shape: vec![net.input_dim], data: f32v(&net.feature_std) });
    checkpoint::save(path, meta, &tensors)
}

pub fn load_classifier(path: &Path) -> Result<(Classifier, ClassifierMeta)> {
    let mut loaded = checkpoint::load::<ClassifierMeta>(path)?;
    let meta = loaded.meta.clone();
    let mut net = Classifier::new(meta.config.clone(), meta.input_dim, meta.vocabulary.len())?;
    let f64v = |v: Vec<f32>| v.into_iter().map(|x| x as f64).collect::<Vec<f64>>();
    for (k, (off, i, o)) in net.layer_ranges().into_iter().enumerate() {
        let w = f64v(loaded.take(&format!("fc{}.weight", k + 1), &[o, i], path)?);
        let b = f64v(loaded.take(&format!("fc{}.bias", k + 1), &[o], path)?);
        net.params[off..off + i * o].copy_from_slice(&w);
        net.params[off + i * o..off + i * o + o].copy_from_slice(&b);
    }
    net.feature_mean = f64v(loaded.take("feature.mean", &[net.input_dim], path)?);
    net.feature_std = f64v(loaded.take("feature.std", &[net.input_dim], path)?);
    Ok((net, meta))
}
