//! Enhancer training: epochs of random aligned crops, a per-epoch exemplar
//! Gram pool per material, batched Adam steps and checkpoints.
//!
//! Everything an epoch needs is derived from `(seed, epoch)`, so training
//! resumed from a checkpoint retraces the uninterrupted run exactly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use detail_core::patch::{augment, random_origins, rescale_to, CropOptions};
use detail_core::{MaterialLabel, NormalMapFrame, Patch, PATCH_SIZE};

use crate::adam::{Adam, AdamConfig};
use crate::backbone::BackboneSource;
use crate::checkpoint::{self, NamedTensor};
use crate::enhancer::{Enhancer, EnhancerConfig};
use crate::gram::{patch_tensor, GramSignature, LayerConfig, LossNetwork, LossParts, LossWeights, StylePool};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    /// Random crops per training frame and epoch.
    pub crops_per_frame: usize,
    /// Fine exemplar patches per material, redrawn every epoch.
    pub pool_size: usize,
    pub checkpoint_every: usize,
    pub augment: bool,
    pub min_masked_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            crops_per_frame: 16,
            pool_size: 64,
            checkpoint_every: 500,
            augment: true,
            min_masked_fraction: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crops_per_frame == 0 || self.pool_size == 0 {
            return Err(Error::Config("batch_size, crops_per_frame and pool_size must be positive".into()));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite() && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        let w = &self.weights;
        if !(w.content >= 0.0 && w.style >= 0.0 && w.content.is_finite() && w.style.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {w:?}")));
        }
        if !(0.0..=1.0).contains(&self.min_masked_fraction) {
            return Err(Error::Config("min_masked_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One material-labelled sequence of `(coarse, fine)` frames.
#[derive(Clone, Debug)]
pub struct TrainSequence {
    pub label: MaterialLabel,
    /// Coarse frames resampled to the fine pixel density.
    pub coarse: Vec<NormalMapFrame>,
    pub fine: Vec<NormalMapFrame>,
}

impl TrainSequence {
    pub fn new(label: MaterialLabel, pairs: &[(NormalMapFrame, NormalMapFrame)]) -> Result<Self> {
        let coarse = pairs.iter().map(|(c, f)| rescale_to(c, f)).collect::<detail_core::Result<Vec<_>>>()?;
        Ok(Self { label, coarse, fine: pairs.iter().map(|p| p.1.clone()).collect() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub total: f64,
    pub content: f64,
    pub style: f64,
}

#[derive(Clone, Copy, Debug)]
struct Item {
    seq: usize,
    frame: usize,
    origin: (usize, usize),
    op: usize,
}

struct Epoch {
    index: usize,
    items: Vec<Item>,
    pools: BTreeMap<usize, StylePool>,
}

/// Everything needed to restore a run, stored as checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhancerMeta {
    pub vocabulary: Vec<String>,
    pub enhancer: EnhancerConfig,
    pub layers: LayerConfig,
    pub backbone: BackboneSource,
    pub train: TrainConfig,
    pub step: usize,
    pub adam_t: u64,
    pub history: Vec<HistoryRow>,
}

fn derive_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Exemplar signatures of `count` random fine crops of one material.
pub fn sample_exemplars(
    loss_net: &LossNetwork<f32>,
    frames: &[&NormalMapFrame],
    count: usize,
    min_masked_fraction: f64,
    seed: u64,
) -> Result<Vec<GramSignature>> {
    if frames.is_empty() {
        return Err(Error::Data("no fine frames to draw exemplars from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = CropOptions { size: PATCH_SIZE, min_masked_fraction };
    let picks: Vec<Patch> = (0..count)
        .map(|_| {
            let f = frames[rng.gen_range(0..frames.len())];
            let o = random_origins(&f.mask, f.width, f.height, 1, &opts, &mut rng)?[0];
            Ok(Patch::cut(f, o, PATCH_SIZE)?)
        })
        .collect::<Result<_>>()?;
    picks.par_iter().map(|p| loss_net.signature(p)).collect()
}

pub struct Trainer<'a> {
    pub net: Enhancer<f32>,
    pub adam: Adam,
    pub config: TrainConfig,
    pub history: Vec<HistoryRow>,
    pub step: usize,
    loss_net: &'a LossNetwork<f32>,
    data: &'a [TrainSequence],
    epoch: Option<Epoch>,
}

impl<'a> Trainer<'a> {
    pub fn new(net: Enhancer<f32>, loss_net: &'a LossNetwork<f32>, data: &'a [TrainSequence], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() || data.iter().all(|s| s.fine.is_empty()) {
            return Err(Error::Data("empty training set".into()));
        }
        if net.config.patch_size != PATCH_SIZE {
            return Err(Error::Config(format!("training uses {PATCH_SIZE}px patches")));
        }
        for s in data {
            if s.label.count() != net.config.materials {
                return Err(Error::Data(format!(
                    "sequence labelled over {} materials, network has {}",
                    s.label.count(),
                    net.config.materials
                )));
            }
        }
        let adam = Adam::new(config.adam, net.params.len());
        Ok(Self { net, adam, config, history: Vec::new(), step: 0, loss_net, data, epoch: None })
    }

    /// Restores parameters, optimiser state, step and history.
    pub fn restore(&mut self, params: Vec<f32>, m: Vec<f32>, v: Vec<f32>, meta: &EnhancerMeta) -> Result<()> {
        if params.len() != self.net.params.len() || m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Config("checkpoint does not match the network layout".into()));
        }
        self.net.params = params;
        self.adam.m = m;
        self.adam.v = v;
        self.adam.t = meta.adam_t;
        self.step = meta.step;
        self.history = meta.history.clone();
        self.epoch = None;
        Ok(())
    }

    fn frame_count(&self) -> usize {
        self.data.iter().map(|s| s.fine.len()).sum()
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.frame_count() * self.config.crops_per_frame / self.config.batch_size).max(1)
    }

    fn build_epoch(&self, index: usize) -> Result<Epoch> {
        let cfg = &self.config;
        let opts = CropOptions { size: PATCH_SIZE, min_masked_fraction: cfg.min_masked_fraction };
        let mut items = Vec::new();
        for (si, s) in self.data.iter().enumerate() {
            for (fi, f) in s.fine.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, index as u64, si as u64, fi as u64]));
                for origin in random_origins(&f.mask, f.width, f.height, cfg.crops_per_frame, &opts, &mut rng)? {
                    let op = if cfg.augment { rng.gen_range(0..8) } else { 0 };
                    items.push(Item { seq: si, frame: fi, origin, op });
                }
            }
        }
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, index as u64, u64::MAX])));
        let mut pools = BTreeMap::new();
        let materials: std::collections::BTreeSet<usize> = self.data.iter().map(|s| s.label.index()).collect();
        for m in materials {
            let frames: Vec<&NormalMapFrame> =
                self.data.iter().filter(|s| s.label.index() == m).flat_map(|s| s.fine.iter()).collect();
            let seed = derive_seed(&[cfg.seed, index as u64, u64::MAX - 1, m as u64]);
            let sigs = sample_exemplars(self.loss_net, &frames, cfg.pool_size, cfg.min_masked_fraction, seed)?;
            pools.insert(m, StylePool::new(&sigs)?);
        }
        Ok(Epoch { index, items, pools })
    }

    fn item_patch(&self, item: &Item) -> Result<Patch> {
        let s = &self.data[item.seq];
        let p = Patch::cut_with_mask(&s.coarse[item.frame], &s.fine[item.frame], item.origin, PATCH_SIZE)?;
        Ok(augment(&p, item.op)?)
    }

    fn sample(&self, item: &Item, pools: &BTreeMap<usize, StylePool>, want_grad: bool) -> Result<(LossParts, Option<Vec<f32>>)> {
        let patch = self.item_patch(item)?;
        let material = self.data[item.seq].label.index();
        let x = patch_tensor::<f32>(&patch);
        let inp_content = self.loss_net.content_features(&x);
        let tape = self.net.forward(&x, &patch.mask, material);
        let (parts, dout) =
            self.loss_net.loss(tape.output(), &patch.mask, &inp_content, &pools[&material], &self.config.weights, want_grad)?;
        let grad = dout.map(|d| {
            let mut g = vec![0.0f32; self.net.params.len()];
            self.net.backward(&tape, &d, &mut g);
            g
        });
        Ok((parts, grad))
    }

    /// One optimisation step; returns the batch-mean loss.
    pub fn train_step(&mut self) -> Result<HistoryRow> {
        let spe = self.steps_per_epoch();
        let epoch_index = self.step / spe;
        if self.epoch.as_ref().map(|e| e.index) != Some(epoch_index) {
            self.epoch = Some(self.build_epoch(epoch_index)?);
        }
        let epoch = self.epoch.as_ref().unwrap();
        let b = self.config.batch_size;
        let pos = (self.step % spe) * b;
        let n = epoch.items.len();
        let batch: Vec<Item> = (0..b).map(|i| epoch.items[(pos + i) % n]).collect();
        let results: Vec<(LossParts, Option<Vec<f32>>)> =
            batch.par_iter().map(|it| self.sample(it, &epoch.pools, true)).collect::<Result<_>>()?;
        let inv = 1.0 / b as f64;
        let mut row = HistoryRow { step: self.step, total: 0.0, content: 0.0, style: 0.0 };
        let mut grad = vec![0.0f32; self.net.params.len()];
        for (parts, g) in &results {
            row.total += parts.total * inv;
            row.content += parts.content * inv;
            row.style += parts.style * inv;
            grad.iter_mut().zip(g.as_ref().unwrap()).for_each(|(a, v)| *a += *v * inv as f32);
        }
        if !row.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at step {}: total {}, content {}, style {}",
                self.step, row.total, row.content, row.style
            )));
        }
        self.adam.step(&mut self.net.params, &grad);
        self.history.push(row);
        self.step += 1;
        Ok(row)
    }

    /// Trains until `config.steps`, calling `on_checkpoint` every
    /// `checkpoint_every` steps.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&Trainer<'a>) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let row = self.train_step()?;
            if row.step % 50 == 0 {
                log::info!("step {} loss {:.5} (content {:.5}, style {:.5})", row.step, row.total, row.content, row.style);
            }
            if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    pub fn meta(&self, vocabulary: &[String], layers: &LayerConfig, backbone: &BackboneSource) -> EnhancerMeta {
        EnhancerMeta {
            vocabulary: vocabulary.to_vec(),
            enhancer: self.net.config.clone(),
            layers: layers.clone(),
            backbone: backbone.clone(),
            train: self.config.clone(),
            step: self.step,
            adam_t: self.adam.t,
            history: self.history.clone(),
        }
    }

    pub fn save(&self, path: &Path, meta: &EnhancerMeta) -> Result<()> {
        save_enhancer(path, &self.net, Some(&self.adam), meta)
    }
}

pub fn save_enhancer(path: &Path, net: &Enhancer<f32>, adam: Option<&Adam>, meta: &EnhancerMeta) -> Result<()> {
    let mut tensors = Vec::new();
    for e in net.layout() {
        tensors.push(NamedTensor { name: e.name.clone(), shape: e.shape.clone(), data: net.params[e.range()].to_vec() });
        if let Some(a) = adam {
            for (prefix, buf) in [("adam.m", &a.m), ("adam.v", &a.v)] {
                tensors.push(NamedTensor { name: format!("{prefix}.{}", e.name), shape: e.shape.clone(), data: buf[e.range()].to_vec() });
            }
        }
    }
    checkpoint::save(path, meta, &tensors)
}

pub struct LoadedEnhancer {
    pub net: Enhancer<f32>,
    pub meta: EnhancerMeta,
    /// Adam first and second moments when the checkpoint carries them.
    pub moments: Option<(Vec<f32>, Vec<f32>)>,
}

pub fn load_enhancer(path: &Path) -> Result<LoadedEnhancer> {
    let mut loaded = checkpoint::load::<EnhancerMeta>(path)?;
    let meta = loaded.meta.clone();
    let mut net = Enhancer::<f32>::new(EnhancerConfig { out_init_scale: 0.0, ..meta.enhancer.clone() })?;
    net.config = meta.enhancer.clone();
    let layout = net.layout().to_vec();
    let mut m = Vec::new();
    let mut v = Vec::new();
    let has_moments = loaded.tensors.keys().any(|k| k.starts_with("adam."));
    for e in &layout {
        let data = loaded.take(&e.name, &e.shape, path)?;
        net.params[e.range()].copy_from_slice(&data);
        if has_moments {
            m.extend(loaded.take(&format!("adam.m.{}", e.name), &e.shape, path)?);
            v.extend(loaded.take(&format!("adam.v.{}", e.name), &e.shape, path)?);
        }
    }
    Ok(LoadedEnhancer { net, meta, moments: has_moments.then_some((m, v)) })
}

/// Loss history as `step,total,content,style` CSV.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut s = String::from("step,total,content,style\n");
    for r in history {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.total, r.content, r.style));
    }
    s
}

/// Centered moving average with the given half-width.
pub fn smoothed(values: &[f64], half: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
