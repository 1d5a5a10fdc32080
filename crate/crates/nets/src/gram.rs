//! Masked Gram signatures, content/style losses and their gradients with
//! respect to the decoded normals of a patch.

use serde::{Deserialize, Serialize};

use detail_core::metrics::{separation_score, DEFAULT_KNN};
use detail_core::Patch;

use crate::backbone::{image_grad_to_normals, image_tensor_chw, Backbone};
use crate::ops::Tensor;
use crate::real::{gemm, Real};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerConfig {
    pub content: Vec<String>,
    pub style: Vec<String>,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            content: vec!["relu4_1".into()],
            style: ["relu1_1", "relu2_1", "relu3_1", "relu4_1"].map(String::from).to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { content: 1.0, style: 1e4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGram {
    pub layer: String,
    pub channels: usize,
    /// Row-major `channels × channels`.
    pub gram: Vec<f64>,
    /// Valid pixels of the downsampled mask (R_l).
    pub valid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramSignature {
    pub layers: Vec<LayerGram>,
}

impl GramSignature {
    pub fn layer(&self, name: &str) -> Option<&LayerGram> {
        self.layers.iter().find(|l| l.layer == name)
    }
}

/// Block-reduces a square mask by `stride`; a cell is valid when at least
/// half of its block is masked.
pub fn downsample_mask(mask: &[bool], size: usize, stride: usize) -> Vec<bool> {
    let out = size / stride;
    let mut v = vec![false; out * out];
    for r in 0..out {
        for c in 0..out {
            let mut n = 0;
            for y in r * stride..(r + 1) * stride {
                n += mask[y * size + c * stride..y * size + (c + 1) * stride].iter().filter(|&&m| m).count();
            }
            v[r * out + c] = 2 * n >= stride * stride;
        }
    }
    v
}

/// `G = (F∘B)(F∘B)ᵀ` for a `C × P` feature map. Returns the Gram in `f64`
/// and the masked features.
pub fn gram_masked<T: Real>(features: &Tensor<T>, mask: &[bool]) -> (Vec<f64>, Tensor<T>) {
    let (c, p) = (features.c, features.plane());
    assert_eq!(mask.len(), p, "mask does not match the feature map");
    let mut fb = features.clone();
    for ch in 0..c {
        for (v, &m) in fb.channel_mut(ch).iter_mut().zip(mask) {
            if !m {
                *v = T::zero();
            }
        }
    }
    let mut g = vec![T::zero(); c * c];
    gemm(c, p, c, &fb.data, false, &fb.data, true, T::zero(), &mut g);
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            // exact symmetry regardless of the kernel's summation order
            out[i * c + j] = 0.5 * (g[i * c + j].to_f64c() + g[j * c + i].to_f64c());
        }
    }
    (out, fb)
}

/// Exemplar Grams of one material, deduplicated and held in a canonical
/// order so that the loss does not depend on how the pool was listed.
#[derive(Clone, Debug)]
pub struct StylePool {
    entries: Vec<(GramSignature, f64)>,
    count: usize,
    /// Per-layer `Σ_k G_k`.
    sums: Vec<Vec<f64>>,
}

impl StylePool {
    pub fn new(signatures: &[GramSignature]) -> Result<Self> {
        let first = signatures.first().ok_or_else(|| Error::Data("empty exemplar pool".into()))?;
        let names: Vec<&str> = first.layers.iter().map(|l| l.layer.as_str()).collect();
        let mut keyed: Vec<(Vec<u64>, &GramSignature)> = Vec::with_capacity(signatures.len());
        for s in signatures {
            if s.layers.iter().map(|l| l.layer.as_str()).ne(names.iter().copied()) {
                return Err(Error::Data("exemplar signatures cover different layers".into()));
            }
            let key = s.layers.iter().flat_map(|l| l.gram.iter().map(|v| (v + 0.0).to_bits())).collect();
            keyed.push((key, s));
        }
        keyed.sort_by(|a, b| a.0.cmp(&b.0));
        let mut entries: Vec<(GramSignature, f64)> = Vec::new();
        let mut last_key: Option<&Vec<u64>> = None;
        for (key, s) in &keyed {
            if last_key == Some(key) {
                entries.last_mut().unwrap().1 += 1.0;
            } else {
                entries.push(((*s).clone(), 1.0));
                last_key = Some(key);
            }
        }
        let sums = (0..names.len())
            .map(|l| {
                let mut acc = vec![0.0; first.layers[l].gram.len()];
                for (s, n) in &entries {
                    acc.iter_mut().zip(&s.layers[l].gram).for_each(|(a, g)| *a += n * g);
                }
                acc
            })
            .collect();
        Ok(Self { entries, count: signatures.len(), sums })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.entries[0].0.layers.iter().map(|l| l.layer.as_str())
    }

    /// `Σ_k Σ_l ‖G_l − G_{k,l}‖² / (4 R_l²)` with `R_l` taken from `sig`.
    pub fn loss(&self, sig: &GramSignature) -> Result<f64> {
        self.check(sig)?;
        let mut total = 0.0;
        for (ex, n) in &self.entries {
            let mut per = 0.0;
            for (l, g) in sig.layers.iter().enumerate() {
                let r = g.valid as f64;
                let d: f64 = g.gram.iter().zip(&ex.layers[l].gram).map(|(a, b)| (a - b) * (a - b)).sum();
                per += d / (4.0 * r * r);
            }
            total += n * per;
        }
        Ok(total)
    }

    /// `∂loss/∂G_l = 2 (K G_l − Σ_k G_{k,l}) / (4 R_l²)` for every layer.
    pub fn gram_gradients(&self, sig: &GramSignature) -> Result<Vec<Vec<f64>>> {
        self.check(sig)?;
        let k = self.count as f64;
        Ok(sig
            .layers
            .iter()
            .zip(&self.sums)
            .map(|(g, s)| {
                let r = g.valid as f64;
                let scale = 2.0 / (4.0 * r * r);
                g.gram.iter().zip(s).map(|(a, b)| scale * (k * a - b)).collect()
            })
            .collect())
    }

    fn check(&self, sig: &GramSignature) -> Result<()> {
        if sig.layers.iter().map(|l| l.layer.as_str()).ne(self.layer_names()) {
            return Err(Error::Data("signature layers differ from the exemplar pool".into()));
        }
        if let Some(l) = sig.layers.iter().find(|l| l.valid == 0) {
            return Err(Error::EmptyContent(format!("no valid pixels at {}", l.layer)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub content: f64,
    pub style: f64,
}

/// Backbone plus the content and style layer selection.
#[derive(Clone, Debug)]
pub struct LossNetwork<T> {
    backbone: Backbone<T>,
    content: Vec<usize>,
    style: Vec<usize>,
    style_names: Vec<String>,
    depth: usize,
}

/// Decoded normals of a patch as a `3 × size × size` tensor, background zeroed.
pub fn patch_tensor<T: Real>(patch: &Patch) -> Tensor<T> {
    let s = patch.size;
    let mut t = Tensor::zeros(3, s, s);
    for (i, (n, &m)) in patch.normals.iter().zip(&patch.mask).enumerate() {
        if m {
            for c in 0..3 {
                t.data[c * s * s + i] = T::from_f64c(n[c] as f64);
            }
        }
    }
    t
}

impl<T: Real> LossNetwork<T> {
    pub fn new(backbone: Backbone<T>, layers: &LayerConfig) -> Result<Self> {
        if layers.style.is_empty() {
            return Err(Error::Config("at least one style layer is required".into()));
        }
        let resolve = |names: &[String]| names.iter().map(|n| backbone.layer_index(n)).collect::<Result<Vec<_>>>();
        let content = resolve(&layers.content)?;
        let style = resolve(&layers.style)?;
        let depth = content.iter().chain(&style).max().unwrap() + 1;
        Ok(Self { backbone, content, style, style_names: layers.style.clone(), depth })
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    pub fn cast<U: Real>(&self) -> LossNetwork<U> {
        LossNetwork {
            backbone: self.backbone.cast(),
            content: self.content.clone(),
            style: self.style.clone(),
            style_names: self.style_names.clone(),
            depth: self.depth,
        }
    }

    pub fn style_layers(&self) -> &[String] {
        &self.style_names
    }

    /// Activations at named layers for a sanitised patch.
    pub fn extract_features(&self, patch: &Patch, layers: &[&str]) -> Result<Vec<Tensor<T>>> {
        let idx = layers.iter().map(|n| self.backbone.layer_index(n)).collect::<Result<Vec<_>>>()?;
        let depth = idx.iter().max().map_or(0, |m| m + 1);
        let trace = self.backbone.trace(image_tensor_chw(&patch_tensor(patch)), depth);
        Ok(idx.iter().map(|&i| trace.outputs[i].clone()).collect())
    }

    fn masks(&self, mask: &[bool], size: usize) -> Vec<Vec<bool>> {
        self.style.iter().map(|&s| downsample_mask(mask, size, self.backbone.layer_stride(s))).collect()
    }

    fn signature_from_trace(&self, outputs: &[Tensor<T>], masks: &[Vec<bool>]) -> (GramSignature, Vec<Tensor<T>>) {
        let mut layers = Vec::with_capacity(self.style.len());
        let mut masked = Vec::with_capacity(self.style.len());
        for ((&s, name), m) in self.style.iter().zip(&self.style_names).zip(masks) {
            let f = &outputs[s];
            let (gram, fb) = gram_masked(f, m);
            layers.push(LayerGram { layer: name.clone(), channels: f.c, gram, valid: m.iter().filter(|&&v| v).count() });
            masked.push(fb);
        }
        (GramSignature { layers }, masked)
    }

    /// Masked Gram signature at the style layers.
    pub fn signature(&self, patch: &Patch) -> Result<GramSignature> {
        let masks = self.masks(&patch.mask, patch.size);
        if let Some(i) = masks.iter().position(|m| !m.contains(&true)) {
            return Err(Error::EmptyContent(format!("no valid pixels at {}", self.style_names[i])));
        }
        let trace = self.backbone.trace(image_tensor_chw(&patch_tensor(patch)), self.depth);
        Ok(self.signature_from_trace(&trace.outputs, &masks).0)
    }

    /// Activations at the content layers.
    pub fn content_features(&self, normals: &Tensor<T>) -> Vec<Tensor<T>> {
        let depth = self.content.iter().max().map_or(0, |m| m + 1);
        let trace = self.backbone.trace(image_tensor_chw(normals), depth);
        self.content.iter().map(|&i| trace.outputs[i].clone()).collect()
    }

    /// Weighted content + style loss of `out` (decoded normals, channel-major)
    /// and, when `want_grad`, its gradient with respect to `out`. Pixels
    /// outside `mask` are reset to background before the backbone sees them
    /// and receive zero gradient.
    pub fn loss(
        &self,
        out: &Tensor<T>,
        mask: &[bool],
        inp_content: &[Tensor<T>],
        pool: &StylePool,
        weights: &LossWeights,
        want_grad: bool,
    ) -> Result<(LossParts, Option<Tensor<T>>)> {
        let size = out.h;
        let mut x = out.clone();
        for c in 0..3 {
            for (v, &m) in x.channel_mut(c).iter_mut().zip(mask) {
                if !m {
                    *v = T::zero();
                }
            }
        }
        let masks = self.masks(mask, size);
        let trace = self.backbone.trace(image_tensor_chw(&x), self.depth);
        let (sig, masked) = self.signature_from_trace(&trace.outputs, &masks);
        let style = pool.loss(&sig)?;
        let mut content = 0.0;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.depth];
        for (&ci, target) in self.content.iter().zip(inp_content) {
            let f = &trace.outputs[ci];
            if !f.same_shape(target) {
                return Err(Error::Data("content features do not match the output patch".into()));
            }
            let mut d = f.clone();
            for (a, b) in d.data.iter_mut().zip(&target.data) {
                *a -= *b;
                content += 0.5 * a.to_f64c() * a.to_f64c();
            }
            if want_grad && weights.content != 0.0 {
                let wc = T::from_f64c(weights.content);
                d.data.iter_mut().for_each(|v| *v *= wc);
                accumulate(&mut grads[ci], d);
            }
        }
        let parts = LossParts { total: weights.content * content + weights.style * style, content, style };
        if !want_grad {
            return Ok((parts, None));
        }
        if weights.style != 0.0 {
            let dg = pool.gram_gradients(&sig)?;
            for (((&s, g), fb), m) in self.style.iter().zip(&dg).zip(&masked).zip(&masks) {
                let c = fb.c;
                let p = fb.plane();
                let gt: Vec<T> = g.iter().map(|v| T::from_f64c(2.0 * weights.style * v)).collect();
                let mut df = Tensor::zeros(c, fb.h, fb.w);
                gemm(c, c, p, &gt, false, &fb.data, false, T::zero(), &mut df.data);
                for ch in 0..c {
                    for (v, &keep) in df.channel_mut(ch).iter_mut().zip(m) {
                        if !keep {
                            *v = T::zero();
                        }
                    }
                }
                accumulate(&mut grads[s], df);
            }
        }
        let mut g = self.backbone.backward(&trace, grads);
        image_grad_to_normals(&mut g);
        for c in 0..3 {
            for (v, &m) in g.channel_mut(c).iter_mut().zip(mask) {
                if !m {
                    *v = T::zero();
                }
            }
        }
        Ok((parts, Some(g)))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Silhouette of two signature sets at one layer after a joint spectral
/// embedding of their flattened Grams.
pub fn layer_separation_diagnostic(set_a: &[GramSignature], set_b: &[GramSignature], layer: &str) -> Result<f64> {
    let flatten = |set: &[GramSignature]| -> Result<Vec<Vec<f64>>> {
        set.iter()
            .map(|s| {
                s.layer(layer)
                    .map(|l| l.gram.clone())
                    .ok_or_else(|| Error::Config(format!("signature has no layer {layer:?}")))
            })
            .collect()
    };
    Ok(separation_score(&flatten(set_a)?, &flatten(set_b)?, DEFAULT_KNN)?)
}
