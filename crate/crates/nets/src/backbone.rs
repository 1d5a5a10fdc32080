//! Frozen VGG19-style feature extractor.
//!
//! Weights come either from a safetensors file using torchvision's
//! `features.{i}.weight` keys, or from a seeded He initialisation of the same
//! layer table (optionally narrowed by a width divisor). Only input
//! gradients are ever computed; the weights are read-only after load.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::ops::{conv3x3, conv3x3_backward, maxpool2, maxpool2_backward, relu, relu_backward, Tensor};
use crate::real::{cast_slice, Real};
use crate::{Error, Result};

/// ImageNet statistics the published weights were trained with.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `(block, index in block, torchvision features index, full width)`.
const VGG19_CONVS: [(usize, usize, usize, usize); 16] = [
    (1, 1, 0, 64),
    (1, 2, 2, 64),
    (2, 1, 5, 128),
    (2, 2, 7, 128),
    (3, 1, 10, 256),
    (3, 2, 12, 256),
    (3, 3, 14, 256),
    (3, 4, 16, 256),
    (4, 1, 19, 512),
    (4, 2, 21, 512),
    (4, 3, 23, 512),
    (4, 4, 25, 512),
    (5, 1, 28, 512),
    (5, 2, 30, 512),
    (5, 3, 32, 512),
    (5, 4, 34, 512),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneSource {
    /// He-initialised weights from a fixed seed; widths are the VGG19 widths
    /// divided by `width_divisor`.
    Seeded {
        #[serde(default = "default_seed")]
        seed: u64,
        #[serde(default = "default_divisor")]
        width_divisor: usize,
    },
    /// torchvision-keyed safetensors file.
    File { weights: PathBuf },
}

fn default_seed() -> u64 {
    19
}

fn default_divisor() -> usize {
    8
}

impl Default for BackboneSource {
    fn default() -> Self {
        BackboneSource::Seeded { seed: default_seed(), width_divisor: default_divisor() }
    }
}

#[derive(Clone, Debug)]
struct ConvLayer<T> {
    cin: usize,
    cout: usize,
    weight: Vec<T>,
    bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
enum Stage {
    /// conv + relu, output named `relu{b}_{i}`
    Conv(usize),
    Pool,
}

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    convs: Vec<ConvLayer<T>>,
    stages: Vec<(String, Stage)>,
}

/// Activations of every stage up to some depth, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub input: Tensor<T>,
    pub outputs: Vec<Tensor<T>>,
    pool_args: Vec<Vec<u8>>,
}

impl<T: Real> Backbone<T> {
    fn from_convs(convs: Vec<ConvLayer<T>>) -> Self {
        let mut stages = Vec::new();
        for (ci, &(block, idx, _, _)) in VGG19_CONVS.iter().take(convs.len()).enumerate() {
            stages.push((format!("relu{block}_{idx}"), Stage::Conv(ci)));
            let last_in_block = VGG19_CONVS.get(ci + 1).map_or(true, |n| n.0 != block);
            if last_in_block && ci + 1 < convs.len() {
                stages.push((format!("pool{block}"), Stage::Pool));
            }
        }
        Self { convs, stages }
    }

    pub fn seeded(seed: u64, width_divisor: usize) -> Result<Self> {
        if width_divisor == 0 || 64 % width_divisor != 0 {
            return Err(Error::Config(format!("width divisor must divide 64, got {width_divisor}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut convs = Vec::new();
        for &(_, _, _, width) in &VGG19_CONVS {
            let cout = width / width_divisor;
            let normal = Normal::new(0.0, (2.0 / (9 * cin) as f64).sqrt()).unwrap();
            let weight: Vec<f64> = (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect();
            convs.push(ConvLayer { cin, cout, weight: cast_slice(&weight), bias: vec![T::zero(); cout] });
            cin = cout;
        }
        Ok(Self::from_convs(convs))
    }

    /// Loads the leading conv layers present in a torchvision-keyed file.
    pub fn from_safetensors(path: &Path) -> Result<Self> {
        let load = |reason: String| Error::Load { path: path.to_path_buf(), reason };
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| load(e.to_string()))?;
        let mut cin = 3;
        let mut convs = Vec::new();
        for &(_, _, key, _) in &VGG19_CONVS {
            let Ok(w) = st.tensor(&format!("features.{key}.weight")) else { break };
            let b = st.tensor(&format!("features.{key}.bias")).map_err(|e| load(e.to_string()))?;
            let shape = w.shape();
            if shape.len() != 4 || shape[1] != cin || shape[2] != 3 || shape[3] != 3 {
                return Err(load(format!("features.{key}.weight has shape {shape:?}, expected [_, {cin}, 3, 3]")));
            }
            let cout = shape[0];
            if b.shape() != [cout] {
                return Err(load(format!("features.{key}.bias has shape {:?}", b.shape())));
            }
            let weight = read_floats(w.dtype(), w.data()).map_err(|r| load(format!("features.{key}.weight: {r}")))?;
            let bias = read_floats(b.dtype(), b.data()).map_err(|r| load(format!("features.{key}.bias: {r}")))?;
            convs.push(ConvLayer { cin, cout, weight: cast_slice(&weight), bias: cast_slice(&bias) });
            cin = cout;
        }
        if convs.is_empty() {
            return Err(load("no features.*.weight tensors found".into()));
        }
        Ok(Self::from_convs(convs))
    }

    pub fn load(source: &BackboneSource) -> Result<Self> {
        match source {
            BackboneSource::Seeded { seed, width_divisor } => Self::seeded(*seed, *width_divisor),
            BackboneSource::File { weights } => Self::from_safetensors(weights),
        }
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        let convs = self
            .convs
            .iter()
            .map(|c| ConvLayer { cin: c.cin, cout: c.cout, weight: cast_slice(&c.weight), bias: cast_slice(&c.bias) })
            .collect();
        Backbone { convs, stages: self.stages.clone() }
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.stages.iter().map(|(n, _)| n.as_str())
    }

    /// Stage index of a named layer.
    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.stages
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Config(format!("unknown backbone layer {name:?}")))
    }

    /// Downsampling factor of a stage's output relative to the input.
    pub fn layer_stride(&self, stage: usize) -> usize {
        1 << self.stages[..=stage].iter().filter(|(_, s)| *s == Stage::Pool).count()
    }

    pub fn layer_channels(&self, stage: usize) -> usize {
        self.stages[..=stage]
            .iter()
            .rev()
            .find_map(|(_, s)| match s {
                Stage::Conv(c) => Some(self.convs[*c].cout),
                Stage::Pool => None,
            })
            .unwrap()
    }

    /// Runs the first `depth` stages.
    pub fn trace(&self, input: Tensor<T>, depth: usize) -> Trace<T> {
        assert!(depth <= self.stages.len());
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(depth);
        let mut pool_args = Vec::new();
        for (_, stage) in &self.stages[..depth] {
            let x = outputs.last().unwrap_or(&input);
            let y = match stage {
                Stage::Conv(c) => {
                    let l = &self.convs[*c];
                    let mut y = conv3x3(x, &l.weight, &l.bias, l.cout);
                    relu(&mut y);
                    y
                }
                Stage::Pool => {
                    let (y, arg) = maxpool2(x);
                    pool_args.push(arg);
                    y
                }
            };
            outputs.push(y);
        }
        Trace { input, outputs, pool_args }
    }

    /// Gradient with respect to the trace input, given gradients injected at
    /// stage outputs (`grads[s]` matches `trace.outputs[s]`).
    pub fn backward(&self, trace: &Trace<T>, mut grads: Vec<Option<Tensor<T>>>) -> Tensor<T> {
        let depth = trace.outputs.len();
        assert_eq!(grads.len(), depth);
        let mut carry: Option<Tensor<T>> = None;
        let mut pool_i = trace.pool_args.len();
        for s in (0..depth).rev() {
            let g = match (carry.take(), grads[s].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    Some(a)
                }
                (a, b) => a.or(b),
            };
            let x = if s == 0 { &trace.input } else { &trace.outputs[s - 1] };
            carry = match &self.stages[s].1 {
                Stage::Conv(c) => g.and_then(|mut g| {
                    relu_backward(&trace.outputs[s], &mut g);
                    conv3x3_backward(x, &self.convs[*c].weight, &g, None, None, true)
                }),
                Stage::Pool => {
                    pool_i -= 1;
                    g.map(|g| maxpool2_backward(&g, &trace.pool_args[pool_i], x.h, x.w))
                }
            };
        }
        carry.unwrap_or_else(|| Tensor::zeros(trace.input.c, trace.input.h, trace.input.w))
    }
}

fn read_floats(dtype: Dtype, data: &[u8]) -> std::result::Result<Vec<f64>, String> {
    match dtype {
        Dtype::F32 => Ok(data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect()),
        Dtype::F64 => Ok(data.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
        other => Err(format!("unsupported dtype {other:?}")),
    }
}

/// Normalised backbone input for a square patch of decoded normals:
/// `((n + 1)/2 − mean)/std` per RGB channel.
pub fn image_tensor<T: Real>(normals: &[[f32; 3]], size: usize) -> Tensor<T> {
    let p = size * size;
    assert_eq!(normals.len(), p);
    let mut t = Tensor::zeros(3, size, size);
    for c in 0..3 {
        let (m, s) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
        for (o, n) in t.channel_mut(c).iter_mut().zip(normals) {
            *o = T::from_f64c(((n[c] as f64 + 1.0) * 0.5 - m) / s);
        }
    }
    t
}

/// [`image_tensor`] for normals already held in `T`, channel-major.
pub fn image_tensor_chw<T: Real>(normals: &Tensor<T>) -> Tensor<T> {
    let mut t = normals.clone();
    for c in 0..3 {
        let (m, s) = (T::from_f64c(IMAGENET_MEAN[c]), T::from_f64c(IMAGENET_STD[c]));
        let half = T::from_f64c(0.5);
        t.channel_mut(c).iter_mut().for_each(|v| *v = ((*v + T::one()) * half - m) / s);
    }
    t
}

/// Chains an input-image gradient back to the decoded normals.
pub fn image_grad_to_normals<T: Real>(grad: &mut Tensor<T>) {
    for c in 0..3 {
        let k = T::from_f64c(0.5 / IMAGENET_STD[c]);
        grad.channel_mut(c).iter_mut().for_each(|v| *v *= k);
    }
}
