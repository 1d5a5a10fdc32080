//! The detail enhancement network: a four-level encoder/decoder over
//! 128² normal patches with skip connections, material-conditioned instance
//! normalisation after every transposed convolution, and a residual output.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use detail_core::{MaterialLabel, Patch};

use crate::gram::patch_tensor;
use crate::ops::{
    concat, conv3x3, conv3x3_backward, conv_transpose2, conv_transpose2_backward, instance_norm,
    instance_norm_backward, maxpool2, maxpool2_backward, relu, relu_backward, split, NormCache, Tensor,
};
use crate::real::{cast_slice, Real};
use crate::{Error, Result};

pub const LEVELS: usize = 4;
/// Outputs whose norm is within this of 1 are left as they are, so a zero
/// residual reproduces the input bit for bit.
pub const RENORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhancerConfig {
    pub widths: [usize; LEVELS],
    pub materials: usize,
    pub patch_size: usize,
    /// Output conv init std as a fraction of the He std.
    pub out_init_scale: f64,
    pub seed: u64,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self { widths: [32, 64, 128, 256], materials: 5, patch_size: 128, out_init_scale: 0.1, seed: 7 }
    }
}

impl EnhancerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.materials == 0 {
            return Err(Error::Config("enhancer widths and material count must be positive".into()));
        }
        if self.patch_size == 0 || self.patch_size % (1 << LEVELS) != 0 {
            return Err(Error::Config(format!("patch size must be a positive multiple of 16, got {}", self.patch_size)));
        }
        if !(self.out_init_scale.is_finite() && self.out_init_scale >= 0.0) {
            return Err(Error::Config("out_init_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Parameter layout for a configuration, in storage order.
pub fn param_layout(cfg: &EnhancerConfig) -> Vec<ParamEntry> {
    let c = cfg.widths;
    let m = cfg.materials;
    let mut entries = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let e = ParamEntry { name, shape, offset };
        offset += e.len();
        entries.push(e);
    };
    for k in 0..LEVELS {
        let cin = if k == 0 { 3 } else { c[k - 1] };
        push(format!("enc{}.conv.weight", k + 1), vec![c[k], cin, 3, 3]);
        push(format!("enc{}.conv.bias", k + 1), vec![c[k]]);
    }
    for k in (0..LEVELS).rev() {
        let upin = if k == LEVELS - 1 { c[k] } else { 2 * c[k + 1] };
        push(format!("dec{}.up.weight", k + 1), vec![upin, c[k], 2, 2]);
        push(format!("dec{}.up.bias", k + 1), vec![c[k]]);
        push(format!("dec{}.cin.gamma", k + 1), vec![m, c[k]]);
        push(format!("dec{}.cin.beta", k + 1), vec![m, c[k]]);
    }
    push("out.conv.weight".into(), vec![3, 2 * c[0], 3, 3]);
    push("out.conv.bias".into(), vec![3]);
    entries
}

#[derive(Clone, Debug)]
struct Slots {
    enc_w: [Range<usize>; LEVELS],
    enc_b: [Range<usize>; LEVELS],
    up_w: [Range<usize>; LEVELS],
    up_b: [Range<usize>; LEVELS],
    gamma: [Range<usize>; LEVELS],
    beta: [Range<usize>; LEVELS],
    out_w: Range<usize>,
    out_b: Range<usize>,
}

impl Slots {
    fn new(layout: &[ParamEntry]) -> Self {
        let find = |n: String| layout.iter().find(|e| e.name == n).unwrap().range();
        let per = |f: &dyn Fn(usize) -> String| std::array::from_fn(|k| find(f(k + 1)));
        Self {
            enc_w: per(&|k| format!("enc{k}.conv.weight")),
            enc_b: per(&|k| format!("enc{k}.conv.bias")),
            up_w: per(&|k| format!("dec{k}.up.weight")),
            up_b: per(&|k| format!("dec{k}.up.bias")),
            gamma: per(&|k| format!("dec{k}.cin.gamma")),
            beta: per(&|k| format!("dec{k}.cin.beta")),
            out_w: find("out.conv.weight".into()),
            out_b: find("out.conv.bias".into()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Enhancer<T> {
    pub config: EnhancerConfig,
    pub params: Vec<T>,
    layout: Vec<ParamEntry>,
    slots: Slots,
}

struct EncLevel<T> {
    input: Tensor<T>,
    norm: NormCache<T>,
    act: Tensor<T>,
    pool_arg: Vec<u8>,
}

struct DecLevel<T> {
    input: Tensor<T>,
    norm: NormCache<T>,
    act: Tensor<T>,
}

/// Intermediate values of one forward pass.
pub struct Tape<T> {
    material: usize,
    enc: Vec<EncLevel<T>>,
    /// Indexed by level, deepest last.
    dec: Vec<DecLevel<T>>,
    head_in: Tensor<T>,
    pre_clamp: Tensor<T>,
    /// Per pixel: `Some(norm)` when renormalised, `None` when passed through
    /// or masked out.
    renorm: Vec<Option<T>>,
    fallback: Vec<bool>,
    mask: Vec<bool>,
    out: Tensor<T>,
}

impl<T> Tape<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.out
    }
}

/// Conditional instance normalisation with a material's `(γ, β)` row.
pub fn cin<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Tensor<T> {
    instance_norm(x, Some((gamma, beta))).0
}

impl<T: Real> Enhancer<T> {
    pub fn new(config: EnhancerConfig) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        let total = layout.last().map_or(0, |e| e.offset + e.len());
        let mut params = vec![0.0f64; total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for e in &layout {
            let fan_in = match e.name.as_str() {
                n if n.ends_with("conv.weight") => e.shape[1] * 9,
                n if n.ends_with("up.weight") => e.shape[0],
                n if n.ends_with("gamma") => {
                    params[e.range()].fill(1.0);
                    continue;
                }
                _ => continue,
            };
            let mut std = (2.0 / fan_in as f64).sqrt();
            if e.name.starts_with("out.") {
                std *= config.out_init_scale;
            }
            if std > 0.0 {
                let normal = Normal::new(0.0, std).unwrap();
                params[e.range()].iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        }
        let slots = Slots::new(&layout);
        Ok(Self { config, params: cast_slice(&params), layout, slots })
    }

    /// Rebuilds a network from a stored parameter vector.
    pub fn from_params(config: EnhancerConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        let total = layout.last().map_or(0, |e| e.offset + e.len());
        if params.len() != total {
            return Err(Error::Config(format!("expected {total} parameters, got {}", params.len())));
        }
        let slots = Slots::new(&layout);
        Ok(Self { config, params, layout, slots })
    }

    pub fn cast<U: Real>(&self) -> Enhancer<U> {
        Enhancer {
            config: self.config.clone(),
            params: cast_slice(&self.params),
            layout: self.layout.clone(),
            slots: self.slots.clone(),
        }
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.layout.iter().find(|e| e.name == name).map(|e| &self.params[e.range()])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.layout.iter().find(|e| e.name == name)?.range();
        Some(&mut self.params[r])
    }

    fn cin_rows(&self, site: usize, material: usize) -> (&[T], &[T]) {
        let c = self.config.widths[site];
        let g = &self.params[self.slots.gamma[site].clone()][material * c..(material + 1) * c];
        let b = &self.params[self.slots.beta[site].clone()][material * c..(material + 1) * c];
        (g, b)
    }

    /// CIN at decoder site `site` (0 = finest) for `material`.
    pub fn cin(&self, x: &Tensor<T>, material: &MaterialLabel, site: usize) -> Result<Tensor<T>> {
        self.check_material(material)?;
        if site >= LEVELS || x.c != self.config.widths[site] {
            return Err(Error::Config(format!("no CIN site {site} with {} channels", x.c)));
        }
        let (g, b) = self.cin_rows(site, material.index());
        Ok(cin(x, g, b))
    }

    fn check_material(&self, material: &MaterialLabel) -> Result<()> {
        if material.count() != self.config.materials || material.index() >= self.config.materials {
            return Err(Error::Config(format!(
                "material {} of {} does not fit a network with {} materials",
                material.index(),
                material.count(),
                self.config.materials
            )));
        }
        Ok(())
    }

    /// Forward pass on decoded normals (`3 × S × S`, background zero).
    pub fn forward(&self, input: &Tensor<T>, mask: &[bool], material: usize) -> Tape<T> {
        let s = &self.slots;
        let c = self.config.widths;
        let p = &self.params;
        assert_eq!((input.c, input.h, input.w), (3, self.config.patch_size, self.config.patch_size));
        assert!(material < self.config.materials);
        let mut enc = Vec::with_capacity(LEVELS);
        let mut x = input.clone();
        for k in 0..LEVELS {
            let y = conv3x3(&x, &p[s.enc_w[k].clone()], &p[s.enc_b[k].clone()], c[k]);
            let (mut act, norm) = instance_norm(&y, None);
            relu(&mut act);
            let (pooled, pool_arg) = maxpool2(&act);
            enc.push(EncLevel { input: std::mem::replace(&mut x, pooled), norm, act, pool_arg });
        }
        let mut dec: Vec<Option<DecLevel<T>>> = (0..LEVELS).map(|_| None).collect();
        let mut d = x;
        for k in (0..LEVELS).rev() {
            let u = conv_transpose2(&d, &p[s.up_w[k].clone()], &p[s.up_b[k].clone()], c[k]);
            let (g, b) = self.cin_rows(k, material);
            let (mut act, norm) = instance_norm(&u, Some((g, b)));
            relu(&mut act);
            let next = concat(&act, &enc[k].act);
            dec[k] = Some(DecLevel { input: std::mem::replace(&mut d, next), norm, act });
        }
        let head_in = d;
        let r = conv3x3(&head_in, &p[s.out_w.clone()], &p[s.out_b.clone()], 3);
        let plane = input.plane();
        let two = T::from_f64c(2.0);
        let mut pre_clamp = Tensor::zeros(3, input.h, input.w);
        let mut out = Tensor::zeros(3, input.h, input.w);
        let mut renorm = vec![None; plane];
        let mut fallback = vec![false; plane];
        for i in 0..plane {
            if !mask[i] {
                continue;
            }
            let mut v = [T::zero(); 3];
            for ch in 0..3 {
                let pre = input.data[ch * plane + i] + two * r.data[ch * plane + i];
                pre_clamp.data[ch * plane + i] = pre;
                v[ch] = pre.max(-T::one()).min(T::one());
            }
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if norm < T::from_f64c(1e-6) {
                fallback[i] = true;
                for ch in 0..3 {
                    out.data[ch * plane + i] = input.data[ch * plane + i];
                }
                continue;
            }
            let renormalise = (norm - T::one()).abs() >= T::from_f64c(RENORM_TOLERANCE);
            for ch in 0..3 {
                out.data[ch * plane + i] = if renormalise { v[ch] / norm } else { v[ch] };
            }
            if renormalise {
                renorm[i] = Some(norm);
            }
        }
        Tape {
            material,
            enc,
            dec: dec.into_iter().map(Option::unwrap).collect(),
            head_in,
            pre_clamp,
            renorm,
            fallback,
            mask: mask.to_vec(),
            out,
        }
    }

    /// Parameter gradient for an output gradient `dout`, accumulated into `grad`.
    pub fn backward(&self, tape: &Tape<T>, dout: &Tensor<T>, grad: &mut [T]) {
        let s = &self.slots;
        let c = self.config.widths;
        let p = &self.params;
        assert_eq!(grad.len(), p.len());
        let plane = dout.plane();
        let mut dr = Tensor::zeros(3, dout.h, dout.w);
        let two = T::from_f64c(2.0);
        for i in 0..plane {
            if !tape.mask[i] || tape.fallback[i] {
                continue;
            }
            let g = [dout.data[i], dout.data[plane + i], dout.data[2 * plane + i]];
            let dv = match tape.renorm[i] {
                Some(norm) => {
                    let u = [tape.out.data[i], tape.out.data[plane + i], tape.out.data[2 * plane + i]];
                    let ug = u[0] * g[0] + u[1] * g[1] + u[2] * g[2];
                    [(g[0] - u[0] * ug) / norm, (g[1] - u[1] * ug) / norm, (g[2] - u[2] * ug) / norm]
                }
                None => g,
            };
            for ch in 0..3 {
                if tape.pre_clamp.data[ch * plane + i].abs() <= T::one() {
                    dr.data[ch * plane + i] = two * dv[ch];
                }
            }
        }
        let (gw, rest) = grad.split_at_mut(s.out_b.start);
        let dd = conv3x3_backward(
            &tape.head_in,
            &p[s.out_w.clone()],
            &dr,
            Some(&mut gw[s.out_w.clone()]),
            Some(&mut rest[..3]),
            true,
        )
        .unwrap();
        let mut skip: Vec<Option<Tensor<T>>> = (0..LEVELS).map(|_| None).collect();
        let mut dd = dd;
        let m = tape.material;
        for k in 0..LEVELS {
            let lvl = &tape.dec[k];
            let (mut da, de) = split(&dd, c[k]);
            skip[k] = Some(de);
            relu_backward(&lvl.act, &mut da);
            let (gamma, _) = self.cin_rows(k, m);
            let row = m * c[k]..(m + 1) * c[k];
            let mut dgamma = vec![T::zero(); c[k]];
            let mut dbeta = vec![T::zero(); c[k]];
            let du = instance_norm_backward(&lvl.norm, &da, Some(gamma), Some(&mut dgamma), Some(&mut dbeta));
            add_into(&mut grad[s.gamma[k].clone()][row.clone()], &dgamma);
            add_into(&mut grad[s.beta[k].clone()][row], &dbeta);
            let mut dw = vec![T::zero(); s.up_w[k].len()];
            let mut db = vec![T::zero(); c[k]];
            dd = conv_transpose2_backward(&lvl.input, &p[s.up_w[k].clone()], &du, &mut dw, &mut db);
            add_into(&mut grad[s.up_w[k].clone()], &dw);
            add_into(&mut grad[s.up_b[k].clone()], &db);
        }
        // dd now holds the bottleneck gradient
        let mut dx = dd;
        for k in (0..LEVELS).rev() {
            let lvl = &tape.enc[k];
            let mut de = maxpool2_backward(&dx, &lvl.pool_arg, lvl.act.h, lvl.act.w);
            de.add_assign(skip[k].as_ref().unwrap());
            relu_backward(&lvl.act, &mut de);
            let dy = instance_norm_backward(&lvl.norm, &de, None, None, None);
            let mut dw = vec![T::zero(); s.enc_w[k].len()];
            let mut db = vec![T::zero(); c[k]];
            let next = conv3x3_backward(&lvl.input, &p[s.enc_w[k].clone()], &dy, Some(&mut dw), Some(&mut db), k > 0);
            add_into(&mut grad[s.enc_w[k].clone()], &dw);
            add_into(&mut grad[s.enc_b[k].clone()], &db);
            if let Some(n) = next {
                dx = n;
            }
        }
    }

    /// Enhances one patch. Background pixels keep the input's background.
    pub fn enhance_patch(&self, patch: &Patch, material: &MaterialLabel) -> Result<Patch> {
        self.check_material(material)?;
        if patch.size != self.config.patch_size {
            return Err(Error::Config(format!(
                "patch size {} does not match the network's {}",
                patch.size, self.config.patch_size
            )));
        }
        let x = patch_tensor::<T>(patch);
        let tape = self.forward(&x, &patch.mask, material.index());
        let plane = x.plane();
        let normals = (0..plane)
            .map(|i| {
                if patch.mask[i] {
                    std::array::from_fn(|ch| tape.out.data[ch * plane + i].to_f64c() as f32)
                } else {
                    patch.normals[i]
                }
            })
            .collect();
        Ok(patch.with_normals(normals))
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EnhancerConfig {
        EnhancerConfig { widths: [2, 3, 4, 4], materials: 2, patch_size: 16, out_init_scale: 1.0, seed: 3 }
    }

    #[test]
    fn layout_is_contiguous() {
        let layout = param_layout(&EnhancerConfig::default());
        for w in layout.windows(2) {
            assert_eq!(w[0].offset + w[0].len(), w[1].offset);
        }
        let up3 = layout.iter().find(|e| e.name == "dec3.up.weight").unwrap();
        assert_eq!(up3.shape, vec![512, 128, 2, 2]);
        let up4 = layout.iter().find(|e| e.name == "dec4.up.weight").unwrap();
        assert_eq!(up4.shape, vec![256, 256, 2, 2]);
    }

    #[test]
    fn cin_hand_example() {
        let x = Tensor::from_vec(1, 1, 3, vec![1.0f64, 2.0, 3.0]);
        let y = cin(&x, &[2.0], &[1.0]);
        let expect = [-1.449, 1.0, 3.449];
        for (a, b) in y.data.iter().zip(expect) {
            assert!((a - b).abs() < 1e-3);
        }
        let y = cin(&x, &[0.0], &[0.25]);
        assert_eq!(y.data, vec![0.25; 3]);
    }

    #[test]
    fn shapes_round_trip() {
        let net = Enhancer::<f32>::new(small()).unwrap();
        let x = Tensor::from_vec(3, 16, 16, vec![0.0; 768]);
        let tape = net.forward(&x, &vec![true; 256], 1);
        assert_eq!((tape.out.c, tape.out.h, tape.out.w), (3, 16, 16));
    }

    #[test]
    fn unknown_material_is_rejected() {
        let net = Enhancer::<f32>::new(small()).unwrap();
        let x = Tensor::<f32>::zeros(4, 2, 2);
        assert!(net.cin(&x, &MaterialLabel::new(0, 5).unwrap(), 2).is_err());
        assert!(net.cin(&x, &MaterialLabel::new(1, 2).unwrap(), 2).is_ok());
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let net = Enhancer::<f64>::new(small()).unwrap();
        let size = 16;
        let plane = size * size;
        let mut x = Tensor::<f64>::zeros(3, size, size);
        let mut mask = vec![true; plane];
        for i in 0..plane {
            let (a, b) = ((i % 7) as f64 * 0.1 - 0.3, (i % 5) as f64 * 0.08 - 0.2);
            let n = (1.0 + a * a + b * b).sqrt();
            x.data[i] = a / n;
            x.data[plane + i] = b / n;
            x.data[2 * plane + i] = 1.0 / n;
            if i % 11 == 0 {
                mask[i] = false;
                (0..3).for_each(|c| x.data[c * plane + i] = 0.0);
            }
        }
        let dout = Tensor::from_vec(3, size, size, (0..3 * plane).map(|i| ((i * 29 % 13) as f64 - 6.0) / 6.0).collect());
        let loss = |n: &Enhancer<f64>| -> f64 {
            n.forward(&x, &mask, 1).out.data.iter().zip(&dout.data).map(|(a, b)| a * b).sum()
        };
        let tape = net.forward(&x, &mask, 1);
        let mut grad = vec![0.0; net.params.len()];
        net.backward(&tape, &dout, &mut grad);
        for e in net.layout() {
            for j in [0, e.len() / 2, e.len() - 1] {
                let i = e.offset + j;
                let (mut a, mut b) = (net.clone(), net.clone());
                a.params[i] += 1e-6;
                b.params[i] -= 1e-6;
                let fd = (loss(&a) - loss(&b)) / 2e-6;
                let err = (fd - grad[i]).abs() / (fd.abs().max(grad[i].abs()).max(1e-4));
                assert!(err < 1e-4, "{}[{j}]: fd {fd} vs {}", e.name, grad[i]);
            }
        }
        // material 0 rows see no gradient from a material-1 pass
        let g0 = net.layout().iter().find(|e| e.name == "dec2.cin.gamma").unwrap();
        assert!(grad[g0.offset..g0.offset + 3].iter().all(|&v| v == 0.0));
    }
}
