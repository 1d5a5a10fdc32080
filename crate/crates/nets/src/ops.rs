//! Channel-major image tensors and the layer kernels used by the backbone,
//! the enhancer and their backward passes.

use crate::real::{gemm, Real};

/// `c × h × w` activations, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![T::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.c, self.h, self.w) == (other.c, other.h, other.w)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Unfolds 3×3, pad-1 neighbourhoods: row `ci*9 + ky*3 + kx`, column `y*w + x`.
fn im2col<T: Real>(x: &Tensor<T>, cols: &mut Vec<T>) {
    let (h, w) = (x.h, x.w);
    let p = h * w;
    cols.clear();
    cols.resize(x.c * 9 * p, T::zero());
    for ci in 0..x.c {
        let src = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..][..w];
                    let drow = &mut row[y * w..][..w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into an image.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize) -> Tensor<T> {
    let p = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let dst = out.channel_mut(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..][..w];
                    let srow = &row[y * w..][..w];
                    match kx {
                        0 => drow[..w - 1].iter_mut().zip(&srow[1..]).for_each(|(d, s)| *d += *s),
                        1 => drow.iter_mut().zip(srow).for_each(|(d, s)| *d += *s),
                        _ => drow[1..].iter_mut().zip(&srow[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
    out
}

/// 3×3 convolution, stride 1, zero padding 1. `weight` is `[co][ci][3][3]`.
pub fn conv3x3<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], co: usize) -> Tensor<T> {
    let k = x.c * 9;
    assert_eq!(weight.len(), co * k, "conv weight shape");
    let mut cols = Vec::new();
    im2col(x, &mut cols);
    let p = x.plane();
    let mut out = Tensor::zeros(co, x.h, x.w);
    for (o, &b) in bias.iter().enumerate() {
        out.channel_mut(o).iter_mut().for_each(|v| *v = b);
    }
    gemm(co, k, p, weight, false, &cols, false, T::one(), &mut out.data);
    out
}

/// Backward of [`conv3x3`]. Returns the input gradient; parameter gradients
/// are accumulated into `dweight`/`dbias` when given.
pub fn conv3x3_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dout: &Tensor<T>,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let co = dout.c;
    let k = x.c * 9;
    let p = x.plane();
    let mut cols = Vec::new();
    if let Some(dw) = dweight {
        im2col(x, &mut cols);
        gemm(co, p, k, &dout.data, false, &cols, true, T::one(), dw);
    }
    if let Some(db) = dbias {
        for (o, b) in db.iter_mut().enumerate() {
            *b += dout.channel(o).iter().copied().sum::<T>();
        }
    }
    if !need_input_grad {
        return None;
    }
    cols.clear();
    cols.resize(k * p, T::zero());
    gemm(k, co, p, weight, true, &dout.data, false, T::zero(), &mut cols);
    Some(col2im(&cols, x.c, x.h, x.w))
}

pub fn relu<T: Real>(x: &mut Tensor<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(out: &Tensor<T>, dout: &mut Tensor<T>) {
    for (g, &o) in dout.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling, stride 2. Also returns the argmax offset (0..4) of
/// every output cell; ties keep the first position in row-major order.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h, w);
    let mut arg = vec![0u8; x.c * h * w];
    for c in 0..x.c {
        let src = x.channel(c);
        for y in 0..h {
            for xx in 0..w {
                let base = 2 * y * x.w + 2 * xx;
                let cand = [src[base], src[base + 1], src[base + x.w], src[base + x.w + 1]];
                let mut best = 0;
                for i in 1..4 {
                    if cand[i] > cand[best] {
                        best = i;
                    }
                }
                let o = c * h * w + y * w + xx;
                out.data[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(dout: &Tensor<T>, arg: &[u8], h: usize, w: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dout.c, h, w);
    let (oh, ow) = (dout.h, dout.w);
    for c in 0..dout.c {
        for y in 0..oh {
            for x in 0..ow {
                let o = c * oh * ow + y * ow + x;
                let a = arg[o] as usize;
                let (dy, dxx) = (a / 2, a % 2);
                dx.data[c * h * w + (2 * y + dy) * w + 2 * x + dxx] += dout.data[o];
            }
        }
    }
    dx
}

/// 2×2 transposed convolution, stride 2. `weight` is `[ci][co][2][2]`.
pub fn conv_transpose2<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], co: usize) -> Tensor<T> {
    let p = x.plane();
    let n4 = co * 4;
    assert_eq!(weight.len(), x.c * n4, "transposed conv weight shape");
    let mut y4 = vec![T::zero(); n4 * p];
    gemm(n4, x.c, p, weight, true, &x.data, false, T::zero(), &mut y4);
    let (h, w) = (2 * x.h, 2 * x.w);
    let mut out = Tensor::zeros(co, h, w);
    for o in 0..co {
        for a in 0..4 {
            let (dy, dx) = (a / 2, a % 2);
            let src = &y4[(o * 4 + a) * p..][..p];
            for i in 0..x.h {
                for j in 0..x.w {
                    out.data[o * h * w + (2 * i + dy) * w + 2 * j + dx] = src[i * x.w + j] + bias[o];
                }
            }
        }
    }
    out
}

pub fn conv_transpose2_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dout: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
) -> Tensor<T> {
    let co = dout.c;
    let p = x.plane();
    let n4 = co * 4;
    let (h, w) = (dout.h, dout.w);
    let mut dy4 = vec![T::zero(); n4 * p];
    for o in 0..co {
        dbias[o] += dout.channel(o).iter().copied().sum::<T>();
        for a in 0..4 {
            let (dy, dx) = (a / 2, a % 2);
            let dst = &mut dy4[(o * 4 + a) * p..][..p];
            for i in 0..x.h {
                for j in 0..x.w {
                    dst[i * x.w + j] = dout.data[o * h * w + (2 * i + dy) * w + 2 * j + dx];
                }
            }
        }
    }
    // weight viewed as ci × (co·4)
    gemm(x.c, p, n4, &x.data, false, &dy4, true, T::one(), dweight);
    let mut dx = Tensor::zeros(x.c, x.h, x.w);
    gemm(x.c, n4, p, weight, false, &dy4, false, T::zero(), &mut dx.data);
    dx
}

/// Floor on the per-channel standard deviation in instance normalisation.
pub const SIGMA_FLOOR: f64 = 1e-5;

/// Per-channel statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub normalized: Tensor<T>,
    pub sigma: Vec<T>,
    pub floored: Vec<bool>,
}

/// Instance normalisation `z = γ (x − μ)/σ + β` with population σ over the
/// spatial extent, floored at [`SIGMA_FLOOR`]. `None` affine means γ=1, β=0.
pub fn instance_norm<T: Real>(x: &Tensor<T>, affine: Option<(&[T], &[T])>) -> (Tensor<T>, NormCache<T>) {
    let p = T::from_usize(x.plane()).unwrap();
    let floor = T::from_f64c(SIGMA_FLOOR);
    let mut normalized = Tensor::zeros(x.c, x.h, x.w);
    let mut out = Tensor::zeros(x.c, x.h, x.w);
    let mut sigma = Vec::with_capacity(x.c);
    let mut floored = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let src = x.channel(c);
        let mean = src.iter().copied().sum::<T>() / p;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / p;
        let s = var.sqrt();
        let (s, fl) = if s < floor { (floor, true) } else { (s, false) };
        sigma.push(s);
        floored.push(fl);
        let (g, b) = match affine {
            Some((g, b)) => (g[c], b[c]),
            None => (T::one(), T::zero()),
        };
        let nrm = normalized.channel_mut(c);
        for (n, &v) in nrm.iter_mut().zip(src) {
            *n = (v - mean) / s;
        }
        for (o, &n) in out.channel_mut(c).iter_mut().zip(normalized.channel(c)) {
            *o = g * n + b;
        }
    }
    (out, NormCache { normalized, sigma, floored })
}

/// Backward of [`instance_norm`]; accumulates affine gradients when given.
pub fn instance_norm_backward<T: Real>(
    cache: &NormCache<T>,
    dout: &Tensor<T>,
    gamma: Option<&[T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) -> Tensor<T> {
    let p = T::from_usize(dout.plane()).unwrap();
    let mut dx = Tensor::zeros(dout.c, dout.h, dout.w);
    for c in 0..dout.c {
        let dy = dout.channel(c);
        let xn = cache.normalized.channel(c);
        let g = gamma.map_or(T::one(), |g| g[c]);
        let sum_dy = dy.iter().copied().sum::<T>();
        let sum_dy_xn = dy.iter().zip(xn).map(|(&a, &b)| a * b).sum::<T>();
        if let Some(dg) = dgamma.as_deref_mut() {
            dg[c] += sum_dy_xn;
        }
        if let Some(db) = dbeta.as_deref_mut() {
            db[c] += sum_dy;
        }
        let scale = g / cache.sigma[c];
        let mean_dy = sum_dy / p;
        // with a floored σ the normaliser is constant and only the mean moves
        let mean_dy_xn = if cache.floored[c] { T::zero() } else { sum_dy_xn / p };
        for ((d, &y), &n) in dx.channel_mut(c).iter_mut().zip(dy).zip(xn) {
            *d = scale * (y - mean_dy - n * mean_dy_xn);
        }
    }
    dx
}

/// Stacks `a` and `b` along channels.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial size");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.c + b.c, a.h, a.w, data)
}

/// Splits a channel-stacked gradient back into its `a.c` and remaining parts.
pub fn split<T: Real>(t: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let cut = first * t.plane();
    (
        Tensor::from_vec(first, t.h, t.w, t.data[..cut].to_vec()),
        Tensor::from_vec(t.c - first, t.h, t.w, t.data[cut..].to_vec()),
    )
}
