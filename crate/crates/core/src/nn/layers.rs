//! Layer kernels and their backward passes.
//!
//! Parallel loops split work by output plane (or by input plane for input
//! gradients); every reduction inside a plane runs in a fixed order, so
//! results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::Dims;

use super::{Mode, Real, Tensor5};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// 3D convolution with odd cubic kernel and zero "same" padding.
///
/// Weights are `[out][in][kz][ky][kx]`, kx fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv3d<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, ksize: usize) -> Self {
        assert!(ksize % 2 == 1, "kernel size must be odd");
        Self {
            in_ch,
            out_ch,
            ksize,
            weight: vec![T::zero(); out_ch * in_ch * ksize.pow(3)],
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn taps(&self) -> usize {
        self.ksize.pow(3)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.ksize, self.ksize, self.ksize]
    }

    fn kernel(&self, oc: usize, ic: usize) -> &[T] {
        let t = self.taps();
        &self.weight[(oc * self.in_ch + ic) * t..][..t]
    }

    pub fn cast<U: Real>(&self) -> Conv3d<U> {
        Conv3d {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            ksize: self.ksize,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }
}

/// Gradients of a weighted layer: parameters plus its input.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Tensor5<T>,
}

pub(crate) fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::from_f64(x.as_f64())).collect()
}

/// `out[i] += w * inp[i + shift]` over the indices where both exist.
#[inline]
fn axpy_shifted<T: Real>(out: &mut [T], inp: &[T], w: T, shift: isize) {
    let n = out.len();
    if shift >= 0 {
        let s = shift as usize;
        if s >= n {
            return;
        }
        for (o, &i) in out[..n - s].iter_mut().zip(&inp[s..]) {
            *o += w * i;
        }
    } else {
        let s = (-shift) as usize;
        if s >= n {
            return;
        }
        for (o, &i) in out[s..].iter_mut().zip(&inp[..n - s]) {
            *o += w * i;
        }
    }
}

/// `out[i] += a[i] * b[i + shift]` over the indices where both exist.
#[inline]
fn mul_acc_shifted<T: Real>(out: &mut [T], a: &[T], b: &[T], shift: isize) {
    let n = out.len();
    if shift >= 0 {
        let s = shift as usize;
        if s >= n {
            return;
        }
        for ((o, &x), &y) in out[..n - s].iter_mut().zip(&a[..n - s]).zip(&b[s..]) {
            *o += x * y;
        }
    } else {
        let s = (-shift) as usize;
        if s >= n {
            return;
        }
        for ((o, &x), &y) in out[s..].iter_mut().zip(&a[s..]).zip(&b[..n - s]) {
            *o += x * y;
        }
    }
}

/// `out[i] += w0 in[i-1] + w1 in[i] + w2 in[i+1]`, treating indices outside
/// the row as zero. One pass instead of three shifted ones.
#[inline]
fn axpy3<T: Real>(out: &mut [T], inp: &[T], w: [T; 3]) {
    let n = out.len();
    if n == 1 {
        out[0] += w[1] * inp[0];
        return;
    }
    out[0] += w[1] * inp[0] + w[2] * inp[1];
    out[n - 1] += w[0] * inp[n - 2] + w[1] * inp[n - 1];
    for (o, win) in out[1..n - 1].iter_mut().zip(inp.windows(3)) {
        *o += w[0] * win[0] + w[1] * win[1] + w[2] * win[2];
    }
}

/// `acc[t][i] += g[i] * x[i + t - 1]` for t in 0..3, in one pass.
#[inline]
fn mul_acc3<T: Real>(acc: &mut [T], g: &[T], x: &[T]) {
    let n = g.len();
    let (a0, rest) = acc.split_at_mut(n);
    let (a1, a2) = rest.split_at_mut(n);
    let a2 = &mut a2[..n];
    a1[0] += g[0] * x[0];
    if n == 1 {
        return;
    }
    a2[0] += g[0] * x[1];
    a0[n - 1] += g[n - 1] * x[n - 2];
    a1[n - 1] += g[n - 1] * x[n - 1];
    let inner = a0[1..n - 1]
        .iter_mut()
        .zip(&mut a1[1..n - 1])
        .zip(&mut a2[1..n - 1])
        .zip(&g[1..n - 1])
        .zip(x.windows(3));
    for ((((p0, p1), p2), &gi), w) in inner {
        *p0 += gi * w[0];
        *p1 += gi * w[1];
        *p2 += gi * w[2];
    }
}

/// Correlate one input plane with one kernel and add into `out`.
fn correlate_plane<T: Real>(out: &mut [T], inp: &[T], kernel: &[T], dims: Dims, k: usize) {
    let [nx, ny, nz] = dims;
    let r = (k / 2) as isize;
    for z in 0..nz {
        for y in 0..ny {
            let orow = &mut out[(z * ny + y) * nx..][..nx];
            for kz in 0..k {
                let sz = z as isize + kz as isize - r;
                if sz < 0 || sz >= nz as isize {
                    continue;
                }
                for ky in 0..k {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= ny as isize {
                        continue;
                    }
                    let irow = &inp[(sz as usize * ny + sy as usize) * nx..][..nx];
                    let taps = &kernel[(kz * k + ky) * k..][..k];
                    if k == 3 {
                        axpy3(orow, irow, [taps[0], taps[1], taps[2]]);
                    } else {
                        for (kx, &w) in taps.iter().enumerate() {
                            axpy_shifted(orow, irow, w, kx as isize - r);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward<T: Real>(x: &Tensor5<T>, conv: &Conv3d<T>) -> Result<Tensor5<T>> {
    if x.channels() != conv.in_ch {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {}",
            conv.in_ch,
            x.channels()
        )));
    }
    let dims = x.dims();
    let plane = x.plane_len();
    let mut out = Tensor5::zeros(x.batch(), conv.out_ch, dims);
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, o)| {
            let (n, oc) = (idx / conv.out_ch, idx % conv.out_ch);
            o.fill(conv.bias[oc]);
            for ic in 0..conv.in_ch {
                correlate_plane(o, x.plane(n, ic), conv.kernel(oc, ic), dims, conv.ksize);
            }
        });
    Ok(out)
}

pub fn conv3d_backward<T: Real>(x: &Tensor5<T>, conv: &Conv3d<T>, grad_out: &Tensor5<T>) -> ConvGrads<T> {
    let dims = x.dims();
    let [nx, ny, nz] = dims;
    let k = conv.ksize;
    let taps = conv.taps();
    let r = (k / 2) as isize;
    let batch = x.batch();

    // Input gradient: correlation with the spatially flipped kernel, summed
    // over output channels.
    let mut grad_in = Tensor5::zeros(batch, conv.in_ch, dims);
    let plane = x.plane_len();
    grad_in
        .data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, g)| {
            let (n, ic) = (idx / conv.in_ch, idx % conv.in_ch);
            let mut flipped = vec![T::zero(); taps];
            for oc in 0..conv.out_ch {
                let kern = conv.kernel(oc, ic);
                for (t, f) in flipped.iter_mut().enumerate() {
                    *f = kern[taps - 1 - t];
                }
                correlate_plane(g, grad_out.plane(n, oc), &flipped, dims, k);
            }
        });

    // Weight gradient: per tap, accumulate row-wise products into an
    // x-indexed buffer, then reduce it once.
    let mut grad_w = vec![T::zero(); conv.weight.len()];
    grad_w
        .par_chunks_mut(conv.in_ch * taps)
        .enumerate()
        .for_each(|(oc, gw_oc)| {
            let mut acc = vec![T::zero(); taps * nx];
            for ic in 0..conv.in_ch {
                acc.fill(T::zero());
                for n in 0..batch {
                    let go = grad_out.plane(n, oc);
                    let xi = x.plane(n, ic);
                    for z in 0..nz {
                        for y in 0..ny {
                            let grow = &go[(z * ny + y) * nx..][..nx];
                            for kz in 0..k {
                                let sz = z as isize + kz as isize - r;
                                if sz < 0 || sz >= nz as isize {
                                    continue;
                                }
                                for ky in 0..k {
                                    let sy = y as isize + ky as isize - r;
                                    if sy < 0 || sy >= ny as isize {
                                        continue;
                                    }
                                    let irow = &xi[(sz as usize * ny + sy as usize) * nx..][..nx];
                                    let t0 = (kz * k + ky) * k;
                                    if k == 3 {
                                        mul_acc3(&mut acc[t0 * nx..][..3 * nx], grow, irow);
                                    } else {
                                        for kx in 0..k {
                                            let t = t0 + kx;
                                            mul_acc_shifted(&mut acc[t * nx..][..nx], grow, irow, kx as isize - r);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for t in 0..taps {
                    gw_oc[ic * taps + t] = acc[t * nx..][..nx].iter().copied().sum();
                }
            }
        });

    let grad_b = (0..conv.out_ch)
        .map(|oc| (0..batch).map(|n| grad_out.plane(n, oc).iter().copied().sum::<T>()).sum())
        .collect();

    ConvGrads {
        weight: grad_w,
        bias: grad_b,
        input: grad_in,
    }
}

/// Flat input index of each pooled maximum.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    pub input_shape: [usize; 5],
    pub argmax: Vec<usize>,
}

/// 2×2×2 max pooling with stride two. Ties keep the first voxel in
/// linear (x-fastest) order.
pub fn maxpool2_forward<T: Real>(x: &Tensor5<T>) -> Result<(Tensor5<T>, PoolIndices)> {
    let dims = x.dims();
    if dims.iter().any(|d| d % 2 != 0) {
        return Err(Error::Shape(format!("max pooling needs even dims, got {dims:?}")));
    }
    let [nx, ny, _] = dims;
    let od = dims.map(|d| d / 2);
    let mut out = Tensor5::zeros(x.batch(), x.channels(), od);
    let mut argmax = vec![0usize; out.data().len()];
    let in_plane = x.plane_len();
    let mut o = 0;
    for p in 0..x.batch() * x.channels() {
        let base = p * in_plane;
        let src = &x.data()[base..base + in_plane];
        for z in 0..od[2] {
            for y in 0..od[1] {
                for xo in 0..od[0] {
                    let mut best = (z * 2 * ny + y * 2) * nx + xo * 2;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((z * 2 + dz) * ny + y * 2 + dy) * nx + xo * 2 + dx;
                                if src[i] > src[best] {
                                    best = i;
                                }
                            }
                        }
                    }
                    out.data_mut()[o] = src[best];
                    argmax[o] = base + best;
                    o += 1;
                }
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: x.shape(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Real>(idx: &PoolIndices, grad_out: &Tensor5<T>) -> Tensor5<T> {
    let [n, c, x, y, z] = idx.input_shape;
    let mut g = Tensor5::zeros(n, c, [x, y, z]);
    for (&i, &go) in idx.argmax.iter().zip(grad_out.data()) {
        g.data_mut()[i] += go;
    }
    g
}

/// 2×2×2 transposed convolution with stride two: every input voxel paints
/// its own 2×2×2 output block.
///
/// Weights are `[in][out][dz][dy][dx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UpConv<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> UpConv<T> {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            weight: vec![T::zero(); in_ch * out_ch * 8],
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.in_ch, self.out_ch, 2, 2, 2]
    }

    fn kernel(&self, ic: usize, oc: usize) -> &[T] {
        &self.weight[(ic * self.out_ch + oc) * 8..][..8]
    }

    pub fn cast<U: Real>(&self) -> UpConv<U> {
        UpConv {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }
}

pub fn upconv2_forward<T: Real>(x: &Tensor5<T>, up: &UpConv<T>) -> Result<Tensor5<T>> {
    if x.channels() != up.in_ch {
        return Err(Error::Shape(format!(
            "up-convolution expects {} input channels, got {}",
            up.in_ch,
            x.channels()
        )));
    }
    let [nx, ny, nz] = x.dims();
    let od = [nx * 2, ny * 2, nz * 2];
    let mut out = Tensor5::zeros(x.batch(), up.out_ch, od);
    let plane = out.plane_len();
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, o)| {
            let (n, oc) = (idx / up.out_ch, idx % up.out_ch);
            o.fill(up.bias[oc]);
            for ic in 0..up.in_ch {
                let w = up.kernel(ic, oc);
                let xi = x.plane(n, ic);
                for z in 0..nz {
                    for y in 0..ny {
                        let irow = &xi[(z * ny + y) * nx..][..nx];
                        for dz in 0..2 {
                            for dy in 0..2 {
                                let orow = &mut o[((2 * z + dz) * od[1] + 2 * y + dy) * od[0]..][..od[0]];
                                let w0 = w[(dz * 2 + dy) * 2];
                                let w1 = w[(dz * 2 + dy) * 2 + 1];
                                for (pair, &v) in orow.chunks_exact_mut(2).zip(irow) {
                                    pair[0] += w0 * v;
                                    pair[1] += w1 * v;
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub fn upconv2_backward<T: Real>(x: &Tensor5<T>, up: &UpConv<T>, grad_out: &Tensor5<T>) -> ConvGrads<T> {
    let [nx, ny, nz] = x.dims();
    let od = grad_out.dims();
    let batch = x.batch();
    let mut grad_in = Tensor5::zeros(batch, up.in_ch, x.dims());
    let mut grad_w = vec![T::zero(); up.weight.len()];
    for n in 0..batch {
        let plane = x.plane_len();
        let gin_n = &mut grad_in.data_mut()[n * up.in_ch * plane..][..up.in_ch * plane];
        gin_n
            .par_chunks_mut(plane)
            .zip(grad_w.par_chunks_mut(up.out_ch * 8))
            .enumerate()
            .for_each(|(ic, (gi, gw))| {
                let xi = x.plane(n, ic);
                for oc in 0..up.out_ch {
                    let w = up.kernel(ic, oc);
                    let go = grad_out.plane(n, oc);
                    let gw_k = &mut gw[oc * 8..][..8];
                    for z in 0..nz {
                        for y in 0..ny {
                            let row = (z * ny + y) * nx;
                            for dz in 0..2 {
                                for dy in 0..2 {
                                    let grow = &go[((2 * z + dz) * od[1] + 2 * y + dy) * od[0]..][..od[0]];
                                    let t = (dz * 2 + dy) * 2;
                                    let (mut s0, mut s1) = (T::zero(), T::zero());
                                    let (w0, w1) = (w[t], w[t + 1]);
                                    let gi_row = &mut gi[row..][..nx];
                                    let xi_row = &xi[row..][..nx];
                                    for ((g, &v), pair) in gi_row.iter_mut().zip(xi_row).zip(grow.chunks_exact(2)) {
                                        *g += w0 * pair[0] + w1 * pair[1];
                                        s0 += v * pair[0];
                                        s1 += v * pair[1];
                                    }
                                    gw_k[t] += s0;
                                    gw_k[t + 1] += s1;
                                }
                            }
                        }
                    }
                }
            });
    }
    let grad_b = (0..up.out_ch)
        .map(|oc| (0..batch).map(|n| grad_out.plane(n, oc).iter().copied().sum::<T>()).sum())
        .collect();
    ConvGrads {
        weight: grad_w,
        bias: grad_b,
        input: grad_in,
    }
}

/// Per-channel batch normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Fold batch statistics into the running estimates.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        for c in 0..self.channels() {
            let rm = self.running_mean[c].as_f64();
            let rv = self.running_var[c].as_f64();
            self.running_mean[c] = T::from_f64(BN_MOMENTUM * rm + (1.0 - BN_MOMENTUM) * mean[c]);
            self.running_var[c] = T::from_f64(BN_MOMENTUM * rv + (1.0 - BN_MOMENTUM) * var[c]);
        }
    }

    pub fn cast<U: Real>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: cast_vec(&self.gamma),
            beta: cast_vec(&self.beta),
            running_mean: cast_vec(&self.running_mean),
            running_var: cast_vec(&self.running_var),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mode: Mode,
    pub xhat: Tensor5<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and biased variance per channel (train mode only).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Normalize per channel over batch and space. In train mode the batch
/// statistics (biased variance) are used and returned in the cache; the
/// caller decides whether to fold them into the running estimates.
pub fn batchnorm_forward<T: Real>(x: &Tensor5<T>, bn: &BatchNorm<T>, mode: Mode) -> Result<(Tensor5<T>, BnCache<T>)> {
    let ch = x.channels();
    if ch != bn.channels() {
        return Err(Error::Shape(format!(
            "batch norm has {} channels, input has {ch}",
            bn.channels()
        )));
    }
    let batch = x.batch();
    let count = (batch * x.plane_len()) as f64;
    let mut mean = vec![0.0f64; ch];
    let mut var = vec![0.0f64; ch];
    let mut inv_std = vec![T::zero(); ch];
    for c in 0..ch {
        let (m, v) = match mode {
            Mode::Train => {
                let m = (0..batch)
                    .flat_map(|n| x.plane(n, c).iter())
                    .map(|v| v.as_f64())
                    .sum::<f64>()
                    / count;
                let v = (0..batch)
                    .flat_map(|n| x.plane(n, c).iter())
                    .map(|v| (v.as_f64() - m).powi(2))
                    .sum::<f64>()
                    / count;
                (m, v)
            }
            Mode::Eval => (bn.running_mean[c].as_f64(), bn.running_var[c].as_f64()),
        };
        mean[c] = m;
        var[c] = v;
        inv_std[c] = T::from_f64(1.0 / (v + BN_EPS).sqrt());
    }
    let mut xhat = Tensor5::zeros(batch, ch, x.dims());
    let mut out = Tensor5::zeros(batch, ch, x.dims());
    for n in 0..batch {
        for c in 0..ch {
            let m = T::from_f64(mean[c]);
            let s = inv_std[c];
            let (g, b) = (bn.gamma[c], bn.beta[c]);
            for ((h, o), &v) in xhat
                .plane_mut(n, c)
                .iter_mut()
                .zip(out.plane_mut(n, c).iter_mut())
                .zip(x.plane(n, c))
            {
                *h = (v - m) * s;
                *o = g * *h + b;
            }
        }
    }
    let (batch_mean, batch_var) = match mode {
        Mode::Train => (mean, var),
        Mode::Eval => (Vec::new(), Vec::new()),
    };
    Ok((
        out,
        BnCache {
            mode,
            xhat,
            inv_std,
            batch_mean,
            batch_var,
        },
    ))
}

/// Returns (input grad, gamma grad, beta grad).
pub fn batchnorm_backward<T: Real>(
    cache: &BnCache<T>,
    bn: &BatchNorm<T>,
    grad_out: &Tensor5<T>,
) -> (Tensor5<T>, Vec<T>, Vec<T>) {
    let xhat = &cache.xhat;
    let batch = xhat.batch();
    let ch = xhat.channels();
    let count = T::from_f64((batch * xhat.plane_len()) as f64);
    let mut grad_in = Tensor5::zeros(batch, ch, xhat.dims());
    let mut dgamma = vec![T::zero(); ch];
    let mut dbeta = vec![T::zero(); ch];
    for c in 0..ch {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..batch {
            for (&dy, &h) in grad_out.plane(n, c).iter().zip(xhat.plane(n, c)) {
                sum_dy += dy;
                sum_dy_xhat += dy * h;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = bn.gamma[c] * cache.inv_std[c];
        for n in 0..batch {
            let gi = grad_in.plane_mut(n, c);
            let go = grad_out.plane(n, c);
            let h = xhat.plane(n, c);
            match cache.mode {
                Mode::Train => {
                    for i in 0..gi.len() {
                        gi[i] = scale * (go[i] - (sum_dy + h[i] * sum_dy_xhat) / count);
                    }
                }
                Mode::Eval => {
                    for i in 0..gi.len() {
                        gi[i] = scale * go[i];
                    }
                }
            }
        }
    }
    (grad_in, dgamma, dbeta)
}

pub fn relu_forward<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(out: &Tensor5<T>, grad_out: &Tensor5<T>) -> Tensor5<T> {
    let mut g = grad_out.clone();
    for (gv, &o) in g.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

pub fn concat_channels<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    if a.batch() != b.batch() || a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor5::zeros(a.batch(), a.channels() + b.channels(), a.dims());
    for n in 0..a.batch() {
        for c in 0..a.channels() {
            out.plane_mut(n, c).copy_from_slice(a.plane(n, c));
        }
        for c in 0..b.channels() {
            out.plane_mut(n, a.channels() + c).copy_from_slice(b.plane(n, c));
        }
    }
    Ok(out)
}

/// Inverse of [`concat_channels`]: the first `first` channels, then the rest.
pub fn split_channels<T: Real>(x: &Tensor5<T>, first: usize) -> (Tensor5<T>, Tensor5<T>) {
    let rest = x.channels() - first;
    let mut a = Tensor5::zeros(x.batch(), first, x.dims());
    let mut b = Tensor5::zeros(x.batch(), rest, x.dims());
    for n in 0..x.batch() {
        for c in 0..first {
            a.plane_mut(n, c).copy_from_slice(x.plane(n, c));
        }
        for c in 0..rest {
            b.plane_mut(n, c).copy_from_slice(x.plane(n, first + c));
        }
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, c: usize, dims: Dims, seed: u64) -> Tensor5<f64> {
        let len = n * c * dims.iter().product::<usize>();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor5::from_vec(n, c, dims, data).unwrap()
    }

    /// Direct summation over the kernel support.
    fn conv_reference(x: &Tensor5<f64>, conv: &Conv3d<f64>) -> Tensor5<f64> {
        let [nx, ny, nz] = x.dims();
        let k = conv.ksize as isize;
        let r = k / 2;
        let mut out = Tensor5::zeros(x.batch(), conv.out_ch, x.dims());
        for n in 0..x.batch() {
            for oc in 0..conv.out_ch {
                for z in 0..nz {
                    for y in 0..ny {
                        for xx in 0..nx {
                            let mut acc = conv.bias[oc];
                            for ic in 0..conv.in_ch {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let (sx, sy, sz) = (
                                                xx as isize + kx - r,
                                                y as isize + ky - r,
                                                z as isize + kz - r,
                                            );
                                            if sx < 0
                                                || sy < 0
                                                || sz < 0
                                                || sx >= nx as isize
                                                || sy >= ny as isize
                                                || sz >= nz as isize
                                            {
                                                continue;
                                            }
                                            let w = conv.weight[(((oc * conv.in_ch + ic) as isize * k + kz) * k + ky) as usize
                                                * k as usize
                                                + kx as usize];
                                            acc += w * x.plane(n, ic)
                                                [(sz as usize * ny + sy as usize) * nx + sx as usize];
                                        }
                                    }
                                }
                            }
                            out.plane_mut(n, oc)[(z * ny + y) * nx + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_conv_is_affine() {
        let mut conv = Conv3d::<f64>::zeros(1, 1, 1);
        conv.weight[0] = 2.5;
        conv.bias[0] = -1.0;
        let x = Tensor5::filled(1, 1, [2, 2, 2], 3.0);
        let y = conv3d_forward(&x, &conv).unwrap();
        assert!(y.data().iter().all(|&v| v == 6.5));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut conv = Conv3d::<f64>::zeros(1, 1, 3);
        conv.weight[13] = 1.0;
        let x = ramp(1, 1, [5, 4, 3], 1);
        assert_eq!(conv3d_forward(&x, &conv).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_support() {
        let mut conv = Conv3d::<f32>::zeros(1, 1, 3);
        conv.weight.fill(1.0);
        let x = Tensor5::filled(1, 1, [8, 8, 8], 1.0f32);
        let y = conv3d_forward(&x, &conv).unwrap();
        let p = y.plane(0, 0);
        assert_eq!(p[(3 * 8 + 4) * 8 + 4], 27.0);
        assert_eq!(p[0], 8.0);
        assert_eq!(p[(7 * 8 + 7) * 8], 8.0);
        // Edge (not corner) voxel sees 2*3*3.
        assert_eq!(p[(4 * 8 + 4) * 8], 18.0);
    }

    #[test]
    fn conv_matches_direct_summation() {
        let x = ramp(2, 3, [5, 4, 6], 7);
        let mut conv = Conv3d::<f64>::zeros(3, 2, 3);
        conv.weight = ramp(1, 1, [162, 1, 1], 9).into_data();
        conv.bias = vec![0.3, -0.2];
        let fast = conv3d_forward(&x, &conv).unwrap();
        let slow = conv_reference(&x, &conv);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let conv = Conv3d::<f32>::zeros(2, 1, 3);
        let x = Tensor5::<f32>::zeros(1, 1, [2, 2, 2]);
        assert!(matches!(conv3d_forward(&x, &conv), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_is_linear() {
        let mut conv = Conv3d::<f64>::zeros(2, 2, 3);
        conv.weight = ramp(1, 1, [108, 1, 1], 3).into_data();
        let a = ramp(1, 2, [4, 4, 4], 11);
        let b = ramp(1, 2, [4, 4, 4], 12);
        let (alpha, beta) = (0.7, -1.3);
        let mut mix = a.map(|v| alpha * v);
        mix.add_assign(&b.map(|v| beta * v));
        let lhs = conv3d_forward(&mix, &conv).unwrap();
        let ya = conv3d_forward(&a, &conv).unwrap();
        let yb = conv3d_forward(&b, &conv).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(ya.data()).zip(yb.data()) {
            let rhs = alpha * p + beta * q;
            assert!((l - rhs).abs() <= 1e-5 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor5::from_vec(1, 1, [2, 2, 2], (1..=8).map(|v| v as f32).collect()).unwrap();
        let (y, idx) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[8.0]);
        assert_eq!(idx.argmax, vec![7]);

        let c = Tensor5::filled(1, 1, [2, 2, 2], 4.0f32);
        let (y, idx) = maxpool2_forward(&c).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.argmax, vec![0]);

        let big = Tensor5::<f32>::zeros(1, 1, [96, 96, 56]);
        assert_eq!(maxpool2_forward(&big).unwrap().0.dims(), [48, 48, 28]);

        let odd = Tensor5::<f32>::zeros(1, 1, [3, 2, 2]);
        assert!(matches!(maxpool2_forward(&odd), Err(Error::Shape(_))));
    }

    #[test]
    fn upconv_paints_blocks() {
        let mut up = UpConv::<f32>::zeros(1, 1);
        up.weight.fill(1.0);
        let mut x = Tensor5::<f32>::zeros(1, 1, [2, 2, 2]);
        x.data_mut()[0] = 3.0;
        let y = upconv2_forward(&x, &up).unwrap();
        assert_eq!(y.dims(), [4, 4, 4]);
        let mut expected = 0;
        for z in 0..4 {
            for yy in 0..4 {
                for xx in 0..4 {
                    let v = y.plane(0, 0)[(z * 4 + yy) * 4 + xx];
                    if xx < 2 && yy < 2 && z < 2 {
                        assert_eq!(v, 3.0);
                        expected += 1;
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
        assert_eq!(expected, 8);

        let zero = Tensor5::<f32>::zeros(1, 1, [48, 48, 28]);
        let y = upconv2_forward(&zero, &up).unwrap();
        assert_eq!(y.dims(), [96, 96, 56]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_train_standardizes() {
        let x = ramp(1, 3, [6, 5, 4], 5).map(|v| 3.0 * v + 2.0);
        let bn = BatchNorm::<f64>::new(3);
        let (y, cache) = batchnorm_forward(&x, &bn, Mode::Train).unwrap();
        for c in 0..3 {
            let p = y.plane(0, c);
            let n = p.len() as f64;
            let mean = p.iter().sum::<f64>() / n;
            let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert_eq!(cache.batch_mean.len(), 3);
    }

    #[test]
    fn batchnorm_eval_identity() {
        let x = ramp(1, 2, [3, 3, 3], 8);
        let bn = BatchNorm::<f64>::new(2);
        let (y, _) = batchnorm_forward(&x, &bn, Mode::Eval).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-12);
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_constant_channel_gives_shift() {
        let x = Tensor5::filled(1, 1, [4, 4, 4], 5.0f64);
        let mut bn = BatchNorm::<f64>::new(1);
        bn.gamma[0] = 2.0;
        bn.beta[0] = 0.75;
        let (y, _) = batchnorm_forward(&x, &bn, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn running_stats_use_momentum() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.update_running(&[2.0], &[4.0]);
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var[0] - 1.3).abs() < 1e-12);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = ramp(1, 2, [2, 3, 2], 1);
        let b = ramp(1, 3, [2, 3, 2], 2);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.channels(), 5);
        let (a2, b2) = split_channels(&c, 2);
        assert_eq!((a2, b2), (a, b));
    }
}
