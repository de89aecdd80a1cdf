//! Dense CHW feature-map kernels with hand-written backward passes.
//!
//! All tensors hold a single example; batching is done by the caller.

use crate::error::{Error, Result};

/// Channel-major feature map: `data[(c * h + y) * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::shape(format!("{c}x{h}x{w}"), data.len()));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Stacks channels of `a` followed by channels of `b`.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!((a.h, a.w), (b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: splits after `c` channels.
    pub fn split(self, c: usize) -> (Tensor, Tensor) {
        let at = c * self.plane();
        let (h, w) = (self.h, self.w);
        let rest = self.c - c;
        let mut data = self.data;
        let tail = data.split_off(at);
        (
            Tensor { c, h, w, data },
            Tensor {
                c: rest,
                h,
                w,
                data: tail,
            },
        )
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major matrices, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `k x k` zero-padded patches into a `(c k k) x (h w)` matrix.
fn im2col(x: &Tensor, k: usize) -> Vec<f64> {
    let (h, w) = (x.h, x.w);
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; x.c * k * k * hw];
    for c in 0..x.c {
        let src = x.channel(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let s = sy as usize * w;
                    let d = y * w;
                    let sx_lo = (x_lo as isize + dx) as usize;
                    dst[d + x_lo..d + x_hi].copy_from_slice(&src[s + sx_lo..s + sx_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Tensor {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let dst = out.channel_mut(ch);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    let s = sy as usize * w;
                    let d = y * w;
                    for xx in x_lo..x_hi {
                        dst[s + (xx as isize + dx) as usize] += src[d + xx];
                    }
                }
            }
        }
    }
    out
}

/// Stride-1 "same" convolution with an odd `k x k` kernel. `weight` is
/// `(cout, cin, k, k)`, `bias` is `(cout)`.
pub fn conv2d(x: &Tensor, weight: &[f64], bias: &[f64], cout: usize, k: usize) -> Tensor {
    let hw = x.plane();
    let kk = x.c * k * k;
    debug_assert_eq!(weight.len(), cout * kk);
    let mut out = Tensor::zeros(cout, x.h, x.w);
    for (o, b) in bias.iter().enumerate() {
        out.channel_mut(o).fill(*b);
    }
    if k == 1 {
        gemm(cout, kk, hw, weight, false, &x.data, false, 1.0, &mut out.data);
    } else {
        let cols = im2col(x, k);
        gemm(cout, kk, hw, weight, false, &cols, false, 1.0, &mut out.data);
    }
    out
}

/// Backward of [`conv2d`]; accumulates into `dweight`/`dbias` and returns the
/// input gradient.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &[f64],
    dout: &Tensor,
    dweight: &mut [f64],
    dbias: &mut [f64],
    k: usize,
) -> Tensor {
    let hw = x.plane();
    let cout = dout.c;
    let kk = x.c * k * k;
    for (o, db) in dbias.iter_mut().enumerate() {
        *db += dout.channel(o).iter().sum::<f64>();
    }
    if k == 1 {
        gemm(cout, hw, kk, &dout.data, false, &x.data, true, 1.0, dweight);
        let mut dx = Tensor::zeros(x.c, x.h, x.w);
        gemm(kk, cout, hw, weight, true, &dout.data, false, 0.0, &mut dx.data);
        dx
    } else {
        let cols = im2col(x, k);
        gemm(cout, hw, kk, &dout.data, false, &cols, true, 1.0, dweight);
        let mut dcols = vec![0.0; kk * hw];
        gemm(kk, cout, hw, weight, true, &dout.data, false, 0.0, &mut dcols);
        col2im(&dcols, x.c, x.h, x.w, k)
    }
}

/// `y = W x` with `W` of shape `(out, in)`.
pub fn linear(weight: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let n = x.len();
    debug_assert_eq!(weight.len(), out * n);
    weight
        .chunks_exact(n)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Backward of [`linear`]; accumulates `dW` and returns `dx`.
pub fn linear_backward(weight: &[f64], x: &[f64], dy: &[f64], dweight: &mut [f64]) -> Vec<f64> {
    let n = x.len();
    let mut dx = vec![0.0; n];
    for (o, &g) in dy.iter().enumerate() {
        let row = &weight[o * n..(o + 1) * n];
        let drow = &mut dweight[o * n..(o + 1) * n];
        for i in 0..n {
            drow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
    dx
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| silu(v)).collect()
}

/// `dy * silu'(x)` elementwise.
pub fn silu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter().zip(dy).map(|(&v, &g)| g * silu_grad(v)).collect()
}

/// Largest group count `<= min(32, c / 4)` (at least 1) that divides `c`.
pub fn group_count(c: usize) -> usize {
    let mut g = (c / 4).clamp(1, 32);
    while !c.is_multiple_of(g) {
        g -= 1;
    }
    g
}

pub struct GroupNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    groups: usize,
}

const GN_EPS: f64 = 1e-6;

pub fn group_norm(x: &Tensor, groups: usize, gamma: &[f64], beta: &[f64]) -> (Tensor, GroupNormCache) {
    let per = x.c / groups * x.plane();
    let mut xhat = vec![0.0; x.data.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let src = &x.data[g * per..(g + 1) * per];
        let mean = src.iter().sum::<f64>() / per as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        let is = 1.0 / (var + GN_EPS).sqrt();
        for (d, s) in xhat[g * per..(g + 1) * per].iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv_std.push(is);
    }
    let mut out = Tensor::zeros(x.c, x.h, x.w);
    let p = x.plane();
    for c in 0..x.c {
        let (ga, be) = (gamma[c], beta[c]);
        for (o, xh) in out.channel_mut(c).iter_mut().zip(&xhat[c * p..(c + 1) * p]) {
            *o = ga * xh + be;
        }
    }
    (
        out,
        GroupNormCache {
            xhat,
            inv_std,
            groups,
        },
    )
}

pub fn group_norm_backward(
    cache: &GroupNormCache,
    gamma: &[f64],
    dy: &Tensor,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Tensor {
    let p = dy.plane();
    let per = dy.c / cache.groups * p;
    let mut dxhat = vec![0.0; dy.data.len()];
    for c in 0..dy.c {
        let g = dy.channel(c);
        let xh = &cache.xhat[c * p..(c + 1) * p];
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for ((d, &gv), &xv) in dxhat[c * p..(c + 1) * p].iter_mut().zip(g).zip(xh) {
            *d = gv * gamma[c];
            sg += gv;
            sgx += gv * xv;
        }
        dbeta[c] += sg;
        dgamma[c] += sgx;
    }
    let mut dx = Tensor::zeros(dy.c, dy.h, dy.w);
    let n = per as f64;
    for g in 0..cache.groups {
        let r = g * per..(g + 1) * per;
        let dxh = &dxhat[r.clone()];
        let xh = &cache.xhat[r.clone()];
        let s1: f64 = dxh.iter().sum();
        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
        let is = cache.inv_std[g];
        for ((d, &a), &b) in dx.data[r].iter_mut().zip(dxh).zip(xh) {
            *d = is * (a - s1 / n - b * s2 / n);
        }
    }
    dx
}

/// Two-fold decimation filter applied along each spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampler {
    /// `[1, 3, 3, 1] / 8` low-pass before decimation.
    Fir,
    /// Plain 2-tap average (strided pooling).
    Box,
}

impl Resampler {
    fn taps(self) -> (&'static [f64], isize) {
        match self {
            Resampler::Fir => (&[0.125, 0.375, 0.375, 0.125], 1),
            Resampler::Box => (&[0.5, 0.5], 0),
        }
    }

    /// `n -> n / 2` along a strided line: `out[i] = sum_j taps[j] x[2i + j - offset]`.
    fn down_line(self, src: &[f64], n: usize, stride: usize, dst: &mut [f64], dst_stride: usize) {
        let (taps, off) = self.taps();
        for i in 0..n / 2 {
            let mut acc = 0.0;
            for (j, t) in taps.iter().enumerate() {
                let idx = (2 * i) as isize + j as isize - off;
                if idx >= 0 && (idx as usize) < n {
                    acc += t * src[idx as usize * stride];
                }
            }
            dst[i * dst_stride] = acc;
        }
    }

    /// Adjoint of [`Resampler::down_line`]: `n / 2 -> n`, accumulating.
    fn down_line_adjoint(self, src: &[f64], n: usize, stride: usize, dst: &mut [f64], dst_stride: usize) {
        let (taps, off) = self.taps();
        for i in 0..n / 2 {
            let v = src[i * stride];
            for (j, t) in taps.iter().enumerate() {
                let idx = (2 * i) as isize + j as isize - off;
                if idx >= 0 && (idx as usize) < n {
                    dst[idx as usize * dst_stride] += t * v;
                }
            }
        }
    }

    /// Halves both spatial dimensions.
    pub fn down(self, x: &Tensor) -> Tensor {
        let (h, w) = (x.h, x.w);
        let mut out = Tensor::zeros(x.c, h / 2, w / 2);
        let mut tmp = vec![0.0; h * (w / 2)];
        for c in 0..x.c {
            let src = x.channel(c);
            for y in 0..h {
                self.down_line(&src[y * w..], w, 1, &mut tmp[y * (w / 2)..], 1);
            }
            let dst = out.channel_mut(c);
            for xx in 0..w / 2 {
                self.down_line(&tmp[xx..], h, w / 2, &mut dst[xx..], w / 2);
            }
        }
        out
    }

    /// Adjoint of [`Resampler::down`] mapping back to `h x w`.
    pub fn down_adjoint(self, dy: &Tensor, h: usize, w: usize) -> Tensor {
        let mut out = Tensor::zeros(dy.c, h, w);
        let mut tmp = vec![0.0; h * (w / 2)];
        for c in 0..dy.c {
            tmp.fill(0.0);
            let src = dy.channel(c);
            for xx in 0..w / 2 {
                self.down_line_adjoint(&src[xx..], h, w / 2, &mut tmp[xx..], w / 2);
            }
            let dst = out.channel_mut(c);
            for y in 0..h {
                self.down_line_adjoint(&tmp[y * (w / 2)..], w, 1, &mut dst[y * w..], 1);
            }
        }
        out
    }

    /// Doubles both spatial dimensions; constant maps stay constant away from
    /// the borders.
    pub fn up(self, x: &Tensor) -> Tensor {
        let mut out = self.down_adjoint(x, 2 * x.h, 2 * x.w);
        out.scale(4.0);
        out
    }

    pub fn up_backward(self, dy: &Tensor) -> Tensor {
        let mut out = self.down(dy);
        out.scale(4.0);
        out
    }
}
