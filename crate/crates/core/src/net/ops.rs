//! Forward and reverse kernels for the denoiser's building blocks.
//!
//! Feature maps are channel-major `C x H x W`. Every layer reads its weights
//! from a flat parameter vector through a [`Slot`] and accumulates gradients
//! into a buffer of the same layout.

use crate::error::{Error, Result};

use super::params::Slot;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Channel-wise concatenation.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!((a.height, a.width), (b.height, b.width));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            channels: a.channels + b.channels,
            height: a.height,
            width: a.width,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`].
    pub fn split(self, first_channels: usize) -> (Tensor, Tensor) {
        let cut = first_channels * self.plane_len();
        let mut data = self.data;
        let rest = data.split_off(cut);
        (
            Tensor {
                channels: first_channels,
                height: self.height,
                width: self.width,
                data,
            },
            Tensor {
                channels: self.channels - first_channels,
                height: self.height,
                width: self.width,
                data: rest,
            },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major contiguous matrices, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides; the output does not alias the inputs.
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

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_forward(x: &Tensor) -> Tensor {
    x.same_shape(x.data.iter().map(|&v| silu(v)).collect())
}

pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    x.same_shape(x.data.iter().zip(&dy.data).map(|(&v, &g)| g * silu_grad(v)).collect())
}

/// Square convolution with zero padding `(k - 1) / 2`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Slot,
    pub bias: Slot,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn im2col(&self, x: &Tensor, ho: usize, wo: usize) -> Vec<f64> {
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        let (h, w) = (x.height as isize, x.width as isize);
        let mut cols = vec![0.0; self.cin * k * k * ho * wo];
        for ci in 0..self.cin {
            let plane = &x.data[ci * x.plane_len()..(ci + 1) * x.plane_len()];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oi in 0..ho {
                        let ii = (oi * s + ki) as isize - p;
                        if ii < 0 || ii >= h {
                            continue;
                        }
                        let src_row = &plane[ii as usize * x.width..(ii as usize + 1) * x.width];
                        for oj in 0..wo {
                            let jj = (oj * s + kj) as isize - p;
                            if jj >= 0 && jj < w {
                                dst[oi * wo + oj] = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Tensor {
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        let mut dx = Tensor::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oi in 0..ho {
                        let ii = (oi * s + ki) as isize - p;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..wo {
                            let jj = (oj * s + kj) as isize - p;
                            if jj >= 0 && jj < w as isize {
                                plane[ii as usize * w + jj as usize] += src[oi * wo + oj];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels, self.cin);
        let (ho, wo) = self.output_size(x.height, x.width);
        let kk = self.cin * self.kernel * self.kernel;
        let mut out = vec![0.0; self.cout * ho * wo];
        let weight = self.weight.of(params);
        if self.is_pointwise() {
            gemm(self.cout, kk, ho * wo, weight, false, &x.data, false, &mut out, 0.0);
        } else {
            let cols = self.im2col(x, ho, wo);
            gemm(self.cout, kk, ho * wo, weight, false, &cols, false, &mut out, 0.0);
        }
        let bias = self.bias.of(params);
        for (co, chunk) in out.chunks_mut(ho * wo).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias[co]);
        }
        Tensor {
            channels: self.cout,
            height: ho,
            width: wo,
            data: out,
        }
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, params: &[f64], x: &Tensor, dy: &Tensor, grads: &mut [f64]) -> Tensor {
        let (ho, wo) = (dy.height, dy.width);
        let kk = self.cin * self.kernel * self.kernel;
        let cols_owned;
        let cols: &[f64] = if self.is_pointwise() {
            &x.data
        } else {
            cols_owned = self.im2col(x, ho, wo);
            &cols_owned
        };
        gemm(
            self.cout,
            ho * wo,
            kk,
            &dy.data,
            false,
            cols,
            true,
            self.weight.of_mut(grads),
            1.0,
        );
        let gb = self.bias.of_mut(grads);
        for (co, chunk) in dy.data.chunks(ho * wo).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
        let mut dcols = vec![0.0; kk * ho * wo];
        gemm(kk, self.cout, ho * wo, self.weight.of(params), true, &dy.data, false, &mut dcols, 0.0);
        if self.is_pointwise() {
            Tensor {
                channels: self.cin,
                height: x.height,
                width: x.width,
                data: dcols,
            }
        } else {
            self.col2im(&dcols, x.height, x.width, ho, wo)
        }
    }
}

/// Fully connected layer on a vector.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Slot,
    pub bias: Slot,
    pub din: usize,
    pub dout: usize,
}

impl Dense {
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.of(params).to_vec();
        gemm(self.dout, self.din, 1, self.weight.of(params), false, x, false, &mut out, 1.0);
        out
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        gemm(self.dout, 1, self.din, dy, false, x, false, self.weight.of_mut(grads), 1.0);
        self.bias
            .of_mut(grads)
            .iter_mut()
            .zip(dy)
            .for_each(|(g, d)| *g += d);
        let mut dx = vec![0.0; self.din];
        gemm(self.din, self.dout, 1, self.weight.of(params), true, dy, false, &mut dx, 0.0);
        dx
    }
}

/// Per-channel FiLM parameters: output is `(1 + scale) * GN(x) + shift`.
#[derive(Debug, Clone)]
pub struct Film {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Slot,
    pub beta: Slot,
    pub channels: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// `gamma * xhat + beta`, kept only when FiLM follows.
    affine: Option<Vec<f64>>,
}

impl GroupNorm {
    pub fn forward(&self, params: &[f64], x: &Tensor, film: Option<&Film>) -> (Tensor, NormCache) {
        debug_assert_eq!(x.channels, self.channels);
        let hw = x.plane_len();
        let per_group = self.channels / self.groups * hw;
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = Vec::with_capacity(self.groups);
        for (src, dst) in x.data.chunks(per_group).zip(xhat.chunks_mut(per_group)) {
            let mean = src.iter().sum::<f64>() / per_group as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(r);
            dst.iter_mut().zip(src).for_each(|(d, s)| *d = (s - mean) * r);
        }
        let gamma = self.gamma.of(params);
        let beta = self.beta.of(params);
        let mut affine = vec![0.0; x.data.len()];
        for c in 0..self.channels {
            let range = c * hw..(c + 1) * hw;
            for (a, xh) in affine[range.clone()].iter_mut().zip(&xhat[range]) {
                *a = gamma[c] * xh + beta[c];
            }
        }
        let (out, affine) = match film {
            Some(f) => {
                let mut out = affine.clone();
                for c in 0..self.channels {
                    let (s, b) = (1.0 + f.scale[c], f.shift[c]);
                    out[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = s * *v + b);
                }
                (out, Some(affine))
            }
            None => (affine, None),
        };
        (
            x.same_shape(out),
            NormCache {
                xhat,
                inv_std,
                affine,
            },
        )
    }

    /// Returns the input gradient and, when FiLM was applied, the gradient
    /// with respect to its scale and shift.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &NormCache,
        film: Option<&Film>,
        dy: &Tensor,
        grads: &mut [f64],
    ) -> (Tensor, Option<Film>) {
        let hw = dy.plane_len();
        let mut d_affine = dy.data.clone();
        let film_grad = match (film, &cache.affine) {
            (Some(f), Some(affine)) => {
                let mut dscale = vec![0.0; self.channels];
                let mut dshift = vec![0.0; self.channels];
                for c in 0..self.channels {
                    let range = c * hw..(c + 1) * hw;
                    for (g, a) in dy.data[range.clone()].iter().zip(&affine[range.clone()]) {
                        dscale[c] += g * a;
                        dshift[c] += g;
                    }
                    let s = 1.0 + f.scale[c];
                    d_affine[range].iter_mut().for_each(|v| *v *= s);
                }
                Some(Film {
                    scale: dscale,
                    shift: dshift,
                })
            }
            _ => None,
        };
        let gamma = self.gamma.of(params);
        let mut dxhat = vec![0.0; dy.data.len()];
        {
            let mut dgamma = vec![0.0; self.channels];
            let mut dbeta = vec![0.0; self.channels];
            for c in 0..self.channels {
                let range = c * hw..(c + 1) * hw;
                for ((g, xh), dx) in d_affine[range.clone()]
                    .iter()
                    .zip(&cache.xhat[range.clone()])
                    .zip(&mut dxhat[range])
                {
                    dgamma[c] += g * xh;
                    dbeta[c] += g;
                    *dx = g * gamma[c];
                }
            }
            self.gamma
                .of_mut(grads)
                .iter_mut()
                .zip(&dgamma)
                .for_each(|(a, b)| *a += b);
            self.beta
                .of_mut(grads)
                .iter_mut()
                .zip(&dbeta)
                .for_each(|(a, b)| *a += b);
        }
        let per_group = self.channels / self.groups * hw;
        let mut dx = vec![0.0; dy.data.len()];
        for g in 0..self.groups {
            let range = g * per_group..(g + 1) * per_group;
            let dxh = &dxhat[range.clone()];
            let xh = &cache.xhat[range.clone()];
            let m1 = dxh.iter().sum::<f64>() / per_group as f64;
            let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / per_group as f64;
            let r = cache.inv_std[g];
            for ((d, a), b) in dx[range].iter_mut().zip(dxh).zip(xh) {
                *d = r * (a - m1 - b * m2);
            }
        }
        (dy.same_shape(dx), film_grad)
    }
}

/// Source taps `(i0, i1, w0, w1)` for half-pixel 2x bilinear upsampling
/// with edge clamping.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let t = src - i0 as f64;
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

pub fn upsample2x(x: &Tensor) -> Tensor {
    let (h, w) = (x.height, x.width);
    let rows = upsample_taps(h);
    let cols = upsample_taps(w);
    let mut out = Tensor::zeros(x.channels, 2 * h, 2 * w);
    for c in 0..x.channels {
        let src = &x.data[c * h * w..(c + 1) * h * w];
        let dst = &mut out.data[c * 4 * h * w..(c + 1) * 4 * h * w];
        for (oi, &(i0, i1, a0, a1)) in rows.iter().enumerate() {
            for (oj, &(j0, j1, b0, b1)) in cols.iter().enumerate() {
                dst[oi * 2 * w + oj] = a0 * (b0 * src[i0 * w + j0] + b1 * src[i0 * w + j1])
                    + a1 * (b0 * src[i1 * w + j0] + b1 * src[i1 * w + j1]);
            }
        }
    }
    out
}

pub fn upsample2x_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let rows = upsample_taps(h);
    let cols = upsample_taps(w);
    let mut dx = Tensor::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        let src = &dy.data[c * 4 * h * w..(c + 1) * 4 * h * w];
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for (oi, &(i0, i1, a0, a1)) in rows.iter().enumerate() {
            for (oj, &(j0, j1, b0, b1)) in cols.iter().enumerate() {
                let g = src[oi * 2 * w + oj];
                dst[i0 * w + j0] += a0 * b0 * g;
                dst[i0 * w + j1] += a0 * b1 * g;
                dst[i1 * w + j0] += a1 * b0 * g;
                dst[i1 * w + j1] += a1 * b1 * g;
            }
        }
    }
    dx
}

/// Pre-norm multi-head self-attention over spatial positions with a
/// residual connection.
#[derive(Debug, Clone)]
pub struct Attention {
    pub norm: GroupNorm,
    pub qkv: Conv,
    pub proj: Conv,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    norm: NormCache,
    normed: Tensor,
    qkv: Tensor,
    probs: Vec<Vec<f64>>,
    mixed: Tensor,
}

impl Attention {
    fn head_dim(&self) -> usize {
        self.norm.channels / self.heads
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, AttnCache) {
        let c = x.channels;
        let t = x.plane_len();
        let d = self.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let (normed, norm) = self.norm.forward(params, x, None);
        let qkv = self.qkv.forward(params, &normed);
        let mut mixed = Tensor::zeros(c, x.height, x.width);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = &qkv.data[h * d * t..(h + 1) * d * t];
            let k = &qkv.data[(c + h * d) * t..(c + (h + 1) * d) * t];
            let v = &qkv.data[(2 * c + h * d) * t..(2 * c + (h + 1) * d) * t];
            let mut p = vec![0.0; t * t];
            gemm(t, d, t, q, true, k, false, &mut p, 0.0);
            for row in p.chunks_mut(t) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v * scale - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            gemm(d, t, t, v, false, &p, true, &mut mixed.data[h * d * t..(h + 1) * d * t], 0.0);
            probs.push(p);
        }
        let mut out = self.proj.forward(params, &mixed);
        out.add_assign(x);
        (
            out,
            AttnCache {
                norm,
                normed,
                qkv,
                probs,
                mixed,
            },
        )
    }

    pub fn backward(&self, params: &[f64], cache: &AttnCache, dy: &Tensor, grads: &mut [f64]) -> Tensor {
        let c = dy.channels;
        let t = dy.plane_len();
        let d = self.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let dmixed = self.proj.backward(params, &cache.mixed, dy, grads);
        let mut dqkv = Tensor::zeros(3 * c, dy.height, dy.width);
        for h in 0..self.heads {
            let q = &cache.qkv.data[h * d * t..(h + 1) * d * t];
            let k = &cache.qkv.data[(c + h * d) * t..(c + (h + 1) * d) * t];
            let v = &cache.qkv.data[(2 * c + h * d) * t..(2 * c + (h + 1) * d) * t];
            let p = &cache.probs[h];
            let dout = &dmixed.data[h * d * t..(h + 1) * d * t];

            let mut dv = vec![0.0; d * t];
            gemm(d, t, t, dout, false, p, false, &mut dv, 0.0);
            let mut dp = vec![0.0; t * t];
            gemm(t, d, t, dout, true, v, false, &mut dp, 0.0);
            for (drow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (g, &pv) in drow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            let mut dq = vec![0.0; d * t];
            gemm(d, t, t, k, false, &dp, true, &mut dq, 0.0);
            let mut dk = vec![0.0; d * t];
            gemm(d, t, t, q, false, &dp, false, &mut dk, 0.0);

            dqkv.data[h * d * t..(h + 1) * d * t].copy_from_slice(&dq);
            dqkv.data[(c + h * d) * t..(c + (h + 1) * d) * t].copy_from_slice(&dk);
            dqkv.data[(2 * c + h * d) * t..(2 * c + (h + 1) * d) * t].copy_from_slice(&dv);
        }
        let dnormed = self.qkv.backward(params, &cache.normed, &dqkv, grads);
        let (mut dx, _) = self.norm.backward(params, &cache.norm, None, &dnormed, grads);
        dx.add_assign(dy);
        dx
    }
}

/// Group-normalize `x` (unit gain, zero bias) and apply `(1 + a) * GN(x) + b`.
pub fn film_modulate(x: &Tensor, groups: usize, a: &[f64], b: &[f64]) -> Result<Tensor> {
    let c = x.channels;
    if a.len() != c || b.len() != c {
        return Err(Error::Shape(format!(
            "FiLM vectors of length {} and {} for {c} channels",
            a.len(),
            b.len()
        )));
    }
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!("{groups} groups do not divide {c} channels")));
    }
    let params: Vec<f64> = std::iter::repeat_n(1.0, c).chain(std::iter::repeat_n(0.0, c)).collect();
    let norm = GroupNorm {
        gamma: Slot { offset: 0, len: c },
        beta: Slot { offset: c, len: c },
        channels: c,
        groups,
    };
    let film = Film {
        scale: a.to_vec(),
        shift: b.to_vec(),
    };
    Ok(norm.forward(&params, x, Some(&film)).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]] (2x3), b = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, 0.0);
        assert_eq!(c2, c);
    }

    #[test]
    fn upsample_preserves_constants_and_adjointness() {
        let x = Tensor::new(1, 2, 3, vec![2.0; 6]).unwrap();
        assert!(upsample2x(&x).data.iter().all(|&v| (v - 2.0).abs() < 1e-12));

        let x = Tensor::new(2, 3, 2, (0..12).map(|k| (k as f64).sin()).collect()).unwrap();
        let y = Tensor::new(2, 6, 4, (0..48).map(|k| (k as f64 * 0.7).cos()).collect()).unwrap();
        let lhs: f64 = upsample2x(&x).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&upsample2x_backward(&y).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn split_inverts_concat() {
        let a = Tensor::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(2, 2, 2, (0..8).map(f64::from).collect()).unwrap();
        let (a2, b2) = Tensor::concat(&a, &b).split(1);
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn film_modulate_is_affine_in_the_normalized_map() {
        let x = Tensor::new(2, 2, 2, vec![1.0, 5.0, -2.0, 0.5, 3.0, 3.5, 9.0, -1.0]).unwrap();
        let plain = film_modulate(&x, 2, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        for plane in plain.data.chunks(4) {
            let m = plane.iter().sum::<f64>() / 4.0;
            let v = plane.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-5);
        }
        let mod_ = film_modulate(&x, 2, &[1.0, 1.0], &[3.0, 3.0]).unwrap();
        for (y, p) in mod_.data.iter().zip(&plain.data) {
            assert!((y - (2.0 * p + 3.0)).abs() < 1e-12);
        }
        assert!(matches!(film_modulate(&x, 2, &[0.0], &[0.0, 0.0]), Err(Error::Shape(_))));
    }
}
