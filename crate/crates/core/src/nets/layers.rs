//! Differentiable layer primitives: convolution, instance norm, leaky ReLU,
//! dropout, max-pooling, nearest-neighbour upsampling, channel softmax.
//!
//! Forward passes are pure functions of (params, input, RNG stream); each
//! returns whatever cache its backward pass needs. Backward passes produce
//! input gradients and parameter gradients explicitly — no hidden state.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// N-d convolution (2 or 3 spatial axes), uniform kernel/stride per axis with
/// possibly asymmetric padding.
#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub weight: Tensor<T>, // [out_c, in_c, k, k(, k)]
    pub bias: Tensor<T>,   // [out_c]
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

/// Convolution output size along one axis.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad_lo: usize, pad_hi: usize) -> usize {
    (n + pad_lo + pad_hi).saturating_sub(k) / stride + 1
}

impl<T: Scalar> Conv<T> {
    /// He-style init scaled for leaky ReLU with the given negative slope.
    pub fn init(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad_lo: usize,
        pad_hi: usize,
        rank: usize,
        slope: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let mut wshape = vec![out_c, in_c];
        wshape.extend(std::iter::repeat(kernel).take(rank));
        let fan_in = (in_c * kernel.pow(rank as u32)) as f64;
        let std = (2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
        let data = (0..wshape.iter().product())
            .map(|_| T::from_f64(std * crate::rng::normal_f64(rng)))
            .collect();
        Conv {
            weight: Tensor::from_vec(&wshape, data).expect("sized"),
            bias: Tensor::zeros(&[out_c]),
            stride,
            pad_lo,
            pad_hi,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn spatial_rank(&self) -> usize {
        self.weight.rank() - 2
    }

    pub fn out_dims(&self, in_dims: &[usize]) -> Vec<usize> {
        in_dims
            .iter()
            .map(|&n| conv_out_dim(n, self.kernel(), self.stride, self.pad_lo, self.pad_hi))
            .collect()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let rank = self.spatial_rank();
        if x.rank() != rank + 1 {
            return Err(Error::Shape(format!(
                "conv expects rank {} input, got {:?}",
                rank + 1,
                x.shape()
            )));
        }
        if x.shape()[0] != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                x.shape()[0]
            )));
        }
        match rank {
            2 => Ok(self.forward2d(x)),
            3 => Ok(self.forward3d(x)),
            r => Err(Error::Shape(format!("unsupported spatial rank {r}"))),
        }
    }

    fn forward2d(&self, x: &Tensor<T>) -> Tensor<T> {
        let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = self.kernel();
        let s = self.stride;
        let (pl, _) = (self.pad_lo as isize, self.pad_hi);
        let oh = conv_out_dim(h, k, s, self.pad_lo, self.pad_hi);
        let ow = conv_out_dim(w, k, s, self.pad_lo, self.pad_hi);
        let co = self.out_channels();
        let mut out = Tensor::zeros(&[co, oh, ow]);
        let xd = x.data();
        let wd = self.weight.data();
        let bd = self.bias.data();
        let od = out.data_mut();
        for oc in 0..co {
            let wbase_oc = oc * ci * k * k;
            for oy in 0..oh {
                let iy0 = (oy * s) as isize - pl;
                let ky_lo = (-iy0).max(0) as usize;
                let ky_hi = k.min((h as isize - iy0).max(0) as usize);
                for ox in 0..ow {
                    let ix0 = (ox * s) as isize - pl;
                    let kx_lo = (-ix0).max(0) as usize;
                    let kx_hi = k.min((w as isize - ix0).max(0) as usize);
                    let mut acc = bd[oc];
                    for ic in 0..ci {
                        let xbase_c = ic * h * w;
                        let wbase = wbase_oc + ic * k * k;
                        for ky in ky_lo..ky_hi {
                            let y = (iy0 + ky as isize) as usize;
                            let xrow = xbase_c + y * w;
                            let wrow = wbase + ky * k;
                            for kx in kx_lo..kx_hi {
                                let xpos = (ix0 + kx as isize) as usize;
                                acc = acc + xd[xrow + xpos] * wd[wrow + kx];
                            }
                        }
                    }
                    od[oc * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn forward3d(&self, x: &Tensor<T>) -> Tensor<T> {
        let (ci, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let k = self.kernel();
        let s = self.stride;
        let pl = self.pad_lo as isize;
        let od_ = conv_out_dim(d, k, s, self.pad_lo, self.pad_hi);
        let oh = conv_out_dim(h, k, s, self.pad_lo, self.pad_hi);
        let ow = conv_out_dim(w, k, s, self.pad_lo, self.pad_hi);
        let co = self.out_channels();
        let mut out = Tensor::zeros(&[co, od_, oh, ow]);
        let xd = x.data();
        let wd = self.weight.data();
        let bd = self.bias.data();
        let odata = out.data_mut();
        for oc in 0..co {
            let wbase_oc = oc * ci * k * k * k;
            for oz in 0..od_ {
                let iz0 = (oz * s) as isize - pl;
                let kz_lo = (-iz0).max(0) as usize;
                let kz_hi = k.min((d as isize - iz0).max(0) as usize);
                for oy in 0..oh {
                    let iy0 = (oy * s) as isize - pl;
                    let ky_lo = (-iy0).max(0) as usize;
                    let ky_hi = k.min((h as isize - iy0).max(0) as usize);
                    for ox in 0..ow {
                        let ix0 = (ox * s) as isize - pl;
                        let kx_lo = (-ix0).max(0) as usize;
                        let kx_hi = k.min((w as isize - ix0).max(0) as usize);
                        let mut acc = bd[oc];
                        for ic in 0..ci {
                            let xbase_c = ic * d * h * w;
                            let wbase_c = wbase_oc + ic * k * k * k;
                            for kz in kz_lo..kz_hi {
                                let z = (iz0 + kz as isize) as usize;
                                for ky in ky_lo..ky_hi {
                                    let y = (iy0 + ky as isize) as usize;
                                    let xrow = xbase_c + (z * h + y) * w;
                                    let wrow = wbase_c + (kz * k + ky) * k;
                                    for kx in kx_lo..kx_hi {
                                        let xpos = (ix0 + kx as isize) as usize;
                                        acc = acc + xd[xrow + xpos] * wd[wrow + kx];
                                    }
                                }
                            }
                        }
                        odata[((oc * od_ + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    /// Input, weight and bias gradients given upstream `gy`.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        gy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let rank = self.spatial_rank();
        match rank {
            2 => self.backward2d(x, gy),
            3 => self.backward3d(x, gy),
            _ => unreachable!("rank validated at forward"),
        }
    }

    fn backward2d(&self, x: &Tensor<T>, gy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, oh, ow) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
        let k = self.kernel();
        let s = self.stride;
        let pl = self.pad_lo as isize;
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(self.weight.shape());
        let mut gb = Tensor::zeros(&[co]);
        let xd = x.data();
        let wd = self.weight.data();
        let gyd = gy.data();
        let gxd = gx.data_mut();
        let gwd = gw.data_mut();
        let gbd = gb.data_mut();
        for oc in 0..co {
            let wbase_oc = oc * ci * k * k;
            for oy in 0..oh {
                let iy0 = (oy * s) as isize - pl;
                let ky_lo = (-iy0).max(0) as usize;
                let ky_hi = k.min((h as isize - iy0).max(0) as usize);
                for ox in 0..ow {
                    let ix0 = (ox * s) as isize - pl;
                    let kx_lo = (-ix0).max(0) as usize;
                    let kx_hi = k.min((w as isize - ix0).max(0) as usize);
                    let g = gyd[oc * oh * ow + oy * ow + ox];
                    gbd[oc] = gbd[oc] + g;
                    for ic in 0..ci {
                        let xbase_c = ic * h * w;
                        let wbase = wbase_oc + ic * k * k;
                        for ky in ky_lo..ky_hi {
                            let y = (iy0 + ky as isize) as usize;
                            let xrow = xbase_c + y * w;
                            let wrow = wbase + ky * k;
                            for kx in kx_lo..kx_hi {
                                let xpos = (ix0 + kx as isize) as usize;
                                gwd[wrow + kx] = gwd[wrow + kx] + g * xd[xrow + xpos];
                                gxd[xrow + xpos] = gxd[xrow + xpos] + g * wd[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }

    fn backward3d(&self, x: &Tensor<T>, gy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (ci, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, od_, oh, ow) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
        let k = self.kernel();
        let s = self.stride;
        let pl = self.pad_lo as isize;
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(self.weight.shape());
        let mut gb = Tensor::zeros(&[co]);
        let xd = x.data();
        let wd = self.weight.data();
        let gyd = gy.data();
        let gxd = gx.data_mut();
        let gwd = gw.data_mut();
        let gbd = gb.data_mut();
        for oc in 0..co {
            let wbase_oc = oc * ci * k * k * k;
            for oz in 0..od_ {
                let iz0 = (oz * s) as isize - pl;
                let kz_lo = (-iz0).max(0) as usize;
                let kz_hi = k.min((d as isize - iz0).max(0) as usize);
                for oy in 0..oh {
                    let iy0 = (oy * s) as isize - pl;
                    let ky_lo = (-iy0).max(0) as usize;
                    let ky_hi = k.min((h as isize - iy0).max(0) as usize);
                    for ox in 0..ow {
                        let ix0 = (ox * s) as isize - pl;
                        let kx_lo = (-ix0).max(0) as usize;
                        let kx_hi = k.min((w as isize - ix0).max(0) as usize);
                        let g = gyd[((oc * od_ + oz) * oh + oy) * ow + ox];
                        gbd[oc] = gbd[oc] + g;
                        for ic in 0..ci {
                            let xbase_c = ic * d * h * w;
                            let wbase_c = wbase_oc + ic * k * k * k;
                            for kz in kz_lo..kz_hi {
                                let z = (iz0 + kz as isize) as usize;
                                for ky in ky_lo..ky_hi {
                                    let y = (iy0 + ky as isize) as usize;
                                    let xrow = xbase_c + (z * h + y) * w;
                                    let wrow = wbase_c + (kz * k + ky) * k;
                                    for kx in kx_lo..kx_hi {
                                        let xpos = (ix0 + kx as isize) as usize;
                                        gwd[wrow + kx] = gwd[wrow + kx] + g * xd[xrow + xpos];
                                        gxd[xrow + xpos] = gxd[xrow + xpos] + g * wd[wrow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

/// Instance normalization with learnable affine parameters: per-channel
/// statistics over the spatial axes, epsilon 1e-5.
#[derive(Debug, Clone)]
pub struct InstanceNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct InstanceNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

impl<T: Scalar> InstanceNorm<T> {
    pub fn init(channels: usize) -> Self {
        InstanceNorm {
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, InstanceNormCache<T>) {
        let c = x.shape()[0];
        let spatial: usize = x.shape()[1..].iter().product();
        let eps = T::from_f64(INSTANCE_NORM_EPS);
        let n = T::from_f64(spatial as f64);
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(c);
        let xd = x.data();
        let xh = xhat.data_mut();
        let od = out.data_mut();
        for ch in 0..c {
            let base = ch * spatial;
            let mut sum = T::zero();
            for i in 0..spatial {
                sum = sum + xd[base + i];
            }
            let mean = sum / n;
            let mut ss = T::zero();
            for i in 0..spatial {
                let d = xd[base + i] - mean;
                ss = ss + d * d;
            }
            let var = ss / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let g = self.gamma.data()[ch];
            let b = self.beta.data()[ch];
            for i in 0..spatial {
                let h = (xd[base + i] - mean) * inv;
                xh[base + i] = h;
                od[base + i] = g * h + b;
            }
        }
        (out, InstanceNormCache { xhat, inv_std })
    }

    /// Returns (gx, ggamma, gbeta).
    pub fn backward(
        &self,
        cache: &InstanceNormCache<T>,
        gy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let c = gy.shape()[0];
        let spatial: usize = gy.shape()[1..].iter().product();
        let n = T::from_f64(spatial as f64);
        let mut gx = Tensor::zeros(gy.shape());
        let mut ggamma = Tensor::zeros(&[c]);
        let mut gbeta = Tensor::zeros(&[c]);
        let gyd = gy.data();
        let xh = cache.xhat.data();
        let gxd = gx.data_mut();
        for ch in 0..c {
            let base = ch * spatial;
            let g = self.gamma.data()[ch];
            let inv = cache.inv_std[ch];
            let mut sum_gy = T::zero();
            let mut sum_gy_xhat = T::zero();
            for i in 0..spatial {
                sum_gy = sum_gy + gyd[base + i];
                sum_gy_xhat = sum_gy_xhat + gyd[base + i] * xh[base + i];
            }
            ggamma.data_mut()[ch] = sum_gy_xhat;
            gbeta.data_mut()[ch] = sum_gy;
            let mean_g = g * sum_gy / n;
            let mean_gx = g * sum_gy_xhat / n;
            for i in 0..spatial {
                let gi = g * gyd[base + i];
                gxd[base + i] = inv * (gi - mean_g - xh[base + i] * mean_gx);
            }
        }
        (gx, ggamma, gbeta)
    }
}

/// Leaky ReLU with configurable negative slope.
pub fn leaky_relu_forward<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { slope * v })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { slope * g })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Inverted dropout: kept activations are scaled by `1/(1-p)` so eval-time
/// forwards need no correction.
pub fn dropout_forward<T: Scalar>(
    x: &Tensor<T>,
    p: f64,
    rng: &mut ChaCha12Rng,
) -> (Tensor<T>, Vec<bool>) {
    debug_assert!((0.0..1.0).contains(&p));
    if p == 0.0 {
        return (x.clone(), vec![true; x.len()]);
    }
    let scale = T::from_f64(1.0 / (1.0 - p));
    let mut mask = Vec::with_capacity(x.len());
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let keep = rng.random::<f64>() >= p;
            mask.push(keep);
            if keep {
                v * scale
            } else {
                T::zero()
            }
        })
        .collect();
    (Tensor::from_vec(x.shape(), data).expect("same shape"), mask)
}

pub fn dropout_backward<T: Scalar>(gy: &Tensor<T>, mask: &[bool], p: f64) -> Tensor<T> {
    let scale = T::from_f64(1.0 / (1.0 - p));
    let data = gy
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &keep)| if keep { g * scale } else { T::zero() })
        .collect();
    Tensor::from_vec(gy.shape(), data).expect("same shape")
}

/// Max-pool with kernel and stride 2; caches argmax positions for backward.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let c = x.shape()[0];
    let in_spatial = &x.shape()[1..];
    debug_assert!(in_spatial.iter().all(|&d| d % 2 == 0));
    let out_spatial: Vec<usize> = in_spatial.iter().map(|&d| d / 2).collect();
    let mut shape = vec![c];
    shape.extend_from_slice(&out_spatial);
    let mut out = Tensor::zeros(&shape);
    let mut argmax = vec![0u32; out.len()];
    let xd = x.data();
    let od = out.data_mut();
    match in_spatial.len() {
        2 => {
            let (h, w) = (in_spatial[0], in_spatial[1]);
            let (oh, ow) = (h / 2, w / 2);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_idx = (ch * h + 2 * oy) * w + 2 * ox;
                        let mut best = xd[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                        let o = (ch * oh + oy) * ow + ox;
                        od[o] = best;
                        argmax[o] = best_idx as u32;
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (in_spatial[0], in_spatial[1], in_spatial[2]);
            let (od_, oh, ow) = (d / 2, h / 2, w / 2);
            for ch in 0..c {
                for oz in 0..od_ {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best_idx =
                                ((ch * d + 2 * oz) * h + 2 * oy) * w + 2 * ox;
                            let mut best = xd[best_idx];
                            for dz in 0..2 {
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        if dz == 0 && dy == 0 && dx == 0 {
                                            continue;
                                        }
                                        let idx = ((ch * d + 2 * oz + dz) * h + 2 * oy + dy) * w
                                            + 2 * ox
                                            + dx;
                                        if xd[idx] > best {
                                            best = xd[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                            }
                            let o = ((ch * od_ + oz) * oh + oy) * ow + ox;
                            od[o] = best;
                            argmax[o] = best_idx as u32;
                        }
                    }
                }
            }
        }
        r => panic!("maxpool2: unsupported rank {r}"),
    }
    (out, argmax)
}

pub fn maxpool2_backward<T: Scalar>(
    in_shape: &[usize],
    argmax: &[u32],
    gy: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(in_shape);
    let gxd = gx.data_mut();
    for (g, &idx) in gy.data().iter().zip(argmax) {
        gxd[idx as usize] = gxd[idx as usize] + *g;
    }
    gx
}

/// Nearest-neighbour upsampling by a factor of 2 on every spatial axis.
pub fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.shape()[0];
    let in_spatial = &x.shape()[1..];
    let out_spatial: Vec<usize> = in_spatial.iter().map(|&d| d * 2).collect();
    let mut shape = vec![c];
    shape.extend_from_slice(&out_spatial);
    let mut out = Tensor::zeros(&shape);
    let xd = x.data();
    let od = out.data_mut();
    match in_spatial.len() {
        2 => {
            let (h, w) = (in_spatial[0], in_spatial[1]);
            let (oh, ow) = (h * 2, w * 2);
            for ch in 0..c {
                for y in 0..oh {
                    for x_ in 0..ow {
                        od[(ch * oh + y) * ow + x_] = xd[(ch * h + y / 2) * w + x_ / 2];
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (in_spatial[0], in_spatial[1], in_spatial[2]);
            let (od_, oh, ow) = (d * 2, h * 2, w * 2);
            for ch in 0..c {
                for z in 0..od_ {
                    for y in 0..oh {
                        for x_ in 0..ow {
                            od[((ch * od_ + z) * oh + y) * ow + x_] =
                                xd[((ch * d + z / 2) * h + y / 2) * w + x_ / 2];
                        }
                    }
                }
            }
        }
        r => panic!("upsample2: unsupported rank {r}"),
    }
    out
}

/// Gradient of nearest-neighbour 2x upsampling: sum over each child cell.
pub fn upsample2_backward<T: Scalar>(gy: &Tensor<T>) -> Tensor<T> {
    let c = gy.shape()[0];
    let out_spatial = &gy.shape()[1..];
    let in_spatial: Vec<usize> = out_spatial.iter().map(|&d| d / 2).collect();
    let mut shape = vec![c];
    shape.extend_from_slice(&in_spatial);
    let mut gx = Tensor::zeros(&shape);
    let gyd = gy.data();
    let gxd = gx.data_mut();
    match in_spatial.len() {
        2 => {
            let (h, w) = (in_spatial[0], in_spatial[1]);
            let (oh, ow) = (h * 2, w * 2);
            for ch in 0..c {
                for y in 0..oh {
                    for x_ in 0..ow {
                        let i = (ch * h + y / 2) * w + x_ / 2;
                        gxd[i] = gxd[i] + gyd[(ch * oh + y) * ow + x_];
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (in_spatial[0], in_spatial[1], in_spatial[2]);
            let (od_, oh, ow) = (d * 2, h * 2, w * 2);
            for ch in 0..c {
                for z in 0..od_ {
                    for y in 0..oh {
                        for x_ in 0..ow {
                            let i = ((ch * d + z / 2) * h + y / 2) * w + x_ / 2;
                            gxd[i] = gxd[i] + gyd[((ch * od_ + z) * oh + y) * ow + x_];
                        }
                    }
                }
            }
        }
        r => panic!("upsample2: unsupported rank {r}"),
    }
    gx
}

/// Per-voxel softmax over the channel axis (numerically shifted by the max).
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.shape()[0];
    let spatial: usize = logits.shape()[1..].iter().product();
    let mut out = Tensor::zeros(logits.shape());
    let xd = logits.data();
    let od = out.data_mut();
    for i in 0..spatial {
        let mut maxv = xd[i];
        for ch in 1..c {
            let v = xd[ch * spatial + i];
            if v > maxv {
                maxv = v;
            }
        }
        let mut sum = T::zero();
        for ch in 0..c {
            let e = (xd[ch * spatial + i] - maxv).exp();
            od[ch * spatial + i] = e;
            sum = sum + e;
        }
        for ch in 0..c {
            od[ch * spatial + i] = od[ch * spatial + i] / sum;
        }
    }
    out
}

/// Backward through channel softmax given `probs` (the forward output).
pub fn softmax_channels_backward<T: Scalar>(probs: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let c = probs.shape()[0];
    let spatial: usize = probs.shape()[1..].iter().product();
    let mut gx = Tensor::zeros(probs.shape());
    let pd = probs.data();
    let gyd = gy.data();
    let gxd = gx.data_mut();
    for i in 0..spatial {
        let mut dot = T::zero();
        for ch in 0..c {
            dot = dot + pd[ch * spatial + i] * gyd[ch * spatial + i];
        }
        for ch in 0..c {
            let idx = ch * spatial + i;
            gxd[idx] = pd[idx] * (gyd[idx] - dot);
        }
    }
    gx
}
