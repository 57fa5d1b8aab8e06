//! Layer kernels over flat parameter buffers.
//!
//! Models own one `Vec<f64>` of parameters; each layer records where its
//! weights and bias live in that buffer. Forward and backward passes take
//! the buffer (or the matching gradient buffer) as a slice.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor3;

/// Square convolution with stride 1 and zero "same" padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl Conv {
    /// Lays the layer out at `offset`, returning it and the next free offset.
    pub fn at(offset: usize, in_channels: usize, out_channels: usize, kernel: usize) -> (Self, usize) {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let weight_len = out_channels * in_channels * kernel * kernel;
        let conv = Conv {
            in_channels,
            out_channels,
            kernel,
            weight_offset: offset,
            bias_offset: offset + weight_len,
        };
        (conv, offset + weight_len + out_channels)
    }

    pub fn param_len(&self) -> usize {
        self.out_channels * (self.in_channels * self.kernel * self.kernel + 1)
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.bias_offset + self.out_channels
    }

    #[inline]
    fn weight_index(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        self.weight_offset + ((oc * self.in_channels + ic) * self.kernel + ky) * self.kernel + kx
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng>(&self, params: &mut [f64], gain: f64, rng: &mut R) {
        let fan_in = (self.in_channels * self.kernel * self.kernel) as f64;
        let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("finite std");
        for p in &mut params[self.weight_offset..self.bias_offset] {
            *p = normal.sample(rng);
        }
        for b in &mut params[self.bias_offset..self.bias_offset + self.out_channels] {
            *b = 0.0;
        }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.channels(), self.in_channels);
        let (h, w) = (x.height(), x.width());
        let pad = (self.kernel / 2) as isize;
        let mut out = Tensor3::zeros(self.out_channels, h, w);
        for oc in 0..self.out_channels {
            let bias = params[self.bias_offset + oc];
            let dst = out.plane_mut(oc);
            dst.iter_mut().for_each(|v| *v = bias);
            for ic in 0..self.in_channels {
                let src = x.plane(ic);
                for ky in 0..self.kernel {
                    let dy = ky as isize - pad;
                    for kx in 0..self.kernel {
                        let dx = kx as isize - pad;
                        let wv = params[self.weight_index(oc, ic, ky, kx)];
                        let (x0, x1) = valid_span(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        for row in 0..h {
                            let sy = row as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let s = &src[sy as usize * w..(sy as usize + 1) * w];
                            let d = &mut dst[row * w..(row + 1) * w];
                            let s = &s[(x0 as isize + dx) as usize..(x1 as isize + dx) as usize];
                            for (dv, sv) in d[x0..x1].iter_mut().zip(s) {
                                *dv += wv * sv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Tensor3,
        grad_out: &Tensor3,
        grads: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Tensor3> {
        let (h, w) = (x.height(), x.width());
        let pad = (self.kernel / 2) as isize;
        let mut grad_in = need_input_grad.then(|| Tensor3::zeros(self.in_channels, h, w));
        for oc in 0..self.out_channels {
            let g = grad_out.plane(oc);
            grads[self.bias_offset + oc] += g.iter().sum::<f64>();
            for ic in 0..self.in_channels {
                let src = x.plane(ic);
                for ky in 0..self.kernel {
                    let dy = ky as isize - pad;
                    for kx in 0..self.kernel {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_span(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let widx = self.weight_index(oc, ic, ky, kx);
                        let wv = params[widx];
                        let mut acc = 0.0;
                        for row in 0..h {
                            let sy = row as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let sy = sy as usize;
                            let lo = (x0 as isize + dx) as usize;
                            let hi = (x1 as isize + dx) as usize;
                            let gr = &g[row * w + x0..row * w + x1];
                            let s = &src[sy * w + lo..sy * w + hi];
                            acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(gi) = grad_in.as_mut() {
                                let d = &mut gi.plane_mut(ic)[sy * w + lo..sy * w + hi];
                                for (dv, gv) in d.iter_mut().zip(gr) {
                                    *dv += wv * gv;
                                }
                            }
                        }
                        grads[widx] += acc;
                    }
                }
            }
        }
        grad_in
    }
}

/// Output columns `[x0, x1)` whose source column `x + dx` is in bounds.
#[inline]
fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
    (x0, x1)
}

pub fn relu_in_place(x: &mut Tensor3) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` by the positive entries of the ReLU output.
pub fn relu_backward(output: &Tensor3, grad: &mut Tensor3) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Pointwise nonlinearity. Both variants are non-negative, and both
/// derivatives can be recovered from the output alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Softplus,
}

impl Activation {
    pub fn apply_in_place(self, x: &mut Tensor3) {
        match self {
            Activation::Relu => relu_in_place(x),
            Activation::Softplus => x.data_mut().iter_mut().for_each(|v| *v = softplus(*v)),
        }
    }

    /// Multiplies `grad` by the derivative, given the activation output.
    pub fn backward(self, output: &Tensor3, grad: &mut Tensor3) {
        match self {
            Activation::Relu => relu_backward(output, grad),
            Activation::Softplus => {
                // softplus'(x) = sigmoid(x) = 1 - exp(-softplus(x))
                for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
                    *g *= -(-o).exp_m1();
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Max,
    Avg,
}

/// 2×2 pooling with stride 2. For max pooling the flat source index of
/// each winner is returned; ties go to the first entry in raster order.
pub fn pool2(kind: Pool, x: &Tensor3) -> (Tensor3, Vec<u32>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(c, oh, ow);
    let mut argmax = Vec::new();
    if kind == Pool::Max {
        argmax.reserve(c * oh * ow);
    }
    for ch in 0..c {
        let src = x.plane(ch);
        let base = ch * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let idx = [
                    (2 * i) * w + 2 * j,
                    (2 * i) * w + 2 * j + 1,
                    (2 * i + 1) * w + 2 * j,
                    (2 * i + 1) * w + 2 * j + 1,
                ];
                let v = match kind {
                    Pool::Avg => idx.iter().map(|&k| src[k]).sum::<f64>() * 0.25,
                    Pool::Max => {
                        let mut best = idx[0];
                        for &k in &idx[1..] {
                            if src[k] > src[best] {
                                best = k;
                            }
                        }
                        argmax.push((base + best) as u32);
                        src[best]
                    }
                };
                out.set(ch, i, j, v);
            }
        }
    }
    (out, argmax)
}

pub fn pool2_backward(kind: Pool, input_shape: (usize, usize, usize), argmax: &[u32], grad_out: &Tensor3) -> Tensor3 {
    let (c, h, w) = input_shape;
    let mut grad_in = Tensor3::zeros(c, h, w);
    match kind {
        Pool::Max => {
            let gi = grad_in.data_mut();
            for (g, &k) in grad_out.data().iter().zip(argmax) {
                gi[k as usize] += g;
            }
        }
        Pool::Avg => {
            for ch in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        let g = grad_out.get(ch, i, j) * 0.25;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            grad_in.set(ch, 2 * i + di, 2 * j + dj, g);
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor3) -> Tensor3 {
    let (c, h, w) = x.shape();
    Tensor3::from_fn(c, 2 * h, 2 * w, |ch, i, j| x.get(ch, i / 2, j / 2))
}

pub fn upsample2_backward(grad_out: &Tensor3) -> Tensor3 {
    let (c, h, w) = grad_out.shape();
    let mut g = Tensor3::zeros(c, h / 2, w / 2);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = g.get(ch, i / 2, j / 2) + grad_out.get(ch, i, j);
                g.set(ch, i / 2, j / 2, v);
            }
        }
    }
    g
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat(a: &Tensor3, b: &Tensor3) -> Tensor3 {
    debug_assert_eq!((a.height(), a.width()), (b.height(), b.width()));
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor3::from_vec(a.channels() + b.channels(), a.height(), a.width(), data).expect("shapes agree")
}

pub fn split_channels(x: &Tensor3, first: usize) -> (Tensor3, Tensor3) {
    let (c, h, w) = x.shape();
    let n = first * h * w;
    let a = Tensor3::from_vec(first, h, w, x.data()[..n].to_vec()).expect("shape");
    let b = Tensor3::from_vec(c - first, h, w, x.data()[n..].to_vec()).expect("shape");
    (a, b)
}

pub fn add_into(dst: &mut Tensor3, src: &Tensor3) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit against target `t ∈ [0, 1]`.
#[inline]
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    softplus(logit) - target * logit
}
