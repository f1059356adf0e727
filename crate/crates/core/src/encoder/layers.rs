//! Layers with explicit forward and backward passes over H×W×C maps.

use crate::numerics::{RngStream, Scalar, Tensor};

/// Fan-in scaled uniform initialisation with bound `gain * sqrt(3 / fan_in)`.
fn init_uniform<T: Scalar>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut RngStream) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.uniform_range(-bound, bound)))
}

/// Square-kernel 2-d convolution, weight layout `[k, k, c_in, c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(k: usize, c_in: usize, c_out: usize, stride: usize, pad: usize, gain: f64, rng: &mut RngStream) -> Self {
        Self {
            weight: init_uniform(&[k, k, c_in, c_out], k * k * c_in, gain, rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn out_extent(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel()) / self.stride + 1
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        debug_assert_eq!(cin, self.c_in());
        let (k, cout, s, p) = (self.kernel(), self.c_out(), self.stride, self.pad as isize);
        let (ho, wo) = (self.out_extent(h), self.out_extent(w));
        let mut out = Tensor::zeros(&[ho, wo, cout]);
        let wt = self.weight.data();
        let xd = x.data();
        let od = out.data_mut();
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut od[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                o.copy_from_slice(self.bias.data());
                for ky in 0..k {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xin = &xd[(iy as usize * w + ix as usize) * cin..][..cin];
                        let wb = &wt[(ky * k + kx) * cin * cout..][..cin * cout];
                        for (ic, &v) in xin.iter().enumerate() {
                            if v == T::zero() {
                                continue;
                            }
                            let wr = &wb[ic * cout..(ic + 1) * cout];
                            for (acc, &wv) in o.iter_mut().zip(wr) {
                                *acc += v * wv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `want_input` is set.
    pub fn backward(&self, x: &Tensor<T>, gout: &Tensor<T>, grad: &mut Conv2d<T>, want_input: bool) -> Option<Tensor<T>> {
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, cout, s, p) = (self.kernel(), self.c_out(), self.stride, self.pad as isize);
        let (ho, wo) = (gout.shape()[0], gout.shape()[1]);
        let mut gin = if want_input { Some(Tensor::zeros(x.shape())) } else { None };
        let wt = self.weight.data();
        let xd = x.data();
        let gd = gout.data();
        let (gw, gb) = (&mut grad.weight, &mut grad.bias);
        let gwd = gw.data_mut();
        for oy in 0..ho {
            for ox in 0..wo {
                let g = &gd[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                for (b, &gv) in gb.data_mut().iter_mut().zip(g) {
                    *b += gv;
                }
                for ky in 0..k {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = (iy as usize * w + ix as usize) * cin;
                        let xin = &xd[base..base + cin];
                        let woff = (ky * k + kx) * cin * cout;
                        for (ic, &v) in xin.iter().enumerate() {
                            let gr = &mut gwd[woff + ic * cout..woff + (ic + 1) * cout];
                            if v != T::zero() {
                                for (a, &gv) in gr.iter_mut().zip(g) {
                                    *a += v * gv;
                                }
                            }
                        }
                        if let Some(gi) = gin.as_mut() {
                            let gi = &mut gi.data_mut()[base..base + cin];
                            for (ic, slot) in gi.iter_mut().enumerate() {
                                let wr = &wt[woff + ic * cout..woff + (ic + 1) * cout];
                                let mut acc = T::zero();
                                for (&wv, &gv) in wr.iter().zip(g) {
                                    acc += wv * gv;
                                }
                                *slot += acc;
                            }
                        }
                    }
                }
            }
        }
        gin
    }
}

/// `y = x W + b` with `W` of shape `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn new(n_in: usize, n_out: usize, gain: f64, rng: &mut RngStream) -> Self {
        Self {
            weight: init_uniform(&[n_in, n_out], n_in, gain, rng),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let n_out = self.n_out();
        let mut y = self.bias.data().to_vec();
        for (i, &v) in x.iter().enumerate() {
            if v == T::zero() {
                continue;
            }
            for (acc, &w) in y.iter_mut().zip(&self.weight.data()[i * n_out..(i + 1) * n_out]) {
                *acc += v * w;
            }
        }
        y
    }

    pub fn backward(&self, x: &[T], gy: &[T], grad: &mut Affine<T>) -> Vec<T> {
        let n_out = self.n_out();
        for (b, &g) in grad.bias.data_mut().iter_mut().zip(gy) {
            *b += g;
        }
        let gw = grad.weight.data_mut();
        let mut gx = vec![T::zero(); x.len()];
        for (i, &v) in x.iter().enumerate() {
            let wr = &self.weight.data()[i * n_out..(i + 1) * n_out];
            let gr = &mut gw[i * n_out..(i + 1) * n_out];
            let mut acc = T::zero();
            for k in 0..n_out {
                gr[k] += v * gy[k];
                acc += wr[k] * gy[k];
            }
            gx[i] = acc;
        }
        gx
    }
}

pub fn elu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v.exp() - T::one()
    }
}

/// Derivative of ELU expressed through its output.
pub fn elu_grad_from_output<T: Scalar>(y: T) -> T {
    if y > T::zero() {
        T::one()
    } else {
        y + T::one()
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Pulls a probability gradient back through softmax.
pub fn softmax_backward<T: Scalar>(probs: &[T], gp: &[T]) -> Vec<T> {
    let inner: T = probs.iter().zip(gp).map(|(&p, &g)| p * g).sum();
    probs.iter().zip(gp).map(|(&p, &g)| p * (g - inner)).collect()
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[ho, wo, c]);
    let od = out.data_mut();
    for y in 0..ho {
        for xx in 0..wo {
            let src = ((y / factor) * w + xx / factor) * c;
            od[(y * wo + xx) * c..(y * wo + xx + 1) * c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(g: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (ho, wo, c) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (h, w) = (ho / factor, wo / factor);
    let mut out = Tensor::zeros(&[h, w, c]);
    let od = out.data_mut();
    for y in 0..ho {
        for xx in 0..wo {
            let dst = ((y / factor) * w + xx / factor) * c;
            for ch in 0..c {
                od[dst + ch] += g.data()[(y * wo + xx) * c + ch];
            }
        }
    }
    out
}
