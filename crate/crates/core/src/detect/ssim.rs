//! Multi-scale SSIM with an analytic gradient in the second argument.
//!
//! Gaussian window of 11 taps (σ = 1.5) applied in valid mode, constants
//! `C1 = 0.01²`, `C2 = 0.03²` for unit data range, 2×2 average pooling
//! between scales. Per-scale terms are clamped at zero before the weighted
//! geometric mean; channels are averaged.

use super::DetectError;
use crate::numerics::{Scalar, Tensor};

pub const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Standard five-scale exponents.
pub const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (k, v) in g.iter_mut().enumerate() {
        *v = (-((k as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Exponents for the first `scales` scales, renormalised to sum to one.
pub fn scale_weights(scales: usize) -> Vec<f64> {
    let w = &SCALE_WEIGHTS[..scales];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Single-channel plane.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, v: vec![0.0; h * w] }
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

fn filt(p: &Plane, g: &[f64; WINDOW]) -> Plane {
    let (oh, ow) = (p.h - WINDOW + 1, p.w - WINDOW + 1);
    let mut tmp = Plane::zeros(p.h, ow);
    for y in 0..p.h {
        for x in 0..ow {
            tmp.v[y * ow + x] = (0..WINDOW).map(|k| g[k] * p.v[y * p.w + x + k]).sum();
        }
    }
    let mut out = Plane::zeros(oh, ow);
    for y in 0..oh {
        for x in 0..ow {
            out.v[y * ow + x] = (0..WINDOW).map(|k| g[k] * tmp.v[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filt`] back onto an `h × w` plane.
fn filt_t(q: &Plane, h: usize, w: usize, g: &[f64; WINDOW]) -> Plane {
    let ow = q.w;
    let mut tmp = Plane::zeros(h, ow);
    for y in 0..q.h {
        for x in 0..ow {
            let v = q.v[y * ow + x];
            for k in 0..WINDOW {
                tmp.v[(y + k) * ow + x] += g[k] * v;
            }
        }
    }
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..ow {
            let v = tmp.v[y * ow + x];
            for k in 0..WINDOW {
                out.v[y * w + x + k] += g[k] * v;
            }
        }
    }
    out
}

fn down(p: &Plane) -> Plane {
    let (h, w) = (p.h / 2, p.w / 2);
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = 2 * y * p.w + 2 * x;
            out.v[y * w + x] = 0.25 * (p.v[i] + p.v[i + 1] + p.v[i + p.w] + p.v[i + p.w + 1]);
        }
    }
    out
}

fn down_t(q: &Plane, h: usize, w: usize) -> Plane {
    let mut out = Plane::zeros(h, w);
    for y in 0..q.h {
        for x in 0..q.w {
            let g = 0.25 * q.v[y * q.w + x];
            let i = 2 * y * w + 2 * x;
            out.v[i] += g;
            out.v[i + 1] += g;
            out.v[i + w] += g;
            out.v[i + w + 1] += g;
        }
    }
    out
}

/// Scale term and, optionally, its gradient with respect to `y`.
fn scale_term(x: &Plane, y: &Plane, last: bool, want_grad: bool, g: &[f64; WINDOW]) -> (f64, Option<Plane>) {
    let mx = filt(x, g);
    let my = filt(y, g);
    let sxx = filt(&x.zip(x, |a, b| a * b), g).zip(&mx, |e, m| e - m * m);
    let syy = filt(&y.zip(y, |a, b| a * b), g).zip(&my, |e, m| e - m * m);
    let sxy = filt(&x.zip(y, |a, b| a * b), g);
    let n = mx.v.len();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let (mut ga, mut gb, mut gc) = if want_grad {
        (Plane::zeros(mx.h, mx.w), Plane::zeros(mx.h, mx.w), Plane::zeros(mx.h, mx.w))
    } else {
        (Plane::zeros(0, 0), Plane::zeros(0, 0), Plane::zeros(0, 0))
    };
    for p in 0..n {
        let (ux, uy) = (mx.v[p], my.v[p]);
        let cov = sxy.v[p] - ux * uy;
        let d = sxx.v[p] + syy.v[p] + C2;
        let cs = (2.0 * cov + C2) / d;
        let e = ux * ux + uy * uy + C1;
        let l = if last { (2.0 * ux * uy + C1) / e } else { 1.0 };
        total += l * cs;
        if want_grad {
            let df_dmy = if last { cs * (2.0 * ux - 2.0 * uy * l) / e } else { 0.0 };
            let df_dsyy = -l * cs / d;
            let df_dcov = l * 2.0 / d;
            ga.v[p] = inv_n * (df_dmy - 2.0 * uy * df_dsyy - ux * df_dcov);
            gb.v[p] = inv_n * df_dsyy;
            gc.v[p] = inv_n * df_dcov;
        }
    }
    let value = total * inv_n;
    if !want_grad {
        return (value, None);
    }
    let ta = filt_t(&ga, y.h, y.w, g);
    let tb = filt_t(&gb, y.h, y.w, g);
    let tc = filt_t(&gc, y.h, y.w, g);
    let mut grad = Plane::zeros(y.h, y.w);
    for i in 0..grad.v.len() {
        grad.v[i] = ta.v[i] + 2.0 * y.v[i] * tb.v[i] + x.v[i] * tc.v[i];
    }
    (value, Some(grad))
}

fn plane_msssim(x: &Plane, y: &Plane, weights: &[f64], want_grad: bool) -> (f64, Option<Plane>) {
    let g = window();
    let m = weights.len();
    let mut xs = vec![x.clone()];
    let mut ys = vec![y.clone()];
    for _ in 1..m {
        let (nx, ny) = (down(xs.last().unwrap()), down(ys.last().unwrap()));
        xs.push(nx);
        ys.push(ny);
    }
    let terms: Vec<(f64, Option<Plane>)> =
        (0..m).map(|j| scale_term(&xs[j], &ys[j], j == m - 1, want_grad, &g)).collect();
    let clamped: Vec<f64> = terms.iter().map(|(v, _)| v.max(0.0)).collect();
    let value: f64 = clamped.iter().zip(weights).map(|(v, w)| v.powf(*w)).product();
    if !want_grad {
        return (value, None);
    }
    let mut acc: Option<Plane> = None;
    for j in (0..m).rev() {
        let coef = if clamped[j] > 0.0 { value * weights[j] / clamped[j] } else { 0.0 };
        let gj = terms[j].1.as_ref().unwrap();
        let mut cur = match acc.take() {
            Some(a) => a,
            None => Plane::zeros(gj.h, gj.w),
        };
        for (c, &v) in cur.v.iter_mut().zip(&gj.v) {
            *c += coef * v;
        }
        acc = Some(if j > 0 { down_t(&cur, ys[j - 1].h, ys[j - 1].w) } else { cur });
    }
    (value, acc)
}

fn planes<T: Scalar>(t: &Tensor<T>) -> Vec<Plane> {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..c)
        .map(|ch| Plane {
            h,
            w,
            v: (0..h * w).map(|i| t.data()[i * c + ch].as_f64()).collect(),
        })
        .collect()
}

fn check<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, scales: usize) -> Result<(), DetectError> {
    if x.shape() != y.shape() || x.ndim() != 3 {
        return Err(DetectError::Shape(format!("MS-SSIM inputs {:?} and {:?}", x.shape(), y.shape())));
    }
    if scales == 0 || scales > SCALE_WEIGHTS.len() {
        return Err(DetectError::Config(format!("MS-SSIM scale count {scales} outside 1..=5")));
    }
    let need = WINDOW << (scales - 1);
    let side = x.shape()[0].min(x.shape()[1]);
    if side < need {
        return Err(DetectError::TooSmall { side, scales, need });
    }
    Ok(())
}

pub fn msssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, scales: usize) -> Result<f64, DetectError> {
    check(x, y, scales)?;
    let w = scale_weights(scales);
    let (px, py) = (planes(x), planes(y));
    let total: f64 = px.iter().zip(&py).map(|(a, b)| plane_msssim(a, b, &w, false).0).sum();
    Ok(total / px.len() as f64)
}

/// Value and gradient with respect to `y`.
pub fn msssim_grad<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, scales: usize) -> Result<(f64, Tensor<T>), DetectError> {
    check(x, y, scales)?;
    let w = scale_weights(scales);
    let (px, py) = (planes(x), planes(y));
    let c = px.len();
    let mut grad = y.zeros_like();
    let mut total = 0.0;
    for (ch, (a, b)) in px.iter().zip(&py).enumerate() {
        let (v, g) = plane_msssim(a, b, &w, true);
        total += v;
        for (i, gv) in g.unwrap().v.iter().enumerate() {
            grad.data_mut()[i * c + ch] = T::of(gv / c as f64);
        }
    }
    Ok((total / c as f64, grad))
}
