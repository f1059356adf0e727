use crate::imaging::{dims, Image};
use crate::numerics::RngStream;

use super::Jitter;

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn greyscale(img: &mut Image) {
    let (_, _, c) = dims(img);
    if c != 3 {
        return;
    }
    for p in img.data_mut().chunks_exact_mut(3) {
        let l = luma(p[0], p[1], p[2]);
        p.fill(l);
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn factor(rng: &mut RngStream, strength: f64) -> f32 {
    rng.uniform_range((1.0 - strength).max(0.0), 1.0 + strength) as f32
}

/// Brightness, contrast, saturation and hue jitter, in that order.
pub fn colour_jitter(img: &mut Image, jitter: &Jitter, rng: &mut RngStream) {
    let (_, _, c) = dims(img);
    if jitter.brightness > 0.0 {
        let b = factor(rng, jitter.brightness);
        img.data_mut().iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    }
    if jitter.contrast > 0.0 {
        let k = factor(rng, jitter.contrast);
        let mean = if c == 3 {
            img.data().chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).sum::<f32>() / (img.len() / 3) as f32
        } else {
            img.sum() / img.len() as f32
        };
        img.data_mut()
            .iter_mut()
            .for_each(|v| *v = ((*v - mean) * k + mean).clamp(0.0, 1.0));
    }
    if c != 3 {
        return;
    }
    if jitter.saturation > 0.0 {
        let s = factor(rng, jitter.saturation);
        for p in img.data_mut().chunks_exact_mut(3) {
            let l = luma(p[0], p[1], p[2]);
            for v in p.iter_mut() {
                *v = ((*v - l) * s + l).clamp(0.0, 1.0);
            }
        }
    }
    if jitter.hue > 0.0 {
        let shift = rng.uniform_range(-jitter.hue, jitter.hue) as f32;
        for p in img.data_mut().chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
            let (r, g, b) = hsv_to_rgb(h + shift, s, v);
            p[0] = r;
            p[1] = g;
            p[2] = b;
        }
    }
}
