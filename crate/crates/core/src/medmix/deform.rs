use crate::imaging::{clamp01, dims, sample_bilinear, Image};
use crate::numerics::RngStream;

use super::colour::colour_jitter;
use super::{AugConfig, MedMixError};

/// Independently applies colour jitter, Gaussian noise, fisheye and wave
/// warps, each with probability `cfg.deform_prob`.
pub fn deform_patch(patch: &Image, rng: &mut RngStream, cfg: &AugConfig) -> Result<Image, MedMixError> {
    let (h, w, _) = dims(patch);
    if h < 4 || w < 4 {
        return Err(MedMixError::PatchTooSmall { h, w });
    }
    let mut out = patch.clone();
    if rng.bernoulli(cfg.deform_prob) {
        colour_jitter(&mut out, &cfg.patch_jitter, rng);
    }
    if rng.bernoulli(cfg.deform_prob) {
        let sigma = rng.uniform_range(cfg.patch_noise_sigma.0, cfg.patch_noise_sigma.1) as f32;
        for v in out.data_mut() {
            *v += sigma * rng.normal() as f32;
        }
    }
    if rng.bernoulli(cfg.deform_prob) {
        let k = rng.uniform_range(cfg.fisheye_strength.0, cfg.fisheye_strength.1) as f32;
        out = fisheye(&out, k);
    }
    if rng.bernoulli(cfg.deform_prob) {
        let points = wave_control_points(h, w, cfg, rng);
        out = horizontal_wave(&out, &points);
    }
    clamp01(&mut out);
    Ok(out)
}

/// Radial barrel warp about the patch centre: a pixel at normalised radius
/// `r` samples the source at `r * (1 - k (1 - r²))`. The centre and the
/// corner radius are fixed points.
pub fn fisheye(img: &Image, strength: f32) -> Image {
    let (h, w, c) = dims(img);
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let rmax = (cy * cy + cx * cx).sqrt().max(1e-6);
    let mut out = img.clone();
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let dy = y as f32 - cy;
            let dx = x as f32 - cx;
            let r = (dy * dy + dx * dx).sqrt() / rmax;
            let s = 1.0 - strength * (1.0 - r * r);
            for ch in 0..c {
                data[(y * w + x) * c + ch] = sample_bilinear(img, cy + dy * s, cx + dx * s, ch);
            }
        }
    }
    out
}

/// `(row, shift)` control points sorted by row.
pub fn wave_control_points(h: usize, w: usize, cfg: &AugConfig, rng: &mut RngStream) -> Vec<(f32, f32)> {
    let amp = cfg.wave_amplitude * w as f64;
    let mut pts: Vec<(f32, f32)> = (0..cfg.wave_control_points)
        .map(|_| {
            let row = rng.uniform_range(0.0, (h - 1) as f64) as f32;
            let shift = rng.uniform_range(-amp, amp) as f32;
            (row, shift)
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

/// Row shift at `row`, cosine-interpolated between control points and held
/// constant beyond the outermost ones.
pub fn wave_shift(points: &[(f32, f32)], row: f32) -> f32 {
    let first = points[0];
    let last = points[points.len() - 1];
    if row <= first.0 {
        return first.1;
    }
    if row >= last.0 {
        return last.1;
    }
    for pair in points.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if row >= a.0 && row <= b.0 {
            let span = (b.0 - a.0).max(1e-6);
            let t = (row - a.0) / span;
            let wgt = (1.0 - (std::f32::consts::PI * t).cos()) / 2.0;
            return a.1 * (1.0 - wgt) + b.1 * wgt;
        }
    }
    last.1
}

pub fn horizontal_wave(img: &Image, points: &[(f32, f32)]) -> Image {
    let (h, w, c) = dims(img);
    let mut out = img.clone();
    let data = out.data_mut();
    for y in 0..h {
        let shift = wave_shift(points, y as f32);
        for x in 0..w {
            for ch in 0..c {
                data[(y * w + x) * c + ch] = sample_bilinear(img, y as f32, x as f32 - shift, ch);
            }
        }
    }
    out
}
