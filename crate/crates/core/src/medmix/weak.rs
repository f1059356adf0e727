use crate::imaging::{clamp01, dims, gaussian_blur, resize_window, Image};
use crate::numerics::RngStream;

use super::colour::{colour_jitter, greyscale};
use super::WeakConfig;

/// Random resized crop, colour jitter, greyscale and blur. Output is clamped
/// to `[0, 1]` and has the input shape.
pub fn weak_augment(image: &Image, rng: &mut RngStream, cfg: &WeakConfig) -> Image {
    let (h, w, _) = dims(image);
    let (cy, cx, ch, cw) = sample_crop(h, w, rng, cfg);
    let mut out = resize_window(image, cy, cx, ch, cw, h, w);
    if !cfg.jitter.is_off() && rng.bernoulli(cfg.jitter_prob) {
        colour_jitter(&mut out, &cfg.jitter, rng);
    }
    if rng.bernoulli(cfg.greyscale_prob) {
        greyscale(&mut out);
    }
    if rng.bernoulli(cfg.blur_prob) {
        let sigma = rng.uniform_range(cfg.blur_sigma.0, cfg.blur_sigma.1) as f32;
        out = gaussian_blur(&out, sigma);
    }
    clamp01(&mut out);
    out
}

/// Crop window `(y0, x0, h, w)`; falls back to the full frame after ten misses.
fn sample_crop(h: usize, w: usize, rng: &mut RngStream, cfg: &WeakConfig) -> (f32, f32, f32, f32) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.uniform_range(cfg.crop_scale.0, cfg.crop_scale.1);
        let ratio = rng.uniform_range(lr0, lr1).exp();
        let cw = (target * ratio).sqrt().round();
        let chh = (target / ratio).sqrt().round();
        if cw >= 1.0 && chh >= 1.0 && cw <= w as f64 && chh <= h as f64 {
            let y0 = rng.integer(0, (h as f64 - chh) as i64 + 1).unwrap_or(0);
            let x0 = rng.integer(0, (w as f64 - cw) as i64 + 1).unwrap_or(0);
            return (y0 as f32, x0 as f32, chh as f32, cw as f32);
        }
    }
    (0.0, 0.0, h as f32, w as f32)
}
