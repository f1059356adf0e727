//! Strong augmentations indexed by class `n`; `n = 0` is always the identity.

use crate::imaging::{crop, dims, sample_bilinear, Image, Mask};
use crate::numerics::RngStream;

use super::cutpaste::medmix;
use super::{AugConfig, MedMixError};

pub trait StrongAugment: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns the class-`n` augmented image and the mask of altered pixels.
    fn apply(
        &self,
        image: &Image,
        n: usize,
        rng: &mut RngStream,
        cfg: &AugConfig,
        donors: &[&Image],
    ) -> Result<(Image, Mask), MedMixError>;
}

pub struct MedMix;

impl StrongAugment for MedMix {
    fn name(&self) -> &'static str {
        "medmix"
    }

    fn apply(
        &self,
        image: &Image,
        n: usize,
        rng: &mut RngStream,
        cfg: &AugConfig,
        donors: &[&Image],
    ) -> Result<(Image, Mask), MedMixError> {
        let out = medmix(image, n, rng, cfg, donors)?;
        Ok((out.image, out.lesion_mask))
    }
}

fn full_mask(image: &Image, n: usize) -> Mask {
    let (h, w, _) = dims(image);
    Mask::from_bits(h, w, vec![n > 0; h * w])
}

/// Rotation by `n / n_classes` of a full turn about the image centre.
pub struct Rotation;

impl StrongAugment for Rotation {
    fn name(&self) -> &'static str {
        "rotation"
    }

    fn apply(
        &self,
        image: &Image,
        n: usize,
        _rng: &mut RngStream,
        cfg: &AugConfig,
        _donors: &[&Image],
    ) -> Result<(Image, Mask), MedMixError> {
        if n == 0 {
            return Ok((image.clone(), full_mask(image, 0)));
        }
        let (h, w, c) = dims(image);
        let mut out = image.clone();
        let quarter = 4 * n % cfg.n_classes == 0 && h == w;
        let turns = 4 * n / cfg.n_classes;
        let theta = std::f32::consts::TAU * n as f32 / cfg.n_classes as f32;
        let (s, co) = theta.sin_cos();
        let cy = (h as f32 - 1.0) / 2.0;
        let cx = (w as f32 - 1.0) / 2.0;
        let data = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = if quarter {
                        // Exact index mapping for multiples of a quarter turn.
                        let (mut sy, mut sx) = (y, x);
                        for _ in 0..turns % 4 {
                            let t = sy;
                            sy = sx;
                            sx = w - 1 - t;
                        }
                        image.data()[(sy * w + sx) * c + ch]
                    } else {
                        let dy = y as f32 - cy;
                        let dx = x as f32 - cx;
                        sample_bilinear(image, cy + co * dy - s * dx, cx + s * dy + co * dx, ch)
                    };
                    data[(y * w + x) * c + ch] = v;
                }
            }
        }
        Ok((out, full_mask(image, n)))
    }
}

/// Rearranges the four quadrants by a fixed permutation chosen by `n`.
pub struct Permutation;

const PERMS: [[usize; 4]; 24] = [
    [0, 1, 2, 3], [0, 1, 3, 2], [0, 2, 1, 3], [0, 2, 3, 1], [0, 3, 1, 2], [0, 3, 2, 1],
    [1, 0, 2, 3], [1, 0, 3, 2], [1, 2, 0, 3], [1, 2, 3, 0], [1, 3, 0, 2], [1, 3, 2, 0],
    [2, 0, 1, 3], [2, 0, 3, 1], [2, 1, 0, 3], [2, 1, 3, 0], [2, 3, 0, 1], [2, 3, 1, 0],
    [3, 0, 1, 2], [3, 0, 2, 1], [3, 1, 0, 2], [3, 1, 2, 0], [3, 2, 0, 1], [3, 2, 1, 0],
];

impl StrongAugment for Permutation {
    fn name(&self) -> &'static str {
        "permutation"
    }

    fn apply(
        &self,
        image: &Image,
        n: usize,
        _rng: &mut RngStream,
        cfg: &AugConfig,
        _donors: &[&Image],
    ) -> Result<(Image, Mask), MedMixError> {
        let (h, w, c) = dims(image);
        let perm = PERMS[(n * 23 / (cfg.n_classes - 1).max(1)).min(23)];
        let (th, tw) = (h / 2, w / 2);
        let tiles: Vec<Image> = (0..4).map(|t| crop(image, (t / 2) * th, (t % 2) * tw, th, tw)).collect();
        let mut out = image.clone();
        let data = out.data_mut();
        for (dst, &src) in perm.iter().enumerate() {
            let (oy, ox) = ((dst / 2) * th, (dst % 2) * tw);
            for y in 0..th {
                let d0 = ((oy + y) * w + ox) * c;
                data[d0..d0 + tw * c].copy_from_slice(&tiles[src].data()[y * tw * c..(y + 1) * tw * c]);
            }
        }
        Ok((out, full_mask(image, n)))
    }
}

/// Zeroes `n` random rectangles.
pub struct Cutout;

impl StrongAugment for Cutout {
    fn name(&self) -> &'static str {
        "cutout"
    }

    fn apply(
        &self,
        image: &Image,
        n: usize,
        rng: &mut RngStream,
        cfg: &AugConfig,
        _donors: &[&Image],
    ) -> Result<(Image, Mask), MedMixError> {
        let (h, w, c) = dims(image);
        let mut out = image.clone();
        let mut mask = Mask::empty(h, w);
        for _ in 0..n {
            let side = |s: usize, r: &mut RngStream| {
                ((r.uniform_range(cfg.patch_side_range.0, cfg.patch_side_range.1) * s as f64).round() as usize).clamp(1, s)
            };
            let ph = side(h, rng);
            let pw = side(w, rng);
            let y0 = rng.index(h - ph + 1);
            let x0 = rng.index(w - pw + 1);
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    out.data_mut()[(y * w + x) * c..(y * w + x + 1) * c].fill(0.0);
                }
            }
            mask.fill_rect(y0, x0, ph, pw);
        }
        Ok((out, mask))
    }
}

/// Additive Gaussian noise with standard deviation `0.05 n`.
pub struct GaussianNoise;

impl StrongAugment for GaussianNoise {
    fn name(&self) -> &'static str {
        "gaussian-noise"
    }

    fn apply(
        &self,
        image: &Image,
        n: usize,
        rng: &mut RngStream,
        _cfg: &AugConfig,
        _donors: &[&Image],
    ) -> Result<(Image, Mask), MedMixError> {
        let mut out = image.clone();
        if n > 0 {
            let sigma = 0.05 * n as f32;
            for v in out.data_mut() {
                *v = (*v + sigma * rng.normal() as f32).clamp(0.0, 1.0);
            }
        }
        Ok((out, full_mask(image, n)))
    }
}

pub fn strategy_by_name(name: &str) -> Option<Box<dyn StrongAugment>> {
    Some(match name {
        "medmix" => Box::new(MedMix),
        "rotation" => Box::new(Rotation),
        "permutation" => Box::new(Permutation),
        "cutout" => Box::new(Cutout),
        "gaussian-noise" => Box::new(GaussianNoise),
        _ => return None,
    })
}

pub const STRATEGY_NAMES: [&str; 5] = ["medmix", "rotation", "permutation", "cutout", "gaussian-noise"];
