use crate::imaging::{crop, dims, Image, Mask};
use crate::numerics::RngStream;

use super::deform::deform_patch;
use super::{AugConfig, MedMixError};

#[derive(Clone, Debug)]
pub struct MedMixOutput {
    pub image: Image,
    pub lesion_mask: Mask,
    /// Set when the retry budget ran out and a patch was placed over or
    /// against an earlier one.
    pub overlapped: bool,
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Rect {
    /// True when the rectangles overlap or touch (8-neighbourhood).
    fn near(&self, o: &Rect) -> bool {
        self.y <= o.y + o.h && o.y <= self.y + self.h && self.x <= o.x + o.w && o.x <= self.x + self.w
    }
}

fn patch_side(side: usize, cfg: &AugConfig, rng: &mut RngStream) -> usize {
    let frac = rng.uniform_range(cfg.patch_side_range.0, cfg.patch_side_range.1);
    ((frac * side as f64).round() as usize).clamp(4, side)
}

/// Pastes `n_lesions` deformed patches cut from random donors at random
/// non-touching locations inside the frame.
pub fn medmix(
    image: &Image,
    n_lesions: usize,
    rng: &mut RngStream,
    cfg: &AugConfig,
    donors: &[&Image],
) -> Result<MedMixOutput, MedMixError> {
    let (h, w, _) = dims(image);
    let mut out = image.clone();
    let mut mask = Mask::empty(h, w);
    if n_lesions == 0 {
        return Ok(MedMixOutput {
            image: out,
            lesion_mask: mask,
            overlapped: false,
        });
    }
    if donors.is_empty() {
        return Err(MedMixError::EmptyDonorPool);
    }
    let mut placed: Vec<Rect> = Vec::with_capacity(n_lesions);
    let mut overlapped = false;
    for _ in 0..n_lesions {
        let ph = patch_side(h, cfg, rng);
        let pw = patch_side(w, cfg, rng);
        let donor = donors[rng.index(donors.len())];
        let (dh, dw, _) = dims(donor);
        if dh < ph || dw < pw || dims(donor).2 != dims(image).2 {
            return Err(MedMixError::InvalidConfig(format!(
                "donor {dh}x{dw} cannot supply a {ph}x{pw} patch"
            )));
        }
        let sy = rng.index(dh - ph + 1);
        let sx = rng.index(dw - pw + 1);
        let patch = deform_patch(&crop(donor, sy, sx, ph, pw), rng, cfg)?;

        let mut rect = Rect { y: 0, x: 0, h: ph, w: pw };
        let mut ok = false;
        for _ in 0..=cfg.place_retries {
            rect.y = rng.index(h - ph + 1);
            rect.x = rng.index(w - pw + 1);
            if placed.iter().all(|p| !p.near(&rect)) {
                ok = true;
                break;
            }
        }
        overlapped |= !ok;
        placed.push(rect);

        let (_, _, c) = dims(image);
        let dst = out.data_mut();
        for yy in 0..ph {
            let d0 = ((rect.y + yy) * w + rect.x) * c;
            dst[d0..d0 + pw * c].copy_from_slice(&patch.data()[yy * pw * c..(yy + 1) * pw * c]);
        }
        mask.fill_rect(rect.y, rect.x, ph, pw);
    }
    Ok(MedMixOutput {
        image: out,
        lesion_mask: mask,
        overlapped,
    })
}
