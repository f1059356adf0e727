use super::MedMixError;

/// Colour jitter strengths in torchvision convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Jitter {
    pub const OFF: Jitter = Jitter {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };

    pub fn is_off(&self) -> bool {
        *self == Self::OFF
    }
}

/// SimCLR-style label-preserving augmentation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct WeakConfig {
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub jitter: Jitter,
    pub jitter_prob: f64,
    pub greyscale_prob: f64,
    pub blur_sigma: (f64, f64),
    pub blur_prob: f64,
}

impl Default for WeakConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            jitter: Jitter {
                brightness: 0.8,
                contrast: 0.8,
                saturation: 0.8,
                hue: 0.2,
            },
            jitter_prob: 0.8,
            greyscale_prob: 0.2,
            blur_sigma: (0.1, 2.0),
            blur_prob: 0.5,
        }
    }
}

impl WeakConfig {
    /// Configuration under which `weak_augment` is the identity.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            jitter: Jitter::OFF,
            jitter_prob: 0.0,
            greyscale_prob: 0.0,
            blur_sigma: (0.1, 2.0),
            blur_prob: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    /// Number of augmentation distributions, normal class included.
    pub n_classes: usize,
    /// Patch side as a fraction of the image side.
    pub patch_side_range: (f64, f64),
    pub deform_prob: f64,
    pub wave_control_points: usize,
    /// Maximum row shift of the wave warp, as a fraction of patch width.
    pub wave_amplitude: f64,
    pub fisheye_strength: (f64, f64),
    pub patch_jitter: Jitter,
    pub patch_noise_sigma: (f64, f64),
    pub place_retries: usize,
    pub weak: WeakConfig,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            patch_side_range: (0.1, 0.3),
            deform_prob: 0.25,
            wave_control_points: 3,
            wave_amplitude: 0.15,
            fisheye_strength: (0.1, 0.4),
            patch_jitter: Jitter {
                brightness: 0.8,
                contrast: 0.8,
                saturation: 0.8,
                hue: 0.2,
            },
            patch_noise_sigma: (0.02, 0.1),
            place_retries: 20,
            weak: WeakConfig::default(),
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<(), MedMixError> {
        let bad = |m: &str| Err(MedMixError::InvalidConfig(m.to_string()));
        let (lo, hi) = self.patch_side_range;
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return bad("patch_side_range must satisfy 0 < min <= max < 1");
        }
        if !(0.0..=1.0).contains(&self.deform_prob) {
            return bad("deform_prob must lie in [0, 1]");
        }
        if self.wave_control_points < 2 {
            return bad("wave_control_points must be at least 2");
        }
        let (s0, s1) = self.weak.crop_scale;
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) {
            return bad("crop_scale must satisfy 0 < min <= max <= 1");
        }
        Ok(())
    }
}
