use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::detect::IgdConfig;
use crate::encoder::{Arch, PretrainConfig};
use crate::evalkit::EvalConfig;
use crate::medmix::{AugConfig, Jitter, WeakConfig, STRATEGY_NAMES};
use crate::pmsacl::{CentreStrategy, ContrastiveKind, LossSwitches, TemperatureSchedule};

use super::synth::SynthConfig;
use super::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Float,
    Int,
    Bool,
    Text,
    IntList,
}

struct Key {
    name: &'static str,
    kind: Kind,
    default: &'static str,
    help: &'static str,
    inherited: bool,
}

const fn key(name: &'static str, kind: Kind, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        kind,
        default,
        help,
        inherited: false,
    }
}

const fn inherited(name: &'static str, kind: Kind, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        kind,
        default,
        help,
        inherited: true,
    }
}

use Kind::*;

/// Every accepted key as `section.name`.
const KEYS: &[Key] = &[
    key("data.side", Int, "64", "image side in pixels"),
    key("data.train", Int, "200", "normal training images"),
    key("data.val_normal", Int, "50", "normal validation images"),
    key("data.val_abnormal", Int, "50", "abnormal validation images"),
    key("data.test_normal", Int, "100", "normal test images"),
    key("data.test_abnormal", Int, "100", "abnormal test images"),
    key("data.margin", Float, "0.25", "lesion intensity offset"),
    key("data.hard_margin", Float, "0.02", "lesion intensity offset with --hard"),
    key("data.lesion_radius_min", Float, "3", "smallest lesion radius"),
    key("data.lesion_radius_max", Float, "8", "largest lesion radius"),
    key("data.max_lesions", Int, "3", "lesions per abnormal image, at most"),
    key("data.speckle", Float, "0.04", "per-pixel lesion noise amplitude"),
    key("data.hard_speckle", Float, "0", "lesion noise amplitude with --hard"),
    key("data.lesion_texture", Float, "1", "foreign texture weight inside lesions"),
    key("data.hard_texture", Float, "0.5", "foreign texture weight with --hard"),
    key("data.lesion_warp", Float, "0.5", "radial warp of displaced lesion content"),
    key("data.hard_opacity", Float, "0.5", "lesion opacity with --hard"),
    key("aug.classes", Int, "4", "augmentation distributions, normal included"),
    key("aug.strategy", Text, "medmix", "strong augmentation"),
    key("aug.patch_side_min", Float, "0.1", "smallest pasted patch side, fraction of image"),
    key("aug.patch_side_max", Float, "0.3", "largest pasted patch side, fraction of image"),
    key("aug.deform_prob", Float, "0.25", "probability of each patch deformation"),
    key("aug.wave_control_points", Int, "3", "control points of the wave warp"),
    key("aug.wave_amplitude", Float, "0.15", "wave warp amplitude, fraction of patch width"),
    key("aug.fisheye_min", Float, "0.1", "smallest fisheye strength"),
    key("aug.fisheye_max", Float, "0.4", "largest fisheye strength"),
    key("aug.patch_brightness", Float, "0.8", "pasted patch colour jitter"),
    key("aug.patch_contrast", Float, "0.8", "pasted patch colour jitter"),
    key("aug.patch_saturation", Float, "0.8", "pasted patch colour jitter"),
    key("aug.patch_hue", Float, "0.2", "pasted patch colour jitter"),
    key("aug.patch_noise_min", Float, "0.02", "pasted patch noise sigma, lower bound"),
    key("aug.patch_noise_max", Float, "0.1", "pasted patch noise sigma, upper bound"),
    key("aug.place_retries", Int, "20", "placement attempts before overlap is allowed"),
    inherited("aug.crop_scale_min", Float, "0.2", "weak crop scale, lower bound"),
    inherited("aug.crop_scale_max", Float, "1", "weak crop scale, upper bound"),
    inherited("aug.brightness", Float, "0.8", "weak colour jitter"),
    inherited("aug.contrast", Float, "0.8", "weak colour jitter"),
    inherited("aug.saturation", Float, "0.8", "weak colour jitter"),
    inherited("aug.hue", Float, "0.2", "weak colour jitter"),
    inherited("aug.jitter_prob", Float, "0.8", "weak colour jitter probability"),
    inherited("aug.greyscale_prob", Float, "0.2", "weak greyscale probability"),
    inherited("aug.blur_sigma_min", Float, "0.1", "weak blur sigma, lower bound"),
    inherited("aug.blur_sigma_max", Float, "2", "weak blur sigma, upper bound"),
    inherited("aug.blur_prob", Float, "0.5", "weak blur probability"),
    key("loss.tau", Float, "0.2", "contrastive temperature"),
    key("loss.alpha", Float, "2", "same-class temperature factor"),
    key("loss.contrastive", Text, "pmsacl", "pmsacl, standard or off"),
    key("loss.centring", Bool, "true", "multi-centring term"),
    key("loss.kappa_scaling", Bool, "true", "class-dependent temperature"),
    key("loss.aug", Bool, "true", "augmentation classification term"),
    key("loss.pos", Bool, "true", "patch position term"),
    key("loss.w_ctr", Float, "1", "weight of the centring term"),
    key("loss.w_con", Float, "1", "weight of the contrastive term"),
    key("loss.w_aug", Float, "1", "weight of the augmentation term"),
    key("loss.w_pos", Float, "1", "weight of the position term"),
    key("encoder.channels", IntList, "16,32,64", "conv block widths"),
    key("encoder.embed_dim", Int, "128", "projection width"),
    key("encoder.epochs", Int, "30", "pre-training epochs"),
    key("encoder.batch_size", Int, "32", "source images per batch"),
    key("encoder.lr", Float, "0.01", "learning rate"),
    key("encoder.momentum", Float, "0.9", "momentum"),
    key("encoder.patch_size", Int, "32", "position-loss patch side"),
    key("encoder.grad_clip", Float, "20", "gradient norm limit, 0 disables"),
    key("encoder.centres", Text, "untrained", "untrained, random, equidistant or reestimate"),
    key("encoder.centre_period", Int, "5", "epochs between re-estimates"),
    inherited("padim.eps", Float, "0.01", "covariance regulariser"),
    key("padim.subset", Int, "0", "random feature channels kept, 0 keeps all"),
    key("padim.layers", IntList, "1,2", "encoder blocks used as patch features"),
    key("igd.xi", Float, "0.5", "reconstruction weight in the score"),
    key("igd.rho", Float, "0.5", "MAE weight in the reconstruction error"),
    key("igd.nu", Float, "0.5", "global MS-SSIM weight"),
    key("igd.kappa_reg", Float, "1", "variance regulariser"),
    key("igd.global_scales", Int, "3", "MS-SSIM scales on the image"),
    key("igd.local_scales", Int, "2", "MS-SSIM scales on patches"),
    key("igd.local_patch", Int, "32", "local patch side"),
    key("igd.local_stride", Int, "32", "local patch stride"),
    inherited("igd.epochs", Int, "10", "training epochs"),
    inherited("igd.batch_size", Int, "32", "batch size"),
    inherited("igd.lr", Float, "0.01", "learning rate"),
    inherited("igd.momentum", Float, "0.9", "momentum"),
    key("igd.fine_tune_encoder", Bool, "true", "update the encoder while fitting"),
    key("igd.encoder_lr_scale", Float, "0.1", "encoder learning rate factor"),
    key("igd.latent_weight", Float, "0.01", "latent term weight in training"),
    key("igd.literal_score", Bool, "false", "score with 1 - h instead of h"),
    key("eval.fpr_limit", Float, "0.3", "PRO integration limit"),
    key("eval.groups", Int, "5", "segmentation resampling groups"),
    key("eval.group_size", Int, "50", "abnormal images per group"),
    key("eval.pixel_levels", Int, "256", "pixel threshold candidates"),
    key("eval.overlays", Int, "8", "overlay images written by report"),
    key("ablate.cells", Text, "all", "comma-separated cell names or all"),
    key("runtime.workers", Int, "1", "threads; results do not depend on it"),
];

fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn canonical(k: &Key, raw: &str) -> Result<String, PipelineError> {
    let bad = |what: &str| PipelineError::Config(format!("{}: expected {what}, got {raw:?}", k.name));
    let raw = raw.trim();
    Ok(match k.kind {
        Float => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            if !v.is_finite() {
                return Err(bad("a finite number"));
            }
            format!("{v:?}")
        }
        Int => raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?.to_string(),
        Bool => match raw {
            "true" | "yes" | "on" | "1" => "true".into(),
            "false" | "no" | "off" | "0" => "false".into(),
            _ => return Err(bad("true or false")),
        },
        Text => raw.to_string(),
        IntList => {
            let items: Result<Vec<u64>, _> = raw.split(',').map(|s| s.trim().parse::<u64>()).collect();
            let items = items.map_err(|_| bad("comma-separated integers"))?;
            if items.is_empty() {
                return Err(bad("a non-empty list"));
            }
            items.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
        }
    })
}

/// Resolved `section.key → value` map in canonical form.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigValues {
    values: BTreeMap<String, String>,
}

impl Default for ConfigValues {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|k| (k.name.to_string(), canonical(k, k.default).expect("defaults parse")))
            .collect();
        Self { values }
    }
}

impl ConfigValues {
    /// Parses `[section]` headers and `key = value` lines; `#` and `;` start comments.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                section = rest
                    .strip_suffix(']')
                    .ok_or_else(|| PipelineError::Config(format!("line {}: unterminated section header", n + 1)))?
                    .trim()
                    .to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", n + 1)))?;
            let full = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            cfg.set(&full, v).map_err(|e| match e {
                PipelineError::Config(m) => PipelineError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<(), PipelineError> {
        let k = lookup(name).ok_or_else(|| PipelineError::Config(format!("unknown key {name}")))?;
        self.values.insert(name.to_string(), canonical(k, value)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        &self.values[name]
    }

    fn f(&self, name: &str) -> f64 {
        self.values[name].parse().expect("canonical float")
    }

    fn u(&self, name: &str) -> usize {
        self.values[name].parse().expect("canonical integer")
    }

    fn b(&self, name: &str) -> bool {
        self.values[name] == "true"
    }

    fn list(&self, name: &str) -> Vec<usize> {
        self.values[name].split(',').map(|s| s.parse().expect("canonical list")).collect()
    }

    /// Canonical text of every key; `runtime.*` is left out.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.values.iter().filter(|(k, _)| !k.starts_with("runtime.")) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            side: self.u("data.side"),
            train: self.u("data.train"),
            val_normal: self.u("data.val_normal"),
            val_abnormal: self.u("data.val_abnormal"),
            test_normal: self.u("data.test_normal"),
            test_abnormal: self.u("data.test_abnormal"),
            margin: self.f("data.margin"),
            hard_margin: self.f("data.hard_margin"),
            lesion_radius: (self.f("data.lesion_radius_min"), self.f("data.lesion_radius_max")),
            max_lesions: self.u("data.max_lesions"),
            speckle: self.f("data.speckle"),
            hard_speckle: self.f("data.hard_speckle"),
            lesion_texture: self.f("data.lesion_texture"),
            hard_texture: self.f("data.hard_texture"),
            lesion_warp: self.f("data.lesion_warp"),
            hard_opacity: self.f("data.hard_opacity"),
        }
    }

    pub fn aug(&self) -> AugConfig {
        let jitter = |p: &str| Jitter {
            brightness: self.f(&format!("aug.{p}brightness")),
            contrast: self.f(&format!("aug.{p}contrast")),
            saturation: self.f(&format!("aug.{p}saturation")),
            hue: self.f(&format!("aug.{p}hue")),
        };
        AugConfig {
            n_classes: self.u("aug.classes"),
            patch_side_range: (self.f("aug.patch_side_min"), self.f("aug.patch_side_max")),
            deform_prob: self.f("aug.deform_prob"),
            wave_control_points: self.u("aug.wave_control_points"),
            wave_amplitude: self.f("aug.wave_amplitude"),
            fisheye_strength: (self.f("aug.fisheye_min"), self.f("aug.fisheye_max")),
            patch_jitter: jitter("patch_"),
            patch_noise_sigma: (self.f("aug.patch_noise_min"), self.f("aug.patch_noise_max")),
            place_retries: self.u("aug.place_retries"),
            weak: WeakConfig {
                crop_scale: (self.f("aug.crop_scale_min"), self.f("aug.crop_scale_max")),
                crop_ratio: WeakConfig::default().crop_ratio,
                jitter: jitter(""),
                jitter_prob: self.f("aug.jitter_prob"),
                greyscale_prob: self.f("aug.greyscale_prob"),
                blur_sigma: (self.f("aug.blur_sigma_min"), self.f("aug.blur_sigma_max")),
                blur_prob: self.f("aug.blur_prob"),
            },
        }
    }

    pub fn pretrain(&self) -> Result<PretrainConfig, PipelineError> {
        let contrastive = match self.get("loss.contrastive") {
            "pmsacl" => ContrastiveKind::Pmsacl,
            "standard" => ContrastiveKind::Standard,
            "off" => ContrastiveKind::Off,
            other => return Err(PipelineError::Config(format!("loss.contrastive: unknown kind {other}"))),
        };
        let centres = match self.get("encoder.centres") {
            "untrained" => CentreStrategy::UntrainedEncoder,
            "random" => CentreStrategy::Random,
            "equidistant" => CentreStrategy::Equidistant,
            "reestimate" => CentreStrategy::ReEstimate {
                period: self.u("encoder.centre_period").max(1),
            },
            other => return Err(PipelineError::Config(format!("encoder.centres: unknown strategy {other}"))),
        };
        let strategy = self.get("aug.strategy").to_string();
        if !STRATEGY_NAMES.contains(&strategy.as_str()) {
            return Err(PipelineError::Config(format!(
                "aug.strategy: unknown {strategy}; expected one of {}",
                STRATEGY_NAMES.join(", ")
            )));
        }
        let schedule = TemperatureSchedule::new(self.f("loss.tau"), self.f("loss.alpha"))
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let aug = self.aug();
        aug.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let clip = self.f("encoder.grad_clip");
        Ok(PretrainConfig {
            arch: Arch {
                in_channels: 3,
                channels: self.list("encoder.channels"),
                embed_dim: self.u("encoder.embed_dim"),
            },
            aug,
            strategy,
            switches: LossSwitches {
                contrastive,
                centring: self.b("loss.centring"),
                kappa_scaling: self.b("loss.kappa_scaling"),
                aug: self.b("loss.aug"),
                pos: self.b("loss.pos"),
                w_ctr: self.f("loss.w_ctr"),
                w_con: self.f("loss.w_con"),
                w_aug: self.f("loss.w_aug"),
                w_pos: self.f("loss.w_pos"),
            },
            schedule,
            centres,
            epochs: self.u("encoder.epochs"),
            batch_size: self.u("encoder.batch_size"),
            lr: self.f("encoder.lr"),
            momentum: self.f("encoder.momentum"),
            patch_size: self.u("encoder.patch_size"),
            grad_clip: (clip > 0.0).then_some(clip),
            workers: self.workers(),
        })
    }

    pub fn igd(&self) -> Result<IgdConfig, PipelineError> {
        let cfg = IgdConfig {
            xi: self.f("igd.xi"),
            rho: self.f("igd.rho"),
            nu: self.f("igd.nu"),
            kappa_reg: self.f("igd.kappa_reg"),
            global_scales: self.u("igd.global_scales"),
            local_scales: self.u("igd.local_scales"),
            local_patch: self.u("igd.local_patch"),
            local_stride: self.u("igd.local_stride"),
            epochs: self.u("igd.epochs"),
            batch_size: self.u("igd.batch_size"),
            lr: self.f("igd.lr"),
            momentum: self.f("igd.momentum"),
            fine_tune_encoder: self.b("igd.fine_tune_encoder"),
            encoder_lr_scale: self.f("igd.encoder_lr_scale"),
            latent_weight: self.f("igd.latent_weight"),
            literal_score: self.b("igd.literal_score"),
            workers: self.workers(),
        };
        cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn padim_eps(&self) -> f64 {
        self.f("padim.eps")
    }

    pub fn padim_subset(&self) -> Option<usize> {
        Some(self.u("padim.subset")).filter(|&s| s > 0)
    }

    pub fn padim_layers(&self) -> Vec<usize> {
        self.list("padim.layers")
    }

    pub fn eval(&self) -> Result<EvalConfig, PipelineError> {
        let fpr = self.f("eval.fpr_limit");
        if !(fpr > 0.0 && fpr <= 1.0) {
            return Err(PipelineError::Config(format!("eval.fpr_limit = {fpr} outside (0, 1]")));
        }
        Ok(EvalConfig {
            fpr_limit: fpr,
            groups: self.u("eval.groups").max(1),
            group_size: self.u("eval.group_size").max(1),
            pixel_levels: self.u("eval.pixel_levels").max(2),
        })
    }

    pub fn overlays(&self) -> usize {
        self.u("eval.overlays")
    }

    pub fn workers(&self) -> usize {
        self.u("runtime.workers").max(1)
    }

    /// Writes every key, grouped by section, as a loadable config file.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for k in KEYS {
            let (sec, name) = k.name.split_once('.').unwrap();
            if sec != section {
                let _ = writeln!(s, "{}[{sec}]", if section.is_empty() { "" } else { "\n" });
                section = sec;
            }
            let _ = writeln!(s, "{name} = {}", self.values[k.name]);
        }
        s
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Key reference for `--help`; inherited defaults are marked.
pub fn config_help() -> String {
    let mut s = String::from("Config keys (section.key = default):\n");
    for k in KEYS {
        let _ = writeln!(
            s,
            "  {:<26} {:<10} {}{}",
            k.name,
            k.default,
            k.help,
            if k.inherited { " [inherited default]" } else { "" }
        );
    }
    s
}
