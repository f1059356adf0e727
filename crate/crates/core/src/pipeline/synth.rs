use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::imaging::{load_mask_png, load_png, new_image, sample_bilinear, save_mask_png, save_png, Image, Mask};
use crate::numerics::RngStream;

use super::PipelineError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub side: usize,
    pub train: usize,
    pub val_normal: usize,
    pub val_abnormal: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
    /// Mean intensity offset of lesion pixels against the clean image.
    pub margin: f64,
    /// Margin used with `--hard`.
    pub hard_margin: f64,
    pub lesion_radius: (f64, f64),
    pub max_lesions: usize,
    pub speckle: f64,
    /// Speckle used with `--hard`.
    pub hard_speckle: f64,
    /// Blend weight of a foreign texture inside each lesion; the rest is the
    /// image's own content, displaced and radially warped.
    pub lesion_texture: f64,
    /// Texture blend used with `--hard`.
    pub hard_texture: f64,
    /// Radial warp strength of the displaced content.
    pub lesion_warp: f64,
    /// Opacity of the lesion content over the clean image with `--hard`.
    pub hard_opacity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            side: 64,
            train: 200,
            val_normal: 50,
            val_abnormal: 50,
            test_normal: 100,
            test_abnormal: 100,
            margin: 0.25,
            hard_margin: 0.02,
            lesion_radius: (3.0, 8.0),
            max_lesions: 3,
            speckle: 0.04,
            hard_speckle: 0.0,
            lesion_texture: 1.0,
            hard_texture: 0.5,
            lesion_warp: 0.5,
            hard_opacity: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub label: Label,
    pub image_path: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_path: Option<String>,
}

#[derive(Clone, Debug)]
pub struct DatasetOnDisk {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.jsonl";

impl DatasetOnDisk {
    pub fn load(root: &Path) -> Result<Self, PipelineError> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|_| PipelineError::Missing(path.clone()))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| PipelineError::Artifact(format!("{} line {}: {e}", path.display(), n + 1)))?;
            if e.split == Split::Train && e.label != Label::Normal {
                return Err(PipelineError::Artifact(format!("train item {} is not normal", e.id)));
            }
            entries.push(e);
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn image(&self, e: &ManifestEntry) -> Result<Image, PipelineError> {
        Ok(load_png(&self.root.join(&e.image_path))?)
    }

    pub fn mask(&self, e: &ManifestEntry) -> Result<Option<Mask>, PipelineError> {
        e.mask_path
            .as_ref()
            .map(|p| load_mask_png(&self.root.join(p)).map_err(PipelineError::from))
            .transpose()
    }

    pub fn images(&self, split: Split) -> Result<Vec<(String, Image)>, PipelineError> {
        self.split(split).map(|e| Ok((e.id.clone(), self.image(e)?))).collect()
    }
}

/// Shared grating family; each normal image perturbs it.
struct Family {
    gratings: Vec<(f64, f64, f64)>, // (cycles per image, orientation, amplitude)
}

impl Family {
    fn new(seed: u64) -> Self {
        let mut rng = RngStream::new(seed, "synth/family");
        let gratings = (0..5)
            .map(|k| {
                let cycles = 1.0 + k as f64 * 1.2 + rng.uniform();
                (cycles, rng.uniform() * PI, 1.0 / (1.0 + k as f64))
            })
            .collect();
        Self { gratings }
    }
}

fn normal_image(side: usize, fam: &Family, rng: &mut RngStream) -> Image {
    let g: Vec<(f64, f64, f64, f64)> = fam
        .gratings
        .iter()
        .map(|&(c, o, a)| {
            let c = c * rng.uniform_range(0.85, 1.15);
            let o = o + rng.uniform_range(-0.3, 0.3);
            (c, o, a, rng.uniform() * 2.0 * PI)
        })
        .collect();
    let norm: f64 = g.iter().map(|t| t.2).sum();
    let base = [0.55, 0.47, 0.45];
    let tint: Vec<f64> = base.iter().map(|b| b + rng.uniform_range(-0.05, 0.05)).collect();
    let (sx, sy) = (rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0));
    let mut img = new_image(side, side, 3);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = ((x as f64 + sx) / side as f64, (y as f64 + sy) / side as f64);
            let t: f64 = g
                .iter()
                .map(|&(c, o, a, p)| a * (2.0 * PI * c * (u * o.cos() + v * o.sin()) + p).sin())
                .sum::<f64>()
                / norm;
            for (ch, &tc) in tint.iter().enumerate() {
                img.data_mut()[(y * side + x) * 3 + ch] = (tc + 0.15 * t) as f32;
            }
        }
    }
    img
}

/// Irregular blob of radius `r` around (cy, cx).
fn blob(side: usize, cy: f64, cx: f64, r: f64, rng: &mut RngStream) -> Mask {
    let (a2, p2, a3, p3) = (
        rng.uniform_range(0.0, 0.25),
        rng.uniform() * 2.0 * PI,
        rng.uniform_range(0.0, 0.15),
        rng.uniform() * 2.0 * PI,
    );
    let mut m = Mask::empty(side, side);
    for y in 0..side {
        for x in 0..side {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let th = dy.atan2(dx);
            let rr = r * (1.0 + a2 * (2.0 * th + p2).sin() + a3 * (3.0 * th + p3).sin());
            if (dy * dy + dx * dx).sqrt() < rr {
                m.set(y, x, true);
            }
        }
    }
    m
}

/// Appearance of injected lesions for one difficulty mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionStyle {
    pub margin: f64,
    pub speckle: f64,
    pub texture: f64,
    pub opacity: f64,
}

impl SynthConfig {
    pub fn style(&self, hard: bool) -> LesionStyle {
        if hard {
            LesionStyle {
                margin: self.hard_margin,
                speckle: self.hard_speckle,
                texture: self.hard_texture,
                opacity: self.hard_opacity,
            }
        } else {
            LesionStyle {
                margin: self.margin,
                speckle: self.speckle,
                texture: self.lesion_texture,
                opacity: 1.0,
            }
        }
    }
}

/// Injects 1..=max_lesions blobs showing displaced, warped own content mixed
/// with `foreign` texture and shifted by ±`margin`. Returns the image, its
/// exact mask, and the same image without the intensity shift.
pub fn inject_lesions(
    clean: &Image,
    foreign: &Image,
    cfg: &SynthConfig,
    style: &LesionStyle,
    rng: &mut RngStream,
) -> (Image, Mask, Image) {
    let LesionStyle {
        margin,
        speckle,
        texture,
        opacity,
    } = *style;
    let side = clean.shape()[0];
    let n = 1 + rng.index(cfg.max_lesions.max(1));
    let mut img = clean.clone();
    let mut reference = clean.clone();
    let mut mask = Mask::empty(side, side);
    for _ in 0..n {
        let r = rng.uniform_range(cfg.lesion_radius.0, cfg.lesion_radius.1);
        let lo = r * 1.4 + 1.0;
        let hi = side as f64 - lo;
        let (cy, cx) = (rng.uniform_range(lo, hi), rng.uniform_range(lo, hi));
        let b = blob(side, cy, cx, r, rng);
        let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        let hue = [1.0, rng.uniform_range(0.6, 1.0), rng.uniform_range(0.6, 1.0)];
        let hue_mean = hue.iter().sum::<f64>() / 3.0;
        let shift = |rng: &mut RngStream| {
            let d = rng.uniform_range(6.0, 14.0);
            if rng.bernoulli(0.5) {
                d
            } else {
                -d
            }
        };
        let (sy, sx) = (shift(rng), shift(rng));
        for p in 0..side * side {
            if !b.bits()[p] || mask.bits()[p] {
                continue;
            }
            let speck = speckle * (2.0 * rng.uniform() - 1.0);
            let (dy, dx) = ((p / side) as f64 - cy, (p % side) as f64 - cx);
            let rad = ((dy * dy + dx * dx).sqrt() / r).min(1.0);
            let f = 1.0 - cfg.lesion_warp * (1.0 - rad);
            let (ty, tx) = ((cy + sy + dy * f) as f32, (cx + sx + dx * f) as f32);
            for ch in 0..3 {
                let i = p * 3 + ch;
                let off = sign * margin * hue[ch] / hue_mean + speck;
                let own = sample_bilinear(clean, ty, tx, ch) as f64;
                let lesion = (1.0 - texture) * own + texture * foreign.data()[i] as f64;
                let base = clean.data()[i] as f64;
                let content = (base + opacity * (lesion - base)).clamp(0.0, 1.0);
                reference.data_mut()[i] = content as f32;
                img.data_mut()[i] = (content + off).clamp(0.0, 1.0) as f32;
            }
        }
        for p in 0..side * side {
            if b.bits()[p] {
                mask.set(p / side, p % side, true);
            }
        }
    }
    (img, mask, reference)
}

/// Mean absolute channel-mean difference inside the mask between the two images.
pub fn lesion_contrast(clean: &Image, lesioned: &Image, mask: &Mask) -> f64 {
    let c = clean.shape()[2];
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, &b) in mask.bits().iter().enumerate() {
        if b {
            let a: f64 = (0..c).map(|k| clean.data()[p * c + k] as f64).sum::<f64>() / c as f64;
            let l: f64 = (0..c).map(|k| lesioned.data()[p * c + k] as f64).sum::<f64>() / c as f64;
            total += (l - a).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSummary {
    pub items: usize,
    pub margin: f64,
    /// Smallest per-image contrast between lesion pixels and the same pixels
    /// before the intensity shift.
    pub min_contrast: f64,
    pub mean_contrast: f64,
}

/// Writes the dataset under `out_dir` and returns it with a contrast summary.
pub fn synth_generate(
    cfg: &SynthConfig,
    seed: u64,
    hard: bool,
    out_dir: &Path,
) -> Result<(DatasetOnDisk, SynthSummary), PipelineError> {
    let io = |p: &Path, e: std::io::Error| PipelineError::Io(format!("{}: {e}", p.display()));
    for sub in ["train", "val", "test", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
    }
    let style = cfg.style(hard);
    let fam = Family::new(seed);
    let root = RngStream::new(seed, "synth");
    let plan = [
        (Split::Train, Label::Normal, cfg.train),
        (Split::Val, Label::Normal, cfg.val_normal),
        (Split::Val, Label::Abnormal, cfg.val_abnormal),
        (Split::Test, Label::Normal, cfg.test_normal),
        (Split::Test, Label::Abnormal, cfg.test_abnormal),
    ];
    let mut entries = Vec::new();
    let mut contrasts = Vec::new();
    for (split, label, count) in plan {
        let tag = format!("{}/{}", split.name(), if label == Label::Normal { "normal" } else { "abnormal" });
        let stream = root.split(&tag);
        for i in 0..count {
            let mut rng = stream.split_indexed("item", i as u64);
            let clean = normal_image(cfg.side, &fam, &mut rng);
            let short = if label == Label::Normal { "nrm" } else { "abn" };
            let id = format!("{}_{short}_{i:04}", split.name());
            let image_path = format!("{}/{id}.png", split.name());
            let mut mask_path = None;
            let img = if label == Label::Abnormal {
                let foreign = normal_image(cfg.side, &fam, &mut rng);
                let (img, mask, reference) = inject_lesions(&clean, &foreign, cfg, &style, &mut rng);
                contrasts.push(lesion_contrast(&reference, &img, &mask));
                let mp = format!("masks/{id}.png");
                save_mask_png(&out_dir.join(&mp), &mask)?;
                mask_path = Some(mp);
                img
            } else {
                clean
            };
            save_png(&out_dir.join(&image_path), &img)?;
            entries.push(ManifestEntry {
                id,
                split,
                label,
                image_path,
                mask_path,
            });
        }
    }
    let mpath = out_dir.join(MANIFEST);
    let mut f = fs::File::create(&mpath).map_err(|e| io(&mpath, e))?;
    for e in &entries {
        let line = serde_json::to_string(e).map_err(|e| PipelineError::Artifact(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| io(&mpath, e))?;
    }
    let summary = SynthSummary {
        items: entries.len(),
        margin: style.margin,
        min_contrast: contrasts.iter().copied().fold(f64::INFINITY, f64::min),
        mean_contrast: contrasts.iter().sum::<f64>() / contrasts.len().max(1) as f64,
    };
    Ok((
        DatasetOnDisk {
            root: out_dir.to_path_buf(),
            entries,
        },
        summary,
    ))
}
