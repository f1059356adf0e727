use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::detect::{
    extract_patch_features, igd_fit, padim_fit, padim_score, DetectError, GaussianPatchModel, IgdModel, IGD_MAGIC,
    MODEL_MAGIC,
};
use crate::encoder::{pretrain, Checkpoint, EncoderError, EncoderNet, CHECKPOINT_MAGIC};
use crate::evalkit::{emit_report, evaluate, EvalError, EvalReport, Overlay, ScoredItem};
use crate::imaging::{Image, Mask};
use crate::numerics::{Container, NumericsError, RngStream, Tensor};

use super::config::{hex, ConfigValues};
use super::gradcheck::gradcheck_suite;
use super::synth::{synth_generate, DatasetOnDisk, Label, Split};
use super::PipelineError;

pub const SCORES_MAGIC: [u8; 4] = *b"PMSC";

/// Gradient-check gates: componentwise in 64-bit, norm-wise in 32-bit.
pub const GRADCHECK_TOL_F64: f64 = 1e-6;
pub const GRADCHECK_TOL_F32: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Pretrain,
    FitPadim,
    FitIgd,
    Score,
    Eval,
    Gradcheck,
    Report,
    Ablate,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Synth,
        Command::Pretrain,
        Command::FitPadim,
        Command::FitIgd,
        Command::Score,
        Command::Eval,
        Command::Gradcheck,
        Command::Report,
        Command::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain => "pretrain",
            Command::FitPadim => "fit-padim",
            Command::FitIgd => "fit-igd",
            Command::Score => "score",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::Report => "report",
            Command::Ablate => "ablate",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown command {s}")))
    }
}

#[derive(Clone, Debug)]
pub struct RunFlags {
    pub seed: u64,
    pub out: PathBuf,
    pub allow_hash_mismatch: bool,
    pub hard: bool,
}

impl PipelineError {
    /// 2 config, 3 missing or unusable artifact, 4 numeric failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use PipelineError as P;
        match self {
            P::Config(_) | P::HashMismatch { .. } => 2,
            P::Missing(_) | P::Artifact(_) => 3,
            P::Numeric(_) => 4,
            P::Io(_) => 1,
            P::Encoder(e) => encoder_code(e),
            P::Detect(e) => match e {
                DetectError::Config(_) | DetectError::TooSmall { .. } => 2,
                DetectError::WrongArtifact(_) | DetectError::Untrained => 3,
                DetectError::NonFinite(_) | DetectError::NotPositiveDefinite { .. } => 4,
                DetectError::Encoder(e) => encoder_code(e),
                DetectError::Numerics(e) => numerics_code(e),
                _ => 1,
            },
            P::Eval(e) => match e {
                EvalError::Config(_) => 2,
                EvalError::NonFinite(_) => 4,
                EvalError::Numerics(e) => numerics_code(e),
                _ => 1,
            },
            P::Numerics(e) => numerics_code(e),
        }
    }
}

fn encoder_code(e: &EncoderError) -> i32 {
    match e {
        EncoderError::Config(_) => 2,
        EncoderError::Checkpoint(_) => 3,
        EncoderError::NonFiniteLoss { .. } | EncoderError::AtBatch { .. } | EncoderError::Loss(_) => 4,
        EncoderError::Numerics(e) => numerics_code(e),
        _ => 1,
    }
}

fn numerics_code(e: &NumericsError) -> i32 {
    match e {
        NumericsError::NonFinite(_) => 4,
        NumericsError::Io(_) => 1,
        _ => 3,
    }
}

/// Artifact locations under `--out`.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn synth_info(&self) -> PathBuf {
        self.data().join("synth.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("pretrain").join("encoder.pmck")
    }

    pub fn curves(&self) -> PathBuf {
        self.root.join("pretrain").join("curves.json")
    }

    pub fn padim(&self) -> PathBuf {
        self.root.join("padim").join("model.pmdm")
    }

    pub fn igd(&self) -> PathBuf {
        self.root.join("igd").join("model.pmck")
    }

    pub fn scores(&self, det: &str) -> PathBuf {
        self.root.join("scores").join(format!("{det}.json"))
    }

    pub fn maps(&self, det: &str) -> PathBuf {
        self.root.join("scores").join(format!("{det}.maps"))
    }

    pub fn metrics(&self, det: &str) -> PathBuf {
        self.root.join("eval").join(det).join("metrics.json")
    }

    pub fn report(&self, det: &str) -> PathBuf {
        self.root.join("report").join(det)
    }

    pub fn gradcheck(&self) -> PathBuf {
        self.root.join("gradcheck.json")
    }

    pub fn ablate(&self) -> PathBuf {
        self.root.join("ablate")
    }
}

pub const DETECTORS: [&str; 2] = ["padim", "igd"];

fn io_err(p: &Path, e: impl fmt::Display) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", p.display()))
}

fn write_file(path: &Path, body: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, body).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), PipelineError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| io_err(path, e))?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|_| PipelineError::Missing(path.to_path_buf()))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Artifact(format!("{}: {e}", path.display())))
}

/// Reads a container, naming wrong magic as a wrong artifact type.
pub fn read_container(path: &Path, magic: &[u8; 4]) -> Result<Container, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::Missing(path.to_path_buf()));
    }
    Container::read(path, magic).map_err(|e| match e {
        NumericsError::BadMagic { expected, found } => PipelineError::Artifact(format!(
            "wrong artifact type in {}: expected a {expected} container, found {found}",
            path.display()
        )),
        NumericsError::Io(e) => io_err(path, e),
        other => PipelineError::Artifact(format!("{}: {other}", path.display())),
    })
}

fn check_hash(what: &Path, found: &str, cfg: &ConfigValues, flags: &RunFlags) -> Result<(), PipelineError> {
    let expected = cfg.hash_hex();
    if found == expected {
        return Ok(());
    }
    if flags.allow_hash_mismatch {
        log::warn!("{}: config hash {found} differs from current {expected}; continuing", what.display());
        Ok(())
    } else {
        Err(PipelineError::HashMismatch {
            artifact: what.display().to_string(),
            expected,
            found: found.to_string(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SynthInfo {
    config_hash: String,
    seed: u64,
    hard: bool,
    items: usize,
    margin: f64,
    min_contrast: f64,
    mean_contrast: f64,
}

/// One image's score; `split` is val or test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub split: Split,
    pub abnormal: bool,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub detector: String,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<ScoreRow>,
}

/// Scores with pixel maps for the abnormal images.
pub struct Scored {
    pub file: ScoreFile,
    pub maps: BTreeMap<String, Vec<f64>>,
    pub side: usize,
}

impl Scored {
    fn to_container(&self, hash: [u8; 32]) -> Result<Container, PipelineError> {
        let mut c = Container::new(SCORES_MAGIC, hash);
        for (id, m) in &self.maps {
            c.push(id.clone(), &Tensor::new(vec![self.side, self.side], m.clone())?);
        }
        c.trailer = json!({"kind": "maps", "detector": self.file.detector, "side": self.side});
        Ok(c)
    }
}

fn load_dataset(layout: &Layout, cfg: &ConfigValues, flags: &RunFlags) -> Result<DatasetOnDisk, PipelineError> {
    let info: SynthInfo = read_json(&layout.synth_info())?;
    check_hash(&layout.synth_info(), &info.config_hash, cfg, flags)?;
    if (info.seed, info.hard) != (flags.seed, flags.hard) {
        return Err(PipelineError::Config(format!(
            "dataset {} was generated with --seed {}{}; rerun synth or use the same flags",
            layout.data().display(),
            info.seed,
            if info.hard { " --hard" } else { "" }
        )));
    }
    DatasetOnDisk::load(&layout.data())
}

fn load_checkpoint(layout: &Layout, cfg: &ConfigValues, flags: &RunFlags) -> Result<Checkpoint, PipelineError> {
    let path = layout.checkpoint();
    let c = read_container(&path, &CHECKPOINT_MAGIC)?;
    let ck = Checkpoint::from_container(&c)
        .map_err(|e| PipelineError::Artifact(format!("{}: {e}", path.display())))?;
    check_hash(&path, &hex(&ck.config_hash), cfg, flags)?;
    Ok(ck)
}

fn check_side(ds: &DatasetOnDisk, images: &[(String, Image)]) -> Result<usize, PipelineError> {
    let side = images.first().map(|(_, im)| im.shape()[0]).ok_or_else(|| {
        PipelineError::Artifact(format!("{}: no training images", ds.root.display()))
    })?;
    Ok(side)
}

/// Validation and test images with labels, in manifest order.
struct EvalSet {
    id: String,
    split: Split,
    abnormal: bool,
    image: Image,
}

fn eval_set(ds: &DatasetOnDisk) -> Result<Vec<EvalSet>, PipelineError> {
    let mut out = Vec::new();
    for split in [Split::Val, Split::Test] {
        for e in ds.split(split) {
            out.push(EvalSet {
                id: e.id.clone(),
                split,
                abnormal: e.label == Label::Abnormal,
                image: ds.image(e)?,
            });
        }
    }
    Ok(out)
}

fn fit_padim_model(
    encoder: &EncoderNet<f32>,
    train: &[(String, Image)],
    cfg: &ConfigValues,
    seed: u64,
) -> Result<GaussianPatchModel, PipelineError> {
    let layers = cfg.padim_layers();
    let grids = train
        .par_iter()
        .map(|(_, im)| extract_patch_features(encoder, im, &layers))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = RngStream::new(seed, "padim/subset");
    Ok(padim_fit(&grids, cfg.padim_eps(), cfg.padim_subset(), &mut rng)?)
}

fn score_padim(
    model: &GaussianPatchModel,
    encoder: &EncoderNet<f32>,
    set: &[EvalSet],
    cfg: &ConfigValues,
    seed: u64,
    side: usize,
) -> Result<Scored, PipelineError> {
    let layers = cfg.padim_layers();
    let maps = set
        .par_iter()
        .map(|it| {
            let grid = extract_patch_features(encoder, &it.image, &layers)?;
            let m = padim_score(model, &grid)?;
            Ok((m.image_score, m.upsample(side, side)))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    scored("padim", set, maps, cfg, seed, side)
}

fn score_igd(model: &IgdModel, set: &[EvalSet], cfg: &ConfigValues, seed: u64, side: usize) -> Result<Scored, PipelineError> {
    let maps = set
        .par_iter()
        .map(|it| {
            let s = model.score(&it.image)?;
            Ok((s.score, s.map))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    scored("igd", set, maps, cfg, seed, side)
}

fn scored(
    detector: &str,
    set: &[EvalSet],
    maps: Vec<(f64, Vec<f64>)>,
    cfg: &ConfigValues,
    seed: u64,
    side: usize,
) -> Result<Scored, PipelineError> {
    let mut rows = Vec::with_capacity(set.len());
    let mut kept = BTreeMap::new();
    for (it, (score, map)) in set.iter().zip(maps) {
        if !score.is_finite() {
            return Err(PipelineError::Numeric(format!("{detector} score for {} is {score}", it.id)));
        }
        if it.abnormal {
            kept.insert(it.id.clone(), map);
        }
        rows.push(ScoreRow {
            id: it.id.clone(),
            split: it.split,
            abnormal: it.abnormal,
            score,
        });
    }
    Ok(Scored {
        file: ScoreFile {
            detector: detector.to_string(),
            config_hash: cfg.hash_hex(),
            seed,
            rows,
        },
        maps: kept,
        side,
    })
}

fn evaluate_scored(
    scored: &Scored,
    masks: &BTreeMap<String, Mask>,
    cfg: &ConfigValues,
    seed: u64,
) -> Result<EvalReport, PipelineError> {
    let items = |split: Split| -> Vec<ScoredItem> {
        scored
            .file
            .rows
            .iter()
            .filter(|r| r.split == split)
            .map(|r| ScoredItem {
                id: r.id.clone(),
                score: r.score,
                abnormal: r.abnormal,
                mask: masks.get(&r.id).cloned(),
                map: scored.maps.get(&r.id).cloned(),
            })
            .collect()
    };
    Ok(evaluate(
        &scored.file.detector,
        &items(Split::Val),
        &items(Split::Test),
        &cfg.eval()?,
        seed,
        &scored.file.config_hash,
    )?)
}

fn masks_of(ds: &DatasetOnDisk) -> Result<BTreeMap<String, Mask>, PipelineError> {
    let mut out = BTreeMap::new();
    for e in ds.entries.iter().filter(|e| e.split != Split::Train) {
        if let Some(m) = ds.mask(e)? {
            out.insert(e.id.clone(), m);
        }
    }
    Ok(out)
}

fn load_scored(layout: &Layout, det: &str, cfg: &ConfigValues, flags: &RunFlags) -> Result<Scored, PipelineError> {
    let path = layout.scores(det);
    let file: ScoreFile = read_json(&path)?;
    check_hash(&path, &file.config_hash, cfg, flags)?;
    let mpath = layout.maps(det);
    let c = read_container(&mpath, &SCORES_MAGIC)?;
    check_hash(&mpath, &hex(&c.config_hash), cfg, flags)?;
    let side = c.trailer.get("side").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let mut maps = BTreeMap::new();
    for (name, _) in &c.records {
        maps.insert(name.clone(), c.tensor::<f64>(name)?.into_data());
    }
    Ok(Scored { file, maps, side })
}

fn cmd_synth(layout: &Layout, cfg: &ConfigValues, flags: &RunFlags) -> Result<(), PipelineError> {
    let (ds, summary) = synth_generate(&cfg.synth(), flags.seed, flags.hard, &layout.data())?;
    log::info!(
        "synth: {} items under {} (lesion contrast min {:.4}, mean {:.4}, margin {})",
        ds.entries.len(),
        ds.root.display(),
        summary.min_contrast,
        summary.mean_contrast,
        summary.margin
    );
    write_json(
        &layout.synth_info(),
        &SynthInfo {
            config_hash: cfg.hash_hex(),
            seed: flags.seed,
            hard: flags.hard,
            items: summary.items,
            margin: summary.margin,
            min_contrast: summary.min_contrast,
            mean_contrast: summary.mean_contrast,
        },
    )
}

fn cmd_pretrain(layout: &Layout, cfg: &ConfigValues, flags: &RunFlags) -> Result<(), PipelineError> {
    let ds = load_dataset(layout, cfg, flags)?;
    let train = ds.images(Split::Train)?;
    let pcfg = cfg.pretrain()?;
    let ck = pretrain(&train, &pcfg, flags.seed, cfg.hash())?;
    if let Some(last) = ck.curves.last() {
        log::info!("pretrain: {} epochs, final loss {:.5}", ck.curves.len(), last.total);
    }
    let path = layout.checkpoint();
    write_file(&path, &ck.to_container().encode()?)?;
    write_json(&layout.curves(), &json!({"config_hash": cfg.hash_hex(), "seed": flags.seed, "epochs": ck.curves}))
}

fn cmd_fit_padim(layout: &Layout, cfg: &ConfigValues, flags: &RunFlags) -> Result<(), PipelineError> {
    let ds = load_dataset(layout, cfg, flags)?;
    let ck = load_checkpoint(layout, cfg, flags)?;
    let train = ds.images(Split::Train)?;
    let model = fit_padim_model(&ck.encoder, &train, cfg, flags.seed)?;
    log::info!("fit-padim: {}x{} positions, d = {}", model.h, model.w, model.dim());
    write_file(&layout.padim(), &model.to_container(cfg.hash()).encode()?)
}

fn cmd_fit_igd(layout: &Layout, cfg: &ConfigValues, flags: &RunFlags) -> Result<(), PipelineError> {
    let ds = load_dataset(layout, cfg, flags)?;
    let ck = load_checkpoint(layout, cfg, flags)?;
    let train = ds.images(Split::Train)?;
    check_side(&ds, &train)?;
    let refs: Vec<&Image> = train.iter().map(|(_, im)| im).collect();
    let model = igd_fit(&ck.encoder, &refs, &cfg.igd()?, flags.seed)?;
    log::info!("fit-igd: reconstruction error {:.5} -> {:.5}", model.rec_initial, model.rec_final);
    write_file(&layout.igd(), &model.to_container(cfg.hash())?.encode()?)
}

fn cmd_score(layout: &Layout, cfg: &ConfigValues, flags: &RunFlags) -> Result<(), PipelineError> {
    let have_padim = layout.padim().exists();
    let have_igd = layout.igd().exists();
    if !have_padim && !have_igd {
        return Err(PipelineError::Missing(layout.padim()));
    }
    let ds = load_dataset(layout, cfg, flags)?;
    let set = eval_set(&ds)?;
    let side = set.first().map(|s| s.image.shape()[0]).unwrap_or(0);
    let mut outputs = Vec::new();
    if have_padim {
        let ck = load_checkpoint(layout, cfg, flags)?;
        let c = read_container(&layout.padim(), &MODEL_MAGIC)?;
        check_hash(&layout.padim(), &hex(&c.config_hash), cfg, flags)?;
        let model = GaussianPatchModel::from_container(&c)?;
        outputs.push(score_padim(&model, &ck.encoder, &set, cfg, flags.seed, side)?);
    }
    if have_igd {
        let c = read_container(&layout.igd(), &IGD_MAGIC)?;
        check_hash(&layout.igd(), &hex(&c.config_hash), cfg, flags)?;
        let model = IgdModel::from_container(&c)?;
        outputs.push(score_igd(&model, &set, cfg, flags.seed, side)?);
    }
    for s in outputs {
        let det = s.file.detector.clone();
        write_json(&layout.scores(&det), &s.file)?;
        write_file(&layout.maps(&det), &s.to_container(cfg.hash())?.encode()?)?;
        log::info!("score: {det} on {} images", s.file.rows.len());
    }
    Ok(())
}

fn present_scores(layout: &Layout) -> Result<Vec<&'static str>, PipelineError> {
    let dets: Vec<_> = DETECTORS.into_iter().filter(|d| layout.scores(d).exists()).collect();
    if dets.is_empty() {
        return Err(PipelineError::Missing(layout.scores("padim")));
    }
    Ok(dets)
}

fn cmd_eval(layout: &Layout, cfg: &ConfigValues, flags: &RunFlags) -> Result<(), PipelineError> {
    let dets = present_scores(layout)?;
    let ds = load_dataset(layout, cfg, flags)?;
    let masks = masks_of(&ds)?;
    for det in dets {
        let s = load_scored(layout, det, cfg, flags)?;
        let report = evaluate_scored(&s, &masks, cfg, flags.seed)?;
        log::info!("eval: {det} AUROC {:.4}", report.auroc);
        write_file(&layout.metrics(det), report.to_json_string().as_bytes())?;
    }
    Ok(())
}

fn cmd_report(layout: &Layout, cfg: &ConfigValues, flags: &RunFlags) -> Result<(), PipelineError> {
    let dets: Vec<_> = DETECTORS.into_iter().filter(|d| layout.metrics(d).exists()).collect();
    if dets.is_empty() {
        return Err(PipelineError::Missing(layout.metrics("padim")));
    }
    let ds = load_dataset(layout, cfg, flags)?;
    let masks = masks_of(&ds)?;
    for det in dets {
        let v: serde_json::Value = read_json(&layout.metrics(det))?;
        let report = EvalReport::from_json(&v)?;
        check_hash(&layout.metrics(det), &report.config_hash, cfg, flags)?;
        let s = load_scored(layout, det, cfg, flags)?;
        let test: Vec<ScoredItem> = s
            .file
            .rows
            .iter()
            .filter(|r| r.split == Split::Test)
            .map(|r| ScoredItem {
                id: r.id.clone(),
                score: r.score,
                abnormal: r.abnormal,
                mask: masks.get(&r.id).cloned(),
                map: s.maps.get(&r.id).cloned(),
            })
            .collect();
        let mut picked = Vec::new();
        for e in ds.split(Split::Test).filter(|e| e.label == Label::Abnormal).take(cfg.overlays()) {
            if let (Some(map), Some(mask)) = (s.maps.get(&e.id), masks.get(&e.id)) {
                picked.push((e.id.clone(), ds.image(e)?, map, mask));
            }
        }
        let overlays: Vec<Overlay<'_>> = picked
            .iter()
            .map(|(id, image, map, mask)| Overlay {
                id,
                image,
                map,
                mask,
            })
            .collect();
        let written = emit_report(&report, &test, &overlays, &layout.report(det))?;
        log::info!("report: {det}, {} files", written.len());
    }
    Ok(())
}

fn cmd_gradcheck(layout: &Layout, flags: &RunFlags) -> Result<(), PipelineError> {
    let r = gradcheck_suite(flags.seed, 10)?;
    write_json(&layout.gradcheck(), &r)?;
    let (w64, w32) = r.worst();
    log::info!("gradcheck: worst 64-bit {w64:.3e}, 32-bit {w32:.3e}");
    if w64 >= GRADCHECK_TOL_F64 || w32 >= GRADCHECK_TOL_F32 {
        return Err(PipelineError::Numeric(format!(
            "gradient check failed: 64-bit {w64:.3e} (limit {GRADCHECK_TOL_F64:e}), 32-bit {w32:.3e} (limit {GRADCHECK_TOL_F32:e})"
        )));
    }
    Ok(())
}

/// One ablation cell: a name and the keys it overrides.
pub struct Cell {
    pub name: String,
    pub overrides: Vec<(&'static str, String)>,
}

/// Cell compared against `full` in the ablation summary.
pub const CCD_STYLE: &str = "ccd_medmix";

/// The loss-switch lattice, a random-initialisation baseline and the
/// |𝒜| sweep.
pub fn ablation_cells() -> Vec<Cell> {
    let cell = |name: &str, kv: &[(&'static str, &str)]| Cell {
        name: name.to_string(),
        overrides: kv.iter().map(|&(k, v)| (k, v.to_string())).collect(),
    };
    let mut cells = vec![
        cell("random_init", &[("encoder.epochs", "0")]),
        cell(
            "ccd",
            &[
                ("aug.strategy", "rotation"),
                ("loss.contrastive", "standard"),
                ("loss.centring", "false"),
                ("loss.kappa_scaling", "false"),
            ],
        ),
        cell(
            CCD_STYLE,
            &[("loss.contrastive", "standard"), ("loss.centring", "false"), ("loss.kappa_scaling", "false")],
        ),
        cell("pmsacl_loss", &[("loss.centring", "false"), ("loss.kappa_scaling", "false")]),
        cell("pmsacl_ctr", &[("loss.kappa_scaling", "false")]),
        cell("full", &[]),
    ];
    for k in 2..=6 {
        cells.push(Cell {
            name: format!("classes_{k}"),
            overrides: vec![("aug.classes", k.to_string())],
        });
    }
    cells
}

fn selected_cells(cfg: &ConfigValues) -> Result<Vec<Cell>, PipelineError> {
    let all = ablation_cells();
    let spec = cfg.get("ablate.cells");
    if spec == "all" {
        return Ok(all);
    }
    let wanted: Vec<&str> = spec.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    for w in &wanted {
        if !all.iter().any(|c| c.name == *w) {
            let names: Vec<_> = all.iter().map(|c| c.name.as_str()).collect();
            return Err(PipelineError::Config(format!("ablate.cells: unknown cell {w}; known: {}", names.join(", "))));
        }
    }
    Ok(all.into_iter().filter(|c| wanted.contains(&c.name.as_str())).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSummary {
    pub seed: u64,
    pub hard: bool,
    pub cells: BTreeMap<String, f64>,
    /// `full` AUROC minus the CCD-style AUROC, when both cells ran.
    pub full_minus_ccd: Option<f64>,
}

fn cmd_ablate(layout: &Layout, cfg: &ConfigValues, flags: &RunFlags) -> Result<(), PipelineError> {
    let cells = selected_cells(cfg)?;
    let dir = layout.ablate();
    let (ds, _) = synth_generate(&cfg.synth(), flags.seed, flags.hard, &dir.join("data"))?;
    let train = ds.images(Split::Train)?;
    let side = check_side(&ds, &train)?;
    let set = eval_set(&ds)?;
    let masks = masks_of(&ds)?;
    let mut done: BTreeMap<String, String> = BTreeMap::new();
    let mut aurocs = BTreeMap::new();
    for cell in &cells {
        let mut c = cfg.clone();
        for (k, v) in &cell.overrides {
            c.set(k, v)?;
        }
        let hash = c.hash_hex();
        let body = match done.get(&hash) {
            Some(body) => body.clone(),
            None => {
                log::info!("ablate: cell {}", cell.name);
                let ck = pretrain(&train, &c.pretrain()?, flags.seed, c.hash())?;
                let model = fit_padim_model(&ck.encoder, &train, &c, flags.seed)?;
                let s = score_padim(&model, &ck.encoder, &set, &c, flags.seed, side)?;
                let body = evaluate_scored(&s, &masks, &c, flags.seed)?.to_json_string();
                done.insert(hash, body.clone());
                body
            }
        };
        let v: serde_json::Value =
            serde_json::from_str(&body).map_err(|e| PipelineError::Artifact(format!("cell {}: {e}", cell.name)))?;
        let auc = EvalReport::from_json(&v)?.auroc;
        log::info!("ablate: {} AUROC {auc:.4}", cell.name);
        aurocs.insert(cell.name.clone(), auc);
        write_file(&dir.join(&cell.name).join("metrics.json"), body.as_bytes())?;
    }
    let full_minus_ccd = aurocs.get("full").zip(aurocs.get(CCD_STYLE)).map(|(f, c)| f - c);
    if let Some(d) = full_minus_ccd {
        let verdict = if d >= 0.0 { "holds" } else { "reversed" };
        log::info!("ablate: full vs {CCD_STYLE} ordering {verdict} ({d:+.4})");
    }
    write_json(
        &dir.join("summary.json"),
        &AblationSummary {
            seed: flags.seed,
            hard: flags.hard,
            cells: aurocs,
            full_minus_ccd,
        },
    )
}

/// Runs one command against the artifact directory `flags.out`.
pub fn run(command: Command, cfg: &ConfigValues, flags: &RunFlags) -> Result<(), PipelineError> {
    let layout = Layout::new(&flags.out);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers())
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    pool.install(|| match command {
        Command::Synth => cmd_synth(&layout, cfg, flags),
        Command::Pretrain => cmd_pretrain(&layout, cfg, flags),
        Command::FitPadim => cmd_fit_padim(&layout, cfg, flags),
        Command::FitIgd => cmd_fit_igd(&layout, cfg, flags),
        Command::Score => cmd_score(&layout, cfg, flags),
        Command::Eval => cmd_eval(&layout, cfg, flags),
        Command::Gradcheck => cmd_gradcheck(&layout, flags),
        Command::Report => cmd_report(&layout, cfg, flags),
        Command::Ablate => cmd_ablate(&layout, cfg, flags),
    })
}
