//! Pre-training loop and checkpoints.

use serde::{Deserialize, Serialize};

use super::nets::{Arch, EncoderNet, HeadNets, Params};
use super::optim::Sgd;
use super::stack::{sample_patch_pair, PatchPair, Stack, View};
use super::EncoderError;
use crate::imaging::Image;
use crate::medmix::{make_pretrain_batch, strategy_by_name, AugConfig};
use crate::numerics::{Container, RngStream, Tensor};
use crate::pmsacl::{
    compute_centres, equidistant_centres, random_centres, CentreStrategy, ClassCentres, LossSwitches,
    TemperatureSchedule,
};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PMCK";

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub arch: Arch,
    pub aug: AugConfig,
    /// Name of the strong augmentation, see [`crate::medmix::STRATEGY_NAMES`].
    pub strategy: String,
    pub switches: LossSwitches,
    pub schedule: TemperatureSchedule,
    pub centres: CentreStrategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Side of the square patches used by the position loss.
    pub patch_size: usize,
    /// Rescales the joint encoder and head gradient to at most this L2 norm.
    pub grad_clip: Option<f64>,
    /// Thread count; results do not depend on it.
    pub workers: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::default(),
            aug: AugConfig::default(),
            strategy: "medmix".into(),
            switches: LossSwitches::default(),
            schedule: TemperatureSchedule::default(),
            centres: CentreStrategy::UntrainedEncoder,
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            patch_size: 32,
            grad_clip: Some(20.0),
            workers: 1,
        }
    }
}

/// Mean term values over the batches of one epoch; disabled terms are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub total: f64,
    pub ctr: Option<f64>,
    pub con: Option<f64>,
    pub aug: Option<f64>,
    pub pos: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderNet<f32>,
    pub heads: HeadNets<f32>,
    pub centres: ClassCentres<f32>,
    pub config_hash: [u8; 32],
    pub curves: Vec<EpochLosses>,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    kind: String,
    centre_strategy: String,
    strides: Vec<usize>,
    curves: Vec<EpochLosses>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CHECKPOINT_MAGIC, self.config_hash);
        for (name, t) in self.encoder.named().into_iter().chain(self.heads.named()) {
            c.push(name, t);
        }
        c.push("centres", self.centres.tensor());
        let trailer = Trailer {
            kind: "pretrain".into(),
            centre_strategy: self.centres.strategy().to_string(),
            strides: self.encoder.blocks.iter().map(|b| b.stride).collect(),
            curves: self.curves.clone(),
        };
        c.trailer = serde_json::to_value(trailer).expect("trailer serialises");
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, EncoderError> {
        let trailer: Trailer = serde_json::from_value(c.trailer.clone())
            .map_err(|e| EncoderError::Checkpoint(format!("trailer: {e}")))?;
        if trailer.kind != "pretrain" {
            return Err(EncoderError::Checkpoint(format!("expected a pretraining checkpoint, found {:?}", trailer.kind)));
        }
        let mut blocks = Vec::new();
        for (i, &stride) in trailer.strides.iter().enumerate() {
            let weight: Tensor<f32> = c.tensor(&format!("encoder.block{i}.weight"))?;
            let bias = c.tensor(&format!("encoder.block{i}.bias"))?;
            let pad = weight.shape().first().copied().unwrap_or(1) / 2;
            blocks.push(super::Conv2d { weight, bias, stride, pad });
        }
        let affine = |p: &str| -> Result<super::Affine<f32>, EncoderError> {
            Ok(super::Affine {
                weight: c.tensor(&format!("{p}.weight"))?,
                bias: c.tensor(&format!("{p}.bias"))?,
            })
        };
        let encoder = EncoderNet {
            blocks,
            proj0: affine("encoder.proj0")?,
            proj1: affine("encoder.proj1")?,
        };
        let heads = HeadNets {
            aug: affine("heads.aug")?,
            pos: affine("heads.pos")?,
        };
        let strategy: CentreStrategy = trailer.centre_strategy.parse().map_err(EncoderError::Checkpoint)?;
        let centres = ClassCentres::new(c.tensor("centres")?, strategy)?.freeze();
        let ck = Self {
            encoder,
            heads,
            centres,
            config_hash: c.config_hash,
            curves: trailer.curves,
        };
        ck.validate()?;
        Ok(ck)
    }

    fn validate(&self) -> Result<(), EncoderError> {
        let e = &self.encoder;
        let mut cin = e.in_channels();
        for (i, b) in e.blocks.iter().enumerate() {
            if b.weight.ndim() != 4 || b.c_in() != cin || b.bias.shape() != [b.c_out()] {
                return Err(EncoderError::Checkpoint(format!("block {i} has inconsistent shapes")));
            }
            cin = b.c_out();
        }
        let z = e.embed_dim();
        let ok = e.proj0.n_in() == cin
            && e.proj1.n_in() == e.proj0.n_out()
            && self.heads.aug.n_in() == z
            && self.heads.pos.n_in() == 2 * z
            && self.centres.dim() == z
            && self.centres.n_classes() == self.heads.n_classes();
        if !ok {
            return Err(EncoderError::Checkpoint("head, projection or centre shapes disagree".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), EncoderError> {
        Ok(self.to_container().write(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, EncoderError> {
        Self::from_container(&Container::read(path, &CHECKPOINT_MAGIC)?)
    }
}

fn initial_centres(
    strategy: CentreStrategy,
    encoder: &EncoderNet<f32>,
    images: &[&Image],
    cfg: &PretrainConfig,
    rng: &RngStream,
) -> Result<Tensor<f32>, EncoderError> {
    let k = cfg.aug.n_classes;
    let z = cfg.arch.embed_dim;
    let strong = strategy_by_name(&cfg.strategy).ok_or_else(|| EncoderError::Config(format!("unknown strategy {}", cfg.strategy)))?;
    Ok(match strategy {
        CentreStrategy::UntrainedEncoder | CentreStrategy::ReEstimate { .. } => {
            compute_centres(encoder, images, &cfg.aug, strong.as_ref(), &rng.split("centres"))?
        }
        CentreStrategy::Random => random_centres(k, z, &mut rng.split("centres")),
        CentreStrategy::Equidistant => equidistant_centres(k, z, 1.0),
    })
}

/// Trains θ, β and γ on normal images; centres are fixed before the first
/// step according to `cfg.centres`.
pub fn pretrain(
    dataset: &[(String, Image)],
    cfg: &PretrainConfig,
    seed: u64,
    config_hash: [u8; 32],
) -> Result<Checkpoint, EncoderError> {
    if dataset.is_empty() {
        return Err(EncoderError::Config("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(EncoderError::Config("batch size must be positive".into()));
    }
    cfg.aug.validate().map_err(|e| EncoderError::Config(e.to_string()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| EncoderError::Config(e.to_string()))?;
    pool.install(|| pretrain_inner(dataset, cfg, seed, config_hash))
}

fn clip_joint(enc: &mut EncoderNet<f32>, heads: &mut HeadNets<f32>, limit: f64) {
    let sq: f64 = enc
        .named()
        .into_iter()
        .chain(heads.named())
        .flat_map(|(_, t)| t.data().iter().map(|&v| (v as f64) * (v as f64)).collect::<Vec<_>>())
        .sum();
    let norm = sq.sqrt();
    if norm > limit {
        let s = (limit / norm) as f32;
        for t in enc.tensors_mut().into_iter().chain(heads.tensors_mut()) {
            t.scale(s);
        }
    }
}

fn pretrain_inner(
    dataset: &[(String, Image)],
    cfg: &PretrainConfig,
    seed: u64,
    config_hash: [u8; 32],
) -> Result<Checkpoint, EncoderError> {
    let root = RngStream::new(seed, "pretrain");
    let mut init = RngStream::new(seed, "init");
    let mut encoder: EncoderNet<f32> = EncoderNet::new(&cfg.arch, &mut init);
    let mut heads: HeadNets<f32> = HeadNets::new(cfg.arch.embed_dim, cfg.aug.n_classes, &mut init);
    let images: Vec<&Image> = dataset.iter().map(|(_, im)| im).collect();
    let strong = strategy_by_name(&cfg.strategy).ok_or_else(|| EncoderError::Config(format!("unknown strategy {}", cfg.strategy)))?;
    let mut centres = ClassCentres::new(initial_centres(cfg.centres, &encoder, &images, cfg, &root)?, cfg.centres)?.freeze();

    let mut params_enc: Vec<&Tensor<f32>> = Vec::new();
    for (_, t) in encoder.named() {
        params_enc.push(t);
    }
    let mut opt_enc = Sgd::new(cfg.lr as f32, cfg.momentum as f32, &params_enc);
    let params_heads: Vec<&Tensor<f32>> = heads.named().into_iter().map(|(_, t)| t).collect();
    let mut opt_heads = Sgd::new(cfg.lr as f32, cfg.momentum as f32, &params_heads);

    let mut curves = Vec::new();
    for epoch in 0..cfg.epochs {
        let ep_rng = root.split_indexed("epoch", epoch as u64);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        ep_rng.split("shuffle").shuffle(&mut order);
        let mut sums = [0.0f64; 5];
        let mut counts = [0usize; 5];
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let brng = ep_rng.split_indexed("batch", bi as u64);
            let sources: Vec<(&str, &Image)> = idx.iter().map(|&i| (dataset[i].0.as_str(), &dataset[i].1)).collect();
            let samples = make_pretrain_batch(&sources, &brng.split("views"), &cfg.aug, strong.as_ref())
                .map_err(|e| EncoderError::Config(e.to_string()))?;
            let views: Vec<View<'_>> = samples
                .iter()
                .map(|s| View {
                    image: &s.image,
                    class_index: s.class_index,
                    view_index: s.view_index,
                    source_id: &s.source_id,
                })
                .collect();
            let pairs: Vec<PatchPair> = if cfg.switches.pos {
                sources
                    .iter()
                    .enumerate()
                    .map(|(i, (_, img))| sample_patch_pair(img, cfg.patch_size, &mut brng.split_indexed("pos", i as u64)))
                    .collect::<Result<_, _>>()?
            } else {
                Vec::new()
            };
            let stack = Stack {
                encoder: &encoder,
                heads: &heads,
                centres: &centres,
                switches: &cfg.switches,
                schedule: &cfg.schedule,
            };
            let res = stack.run(&views, &pairs).map_err(|e| match e {
                EncoderError::NonFiniteLoss { terms, .. } => EncoderError::NonFiniteLoss { epoch, batch: bi, terms },
                other => EncoderError::AtBatch {
                    epoch,
                    batch: bi,
                    message: other.to_string(),
                },
            })?;
            let total = res.loss.value as f64;
            sums[0] += total;
            counts[0] += 1;
            for (k, t) in res.loss.terms.iter().enumerate() {
                if let Some(v) = t {
                    sums[k + 1] += *v as f64;
                    counts[k + 1] += 1;
                }
            }
            if !res.grad_encoder.named().iter().all(|(_, t)| t.is_finite()) {
                return Err(EncoderError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    terms: "non-finite encoder gradient".into(),
                });
            }
            let mut res = res;
            if let Some(limit) = cfg.grad_clip {
                clip_joint(&mut res.grad_encoder, &mut res.grad_heads, limit);
            }
            let g_enc: Vec<&Tensor<f32>> = res.grad_encoder.named().into_iter().map(|(_, t)| t).collect();
            opt_enc.step(encoder.tensors_mut(), &g_enc)?;
            let g_heads: Vec<&Tensor<f32>> = res.grad_heads.named().into_iter().map(|(_, t)| t).collect();
            opt_heads.step(heads.tensors_mut(), &g_heads)?;
        }
        let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
        let row = EpochLosses {
            epoch: epoch + 1,
            total: mean(0).unwrap_or(0.0),
            ctr: mean(1),
            con: mean(2),
            aug: mean(3),
            pos: mean(4),
        };
        log::info!("epoch {}: total {:.5} {:?}", row.epoch, row.total, row);
        curves.push(row);
        if centres.due_for_update(epoch + 1) {
            let fresh = compute_centres(
                &encoder,
                &images,
                &cfg.aug,
                strong.as_ref(),
                &root.split_indexed("recentre", epoch as u64 + 1),
            )?;
            centres.replace(fresh, epoch + 1)?;
        }
    }
    Ok(Checkpoint {
        encoder,
        heads,
        centres,
        config_hash,
        curves,
    })
}
