//! IGD-lite: auto-encoder reconstruction error blended with a Gaussian
//! latent anomaly head, with a global (whole image) and a local (patch)
//! pathway sharing one encoder.

use rayon::prelude::*;

use super::ssim::{msssim, msssim_grad};
use super::DetectError;
use crate::encoder::{add_params, Arch, DecoderNet, DecoderTrace, EncoderNet, EncoderTrace, Params, Sgd};
use crate::imaging::{crop, dims, Image};
use crate::numerics::{Container, RngStream, Scalar, Tensor};

pub const IGD_MAGIC: [u8; 4] = *b"PMCK";
/// Lower bound applied to the fitted latent variance.
pub const SIGMA2_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct IgdConfig {
    /// Weight of the reconstruction error in the image score.
    pub xi: f64,
    /// Weight of MAE against the MS-SSIM part of the reconstruction error.
    pub rho: f64,
    /// Weight of the global against the local MS-SSIM.
    pub nu: f64,
    pub kappa_reg: f64,
    pub global_scales: usize,
    pub local_scales: usize,
    pub local_patch: usize,
    pub local_stride: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub fine_tune_encoder: bool,
    /// Encoder learning rate as a fraction of `lr` when fine-tuning.
    pub encoder_lr_scale: f64,
    /// Weight of the latent term in the training loss.
    pub latent_weight: f64,
    /// Score with `1 − h` instead of `h` for the latent term.
    pub literal_score: bool,
    pub workers: usize,
}

impl Default for IgdConfig {
    fn default() -> Self {
        Self {
            xi: 0.5,
            rho: 0.5,
            nu: 0.5,
            kappa_reg: 1.0,
            global_scales: 3,
            local_scales: 2,
            local_patch: 32,
            local_stride: 32,
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            fine_tune_encoder: true,
            encoder_lr_scale: 0.1,
            latent_weight: 0.01,
            literal_score: false,
            workers: 1,
        }
    }
}

impl IgdConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        for (name, v) in [("xi", self.xi), ("rho", self.rho), ("nu", self.nu)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DetectError::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.kappa_reg > 0.0 && self.kappa_reg <= 1.0) {
            return Err(DetectError::Config(format!("kappa_reg = {} outside (0, 1]", self.kappa_reg)));
        }
        if self.local_patch == 0 || self.local_stride == 0 || self.batch_size == 0 {
            return Err(DetectError::Config("local patch, stride and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Top-left corners of the local patches tiling an `h × w` image.
pub fn patch_corners(h: usize, w: usize, patch: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if patch > h || patch > w {
        return out;
    }
    let mut y = 0;
    while y + patch <= h {
        let mut x = 0;
        while x + patch <= w {
            out.push((y, x));
            x += stride;
        }
        y += stride;
    }
    out
}

/// Reconstruction error with gradients for the global and every local reconstruction.
#[derive(Clone, Debug)]
pub struct RecLoss<T> {
    pub value: f64,
    pub mae: f64,
    pub m_global: f64,
    pub m_local: f64,
    pub grad_global: Tensor<T>,
    pub grad_local: Vec<Tensor<T>>,
}

/// `ρ·MAE(x, x̃) + (1−ρ)(1 − (ν·m_G + (1−ν)·m_L))`, where `m_L` averages the
/// local MS-SSIM over patch pairs and MAE is taken over the global pair.
pub fn reconstruction_loss<T: Scalar>(
    x: &Tensor<T>,
    recon: &Tensor<T>,
    local: &[(&Tensor<T>, &Tensor<T>)],
    cfg: &IgdConfig,
) -> Result<RecLoss<T>, DetectError> {
    if x.shape() != recon.shape() {
        return Err(DetectError::Shape(format!("input {:?} vs reconstruction {:?}", x.shape(), recon.shape())));
    }
    let n = x.len() as f64;
    let mut mae = 0.0;
    let mut grad_global = recon.zeros_like();
    for ((g, &a), &b) in grad_global.data_mut().iter_mut().zip(x.data()).zip(recon.data()) {
        let d = b.as_f64() - a.as_f64();
        mae += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = T::of(cfg.rho * sign / n);
    }
    mae /= n;
    let (m_global, g_ms) = msssim_grad(x, recon, cfg.global_scales)?;
    let wg = -(1.0 - cfg.rho) * cfg.nu;
    for (g, &v) in grad_global.data_mut().iter_mut().zip(g_ms.data()) {
        *g += T::of(wg * v.as_f64());
    }
    let mut m_local = 0.0;
    let mut grad_local = Vec::with_capacity(local.len());
    if !local.is_empty() {
        let wl = -(1.0 - cfg.rho) * (1.0 - cfg.nu) / local.len() as f64;
        for (p, r) in local {
            if p.shape() != r.shape() {
                return Err(DetectError::Shape("local patch and reconstruction differ".into()));
            }
            let (m, g) = msssim_grad(*p, *r, cfg.local_scales)?;
            m_local += m;
            grad_local.push(g.map(|v| T::of(wl * v.as_f64())));
        }
        m_local /= local.len() as f64;
    }
    // Without local pairs the local term falls back to the global score.
    let m_l = if local.is_empty() { m_global } else { m_local };
    if local.is_empty() {
        let extra = -(1.0 - cfg.rho) * (1.0 - cfg.nu);
        for (g, &v) in grad_global.data_mut().iter_mut().zip(g_ms.data()) {
            *g += T::of(extra * v.as_f64());
        }
    }
    let value = cfg.rho * mae + (1.0 - cfg.rho) * (1.0 - (cfg.nu * m_global + (1.0 - cfg.nu) * m_l));
    Ok(RecLoss {
        value,
        mae,
        m_global,
        m_local: m_l,
        grad_global,
        grad_local,
    })
}

/// `h(z) = 1 − exp(−‖z−μ‖²/σ²)` and its gradient with respect to `z`.
pub fn gaussian_head<T: Scalar>(z: &[T], mu: &[T], sigma2: f64) -> (f64, Vec<T>) {
    let d2: f64 = z.iter().zip(mu).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    let e = (-d2 / sigma2).exp();
    let grad = z
        .iter()
        .zip(mu)
        .map(|(a, b)| T::of(e * 2.0 * (a.as_f64() - b.as_f64()) / sigma2))
        .collect();
    (1.0 - e, grad)
}

/// Mean embedding and `σ² = κ/|D| · Σ‖z−μ‖²`, floored at [`SIGMA2_FLOOR`].
pub fn estimate_head<T: Scalar>(embeddings: &[Vec<T>], kappa_reg: f64) -> Result<(Vec<T>, f64), DetectError> {
    let first = embeddings.first().ok_or(DetectError::TooFewSamples(0))?;
    let n = embeddings.len() as f64;
    let mut mu = vec![0.0f64; first.len()];
    for e in embeddings {
        mu.iter_mut().zip(e).for_each(|(m, v)| *m += v.as_f64());
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let ss: f64 = embeddings
        .iter()
        .map(|e| e.iter().zip(&mu).map(|(a, b)| (a.as_f64() - b).powi(2)).sum::<f64>())
        .sum();
    let mut sigma2 = kappa_reg * ss / n;
    if !(sigma2 >= SIGMA2_FLOOR) {
        log::warn!("latent variance {sigma2:e} floored at {SIGMA2_FLOOR:e}");
        sigma2 = SIGMA2_FLOOR;
    }
    Ok((mu.into_iter().map(T::of).collect(), sigma2))
}

/// Image score from its two parts.
pub fn combine_score(rec: f64, head: f64, cfg: &IgdConfig) -> f64 {
    let latent = if cfg.literal_score { 1.0 - head } else { head };
    cfg.xi * rec + (1.0 - cfg.xi) * latent
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mu: Vec<f32>,
    pub sigma2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgdModel {
    pub encoder: EncoderNet<f32>,
    pub global: DecoderNet<f32>,
    pub local: DecoderNet<f32>,
    /// `None` until fitting has completed.
    pub head: Option<GaussianHead>,
    pub local_head: Option<GaussianHead>,
    pub cfg: IgdConfig,
    /// Mean training reconstruction error before and after fitting.
    pub rec_initial: f64,
    pub rec_final: f64,
}

fn arch_of(e: &EncoderNet<f32>) -> Arch {
    Arch {
        in_channels: e.in_channels(),
        channels: e.blocks.iter().map(|b| b.c_out()).collect(),
        embed_dim: e.embed_dim(),
    }
}

struct Forward {
    x: Tensor<f32>,
    enc: EncoderTrace<f32>,
    dec: DecoderTrace<f32>,
    patches: Vec<(Tensor<f32>, EncoderTrace<f32>, DecoderTrace<f32>)>,
}

/// Per-image score, its parts and the pixel heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct IgdScore {
    pub score: f64,
    pub rec: f64,
    pub head: f64,
    pub h: usize,
    pub w: usize,
    pub map: Vec<f64>,
}

fn min_max(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
    }
}

impl IgdModel {
    /// Fresh decoders on top of a pretrained encoder.
    pub fn new(encoder: EncoderNet<f32>, image_side: usize, cfg: IgdConfig, seed: u64) -> Result<Self, DetectError> {
        cfg.validate()?;
        let arch = arch_of(&encoder);
        let mut rng = RngStream::new(seed, "igd/init");
        let global = DecoderNet::new(&arch, image_side, &mut rng)?;
        let local = DecoderNet::new(&arch, cfg.local_patch, &mut rng)?;
        Ok(Self {
            encoder,
            global,
            local,
            head: None,
            local_head: None,
            cfg,
            rec_initial: f64::NAN,
            rec_final: f64::NAN,
        })
    }

    fn forward(&self, image: &Image) -> Result<Forward, DetectError> {
        let (h, w, _) = dims(image);
        if h != self.global.output_side() || w != h {
            return Err(DetectError::Shape(format!(
                "image {h}x{w} does not match decoder side {}",
                self.global.output_side()
            )));
        }
        let x: Tensor<f32> = image.clone();
        let enc = self.encoder.forward_tensor(x.clone())?;
        let dec = self.global.forward(&enc.embedding)?;
        let mut patches = Vec::new();
        for (py, px) in patch_corners(h, w, self.cfg.local_patch, self.cfg.local_stride) {
            let p = crop(image, py, px, self.cfg.local_patch, self.cfg.local_patch);
            let pe = self.encoder.forward_tensor(p.clone())?;
            let pd = self.local.forward(&pe.embedding)?;
            patches.push((p, pe, pd));
        }
        Ok(Forward { x, enc, dec, patches })
    }

    fn rec_of(&self, f: &Forward) -> Result<RecLoss<f32>, DetectError> {
        let local: Vec<(&Tensor<f32>, &Tensor<f32>)> = f.patches.iter().map(|(p, _, d)| (p, d.output())).collect();
        reconstruction_loss(&f.x, f.dec.output(), &local, &self.cfg)
    }

    fn mean_rec(&self, images: &[&Image]) -> Result<f64, DetectError> {
        let recs: Vec<Result<f64, DetectError>> =
            images.par_iter().map(|im| Ok(self.rec_of(&self.forward(im)?)?.value)).collect();
        let mut s = 0.0;
        for r in recs {
            s += r?;
        }
        Ok(s / images.len() as f64)
    }

    fn estimate_heads(&self, images: &[&Image]) -> Result<(GaussianHead, GaussianHead), DetectError> {
        let per: Vec<Result<(Vec<f32>, Vec<Vec<f32>>), DetectError>> = images
            .par_iter()
            .map(|im| {
                let f = self.forward(im)?;
                Ok((f.enc.embedding, f.patches.into_iter().map(|(_, e, _)| e.embedding).collect()))
            })
            .collect();
        let mut g = Vec::new();
        let mut l = Vec::new();
        for r in per {
            let (e, ps) = r?;
            g.push(e);
            l.extend(ps);
        }
        let (mu, sigma2) = estimate_head(&g, self.cfg.kappa_reg)?;
        let local = if l.is_empty() {
            GaussianHead { mu: mu.clone(), sigma2 }
        } else {
            let (mu, sigma2) = estimate_head(&l, self.cfg.kappa_reg)?;
            GaussianHead { mu, sigma2 }
        };
        Ok((GaussianHead { mu, sigma2 }, local))
    }

    /// Loss and gradients for one image: `ℓ_rec + h(z) + mean_p h_L(z_p)`.
    fn image_grads(
        &self,
        image: &Image,
        heads: &(GaussianHead, GaussianHead),
        ge: &mut EncoderNet<f32>,
        gg: &mut DecoderNet<f32>,
        gl: &mut DecoderNet<f32>,
    ) -> Result<f64, DetectError> {
        let f = self.forward(image)?;
        let rec = self.rec_of(&f)?;
        let lw = self.cfg.latent_weight as f32;
        let (hg, dz_head) = gaussian_head(&f.enc.embedding, &heads.0.mu, heads.0.sigma2);
        let mut dz = self.global.backward(&f.dec, &rec.grad_global, gg)?;
        dz.iter_mut().zip(&dz_head).for_each(|(a, b)| *a += lw * b);
        if self.cfg.fine_tune_encoder {
            self.encoder.backward(&f.enc, &dz, ge)?;
        }
        let np = f.patches.len().max(1) as f32;
        let mut hl = 0.0;
        for ((_, pe, pd), gpatch) in f.patches.iter().zip(&rec.grad_local) {
            let (h, dh) = gaussian_head(&pe.embedding, &heads.1.mu, heads.1.sigma2);
            hl += h;
            let mut dzp = self.local.backward(pd, gpatch, gl)?;
            dzp.iter_mut().zip(&dh).for_each(|(a, b)| *a += lw * b / np);
            if self.cfg.fine_tune_encoder {
                self.encoder.backward(pe, &dzp, ge)?;
            }
        }
        Ok(rec.value + self.cfg.latent_weight * (hg + hl / np as f64))
    }

    /// Image score and heatmap; refuses models whose heads were never fitted.
    pub fn score(&self, image: &Image) -> Result<IgdScore, DetectError> {
        let head = self.head.as_ref().ok_or(DetectError::Untrained)?;
        let local_head = self.local_head.as_ref().ok_or(DetectError::Untrained)?;
        let f = self.forward(image)?;
        let rec = self.rec_of(&f)?;
        let (hg, _) = gaussian_head(&f.enc.embedding, &head.mu, head.sigma2);
        let score = combine_score(rec.value, hg, &self.cfg);
        let (h, w, c) = dims(image);
        let mut global: Vec<f64> = (0..h * w)
            .map(|p| {
                (0..c)
                    .map(|k| (f.x.data()[p * c + k] - f.dec.output().data()[p * c + k]).abs() as f64)
                    .sum::<f64>()
                    / c as f64
            })
            .collect();
        min_max(&mut global);
        let mut local = vec![0.0; h * w];
        let mut cover = vec![0u32; h * w];
        let corners = patch_corners(h, w, self.cfg.local_patch, self.cfg.local_stride);
        let ps = self.cfg.local_patch;
        for ((py, px), (p, pe, pd)) in corners.iter().zip(&f.patches) {
            let n = p.len() as f64;
            let mae: f64 = p.data().iter().zip(pd.output().data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / n;
            let m = msssim(p, pd.output(), self.cfg.local_scales)?;
            let rec_p = self.cfg.rho * mae + (1.0 - self.cfg.rho) * (1.0 - m);
            let (hp, _) = gaussian_head(&pe.embedding, &local_head.mu, local_head.sigma2);
            let s = combine_score(rec_p, hp, &self.cfg);
            for y in *py..py + ps {
                for x in *px..px + ps {
                    local[y * w + x] += s;
                    cover[y * w + x] += 1;
                }
            }
        }
        for (v, &k) in local.iter_mut().zip(&cover) {
            if k > 0 {
                *v /= k as f64;
            }
        }
        min_max(&mut local);
        let map = global.iter().zip(&local).map(|(a, b)| a + b).collect();
        Ok(IgdScore {
            score,
            rec: rec.value,
            head: hg,
            h,
            w,
            map,
        })
    }

    pub fn to_container(&self, config_hash: [u8; 32]) -> Result<Container, DetectError> {
        let head = self.head.as_ref().ok_or(DetectError::Untrained)?;
        let local_head = self.local_head.as_ref().ok_or(DetectError::Untrained)?;
        let mut c = Container::new(IGD_MAGIC, config_hash);
        for (n, t) in self.encoder.named() {
            c.push(n, t);
        }
        for (n, t) in self.global.named() {
            c.push(format!("global.{n}"), t);
        }
        for (n, t) in self.local.named() {
            c.push(format!("local.{n}"), t);
        }
        c.push("head.mu", &Tensor::new(vec![head.mu.len()], head.mu.clone())?);
        c.push("local_head.mu", &Tensor::new(vec![local_head.mu.len()], local_head.mu.clone())?);
        let cfg = &self.cfg;
        c.trailer = serde_json::json!({
            "kind": "igd",
            "strides": self.encoder.blocks.iter().map(|b| b.stride).collect::<Vec<_>>(),
            "image_side": self.global.output_side(),
            "sigma2": head.sigma2,
            "local_sigma2": local_head.sigma2,
            "rec_initial": self.rec_initial,
            "rec_final": self.rec_final,
            "xi": cfg.xi, "rho": cfg.rho, "nu": cfg.nu, "kappa_reg": cfg.kappa_reg,
            "global_scales": cfg.global_scales, "local_scales": cfg.local_scales,
            "local_patch": cfg.local_patch, "local_stride": cfg.local_stride,
            "literal_score": cfg.literal_score,
        });
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, DetectError> {
        let t = &c.trailer;
        if t.get("kind").and_then(|v| v.as_str()) != Some("igd") {
            return Err(DetectError::WrongArtifact("expected an IGD model".into()));
        }
        let num = |k: &str| t.get(k).and_then(|v| v.as_f64()).ok_or_else(|| DetectError::Shape(format!("trailer key {k} missing")));
        let strides: Vec<usize> = t
            .get("strides")
            .and_then(|v| v.as_array())
            .map(|a| a.iter().filter_map(|s| s.as_u64()).map(|s| s as usize).collect())
            .ok_or_else(|| DetectError::Shape("trailer key strides missing".into()))?;
        let mut blocks = Vec::new();
        for (i, &stride) in strides.iter().enumerate() {
            let weight: Tensor<f32> = c.tensor(&format!("encoder.block{i}.weight"))?;
            let pad = weight.shape()[0] / 2;
            blocks.push(crate::encoder::Conv2d {
                weight,
                bias: c.tensor(&format!("encoder.block{i}.bias"))?,
                stride,
                pad,
            });
        }
        let affine = |p: &str| -> Result<crate::encoder::Affine<f32>, DetectError> {
            Ok(crate::encoder::Affine {
                weight: c.tensor(&format!("{p}.weight"))?,
                bias: c.tensor(&format!("{p}.bias"))?,
            })
        };
        let encoder = EncoderNet {
            blocks,
            proj0: affine("encoder.proj0")?,
            proj1: affine("encoder.proj1")?,
        };
        let decoder = |prefix: &str, side: usize| -> Result<DecoderNet<f32>, DetectError> {
            let seed = affine(&format!("{prefix}.decoder.seed"))?;
            let mut stages = Vec::new();
            let mut i = 0;
            while c.get(&format!("{prefix}.decoder.stage{i}.weight")).is_some() {
                stages.push(crate::encoder::Conv2d {
                    weight: c.tensor(&format!("{prefix}.decoder.stage{i}.weight"))?,
                    bias: c.tensor(&format!("{prefix}.decoder.stage{i}.bias"))?,
                    stride: 1,
                    pad: 1,
                });
                i += 1;
            }
            if stages.is_empty() {
                return Err(DetectError::Shape(format!("{prefix} decoder has no stages")));
            }
            let c0 = stages[0].c_in();
            let s0 = side >> stages.len();
            if seed.n_out() != s0 * s0 * c0 {
                return Err(DetectError::Shape(format!("{prefix} decoder seed does not match side {side}")));
            }
            Ok(DecoderNet {
                seed,
                stages,
                seed_shape: [s0, s0, c0],
            })
        };
        let side = num("image_side")? as usize;
        let cfg = IgdConfig {
            xi: num("xi")?,
            rho: num("rho")?,
            nu: num("nu")?,
            kappa_reg: num("kappa_reg")?,
            global_scales: num("global_scales")? as usize,
            local_scales: num("local_scales")? as usize,
            local_patch: num("local_patch")? as usize,
            local_stride: num("local_stride")? as usize,
            literal_score: t.get("literal_score").and_then(|v| v.as_bool()).unwrap_or(false),
            ..IgdConfig::default()
        };
        let model = Self {
            encoder,
            global: decoder("global", side)?,
            local: decoder("local", cfg.local_patch)?,
            head: Some(GaussianHead {
                mu: c.tensor::<f32>("head.mu")?.into_data(),
                sigma2: num("sigma2")?,
            }),
            local_head: Some(GaussianHead {
                mu: c.tensor::<f32>("local_head.mu")?.into_data(),
                sigma2: num("local_sigma2")?,
            }),
            rec_initial: num("rec_initial").unwrap_or(f64::NAN),
            rec_final: num("rec_final").unwrap_or(f64::NAN),
            cfg,
        };
        Ok(model)
    }
}

/// Trains both decoders (and fine-tunes the encoder when configured) on
/// normal images, then estimates the latent Gaussian heads.
pub fn igd_fit(encoder: &EncoderNet<f32>, dataset: &[&Image], cfg: &IgdConfig, seed: u64) -> Result<IgdModel, DetectError> {
    if dataset.is_empty() {
        return Err(DetectError::TooFewSamples(0));
    }
    let side = dims(dataset[0]).0;
    let mut model = IgdModel::new(encoder.clone(), side, cfg.clone(), seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| DetectError::Config(e.to_string()))?;
    pool.install(|| fit_inner(&mut model, dataset, seed))?;
    Ok(model)
}

fn fit_inner(model: &mut IgdModel, dataset: &[&Image], seed: u64) -> Result<(), DetectError> {
    let cfg = model.cfg.clone();
    model.rec_initial = model.mean_rec(dataset)?;
    let enc_shapes: Vec<Tensor<f32>> = model.encoder.named().into_iter().map(|(_, t)| t.zeros_like()).collect();
    let mut opt_enc = Sgd::new((cfg.lr * cfg.encoder_lr_scale) as f32, cfg.momentum as f32, &enc_shapes.iter().collect::<Vec<_>>());
    let g_shapes: Vec<Tensor<f32>> = model.global.named().into_iter().map(|(_, t)| t.zeros_like()).collect();
    let mut opt_g = Sgd::new(cfg.lr as f32, cfg.momentum as f32, &g_shapes.iter().collect::<Vec<_>>());
    let l_shapes: Vec<Tensor<f32>> = model.local.named().into_iter().map(|(_, t)| t.zeros_like()).collect();
    let mut opt_l = Sgd::new(cfg.lr as f32, cfg.momentum as f32, &l_shapes.iter().collect::<Vec<_>>());
    let root = RngStream::new(seed, "igd/train");
    for epoch in 0..cfg.epochs {
        let heads = model.estimate_heads(dataset)?;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        root.split_indexed("epoch", epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let m = &*model;
            let chunk_results: Vec<Result<_, DetectError>> = idx
                .chunks(4)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|ch| {
                    let mut ge = m.encoder.zeros_like();
                    let mut gg = m.global.zeros_like();
                    let mut gl = m.local.zeros_like();
                    let mut loss = 0.0;
                    for &i in ch {
                        loss += m.image_grads(dataset[i], &heads, &mut ge, &mut gg, &mut gl)?;
                    }
                    Ok((loss, ge, gg, gl))
                })
                .collect();
            let mut ge = model.encoder.zeros_like();
            let mut gg = model.global.zeros_like();
            let mut gl = model.local.zeros_like();
            let mut loss = 0.0;
            for r in chunk_results {
                let (l, e, g, lo) = r?;
                loss += l;
                add_params(&mut ge, &e);
                add_params(&mut gg, &g);
                add_params(&mut gl, &lo);
            }
            let inv = 1.0 / idx.len() as f32;
            for t in ge.tensors_mut().into_iter().chain(gg.tensors_mut()).chain(gl.tensors_mut()) {
                t.scale(inv);
            }
            loss /= idx.len() as f64;
            if !loss.is_finite() {
                return Err(DetectError::NonFinite(format!("IGD loss at epoch {epoch}, batch {bi}")));
            }
            epoch_loss += loss;
            if cfg.fine_tune_encoder {
                let g: Vec<&Tensor<f32>> = ge.named().into_iter().map(|(_, t)| t).collect();
                opt_enc.step(model.encoder.tensors_mut(), &g)?;
            }
            let g: Vec<&Tensor<f32>> = gg.named().into_iter().map(|(_, t)| t).collect();
            opt_g.step(model.global.tensors_mut(), &g)?;
            let g: Vec<&Tensor<f32>> = gl.named().into_iter().map(|(_, t)| t).collect();
            opt_l.step(model.local.tensors_mut(), &g)?;
        }
        log::info!("igd epoch {}: loss {:.5}", epoch + 1, epoch_loss / order.chunks(cfg.batch_size).len() as f64);
    }
    let (h, l) = model.estimate_heads(dataset)?;
    model.head = Some(h);
    model.local_head = Some(l);
    model.rec_final = model.mean_rec(dataset)?;
    Ok(())
}
