use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detect::{reconstruction_loss, IgdConfig};
use crate::encoder::{sample_patch_pair, Arch, EncoderNet, HeadNets, Params, PatchPair, Stack, View};
use crate::imaging::Image;
use crate::numerics::{finite_diff_grad_coords, max_relative_error, RngStream, Scalar, Tensor};
use crate::pmsacl::{
    aug_classification_loss, centring_loss, pmsacl_loss, position_loss, CentreStrategy, ClassCentres, EmbeddingBatch,
    LossSwitches, TemperatureSchedule, NEIGHBOURS,
};

use super::PipelineError;

/// Denominator floor for the relative error.
const REL_FLOOR: f64 = 1e-3;

/// Maximum relative error per loss term over all points.
///
/// `f64` and `f32` are componentwise with [`REL_FLOOR`]; `f32_normwise` is
/// `‖a − n‖ / max(‖a‖, ‖n‖)` over the checked coordinates, which is not
/// dominated by single near-zero components carrying float32 rounding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub points: usize,
    pub f64: BTreeMap<String, f64>,
    pub f32: BTreeMap<String, f64>,
    pub f32_normwise: BTreeMap<String, f64>,
}

fn worst_of(v: &BTreeMap<String, f64>) -> f64 {
    v.values().copied().fold(0.0, f64::max)
}

impl GradcheckReport {
    /// Gated errors: componentwise in 64-bit, norm-wise in 32-bit.
    pub fn worst(&self) -> (f64, f64) {
        (worst_of(&self.f64), worst_of(&self.f32_normwise))
    }
}

fn normwise(a: &[f64], n: &[f64]) -> f64 {
    let l2 = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = l2(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let scale = l2(&mut a.iter().copied()).max(l2(&mut n.iter().copied()));
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// A differentiable function of a flat point, evaluated in precision `T`.
trait Term {
    fn point(&self) -> Vec<f64>;
    fn coords(&self, rng: &mut RngStream) -> Vec<usize>;
    fn step(&self) -> f64;
    fn eval<T: Scalar>(&self, x: &[f64]) -> Result<(f64, Vec<f64>), PipelineError>;
}

fn measure<P: Term>(term: &P, rng: &mut RngStream) -> Result<[f64; 3], PipelineError> {
    let x = term.point();
    let coords = term.coords(rng);
    let numeric = finite_diff_grad_coords(
        |v| term.eval::<f64>(v).map(|r| r.0).unwrap_or(f64::NAN),
        &x,
        &coords,
        term.step(),
    )?;
    let pick = |g: Vec<f64>| coords.iter().map(|&c| g[c]).collect::<Vec<_>>();
    let e64 = max_relative_error(&pick(term.eval::<f64>(&x)?.1), &numeric, REL_FLOOR);
    let a32 = pick(term.eval::<f32>(&x)?.1);
    Ok([e64, max_relative_error(&a32, &numeric, REL_FLOOR), normwise(&a32, &numeric)])
}

fn tensor<T: Scalar>(shape: &[usize], x: &[f64]) -> Tensor<T> {
    Tensor::from_fn(shape, |i| T::of(x[i]))
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn all_coords(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Paired views over a few classes, plus centres.
struct Embeddings {
    z: usize,
    x: Vec<f64>,
    classes: Vec<usize>,
    views: Vec<usize>,
    ids: Vec<String>,
    centres: Tensor<f64>,
    ctr: bool,
}

impl Embeddings {
    fn new(rng: &mut RngStream, ctr: bool) -> Self {
        let (sources, k, z) = (3, 3, 4);
        let (mut classes, mut views, mut ids) = (Vec::new(), Vec::new(), Vec::new());
        for s in 0..sources {
            let n = rng.index(k);
            for l in 0..2 {
                classes.push(n);
                views.push(l);
                ids.push(format!("s{s}"));
            }
        }
        let x = (0..classes.len() * z).map(|_| rng.normal()).collect();
        let centres = Tensor::from_fn(&[k, z], |_| 0.3 * rng.normal());
        Self {
            z,
            x,
            classes,
            views,
            ids,
            centres,
            ctr,
        }
    }
}

impl Term for Embeddings {
    fn point(&self) -> Vec<f64> {
        self.x.clone()
    }

    fn coords(&self, _: &mut RngStream) -> Vec<usize> {
        all_coords(self.x.len())
    }

    fn step(&self) -> f64 {
        1e-5
    }

    fn eval<T: Scalar>(&self, x: &[f64]) -> Result<(f64, Vec<f64>), PipelineError> {
        let batch = EmbeddingBatch {
            embeddings: tensor::<T>(&[self.classes.len(), self.z], x),
            class_indices: self.classes.clone(),
            view_indices: self.views.clone(),
            source_ids: self.ids.clone(),
        };
        let c = ClassCentres::new(self.centres.cast::<T>(), CentreStrategy::UntrainedEncoder)
            .map_err(|e| PipelineError::Numeric(e.to_string()))?
            .freeze();
        let out = if self.ctr {
            centring_loss(&batch, &c)
        } else {
            pmsacl_loss(&batch, &c, &TemperatureSchedule::default())
        }
        .map_err(|e| PipelineError::Numeric(e.to_string()))?;
        Ok((out.value.as_f64(), to_f64(out.grad.data())))
    }
}

/// Cross-entropy of a head's softmax, differentiated with respect to the embeddings.
struct HeadTerm {
    z: usize,
    rows: usize,
    heads: HeadNets<f64>,
    labels: Vec<usize>,
    x: Vec<f64>,
    pos: bool,
}

impl HeadTerm {
    fn new(rng: &mut RngStream, pos: bool) -> Self {
        let (z, k, rows) = (5, 4, 4);
        let heads = HeadNets::new(z, k, rng);
        let width = if pos { 2 * z } else { z };
        let classes = if pos { NEIGHBOURS } else { k };
        Self {
            z,
            rows,
            heads,
            labels: (0..rows).map(|_| rng.index(classes)).collect(),
            x: (0..rows * width).map(|_| rng.normal()).collect(),
            pos,
        }
    }
}

impl Term for HeadTerm {
    fn point(&self) -> Vec<f64> {
        self.x.clone()
    }

    fn coords(&self, _: &mut RngStream) -> Vec<usize> {
        all_coords(self.x.len())
    }

    fn step(&self) -> f64 {
        1e-5
    }

    fn eval<T: Scalar>(&self, x: &[f64]) -> Result<(f64, Vec<f64>), PipelineError> {
        let heads = self.heads.cast::<T>();
        let width = x.len() / self.rows;
        let rows: Vec<Vec<T>> = x.chunks(width).map(|r| r.iter().map(|&v| T::of(v)).collect()).collect();
        let probs: Vec<Vec<T>> = rows
            .iter()
            .map(|r| if self.pos { heads.pos_probs(&r[..self.z], &r[self.z..]) } else { heads.aug_probs(r) })
            .collect();
        let k = probs[0].len();
        let p = Tensor::new(vec![self.rows, k], probs.concat())?;
        let ce = if self.pos {
            position_loss(&p, &self.labels)
        } else {
            aug_classification_loss(&p, &self.labels)
        }
        .map_err(|e| PipelineError::Numeric(e.to_string()))?;
        let mut sink = heads.zeros_like();
        let mut grad = Vec::with_capacity(x.len());
        for (i, r) in rows.iter().enumerate() {
            let dp = ce.loss.grad.row(i);
            if self.pos {
                let (g1, g2) = heads.pos_backward(&r[..self.z], &r[self.z..], &probs[i], dp, &mut sink);
                grad.extend(to_f64(&g1));
                grad.extend(to_f64(&g2));
            } else {
                grad.extend(to_f64(&heads.aug_backward(r, &probs[i], dp, &mut sink)));
            }
        }
        Ok((ce.loss.value.as_f64(), grad))
    }
}

/// Reconstruction error over one global image and one local patch.
struct RecTerm {
    x: Tensor<f64>,
    p: Tensor<f64>,
    point: Vec<f64>,
    cfg: IgdConfig,
}

impl RecTerm {
    fn new(rng: &mut RngStream) -> Self {
        let cfg = IgdConfig {
            global_scales: 2,
            local_scales: 1,
            ..IgdConfig::default()
        };
        let x = Tensor::from_fn(&[24, 24, 3], |_| rng.uniform());
        let p = Tensor::from_fn(&[12, 12, 3], |_| rng.uniform());
        let mut point: Vec<f64> = x
            .data()
            .iter()
            .chain(p.data())
            .map(|&v| (v + 0.3 * (rng.uniform() - 0.5)).clamp(0.01, 0.99))
            .collect();
        // Keep every coordinate clear of the MAE kink.
        for (v, &t) in point.iter_mut().zip(x.data().iter().chain(p.data())) {
            if (*v - t).abs() < 1e-3 {
                *v = t + 1e-2;
            }
        }
        Self { x, p, point, cfg }
    }
}

impl Term for RecTerm {
    fn point(&self) -> Vec<f64> {
        self.point.clone()
    }

    fn coords(&self, rng: &mut RngStream) -> Vec<usize> {
        (0..30).map(|_| rng.index(self.point.len())).collect()
    }

    fn step(&self) -> f64 {
        1e-4
    }

    fn eval<T: Scalar>(&self, v: &[f64]) -> Result<(f64, Vec<f64>), PipelineError> {
        let n = self.x.len();
        let x = self.x.cast::<T>();
        let p = self.p.cast::<T>();
        let xr = tensor::<T>(self.x.shape(), &v[..n]);
        let pr = tensor::<T>(self.p.shape(), &v[n..]);
        let r = reconstruction_loss(&x, &xr, &[(&p, &pr)], &self.cfg)?;
        let mut g = to_f64(r.grad_global.data());
        g.extend(to_f64(r.grad_local[0].data()));
        Ok((r.value, g))
    }
}

/// The full weighted sum through encoder and heads.
struct Composed {
    arch: Arch,
    encoder: EncoderNet<f64>,
    heads: HeadNets<f64>,
    centres: Tensor<f64>,
    images: Vec<Image>,
    classes: Vec<usize>,
    pairs: Vec<PatchPair>,
}

impl Composed {
    fn new(rng: &mut RngStream) -> Result<Self, PipelineError> {
        let arch = Arch {
            in_channels: 3,
            channels: vec![4, 6, 8],
            embed_dim: 5,
        };
        let encoder = EncoderNet::new(&arch, rng);
        let heads = HeadNets::new(5, 3, rng);
        let centres = Tensor::from_fn(&[3, 5], |_| 0.3 * rng.normal());
        let mut image = |side: usize| -> Image { Tensor::from_fn(&[side, side, 3], |_| rng.uniform() as f32) };
        let images: Vec<Image> = (0..6).map(|_| image(8)).collect();
        let sources: Vec<Image> = (0..3).map(|_| image(8)).collect();
        let pairs = sources
            .iter()
            .map(|s| sample_patch_pair(s, 4, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let classes = (0..3).flat_map(|s| [s % 3, s % 3]).collect();
        Ok(Self {
            arch,
            encoder,
            heads,
            centres,
            images,
            classes,
            pairs,
        })
    }

    fn n_enc(&self) -> usize {
        self.encoder.param_count()
    }
}

fn flatten<T: Scalar, P: Params<T>>(p: &P) -> Vec<f64> {
    p.named().iter().flat_map(|(_, t)| to_f64(t.data())).collect()
}

fn unflatten<T: Scalar, P: Params<T>>(p: &mut P, v: &[f64]) {
    let mut k = 0;
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x = T::of(v[k]);
            k += 1;
        }
    }
}

/// First, middle and last entry of every parameter tensor.
fn spread<T: Scalar, P: Params<T>>(p: &P, base: usize, out: &mut Vec<usize>) -> usize {
    let mut off = base;
    for (_, t) in p.named() {
        for k in [0, t.len() / 2, t.len() - 1] {
            if out.last() != Some(&(off + k)) {
                out.push(off + k);
            }
        }
        off += t.len();
    }
    off
}

impl Term for Composed {
    fn point(&self) -> Vec<f64> {
        let mut v = flatten(&self.encoder);
        v.extend(flatten(&self.heads));
        v
    }

    fn coords(&self, _: &mut RngStream) -> Vec<usize> {
        let mut out = Vec::new();
        let next = spread(&self.encoder, 0, &mut out);
        spread(&self.heads, next, &mut out);
        out
    }

    fn step(&self) -> f64 {
        1e-5
    }

    fn eval<T: Scalar>(&self, v: &[f64]) -> Result<(f64, Vec<f64>), PipelineError> {
        let n = self.n_enc();
        let mut enc = self.encoder.cast::<T>();
        let mut heads = self.heads.cast::<T>();
        unflatten(&mut enc, &v[..n]);
        unflatten(&mut heads, &v[n..]);
        debug_assert_eq!(enc.embed_dim(), self.arch.embed_dim);
        let centres = ClassCentres::new(self.centres.cast::<T>(), CentreStrategy::Random)
            .map_err(|e| PipelineError::Numeric(e.to_string()))?
            .freeze();
        let ids = ["a", "b", "c"];
        let views: Vec<View<'_>> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, im)| View {
                image: im,
                class_index: self.classes[i],
                view_index: i % 2,
                source_id: ids[i / 2],
            })
            .collect();
        let switches = LossSwitches::default();
        let res = Stack {
            encoder: &enc,
            heads: &heads,
            centres: &centres,
            switches: &switches,
            schedule: &TemperatureSchedule::default(),
        }
        .run(&views, &self.pairs)?;
        let mut g = flatten(&res.grad_encoder);
        g.extend(flatten(&res.grad_heads));
        Ok((res.loss.value.as_f64(), g))
    }
}

/// Central differences against every analytic gradient at `points` random
/// points per term.
pub fn gradcheck_suite(seed: u64, points: usize) -> Result<GradcheckReport, PipelineError> {
    let root = RngStream::new(seed, "gradcheck");
    let mut out = [BTreeMap::new(), BTreeMap::new(), BTreeMap::new()];
    for name in ["ctr", "pmsacl", "aug", "pos", "rec", "composed"] {
        let mut worst = [0.0f64; 3];
        for i in 0..points {
            let mut rng = root.split(name).split_indexed("point", i as u64);
            let errs = match name {
                "ctr" => measure(&Embeddings::new(&mut rng, true), &mut rng)?,
                "pmsacl" => measure(&Embeddings::new(&mut rng, false), &mut rng)?,
                "aug" => measure(&HeadTerm::new(&mut rng, false), &mut rng)?,
                "pos" => measure(&HeadTerm::new(&mut rng, true), &mut rng)?,
                "rec" => measure(&RecTerm::new(&mut rng), &mut rng)?,
                _ => measure(&Composed::new(&mut rng)?, &mut rng)?,
            };
            for (w, e) in worst.iter_mut().zip(errs) {
                *w = w.max(e);
            }
        }
        for (m, w) in out.iter_mut().zip(worst) {
            m.insert(name.to_string(), w);
        }
    }
    let [f64s, f32s, f32n] = out;
    Ok(GradcheckReport {
        points,
        f64: f64s,
        f32: f32s,
        f32_normwise: f32n,
    })
}
