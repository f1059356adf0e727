//! Forward and backward of the composed pre-training objective over one batch.

use rayon::prelude::*;

use super::nets::{EncoderNet, EncoderTrace, HeadNets};
use super::EncoderError;
use crate::imaging::{crop, dims, Image};
use crate::numerics::{RngStream, Scalar, Tensor};
use crate::pmsacl::{
    aug_classification_loss, centring_loss, pmsacl_loss, position_loss, total_loss, ClassCentres, ContrastiveKind,
    EmbeddingBatch, LossParts, LossSwitches, TemperatureSchedule, TotalLoss, NEIGHBOURS,
};

/// Samples handled by one reduction chunk. Fixed so that the summation order
/// does not depend on the thread count.
const CHUNK: usize = 8;

/// Row/column offsets of the eight neighbours, in label order.
pub const NEIGHBOUR_OFFSETS: [(isize, isize); NEIGHBOURS] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// A view fed to the encoder together with its labels.
#[derive(Clone, Debug)]
pub struct View<'a> {
    pub image: &'a Image,
    pub class_index: usize,
    pub view_index: usize,
    pub source_id: &'a str,
}

/// Centre patch, one of its eight neighbours and the neighbour's label.
#[derive(Clone, Debug)]
pub struct PatchPair {
    pub anchor: Image,
    pub neighbour: Image,
    pub position: usize,
}

/// Draws a patch pair: the anchor lies far enough inside the frame that every
/// neighbour at offset `3/8` of the patch side also fits.
pub fn sample_patch_pair(image: &Image, patch: usize, rng: &mut RngStream) -> Result<PatchPair, EncoderError> {
    let (h, w, _) = dims(image);
    if patch == 0 || patch > h || patch > w {
        return Err(EncoderError::Shape(format!("patch {patch} does not fit a {h}x{w} image")));
    }
    let off = (patch * 3 / 8).min((h - patch) / 2).min((w - patch) / 2);
    let y = off + rng.index(h - patch - 2 * off + 1);
    let x = off + rng.index(w - patch - 2 * off + 1);
    let position = rng.index(NEIGHBOURS);
    let (dy, dx) = NEIGHBOUR_OFFSETS[position];
    let ny = (y as isize + dy * off as isize) as usize;
    let nx = (x as isize + dx * off as isize) as usize;
    Ok(PatchPair {
        anchor: crop(image, y, x, patch, patch),
        neighbour: crop(image, ny, nx, patch, patch),
        position,
    })
}

/// Loss value, per-term values and accumulated parameter gradients.
#[derive(Clone, Debug)]
pub struct StackResult<T> {
    pub loss: TotalLoss<T>,
    pub grad_encoder: EncoderNet<T>,
    pub grad_heads: HeadNets<T>,
    pub clamped: usize,
}

pub struct Stack<'a, T> {
    pub encoder: &'a EncoderNet<T>,
    pub heads: &'a HeadNets<T>,
    pub centres: &'a ClassCentres<T>,
    pub switches: &'a LossSwitches,
    pub schedule: &'a TemperatureSchedule,
}

fn chunked<R: Send, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
{
    let chunks: Vec<std::ops::Range<usize>> = (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect();
    chunks.into_par_iter().map(f).collect()
}

impl<'a, T: Scalar> Stack<'a, T> {
    fn forward_all(&self, images: &[&Image]) -> Result<Vec<EncoderTrace<T>>, EncoderError> {
        images.par_iter().map(|img| self.encoder.forward(img)).collect()
    }

    /// Evaluates every enabled term and backpropagates into θ, β and γ.
    pub fn run(&self, views: &[View<'_>], pairs: &[PatchPair]) -> Result<StackResult<T>, EncoderError> {
        let sw = self.switches;
        let b = views.len();
        let z = self.encoder.embed_dim();
        let traces = self.forward_all(&views.iter().map(|v| v.image).collect::<Vec<_>>())?;
        let mut emb = Tensor::zeros(&[b, z]);
        for (i, t) in traces.iter().enumerate() {
            emb.row_mut(i).copy_from_slice(&t.embedding);
        }
        let batch = EmbeddingBatch {
            embeddings: emb,
            class_indices: views.iter().map(|v| v.class_index).collect(),
            view_indices: views.iter().map(|v| v.view_index).collect(),
            source_ids: views.iter().map(|v| v.source_id.to_string()).collect(),
        };
        let mut parts = LossParts::default();
        let mut clamped = 0;
        if sw.centring {
            parts.ctr = Some(centring_loss(&batch, self.centres)?);
        }
        let schedule = sw.effective_schedule(self.schedule);
        match sw.contrastive {
            ContrastiveKind::Pmsacl => parts.con = Some(pmsacl_loss(&batch, self.centres, &schedule)?),
            ContrastiveKind::Standard => {
                let origin = ClassCentres::new(self.centres.tensor().zeros_like(), self.centres.strategy())?;
                parts.con = Some(pmsacl_loss(&batch, &origin, &schedule)?);
            }
            ContrastiveKind::Off => {}
        }
        let mut aug_probs = None;
        if sw.aug {
            let k = self.heads.n_classes();
            let mut probs = Tensor::zeros(&[b, k]);
            for i in 0..b {
                probs.row_mut(i).copy_from_slice(&self.heads.aug_probs(batch.embeddings.row(i)));
            }
            let ce = aug_classification_loss(&probs, &batch.class_indices)?;
            clamped += ce.clamped;
            parts.aug = Some(ce.loss);
            aug_probs = Some(probs);
        }
        let mut pair_traces = Vec::new();
        let mut pos_probs = None;
        if sw.pos && !pairs.is_empty() {
            let imgs: Vec<&Image> = pairs.iter().flat_map(|p| [&p.anchor, &p.neighbour]).collect();
            pair_traces = self.forward_all(&imgs)?;
            let mut probs = Tensor::zeros(&[pairs.len(), NEIGHBOURS]);
            for i in 0..pairs.len() {
                let p = self.heads.pos_probs(&pair_traces[2 * i].embedding, &pair_traces[2 * i + 1].embedding);
                probs.row_mut(i).copy_from_slice(&p);
            }
            let labels: Vec<usize> = pairs.iter().map(|p| p.position).collect();
            let ce = position_loss(&probs, &labels)?;
            clamped += ce.clamped;
            parts.pos = Some(ce.loss);
            pos_probs = Some(probs);
        }
        let loss = total_loss(parts, sw);
        if !loss.value.is_finite() {
            return Err(EncoderError::NonFiniteLoss {
                batch: 0,
                epoch: 0,
                terms: format!("{:?}", loss.terms.map(|t| t.map(|v| v.as_f64()))),
            });
        }

        let enc = self.encoder;
        let heads = self.heads;
        let view_grads = chunked(b, |range| -> Result<(EncoderNet<T>, HeadNets<T>), EncoderError> {
            let mut ge = enc.zeros_like();
            let mut gh = heads.zeros_like();
            for i in range {
                let mut dz = match &loss.grad_embeddings {
                    Some(g) => g.row(i).to_vec(),
                    None => vec![T::zero(); z],
                };
                if let (Some(probs), Some(dp)) = (&aug_probs, &loss.grad_aug_probs) {
                    let d = heads.aug_backward(&traces[i].embedding, probs.row(i), dp.row(i), &mut gh);
                    dz.iter_mut().zip(d).for_each(|(a, v)| *a += v);
                }
                enc.backward(&traces[i], &dz, &mut ge)?;
            }
            Ok((ge, gh))
        });
        let pair_grads = match (&pos_probs, &loss.grad_pos_probs) {
            (Some(probs), Some(dp)) => chunked(pairs.len(), |range| -> Result<(EncoderNet<T>, HeadNets<T>), EncoderError> {
                let mut ge = enc.zeros_like();
                let mut gh = heads.zeros_like();
                for i in range {
                    let (ta, tb) = (&pair_traces[2 * i], &pair_traces[2 * i + 1]);
                    let (da, db) = heads.pos_backward(&ta.embedding, &tb.embedding, probs.row(i), dp.row(i), &mut gh);
                    enc.backward(ta, &da, &mut ge)?;
                    enc.backward(tb, &db, &mut ge)?;
                }
                Ok((ge, gh))
            }),
            _ => Vec::new(),
        };
        let mut grad_encoder = enc.zeros_like();
        let mut grad_heads = heads.zeros_like();
        for part in view_grads.into_iter().chain(pair_grads) {
            let (ge, gh) = part?;
            add_params(&mut grad_encoder, &ge);
            add_params(&mut grad_heads, &gh);
        }
        Ok(StackResult {
            loss,
            grad_encoder,
            grad_heads,
            clamped,
        })
    }
}

/// `acc += other`, tensor by tensor.
pub fn add_params<T: Scalar, P: super::Params<T>>(acc: &mut P, other: &P) {
    let src: Vec<&Tensor<T>> = other.named().into_iter().map(|(_, t)| t).collect();
    for (a, s) in acc.tensors_mut().into_iter().zip(src) {
        a.add_assign(s);
    }
}
