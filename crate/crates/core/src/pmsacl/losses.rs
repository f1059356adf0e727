use std::collections::HashMap;

use crate::numerics::{dot, Scalar, Tensor};

use super::{ClassCentres, LossError};

/// Smallest accepted `‖f - c‖` before centred normalisation.
pub const NORM_EPS: f64 = 1e-12;
/// Probability floor for the cross-entropy terms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Loss value with its gradient with respect to the loss input.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

/// Contrastive temperature `τ` and same-class shrink factor `α`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub tau: f64,
    pub alpha: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self { tau: 0.2, alpha: 2.0 }
    }
}

impl TemperatureSchedule {
    pub fn new(tau: f64, alpha: f64) -> Result<Self, LossError> {
        if !(tau > 0.0) || !(alpha > 0.0) || !tau.is_finite() || !alpha.is_finite() {
            return Err(LossError::Schedule { tau, alpha });
        }
        Ok(Self { tau, alpha })
    }
}

/// Inverse temperature for an anchor of class `n` against a sample of class `m`.
pub fn kappa(n: usize, m: usize, schedule: &TemperatureSchedule) -> f64 {
    if n == m {
        1.0 / (schedule.alpha * schedule.tau)
    } else {
        1.0 / schedule.tau
    }
}

/// Embeddings of paired weak views.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch<T> {
    pub embeddings: Tensor<T>,
    pub class_indices: Vec<usize>,
    pub view_indices: Vec<usize>,
    pub source_ids: Vec<String>,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn len(&self) -> usize {
        self.class_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_indices.is_empty()
    }

    /// Index of each sample's sibling view; fails unless every source
    /// appears exactly twice, once per view index, with one class.
    pub fn siblings(&self) -> Result<Vec<usize>, LossError> {
        let b = self.len();
        if self.embeddings.ndim() != 2 || self.embeddings.shape()[0] != b {
            return Err(LossError::Shape(format!(
                "embeddings {:?} for {b} samples",
                self.embeddings.shape()
            )));
        }
        if self.view_indices.len() != b || self.source_ids.len() != b {
            return Err(LossError::Pairing("index vectors differ in length".into()));
        }
        let mut seen: HashMap<&str, [Option<usize>; 2]> = HashMap::new();
        for i in 0..b {
            let l = self.view_indices[i];
            if l > 1 {
                return Err(LossError::Pairing(format!("view index {l} at sample {i}")));
            }
            let slot = &mut seen.entry(self.source_ids[i].as_str()).or_default()[l];
            if slot.is_some() {
                return Err(LossError::Pairing(format!("source {} has two view-{l} samples", self.source_ids[i])));
            }
            *slot = Some(i);
        }
        let mut sib = vec![0; b];
        for (id, pair) in seen {
            match pair {
                [Some(a), Some(c)] => {
                    if self.class_indices[a] != self.class_indices[c] {
                        return Err(LossError::Pairing(format!("views of {id} disagree on class")));
                    }
                    sib[a] = c;
                    sib[c] = a;
                }
                _ => return Err(LossError::Pairing(format!("source {id} lacks a view"))),
            }
        }
        Ok(sib)
    }
}

fn check_classes<T: Scalar>(classes: &[usize], centres: &ClassCentres<T>) -> Result<(), LossError> {
    match classes.iter().find(|&&n| n >= centres.n_classes()) {
        Some(&n) => Err(LossError::ClassOutOfRange { n, k: centres.n_classes() }),
        None => Ok(()),
    }
}

/// Mean squared distance of each embedding to its class centre.
pub fn centring_loss<T: Scalar>(batch: &EmbeddingBatch<T>, centres: &ClassCentres<T>) -> Result<LossOutput<T>, LossError> {
    check_classes(&batch.class_indices, centres)?;
    let b = batch.len();
    let inv_b = T::one() / T::of(b as f64);
    let mut grad = batch.embeddings.zeros_like();
    let mut total = T::zero();
    for i in 0..b {
        let c = centres.centre(batch.class_indices[i]);
        let e = batch.embeddings.row(i);
        let g = grad.row_mut(i);
        for k in 0..e.len() {
            let d = e[k] - c[k];
            total += d * d;
            g[k] = (d + d) * inv_b;
        }
    }
    Ok(LossOutput { value: total * inv_b, grad })
}

/// `(f - c) / ‖f - c‖` and the norm.
pub fn centre_normalize<T: Scalar>(embedding: &[T], centre: &[T]) -> Result<(Vec<T>, T), LossError> {
    let diff: Vec<T> = embedding.iter().zip(centre).map(|(&f, &c)| f - c).collect();
    let r = dot(&diff, &diff).sqrt();
    if !(r.as_f64() > NORM_EPS) {
        return Err(LossError::DegenerateDifference);
    }
    Ok((diff.into_iter().map(|v| v / r).collect(), r))
}

/// Per-anchor terms of the centred contrastive loss on normalised vectors.
///
/// Returns the mean loss and `G[i][j] = ∂L/∂sim(i, j)` (row-major `B×B`).
pub fn contrastive_from_normalized<T: Scalar>(
    normalized: &[Vec<T>],
    classes: &[usize],
    siblings: &[usize],
    schedule: &TemperatureSchedule,
) -> (T, Vec<T>) {
    let b = normalized.len();
    let inv_tau = T::of(1.0 / schedule.tau);
    let inv_b = T::one() / T::of(b as f64);
    let mut sims = vec![T::zero(); b * b];
    for i in 0..b {
        for j in i..b {
            let s = dot(&normalized[i], &normalized[j]);
            sims[i * b + j] = s;
            sims[j * b + i] = s;
        }
    }
    let mut total = T::zero();
    let mut g = vec![T::zero(); b * b];
    let mut logits = vec![T::zero(); b];
    for i in 0..b {
        let mut max = T::neg_infinity();
        for j in 0..b {
            if j != i {
                logits[j] = T::of(kappa(classes[i], classes[j], schedule)) * sims[i * b + j];
                max = max.max(logits[j]);
            }
        }
        let mut denom = T::zero();
        for j in 0..b {
            if j != i {
                denom += (logits[j] - max).exp();
            }
        }
        let lse = max + denom.ln();
        total += lse - inv_tau * sims[i * b + siblings[i]];
        for j in 0..b {
            if j != i {
                let p = (logits[j] - lse).exp();
                g[i * b + j] = T::of(kappa(classes[i], classes[j], schedule)) * p * inv_b;
            }
        }
        g[i * b + siblings[i]] -= inv_tau * inv_b;
    }
    (total * inv_b, g)
}

/// Centred contrastive loss with class-dependent temperature.
///
/// Each sample is centred by its own class centre and normalised; the
/// positive is the sibling view and the denominator runs over every other
/// sample in the batch, the sibling included.
pub fn pmsacl_loss<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    centres: &ClassCentres<T>,
    schedule: &TemperatureSchedule,
) -> Result<LossOutput<T>, LossError> {
    check_classes(&batch.class_indices, centres)?;
    let siblings = batch.siblings()?;
    let b = batch.len();
    let mut normalized = Vec::with_capacity(b);
    let mut radii = Vec::with_capacity(b);
    for i in 0..b {
        let (f, r) = centre_normalize(batch.embeddings.row(i), centres.centre(batch.class_indices[i]))
            .map_err(|_| LossError::DegenerateAt(i))?;
        normalized.push(f);
        radii.push(r);
    }
    let (value, g) = contrastive_from_normalized(&normalized, &batch.class_indices, &siblings, schedule);
    let z = batch.embeddings.shape()[1];
    let mut grad = batch.embeddings.zeros_like();
    let mut df = vec![T::zero(); z];
    for i in 0..b {
        df.iter_mut().for_each(|v| *v = T::zero());
        for j in 0..b {
            let w = g[i * b + j] + g[j * b + i];
            if w != T::zero() {
                for (d, &fj) in df.iter_mut().zip(&normalized[j]) {
                    *d += w * fj;
                }
            }
        }
        // Back through f = u / ‖u‖: (I - f fᵀ) df / ‖u‖.
        let proj = dot(&df, &normalized[i]);
        let out = grad.row_mut(i);
        for k in 0..z {
            out[k] = (df[k] - proj * normalized[i][k]) / radii[i];
        }
    }
    if !value.is_finite() {
        return Err(LossError::NonFinite("contrastive loss".into()));
    }
    Ok(LossOutput { value, grad })
}

fn check_rows<T: Scalar>(probs: &Tensor<T>, labels: &[usize], classes: usize) -> Result<(), LossError> {
    if probs.ndim() != 2 || probs.shape()[0] != labels.len() || probs.shape()[1] != classes {
        return Err(LossError::Shape(format!(
            "probabilities {:?} for {} labels over {classes} classes",
            probs.shape(),
            labels.len()
        )));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(LossError::ClassOutOfRange { n: l, k: classes });
        }
        let row = probs.row(i);
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-5 || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(LossError::NotProbabilities { row: i, sum: s });
        }
    }
    Ok(())
}

/// Cross-entropy output that also counts floored probabilities.
#[derive(Clone, Debug)]
pub struct CrossEntropy<T> {
    pub loss: LossOutput<T>,
    pub clamped: usize,
}

fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> CrossEntropy<T> {
    let b = labels.len();
    let inv_b = T::one() / T::of(b as f64);
    let floor = T::of(PROB_FLOOR);
    let mut grad = probs.zeros_like();
    let mut total = T::zero();
    let mut clamped = 0;
    for (i, &l) in labels.iter().enumerate() {
        let mut p = probs.row(i)[l];
        if p < floor {
            p = floor;
            clamped += 1;
            log::warn!("cross-entropy: probability at true class clamped to {PROB_FLOOR:e} (row {i})");
        }
        total -= p.ln();
        grad.row_mut(i)[l] = -inv_b / p;
    }
    CrossEntropy {
        loss: LossOutput { value: total * inv_b, grad },
        clamped,
    }
}

/// Mean `-log p[n]` against the augmentation class.
pub fn aug_classification_loss<T: Scalar>(probs: &Tensor<T>, class_indices: &[usize]) -> Result<CrossEntropy<T>, LossError> {
    let k = if probs.ndim() == 2 { probs.shape()[1] } else { 0 };
    check_rows(probs, class_indices, k)?;
    Ok(cross_entropy(probs, class_indices))
}

/// Number of relative positions predicted by the position head.
pub const NEIGHBOURS: usize = 8;

/// Mean `-log p[pos]` over the eight-way relative patch position.
pub fn position_loss<T: Scalar>(probs: &Tensor<T>, true_positions: &[usize]) -> Result<CrossEntropy<T>, LossError> {
    check_rows(probs, true_positions, NEIGHBOURS)?;
    Ok(cross_entropy(probs, true_positions))
}

/// Which loss terms are active and how they are weighted.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSwitches {
    pub contrastive: ContrastiveKind,
    pub centring: bool,
    pub kappa_scaling: bool,
    pub aug: bool,
    pub pos: bool,
    pub w_ctr: f64,
    pub w_con: f64,
    pub w_aug: f64,
    pub w_pos: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContrastiveKind {
    /// Centred, class-temperature loss.
    Pmsacl,
    /// Uncentred normalised-temperature loss (centres at the origin).
    Standard,
    Off,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            contrastive: ContrastiveKind::Pmsacl,
            centring: true,
            kappa_scaling: true,
            aug: true,
            pos: true,
            w_ctr: 1.0,
            w_con: 1.0,
            w_aug: 1.0,
            w_pos: 1.0,
        }
    }
}

impl LossSwitches {
    /// Schedule with `α` forced to 1 when scaling is switched off.
    pub fn effective_schedule(&self, schedule: &TemperatureSchedule) -> TemperatureSchedule {
        if self.kappa_scaling {
            *schedule
        } else {
            TemperatureSchedule { alpha: 1.0, ..*schedule }
        }
    }
}

/// Individually computed terms; `None` when the term is disabled.
#[derive(Clone, Debug, Default)]
pub struct LossParts<T> {
    pub ctr: Option<LossOutput<T>>,
    pub con: Option<LossOutput<T>>,
    pub aug: Option<LossOutput<T>>,
    pub pos: Option<LossOutput<T>>,
}

/// Weighted sum; gradients keep their per-input layout.
#[derive(Clone, Debug)]
pub struct TotalLoss<T> {
    pub value: T,
    pub terms: [Option<T>; 4],
    /// Gradient with respect to the view embeddings (`ctr` + `con`).
    pub grad_embeddings: Option<Tensor<T>>,
    pub grad_aug_probs: Option<Tensor<T>>,
    pub grad_pos_probs: Option<Tensor<T>>,
}

pub fn total_loss<T: Scalar>(parts: LossParts<T>, switches: &LossSwitches) -> TotalLoss<T> {
    let weigh = |p: Option<LossOutput<T>>, on: bool, w: f64| -> Option<LossOutput<T>> {
        p.filter(|_| on).map(|mut p| {
            let w = T::of(w);
            p.value *= w;
            p.grad.scale(w);
            p
        })
    };
    let ctr = weigh(parts.ctr, switches.centring, switches.w_ctr);
    let con = weigh(parts.con, switches.contrastive != ContrastiveKind::Off, switches.w_con);
    let aug = weigh(parts.aug, switches.aug, switches.w_aug);
    let pos = weigh(parts.pos, switches.pos, switches.w_pos);
    let terms = [
        ctr.as_ref().map(|p| p.value),
        con.as_ref().map(|p| p.value),
        aug.as_ref().map(|p| p.value),
        pos.as_ref().map(|p| p.value),
    ];
    let value = terms.iter().flatten().fold(T::zero(), |a, &v| a + v);
    let grad_embeddings = match (ctr, con) {
        (Some(a), Some(b)) => {
            let mut g = a.grad;
            g.add_assign(&b.grad);
            Some(g)
        }
        (Some(a), None) => Some(a.grad),
        (None, Some(b)) => Some(b.grad),
        (None, None) => None,
    };
    TotalLoss {
        value,
        terms,
        grad_embeddings,
        grad_aug_probs: aug.map(|p| p.grad),
        grad_pos_probs: pos.map(|p| p.grad),
    }
}
