use std::fmt;
use std::str::FromStr;

use crate::imaging::Image;
use crate::medmix::{augment_for_class, AugConfig, StrongAugment};
use crate::numerics::{RngStream, Scalar, Tensor};

use super::LossError;

/// Anything that maps an image to an embedding vector.
pub trait Embedder<T: Scalar>: Sync {
    fn embed(&self, image: &Image) -> Vec<T>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CentreStrategy {
    /// Mean embeddings of the untrained encoder, frozen for all of training.
    UntrainedEncoder,
    /// Gaussian draws, frozen.
    Random,
    /// Scaled orthonormal axes (pairwise equidistant), frozen.
    Equidistant,
    /// Recomputed from the current encoder every `period` epochs.
    ReEstimate { period: usize },
}

impl fmt::Display for CentreStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CentreStrategy::UntrainedEncoder => write!(f, "untrained-encoder"),
            CentreStrategy::Random => write!(f, "random"),
            CentreStrategy::Equidistant => write!(f, "equidistant"),
            CentreStrategy::ReEstimate { period } => write!(f, "re-estimate({period})"),
        }
    }
}

impl FromStr for CentreStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "untrained-encoder" => Ok(Self::UntrainedEncoder),
            "random" => Ok(Self::Random),
            "equidistant" => Ok(Self::Equidistant),
            _ => {
                let inner = s
                    .strip_prefix("re-estimate(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| format!("unknown centre strategy {s:?}"))?;
                let period = inner.parse().map_err(|_| format!("bad re-estimate period {inner:?}"))?;
                if period == 0 {
                    return Err("re-estimate period must be positive".into());
                }
                Ok(Self::ReEstimate { period })
            }
        }
    }
}

/// Per-distribution mean embeddings, shape `[n_classes, Z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCentres<T> {
    centres: Tensor<T>,
    frozen: bool,
    strategy: CentreStrategy,
}

impl<T: Scalar> ClassCentres<T> {
    pub fn new(centres: Tensor<T>, strategy: CentreStrategy) -> Result<Self, LossError> {
        if centres.ndim() != 2 {
            return Err(LossError::Shape(format!("centres must be 2-d, got {:?}", centres.shape())));
        }
        if !centres.is_finite() {
            return Err(LossError::NonFinite("class centre".into()));
        }
        Ok(Self {
            centres,
            frozen: false,
            strategy,
        })
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn strategy(&self) -> CentreStrategy {
        self.strategy
    }

    pub fn n_classes(&self) -> usize {
        self.centres.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centres.shape()[1]
    }

    pub fn centre(&self, n: usize) -> &[T] {
        self.centres.row(n)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.centres
    }

    /// Whether the strategy allows replacing the centres after `epoch` completed epochs.
    pub fn due_for_update(&self, epoch: usize) -> bool {
        matches!(self.strategy, CentreStrategy::ReEstimate { period } if epoch > 0 && epoch % period == 0)
    }

    /// Replaces frozen centres; only legal at a re-estimation boundary.
    pub fn replace(&mut self, centres: Tensor<T>, epoch: usize) -> Result<(), LossError> {
        if self.frozen && !self.due_for_update(epoch) {
            return Err(LossError::CentresFrozen { epoch });
        }
        if centres.shape() != self.centres.shape() || !centres.is_finite() {
            return Err(LossError::Shape("replacement centres must match and be finite".into()));
        }
        self.centres = centres;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ClassCentres<U> {
        ClassCentres {
            centres: self.centres.cast(),
            frozen: self.frozen,
            strategy: self.strategy,
        }
    }
}

/// Mean embedding per class over the dataset, one augmentation draw per
/// image and class. Accumulated in 64-bit.
pub fn compute_centres<T: Scalar, E: Embedder<T>>(
    encoder: &E,
    dataset: &[&Image],
    aug_cfg: &AugConfig,
    strategy: &dyn StrongAugment,
    rng: &RngStream,
) -> Result<Tensor<T>, LossError> {
    use rayon::prelude::*;
    if dataset.is_empty() {
        return Err(LossError::EmptyDataset);
    }
    let k = aug_cfg.n_classes;
    let jobs: Vec<(usize, usize)> = (0..k).flat_map(|n| (0..dataset.len()).map(move |i| (n, i))).collect();
    let embeds: Vec<Result<Vec<T>, LossError>> = jobs
        .par_iter()
        .map(|&(n, i)| {
            let stream = rng.split_indexed("class", n as u64).split_indexed("image", i as u64);
            let view = augment_for_class(dataset[i], n, &stream, aug_cfg, strategy, dataset)
                .map_err(|e| LossError::Augment(e.to_string()))?;
            Ok(encoder.embed(&view))
        })
        .collect();
    let mut sums: Vec<Vec<f64>> = vec![Vec::new(); k];
    for ((n, _), e) in jobs.iter().zip(embeds) {
        let e = e?;
        let s = &mut sums[*n];
        if s.is_empty() {
            s.resize(e.len(), 0.0);
        }
        for (a, v) in s.iter_mut().zip(&e) {
            *a += v.as_f64();
        }
    }
    let z = sums[0].len();
    let inv = 1.0 / dataset.len() as f64;
    let data = sums.into_iter().flat_map(|s| s.into_iter().map(move |v| T::of(v * inv))).collect();
    Ok(Tensor::new(vec![k, z], data)?)
}

pub fn random_centres<T: Scalar>(n_classes: usize, dim: usize, rng: &mut RngStream) -> Tensor<T> {
    let scale = 1.0 / (dim as f64).sqrt();
    Tensor::from_fn(&[n_classes, dim], |_| T::of(rng.normal() * scale))
}

pub fn equidistant_centres<T: Scalar>(n_classes: usize, dim: usize, radius: f64) -> Tensor<T> {
    Tensor::from_fn(&[n_classes, dim], |i| {
        let (n, j) = (i / dim, i % dim);
        T::of(if j == n % dim { radius } else { 0.0 })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medmix::MedMix;

    struct MeanPixel;

    impl Embedder<f64> for MeanPixel {
        fn embed(&self, image: &Image) -> Vec<f64> {
            vec![image.sum() as f64 / image.len() as f64, image.data()[0] as f64]
        }
    }

    #[test]
    fn strategy_parse_roundtrip() {
        for s in ["untrained-encoder", "random", "equidistant", "re-estimate(5)"] {
            assert_eq!(s.parse::<CentreStrategy>().unwrap().to_string(), s);
        }
        assert!("re-estimate(0)".parse::<CentreStrategy>().is_err());
    }

    #[test]
    fn single_image_centre_equals_embedding() {
        let img = Tensor::from_fn(&[16, 16, 3], |i| (i % 9) as f32 / 9.0);
        let cfg = AugConfig::default();
        let rng = RngStream::new(1, "centres");
        let c: Tensor<f64> = compute_centres(&MeanPixel, &[&img], &cfg, &MedMix, &rng).unwrap();
        for n in 0..cfg.n_classes {
            let stream = rng.split_indexed("class", n as u64).split_indexed("image", 0);
            let view = augment_for_class(&img, n, &stream, &cfg, &MedMix, &[&img]).unwrap();
            assert_eq!(c.row(n), &MeanPixel.embed(&view)[..]);
        }
    }

    #[test]
    fn two_images_average() {
        let a = Tensor::filled(&[8, 8, 1], 0.2f32);
        let b = Tensor::filled(&[8, 8, 1], 0.6f32);
        let cfg = AugConfig {
            weak: crate::medmix::WeakConfig::identity(),
            n_classes: 2,
            ..Default::default()
        };
        let c: Tensor<f64> = compute_centres(&MeanPixel, &[&a, &b], &cfg, &MedMix, &RngStream::new(0, "c")).unwrap();
        // Class 0 is unaugmented: (u + v) / 2.
        let want = (MeanPixel.embed(&a)[0] + MeanPixel.embed(&b)[0]) / 2.0;
        assert!((c.row(0)[0] - want).abs() < 1e-15);
    }

    #[test]
    fn empty_dataset() {
        let r: Result<Tensor<f64>, _> =
            compute_centres(&MeanPixel, &[], &AugConfig::default(), &MedMix, &RngStream::new(0, "c"));
        assert!(matches!(r, Err(LossError::EmptyDataset)));
    }

    #[test]
    fn frozen_centres_refuse_replacement() {
        let t = Tensor::<f64>::zeros(&[2, 3]);
        let mut c = ClassCentres::new(t.clone(), CentreStrategy::UntrainedEncoder).unwrap().freeze();
        assert!(matches!(c.replace(t.clone(), 5), Err(LossError::CentresFrozen { .. })));
        let mut r = ClassCentres::new(t.clone(), CentreStrategy::ReEstimate { period: 5 }).unwrap().freeze();
        assert!(r.replace(t.clone(), 3).is_err());
        assert!(r.replace(t, 5).is_ok());
        let _ = &mut c;
    }
}
