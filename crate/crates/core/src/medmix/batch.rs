use rayon::prelude::*;

use crate::imaging::{Image, Mask};
use crate::numerics::RngStream;

use super::strategies::StrongAugment;
use super::weak::weak_augment;
use super::{AugConfig, MedMixError};

/// One weak view of a strongly augmented source image.
#[derive(Clone, Debug)]
pub struct AugmentedSample {
    pub image: Image,
    pub class_index: usize,
    pub view_index: usize,
    /// Pixels altered by the strong augmentation, before the weak view.
    pub lesion_mask: Mask,
    pub source_id: String,
}

/// Class-`n` strong augmentation followed by one weak view.
pub fn augment_for_class(
    image: &Image,
    n: usize,
    rng: &RngStream,
    cfg: &AugConfig,
    strategy: &dyn StrongAugment,
    donors: &[&Image],
) -> Result<Image, MedMixError> {
    let (strong, _) = strategy.apply(image, n, &mut rng.split("strong"), cfg, donors)?;
    Ok(weak_augment(&strong, &mut rng.split("view#0"), &cfg.weak))
}

/// Two weak views per source, each of a class drawn uniformly from
/// `0..n_classes`. Output order is source order, view 0 then view 1.
///
/// Every source gets its own child stream, so the result does not depend on
/// how rayon schedules the work.
pub fn make_pretrain_batch(
    sources: &[(&str, &Image)],
    rng: &RngStream,
    cfg: &AugConfig,
    strategy: &dyn StrongAugment,
) -> Result<Vec<AugmentedSample>, MedMixError> {
    let donors: Vec<&Image> = sources.iter().map(|(_, img)| *img).collect();
    let per_source: Vec<Result<[AugmentedSample; 2], MedMixError>> = sources
        .par_iter()
        .enumerate()
        .map(|(i, (id, img))| {
            let stream = rng.split_indexed("source", i as u64);
            let n = stream.split("class").index(cfg.n_classes);
            let (strong, mask) = strategy.apply(img, n, &mut stream.split("strong"), cfg, &donors)?;
            let view = |l: usize| AugmentedSample {
                image: weak_augment(&strong, &mut stream.split_indexed("view", l as u64), &cfg.weak),
                class_index: n,
                view_index: l,
                lesion_mask: mask.clone(),
                source_id: id.to_string(),
            };
            Ok([view(0), view(1)])
        })
        .collect();
    let mut out = Vec::with_capacity(sources.len() * 2);
    for pair in per_source {
        out.extend(pair?);
    }
    Ok(out)
}
