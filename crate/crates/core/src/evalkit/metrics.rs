use crate::imaging::Mask;

use super::EvalError;

fn check_labels(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(format!("score {i} is {}", scores[i])));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Midranks (1-based) of `values`; tied values share the mean of their ranks.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share (i+1+j)/2
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Area under the ROC curve; `labels[i]` is true for abnormal items.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let (pos, neg) = check_labels(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleLabel);
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// ROC points (fpr, tpr) from the strictest threshold down to the loosest.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, EvalError> {
    let (pos, neg) = check_labels(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleLabel);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Confusion {
    pub specificity: f64,
    pub sensitivity: f64,
    pub accuracy: f64,
}

/// Rates at `threshold`; a score at or above the threshold is called abnormal.
pub fn confusion_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Confusion, EvalError> {
    let (pos, neg) = check_labels(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleLabel);
    }
    let (mut tp, mut tn) = (0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Ok(Confusion {
        specificity: tn as f64 / neg as f64,
        sensitivity: tp as f64 / pos as f64,
        accuracy: (tp + tn) as f64 / scores.len() as f64,
    })
}

fn accuracy_at(scores: &[f64], labels: &[bool], t: f64) -> f64 {
    let correct = scores.iter().zip(labels).filter(|(&s, &l)| (s >= t) == l).count();
    correct as f64 / scores.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub accuracy: f64,
}

/// Accuracy-maximising threshold over the lowest score and every midpoint
/// between consecutive distinct scores; ties go to the higher threshold.
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdChoice, EvalError> {
    check_labels(scores, labels)?;
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut distinct = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let candidates = std::iter::once(distinct[0]).chain(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    let mut best = ThresholdChoice {
        threshold: f64::NAN,
        accuracy: -1.0,
    };
    for t in candidates {
        let acc = accuracy_at(scores, labels, t);
        if acc >= best.accuracy {
            best = ThresholdChoice { threshold: t, accuracy: acc };
        }
    }
    Ok(best)
}

fn same_shape(a: &Mask, b: &Mask) -> Result<(), EvalError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(EvalError::Shape(format!(
            "{}x{} mask against {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// (IoU, Dice); both are 1 when the two masks are empty.
pub fn iou_dice(pred: &Mask, gt: &Mask) -> Result<(f64, f64), EvalError> {
    same_shape(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.bits().iter().zip(gt.bits()) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p + g - inter;
    Ok((inter as f64 / union as f64, 2.0 * inter as f64 / (p + g) as f64))
}

pub fn binarise(map: &[f64], h: usize, w: usize, threshold: f64) -> Result<Mask, EvalError> {
    if map.len() != h * w {
        return Err(EvalError::Shape(format!("map of {} values for {h}x{w}", map.len())));
    }
    Ok(Mask::from_bits(h, w, map.iter().map(|&v| v >= threshold).collect()))
}

/// Per-region overlap integrated over false-positive rate up to `fpr_limit`,
/// divided by `fpr_limit`. Regions are 8-connected components of the masks.
pub fn pro_score(maps: &[Vec<f64>], masks: &[Mask], fpr_limit: f64) -> Result<f64, EvalError> {
    let curve = pro_curve(maps, masks)?;
    integrate_to(&curve, fpr_limit)
}

/// (fpr, mean region overlap) points from the strictest threshold down.
pub fn pro_curve(maps: &[Vec<f64>], masks: &[Mask]) -> Result<Vec<(f64, f64)>, EvalError> {
    if maps.len() != masks.len() {
        return Err(EvalError::Shape(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    // (score, region id or None for background)
    let mut pixels: Vec<(f64, Option<usize>)> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.len() != mask.bits().len() {
            return Err(EvalError::Shape(format!("map of {} values for {} pixels", map.len(), mask.bits().len())));
        }
        let (labels, n) = mask.components();
        let base = region_sizes.len();
        region_sizes.extend(std::iter::repeat(0).take(n));
        for (&s, &l) in map.iter().zip(&labels) {
            if !s.is_finite() {
                return Err(EvalError::NonFinite("score map value".into()));
            }
            if l == 0 {
                pixels.push((s, None));
            } else {
                let r = base + l as usize - 1;
                region_sizes[r] += 1;
                pixels.push((s, Some(r)));
            }
        }
    }
    if region_sizes.is_empty() {
        return Err(EvalError::NoRegions);
    }
    let background = pixels.iter().filter(|p| p.1.is_none()).count();
    if background == 0 {
        return Err(EvalError::Shape("no background pixels to measure false positives".into()));
    }
    let n_regions = region_sizes.len() as f64;
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut pts = vec![(0.0, 0.0)];
    let mut hit = vec![0usize; region_sizes.len()];
    let mut fp = 0usize;
    let mut i = 0;
    while i < pixels.len() {
        let s = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == s {
            match pixels[i].1 {
                Some(r) => hit[r] += 1,
                None => fp += 1,
            }
            i += 1;
        }
        let overlap: f64 = hit.iter().zip(&region_sizes).map(|(&h, &n)| h as f64 / n as f64).sum::<f64>() / n_regions;
        pts.push((fp as f64 / background as f64, overlap));
    }
    Ok(pts)
}

/// Trapezoid area under a curve with non-decreasing x, cut at `limit` by
/// linear interpolation and divided by `limit`.
pub fn integrate_to(curve: &[(f64, f64)], limit: f64) -> Result<f64, EvalError> {
    if !(limit > 0.0 && limit <= 1.0) {
        return Err(EvalError::Config(format!("fpr limit {limit} outside (0, 1]")));
    }
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * 0.5 * (y0 + y1);
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * 0.5 * (y0 + y);
            break;
        }
    }
    Ok(area / limit)
}

/// Pixel threshold maximising mean Dice over the given masks, searched over up
/// to `levels` quantiles of the pooled map values; ties go to the higher value.
pub fn select_pixel_threshold(maps: &[Vec<f64>], masks: &[Mask], levels: usize) -> Result<(f64, f64), EvalError> {
    if maps.is_empty() || maps.len() != masks.len() {
        return Err(EvalError::Empty);
    }
    let mut pooled: Vec<f64> = maps.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let levels = levels.max(2);
    let mut cands: Vec<f64> = (0..levels).map(|k| pooled[k * (pooled.len() - 1) / (levels - 1)]).collect();
    cands.dedup();
    let mut best = (f64::NAN, -1.0);
    for t in cands {
        let mut total = 0.0;
        for (map, mask) in maps.iter().zip(masks) {
            let pred = binarise(map, mask.height(), mask.width(), t)?;
            total += iou_dice(&pred, mask)?.1;
        }
        let d = total / maps.len() as f64;
        if d >= best.1 {
            best = (t, d);
        }
    }
    Ok(best)
}
