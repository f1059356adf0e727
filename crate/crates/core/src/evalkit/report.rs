use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::imaging::{dims, Image, Mask};
use crate::numerics::{RngStream, Tensor};

use super::metrics::{
    auroc, binarise, confusion_metrics, iou_dice, pro_score, roc_curve, select_pixel_threshold, select_threshold,
};
use super::EvalError;

/// One scored image. `map` is at mask resolution when present.
#[derive(Clone, Debug)]
pub struct ScoredItem {
    pub id: String,
    pub score: f64,
    pub abnormal: bool,
    pub mask: Option<Mask>,
    pub map: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub fpr_limit: f64,
    pub groups: usize,
    pub group_size: usize,
    pub pixel_levels: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fpr_limit: 0.3,
            groups: 5,
            group_size: 50,
            pixel_levels: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub iou: f64,
    pub dice: f64,
    pub pro: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub pixel_threshold: f64,
    pub iou: f64,
    pub dice: f64,
    pub pro: f64,
    pub iou_std: f64,
    pub dice_std: f64,
    pub pro_std: f64,
    pub groups: Vec<GroupMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub detector: String,
    pub seed: u64,
    pub config_hash: String,
    pub auroc: f64,
    pub specificity: f64,
    pub sensitivity: f64,
    pub accuracy: f64,
    pub threshold: f64,
    pub segmentation: Option<Segmentation>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn split(items: &[ScoredItem]) -> (Vec<f64>, Vec<bool>) {
    (items.iter().map(|i| i.score).collect(), items.iter().map(|i| i.abnormal).collect())
}

fn with_masks(items: &[ScoredItem]) -> Vec<&ScoredItem> {
    items
        .iter()
        .filter(|i| i.abnormal && i.mask.is_some() && i.map.is_some())
        .collect()
}

/// Detection metrics with a validation-chosen threshold, plus localisation
/// metrics over seeded groups of abnormal test images when maps are present.
pub fn evaluate(
    detector: &str,
    val: &[ScoredItem],
    test: &[ScoredItem],
    cfg: &EvalConfig,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport, EvalError> {
    let (vs, vl) = split(val);
    let choice = select_threshold(&vs, &vl)?;
    let (ts, tl) = split(test);
    let auc = auroc(&ts, &tl)?;
    let conf = confusion_metrics(&ts, &tl, choice.threshold)?;
    let val_seg = with_masks(val);
    let test_seg = with_masks(test);
    let segmentation = if val_seg.is_empty() || test_seg.is_empty() {
        None
    } else {
        Some(segment(&val_seg, &test_seg, cfg, seed)?)
    };
    Ok(EvalReport {
        detector: detector.to_string(),
        seed,
        config_hash: config_hash.to_string(),
        auroc: auc,
        specificity: conf.specificity,
        sensitivity: conf.sensitivity,
        accuracy: conf.accuracy,
        threshold: choice.threshold,
        segmentation,
    })
}

fn segment(val: &[&ScoredItem], test: &[&ScoredItem], cfg: &EvalConfig, seed: u64) -> Result<Segmentation, EvalError> {
    let vmaps: Vec<Vec<f64>> = val.iter().map(|i| i.map.clone().unwrap()).collect();
    let vmasks: Vec<Mask> = val.iter().map(|i| i.mask.clone().unwrap()).collect();
    let (t, _) = select_pixel_threshold(&vmaps, &vmasks, cfg.pixel_levels)?;
    let per_image: Vec<Result<(f64, f64), EvalError>> = test
        .par_iter()
        .map(|i| {
            let m = i.mask.as_ref().unwrap();
            let pred = binarise(i.map.as_ref().unwrap(), m.height(), m.width(), t)?;
            iou_dice(&pred, m)
        })
        .collect();
    let per_image = per_image.into_iter().collect::<Result<Vec<_>, _>>()?;
    let size = cfg.group_size.min(test.len()).max(1);
    let root = RngStream::new(seed, "eval/groups");
    let mut groups = Vec::with_capacity(cfg.groups);
    for g in 0..cfg.groups.max(1) {
        let mut idx: Vec<usize> = (0..test.len()).collect();
        root.split_indexed("group", g as u64).shuffle(&mut idx);
        idx.truncate(size);
        idx.sort_unstable();
        let iou = idx.iter().map(|&k| per_image[k].0).sum::<f64>() / size as f64;
        let dice = idx.iter().map(|&k| per_image[k].1).sum::<f64>() / size as f64;
        let maps: Vec<Vec<f64>> = idx.iter().map(|&k| test[k].map.clone().unwrap()).collect();
        let masks: Vec<Mask> = idx.iter().map(|&k| test[k].mask.clone().unwrap()).collect();
        let pro = pro_score(&maps, &masks, cfg.fpr_limit)?;
        groups.push(GroupMetrics { iou, dice, pro });
    }
    let (iou, iou_std) = mean_std(&groups.iter().map(|g| g.iou).collect::<Vec<_>>());
    let (dice, dice_std) = mean_std(&groups.iter().map(|g| g.dice).collect::<Vec<_>>());
    let (pro, pro_std) = mean_std(&groups.iter().map(|g| g.pro).collect::<Vec<_>>());
    Ok(Segmentation {
        pixel_threshold: t,
        iou,
        dice,
        pro,
        iou_std,
        dice_std,
        pro_std,
        groups,
    })
}

impl EvalReport {
    /// Flat JSON object; keys serialise sorted.
    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "detector": self.detector,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "auroc": self.auroc,
            "specificity": self.specificity,
            "sensitivity": self.sensitivity,
            "accuracy": self.accuracy,
            "threshold": self.threshold,
        });
        if let Some(s) = &self.segmentation {
            let o = v.as_object_mut().unwrap();
            o.insert("pixel_threshold".into(), json!(s.pixel_threshold));
            o.insert("iou".into(), json!(s.iou));
            o.insert("dice".into(), json!(s.dice));
            o.insert("pro".into(), json!(s.pro));
            o.insert("iou_std".into(), json!(s.iou_std));
            o.insert("dice_std".into(), json!(s.dice_std));
            o.insert("pro_std".into(), json!(s.pro_std));
            o.insert("groups".into(), serde_json::to_value(&s.groups).unwrap());
        }
        v
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn from_json(v: &Value) -> Result<Self, EvalError> {
        let f = |k: &str| {
            v.get(k)
                .and_then(Value::as_f64)
                .ok_or_else(|| EvalError::Parse(format!("metrics field {k} missing")))
        };
        let segmentation = match v.get("groups") {
            Some(g) => Some(Segmentation {
                pixel_threshold: f("pixel_threshold")?,
                iou: f("iou")?,
                dice: f("dice")?,
                pro: f("pro")?,
                iou_std: f("iou_std")?,
                dice_std: f("dice_std")?,
                pro_std: f("pro_std")?,
                groups: serde_json::from_value(g.clone()).map_err(|e| EvalError::Parse(e.to_string()))?,
            }),
            None => None,
        };
        Ok(Self {
            detector: v.get("detector").and_then(Value::as_str).unwrap_or_default().to_string(),
            seed: v.get("seed").and_then(Value::as_u64).unwrap_or_default(),
            config_hash: v.get("config_hash").and_then(Value::as_str).unwrap_or_default().to_string(),
            auroc: f("auroc")?,
            specificity: f("specificity")?,
            sensitivity: f("sensitivity")?,
            accuracy: f("accuracy")?,
            threshold: f("threshold")?,
            segmentation,
        })
    }
}

pub struct Overlay<'a> {
    pub id: &'a str,
    pub image: &'a Image,
    pub map: &'a [f64],
    pub mask: &'a Mask,
}

const VIEW_W: f64 = 800.0;
const VIEW_H: f64 = 600.0;
const MARGIN: f64 = 60.0;

fn svg_frame(title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 800 600\" width=\"800\" height=\"600\">\n\
         <rect width=\"800\" height=\"600\" fill=\"white\"/>\n\
         <rect x=\"{m}\" y=\"{m}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"black\"/>\n\
         <text x=\"400\" y=\"35\" text-anchor=\"middle\" font-size=\"18\">{title}</text>\n\
         <text x=\"400\" y=\"585\" text-anchor=\"middle\" font-size=\"14\">{xlabel}</text>\n\
         <text x=\"20\" y=\"300\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 20 300)\">{ylabel}</text>\n",
        m = MARGIN,
        w = VIEW_W - 2.0 * MARGIN,
        h = VIEW_H - 2.0 * MARGIN,
    );
    s
}

fn to_px(x: f64, y: f64) -> (f64, f64) {
    (
        MARGIN + x * (VIEW_W - 2.0 * MARGIN),
        VIEW_H - MARGIN - y * (VIEW_H - 2.0 * MARGIN),
    )
}

pub fn roc_svg(scores: &[f64], labels: &[bool], auc: f64) -> Result<String, EvalError> {
    let pts = roc_curve(scores, labels)?;
    let mut s = svg_frame(&format!("ROC (AUROC {auc:.4})"), "false positive rate", "true positive rate");
    let (x0, y0) = to_px(0.0, 0.0);
    let (x1, y1) = to_px(1.0, 1.0);
    let _ = writeln!(s, "<line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x1:.2}\" y2=\"{y1:.2}\" stroke=\"grey\" stroke-dasharray=\"4\"/>");
    let path: Vec<String> = pts
        .iter()
        .map(|&(x, y)| {
            let (a, b) = to_px(x, y);
            format!("{a:.2},{b:.2}")
        })
        .collect();
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn histogram_svg(scores: &[f64], labels: &[bool], threshold: f64, bins: usize) -> String {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min).min(threshold);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(threshold);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut counts = vec![[0usize; 2]; bins];
    for (&v, &l) in scores.iter().zip(labels) {
        let b = (((v - lo) / span) * bins as f64).floor().clamp(0.0, bins as f64 - 1.0) as usize;
        counts[b][l as usize] += 1;
    }
    let top = counts.iter().flat_map(|c| c.iter()).copied().max().unwrap_or(1).max(1) as f64;
    let mut s = svg_frame("score histogram", "anomaly score", "count");
    let bw = 1.0 / bins as f64;
    for (b, c) in counts.iter().enumerate() {
        for (k, colour) in [(0usize, "seagreen"), (1, "firebrick")] {
            let x = b as f64 * bw + k as f64 * bw / 2.0;
            let (px, py) = to_px(x, c[k] as f64 / top);
            let (_, base) = to_px(0.0, 0.0);
            let width = bw / 2.0 * (VIEW_W - 2.0 * MARGIN);
            let _ = writeln!(
                s,
                "<rect x=\"{px:.2}\" y=\"{py:.2}\" width=\"{width:.2}\" height=\"{:.2}\" fill=\"{colour}\" fill-opacity=\"0.7\"/>",
                base - py
            );
        }
    }
    let (tx, _) = to_px((threshold - lo) / span, 0.0);
    let _ = writeln!(s, "<line x1=\"{tx:.2}\" y1=\"{MARGIN}\" x2=\"{tx:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"2\"/>", VIEW_H - MARGIN);
    s.push_str("</svg>\n");
    s
}

/// Image with the predicted region tinted red and the ground-truth boundary in green.
pub fn overlay_image(image: &Image, map: &[f64], mask: &Mask, threshold: f64) -> Result<Image, EvalError> {
    let (h, w, c) = dims(image);
    if mask.height() != h || mask.width() != w || map.len() != h * w {
        return Err(EvalError::Shape(format!("overlay of {h}x{w} image with {}x{} mask", mask.height(), mask.width())));
    }
    let mut out = Tensor::zeros(&[h, w, 3]);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let grey = (0..c).map(|k| image.data()[p * c + k]).sum::<f32>() / c as f32;
            let mut rgb = [grey; 3];
            if map[p] >= threshold {
                rgb = [0.5 * grey + 0.5, 0.5 * grey, 0.5 * grey];
            }
            let edge = mask.get(y, x)
                && [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || !mask.get(yy as usize, xx as usize)
                });
            if edge {
                rgb = [0.0, 1.0, 0.0];
            }
            out.data_mut()[p * 3..p * 3 + 3].copy_from_slice(&rgb);
        }
    }
    Ok(out)
}

/// Writes metrics.json, roc.svg, histogram.svg and, when the report carries a
/// segmentation section, overlays/<id>.png. Returns the written paths.
pub fn emit_report(
    report: &EvalReport,
    test: &[ScoredItem],
    overlays: &[Overlay<'_>],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(out_dir).map_err(|e| EvalError::Io(format!("{}: {e}", out_dir.display())))?;
    let write = |p: PathBuf, body: &str| -> Result<PathBuf, EvalError> {
        fs::write(&p, body).map_err(|e| EvalError::Io(format!("{}: {e}", p.display())))?;
        Ok(p)
    };
    let mut written = vec![write(out_dir.join("metrics.json"), &report.to_json_string())?];
    let (s, l) = split(test);
    written.push(write(out_dir.join("roc.svg"), &roc_svg(&s, &l, report.auroc)?)?);
    written.push(write(out_dir.join("histogram.svg"), &histogram_svg(&s, &l, report.threshold, 30))?);
    if let Some(seg) = &report.segmentation {
        let dir = out_dir.join("overlays");
        fs::create_dir_all(&dir).map_err(|e| EvalError::Io(format!("{}: {e}", dir.display())))?;
        for o in overlays {
            let img = overlay_image(o.image, o.map, o.mask, seg.pixel_threshold)?;
            let p = dir.join(format!("{}.png", o.id));
            crate::imaging::save_png(&p, &img)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(n: usize, with_maps: bool) -> Vec<ScoredItem> {
        let mut rng = RngStream::new(3, "items");
        (0..n)
            .map(|i| {
                let abnormal = i % 2 == 1;
                let mut mask = Mask::empty(8, 8);
                if abnormal {
                    mask.fill_rect(rng.index(4), rng.index(4), 3, 3);
                }
                let map = mask.bits().iter().map(|&b| rng.uniform() * 0.5 + if b { 0.4 } else { 0.0 }).collect();
                ScoredItem {
                    id: format!("item{i:03}"),
                    score: rng.uniform() + abnormal as u8 as f64 * 0.5,
                    abnormal,
                    mask: with_maps.then_some(mask),
                    map: with_maps.then_some(map),
                }
            })
            .collect()
    }

    #[test]
    fn perfect_report_serialises_one() {
        let mut r = EvalReport {
            detector: "padim".into(),
            seed: 1,
            config_hash: "ab".into(),
            auroc: 1.0,
            specificity: 1.0,
            sensitivity: 1.0,
            accuracy: 1.0,
            threshold: 0.5,
            segmentation: None,
        };
        let s = r.to_json_string();
        assert!(s.contains("\"auroc\": 1.0"));
        assert!(!s.contains("iou") && !s.contains("dice"));
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        r.auroc = 0.75;
        assert_ne!(r.to_json_string(), s);
    }

    #[test]
    fn keys_sorted_and_stable() {
        let val = items(40, true);
        let test = items(60, true);
        let cfg = EvalConfig { group_size: 10, ..EvalConfig::default() };
        let a = evaluate("padim", &val, &test, &cfg, 7, "h").unwrap();
        let b = evaluate("padim", &val, &test, &cfg, 7, "h").unwrap();
        assert_eq!(a.to_json_string(), b.to_json_string());
        let keys: Vec<String> = a.to_json().as_object().unwrap().keys().cloned().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let seg = a.segmentation.as_ref().unwrap();
        assert_eq!(seg.groups.len(), 5);
        for v in [a.auroc, a.specificity, a.sensitivity, a.accuracy, seg.iou, seg.dice, seg.pro] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(EvalReport::from_json(&a.to_json()).unwrap(), a);
    }

    #[test]
    fn emit_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let val = items(20, false);
        let test = items(30, false);
        let r = evaluate("igd", &val, &test, &EvalConfig::default(), 1, "h").unwrap();
        assert!(r.segmentation.is_none());
        let files = emit_report(&r, &test, &[], dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        assert!(!dir.path().join("overlays").exists());
        let svg = fs::read_to_string(dir.path().join("roc.svg")).unwrap();
        assert!(svg.contains("viewBox=\"0 0 800 600\""));
        let first = fs::read(dir.path().join("metrics.json")).unwrap();
        emit_report(&r, &test, &[], dir.path()).unwrap();
        assert_eq!(first, fs::read(dir.path().join("metrics.json")).unwrap());
    }

    #[test]
    fn overlays_written_with_segmentation() {
        let dir = tempfile::tempdir().unwrap();
        let val = items(20, true);
        let test = items(30, true);
        let r = evaluate("padim", &val, &test, &EvalConfig { group_size: 10, ..EvalConfig::default() }, 1, "h").unwrap();
        let img = Tensor::from_fn(&[8, 8, 3], |i| (i % 7) as f32 / 7.0);
        let ov = Overlay {
            id: &test[1].id,
            image: &img,
            map: test[1].map.as_ref().unwrap(),
            mask: test[1].mask.as_ref().unwrap(),
        };
        emit_report(&r, &test, &[ov], dir.path()).unwrap();
        assert!(dir.path().join("overlays").join("item001.png").exists());
    }
}
