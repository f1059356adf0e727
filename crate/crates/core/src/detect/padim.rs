//! Position-wise Gaussian patch model with Mahalanobis scoring.

use rayon::prelude::*;

use super::DetectError;
use crate::encoder::EncoderNet;
use crate::imaging::Image;
use crate::numerics::{Container, RngStream, Scalar, Tensor};

pub const MODEL_MAGIC: [u8; 4] = *b"PMDM";

/// Per-position features on an `h × w` lattice, row-major, dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
    pub features: Tensor<f64>,
}

impl PatchGrid {
    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }
}

/// Concatenates maps on the lattice of the finest one; coarser maps are
/// nearest-neighbour upsampled by their integer stride ratio.
pub fn grid_from_maps<T: Scalar>(maps: &[&Tensor<T>]) -> Result<PatchGrid, DetectError> {
    let first = maps.first().ok_or_else(|| DetectError::Shape("no feature maps".into()))?;
    let (h, w) = (first.shape()[0], first.shape()[1]);
    for m in maps {
        let (mh, mw) = (m.shape()[0], m.shape()[1]);
        if mh == 0 || mw == 0 || h % mh != 0 || w % mw != 0 || h / mh != w / mw {
            return Err(DetectError::MisalignedStrides {
                fine: (h, w),
                coarse: (mh, mw),
            });
        }
    }
    let d: usize = maps.iter().map(|m| m.shape()[2]).sum();
    let mut features = Tensor::zeros(&[h * w, d]);
    for y in 0..h {
        for x in 0..w {
            let row = features.row_mut(y * w + x);
            let mut off = 0;
            for m in maps {
                let (mw, c) = (m.shape()[1], m.shape()[2]);
                let r = h / m.shape()[0];
                let src = ((y / r) * mw + x / r) * c;
                for k in 0..c {
                    row[off + k] = m.data()[src + k].as_f64();
                }
                off += c;
            }
        }
    }
    Ok(PatchGrid { h, w, features })
}

/// Features from the encoder blocks listed in `layers`.
pub fn extract_patch_features<T: Scalar>(
    encoder: &EncoderNet<T>,
    image: &Image,
    layers: &[usize],
) -> Result<PatchGrid, DetectError> {
    let trace = encoder.forward(image)?;
    let mut maps = Vec::new();
    for &l in layers {
        if l >= encoder.blocks.len() {
            return Err(DetectError::Config(format!("layer {l} outside 0..{}", encoder.blocks.len())));
        }
        maps.push(trace.block_map(l));
    }
    // Finest map first.
    maps.sort_by_key(|m| std::cmp::Reverse(m.shape()[0]));
    grid_from_maps(&maps)
}

/// Mean and lower Cholesky factor of `Σ + εI` at every position.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPatchModel {
    pub h: usize,
    pub w: usize,
    pub eps: f64,
    pub means: Tensor<f64>,
    pub factors: Tensor<f64>,
    pub subset: Option<Vec<usize>>,
}

/// In-place lower Cholesky factor of a row-major SPD matrix.
pub fn cholesky(a: &mut [f64], d: usize) -> Result<(), DetectError> {
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if !(s > 0.0) {
            return Err(DetectError::NotPositiveDefinite { pivot: j });
        }
        let ljj = s.sqrt();
        a[j * d + j] = ljj;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / ljj;
        }
        for k in j + 1..d {
            a[j * d + k] = 0.0;
        }
    }
    Ok(())
}

/// `‖L⁻¹ v‖²` by forward substitution.
pub fn whitened_sq_norm(l: &[f64], v: &[f64]) -> f64 {
    let d = v.len();
    let mut y = vec![0.0; d];
    let mut acc = 0.0;
    for i in 0..d {
        let mut s = v[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
        acc += y[i] * y[i];
    }
    acc
}

fn select(row: &[f64], subset: &Option<Vec<usize>>) -> Vec<f64> {
    match subset {
        Some(idx) => idx.iter().map(|&i| row[i]).collect(),
        None => row.to_vec(),
    }
}

/// Fits the per-position Gaussians. `subset`, when set, keeps that many
/// randomly chosen feature channels (drawn once from `rng`).
pub fn padim_fit(
    grids: &[PatchGrid],
    eps: f64,
    subset: Option<usize>,
    rng: &mut RngStream,
) -> Result<GaussianPatchModel, DetectError> {
    if grids.len() < 2 {
        return Err(DetectError::TooFewSamples(grids.len()));
    }
    if !(eps > 0.0) {
        return Err(DetectError::Config(format!("covariance regulariser must be positive, got {eps}")));
    }
    let (h, w, full_d) = (grids[0].h, grids[0].w, grids[0].dim());
    if grids.iter().any(|g| g.h != h || g.w != w || g.dim() != full_d) {
        return Err(DetectError::Shape("training grids differ in lattice or dimension".into()));
    }
    let subset = match subset {
        Some(k) if k == 0 || k > full_d => {
            return Err(DetectError::Config(format!("channel subset {k} outside 1..={full_d}")))
        }
        Some(k) => {
            let mut idx: Vec<usize> = (0..full_d).collect();
            rng.shuffle(&mut idx);
            let mut chosen = idx[..k].to_vec();
            chosen.sort_unstable();
            Some(chosen)
        }
        None => None,
    };
    let d = subset.as_ref().map_or(full_d, |s| s.len());
    let n = grids.len() as f64;
    let per_pos: Vec<Result<(Vec<f64>, Vec<f64>), DetectError>> = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let xs: Vec<Vec<f64>> = grids.iter().map(|g| select(g.features.row(p), &subset)).collect();
            let mut mu = vec![0.0; d];
            for x in &xs {
                mu.iter_mut().zip(x).for_each(|(m, v)| *m += v);
            }
            mu.iter_mut().for_each(|m| *m /= n);
            let mut cov = vec![0.0; d * d];
            for x in &xs {
                let c: Vec<f64> = x.iter().zip(&mu).map(|(a, b)| a - b).collect();
                for i in 0..d {
                    let ci = c[i];
                    let row = &mut cov[i * d..i * d + i + 1];
                    for (j, r) in row.iter_mut().enumerate() {
                        *r += ci * c[j];
                    }
                }
            }
            for i in 0..d {
                for j in 0..=i {
                    let v = cov[i * d + j] / (n - 1.0) + if i == j { eps } else { 0.0 };
                    cov[i * d + j] = v;
                    cov[j * d + i] = v;
                }
            }
            cholesky(&mut cov, d)?;
            Ok((mu, cov))
        })
        .collect();
    let mut means = Tensor::zeros(&[h * w, d]);
    let mut factors = Tensor::zeros(&[h * w, d, d]);
    for (p, r) in per_pos.into_iter().enumerate() {
        let (mu, l) = r?;
        means.row_mut(p).copy_from_slice(&mu);
        factors.row_mut(p).copy_from_slice(&l);
    }
    Ok(GaussianPatchModel {
        h,
        w,
        eps,
        means,
        factors,
        subset,
    })
}

/// Position scores on the lattice plus the max-pooled image score.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyScoreMap {
    pub h: usize,
    pub w: usize,
    pub scores: Vec<f64>,
    pub image_score: f64,
}

impl AnomalyScoreMap {
    pub fn new(h: usize, w: usize, scores: Vec<f64>) -> Self {
        let image_score = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            h,
            w,
            scores,
            image_score,
        }
    }

    /// Bilinear resampling to `oh × ow` with pixel-centre alignment.
    pub fn upsample(&self, oh: usize, ow: usize) -> Vec<f64> {
        let at = |y: usize, x: usize| self.scores[y * self.w + x];
        let mut out = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let fy = ((y as f64 + 0.5) * self.h as f64 / oh as f64 - 0.5).clamp(0.0, (self.h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let ty = fy - y0 as f64;
            for x in 0..ow {
                let fx = ((x as f64 + 0.5) * self.w as f64 / ow as f64 - 0.5).clamp(0.0, (self.w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let tx = fx - x0 as f64;
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
        out
    }
}

impl GaussianPatchModel {
    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    /// Input feature dimension expected by [`padim_score`].
    pub fn input_dim(&self, full: usize) -> bool {
        match &self.subset {
            Some(s) => s.iter().all(|&i| i < full),
            None => full == self.dim(),
        }
    }

    pub fn to_container(&self, config_hash: [u8; 32]) -> Container {
        let mut c = Container::new(MODEL_MAGIC, config_hash);
        c.push("means", &self.means);
        c.push("factors", &self.factors);
        c.push("eps", &Tensor::filled(&[1], self.eps));
        if let Some(s) = &self.subset {
            c.push("subset", &Tensor::<f64>::from_fn(&[s.len()], |i| s[i] as f64));
        }
        c.trailer = serde_json::json!({"kind": "padim", "h": self.h, "w": self.w});
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, DetectError> {
        let kind = c.trailer.get("kind").and_then(|v| v.as_str());
        if kind != Some("padim") {
            return Err(DetectError::WrongArtifact(format!("expected a padim model, found {kind:?}")));
        }
        let dim = |k: &str| c.trailer.get(k).and_then(|v| v.as_u64()).map(|v| v as usize);
        let (h, w) = dim("h").zip(dim("w")).ok_or_else(|| DetectError::Shape("model lattice missing".into()))?;
        let means: Tensor<f64> = c.tensor("means")?;
        let factors: Tensor<f64> = c.tensor("factors")?;
        let eps = c.tensor::<f64>("eps")?.data()[0];
        let subset = match c.get("subset") {
            Some(_) => Some(c.tensor::<f64>("subset")?.data().iter().map(|&v| v as usize).collect()),
            None => None,
        };
        let d = means.shape().get(1).copied().unwrap_or(0);
        if means.shape() != [h * w, d] || factors.shape() != [h * w, d, d] {
            return Err(DetectError::Shape("model tensors disagree with the lattice".into()));
        }
        Ok(Self {
            h,
            w,
            eps,
            means,
            factors,
            subset,
        })
    }
}

/// `sqrt((x−μ)ᵀ(Σ+εI)⁻¹(x−μ))` at every position.
pub fn padim_score(model: &GaussianPatchModel, grid: &PatchGrid) -> Result<AnomalyScoreMap, DetectError> {
    if grid.h != model.h || grid.w != model.w || !model.input_dim(grid.dim()) {
        return Err(DetectError::Shape(format!(
            "grid {}x{}x{} does not match model {}x{}x{}",
            grid.h,
            grid.w,
            grid.dim(),
            model.h,
            model.w,
            model.dim()
        )));
    }
    let scores = (0..grid.positions())
        .map(|p| {
            let x = select(grid.features.row(p), &model.subset);
            let diff: Vec<f64> = x.iter().zip(model.means.row(p)).map(|(a, b)| a - b).collect();
            whitened_sq_norm(model.factors.row(p), &diff).sqrt()
        })
        .collect();
    Ok(AnomalyScoreMap::new(grid.h, grid.w, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, d: usize, f: impl FnMut(usize) -> f64) -> PatchGrid {
        PatchGrid {
            h,
            w,
            features: Tensor::from_fn(&[h * w, d], f),
        }
    }

    #[test]
    fn concatenation_dims() {
        let a = Tensor::<f32>::filled(&[16, 16, 32], 1.0);
        let b = Tensor::<f32>::from_fn(&[8, 8, 64], |i| (i / 64) as f32);
        let g = grid_from_maps(&[&a, &b]).unwrap();
        assert_eq!((g.h, g.w, g.dim()), (16, 16, 96));
        // Position (3, 5) takes the coarse cell (1, 2).
        assert_eq!(g.features.row(3 * 16 + 5)[32], (8 + 2) as f64);
        let bad = Tensor::<f32>::zeros(&[5, 5, 2]);
        assert!(matches!(grid_from_maps(&[&a, &bad]), Err(DetectError::MisalignedStrides { .. })));
    }

    #[test]
    fn encoder_features() {
        let mut rng = RngStream::new(1, "pf");
        let enc: EncoderNet<f32> = EncoderNet::new(&Default::default(), &mut rng);
        let img = Tensor::from_fn(&[64, 64, 3], |_| rng.uniform() as f32);
        let g = extract_patch_features(&enc, &img, &[1, 2]).unwrap();
        assert_eq!((g.h, g.w, g.dim()), (16, 16, 96));
        assert_eq!(g, extract_patch_features(&enc, &img, &[1, 2]).unwrap());
        let mut zero = enc.clone();
        for b in &mut zero.blocks {
            b.weight = b.weight.zeros_like();
        }
        let z = extract_patch_features(&zero, &img, &[1, 2]).unwrap();
        assert!(z.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_samples_give_eps_identity() {
        let gs: Vec<PatchGrid> = (0..3).map(|_| grid(1, 2, 2, |i| i as f64)).collect();
        let m = padim_fit(&gs, 0.01, None, &mut RngStream::new(0, "x")).unwrap();
        assert_eq!(m.means.row(1), &[2.0, 3.0]);
        let s = 0.01f64.sqrt();
        assert_eq!(m.factors.row(0), &[s, 0.0, 0.0, s]);
        // With Σ + εI = I the score is the Euclidean distance.
        let m1 = padim_fit(&gs, 1.0, None, &mut RngStream::new(0, "x")).unwrap();
        let probe = grid(1, 2, 2, |i| i as f64 + if i == 0 { 3.0 } else { 0.0 } + if i == 1 { 4.0 } else { 0.0 });
        let sc = padim_score(&m1, &probe).unwrap();
        assert!((sc.scores[0] - 5.0).abs() < 1e-12);
        assert_eq!(sc.scores[1], 0.0);
        assert_eq!(sc.image_score, sc.scores[0]);
    }

    #[test]
    fn two_point_covariance() {
        let (u, v) = ([1.0, 2.0, -1.0], [3.0, -2.0, 0.5]);
        let gs = vec![grid(1, 1, 3, |i| u[i]), grid(1, 1, 3, |i| v[i])];
        let eps = 0.1;
        let m = padim_fit(&gs, eps, None, &mut RngStream::new(0, "x")).unwrap();
        let mu: Vec<f64> = (0..3).map(|i| (u[i] + v[i]) / 2.0).collect();
        assert_eq!(m.means.row(0), &mu[..]);
        // Unbiased covariance of two points: (u−v)(u−v)ᵀ / 2.
        let l = m.factors.row(0);
        for i in 0..3 {
            for j in 0..3 {
                let llt: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                let want = (u[i] - v[i]) * (u[j] - v[j]) / 2.0 + if i == j { eps } else { 0.0 };
                assert!((llt - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_few_samples() {
        let gs = vec![grid(1, 1, 2, |_| 0.0)];
        assert!(matches!(
            padim_fit(&gs, 0.01, None, &mut RngStream::new(0, "x")),
            Err(DetectError::TooFewSamples(1))
        ));
    }

    #[test]
    fn subset_is_seeded_and_applied() {
        let mut rng = RngStream::new(5, "g");
        let gs: Vec<PatchGrid> = (0..6).map(|_| grid(2, 2, 10, |_| rng.normal())).collect();
        let a = padim_fit(&gs, 0.01, Some(4), &mut RngStream::new(9, "subset")).unwrap();
        let b = padim_fit(&gs, 0.01, Some(4), &mut RngStream::new(9, "subset")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 4);
        assert!(padim_score(&a, &gs[0]).unwrap().scores.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn upsample_constant_and_corners() {
        let m = AnomalyScoreMap::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        let up = m.upsample(4, 4);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[15], 3.0);
        assert!((up[1] - 0.25).abs() < 1e-12);
        let c = AnomalyScoreMap::new(3, 3, vec![2.5; 9]).upsample(7, 5);
        assert!(c.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn container_round_trip() {
        let mut rng = RngStream::new(6, "g");
        let gs: Vec<PatchGrid> = (0..4).map(|_| grid(2, 3, 3, |_| rng.normal())).collect();
        let m = padim_fit(&gs, 0.01, Some(2), &mut rng).unwrap();
        let bytes = m.to_container([3; 32]).encode().unwrap();
        let back = GaussianPatchModel::from_container(&Container::decode(&bytes, &MODEL_MAGIC).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
