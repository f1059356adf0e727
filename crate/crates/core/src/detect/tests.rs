use super::*;
use crate::encoder::{Arch, EncoderNet};
use crate::imaging::Image;
use crate::numerics::{finite_diff_grad_coords, max_relative_error, Container, RngStream, Tensor};

/// Gaussian elimination with partial pivoting: solves `a x = b`.
fn dense_solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let d = b.len();
    for col in 0..d {
        let piv = (col..d).max_by(|&i, &j| a[i * d + col].abs().total_cmp(&a[j * d + col].abs())).unwrap();
        for k in 0..d {
            a.swap(col * d + k, piv * d + k);
        }
        b.swap(col, piv);
        for r in col + 1..d {
            let f = a[r * d + col] / a[col * d + col];
            for k in col..d {
                a[r * d + k] -= f * a[col * d + k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; d];
    for r in (0..d).rev() {
        let s: f64 = (r + 1..d).map(|k| a[r * d + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * d + r];
    }
    x
}

/// Two-pass unbiased covariance plus `eps` on the diagonal.
fn direct_cov(xs: &[Vec<f64>], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (xs.len(), xs[0].len());
    let mu: Vec<f64> = (0..d).map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let s: f64 = xs.iter().map(|x| (x[i] - mu[i]) * (x[j] - mu[j])).sum();
            cov[i * d + j] = s / (n - 1) as f64 + if i == j { eps } else { 0.0 };
        }
    }
    (mu, cov)
}

fn single_grids(xs: &[Vec<f64>]) -> Vec<PatchGrid> {
    xs.iter()
        .map(|x| PatchGrid {
            h: 1,
            w: 1,
            features: Tensor::new(vec![1, x.len()], x.clone()).unwrap(),
        })
        .collect()
}

#[test]
fn five_sample_covariance_matches_direct() {
    let mut rng = RngStream::new(1, "cov");
    let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
    let m = padim_fit(&single_grids(&xs), 0.01, None, &mut rng).unwrap();
    let (mu, cov) = direct_cov(&xs, 0.01);
    let l = m.factors.row(0);
    for i in 0..3 {
        assert!((m.means.row(0)[i] - mu[i]).abs() < 1e-10);
        for j in 0..3 {
            let llt: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
            assert!((llt - cov[i * 3 + j]).abs() < 1e-10);
        }
    }
}

#[test]
fn mahalanobis_matches_dense_solve() {
    let mut rng = RngStream::new(2, "maha");
    for case in 0..100 {
        let d = 1 + case % 8;
        let n = d + 2 + rng.index(6);
        let scale: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.2, 3.0)).collect();
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|k| scale[k] * rng.normal()).collect()).collect();
        let eps = 0.01;
        let m = padim_fit(&single_grids(&xs), eps, None, &mut rng).unwrap();
        let (mu, cov) = direct_cov(&xs, eps);
        let probe: Vec<f64> = (0..d).map(|_| 2.0 * rng.normal()).collect();
        let diff: Vec<f64> = probe.iter().zip(&mu).map(|(a, b)| a - b).collect();
        let sol = dense_solve(cov, diff.clone());
        let want: f64 = diff.iter().zip(&sol).map(|(a, b)| a * b).sum::<f64>().sqrt();
        let got = padim_score(&m, &single_grids(&[probe])[0]).unwrap().image_score;
        assert!((got - want).abs() < 1e-8, "case {case}: {got} vs {want}");
        let at_mean = padim_score(&m, &single_grids(&[m.means.row(0).to_vec()])[0]).unwrap();
        assert_eq!(at_mean.image_score, 0.0);
    }
}

fn random_orthogonal(d: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q.concat()
}

#[test]
fn rotation_invariance() {
    let mut rng = RngStream::new(3, "rot");
    for _ in 0..20 {
        let d = 2 + rng.index(5);
        let q = random_orthogonal(d, &mut rng);
        let rot = |x: &[f64]| -> Vec<f64> { (0..d).map(|i| (0..d).map(|k| q[i * d + k] * x[k]).sum()).collect() };
        let xs: Vec<Vec<f64>> = (0..d + 4).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let probe: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let a = padim_fit(&single_grids(&xs), 0.01, None, &mut rng).unwrap();
        let rxs: Vec<Vec<f64>> = xs.iter().map(|x| rot(x)).collect();
        let b = padim_fit(&single_grids(&rxs), 0.01, None, &mut rng).unwrap();
        let sa = padim_score(&a, &single_grids(&[probe.clone()])[0]).unwrap().image_score;
        let sb = padim_score(&b, &single_grids(&[rot(&probe)])[0]).unwrap().image_score;
        assert!((sa - sb).abs() < 1e-9 * sa.max(1.0), "{sa} vs {sb}");
    }
}

#[test]
fn score_dimension_mismatch() {
    let xs: Vec<Vec<f64>> = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    let m = padim_fit(&single_grids(&xs), 0.01, None, &mut RngStream::new(0, "x")).unwrap();
    assert!(matches!(padim_score(&m, &single_grids(&[vec![0.0; 3]])[0]), Err(DetectError::Shape(_))));
}

#[test]
fn variance_estimator_examples() {
    let (mu, s2) = estimate_head(&[vec![1.0f64, 2.0]], 1.0).unwrap();
    assert_eq!(mu, vec![1.0, 2.0]);
    assert_eq!(s2, SIGMA2_FLOOR);
    let (u, v) = (vec![1.0f64, 0.0, 2.0], vec![-1.0, 4.0, 0.0]);
    let (mu, s2) = estimate_head(&[u.clone(), v.clone()], 1.0).unwrap();
    let d = |a: &[f64]| a.iter().zip(&mu).map(|(x, m)| (x - m).powi(2)).sum::<f64>();
    assert!((s2 - (d(&u) / 2.0 + d(&v) / 2.0)).abs() < 1e-12);
    let (_, half) = estimate_head(&[u, v], 0.5).unwrap();
    assert!((half - s2 / 2.0).abs() < 1e-12);
}

#[test]
fn score_combination_examples() {
    let cfg = IgdConfig::default();
    let (h0, _) = gaussian_head(&[0.5f64, 0.5], &[0.5, 0.5], 2.0);
    assert_eq!(combine_score(0.0, h0, &cfg), 0.0);
    let xi1 = IgdConfig { xi: 1.0, ..IgdConfig::default() };
    assert_eq!(combine_score(0.37, 0.9, &xi1), 0.37);
    let xi0 = IgdConfig { xi: 0.0, ..IgdConfig::default() };
    // ‖z − μ‖² = σ² puts the exponential at e⁻¹.
    let (h, _) = gaussian_head(&[3.0f64, 4.0], &[0.0, 0.0], 25.0);
    assert!((combine_score(0.0, h, &xi0) - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
    let literal = IgdConfig { literal_score: true, ..xi0 };
    assert!((combine_score(0.0, h, &literal) - (-1.0f64).exp()).abs() < 1e-15);
}

#[test]
fn gaussian_head_gradient() {
    let mu = [0.3f64, -0.2, 0.1];
    let z = [0.5f64, 0.4, -0.3];
    let (_, g) = gaussian_head(&z, &mu, 0.7);
    let num = crate::numerics::finite_diff_grad(|v| gaussian_head(v, &mu, 0.7).0, &z, 1e-6).unwrap();
    assert!(max_relative_error(&g, &num, 1e-3) < 1e-7);
}

fn rec_cfg() -> IgdConfig {
    IgdConfig {
        global_scales: 2,
        local_scales: 1,
        rho: 0.3,
        nu: 0.6,
        ..IgdConfig::default()
    }
}

#[test]
fn reconstruction_loss_zero_for_perfect_reconstruction() {
    let mut rng = RngStream::new(4, "rec");
    let x = Tensor::from_fn(&[24, 24, 3], |_| rng.uniform());
    let p = crate::imaging::crop(&x.cast::<f32>(), 0, 0, 12, 12).cast::<f64>();
    let r = reconstruction_loss(&x, &x, &[(&p, &p)], &rec_cfg()).unwrap();
    assert!(r.value.abs() < 1e-12, "{}", r.value);
}

#[test]
fn reconstruction_loss_gradient() {
    let mut rng = RngStream::new(5, "rec");
    let cfg = rec_cfg();
    let x = Tensor::from_fn(&[24, 24, 2], |_| rng.uniform());
    let xr = Tensor::from_fn(x.shape(), |i| (x.data()[i] + 0.3 * (rng.uniform() - 0.5)).clamp(0.01, 0.99));
    let p = Tensor::from_fn(&[12, 12, 2], |_| rng.uniform());
    let pr = Tensor::from_fn(p.shape(), |i| (p.data()[i] + 0.3 * (rng.uniform() - 0.5)).clamp(0.01, 0.99));
    let r = reconstruction_loss(&x, &xr, &[(&p, &pr)], &cfg).unwrap();
    let n = xr.len();
    let mut point = xr.data().to_vec();
    point.extend_from_slice(pr.data());
    let coords: Vec<usize> = (0..30).map(|_| rng.index(point.len())).collect();
    let num = finite_diff_grad_coords(
        |v| {
            let a = Tensor::new(xr.shape().to_vec(), v[..n].to_vec()).unwrap();
            let b = Tensor::new(pr.shape().to_vec(), v[n..].to_vec()).unwrap();
            reconstruction_loss(&x, &a, &[(&p, &b)], &cfg).unwrap().value
        },
        &point,
        &coords,
        1e-4,
    )
    .unwrap();
    let mut analytic = r.grad_global.data().to_vec();
    analytic.extend_from_slice(r.grad_local[0].data());
    let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
    let err = max_relative_error(&picked, &num, 1e-3);
    assert!(err < 1e-6, "{err:e}");
}

fn tiny_encoder(seed: u64) -> EncoderNet<f32> {
    EncoderNet::new(
        &Arch {
            in_channels: 3,
            channels: vec![4, 8, 8],
            embed_dim: 8,
        },
        &mut RngStream::new(seed, "init"),
    )
}

fn tiny_images(n: usize) -> Vec<Image> {
    let mut rng = RngStream::new(77, "imgs");
    (0..n)
        .map(|_| {
            let (a, b) = (rng.uniform_range(0.1, 0.5), rng.uniform_range(0.1, 0.5));
            Tensor::from_fn(&[32, 32, 3], |i| {
                let p = i / 3;
                let (y, x) = ((p / 32) as f64, (p % 32) as f64);
                (0.5 + 0.3 * (a * y).sin() * (b * x).cos()) as f32
            })
        })
        .collect()
}

fn tiny_cfg(epochs: usize) -> IgdConfig {
    IgdConfig {
        global_scales: 2,
        local_scales: 1,
        local_patch: 16,
        local_stride: 16,
        epochs,
        batch_size: 4,
        ..IgdConfig::default()
    }
}

#[test]
fn untrained_model_refuses_to_score() {
    let m = IgdModel::new(tiny_encoder(1), 32, tiny_cfg(0), 1).unwrap();
    assert!(matches!(m.score(&tiny_images(1)[0]), Err(DetectError::Untrained)));
}

#[test]
fn igd_fit_reduces_reconstruction_and_is_immutable() {
    let imgs = tiny_images(8);
    let refs: Vec<&Image> = imgs.iter().collect();
    let model = igd_fit(&tiny_encoder(2), &refs, &tiny_cfg(3), 4).unwrap();
    assert!(model.rec_final < model.rec_initial, "{} !< {}", model.rec_final, model.rec_initial);
    let before = model.to_container([0; 32]).unwrap().encode().unwrap();
    let s1 = model.score(&imgs[0]).unwrap();
    let s2 = model.score(&imgs[0]).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(model.to_container([0; 32]).unwrap().encode().unwrap(), before);
    assert_eq!(s1.map.len(), 32 * 32);
    assert!(s1.score.is_finite() && s1.map.iter().all(|v| (0.0..=2.0).contains(v)));
    let back = IgdModel::from_container(&Container::decode(&before, &IGD_MAGIC).unwrap()).unwrap();
    assert_eq!(back.score(&imgs[1]).unwrap(), model.score(&imgs[1]).unwrap());
}

#[test]
fn igd_rejects_other_artifacts() {
    let c = crate::numerics::Container::new(IGD_MAGIC, [0; 32]);
    assert!(matches!(IgdModel::from_container(&c), Err(DetectError::WrongArtifact(_))));
}
