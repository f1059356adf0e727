use super::NumericsError;

/// Central-difference gradient of `f` at `point`, evaluated in 64-bit.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_diff_grad_coords(&mut f, point, &coords, step)
}

/// Central differences restricted to `coords`; the result is indexed like `coords`.
pub fn finite_diff_grad_coords<F>(
    mut f: F,
    point: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(NumericsError::Shape(format!("step must be positive, got {step}")));
    }
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumericsError::NonFinite(format!("function value at coordinate {i}")));
        }
        out.push((fp - fm) / (2.0 * step));
    }
    Ok(out)
}

/// Componentwise `|a - n| / max(|a|, |n|, floor)`, maximised.
///
/// The floor keeps coordinates whose true gradient is near zero from
/// dominating the ratio with pure rounding noise.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let g = finite_diff_grad(|_| 3.5, &[0.3, -1.0, 9.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn non_finite_is_error() {
        let r = finite_diff_grad(|x| 1.0 / (x[0] - 1e-6).max(0.0), &[0.0], 1e-5);
        assert!(r.is_err());
    }

    #[test]
    fn bad_step() {
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn polynomial_within_1e8() {
        // f = x^3 y + 2 y^2 z - z^4
        let f = |p: &[f64]| p[0].powi(3) * p[1] + 2.0 * p[1] * p[1] * p[2] - p[2].powi(4);
        let p = [0.7f64, -1.3, 0.4];
        let analytic = [
            3.0 * p[0] * p[0] * p[1],
            p[0].powi(3) + 4.0 * p[1] * p[2],
            2.0 * p[1] * p[1] - 4.0 * p[2].powi(3),
        ];
        let g = finite_diff_grad(f, &p, 1e-5).unwrap();
        assert!(max_relative_error(&analytic, &g, 1e-12) < 1e-8);
    }

    #[test]
    fn softmax_cross_entropy_matches_analytic() {
        let z = [0.3, -1.2, 2.1, 0.05];
        let target = 2;
        let ce = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[target]
        };
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let analytic: Vec<f64> = (0..4)
            .map(|i| (z[i] - m).exp() / s - if i == target { 1.0 } else { 0.0 })
            .collect();
        let g = finite_diff_grad(ce, &z, 1e-5).unwrap();
        assert!(max_relative_error(&analytic, &g, 1e-12) < 1e-6);
    }
}
