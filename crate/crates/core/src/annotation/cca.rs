use super::AnnotationError;
use crate::Scalar;

/// Ridge added to both view covariances before whitening.
pub const CCA_RIDGE: f64 = 1e-6;

/// In-place lower Cholesky factor of a symmetric positive definite matrix.
fn cholesky<T: Scalar>(a: &mut [T], n: usize) -> Result<(), AnnotationError> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > T::zero()) {
            return Err(AnnotationError::Degenerate(
                "landmark covariance is not positive definite".into(),
            ));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = T::zero();
        }
    }
    Ok(())
}

/// First canonical correlation between per-frame landmark rows and a scalar
/// annotation series.
///
/// With a one-dimensional second view the whitened cross-covariance
/// `Lxx⁻¹ · Σxy / σy` is a vector and its only singular value is its norm,
/// where `Lxx` is the Cholesky factor of the ridge-regularised landmark
/// covariance.
pub fn cca_first<T: Scalar>(landmarks: &[Vec<T>], annotation: &[T]) -> Result<T, AnnotationError> {
    let rows = landmarks.len();
    if rows != annotation.len() {
        return Err(AnnotationError::Usage(format!(
            "{rows} landmark rows for {} annotation frames",
            annotation.len()
        )));
    }
    if rows < 2 {
        return Err(AnnotationError::Usage("need at least two frames".into()));
    }
    let dim = landmarks[0].len();
    if dim == 0 || landmarks.iter().any(|r| r.len() != dim) {
        return Err(AnnotationError::Usage(
            "landmark rows must share a nonzero width".into(),
        ));
    }
    let n = T::from_usize_lossy(rows);
    let ridge = T::lit(CCA_RIDGE);

    let mut col_mean = vec![T::zero(); dim];
    for row in landmarks {
        for (m, &v) in col_mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    col_mean.iter_mut().for_each(|m| *m /= n);
    let y_mean = annotation.iter().copied().sum::<T>() / n;
    let yc: Vec<T> = annotation.iter().map(|&v| v - y_mean).collect();
    let var_y = yc.iter().map(|&v| v * v).sum::<T>() / n;
    if annotation.iter().all(|&v| v == annotation[0]) {
        return Err(AnnotationError::Degenerate(
            "annotation series is constant".into(),
        ));
    }

    let mut cov_xx = vec![T::zero(); dim * dim];
    let mut cov_xy = vec![T::zero(); dim];
    let mut centered = vec![T::zero(); dim];
    for (row, &y) in landmarks.iter().zip(&yc) {
        for ((c, &v), &m) in centered.iter_mut().zip(row).zip(&col_mean) {
            *c = v - m;
        }
        for i in 0..dim {
            cov_xy[i] += centered[i] * y;
            for j in 0..=i {
                cov_xx[i * dim + j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..dim {
        cov_xy[i] /= n;
        for j in 0..=i {
            let v = cov_xx[i * dim + j] / n;
            cov_xx[i * dim + j] = v;
            cov_xx[j * dim + i] = v;
        }
        cov_xx[i * dim + i] += ridge;
    }

    cholesky(&mut cov_xx, dim)?;
    // forward substitution: L w = Σxy
    let mut w = cov_xy;
    for i in 0..dim {
        let mut s = w[i];
        for k in 0..i {
            s -= cov_xx[i * dim + k] * w[k];
        }
        w[i] = s / cov_xx[i * dim + i];
    }
    let norm_sq: T = w.iter().map(|&v| v * v).sum();
    let rho = (norm_sq / (var_y + ridge)).sqrt();
    Ok(rho.max(T::zero()).min(T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
        (0..t)
            .map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect()
    }

    /// Multiple correlation R from an SVD least-squares fit with intercept.
    fn regression_r(rows: &[Vec<f64>], y: &[f64]) -> f64 {
        let (t, d) = (rows.len(), rows[0].len());
        let x = DMatrix::from_fn(t, d + 1, |i, j| if j == d { 1.0 } else { rows[i][j] });
        let yv = DVector::from_column_slice(y);
        let beta = x.clone().svd(true, true).solve(&yv, 1e-14).unwrap();
        let resid = &yv - &x * beta;
        let mean = y.iter().sum::<f64>() / t as f64;
        let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        (1.0 - resid.norm_squared() / ss_tot).max(0.0).sqrt()
    }

    #[test]
    fn annotation_equal_to_a_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let rows = random_rows(&mut rng, 30, 4);
        let y: Vec<f64> = rows.iter().map(|r| r[2]).collect();
        let rho = cca_first(&rows, &y).unwrap();
        assert!((rho - 1.0).abs() < 1e-4, "{rho}");
    }

    #[test]
    fn orthogonal_annotation_is_uncorrelated() {
        // Centered columns span e1 − e4 and e2 − e3; y is orthogonal to both.
        let rows = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
            vec![-1.0, 0.0],
        ];
        let y = [1.0f64, -1.0, -1.0, 1.0];
        let rho = cca_first(&rows, &y).unwrap();
        assert!(rho.abs() < 1e-6, "{rho}");
    }

    #[test]
    fn matches_least_squares_multiple_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..10 {
            let rows = random_rows(&mut rng, 40, 6);
            let coef: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = rows
                .iter()
                .map(|r| {
                    r.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>() + rng.gen_range(-0.3..0.3)
                })
                .collect();
            let rho = cca_first(&rows, &y).unwrap();
            let oracle = regression_r(&rows, &y);
            // the ridge on both views shifts ρ by ~1e-5 at these variances
            assert!((rho - oracle).abs() < 1e-4, "{rho} vs {oracle}");
            let ridged = ridge_oracle(&rows, &y);
            assert!((rho - ridged).abs() < 1e-10, "{rho} vs {ridged}");
        }
    }

    /// Same regularised quantity through a dense LU solve:
    /// ρ² = Σyxᵀ (Σxx + εI)⁻¹ Σxy / (σy² + ε).
    fn ridge_oracle(rows: &[Vec<f64>], y: &[f64]) -> f64 {
        let (t, d) = (rows.len(), rows[0].len());
        let x = DMatrix::from_fn(t, d, |i, j| rows[i][j]);
        let means = x.row_mean();
        let xc = DMatrix::from_fn(t, d, |i, j| x[(i, j)] - means[j]);
        let ym = y.iter().sum::<f64>() / t as f64;
        let yc = DVector::from_iterator(t, y.iter().map(|v| v - ym));
        let sxx = xc.transpose() * &xc / t as f64 + DMatrix::identity(d, d) * CCA_RIDGE;
        let sxy = xc.transpose() * &yc / t as f64;
        let syy = yc.norm_squared() / t as f64 + CCA_RIDGE;
        let beta = sxx.lu().solve(&sxy).unwrap();
        (sxy.dot(&beta) / syy).sqrt()
    }

    #[test]
    fn invariant_to_affine_column_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let rows = random_rows(&mut rng, 50, 6);
        let y: Vec<f64> = rows
            .iter()
            .map(|r| r[0] - 0.5 * r[3] + rng.gen_range(-0.2..0.2))
            .collect();
        let base = cca_first(&rows, &y).unwrap();
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r[1] = 3.0 * r[1] + 7.0;
                r[4] = -0.5 * r[4] - 2.0;
                r
            })
            .collect();
        assert!((cca_first(&scaled, &y).unwrap() - base).abs() < 1e-4);
    }

    #[test]
    fn rank_deficient_landmarks_are_handled_by_the_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let rows: Vec<Vec<f64>> = random_rows(&mut rng, 20, 2)
            .into_iter()
            .map(|r| vec![r[0], r[1], r[0] + r[1], 0.5])
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| r[2]).collect();
        let rho = cca_first(&rows, &y).unwrap();
        assert!(rho <= 1.0 && rho > 0.999);
    }

    #[test]
    fn constant_annotation_is_degenerate() {
        let rows = vec![vec![0.1], vec![0.2], vec![0.3]];
        assert!(matches!(
            cca_first(&rows, &[0.4, 0.4, 0.4]),
            Err(AnnotationError::Degenerate(_))
        ));
        assert!(cca_first(&rows, &[0.4, 0.4]).is_err());
    }
}
