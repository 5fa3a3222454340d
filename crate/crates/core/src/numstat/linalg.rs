use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::NumError;

/// Default relative eigenvalue cutoff: `p * eps * max|eigenvalue|`.
pub fn default_pinv_tolerance(m: &DMatrix<f64>, max_abs_eig: f64) -> f64 {
    m.nrows() as f64 * f64::EPSILON * max_abs_eig
}

/// Moore-Penrose pseudoinverse of a symmetric matrix together with its
/// numerical rank.
///
/// Eigenvalues with magnitude at or below `tolerance` (or the default
/// relative cutoff when `None`) are treated as zero.
pub fn pinv_with_rank(m: &DMatrix<f64>, tolerance: Option<f64>) -> (DMatrix<f64>, usize) {
    let p = m.nrows();
    if p == 0 {
        return (DMatrix::zeros(0, 0), 0);
    }
    // symmetrize so tiny asymmetries from accumulation do not leak in
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let cutoff = tolerance.unwrap_or_else(|| default_pinv_tolerance(m, max_abs));
    let mut out = DMatrix::zeros(p, p);
    let mut rank = 0;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() <= cutoff || max_abs == 0.0 {
            continue;
        }
        rank += 1;
        let v = eig.eigenvectors.column(k);
        out += (v * v.transpose()) / lambda;
    }
    (out, rank)
}

pub fn pinv(m: &DMatrix<f64>, tolerance: Option<f64>) -> DMatrix<f64> {
    pinv_with_rank(m, tolerance).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub coefficient_variances: Vec<f64>,
    pub residual_variance: f64,
    pub df_residual: usize,
    pub rank: usize,
}

impl OlsFit {
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.coefficients.len()
    }
}

/// Least squares fit of `response` on the columns of `design`.
///
/// Uses the pseudoinverse of the Gram matrix, so column-deficient designs
/// still produce the minimum-norm solution with rank-adjusted residual df.
pub fn ols(design: &DMatrix<f64>, response: &[f64]) -> Result<OlsFit, NumError> {
    let n = design.nrows();
    if response.len() != n {
        return Err(NumError::DimensionMismatch {
            expected: n,
            found: response.len(),
        });
    }
    if n == 0 {
        return Err(NumError::InsufficientData("OLS needs at least one row".into()));
    }
    let y = DVector::from_column_slice(response);
    let gram = design.transpose() * design;
    let (gram_inv, rank) = pinv_with_rank(&gram, None);
    let beta = &gram_inv * (design.transpose() * &y);
    let resid = &y - design * &beta;
    let rss = resid.dot(&resid);
    if n <= rank {
        return Err(NumError::InsufficientData(format!(
            "OLS with {n} rows and rank {rank} leaves no residual df"
        )));
    }
    let df_residual = n - rank;
    let residual_variance = rss / df_residual as f64;
    let coefficient_variances = gram_inv
        .diagonal()
        .iter()
        .map(|d| (residual_variance * d).max(0.0))
        .collect();
    Ok(OlsFit {
        coefficients: beta.iter().copied().collect(),
        coefficient_variances,
        residual_variance,
        df_residual,
        rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn penrose_residuals(m: &DMatrix<f64>, a: &DMatrix<f64>) -> [f64; 4] {
        let ma = m * a;
        let am = a * m;
        [
            (m * a * m - m).norm(),
            (a * m * a - a).norm(),
            (&ma - ma.transpose()).norm(),
            (&am - am.transpose()).norm(),
        ]
    }

    #[test]
    fn identity_and_diagonal() {
        let eye = DMatrix::<f64>::identity(4, 4);
        assert!((pinv(&eye, None) - &eye).norm() < 1e-15);
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let pd = pinv(&d, None);
        assert!((pd - DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0])).norm() < 1e-15);
        assert_eq!(pinv_with_rank(&d, None).1, 1);
    }

    #[test]
    fn zero_matrix_pinv_is_zero() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(pinv(&z, None), z);
    }

    #[test]
    fn random_spd_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in 1..=6 {
            let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
            let m = &a * a.transpose() + DMatrix::identity(p, p) * 1e-2;
            let inv = pinv(&m, None);
            assert!((&inv * &m - DMatrix::identity(p, p)).norm() < 1e-8);
            for r in penrose_residuals(&m, &inv) {
                assert!(r < 1e-8);
            }
        }
    }

    #[test]
    fn rank_deficient_penrose() {
        // binary covariates that collide: columns 0 and 1 identical
        let x = DMatrix::from_row_slice(4, 3, &[1., 1., 0.2, 0., 0., 1.1, 1., 1., -0.3, 0., 0., 0.7]);
        let m = x.transpose() * &x;
        let (a, rank) = pinv_with_rank(&m, None);
        assert_eq!(rank, 2);
        for r in penrose_residuals(&m, &a) {
            assert!(r < 1e-10, "{r}");
        }
    }

    #[test]
    fn intercept_only() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let fit = ols(&x, &[1.0, 2.0, 3.0]).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-14);
        assert!((fit.residual_variance - 1.0).abs() < 1e-14);
        assert_eq!(fit.df_residual, 2);
        assert!((fit.coefficient_variances[0] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn noiseless_line() {
        let x = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let fit = ols(&x, &[3.0, 6.0, 9.0, 12.0]).unwrap();
        assert!((fit.coefficients[0] - 3.0).abs() < 1e-13);
        assert!(fit.residual_variance.abs() < 1e-20);
    }

    #[test]
    fn simple_regression_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 0.7 * x + rng.random_range(-0.5..0.5)).collect();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let design = DMatrix::from_fn(xs.len(), 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let fit = ols(&design, &ys).unwrap();
        assert!((fit.coefficients[1] - sxy / sxx).abs() < 1e-10);
        assert!((fit.coefficients[0] - (my - sxy / sxx * mx)).abs() < 1e-10);
    }

    /// Gaussian elimination with full pivoting on the normal equations.
    fn full_pivot_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (mut pi, mut pj, mut best) = (k, k, 0.0);
            for i in k..n {
                for j in k..n {
                    if a[i][j].abs() > best {
                        best = a[i][j].abs();
                        pi = i;
                        pj = j;
                    }
                }
            }
            a.swap(k, pi);
            b.swap(k, pi);
            for row in a.iter_mut() {
                row.swap(k, pj);
            }
            perm.swap(k, pj);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
        let mut z = vec![0.0; n];
        for k in (0..n).rev() {
            let s: f64 = (k + 1..n).map(|j| a[k][j] * z[j]).sum();
            z[k] = (b[k] - s) / a[k][k];
        }
        let mut out = vec![0.0; n];
        for (k, &col) in perm.iter().enumerate() {
            out[col] = z[k];
        }
        out
    }

    #[test]
    fn matches_normal_equation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (n, q) = (25, 4);
        let x = DMatrix::from_fn(n, q, |_, j| if j == 0 { 1.0 } else { rng.random_range(-3.0..3.0) });
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * DVector::from_column_slice(&y);
        let a: Vec<Vec<f64>> = (0..q).map(|i| (0..q).map(|j| xtx[(i, j)]).collect()).collect();
        let oracle = full_pivot_solve(a, xty.iter().copied().collect());
        let fit = ols(&x, &y).unwrap();
        for (c, o) in fit.coefficients.iter().zip(&oracle) {
            assert!((c - o).abs() < 1e-9);
        }
        assert!(!fit.rank_deficient());
    }

    #[test]
    fn reports_rank_deficiency() {
        let x = DMatrix::from_row_slice(5, 2, &[1., 1., 1., 1., 1., 1., 1., 1., 1., 1.]);
        let fit = ols(&x, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(fit.rank_deficient());
        assert_eq!(fit.df_residual, 4);
        // minimum-norm split of the mean across the duplicated columns
        assert!((fit.coefficients[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn dimension_and_df_errors() {
        let x = DMatrix::from_element(2, 2, 1.0);
        assert!(ols(&x, &[1.0]).is_err());
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(ols(&x, &[1.0, 2.0]), Err(NumError::InsufficientData(_))));
    }
}
