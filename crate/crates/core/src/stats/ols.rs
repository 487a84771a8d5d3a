//! Ordinary least squares via Householder QR.

use nalgebra::{DMatrix, DVector};

use super::{Result, StatsError};

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub r2: f64,
    pub residuals: Vec<f64>,
    /// Residual degrees of freedom, n - p.
    pub df: usize,
}

impl OlsFit {
    pub fn t(&self, j: usize) -> f64 {
        self.beta[j] / self.se[j]
    }

    /// Two-sided p-value of coefficient `j`.
    pub fn p(&self, j: usize) -> f64 {
        super::t_two_sided(self.t(j), self.df as f64)
    }
}

/// Fit `y = X β + e`. `x` is row-major with `p` columns; include an intercept
/// column yourself.
pub fn ols_fit(y: &[f64], x: &[f64], p: usize) -> Result<OlsFit> {
    let n = y.len();
    if p == 0 || x.len() != n * p {
        return Err(StatsError::Invalid(format!(
            "design has {} values, expected {n} x {p}",
            x.len()
        )));
    }
    if n <= p {
        return Err(StatsError::TooFewObservations { need: p + 1, got: n });
    }
    let xm = DMatrix::from_row_slice(n, p, x);
    let yv = DVector::from_column_slice(y);
    let qr = xm.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|j| xm.column(j).norm()).fold(0.0, f64::max);
    if (0..p).any(|j| !(r[(j, j)].abs() > 1e-10 * scale.max(f64::MIN_POSITIVE))) {
        return Err(StatsError::SingularDesign);
    }
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(StatsError::SingularDesign)?;
    let fitted = &xm * &beta;
    let resid = &yv - fitted;
    let rss = resid.norm_squared();
    let df = n - p;
    let sigma2 = rss / df as f64;
    // (XᵀX)⁻¹ = R⁻¹ R⁻ᵀ, so its diagonal is the row norms of R⁻¹
    let rinv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(StatsError::SingularDesign)?;
    let se = (0..p).map(|j| (sigma2 * rinv.row(j).norm_squared()).sqrt()).collect();
    let mean = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    Ok(OlsFit {
        beta: beta.iter().copied().collect(),
        se,
        r2,
        residuals: resid.iter().copied().collect(),
        df,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Normal-equations oracle: solve XᵀX β = Xᵀy by Gauss-Jordan.
    fn normal_equations(y: &[f64], x: &[f64], p: usize) -> (Vec<f64>, Vec<f64>) {
        let n = y.len();
        let mut a = vec![vec![0.0; 2 * p]; p];
        let mut b = vec![0.0; p];
        for i in 0..p {
            for j in 0..p {
                a[i][j] = (0..n).map(|r| x[r * p + i] * x[r * p + j]).sum();
            }
            a[i][p + i] = 1.0;
            b[i] = (0..n).map(|r| x[r * p + i] * y[r]).sum();
        }
        for c in 0..p {
            let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, piv);
            b.swap(c, piv);
            let d = a[c][c];
            for v in a[c].iter_mut() {
                *v /= d;
            }
            b[c] /= d;
            for r in 0..p {
                if r != c {
                    let f = a[r][c];
                    for k in 0..2 * p {
                        a[r][k] -= f * a[c][k];
                    }
                    b[r] -= f * b[c];
                }
            }
        }
        let rss: f64 = (0..n)
            .map(|r| {
                let fit: f64 = (0..p).map(|j| x[r * p + j] * b[j]).sum();
                (y[r] - fit).powi(2)
            })
            .sum();
        let s2 = rss / (n - p) as f64;
        let se = (0..p).map(|j| (s2 * a[j][p + j]).sqrt()).collect();
        (b, se)
    }

    fn fixture(seed: u64) -> (Vec<f64>, Vec<f64>, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(8..40);
        let p = rng.random_range(1..5);
        let mut x = Vec::with_capacity(n * p);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            x.push(1.0);
            for _ in 1..p {
                x.push(rng.random_range(-3.0..3.0));
            }
            y.push(rng.random_range(-1.0..1.0));
        }
        (y, x, p)
    }

    #[test]
    fn noiseless_line() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = xs.iter().map(|v| 2.0 * v + 1.0).collect();
        let x: Vec<f64> = xs.iter().flat_map(|&v| [1.0, v]).collect();
        let f = ols_fit(&y, &x, 2).unwrap();
        assert!((f.beta[0] - 1.0).abs() < 1e-12 && (f.beta[1] - 2.0).abs() < 1e-12);
        assert!(f.se.iter().all(|s| s.abs() < 1e-7));
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_normal_equations() {
        for seed in 0..100 {
            let (y, x, p) = fixture(seed);
            let f = ols_fit(&y, &x, p).unwrap();
            let (b, se) = normal_equations(&y, &x, p);
            for j in 0..p {
                assert!((f.beta[j] - b[j]).abs() < 1e-8, "seed {seed}");
                assert!((f.se[j] - se[j]).abs() < 1e-8, "seed {seed}");
            }
        }
    }

    #[test]
    fn duplicated_column_is_singular() {
        let x: Vec<f64> = (0..6).flat_map(|i| [1.0, i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..6).map(|i| i as f64 * 0.3).collect();
        assert_eq!(ols_fit(&y, &x, 3), Err(StatsError::SingularDesign));
    }

    proptest! {
        #[test]
        fn residuals_orthogonal_to_design(seed in 0u64..10_000) {
            let (y, x, p) = fixture(seed);
            let f = ols_fit(&y, &x, p).unwrap();
            for j in 0..p {
                let dot: f64 = (0..y.len()).map(|r| x[r * p + j] * f.residuals[r]).sum();
                prop_assert!(dot.abs() < 1e-8);
            }
        }
    }
}
