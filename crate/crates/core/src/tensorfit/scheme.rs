use std::path::Path;

use nalgebra::DMatrix;

use super::{FitError, Result};

/// b-values below this are treated as non-weighted (b=0) volumes.
pub const B0_THRESHOLD: f64 = 1.0;

/// Per-volume b-values (s/mm²) and unit gradient directions.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionScheme {
    bvals: Vec<f64>,
    bvecs: Vec<[f64; 3]>,
}

impl DiffusionScheme {
    /// Validates counts, unit norms for weighted volumes, at least one b=0
    /// volume and a full-rank design.
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(FitError::InvalidScheme(format!(
                "{} b-values but {} gradient directions",
                bvals.len(),
                bvecs.len()
            )));
        }
        if bvals.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(FitError::InvalidScheme("b-values must be finite and non-negative".into()));
        }
        for (i, (b, g)) in bvals.iter().zip(&bvecs).enumerate() {
            if *b >= B0_THRESHOLD {
                let n = norm(g);
                if (n - 1.0).abs() > 1e-6 {
                    return Err(FitError::InvalidScheme(format!(
                        "direction {i} has norm {n}, expected 1"
                    )));
                }
            }
        }
        let s = DiffusionScheme { bvals, bvecs };
        if s.n_b0() == 0 {
            return Err(FitError::InvalidScheme("no b=0 volume".into()));
        }
        s.design_matrix()?;
        Ok(s)
    }

    /// `n_dirs` well-spread hemisphere directions at `b`, preceded by `n_b0`
    /// non-weighted volumes.
    pub fn uniform(n_dirs: usize, n_b0: usize, b: f64) -> Result<Self> {
        let mut bvals = vec![0.0; n_b0];
        let mut bvecs = vec![[0.0; 3]; n_b0];
        bvals.extend(std::iter::repeat_n(b, n_dirs));
        bvecs.extend(hemisphere_directions(n_dirs));
        DiffusionScheme::new(bvals, bvecs)
    }

    /// 25 directions at b=1000 s/mm² plus three b=0 volumes.
    pub fn clinical_25() -> Self {
        DiffusionScheme::uniform(25, 3, 1000.0).expect("25-direction scheme is valid")
    }

    /// Read FSL-style bval/bvec text files. Gradient tables may be stored as
    /// 3 rows × N or N rows × 3; a 3×3 table is read as 3 rows × N.
    /// Weighted directions within 1e-2 of unit length are renormalized.
    pub fn from_files(bval_path: &Path, bvec_path: &Path) -> Result<Self> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| FitError::Io(format!("{}: {e}", p.display())))
        };
        DiffusionScheme::parse(&read(bval_path)?, &read(bvec_path)?)
    }

    pub fn parse(bval_text: &str, bvec_text: &str) -> Result<Self> {
        let bvals: Vec<f64> = parse_numbers(bval_text)?;
        let rows: Vec<Vec<f64>> = bvec_text
            .lines()
            .map(parse_numbers)
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|r| !r.is_empty())
            .collect();
        let n = bvals.len();
        let mut bvecs: Vec<[f64; 3]> = if rows.len() == 3 && rows.iter().all(|r| r.len() == n) {
            (0..n).map(|i| [rows[0][i], rows[1][i], rows[2][i]]).collect()
        } else if rows.len() == n && rows.iter().all(|r| r.len() == 3) {
            rows.iter().map(|r| [r[0], r[1], r[2]]).collect()
        } else {
            return Err(FitError::InvalidScheme(format!(
                "gradient table is neither 3x{n} nor {n}x3"
            )));
        };
        for (b, g) in bvals.iter().zip(bvecs.iter_mut()) {
            if *b >= B0_THRESHOLD {
                let nrm = norm(g);
                if (nrm - 1.0).abs() < 1e-2 {
                    g.iter_mut().for_each(|c| *c /= nrm);
                }
            }
        }
        DiffusionScheme::new(bvals, bvecs)
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn bvecs(&self) -> &[[f64; 3]] {
        &self.bvecs
    }

    pub fn n_b0(&self) -> usize {
        self.bvals.iter().filter(|&&b| b < B0_THRESHOLD).count()
    }

    pub fn is_b0(&self, i: usize) -> bool {
        self.bvals[i] < B0_THRESHOLD
    }

    /// Log-linear Stejskal–Tanner design: columns act on
    /// `(ln S0, Dxx, Dxy, Dxz, Dyy, Dyz, Dzz)`.
    pub fn design_matrix(&self) -> Result<DMatrix<f64>> {
        let x = DMatrix::from_fn(self.len(), 7, |i, j| design_row(self.bvals[i], &self.bvecs[i])[j]);
        let rank = x.clone().svd(false, false).rank(1e-10 * x.norm().max(1.0));
        if rank < 7 {
            return Err(FitError::DegenerateScheme { rank });
        }
        Ok(x)
    }
}

pub(crate) fn design_row(b: f64, g: &[f64; 3]) -> [f64; 7] {
    let [gx, gy, gz] = *g;
    [
        1.0,
        -b * gx * gx,
        -2.0 * b * gx * gy,
        -2.0 * b * gx * gz,
        -b * gy * gy,
        -2.0 * b * gy * gz,
        -b * gz * gz,
    ]
}

fn norm(g: &[f64; 3]) -> f64 {
    (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()
}

fn parse_numbers(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| FitError::InvalidScheme(format!("not a number: {t:?}")))
        })
        .collect()
}

/// Fibonacci spiral on the upper hemisphere.
fn hemisphere_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}
