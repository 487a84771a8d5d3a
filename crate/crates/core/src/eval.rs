//! Segmentation overlap, agreement and scan-rescan reproducibility metrics.

use serde::Serialize;
use thiserror::Error;

use crate::stats::{ols_fit, t_two_sided};
use crate::volume::{BoundingBox, Mask};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("grid mismatch: {0:?} vs {1:?}")]
    GridMismatch([usize; 3], [usize; 3]),
    #[error("bounding box does not fit the grid")]
    BoxOutside,
    #[error("scan-rescan pair has zero mean")]
    ZeroMean,
    #[error("zero variance: {0}")]
    ZeroVariance(&'static str),
    #[error("need at least {need} pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn same_grid(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(EvalError::GridMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// Dice coefficient, optionally restricted to a bounding box. Two empty
/// masks score 1.
pub fn dice(a: &Mask, b: &Mask, roi: Option<&BoundingBox>) -> Result<f64> {
    same_grid(a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    match roi {
        None => {
            for (x, y) in a.iter().zip(b.iter()) {
                na += x as usize;
                nb += y as usize;
                both += (x && y) as usize;
            }
        }
        Some(bb) => {
            if !bb.fits_in(a.dims()) {
                return Err(EvalError::BoxOutside);
            }
            for z in bb.min[2]..=bb.max[2] {
                for y in bb.min[1]..=bb.max[1] {
                    for x in bb.min[0]..=bb.max[0] {
                        let (p, q) = (a.at_xyz(x, y, z), b.at_xyz(x, y, z));
                        na += p as usize;
                        nb += q as usize;
                        both += (p && q) as usize;
                    }
                }
            }
        }
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Cohen's kappa over all voxels of the grid.
pub fn kappa(s1: &Mask, s2: &Mask) -> Result<f64> {
    same_grid(s1, s2)?;
    let n = s1.len() as f64;
    let (mut t1, mut t2, mut agree) = (0usize, 0usize, 0usize);
    for (a, b) in s1.iter().zip(s2.iter()) {
        t1 += a as usize;
        t2 += b as usize;
        agree += (a == b) as usize;
    }
    let (t1, t2) = (t1 as f64, t2 as f64);
    let po = agree as f64 / n;
    let pe = (t1 * t2 + (n - t1) * (n - t2)) / (n * n);
    if pe == 1.0 {
        return Ok(1.0);
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Relative scan-rescan difference in percent of the pair mean.
pub fn rescan_epsilon(m1: f64, m2: f64) -> Result<f64> {
    let mean = 0.5 * (m1 + m2);
    if mean == 0.0 {
        return Err(EvalError::ZeroMean);
    }
    Ok((m2 - m1).abs() / mean.abs() * 100.0)
}

/// R² of the least-squares line m2 = a + b·m1.
pub fn rescan_r2(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs {
            need: 3,
            got: pairs.len(),
        });
    }
    let first = pairs[0].0;
    if pairs.iter().all(|p| p.0 == first) {
        return Err(EvalError::ZeroVariance("first measurement is constant"));
    }
    let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let x: Vec<f64> = pairs.iter().flat_map(|p| [1.0, p.0]).collect();
    ols_fit(&y, &x, 2)
        .map(|f| f.r2)
        .map_err(|_| EvalError::ZeroVariance("degenerate regression"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedT {
    pub mean_diff: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Two-sided paired t-test of `a - b`.
pub fn paired_compare(a: &[f64], b: &[f64]) -> Result<PairedT> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(EvalError::TooFewPairs { need: 2, got: a.len() });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(EvalError::ZeroVariance("paired differences are constant"));
    }
    let t = mean / (var / n).sqrt();
    Ok(PairedT {
        mean_diff: mean,
        t,
        df: n - 1.0,
        p: t_two_sided(t, n - 1.0),
    })
}

/// One line of a batch evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub subject: String,
    pub tract: String,
    pub dice: Option<f64>,
    pub kappa: Option<f64>,
    pub eps_fa: Option<f64>,
    pub eps_md: Option<f64>,
    pub eps_vol: Option<f64>,
}

/// CSV of `rows` sorted by (subject, tract); missing metrics are empty cells.
pub fn eval_csv(rows: &[EvalRow], seed: u64) -> String {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| (&a.subject, &a.tract).cmp(&(&b.subject, &b.tract)));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subject", "tract", "dice", "kappa", "eps_FA", "eps_MD", "eps_vol", "seed"])
        .unwrap();
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for r in &rows {
        w.write_record([
            r.subject.clone(),
            r.tract.clone(),
            cell(r.dice),
            cell(r.kappa),
            cell(r.eps_fa),
            cell(r.eps_md),
            cell(r.eps_vol),
            seed.to_string(),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}
