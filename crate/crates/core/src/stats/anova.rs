//! One-way ANOVA (classic and Welch), Brown-Forsythe variance test and
//! pairwise post-hoc comparisons.

use serde::Serialize;

use super::{f_sf, ptukey_sf, t_two_sided, Result, StatsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnovaVariant {
    Classic,
    Welch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df1: f64,
    pub df2: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosthocVariant {
    BonferroniT,
    GamesHowell,
}

/// One pairwise comparison between groups `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairwiseP {
    pub i: usize,
    pub j: usize,
    /// mean_i - mean_j
    pub diff: f64,
    /// t statistic (Welch t for Games-Howell).
    pub t: f64,
    pub df: f64,
    /// Unadjusted two-sided t-test p-value.
    pub p_raw: f64,
    /// Multiplicity-adjusted p-value, clamped to 1.
    pub p: f64,
}

struct Summary {
    n: f64,
    mean: f64,
    /// Unbiased sample variance.
    var: f64,
}

fn summarize<G: AsRef<[f64]>>(groups: &[G]) -> Result<Vec<Summary>> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewObservations {
            need: 2,
            got: groups.len(),
        });
    }
    groups
        .iter()
        .map(|g| {
            let g = g.as_ref();
            if g.len() < 2 {
                return Err(StatsError::TooFewObservations { need: 2, got: g.len() });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(StatsError::Invalid("non-finite value in group".into()));
            }
            let n = g.len() as f64;
            let mean = g.iter().sum::<f64>() / n;
            let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Ok(Summary { n, mean, var })
        })
        .collect()
}

fn f_result(f: f64, df1: f64, df2: f64) -> AnovaResult {
    AnovaResult {
        f,
        df1,
        df2,
        p: f_sf(f, df1, df2),
    }
}

pub fn anova_oneway<G: AsRef<[f64]>>(groups: &[G], variant: AnovaVariant) -> Result<AnovaResult> {
    let s = summarize(groups)?;
    let k = s.len() as f64;
    match variant {
        AnovaVariant::Classic => {
            let n: f64 = s.iter().map(|g| g.n).sum();
            let grand = s.iter().map(|g| g.n * g.mean).sum::<f64>() / n;
            let ssb: f64 = s.iter().map(|g| g.n * (g.mean - grand).powi(2)).sum();
            let ssw: f64 = s.iter().map(|g| (g.n - 1.0) * g.var).sum();
            let (df1, df2) = (k - 1.0, n - k);
            let f = if ssb == 0.0 {
                0.0
            } else if ssw == 0.0 {
                f64::INFINITY
            } else {
                (ssb / df1) / (ssw / df2)
            };
            Ok(f_result(f, df1, df2))
        }
        AnovaVariant::Welch => {
            if s.iter().any(|g| g.var <= 0.0) {
                return Err(StatsError::ZeroVariance("Welch ANOVA needs non-constant groups".into()));
            }
            let w: Vec<f64> = s.iter().map(|g| g.n / g.var).collect();
            let sw: f64 = w.iter().sum();
            let mw = s.iter().zip(&w).map(|(g, w)| w * g.mean).sum::<f64>() / sw;
            let a = s.iter().zip(&w).map(|(g, w)| w * (g.mean - mw).powi(2)).sum::<f64>() / (k - 1.0);
            let lam: f64 = s
                .iter()
                .zip(&w)
                .map(|(g, w)| (1.0 - w / sw).powi(2) / (g.n - 1.0))
                .sum();
            let b = 1.0 + 2.0 * (k - 2.0) / (k * k - 1.0) * lam;
            let df2 = (k * k - 1.0) / (3.0 * lam);
            Ok(f_result(a / b, k - 1.0, df2))
        }
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Brown-Forsythe (median-centred Levene) test for equal variances.
pub fn levene<G: AsRef<[f64]>>(groups: &[G]) -> Result<AnovaResult> {
    let dev: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let g = g.as_ref();
            let m = median(g);
            g.iter().map(|v| (v - m).abs()).collect()
        })
        .collect();
    anova_oneway(&dev, AnovaVariant::Classic)
}

/// All pairwise comparisons, ordered (0,1), (0,2), ..., (1,2), ...
pub fn posthoc<G: AsRef<[f64]>>(groups: &[G], variant: PosthocVariant) -> Result<Vec<PairwiseP>> {
    let s = summarize(groups)?;
    let k = s.len();
    let pairs = (k * (k - 1) / 2) as f64;
    let mut out = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let (a, b) = (&s[i], &s[j]);
            let diff = a.mean - b.mean;
            let (se, df) = match variant {
                PosthocVariant::BonferroniT => {
                    let df = a.n + b.n - 2.0;
                    let sp2 = ((a.n - 1.0) * a.var + (b.n - 1.0) * b.var) / df;
                    ((sp2 * (1.0 / a.n + 1.0 / b.n)).sqrt(), df)
                }
                PosthocVariant::GamesHowell => {
                    let (va, vb) = (a.var / a.n, b.var / b.n);
                    let df = (va + vb).powi(2) / (va * va / (a.n - 1.0) + vb * vb / (b.n - 1.0));
                    ((va + vb).sqrt(), df)
                }
            };
            let t = if diff == 0.0 {
                0.0
            } else if se == 0.0 {
                if variant == PosthocVariant::GamesHowell {
                    return Err(StatsError::ZeroVariance(format!("groups {i} and {j} are both constant")));
                }
                f64::INFINITY.copysign(diff)
            } else {
                diff / se
            };
            let df = if df.is_finite() { df } else { a.n + b.n - 2.0 };
            let p_raw = t_two_sided(t, df);
            let p = match variant {
                PosthocVariant::BonferroniT => (p_raw * pairs).min(1.0),
                PosthocVariant::GamesHowell => {
                    if t.is_infinite() {
                        0.0
                    } else {
                        ptukey_sf(t.abs() * std::f64::consts::SQRT_2, k, df)
                    }
                }
            };
            out.push(PairwiseP {
                i,
                j,
                diff,
                t,
                df,
                p_raw,
                p,
            });
        }
    }
    Ok(out)
}
