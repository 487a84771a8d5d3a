//! Distribution functions for the t, F, normal and studentized range
//! distributions.

use std::sync::OnceLock;

use super::special::{beta_inc, ln_gamma};

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Student t CDF with `df > 0` (non-integer allowed).
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * beta_inc(0.5 * df, 0.5, df / (df + t * t));
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided p-value `P(|T| >= |t|)`.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    beta_inc(0.5 * df, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Survival function `P(F >= f)` of the F(d1, d2) distribution.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    beta_inc(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

/// 16-point Gauss–Legendre rule on [-1, 1].
fn gauss_legendre() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = 16;
        let mut out = Vec::with_capacity(n);
        for i in 1..=n {
            // Newton iteration on P_n from the Chebyshev initial guess
            let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let k = k as f64;
                    let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
        }
        out
    })
}

/// Composite Gauss–Legendre quadrature over `panels` equal sub-intervals.
fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let rule = gauss_legendre();
    let w = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * w;
        total += rule.iter().map(|&(x, wt)| wt * f(mid + 0.5 * w * x)).sum::<f64>() * 0.5 * w;
    }
    total
}

const INNER_PANELS: usize = 12;
const OUTER_PANELS: usize = 12;

/// CDF of the range of `k` standard normals.
fn range_cdf_normal(w: f64, k: usize) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let k_f = k as f64;
    let v = integrate(
        |z| normal_pdf(z) * (normal_cdf(z) - normal_cdf(z - w)).max(0.0).powi(k as i32 - 1),
        -8.5,
        8.5,
        INNER_PANELS,
    );
    (k_f * v).clamp(0.0, 1.0)
}

/// CDF of the studentized range `q` for `k` groups and `df` degrees of
/// freedom, by integrating the normal-range CDF against the density of
/// `s = sqrt(χ²_df / df)`.
pub fn ptukey(q: f64, k: usize, df: f64) -> f64 {
    assert!(k >= 2, "studentized range needs at least two groups");
    if q <= 0.0 {
        return 0.0;
    }
    if df > 1e6 {
        return range_cdf_normal(q, k);
    }
    let half = 0.5 * df;
    let ln_norm = half * df.ln() - ln_gamma(half) - (half - 1.0) * std::f64::consts::LN_2;
    let ln_dens = |s: f64| ln_norm + (df - 1.0) * s.ln() - half * s * s;
    let mode = if df > 1.0 { ((df - 1.0) / df).sqrt() } else { 0.0 };
    let peak = ln_dens(mode.max(1e-3));
    let spread = 1.0 / (2.0 * df).sqrt();
    let mut hi = mode.max(1e-3) + spread;
    while ln_dens(hi) > peak - 40.0 {
        hi += spread;
    }
    let mut lo = mode;
    while lo > 0.0 && ln_dens(lo) > peak - 40.0 {
        lo = (lo - spread).max(0.0);
    }
    let v = integrate(
        |s| {
            if s <= 0.0 {
                0.0
            } else {
                ln_dens(s).exp() * range_cdf_normal(q * s, k)
            }
        },
        lo,
        hi,
        OUTER_PANELS,
    );
    v.clamp(0.0, 1.0)
}

/// Upper tail `P(Q >= q)` of the studentized range.
pub fn ptukey_sf(q: f64, k: usize, df: f64) -> f64 {
    (1.0 - ptukey(q, k, df)).clamp(0.0, 1.0)
}
