use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rayon::prelude::*;

use super::{frobenius, DiffusionScheme, FitError, Result, TensorField};
use crate::volume::{Mask, Volume, VolumeError};

type Params = [f64; 7];

/// Levenberg–Marquardt settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iter: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            max_iter: 50,
            rel_tol: 1e-10,
        }
    }
}

/// Result of one voxel's LM refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct LmVoxel {
    /// `(ln S0, Dxx, Dxy, Dxz, Dyy, Dyz, Dzz)`
    pub params: Params,
    pub init_cost: f64,
    pub cost: f64,
    pub iterations: usize,
    /// Cost after each accepted step.
    pub accepted: Vec<f64>,
}

/// Sum of squared residuals of the exponential signal model.
pub fn signal_cost(signals: &[f64], design: &DMatrix<f64>, p: &Params) -> f64 {
    signals
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let r = s - model(design, i, p);
            r * r
        })
        .sum()
}

#[inline]
fn model(design: &DMatrix<f64>, i: usize, p: &Params) -> f64 {
    let mut e = 0.0;
    for j in 0..7 {
        e += design[(i, j)] * p[j];
    }
    e.exp()
}

fn pseudo_inverse(design: &DMatrix<f64>) -> DMatrix<f64> {
    design
        .clone()
        .pseudo_inverse(1e-12)
        .expect("pseudo-inverse of a full-rank design")
}

/// Log-linear OLS estimate for one voxel, or `None` when the voxel carries
/// no usable signal. Signals are floored at `1e-6 · S0_est` before the log.
pub fn loglinear_voxel(signals: &[f64], pinv: &DMatrix<f64>, scheme: &DiffusionScheme) -> Option<Params> {
    if signals.iter().any(|s| !s.is_finite()) {
        return None;
    }
    let b0: Vec<f64> = (0..scheme.len()).filter(|&i| scheme.is_b0(i)).map(|i| signals[i]).collect();
    let mut s0_est = b0.iter().sum::<f64>() / b0.len() as f64;
    if !(s0_est > 0.0) {
        s0_est = signals.iter().cloned().fold(0.0, f64::max);
    }
    if !(s0_est > 0.0) {
        return None;
    }
    let floor = 1e-6 * s0_est;
    let logs = DVector::from_iterator(signals.len(), signals.iter().map(|&s| s.max(floor).ln()));
    let beta = pinv * logs;
    let p: Params = std::array::from_fn(|j| beta[j]);
    p.iter().all(|x| x.is_finite()).then_some(p)
}

/// Levenberg–Marquardt with Marquardt (diagonal) damping. Rejected steps
/// raise the damping; accepted steps lower it. The returned cost never
/// exceeds the initial cost.
pub fn lm_voxel(signals: &[f64], design: &DMatrix<f64>, init: &Params, opts: &LmOptions) -> LmVoxel {
    let mut p = *init;
    let init_cost = signal_cost(signals, design, &p);
    let mut cost = init_cost;
    let mut lambda = opts.lambda0;
    let mut accepted = Vec::new();
    let mut iterations = 0;
    let n = signals.len();

    let mut jtj = SMatrix::<f64, 7, 7>::zeros();
    let mut jtr = SVector::<f64, 7>::zeros();
    let mut stale = true;

    while iterations < opts.max_iter && cost > 0.0 && cost.is_finite() {
        if stale {
            // normal equations of the linearized problem
            jtj.fill(0.0);
            jtr.fill(0.0);
            for i in 0..n {
                let f = model(design, i, &p);
                let r = signals[i] - f;
                let row: [f64; 7] = std::array::from_fn(|j| f * design[(i, j)]);
                for a in 0..7 {
                    jtr[a] += row[a] * r;
                    for b in a..7 {
                        jtj[(a, b)] += row[a] * row[b];
                    }
                }
            }
            for a in 0..7 {
                for b in 0..a {
                    jtj[(a, b)] = jtj[(b, a)];
                }
            }
            if jtr.iter().all(|&g| g == 0.0) {
                break;
            }
            stale = false;
        }
        iterations += 1;

        let mut damped = jtj;
        for a in 0..7 {
            damped[(a, a)] += lambda * jtj[(a, a)].max(1e-300);
        }
        let trial = damped.cholesky().map(|c| {
            let delta = c.solve(&jtr);
            let q: Params = std::array::from_fn(|j| p[j] + delta[j]);
            (q, signal_cost(signals, design, &q))
        });
        match trial {
            Some((q, c)) if c.is_finite() && c < cost => {
                let rel = (cost - c) / cost;
                p = q;
                cost = c;
                accepted.push(cost);
                lambda = (lambda / opts.lambda_down).max(1e-20);
                stale = true;
                if rel < opts.rel_tol {
                    break;
                }
            }
            _ => {
                lambda *= opts.lambda_up;
                if lambda > 1e20 {
                    break;
                }
            }
        }
    }
    LmVoxel { params: p, init_cost, cost, iterations, accepted }
}

fn check_channels(dwi: &Volume, scheme: &DiffusionScheme, mask: &Mask) -> Result<()> {
    if dwi.channels() != scheme.len() {
        return Err(FitError::ChannelMismatch {
            expected: scheme.len(),
            found: dwi.channels(),
        });
    }
    if mask.dims() != dwi.spatial_dims() {
        return Err(FitError::Volume(VolumeError::ShapeMismatch(format!(
            "mask grid {:?} vs DWI grid {:?}",
            mask.dims(),
            dwi.spatial_dims()
        ))));
    }
    Ok(())
}

fn voxel_signals(dwi: &Volume, i: usize) -> Vec<f64> {
    let n = dwi.n_spatial();
    (0..dwi.channels()).map(|k| dwi.data()[k * n + i] as f64).collect()
}

fn store(field: &mut TensorField, i: usize, p: Option<Params>) {
    match p {
        Some(p) => {
            field.set(i, &[p[1], p[2], p[3], p[4], p[5], p[6]]);
            field.s0.data_mut()[i] = p[0].exp() as f32;
            field.flags[i] = false;
        }
        None => field.zero_voxel(i),
    }
}

/// Log-linear tensor fit on every masked voxel. Voxels without usable
/// signal are zeroed and flagged.
pub fn fit_loglinear(dwi: &Volume, scheme: &DiffusionScheme, mask: &Mask) -> Result<TensorField> {
    check_channels(dwi, scheme, mask)?;
    let pinv = pseudo_inverse(&scheme.design_matrix()?);
    let n = dwi.n_spatial();
    let fits: Vec<Option<Option<Params>>> = (0..n)
        .into_par_iter()
        .map(|i| mask.at(i).then(|| loglinear_voxel(&voxel_signals(dwi, i), &pinv, scheme)))
        .collect();
    let mut field = TensorField::zeros_like(dwi);
    for (i, f) in fits.into_iter().enumerate() {
        if let Some(p) = f {
            store(&mut field, i, p);
        }
    }
    Ok(field)
}

/// LM refinement of `init` (normally the log-linear fit) on masked voxels.
/// Voxels flagged in `init` or with non-finite signal end up zeroed and
/// flagged.
pub fn fit_lm(
    dwi: &Volume,
    scheme: &DiffusionScheme,
    mask: &Mask,
    init: &TensorField,
    opts: &LmOptions,
) -> Result<TensorField> {
    check_channels(dwi, scheme, mask)?;
    if opts.max_iter == 0 {
        return Ok(init.clone());
    }
    let design = scheme.design_matrix()?;
    let n = dwi.n_spatial();
    let fits: Vec<Option<Option<Params>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !mask.at(i) {
                return None;
            }
            let s0 = init.s0.data()[i] as f64;
            if init.flags[i] || !(s0 > 0.0) {
                return Some(None);
            }
            let signals = voxel_signals(dwi, i);
            if signals.iter().any(|s| !s.is_finite()) {
                return Some(None);
            }
            let d = init.get(i);
            let p0 = [s0.ln(), d[0], d[1], d[2], d[3], d[4], d[5]];
            Some(Some(lm_voxel(&signals, &design, &p0, opts).params))
        })
        .collect();
    let mut field = init.clone();
    for (i, f) in fits.into_iter().enumerate() {
        if let Some(p) = f {
            store(&mut field, i, p);
        }
    }
    Ok(field)
}

/// Zero (and flag) every voxel whose full-matrix Frobenius norm exceeds
/// `threshold` mm²/s.
pub fn outlier_zero(t: &TensorField, threshold: f64) -> TensorField {
    let mut out = t.clone();
    for i in 0..t.n_voxels() {
        if frobenius(&t.get(i)) > threshold {
            out.zero_voxel(i);
        }
    }
    out
}

/// How normalization statistics are pooled across channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizeMode {
    /// One mean and standard deviation over all channels.
    #[default]
    Joint,
    PerChannel,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let (sum, count) = values.clone().fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    let mean = sum / count as f64;
    let var = values.map(|x| (x - mean) * (x - mean)).sum::<f64>() / count as f64;
    (mean, var.sqrt(), count)
}

/// Standardize masked voxels to zero mean and unit (population) standard
/// deviation. Voxels outside the mask are set to zero.
pub fn normalize_channels(v: &Volume, mask: &Mask, mode: NormalizeMode) -> Result<Volume> {
    if mask.dims() != v.spatial_dims() {
        return Err(FitError::Volume(VolumeError::ShapeMismatch(format!(
            "mask grid {:?} vs volume grid {:?}",
            mask.dims(),
            v.spatial_dims()
        ))));
    }
    let n = v.n_spatial();
    let idx: Vec<usize> = (0..n).filter(|&i| mask.at(i)).collect();
    if idx.len() < 2 {
        return Err(FitError::TooFewVoxels(idx.len()));
    }
    let ch = v.channels();
    let data = v.data();
    let stats: Vec<(f64, f64)> = match mode {
        NormalizeMode::Joint => {
            let it = (0..ch).flat_map(|c| idx.iter().map(move |&i| data[c * n + i] as f64));
            let (m, s, _) = mean_std(it);
            vec![(m, s); ch]
        }
        NormalizeMode::PerChannel => (0..ch)
            .map(|c| {
                let (m, s, _) = mean_std(idx.iter().map(|&i| data[c * n + i] as f64));
                (m, s)
            })
            .collect(),
    };
    if stats.iter().any(|&(m, s)| !(s > 1e-12 * m.abs().max(f64::MIN_POSITIVE))) {
        return Err(FitError::ConstantField);
    }
    let mut out = v.zeros_like_grid(ch);
    let od = out.data_mut();
    for (c, &(m, s)) in stats.iter().enumerate() {
        for &i in &idx {
            od[c * n + i] = ((data[c * n + i] as f64 - m) / s) as f32;
        }
    }
    Ok(out)
}

/// Scan-wise standardization of tensor magnitudes inside the brain mask.
pub fn normalize_scan(t: &TensorField, mask: &Mask, mode: NormalizeMode) -> Result<TensorField> {
    let tensor = normalize_channels(&t.tensor, mask, mode)?;
    Ok(TensorField {
        tensor,
        s0: t.s0.clone(),
        flags: t.flags.clone(),
    })
}
