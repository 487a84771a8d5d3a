//! Tensor eigen-decomposition and the FA / MD / L1 / RD / MO scalar maps.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::tensorfit::TensorField;
use crate::volume::{Mask, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("non-finite tensor entry")]
    NonFinite,
    #[error("segmentation does not overlap any nonzero map voxel")]
    EmptyTract,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Eigenvalues in descending order with matching orthonormal eigenvectors.
/// Each eigenvector's first nonzero component is positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenSystem {
    pub values: [f64; 3],
    pub vectors: [[f64; 3]; 3],
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = dot(&v, &v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn mat_vec(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

/// Unpack `(xx, xy, xz, yy, yz, zz)`.
pub fn unpack(d: &[f64; 6]) -> [[f64; 3]; 3] {
    [[d[0], d[1], d[2]], [d[1], d[3], d[4]], [d[2], d[4], d[5]]]
}

/// Unit vectors spanning the plane orthogonal to unit `w`.
fn orthogonal_complement(w: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
    let u = if w[0].abs() > w[1].abs() {
        let inv = 1.0 / (w[0] * w[0] + w[2] * w[2]).sqrt();
        [-w[2] * inv, 0.0, w[0] * inv]
    } else {
        let inv = 1.0 / (w[1] * w[1] + w[2] * w[2]).sqrt();
        [0.0, w[2] * inv, -w[1] * inv]
    };
    let v = cross(w, &u);
    (u, v)
}

/// Eigenvector for a simple eigenvalue: the largest cross product of two
/// rows of `A - λI`.
fn eigenvector_simple(a: &[[f64; 3]; 3], lambda: f64) -> [f64; 3] {
    let r0 = [a[0][0] - lambda, a[0][1], a[0][2]];
    let r1 = [a[0][1], a[1][1] - lambda, a[1][2]];
    let r2 = [a[0][2], a[1][2], a[2][2] - lambda];
    let c = [cross(&r0, &r1), cross(&r0, &r2), cross(&r1, &r2)];
    let best = c
        .iter()
        .max_by(|x, y| dot(x, x).total_cmp(&dot(y, y)))
        .unwrap();
    normalized(*best)
}

/// Eigenpairs of `A` restricted to the plane orthogonal to unit `w`,
/// solved as a 2×2 symmetric problem.
fn complement_pairs(a: &[[f64; 3]; 3], w: &[f64; 3]) -> [(f64, [f64; 3]); 2] {
    let (u, v) = orthogonal_complement(w);
    let au = mat_vec(a, &u);
    let av = mat_vec(a, &v);
    let m00 = dot(&u, &au);
    let m01 = dot(&u, &av);
    let m11 = dot(&v, &av);
    if m01 == 0.0 {
        return if m00 >= m11 { [(m00, u), (m11, v)] } else { [(m11, v), (m00, u)] };
    }
    let mid = 0.5 * (m00 + m11);
    let rad = (0.5 * (m00 - m11)).hypot(m01);
    let theta = 0.5 * (2.0 * m01).atan2(m00 - m11);
    let (s, c) = theta.sin_cos();
    let e_hi = [c * u[0] + s * v[0], c * u[1] + s * v[1], c * u[2] + s * v[2]];
    let e_lo = [-s * u[0] + c * v[0], -s * u[1] + c * v[1], -s * u[2] + c * v[2]];
    [(mid + rad, e_hi), (mid - rad, e_lo)]
}

fn canonical_sign(v: [f64; 3]) -> [f64; 3] {
    let first = v.iter().copied().find(|c| c.abs() > 1e-12).unwrap_or(0.0);
    if first < 0.0 {
        [-v[0], -v[1], -v[2]]
    } else {
        v
    }
}

/// Closed-form eigen-decomposition of a symmetric 3×3 tensor.
///
/// Eigenvalues come from the trigonometric solution of the characteristic
/// cubic of the scaled, trace-shifted matrix. The eigenvector of the most
/// separated eigenvalue is taken from row cross products; the remaining pair
/// is solved as a 2×2 problem in its orthogonal complement, which stays
/// accurate when those two eigenvalues nearly coincide.
pub fn eig3_sym(d: &[f64; 6]) -> Result<EigenSystem> {
    if d.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let scale = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Ok(EigenSystem {
            values: [0.0; 3],
            vectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        });
    }
    let a = unpack(&d.map(|x| x / scale));
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let b00 = a[0][0] - q;
    let b11 = a[1][1] - q;
    let b22 = a[2][2] - q;
    let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    let p = ((b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * off) / 6.0).sqrt();

    let (values, vectors) = if p == 0.0 {
        // multiple of the identity
        let l = q * scale;
        ([l; 3], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    } else {
        let c00 = b11 * b22 - a[1][2] * a[1][2];
        let c01 = a[0][1] * b22 - a[1][2] * a[0][2];
        let c02 = a[0][1] * a[1][2] - b11 * a[0][2];
        let det = (b00 * c00 - a[0][1] * c01 + a[0][2] * c02) / (p * p * p);
        let half_det = (0.5 * det).clamp(-1.0, 1.0);
        let angle = half_det.acos() / 3.0;
        let two_thirds_pi = 2.0 * std::f64::consts::FRAC_PI_3;
        let beta2 = 2.0 * angle.cos();
        let beta0 = 2.0 * (angle + two_thirds_pi).cos();
        let beta1 = -(beta0 + beta2);
        let ev = [q + p * beta0, q + p * beta1, q + p * beta2];

        // the extreme eigenvalue on the side away from the near-double root
        let distinct = if half_det >= 0.0 { ev[2] } else { ev[0] };
        let w = eigenvector_simple(&a, distinct);
        let full = unpack(d);
        let lw = dot(&w, &mat_vec(&full, &w));
        let [(l_hi, e_hi), (l_lo, e_lo)] = complement_pairs(&full, &w);
        ([lw, l_hi, l_lo], [w, e_hi, e_lo])
    };

    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    Ok(EigenSystem {
        values: order.map(|i| values[i]),
        vectors: order.map(|i| canonical_sign(vectors[i])),
    })
}

/// Per-voxel scalars derived from eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Scalars {
    pub fa: f64,
    pub md: f64,
    pub l1: f64,
    pub rd: f64,
    pub mo: f64,
}

/// FA, MD, L1, RD and mode of anisotropy from descending eigenvalues.
/// FA and MO are zero when the deviatoric part vanishes. FA is not clamped
/// here.
pub fn scalars_from_eigenvalues(l: &[f64; 3]) -> Scalars {
    let md = (l[0] + l[1] + l[2]) / 3.0;
    let dev = [l[0] - md, l[1] - md, l[2] - md];
    let dev_norm = (dev[0] * dev[0] + dev[1] * dev[1] + dev[2] * dev[2]).sqrt();
    let l_norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
    let (fa, mo) = if dev_norm < 1e-12 * l_norm.max(1.0) || l_norm == 0.0 {
        (0.0, 0.0)
    } else {
        let fa = (1.5f64).sqrt() * dev_norm / l_norm;
        let det = dev[0] * dev[1] * dev[2] / (dev_norm * dev_norm * dev_norm);
        (fa, (3.0 * 6f64.sqrt() * det).clamp(-1.0, 1.0))
    };
    Scalars {
        fa,
        md,
        l1: l[0],
        rd: 0.5 * (l[1] + l[2]),
        mo,
    }
}

/// Scalar maps on the tensor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMaps {
    pub fa: Volume,
    pub md: Volume,
    pub l1: Volume,
    pub rd: Volume,
    pub mo: Volume,
    /// Voxels whose FA fell outside [0, 1] (non-positive-definite fits).
    pub clamped: usize,
}

impl ScalarMaps {
    pub fn named(&self) -> [(&'static str, &Volume); 5] {
        [
            ("FA", &self.fa),
            ("MD", &self.md),
            ("L1", &self.l1),
            ("RD", &self.rd),
            ("MO", &self.mo),
        ]
    }
}

/// Compute all maps on masked, unflagged voxels; other voxels are zero.
pub fn scalar_maps(t: &TensorField, mask: &Mask) -> Result<ScalarMaps> {
    if mask.dims() != t.tensor.spatial_dims() {
        return Err(MetricsError::Volume(VolumeError::ShapeMismatch(format!(
            "mask grid {:?} vs tensor grid {:?}",
            mask.dims(),
            t.tensor.spatial_dims()
        ))));
    }
    let mut fa = t.tensor.zeros_like_grid(1);
    let mut md = fa.clone();
    let mut l1 = fa.clone();
    let mut rd = fa.clone();
    let mut mo = fa.clone();
    let mut clamped = 0;
    for i in 0..t.n_voxels() {
        if !mask.at(i) || t.flags[i] {
            continue;
        }
        let d = t.get(i);
        if d.iter().all(|&x| x == 0.0) {
            continue;
        }
        let e = eig3_sym(&d)?;
        let s = scalars_from_eigenvalues(&e.values);
        let fa_c = s.fa.clamp(0.0, 1.0);
        if fa_c != s.fa {
            clamped += 1;
        }
        fa.data_mut()[i] = fa_c as f32;
        md.data_mut()[i] = s.md as f32;
        l1.data_mut()[i] = s.l1 as f32;
        rd.data_mut()[i] = s.rd as f32;
        mo.data_mut()[i] = s.mo as f32;
    }
    if clamped > 0 {
        log::warn!("clamped FA to [0, 1] in {clamped} non-positive-definite voxels");
    }
    Ok(ScalarMaps { fa, md, l1, rd, mo, clamped })
}

/// Mean of nonzero map values inside a tract, plus the tract volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TractMean {
    pub mean: f64,
    pub n_used: usize,
    pub volume_ml: f64,
}

pub fn tract_mean(map: &Volume, seg: &Mask) -> Result<TractMean> {
    if map.spatial_dims() != seg.dims() {
        return Err(MetricsError::Volume(VolumeError::ShapeMismatch(format!(
            "map grid {:?} vs segmentation grid {:?}",
            map.spatial_dims(),
            seg.dims()
        ))));
    }
    let (sum, n_used) = map
        .channel(0)
        .iter()
        .zip(seg.iter())
        .filter(|&(&v, s)| s && v != 0.0)
        .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    if n_used == 0 {
        return Err(MetricsError::EmptyTract);
    }
    Ok(TractMean {
        mean: sum / n_used as f64,
        n_used,
        volume_ml: seg.count() as f64 * map.voxel_volume() / 1000.0,
    })
}

/// One row of the tract statistics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TractRow {
    pub subject_id: String,
    pub tract: String,
    #[serde(rename = "FA")]
    pub fa: f64,
    #[serde(rename = "MD")]
    pub md: f64,
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "RD")]
    pub rd: f64,
    #[serde(rename = "MO")]
    pub mo: f64,
    pub volume_ml: f64,
}

/// Tract means for every map. FA must overlap the tract; the other maps
/// report 0 when no tract voxel is nonzero.
pub fn tract_row(subject_id: &str, tract: &str, maps: &ScalarMaps, seg: &Mask) -> Result<TractRow> {
    let fa = tract_mean(&maps.fa, seg)?;
    let mean_or_zero = |v: &Volume| match tract_mean(v, seg) {
        Ok(m) => Ok(m.mean),
        Err(MetricsError::EmptyTract) => Ok(0.0),
        Err(e) => Err(e),
    };
    Ok(TractRow {
        subject_id: subject_id.to_string(),
        tract: tract.to_string(),
        fa: fa.mean,
        md: mean_or_zero(&maps.md)?,
        l1: mean_or_zero(&maps.l1)?,
        rd: mean_or_zero(&maps.rd)?,
        mo: mean_or_zero(&maps.mo)?,
        volume_ml: fa.volume_ml,
    })
}

/// Append rows to a CSV, writing the header only when the file is new.
pub fn append_tract_csv(path: &Path, rows: &[TractRow]) -> Result<()> {
    let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| MetricsError::Csv(format!("{}: {e}", path.display())))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| MetricsError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| MetricsError::Csv(e.to_string()))?;
    Ok(())
}
