//! Per-voxel diffusion tensor estimation.
//!
//! A log-linear least-squares fit provides the initial estimate, which a
//! Levenberg–Marquardt refinement of the nonlinear signal model
//! `S_i = S0 · exp(-b_i gᵢᵀ D gᵢ)` then improves. Tensors are stored as six
//! channels `(Dxx, Dxy, Dxz, Dyy, Dyz, Dzz)` in mm²/s.

mod fit;
mod scheme;

pub use fit::{
    fit_lm, fit_loglinear, lm_voxel, loglinear_voxel, normalize_channels, normalize_scan,
    outlier_zero, signal_cost, LmOptions, LmVoxel, NormalizeMode,
};
pub use scheme::{DiffusionScheme, B0_THRESHOLD};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::volume::{Volume, VolumeError};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid diffusion scheme: {0}")]
    InvalidScheme(String),
    #[error("degenerate diffusion scheme: design rank {rank} < 7")]
    DegenerateScheme { rank: usize },
    #[error("DWI has {found} volumes but the scheme has {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("normalization over a constant field")]
    ConstantField,
    #[error("need at least two masked voxels, found {0}")]
    TooFewVoxels(usize),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, FitError>;

/// Fitted tensors on a grid, with S0 and a per-voxel failure flag.
/// Flagged voxels hold an all-zero tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub tensor: Volume,
    pub s0: Volume,
    pub flags: Vec<bool>,
}

impl TensorField {
    pub fn zeros_like(grid: &Volume) -> Self {
        TensorField {
            tensor: grid.zeros_like_grid(6),
            s0: grid.zeros_like_grid(1),
            flags: vec![false; grid.n_spatial()],
        }
    }

    /// Wrap a 6-channel volume (e.g. loaded from disk). S0 is unknown (zero)
    /// and all-zero voxels are flagged.
    pub fn from_volume(tensor: Volume) -> Result<Self> {
        if tensor.channels() != 6 {
            return Err(FitError::Volume(VolumeError::ShapeMismatch(format!(
                "tensor volume needs 6 channels, got {}",
                tensor.channels()
            ))));
        }
        let n = tensor.n_spatial();
        let flags = (0..n).map(|i| (0..6).all(|c| tensor.data()[c * n + i] == 0.0)).collect();
        Ok(TensorField {
            s0: tensor.zeros_like_grid(1),
            tensor,
            flags,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.tensor.n_spatial()
    }

    pub fn get(&self, i: usize) -> [f64; 6] {
        let n = self.n_voxels();
        let d = self.tensor.data();
        std::array::from_fn(|c| d[c * n + i] as f64)
    }

    pub fn set(&mut self, i: usize, d: &[f64; 6]) {
        let n = self.n_voxels();
        let data = self.tensor.data_mut();
        for c in 0..6 {
            data[c * n + i] = d[c] as f32;
        }
    }

    pub fn zero_voxel(&mut self, i: usize) {
        self.set(i, &[0.0; 6]);
        self.s0.data_mut()[i] = 0.0;
        self.flags[i] = true;
    }
}

/// Full 3×3 Frobenius norm of a packed tensor (off-diagonals count twice).
pub fn frobenius(d: &[f64; 6]) -> f64 {
    let [xx, xy, xz, yy, yz, zz] = *d;
    (xx * xx + yy * yy + zz * zz + 2.0 * (xy * xy + xz * xz + yz * yz)).sqrt()
}

/// Noise-free signal for one tensor: `S0 · exp(-b gᵀDg)`, evaluated with
/// the explicit quadratic form.
pub fn simulate_signal(d: &[f64; 6], s0: f64, scheme: &DiffusionScheme) -> Vec<f64> {
    let m = [[d[0], d[1], d[2]], [d[1], d[3], d[4]], [d[2], d[4], d[5]]];
    scheme
        .bvals()
        .iter()
        .zip(scheme.bvecs())
        .map(|(&b, g)| {
            let mut q = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    q += g[r] * m[r][c] * g[c];
                }
            }
            s0 * (-b * q).exp()
        })
        .collect()
}

/// Rician magnitude noise with `sigma = s0 / snr`.
pub fn add_rician<R: Rng>(signal: &[f64], s0: f64, snr: f64, rng: &mut R) -> Vec<f64> {
    let noise = Normal::new(0.0, s0 / snr).expect("positive sigma");
    signal
        .iter()
        .map(|&s| {
            let re = s + noise.sample(rng);
            let im = noise.sample(rng);
            (re * re + im * im).sqrt()
        })
        .collect()
}

/// Build a 4D DWI volume from per-voxel tensors (zero tensor voxels get
/// `S0` in every volume).
pub fn simulate_dwi(tensors: &TensorField, s0: f64, scheme: &DiffusionScheme) -> Volume {
    let n = tensors.n_voxels();
    let mut dwi = tensors.tensor.zeros_like_grid(scheme.len());
    for i in 0..n {
        let sig = simulate_signal(&tensors.get(i), s0, scheme);
        for (k, s) in sig.iter().enumerate() {
            dwi.data_mut()[k * n + i] = *s as f32;
        }
    }
    dwi
}
