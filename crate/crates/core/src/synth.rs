//! Synthetic tensor volumes with an ellipsoidal "tract" for toy training
//! and tests.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensorfit::{normalize_scan, NormalizeMode, TensorField};
use crate::volume::{Mask, Volume};

/// Which half of the x axis hosts the tract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Center,
    Left,
    Right,
}

#[derive(Debug, Clone)]
pub struct ToyOptions {
    pub dims: [usize; 3],
    pub side: Side,
    /// Std of additive noise on tensor elements, in mm²/s.
    pub noise: f64,
}

impl Default for ToyOptions {
    fn default() -> Self {
        ToyOptions {
            dims: [32, 32, 32],
            side: Side::Center,
            noise: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToySample {
    /// Scan-normalized 6-channel tensor volume.
    pub tensor: Volume,
    pub label: Mask,
}

fn pack(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
}

fn tensor_along(dir: &Vector3<f64>, l1: f64, l2: f64) -> Matrix3<f64> {
    let e = dir.normalize();
    Matrix3::identity() * l2 + e * e.transpose() * (l1 - l2)
}

fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        if v.norm() > 1e-3 {
            return v.normalize();
        }
    }
}

/// One toy scan: a prolate-tensor ellipsoid in a weakly anisotropic,
/// noisy background. Fully determined by `seed`.
pub fn toy_sample(seed: u64, opts: &ToyOptions) -> ToySample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nx, ny, nz] = opts.dims;
    let d = [nx as f64, ny as f64, nz as f64];

    let mut center = Vector3::new(
        d[0] * rng.random_range(0.4..0.6),
        d[1] * rng.random_range(0.4..0.6),
        d[2] * rng.random_range(0.4..0.6),
    );
    match opts.side {
        Side::Center => {}
        Side::Left => center.x = d[0] * rng.random_range(0.27..0.33),
        Side::Right => center.x = d[0] * rng.random_range(0.67..0.73),
    }
    let min_d = d.iter().copied().fold(f64::INFINITY, f64::min);
    // ROI-like framing: the tract fills a sizeable part of the grid
    let semi = Vector3::new(
        min_d * rng.random_range(0.36..0.42),
        min_d * rng.random_range(0.18..0.24),
        min_d * rng.random_range(0.18..0.24),
    );
    // scans share a rough orientation: main axis within ~25° of y
    let tilt = random_unit(&mut rng) * 0.45;
    let axis = (Vector3::y() + tilt).normalize();
    let rot = Rotation3::rotation_between(&Vector3::x(), &axis)
        .unwrap_or_else(|| Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::z()), std::f64::consts::PI));
    let rot = rot.inverse();

    let noise = Normal::new(0.0, opts.noise).unwrap();
    let grid = Volume::zeros(&[nx, ny, nz]);
    let mut field = TensorField::zeros_like(&grid);
    let mut label = Mask::empty([nx, ny, nz]);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = Vector3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) - center;
                let q = rot * p;
                let r2 = (q.x / semi.x).powi(2) + (q.y / semi.y).powi(2) + (q.z / semi.z).powi(2);
                let inside = r2 <= 1.0;
                let m = if inside {
                    tensor_along(&axis, 1.7e-3, 0.3e-3)
                } else {
                    let dir = random_unit(&mut rng);
                    tensor_along(&dir, rng.random_range(0.8e-3..1.1e-3), rng.random_range(0.6e-3..0.8e-3))
                };
                let mut t = pack(&m);
                for v in &mut t {
                    *v += noise.sample(&mut rng);
                }
                let i = x + nx * (y + ny * z);
                field.set(i, &t);
                if inside {
                    label.set(x, y, z, true);
                }
            }
        }
    }
    let full = Mask::full(&grid);
    let normalized = normalize_scan(&field, &full, NormalizeMode::Joint).expect("non-constant field");
    ToySample {
        tensor: normalized.tensor,
        label,
    }
}

/// `n` toy scans with seeds `seed, seed + 1, ...`.
pub fn toy_dataset(n: usize, seed: u64, opts: &ToyOptions) -> Vec<ToySample> {
    (0..n as u64).map(|i| toy_sample(seed + i, opts)).collect()
}
