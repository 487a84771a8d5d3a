use nalgebra::Matrix4;

use super::{Affine, Mask, Result, Volume, VolumeError};

fn to_matrix(a: &Affine) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| a[r][c])
}

/// Nearest-neighbour resampling of `moving` onto the grid of `target`.
///
/// `world_transform` maps world coordinates of the target grid into world
/// coordinates of the moving image (a rigid transform in practice). Voxels
/// that fall outside the moving grid become zero.
pub fn resample_nearest(moving: &Mask, target: &Volume, world_transform: &Affine) -> Result<Mask> {
    let inv_moving = to_matrix(moving.volume().affine())
        .try_inverse()
        .ok_or_else(|| VolumeError::Invalid("moving affine is singular".into()))?;
    let m = inv_moving * to_matrix(world_transform) * to_matrix(target.affine());
    let [nx, ny, nz] = target.spatial_dims();
    let [mx, my, mz] = moving.dims();
    let mut out_vol = target.zeros_like_grid(1);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = m * nalgebra::Vector4::new(x as f64, y as f64, z as f64, 1.0);
                let q = [p[0].round(), p[1].round(), p[2].round()];
                if q.iter().any(|&c| c < 0.0) {
                    continue;
                }
                let (qx, qy, qz) = (q[0] as usize, q[1] as usize, q[2] as usize);
                if qx < mx && qy < my && qz < mz && moving.at_xyz(qx, qy, qz) {
                    out_vol.set(x, y, z, 0, 1.0);
                }
            }
        }
    }
    Mask::try_from_volume(out_vol)
}
