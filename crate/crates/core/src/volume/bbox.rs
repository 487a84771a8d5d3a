use serde::{Deserialize, Serialize};

use super::{Mask, Result, Volume, VolumeError};

/// Inclusive voxel-index box, `min[a] <= max[a]` on every axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn new(min: [usize; 3], max: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| min[a] > max[a]) {
            return Err(VolumeError::Invalid(format!("box min {min:?} exceeds max {max:?}")));
        }
        Ok(BoundingBox { min, max })
    }

    /// Box covering a whole grid.
    pub fn full(dims: [usize; 3]) -> Self {
        BoundingBox {
            min: [0; 3],
            max: [dims[0] - 1, dims[1] - 1, dims[2] - 1],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [
            self.max[0] - self.min[0] + 1,
            self.max[1] - self.min[1] + 1,
            self.max[2] - self.min[2] + 1,
        ]
    }

    pub fn n_voxels(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            min: std::array::from_fn(|a| self.min[a].min(other.min[a])),
            max: std::array::from_fn(|a| self.max[a].max(other.max[a])),
        }
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn fits_in(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.max[a] < dims[a])
    }

    pub fn expand(&self, margin: usize, dims: [usize; 3]) -> BoundingBox {
        BoundingBox {
            min: std::array::from_fn(|a| self.min[a].saturating_sub(margin)),
            max: std::array::from_fn(|a| (self.max[a] + margin).min(dims[a] - 1)),
        }
    }

    /// Grow each extent to a multiple of `multiple`, keeping the box centred
    /// where possible and inside `dims`. Fails if the grid is too small.
    pub fn align_to(&self, multiple: usize, dims: [usize; 3]) -> Result<BoundingBox> {
        let mut out = *self;
        for a in 0..3 {
            let len = self.max[a] - self.min[a] + 1;
            let target = len.div_ceil(multiple) * multiple;
            if target > dims[a] {
                return Err(VolumeError::ShapeMismatch(format!(
                    "cannot align axis {a} extent {len} to a multiple of {multiple} within {}",
                    dims[a]
                )));
            }
            let grow = target - len;
            let mut lo = self.min[a].saturating_sub(grow / 2);
            if lo + target > dims[a] {
                lo = dims[a] - target;
            }
            out.min[a] = lo;
            out.max[a] = lo + target - 1;
        }
        Ok(out)
    }
}

/// Tightest box around the nonzero voxels of `m`, grown by `margin` and
/// clamped to the grid.
pub fn bounding_box(m: &Mask, margin: usize) -> Result<BoundingBox> {
    let [nx, ny, nz] = m.dims();
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if m.at_xyz(x, y, z) {
                    any = true;
                    let p = [x, y, z];
                    for a in 0..3 {
                        min[a] = min[a].min(p[a]);
                        max[a] = max[a].max(p[a]);
                    }
                }
            }
        }
    }
    if !any {
        return Err(VolumeError::EmptyMask);
    }
    Ok(BoundingBox { min, max }.expand(margin, m.dims()))
}

/// Sub-volume inside `b` (all channels). The affine is shifted so world
/// coordinates of the kept voxels are unchanged.
pub fn crop(v: &Volume, b: &BoundingBox) -> Result<Volume> {
    let grid = v.spatial_dims();
    if !b.fits_in(grid) {
        return Err(VolumeError::ShapeMismatch(format!(
            "box {b:?} exceeds grid {grid:?}"
        )));
    }
    let [cx, cy, cz] = b.dims();
    let ch = v.channels();
    let mut data = Vec::with_capacity(cx * cy * cz * ch);
    for c in 0..ch {
        for z in b.min[2]..=b.max[2] {
            for y in b.min[1]..=b.max[1] {
                let start = v.index(b.min[0], y, z, c);
                data.extend_from_slice(&v.data()[start..start + cx]);
            }
        }
    }
    let mut affine = *v.affine();
    for r in 0..3 {
        affine[r][3] += (0..3).map(|k| v.affine()[r][k] * b.min[k] as f64).sum::<f64>();
    }
    let dims: Vec<usize> = if v.dims().len() == 4 {
        vec![cx, cy, cz, ch]
    } else {
        vec![cx, cy, cz]
    };
    let mut out = Volume::new(&dims, v.voxel_size(), affine, v.dtype(), data)?;
    out.set_dtype(v.dtype());
    Ok(out)
}

/// Copy of `full` with `patch` written into box `b`; voxels outside `b`
/// are untouched.
pub fn paste(full: &Volume, patch: &Volume, b: &BoundingBox) -> Result<Volume> {
    if patch.spatial_dims() != b.dims() || patch.channels() != full.channels() {
        return Err(VolumeError::ShapeMismatch(format!(
            "patch dims {:?} do not match box dims {:?} with {} channels",
            patch.dims(),
            b.dims(),
            full.channels()
        )));
    }
    if !b.fits_in(full.spatial_dims()) {
        return Err(VolumeError::ShapeMismatch(format!(
            "box {b:?} exceeds grid {:?}",
            full.spatial_dims()
        )));
    }
    let mut out = full.clone();
    let cx = b.dims()[0];
    for c in 0..full.channels() {
        for (pz, z) in (b.min[2]..=b.max[2]).enumerate() {
            for (py, y) in (b.min[1]..=b.max[1]).enumerate() {
                let dst = out.index(b.min[0], y, z, c);
                let src = patch.index(0, py, pz, c);
                out.data_mut()[dst..dst + cx].copy_from_slice(&patch.data()[src..src + cx]);
            }
        }
    }
    Ok(out)
}
