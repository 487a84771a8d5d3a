//! Voxel grids, binary masks, NIfTI-1 I/O and bounding-box ROIs.
//!
//! Data is stored as `f32` with x varying fastest, then y, z and channel:
//! `index = x + nx * (y + ny * (z + nz * c))`. This is the on-disk order of
//! NIfTI-1, so reading and writing are plain copies.

mod bbox;
mod nifti;
mod resample;

pub use bbox::{bounding_box, crop, paste, BoundingBox};
pub use nifti::{load_nifti, save_nifti, read_nifti, write_nifti};
pub use resample::resample_nearest;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad NIfTI magic {0:?} (expected \"n+1\")")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDtype(i16),
    #[error("unsupported header: {0}")]
    UnsupportedHeader(String),
    #[error("truncated data section: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("mask is empty")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("mask voxel {index} has non-binary value {value}")]
    NotBinary { index: usize, value: f32 },
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// Storage type written to disk. In memory every volume is `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
    I16,
}

impl DType {
    pub fn nifti_code(self) -> i16 {
        match self {
            DType::U8 => 2,
            DType::I16 => 4,
            DType::F32 => 16,
        }
    }

    pub fn from_nifti_code(code: i16) -> Option<DType> {
        match code {
            2 => Some(DType::U8),
            4 => Some(DType::I16),
            16 => Some(DType::F32),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I16 => 2,
            DType::F32 => 4,
        }
    }
}

pub type Affine = [[f64; 4]; 4];

pub fn identity_affine() -> Affine {
    let mut a = [[0.0; 4]; 4];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    a
}

/// A 3D scalar map or a 4D stack of channels on a common spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Vec<usize>,
    voxel_size: [f64; 3],
    affine: Affine,
    dtype: DType,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: &[usize],
        voxel_size: [f64; 3],
        affine: Affine,
        dtype: DType,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.len() != 3 && dims.len() != 4 {
            return Err(VolumeError::Invalid(format!(
                "expected 3 or 4 dims, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::Invalid(format!("zero extent in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(VolumeError::ShapeMismatch(format!(
                "data length {} != product of dims {dims:?} = {n}",
                data.len()
            )));
        }
        if voxel_size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::Invalid(format!(
                "voxel sizes must be positive, got {voxel_size:?}"
            )));
        }
        if affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(VolumeError::Invalid(format!(
                "affine last row must be (0,0,0,1), got {:?}",
                affine[3]
            )));
        }
        Ok(Volume {
            dims: dims.to_vec(),
            voxel_size,
            affine,
            dtype,
            data,
        })
    }

    /// Float32 volume with 1 mm isotropic voxels and identity affine.
    pub fn from_data(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        Volume::new(dims, [1.0; 3], identity_affine(), DType::F32, data)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Volume::from_data(dims, vec![0.0; n]).expect("valid zero volume")
    }

    /// New volume on the same spatial grid with a different channel count.
    pub fn zeros_like_grid(&self, channels: usize) -> Self {
        let [nx, ny, nz] = self.spatial_dims();
        let dims: Vec<usize> = if channels == 1 {
            vec![nx, ny, nz]
        } else {
            vec![nx, ny, nz, channels]
        };
        Volume {
            data: vec![0.0; nx * ny * nz * channels],
            dims,
            voxel_size: self.voxel_size,
            affine: self.affine,
            dtype: DType::F32,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn channels(&self) -> usize {
        self.dims.get(3).copied().unwrap_or(1)
    }

    pub fn n_spatial(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.voxel_size.iter().product()
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn set_dtype(&mut self, dtype: DType) {
        self.dtype = dtype;
    }

    pub fn with_geometry(mut self, voxel_size: [f64; 3], affine: Affine) -> Result<Self> {
        self.voxel_size = voxel_size;
        self.affine = affine;
        Volume::new(&self.dims, voxel_size, affine, self.dtype, self.data)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * (z + self.dims[2] * c))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.data[self.index(x, y, z, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, v: f32) {
        let i = self.index(x, y, z, c);
        self.data[i] = v;
    }

    /// Contiguous slice of one channel.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.n_spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.n_spatial();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Extract one channel as a 3D volume on the same grid.
    pub fn channel_volume(&self, c: usize) -> Volume {
        let mut out = self.zeros_like_grid(1);
        out.data.copy_from_slice(self.channel(c));
        out
    }

    /// Stack 3D volumes (or append 4D channel stacks) along the channel axis.
    pub fn stack_channels(parts: &[&Volume]) -> Result<Volume> {
        let first = parts
            .first()
            .ok_or_else(|| VolumeError::Invalid("nothing to stack".into()))?;
        let grid = first.spatial_dims();
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.spatial_dims() != grid {
                return Err(VolumeError::ShapeMismatch(format!(
                    "cannot stack grid {:?} onto {:?}",
                    p.spatial_dims(),
                    grid
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels();
        }
        let dims = if channels == 1 {
            grid.to_vec()
        } else {
            vec![grid[0], grid[1], grid[2], channels]
        };
        Volume::new(&dims, first.voxel_size, first.affine, DType::F32, data)
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.spatial_dims() == other.spatial_dims()
    }
}

/// A volume whose voxels are all 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask(Volume);

impl Mask {
    pub fn try_from_volume(v: Volume) -> Result<Self> {
        if v.channels() != 1 {
            return Err(VolumeError::ShapeMismatch(format!(
                "mask must be 3D, got dims {:?}",
                v.dims()
            )));
        }
        if let Some((index, &value)) = v
            .data()
            .iter()
            .enumerate()
            .find(|(_, &x)| x != 0.0 && x != 1.0)
        {
            return Err(VolumeError::NotBinary { index, value });
        }
        let mut v = v;
        v.set_dtype(DType::U8);
        Ok(Mask(v))
    }

    /// Voxels strictly above `threshold` become 1.
    pub fn from_threshold(v: &Volume, threshold: f32) -> Self {
        let mut out = v.channel_volume(0);
        for x in out.data_mut() {
            *x = if *x > threshold { 1.0 } else { 0.0 };
        }
        out.set_dtype(DType::U8);
        Mask(out)
    }

    pub fn from_bools(dims: [usize; 3], bits: &[bool]) -> Result<Self> {
        let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let mut v = Volume::from_data(&dims, data)?;
        v.set_dtype(DType::U8);
        Ok(Mask(v))
    }

    pub fn full(like: &Volume) -> Self {
        let mut v = like.zeros_like_grid(1);
        v.data_mut().fill(1.0);
        v.set_dtype(DType::U8);
        Mask(v)
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        let mut v = Volume::zeros(&dims);
        v.set_dtype(DType::U8);
        Mask(v)
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0.spatial_dims()
    }

    pub fn len(&self) -> usize {
        self.0.n_spatial()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    #[inline]
    pub fn at(&self, i: usize) -> bool {
        self.0.data()[i] != 0.0
    }

    #[inline]
    pub fn at_xyz(&self, x: usize, y: usize, z: usize) -> bool {
        self.0.get(x, y, z, 0) != 0.0
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        self.0.set(x, y, z, 0, if on { 1.0 } else { 0.0 });
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&x| x != 0.0).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.0.data().iter().map(|&x| x != 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_geometry() {
        assert!(Volume::from_data(&[2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Volume::from_data(&[2, 2], vec![0.0; 4]).is_err());
        assert!(Volume::new(&[1, 1, 1], [1.0, 0.0, 1.0], identity_affine(), DType::F32, vec![0.0]).is_err());
        let mut a = identity_affine();
        a[3][0] = 1.0;
        assert!(Volume::new(&[1, 1, 1], [1.0; 3], a, DType::F32, vec![0.0]).is_err());
    }

    #[test]
    fn indexing_is_x_fastest() {
        let v = Volume::from_data(&[2, 3, 4], (0..24).map(|i| i as f32).collect()).unwrap();
        assert_eq!(v.get(1, 0, 0, 0), 1.0);
        assert_eq!(v.get(0, 1, 0, 0), 2.0);
        assert_eq!(v.get(0, 0, 1, 0), 6.0);
    }

    #[test]
    fn mask_requires_binary_values() {
        let v = Volume::from_data(&[2, 1, 1], vec![0.0, 0.5]).unwrap();
        assert!(matches!(
            Mask::try_from_volume(v),
            Err(VolumeError::NotBinary { index: 1, .. })
        ));
        let m = Mask::from_threshold(&Volume::from_data(&[3, 1, 1], vec![0.2, 0.5, 0.9]).unwrap(), 0.5);
        assert_eq!(m.iter().collect::<Vec<_>>(), vec![false, false, true]);
    }

    #[test]
    fn stacking_channels() {
        let a = Volume::from_data(&[2, 1, 1], vec![1.0, 2.0]).unwrap();
        let b = Volume::from_data(&[2, 1, 1, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = Volume::stack_channels(&[&a, &b]).unwrap();
        assert_eq!(s.dims(), &[2, 1, 1, 3]);
        assert_eq!(s.channel(2), &[5.0, 6.0]);
    }
}
