//! Uncompressed single-file NIfTI-1 (`.nii`), little-endian, with
//! float32 / uint8 / int16 payloads.

use std::path::Path;

use super::{Affine, DType, Result, Volume, VolumeError};
use crate::io_util::write_atomic;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

fn io_err(path: &Path, source: std::io::Error) -> VolumeError {
    VolumeError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    read_nifti(&bytes)
}

pub fn save_nifti(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_nifti(v);
    write_atomic(path, &bytes).map_err(|e| io_err(path, e))
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

/// Parse a complete `.nii` byte buffer.
pub fn read_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(VolumeError::Truncated {
            expected: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if &magic != b"n+1\0" {
        return Err(VolumeError::BadMagic(magic));
    }
    if i32_at(bytes, 0) != HEADER_SIZE as i32 {
        return Err(VolumeError::UnsupportedHeader(
            "sizeof_hdr != 348 (big-endian or NIfTI-2 files are not supported)".into(),
        ));
    }

    let ndim = i16_at(bytes, 40);
    if !(3..=4).contains(&ndim) {
        // A 4D header with a trailing singleton is still 3D for our purposes.
        if ndim != 5 || i16_at(bytes, 50) != 1 {
            return Err(VolumeError::UnsupportedHeader(format!("dim[0] = {ndim}")));
        }
    }
    let mut dims = Vec::with_capacity(4);
    for k in 1..=ndim.min(4) as usize {
        let d = i16_at(bytes, 40 + 2 * k);
        if d <= 0 {
            return Err(VolumeError::UnsupportedHeader(format!("dim[{k}] = {d}")));
        }
        dims.push(d as usize);
    }
    if dims.len() == 4 && dims[3] == 1 {
        dims.pop();
    }

    let code = i16_at(bytes, 70);
    let dtype = DType::from_nifti_code(code).ok_or(VolumeError::UnsupportedDtype(code))?;

    let pixdim: Vec<f32> = (0..8).map(|k| f32_at(bytes, 76 + 4 * k)).collect();
    let voxel_size = [
        positive_or_one(pixdim[1]),
        positive_or_one(pixdim[2]),
        positive_or_one(pixdim[3]),
    ];
    let vox_offset = f32_at(bytes, 108);
    let offset = if vox_offset >= HEADER_SIZE as f32 {
        vox_offset as usize
    } else {
        VOX_OFFSET
    };
    let slope = f32_at(bytes, 112);
    let inter = f32_at(bytes, 116);

    let n: usize = dims.iter().product();
    let expected = offset + n * dtype.bytes();
    if bytes.len() < expected {
        return Err(VolumeError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let body = &bytes[offset..expected];
    let mut data: Vec<f32> = match dtype {
        DType::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::U8 => body.iter().map(|&b| b as f32).collect(),
        DType::I16 => body
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
    };
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        let inter = if inter.is_finite() { inter } else { 0.0 };
        for x in &mut data {
            *x = *x * slope + inter;
        }
    }

    let affine = header_affine(bytes, &pixdim, voxel_size);
    Volume::new(&dims, voxel_size, affine, dtype, data)
}

fn positive_or_one(x: f32) -> f64 {
    if x > 0.0 && x.is_finite() {
        x as f64
    } else {
        1.0
    }
}

/// sform when its code is set, else qform, else a scaling-only affine.
fn header_affine(b: &[u8], pixdim: &[f32], voxel_size: [f64; 3]) -> Affine {
    let qform_code = i16_at(b, 252);
    let sform_code = i16_at(b, 254);
    let mut a = super::identity_affine();
    if sform_code > 0 {
        for (r, row) in a.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(b, 280 + 16 * r + 4 * c) as f64;
            }
        }
        return a;
    }
    if qform_code > 0 {
        let qb = f32_at(b, 256) as f64;
        let qc = f32_at(b, 260) as f64;
        let qd = f32_at(b, 264) as f64;
        let qa = (1.0 - (qb * qb + qc * qc + qd * qd)).max(0.0).sqrt();
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let r = [
            [
                qa * qa + qb * qb - qc * qc - qd * qd,
                2.0 * (qb * qc - qa * qd),
                2.0 * (qb * qd + qa * qc),
            ],
            [
                2.0 * (qb * qc + qa * qd),
                qa * qa + qc * qc - qb * qb - qd * qd,
                2.0 * (qc * qd - qa * qb),
            ],
            [
                2.0 * (qb * qd - qa * qc),
                2.0 * (qc * qd + qa * qb),
                qa * qa + qd * qd - qc * qc - qb * qb,
            ],
        ];
        let scale = [voxel_size[0], voxel_size[1], qfac * voxel_size[2]];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = r[i][j] * scale[j];
            }
            a[i][3] = f32_at(b, 268 + 4 * i) as f64;
        }
        return a;
    }
    for i in 0..3 {
        a[i][i] = voxel_size[i];
    }
    a
}

/// Serialize to a `.nii` byte buffer (sform only, unit scaling).
pub fn write_nifti(v: &Volume) -> Vec<u8> {
    let dtype = v.dtype();
    let n = v.data().len();
    let mut out = vec![0u8; VOX_OFFSET + n * dtype.bytes()];
    let put_i16 = |o: &mut [u8], off: usize, x: i16| o[off..off + 2].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |o: &mut [u8], off: usize, x: f32| o[off..off + 4].copy_from_slice(&x.to_le_bytes());

    out[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    out[38] = b'r';
    put_i16(&mut out, 40, v.dims().len() as i16);
    for (k, &d) in v.dims().iter().enumerate() {
        put_i16(&mut out, 42 + 2 * k, d as i16);
    }
    for k in v.dims().len() + 1..8 {
        put_i16(&mut out, 40 + 2 * k, 1);
    }
    put_i16(&mut out, 70, dtype.nifti_code());
    put_i16(&mut out, 72, (dtype.bytes() * 8) as i16);
    put_f32(&mut out, 76, 1.0);
    for k in 0..3 {
        put_f32(&mut out, 80 + 4 * k, v.voxel_size()[k] as f32);
    }
    for k in 4..8 {
        put_f32(&mut out, 76 + 4 * k, 1.0);
    }
    put_f32(&mut out, 108, VOX_OFFSET as f32);
    put_f32(&mut out, 112, 1.0);
    put_f32(&mut out, 116, 0.0);
    out[123] = 2 | 8; // mm, s
    put_i16(&mut out, 254, 1);
    let a = v.affine();
    for r in 0..3 {
        for c in 0..4 {
            put_f32(&mut out, 280 + 16 * r + 4 * c, a[r][c] as f32);
        }
    }
    out[344..348].copy_from_slice(b"n+1\0");

    let body = &mut out[VOX_OFFSET..];
    match dtype {
        DType::F32 => {
            for (c, x) in body.chunks_exact_mut(4).zip(v.data()) {
                c.copy_from_slice(&x.to_le_bytes());
            }
        }
        DType::U8 => {
            for (c, x) in body.iter_mut().zip(v.data()) {
                *c = x.round().clamp(0.0, 255.0) as u8;
            }
        }
        DType::I16 => {
            for (c, x) in body.chunks_exact_mut(2).zip(v.data()) {
                let q = x.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
                c.copy_from_slice(&q.to_le_bytes());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::identity_affine;

    fn minimal_header(dims: &[i16], code: i16, bitpix: i16) -> Vec<u8> {
        let mut h = vec![0u8; VOX_OFFSET];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&(dims.len() as i16).to_le_bytes());
        for (k, d) in dims.iter().enumerate() {
            h[42 + 2 * k..44 + 2 * k].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&code.to_le_bytes());
        h[72..74].copy_from_slice(&bitpix.to_le_bytes());
        for k in 0..4 {
            h[76 + 4 * k..80 + 4 * k].copy_from_slice(&1.0f32.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352.0f32.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h
    }

    #[test]
    fn minimal_float_file_of_ones() {
        let mut b = minimal_header(&[2, 2, 2], 16, 32);
        for _ in 0..8 {
            b.extend_from_slice(&1.0f32.to_le_bytes());
        }
        let v = read_nifti(&b).unwrap();
        assert_eq!(v.dims(), &[2, 2, 2]);
        assert!(v.data().iter().all(|&x| x == 1.0));
        assert_eq!(v.affine(), &identity_affine());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut b = minimal_header(&[1, 1, 1], 16, 32);
        b.extend_from_slice(&[0; 4]);
        b[344..348].copy_from_slice(b"abcd");
        assert!(matches!(read_nifti(&b), Err(VolumeError::BadMagic(m)) if &m == b"abcd"));
    }

    #[test]
    fn unsupported_dtype_and_truncation() {
        let mut b = minimal_header(&[1, 1, 1], 64, 64);
        b.extend_from_slice(&[0; 8]);
        assert!(matches!(read_nifti(&b), Err(VolumeError::UnsupportedDtype(64))));
        let mut b = minimal_header(&[2, 2, 2], 16, 32);
        b.extend_from_slice(&[0; 12]);
        assert!(matches!(
            read_nifti(&b),
            Err(VolumeError::Truncated { expected: 384, found: 364 })
        ));
    }

    #[test]
    fn scaling_applies_to_integer_payloads() {
        let mut b = minimal_header(&[2, 1, 1], 4, 16);
        b[112..116].copy_from_slice(&0.5f32.to_le_bytes());
        b[116..120].copy_from_slice(&10.0f32.to_le_bytes());
        b.extend_from_slice(&4i16.to_le_bytes());
        b.extend_from_slice(&(-2i16).to_le_bytes());
        let v = read_nifti(&b).unwrap();
        assert_eq!(v.data(), &[12.0, 9.0]);
    }

    #[test]
    fn qform_fallback_builds_rotation() {
        // 90 degree rotation about z: quaternion (cos45, 0, 0, sin45)
        let mut b = minimal_header(&[1, 1, 1], 16, 32);
        b.extend_from_slice(&[0; 4]);
        b[80..84].copy_from_slice(&2.0f32.to_le_bytes());
        b[252..254].copy_from_slice(&1i16.to_le_bytes());
        let s = std::f32::consts::FRAC_1_SQRT_2;
        b[264..268].copy_from_slice(&s.to_le_bytes());
        b[268..272].copy_from_slice(&5.0f32.to_le_bytes());
        let v = read_nifti(&b).unwrap();
        let a = v.affine();
        assert!((a[0][1] + 1.0).abs() < 1e-6);
        assert!((a[1][0] - 2.0).abs() < 1e-6);
        assert!((a[0][3] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn integer_dtypes_round_trip() {
        let mut v = Volume::from_data(&[3, 1, 1], vec![0.0, 1.0, 250.0]).unwrap();
        v.set_dtype(DType::U8);
        let back = read_nifti(&write_nifti(&v)).unwrap();
        assert_eq!(back.data(), v.data());
        assert_eq!(back.dtype(), DType::U8);
        v.set_dtype(DType::I16);
        v.data_mut()[0] = -300.0;
        let back = read_nifti(&write_nifti(&v)).unwrap();
        assert_eq!(back.data(), v.data());
    }
}
