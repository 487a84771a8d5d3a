//! Direct stride-1 convolution forward pass.
//!
//! The input is copied once into a zero-padded buffer. For an output row
//! starting at padded offset `base`, tap `t` then reads the contiguous run
//! `base + off[t] ..`, so each block of `LANES` outputs times up to `CO_BLOCK`
//! output channels is a register-resident FMA loop with no im2col buffer.
//!
//! Every path accumulates each output over (input channel, tap) in the same
//! order with fused multiply-adds, so they agree bit for bit.

use super::Real;

pub(crate) const LANES: usize = 8;
/// Widest kernel; sizes the read slack past the last row.
const MAX_LANES: usize = 16;
/// Output channels per pass.
pub(crate) const CO_BLOCK: usize = 8;

pub(crate) struct DirectConv<'a, T> {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    /// `[c_out, c_in, k, k, k]`.
    pub weight: &'a [T],
    /// Input extents `[z, y, x]`.
    pub spatial: [usize; 3],
}

/// Zero-padded input and the geometry the kernels need.
pub struct Plan<T> {
    pub xp: Vec<T>,
    /// Elements per padded channel.
    pub chan: usize,
    pub pdims: [usize; 3],
    pub out: [usize; 3],
    /// Padded-buffer offset of each tap relative to the window corner.
    pub offs: Vec<usize>,
    pub c_in: usize,
    pub c_out: usize,
}

impl<T: Real> DirectConv<'_, T> {
    pub fn output_spatial(&self) -> [usize; 3] {
        self.spatial.map(|n| n + 2 * self.pad + 1 - self.k)
    }

    fn plan(&self, x: &[T]) -> Plan<T> {
        let [nz, ny, nx] = self.spatial;
        let p = self.pad;
        let pdims = [nz + 2 * p, ny + 2 * p, nx + 2 * p];
        let chan = pdims.iter().product::<usize>();
        // trailing slack so a full-width read past the last row stays in bounds
        let mut xp = vec![T::zero(); self.c_in * chan + MAX_LANES];
        for c in 0..self.c_in {
            for z in 0..nz {
                for y in 0..ny {
                    let src = ((c * nz + z) * ny + y) * nx;
                    let dst = c * chan + ((z + p) * pdims[1] + y + p) * pdims[2] + p;
                    xp[dst..dst + nx].copy_from_slice(&x[src..src + nx]);
                }
            }
        }
        let k = self.k;
        let mut offs = Vec::with_capacity(k * k * k);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    offs.push((kz * pdims[1] + ky) * pdims[2] + kx);
                }
            }
        }
        Plan {
            xp,
            chan,
            pdims,
            out: self.output_spatial(),
            offs,
            c_in: self.c_in,
            c_out: self.c_out,
        }
    }

    /// Weights regrouped as `[block][ci][tap][j]`, zero past `c_out`.
    fn pack(&self) -> Vec<T> {
        let k3 = self.k * self.k * self.k;
        let blocks = self.c_out.div_ceil(CO_BLOCK);
        let mut w = vec![T::zero(); blocks * self.c_in * k3 * CO_BLOCK];
        for co in 0..self.c_out {
            let (b, j) = (co / CO_BLOCK, co % CO_BLOCK);
            for ci in 0..self.c_in {
                for t in 0..k3 {
                    w[((b * self.c_in + ci) * k3 + t) * CO_BLOCK + j] = self.weight[(co * self.c_in + ci) * k3 + t];
                }
            }
        }
        w
    }

    /// Convolve one item: `x` is `[c_in, z, y, x]`, `y` is `[c_out, ...]`
    /// of the output extents and is overwritten.
    pub fn run(&self, x: &[T], y: &mut [T]) {
        let plan = self.plan(x);
        let w = self.pack();
        if T::direct_rows(&plan, &w, y) {
            return;
        }
        // mul_add is a libm call unless FMA is enabled for the code
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { rows_fma(&plan, &w, y) };
            return;
        }
        rows(&plan, &w, y);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn rows_fma<T: Real>(plan: &Plan<T>, w: &[T], y: &mut [T]) {
    rows(plan, w, y)
}

/// Portable kernel.
#[inline(always)]
pub(crate) fn rows<T: Real>(plan: &Plan<T>, w: &[T], y: &mut [T]) {
    let [oz, oy, ox] = plan.out;
    let ovox = oz * oy * ox;
    let k3 = plan.offs.len();
    for z in 0..oz {
        for yy in 0..oy {
            let base = (z * plan.pdims[1] + yy) * plan.pdims[2];
            let orow = (z * oy + yy) * ox;
            for b in 0..plan.c_out.div_ceil(CO_BLOCK) {
                let wb = &w[b * plan.c_in * k3 * CO_BLOCK..];
                let nco = CO_BLOCK.min(plan.c_out - b * CO_BLOCK);
                for x0 in (0..ox).step_by(LANES) {
                    let mut acc = [[T::zero(); LANES]; CO_BLOCK];
                    let mut wi = 0;
                    for ci in 0..plan.c_in {
                        let src = &plan.xp[ci * plan.chan + base + x0..];
                        for &o in &plan.offs {
                            for j in 0..CO_BLOCK {
                                for l in 0..LANES {
                                    acc[j][l] = wb[wi + j].mul_add(src[o + l], acc[j][l]);
                                }
                            }
                            wi += CO_BLOCK;
                        }
                    }
                    let len = LANES.min(ox - x0);
                    for (j, a) in acc.iter().take(nco).enumerate() {
                        let o = (b * CO_BLOCK + j) * ovox + orow + x0;
                        y[o..o + len].copy_from_slice(&a[..len]);
                    }
                }
            }
        }
    }
}

/// SIMD kernels for f32; returns false when the CPU has neither.
#[cfg(target_arch = "x86_64")]
pub(crate) fn rows_f32(plan: &Plan<f32>, w: &[f32], y: &mut [f32]) -> bool {
    let wide = std::is_x86_feature_detected!("avx512f");
    if !wide && !(std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")) {
        return false;
    }
    let [oz, oy, ox] = plan.out;
    let k3 = plan.offs.len();
    let blocks = plan.c_out.div_ceil(CO_BLOCK);
    assert_eq!(w.len(), blocks * plan.c_in * k3 * CO_BLOCK);
    assert_eq!(y.len(), plan.c_out * oz * oy * ox);
    // furthest read: last channel, last row, last block, last tap
    let last_base = ((oz - 1) * plan.pdims[1] + oy - 1) * plan.pdims[2];
    let last_x0 = (ox - 1) / MAX_LANES * MAX_LANES;
    let max_off = plan.offs.iter().copied().max().unwrap_or(0);
    assert!((plan.c_in - 1) * plan.chan + last_base + last_x0 + max_off + MAX_LANES <= plan.xp.len());
    // SAFETY: features detected above; every read is bounded by the assert
    // above and every write goes through checked slice copies.
    unsafe {
        if wide {
            simd::rows_avx512(plan, w, y)
        } else {
            simd::rows_avx2(plan, w, y)
        }
    };
    true
}

#[cfg(not(target_arch = "x86_64"))]
pub(crate) fn rows_f32(_plan: &Plan<f32>, _w: &[f32], _y: &mut [f32]) -> bool {
    false
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    use super::{Plan, CO_BLOCK};

    /// Loops shared by both kernels; `$lanes` outputs per block, `$acc`
    /// evaluates one block into a `[f32; $lanes * CO_BLOCK]` buffer.
    macro_rules! row_loops {
        ($plan:ident, $w:ident, $y:ident, $lanes:expr, |$src:ident, $wb:ident, $tmp:ident| $acc:block) => {{
            let [oz, oy, ox] = $plan.out;
            let ovox = oz * oy * ox;
            let k3 = $plan.offs.len();
            let mut $tmp = [0f32; $lanes * CO_BLOCK];
            for z in 0..oz {
                for yy in 0..oy {
                    let base = (z * $plan.pdims[1] + yy) * $plan.pdims[2];
                    let orow = (z * oy + yy) * ox;
                    for b in 0..$plan.c_out.div_ceil(CO_BLOCK) {
                        let $wb = $w.as_ptr().add(b * $plan.c_in * k3 * CO_BLOCK);
                        let nco = CO_BLOCK.min($plan.c_out - b * CO_BLOCK);
                        for x0 in (0..ox).step_by($lanes) {
                            let $src = $plan.xp.as_ptr().add(base + x0);
                            $acc
                            let len = ($lanes).min(ox - x0);
                            for j in 0..nco {
                                let o = (b * CO_BLOCK + j) * ovox + orow + x0;
                                $y[o..o + len].copy_from_slice(&$tmp[j * $lanes..j * $lanes + len]);
                            }
                        }
                    }
                }
            }
        }};
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn rows_avx2(plan: &Plan<f32>, w: &[f32], y: &mut [f32]) {
        row_loops!(plan, w, y, 8, |corner, wb, tmp| {
            let mut a = [_mm256_setzero_ps(); CO_BLOCK];
            let mut wp = wb;
            for ci in 0..plan.c_in {
                let src = corner.add(ci * plan.chan);
                for &o in &plan.offs {
                    let v = _mm256_loadu_ps(src.add(o));
                    a[0] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*wp), v, a[0]);
                    a[1] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*wp.add(1)), v, a[1]);
                    a[2] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*wp.add(2)), v, a[2]);
                    a[3] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*wp.add(3)), v, a[3]);
                    a[4] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*wp.add(4)), v, a[4]);
                    a[5] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*wp.add(5)), v, a[5]);
                    a[6] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*wp.add(6)), v, a[6]);
                    a[7] = _mm256_fmadd_ps(_mm256_broadcast_ss(&*wp.add(7)), v, a[7]);
                    wp = wp.add(CO_BLOCK);
                }
            }
            for (j, v) in a.into_iter().enumerate() {
                _mm256_storeu_ps(tmp.as_mut_ptr().add(j * 8), v);
            }
        })
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn rows_avx512(plan: &Plan<f32>, w: &[f32], y: &mut [f32]) {
        row_loops!(plan, w, y, 16, |corner, wb, tmp| {
            let mut a = [_mm512_setzero_ps(); CO_BLOCK];
            let mut wp = wb;
            for ci in 0..plan.c_in {
                let src = corner.add(ci * plan.chan);
                for &o in &plan.offs {
                    let v = _mm512_loadu_ps(src.add(o));
                    a[0] = _mm512_fmadd_ps(_mm512_set1_ps(*wp), v, a[0]);
                    a[1] = _mm512_fmadd_ps(_mm512_set1_ps(*wp.add(1)), v, a[1]);
                    a[2] = _mm512_fmadd_ps(_mm512_set1_ps(*wp.add(2)), v, a[2]);
                    a[3] = _mm512_fmadd_ps(_mm512_set1_ps(*wp.add(3)), v, a[3]);
                    a[4] = _mm512_fmadd_ps(_mm512_set1_ps(*wp.add(4)), v, a[4]);
                    a[5] = _mm512_fmadd_ps(_mm512_set1_ps(*wp.add(5)), v, a[5]);
                    a[6] = _mm512_fmadd_ps(_mm512_set1_ps(*wp.add(6)), v, a[6]);
                    a[7] = _mm512_fmadd_ps(_mm512_set1_ps(*wp.add(7)), v, a[7]);
                    wp = wp.add(CO_BLOCK);
                }
            }
            for (j, v) in a.into_iter().enumerate() {
                _mm512_storeu_ps(tmp.as_mut_ptr().add(j * 16), v);
            }
        })
    }
}
