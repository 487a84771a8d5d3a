//! 3D convolution and transposed convolution via im2col + GEMM.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::direct::DirectConv;
use super::{Layer, Mode, NnError, Param, Real, Result, Tensor};

/// Target number of elements in one im2col buffer.
const COL_BUDGET: usize = 1 << 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// `(k - 1) / 2` on each side; preserves extents for stride 1, odd k.
    Same,
}

/// Sliding-window geometry between an "image" side and a "column" side.
/// Column position `o` on an axis reads image index `o * stride + k - pad`.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    img: [usize; 3],
    cols: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
}

/// Contiguous x-run of column positions sharing (z, y).
#[derive(Debug, Clone, Copy)]
struct Run {
    oz: usize,
    oy: usize,
    ox0: usize,
    len: usize,
    offset: usize,
}

impl Geometry {
    fn k3(&self) -> usize {
        self.k * self.k * self.k
    }

    fn rows(&self) -> usize {
        self.channels * self.k3()
    }

    fn n_cols(&self) -> usize {
        self.cols.iter().product()
    }

    fn img_vox(&self) -> usize {
        self.img.iter().product()
    }

    fn runs(&self, p0: usize, len: usize) -> Vec<Run> {
        let [_, cy, cx] = self.cols;
        let mut out = Vec::new();
        let mut p = p0;
        let end = p0 + len;
        while p < end {
            let ox0 = p % cx;
            let oy = (p / cx) % cy;
            let oz = p / (cx * cy);
            let l = (cx - ox0).min(end - p);
            out.push(Run { oz, oy, ox0, len: l, offset: p - p0 });
            p += l;
        }
        out
    }

    /// Image index along an axis for column index `o` and tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }

    /// Range of x column indices inside `[ox0, ox0 + len)` whose source is
    /// in bounds for tap `kx`.
    #[inline]
    fn x_valid(&self, ox0: usize, len: usize, kx: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = kx as isize - self.pad as isize;
        let w = self.img[2] as isize;
        // o*s + shift >= 0  and  o*s + shift <= w - 1
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = if w - 1 - shift < 0 { -1 } else { (w - 1 - shift) / s };
        let a = (lo.max(ox0 as isize)) as usize;
        let b = ((hi + 1).max(0) as usize).min(ox0 + len);
        if a >= b {
            (ox0, ox0)
        } else {
            (a, b)
        }
    }

    fn im2col<T: Real>(&self, img: &[T], len: usize, runs: &[Run], col: &mut [T]) {
        let [iz, iy, ix] = self.img;
        let k = self.k;
        for c in 0..self.channels {
            let plane = &img[c * self.img_vox()..(c + 1) * self.img_vox()];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let r = ((c * k + kz) * k + ky) * k + kx;
                        let row = &mut col[r * len..(r + 1) * len];
                        for run in runs {
                            let dst = &mut row[run.offset..run.offset + run.len];
                            let (sz, sy) = match (self.src(run.oz, kz, iz), self.src(run.oy, ky, iy)) {
                                (Some(a), Some(b)) => (a, b),
                                _ => {
                                    dst.fill(T::zero());
                                    continue;
                                }
                            };
                            let (a, b) = self.x_valid(run.ox0, run.len, kx);
                            let base = (sz * iy + sy) * ix;
                            dst[..a - run.ox0].fill(T::zero());
                            dst[b - run.ox0..].fill(T::zero());
                            if a < b {
                                let first = a * self.stride + kx - self.pad;
                                let out = &mut dst[a - run.ox0..b - run.ox0];
                                if self.stride == 1 {
                                    out.copy_from_slice(&plane[base + first..base + first + (b - a)]);
                                } else {
                                    for (j, v) in out.iter_mut().enumerate() {
                                        *v = plane[base + first + j * self.stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], len: usize, runs: &[Run], img: &mut [T]) {
        let [iz, iy, ix] = self.img;
        let k = self.k;
        let vox = self.img_vox();
        for c in 0..self.channels {
            let plane = &mut img[c * vox..(c + 1) * vox];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let r = ((c * k + kz) * k + ky) * k + kx;
                        let row = &col[r * len..(r + 1) * len];
                        for run in runs {
                            let (sz, sy) = match (self.src(run.oz, kz, iz), self.src(run.oy, ky, iy)) {
                                (Some(a), Some(b)) => (a, b),
                                _ => continue,
                            };
                            let (a, b) = self.x_valid(run.ox0, run.len, kx);
                            if a >= b {
                                continue;
                            }
                            let base = (sz * iy + sy) * ix + a * self.stride + kx - self.pad;
                            let src = &row[run.offset + a - run.ox0..run.offset + b - run.ox0];
                            if self.stride == 1 {
                                for (d, s) in plane[base..base + (b - a)].iter_mut().zip(src) {
                                    *d += *s;
                                }
                            } else {
                                for (j, s) in src.iter().enumerate() {
                                    plane[base + j * self.stride] += *s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn chunk_len(&self) -> usize {
        (COL_BUDGET / self.rows().max(1)).max(32).min(self.n_cols().max(1))
    }
}

/// 3D convolution (cross-correlation) or, with `transpose`, its adjoint
/// used as a learnable upsampler.
///
/// Weights are `[c_out, c_in, k, k, k]` for convolution and
/// `[c_in, c_out, k, k, k]` for the transposed form.
#[derive(Debug, Clone)]
pub struct Conv3d<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    transpose: bool,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv3d<T> {
    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        transpose: bool,
        rng: &mut R,
    ) -> Self {
        assert!(k >= 1 && stride >= 1 && c_in >= 1 && c_out >= 1);
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => (k - 1) / 2,
        };
        let fan_in = if transpose { c_in } else { c_in * k * k * k };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let shape = if transpose {
            vec![c_in, c_out, k, k, k]
        } else {
            vec![c_out, c_in, k, k, k]
        };
        let n = c_in * c_out * k * k * k;
        let w = (0..n).map(|_| T::of(normal.sample(rng))).collect();
        Conv3d {
            weight: Param::new(format!("{name}.weight"), shape, w, true),
            bias: Param::new(format!("{name}.bias"), vec![c_out], vec![T::zero(); c_out], true),
            c_in,
            c_out,
            k,
            stride,
            pad,
            transpose,
            input: None,
        }
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn output_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = if self.transpose {
                let full = (input[a] - 1) * self.stride + self.k;
                if full <= 2 * self.pad {
                    return Err(NnError::ShapeMismatch(format!("transposed conv output empty on axis {a}")));
                }
                full - 2 * self.pad
            } else {
                let padded = input[a] + 2 * self.pad;
                if padded < self.k {
                    return Err(NnError::ShapeMismatch(format!(
                        "input extent {} smaller than kernel {}",
                        input[a], self.k
                    )));
                }
                (padded - self.k) / self.stride + 1
            };
        }
        Ok(out)
    }

    fn geometry(&self, x_spatial: [usize; 3], y_spatial: [usize; 3]) -> Geometry {
        if self.transpose {
            Geometry {
                channels: self.c_out,
                img: y_spatial,
                cols: x_spatial,
                k: self.k,
                stride: self.stride,
                pad: self.pad,
            }
        } else {
            Geometry {
                channels: self.c_in,
                img: x_spatial,
                cols: y_spatial,
                k: self.k,
                stride: self.stride,
                pad: self.pad,
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.c_in {
            return Err(NnError::ShapeMismatch(format!(
                "{} expects {} input channels, got {}",
                self.weight.name,
                self.c_in,
                x.c()
            )));
        }
        Ok(())
    }
}

impl<T: Real> Layer<T> for Conv3d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let ys = self.output_spatial(x.spatial())?;
        let g = self.geometry(x.spatial(), ys);
        let mut y = Tensor::zeros([x.n(), self.c_out, ys[0], ys[1], ys[2]]);
        let kk = g.rows();
        let p_total = g.n_cols();
        let chunk = g.chunk_len();
        let w = &self.weight.value;
        let direct = (!self.transpose && self.stride == 1).then(|| DirectConv {
            c_in: self.c_in,
            c_out: self.c_out,
            k: self.k,
            pad: self.pad,
            weight: w,
            spatial: x.spatial(),
        });
        let mut col = if direct.is_some() { Vec::new() } else { vec![T::zero(); kk * chunk] };
        for i in 0..x.n() {
            let xi = x.item(i);
            let yi = y.item_mut(i);
            if let Some(d) = &direct {
                d.run(xi, yi);
                continue;
            }
            let mut p0 = 0;
            while p0 < p_total {
                let len = chunk.min(p_total - p0);
                let runs = g.runs(p0, len);
                let col = &mut col[..kk * len];
                if self.transpose {
                    // col = Wᵀ x_chunk, scattered into the output image
                    T::gemm(kk, self.c_in, len, T::one(), w, 1, kk, &xi[p0..], p_total, 1, T::zero(), col, len, 1);
                    g.col2im(col, len, &runs, yi);
                } else {
                    g.im2col(xi, len, &runs, col);
                    T::gemm(self.c_out, kk, len, T::one(), w, kk, 1, col, len, 1, T::zero(), &mut yi[p0..], p_total, 1);
                }
                p0 += len;
            }
        }
        for i in 0..y.n() {
            for c in 0..self.c_out {
                let b = self.bias.value[c];
                y.channel_mut(i, c).iter_mut().for_each(|e| *e += b);
            }
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or(NnError::NoForwardCache)?;
        let ys = self.output_spatial(x.spatial())?;
        if gy.shape() != [x.n(), self.c_out, ys[0], ys[1], ys[2]] {
            return Err(NnError::ShapeMismatch(format!(
                "{} output gradient {:?}",
                self.weight.name,
                gy.shape()
            )));
        }
        let g = self.geometry(x.spatial(), ys);
        let kk = g.rows();
        let p_total = g.n_cols();
        let chunk = g.chunk_len();
        let mut col = vec![T::zero(); kk * chunk];
        let mut gx = Tensor::zeros(x.shape());
        let w = &self.weight.value;
        let gw = &mut self.weight.grad;

        for i in 0..x.n() {
            for c in 0..self.c_out {
                let s: T = gy.channel(i, c).iter().copied().sum();
                self.bias.grad[c] += s;
            }
            let xi = x.item(i);
            let gyi = gy.item(i);
            let gxi = gx.item_mut(i);
            let mut p0 = 0;
            while p0 < p_total {
                let len = chunk.min(p_total - p0);
                let runs = g.runs(p0, len);
                let col = &mut col[..kk * len];
                if self.transpose {
                    g.im2col(gyi, len, &runs, col);
                    // gx_chunk = W · col
                    T::gemm(self.c_in, kk, len, T::one(), w, kk, 1, col, len, 1, T::zero(), &mut gxi[p0..], p_total, 1);
                    // gW += x_chunk · colᵀ
                    T::gemm(self.c_in, len, kk, T::one(), &xi[p0..], p_total, 1, col, 1, len, T::one(), gw, kk, 1);
                } else {
                    g.im2col(xi, len, &runs, col);
                    // gW += gy_chunk · colᵀ
                    T::gemm(self.c_out, len, kk, T::one(), &gyi[p0..], p_total, 1, col, 1, len, T::one(), gw, kk, 1);
                    // col = Wᵀ · gy_chunk, scattered back onto the input
                    T::gemm(kk, self.c_out, len, T::one(), w, 1, kk, &gyi[p0..], p_total, 1, T::zero(), col, len, 1);
                    g.col2im(col, len, &runs, gxi);
                }
                p0 += len;
            }
        }
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv(c_in: usize, c_out: usize, k: usize, s: usize, p: Padding, t: bool) -> Conv3d<f64> {
        Conv3d::new("c", c_in, c_out, k, s, p, t, &mut ChaCha8Rng::seed_from_u64(1))
    }

    /// Direct nested-loop convolution, independent of im2col.
    fn naive(x: &Tensor<f64>, c: &Conv3d<f64>) -> Tensor<f64> {
        let ys = c.output_spatial(x.spatial()).unwrap();
        let mut y = Tensor::zeros([x.n(), c.c_out, ys[0], ys[1], ys[2]]);
        let [dz, dy, dx] = x.spatial();
        let k = c.k;
        for n in 0..x.n() {
            for co in 0..c.c_out {
                for oz in 0..ys[0] {
                    for oy in 0..ys[1] {
                        for ox in 0..ys[2] {
                            let mut acc = c.bias.value[co];
                            for ci in 0..c.c_in {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (oz * c.stride + kz) as isize - c.pad as isize;
                                            let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                            let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= dz as isize || iy >= dy as isize || ix >= dx as isize {
                                                continue;
                                            }
                                            let xv = x.channel(n, ci)[(iz as usize * dy + iy as usize) * dx + ix as usize];
                                            let wv = c.weight.value[(((co * c.c_in + ci) * k + kz) * k + ky) * k + kx];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            y.channel_mut(n, co)[(oz * ys[1] + oy) * ys[2] + ox] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn pointwise_scaling() {
        let mut c = conv(1, 1, 1, 1, Padding::Same, false);
        c.weight.value[0] = 2.0;
        let x = Tensor::filled([1, 1, 1, 1, 1], 3.0);
        assert_eq!(c.forward(&x, Mode::Train).unwrap().data(), &[6.0]);
    }

    #[test]
    fn box_filter_center_sums_27() {
        let mut c = conv(1, 1, 3, 1, Padding::Same, false);
        c.weight.value.fill(1.0);
        let x = Tensor::filled([1, 1, 8, 8, 8], 1.0);
        let y = c.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.spatial(), [8, 8, 8]);
        assert_eq!(y.data()[(4 * 8 + 4) * 8 + 4], 27.0);
        assert_eq!(y.data()[0], 8.0);
        assert_eq!(y.data()[4], 12.0);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s, p, dims) in &[
            (3, 1, Padding::Same, [5, 6, 7]),
            (3, 2, Padding::Same, [6, 5, 9]),
            (2, 2, Padding::Valid, [4, 6, 8]),
            (1, 1, Padding::Valid, [3, 3, 3]),
        ] {
            let mut c = conv(3, 4, k, s, p, false);
            c.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = Tensor::randn([2, 3, dims[0], dims[1], dims[2]], &mut rng);
            let y = c.forward(&x, Mode::Train).unwrap();
            let r = naive(&x, &c);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights and zero bias
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = conv(2, 3, 2, 2, Padding::Valid, false);
        let mut t = conv(3, 2, 2, 2, Padding::Valid, true);
        t.weight.value = c.weight.value.clone();
        let x = Tensor::randn([1, 2, 4, 6, 8], &mut rng);
        let y = Tensor::randn([1, 3, 2, 3, 4], &mut rng);
        let cx = c.forward(&x, Mode::Train).unwrap();
        let ty = t.forward(&y, Mode::Train).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn channel_mismatch_errors() {
        let mut c = conv(2, 1, 3, 1, Padding::Same, false);
        let x = Tensor::zeros([1, 3, 4, 4, 4]);
        assert!(matches!(c.forward(&x, Mode::Train), Err(NnError::ShapeMismatch(_))));
    }
}
