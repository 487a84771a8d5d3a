//! Normalization, activation, resampling and composition layers.

use super::{Conv3d, Layer, Mode, NnError, Param, Real, Result, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const PRELU_INIT: f64 = 0.25;

fn require_cache<'a, U>(c: &'a Option<U>) -> Result<&'a U> {
    c.as_ref().ok_or(NnError::NoForwardCache)
}

fn check_shape<T: Real>(g: &Tensor<T>, shape: [usize; 5], what: &str) -> Result<()> {
    if g.shape() != shape {
        return Err(NnError::ShapeMismatch(format!(
            "{what}: gradient {:?} for output {shape:?}",
            g.shape()
        )));
    }
    Ok(())
}

/// Per-channel batch normalization over batch and spatial axes.
#[derive(Debug, Clone)]
pub struct BatchNorm3d<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Real> BatchNorm3d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm3d {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![T::one(); channels], true),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![T::zero(); channels], true),
            running_mean: Param::new(
                format!("{name}.running_mean"),
                vec![channels],
                vec![T::zero(); channels],
                false,
            ),
            running_var: Param::new(
                format!("{name}.running_var"),
                vec![channels],
                vec![T::one(); channels],
                false,
            ),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl<T: Real> Layer<T> for BatchNorm3d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let ch = self.channels();
        if x.c() != ch {
            return Err(NnError::ShapeMismatch(format!(
                "{} expects {ch} channels, got {}",
                self.gamma.name,
                x.c()
            )));
        }
        let eps = T::of(BN_EPS);
        let m = T::from_usize(x.n() * x.vox()).unwrap();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::zero(); ch];
        for c in 0..ch {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut s = T::zero();
                    for i in 0..x.n() {
                        s += x.channel(i, c).iter().copied().sum();
                    }
                    let mean = s / m;
                    let mut q = T::zero();
                    for i in 0..x.n() {
                        q += x.channel(i, c).iter().map(|&v| (v - mean) * (v - mean)).sum();
                    }
                    let var = q / m;
                    let mom = T::of(BN_MOMENTUM);
                    let rm = &mut self.running_mean.value[c];
                    *rm = mom * *rm + (T::one() - mom) * mean;
                    let rv = &mut self.running_var.value[c];
                    *rv = mom * *rv + (T::one() - mom) * var;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean.value[c], self.running_var.value[c]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[c] = is;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for i in 0..x.n() {
                let xs = x.channel(i, c);
                let xh = xhat.channel_mut(i, c);
                for (h, &v) in xh.iter_mut().zip(xs) {
                    *h = (v - mean) * is;
                }
                let xh = xhat.channel(i, c);
                for (o, &h) in y.channel_mut(i, c).iter_mut().zip(xh) {
                    *o = g * h + b;
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            train: mode == Mode::Train,
        });
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = require_cache(&self.cache)?;
        check_shape(gy, cache.xhat.shape(), &self.gamma.name)?;
        let xhat = &cache.xhat;
        let m = T::from_usize(gy.n() * gy.vox()).unwrap();
        let mut gx = Tensor::zeros(gy.shape());
        for c in 0..self.channels() {
            let mut sg = T::zero();
            let mut sgx = T::zero();
            for i in 0..gy.n() {
                for (&g, &h) in gy.channel(i, c).iter().zip(xhat.channel(i, c)) {
                    sg += g;
                    sgx += g * h;
                }
            }
            self.beta.grad[c] += sg;
            self.gamma.grad[c] += sgx;
            let k = self.gamma.value[c] * cache.inv_std[c];
            for i in 0..gy.n() {
                let gs = gy.channel(i, c);
                let hs = xhat.channel(i, c);
                let out = gx.channel_mut(i, c);
                if cache.train {
                    let mg = sg / m;
                    let mgx = sgx / m;
                    for ((o, &g), &h) in out.iter_mut().zip(gs).zip(hs) {
                        *o = k * (g - mg - h * mgx);
                    }
                } else {
                    for (o, &g) in out.iter_mut().zip(gs) {
                        *o = k * g;
                    }
                }
            }
        }
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

/// Parametric ReLU with one learnable slope per channel.
#[derive(Debug, Clone)]
pub struct PRelu<T: Real> {
    pub slope: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> PRelu<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        PRelu {
            slope: Param::new(
                format!("{name}.slope"),
                vec![channels],
                vec![T::of(PRELU_INIT); channels],
                true,
            ),
            input: None,
        }
    }
}

impl<T: Real> Layer<T> for PRelu<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        if x.c() != self.slope.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} expects {} channels, got {}",
                self.slope.name,
                self.slope.len(),
                x.c()
            )));
        }
        let mut y = x.clone();
        for i in 0..x.n() {
            for c in 0..x.c() {
                let a = self.slope.value[c];
                for v in y.channel_mut(i, c) {
                    if *v < T::zero() {
                        *v *= a;
                    }
                }
            }
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = require_cache(&self.input)?;
        check_shape(gy, x.shape(), &self.slope.name)?;
        let mut gx = gy.clone();
        for i in 0..x.n() {
            for c in 0..x.c() {
                let a = self.slope.value[c];
                let mut ga = T::zero();
                for (g, &v) in gx.channel_mut(i, c).iter_mut().zip(x.channel(i, c)) {
                    // x == 0 takes the positive branch
                    if v < T::zero() {
                        ga += *g * v;
                        *g *= a;
                    }
                }
                self.slope.grad[c] += ga;
            }
        }
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.slope]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.slope]
    }
}

/// Blockwise max pooling with kernel = stride = `k`. Extents not divisible
/// by `k` are padded by replicating the last slice.
#[derive(Debug, Clone)]
pub struct MaxPool3d {
    k: usize,
    cache: Option<([usize; 5], Vec<usize>)>,
}

impl MaxPool3d {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1);
        MaxPool3d { k, cache: None }
    }

    pub fn output_spatial(&self, s: [usize; 3]) -> [usize; 3] {
        s.map(|d| d.div_ceil(self.k))
    }
}

impl<T: Real> Layer<T> for MaxPool3d {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let [dz, dy, dx] = x.spatial();
        let [oz, oy, ox] = <MaxPool3d>::output_spatial(self, x.spatial());
        let k = self.k;
        let mut y = Tensor::zeros([x.n(), x.c(), oz, oy, ox]);
        let mut arg = Vec::with_capacity(y.data().len());
        for i in 0..x.n() {
            for c in 0..x.c() {
                let src = x.channel(i, c);
                let dst = y.channel_mut(i, c);
                let base = (i * x.c() + c) * x.vox();
                for z in 0..oz {
                    for yy in 0..oy {
                        for xx in 0..ox {
                            let mut best = T::neg_infinity();
                            let mut at = 0;
                            let mut first = true;
                            for a in 0..k {
                                let sz = (z * k + a).min(dz - 1);
                                for b in 0..k {
                                    let sy = (yy * k + b).min(dy - 1);
                                    for e in 0..k {
                                        let sx = (xx * k + e).min(dx - 1);
                                        let j = (sz * dy + sy) * dx + sx;
                                        if first || src[j] > best {
                                            best = src[j];
                                            at = j;
                                            first = false;
                                        }
                                    }
                                }
                            }
                            dst[(z * oy + yy) * ox + xx] = best;
                            arg.push(base + at);
                        }
                    }
                }
            }
        }
        self.cache = Some((x.shape(), arg));
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, arg) = require_cache(&self.cache)?;
        if gy.data().len() != arg.len() {
            return Err(NnError::ShapeMismatch("max-pool gradient".into()));
        }
        let mut gx = Tensor::zeros(*shape);
        let d = gx.data_mut();
        for (&j, &g) in arg.iter().zip(gy.data()) {
            d[j] += g;
        }
        Ok(gx)
    }
}

/// Nearest-neighbour upsampling by an integer factor.
#[derive(Debug, Clone)]
pub struct Upsample3d {
    k: usize,
    input_shape: Option<[usize; 5]>,
}

impl Upsample3d {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1);
        Upsample3d { k, input_shape: None }
    }
}

impl<T: Real> Layer<T> for Upsample3d {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let k = self.k;
        let [dz, dy, dx] = x.spatial();
        let (oy, ox) = (dy * k, dx * k);
        let mut y = Tensor::zeros([x.n(), x.c(), dz * k, oy, ox]);
        for i in 0..x.n() {
            for c in 0..x.c() {
                let src = x.channel(i, c);
                let dst = y.channel_mut(i, c);
                for z in 0..dz * k {
                    for yy in 0..oy {
                        let srow = &src[((z / k) * dy + yy / k) * dx..][..dx];
                        let drow = &mut dst[(z * oy + yy) * ox..][..ox];
                        for (xx, d) in drow.iter_mut().enumerate() {
                            *d = srow[xx / k];
                        }
                    }
                }
            }
        }
        self.input_shape = Some(x.shape());
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = *require_cache(&self.input_shape)?;
        let k = self.k;
        let [_, _, dz, dy, dx] = shape;
        check_shape(gy, [shape[0], shape[1], dz * k, dy * k, dx * k], "upsample")?;
        let (oy, ox) = (dy * k, dx * k);
        let mut gx = Tensor::zeros(shape);
        for i in 0..shape[0] {
            for c in 0..shape[1] {
                let src = gy.channel(i, c);
                let dst = gx.channel_mut(i, c);
                for z in 0..dz * k {
                    for yy in 0..oy {
                        let srow = &src[(z * oy + yy) * ox..][..ox];
                        let drow = &mut dst[((z / k) * dy + yy / k) * dx..][..dx];
                        for (xx, &g) in srow.iter().enumerate() {
                            drow[xx / k] += g;
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}

/// Concatenate along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.n() != b.n() || a.spatial() != b.spatial() {
        return Err(NnError::ShapeMismatch(format!(
            "concat {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let [n, ca, z, y, x] = a.shape();
    let mut out = Tensor::zeros([n, ca + b.c(), z, y, x]);
    for i in 0..n {
        let dst = out.item_mut(i);
        let (da, db) = dst.split_at_mut(a.item(i).len());
        da.copy_from_slice(a.item(i));
        db.copy_from_slice(b.item(i));
    }
    Ok(out)
}

/// Inverse of [`concat_channels`]: the first `ca` channels and the rest.
pub fn split_channels<T: Real>(t: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if ca > t.c() {
        return Err(NnError::ShapeMismatch(format!("split {ca} from {} channels", t.c())));
    }
    let [n, c, z, y, x] = t.shape();
    let mut a = Tensor::zeros([n, ca, z, y, x]);
    let mut b = Tensor::zeros([n, c - ca, z, y, x]);
    for i in 0..n {
        let (sa, sb) = t.item(i).split_at(ca * t.vox());
        a.item_mut(i).copy_from_slice(sa);
        b.item_mut(i).copy_from_slice(sb);
    }
    Ok((a, b))
}

/// Softmax over channels at every voxel.
#[derive(Debug, Clone, Default)]
pub struct Softmax<T: Real> {
    out: Option<Tensor<T>>,
}

impl<T: Real> Softmax<T> {
    pub fn new() -> Self {
        Softmax { out: None }
    }

    pub fn apply(x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        let (c, v) = (x.c(), x.vox());
        for i in 0..x.n() {
            let item = y.item_mut(i);
            for j in 0..v {
                let mut mx = T::neg_infinity();
                for ch in 0..c {
                    mx = mx.max(item[ch * v + j]);
                }
                let mut s = T::zero();
                for ch in 0..c {
                    let e = (item[ch * v + j] - mx).exp();
                    item[ch * v + j] = e;
                    s += e;
                }
                for ch in 0..c {
                    item[ch * v + j] = item[ch * v + j] / s;
                }
            }
        }
        y
    }
}

impl<T: Real> Layer<T> for Softmax<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        if x.c() < 2 {
            return Err(NnError::ShapeMismatch("softmax needs at least 2 channels".into()));
        }
        let y = Self::apply(x);
        self.out = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let p = require_cache(&self.out)?;
        check_shape(gy, p.shape(), "softmax")?;
        let (c, v) = (p.c(), p.vox());
        let mut gx = Tensor::zeros(p.shape());
        for i in 0..p.n() {
            let (pi, gi) = (p.item(i), gy.item(i));
            let out = gx.item_mut(i);
            for j in 0..v {
                let mut dot = T::zero();
                for ch in 0..c {
                    dot += pi[ch * v + j] * gi[ch * v + j];
                }
                for ch in 0..c {
                    out[ch * v + j] = pi[ch * v + j] * (gi[ch * v + j] - dot);
                }
            }
        }
        Ok(gx)
    }
}

/// A chain of layers applied in order.
#[derive(Default)]
pub struct Sequential<T: Real> {
    pub layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Box<dyn Layer<T>>>) -> Self {
        Sequential { layers }
    }

    pub fn push(&mut self, layer: impl Layer<T> + 'static) {
        self.layers.push(Box::new(layer));
    }
}

impl<T: Real> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = gy.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// `body(x) + x`, or `body(x) + proj(x)` when the body changes channel count.
pub struct Residual<T: Real> {
    pub body: Box<dyn Layer<T>>,
    pub proj: Option<Conv3d<T>>,
}

impl<T: Real> Residual<T> {
    pub fn new(body: impl Layer<T> + 'static, proj: Option<Conv3d<T>>) -> Self {
        Residual {
            body: Box::new(body),
            proj,
        }
    }
}

impl<T: Real> Layer<T> for Residual<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = self.body.forward(x, mode)?;
        match &mut self.proj {
            Some(p) => y.add_assign(&p.forward(x, mode)?)?,
            None => y.add_assign(x)?,
        }
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut gx = self.body.backward(gy)?;
        match &mut self.proj {
            Some(p) => gx.add_assign(&p.backward(gy)?)?,
            None => gx.add_assign(gy)?,
        }
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.body.params();
        if let Some(p) = &self.proj {
            v.extend(p.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.body.params_mut();
        if let Some(p) = &mut self.proj {
            v.extend(p.params_mut());
        }
        v
    }
}
