//! A small 3D layer engine with hand-written backward passes.
//!
//! Tensors are 5D `[batch, channel, z, y, x]` with x varying fastest, the
//! same order as a channel-stacked [`Volume`](crate::volume::Volume). Every
//! layer caches what it needs during `forward` and accumulates parameter
//! gradients during `backward`. The engine is generic over `f32` (training)
//! and `f64` (gradient checking).

mod conv;
mod direct;
mod gradcheck;
mod layers;
mod loss;
mod optim;

pub use conv::{Conv3d, Padding};
pub use gradcheck::{grad_check, GradCheckOptions, GradReport};
pub use layers::{
    concat_channels, split_channels, BatchNorm3d, MaxPool3d, PRelu, Residual, Sequential,
    Softmax, Upsample3d,
};
pub use loss::{loss_wce, loss_wip, LossKind, LossOutput, PROB_CLAMP};
pub use optim::{Optimizer, OptimizerKind, PlateauScheduler, SchedulerState};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),
    #[error("backward called before forward")]
    NoForwardCache,
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Floating-point element type of the engine.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + Debug
    + Default
    + 'static
{
    /// `C = alpha · A·B + beta · C` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    /// Architecture-specific kernel for a direct stride-1 convolution;
    /// returns false when none applies and the portable loop should run.
    #[doc(hidden)]
    fn direct_rows(_plan: &direct::Plan<Self>, _w: &[Self], _y: &mut [Self]) -> bool {
        false
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize, what: &str) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "gemm operand {what} out of bounds: {last} >= {len}");
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path $(, $direct:path)?) => {
        impl Real for $t {
            $(
                fn direct_rows(plan: &direct::Plan<Self>, w: &[Self], y: &mut [Self]) -> bool {
                    $direct(plan, w, y)
                }
            )?

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                check_extent(a.len(), m, k, rsa, csa, "A");
                check_extent(b.len(), k, n, rsb, csb, "B");
                check_extent(c.len(), m, n, rsc, csc, "C");
                // SAFETY: extents checked above; A and B do not alias C.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, direct::rows_f32);
impl_real!(f64, matrixmultiply::dgemm);

/// Whether batch norm uses batch statistics (and updates running ones).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense `[n, c, z, y, x]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(NnError::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: [usize; 5], v: T) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn randn<R: Rng>(shape: [usize; 5], rng: &mut R) -> Self {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::of(StandardNormal.sample(rng)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Voxels per channel.
    pub fn vox(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// All channels of batch item `i`.
    pub fn item(&self, i: usize) -> &[T] {
        let s = self.c() * self.vox();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.c() * self.vox();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn channel(&self, i: usize, c: usize) -> &[T] {
        let v = self.vox();
        let off = (i * self.c() + c) * v;
        &self.data[off..off + v]
    }

    pub fn channel_mut(&mut self, i: usize, c: usize) -> &mut [T] {
        let v = self.vox();
        let off = (i * self.c() + c) * v;
        &mut self.data[off..off + v]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(NnError::ShapeMismatch(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|x| U::of(x.to_f64().unwrap())).collect(),
        }
    }
}

/// Adam moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

/// A named parameter or buffer with its gradient and optimizer state.
/// Buffers (`trainable == false`) are saved with the model but never
/// updated by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
    pub adam: AdamState<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>, trainable: bool) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Param {
            name: name.into(),
            shape,
            grad: vec![T::zero(); n],
            adam: AdamState {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                step: 0,
            },
            value,
            trainable,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::of(x.to_f64().unwrap())).collect::<Vec<U>>();
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            value: c(&self.value),
            grad: c(&self.grad),
            trainable: self.trainable,
            adam: AdamState {
                m: c(&self.adam.m),
                v: c(&self.adam.v),
                step: self.adam.step,
            },
        }
    }
}

/// A differentiable operation with optional parameters.
pub trait Layer<T: Real>: Send {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Gradient w.r.t. the input of the latest `forward`; parameter
    /// gradients are accumulated into each [`Param::grad`].
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
