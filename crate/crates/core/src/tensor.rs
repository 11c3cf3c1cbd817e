//! Dense rank-4 tensors in NCHW order plus the elementwise kernels,
//! optimizer update and finite-difference oracle used throughout the crate.
//!
//! Everything numeric is generic over [`Real`] so the same kernels can run in
//! `f32` (training, files) and `f64` (gradient checks).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

/// Floating-point element type.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major `batch × channels × height × width` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    /// All-zero tensor. Panics if any dimension is zero.
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        assert!(dims.iter().all(|&d| d >= 1), "tensor dims must be >= 1, got {dims:?}");
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return shape_err(format!("zero dimension in {dims:?}"));
        }
        let expected = checked_volume(dims)
            .ok_or_else(|| Error::Shape(format!("dims {dims:?} overflow usize")))?;
        if expected != data.len() {
            return shape_err(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor4<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        for t in items {
            if t.dims[1..] != [c, h, w] {
                return shape_err(format!("stack: {:?} vs {:?}", t.dims, first.dims));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Self::from_vec([n, c, h, w], data)
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.dims[0] && c < self.dims[1] && h < self.dims[2] && w < self.dims[3]);
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Elements of one batch entry.
    pub fn image_slice(&self, n: usize) -> &[T] {
        let stride = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn image_slice_mut(&mut self, n: usize) -> &mut [T] {
        let stride = self.dims[1] * self.dims[2] * self.dims[3];
        &mut self.data[n * stride..(n + 1) * stride]
    }

    /// Copy of batch entry `n` as a batch-of-one tensor.
    pub fn image(&self, n: usize) -> Tensor4<T> {
        let [_, c, h, w] = self.dims;
        Tensor4 {
            dims: [1, c, h, w],
            data: self.image_slice(n).to_vec(),
        }
    }

    pub fn same_dims(&self, other: &Tensor4<T>) -> bool {
        self.dims == other.dims
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor4<T> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, a: T) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    pub fn add_assign(&mut self, other: &Tensor4<T>) -> Result<()> {
        if !self.same_dims(other) {
            return shape_err(format!("add: {:?} vs {:?}", self.dims, other.dims));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Elementwise precision conversion.
    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

pub(crate) fn checked_volume(dims: [usize; 4]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn relu<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| v.max(T::zero()))
}

/// Masks `upstream` where `input <= 0`; the subgradient at exactly zero is 0.
pub fn relu_backward<T: Real>(input: &Tensor4<T>, upstream: &Tensor4<T>) -> Result<Tensor4<T>> {
    if !input.same_dims(upstream) {
        return shape_err(format!(
            "relu_backward: input {:?} vs upstream {:?}",
            input.dims, upstream.dims
        ));
    }
    let data = input
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor4 {
        dims: input.dims,
        data,
    })
}

/// Heavy-ball SGD on raw slices: `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_update<T: Real>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

pub fn sgd_step<T: Real>(
    params: &mut Tensor4<T>,
    grads: &Tensor4<T>,
    lr: T,
    momentum_state: &mut Tensor4<T>,
    momentum: T,
) -> Result<()> {
    if !params.same_dims(grads) || !params.same_dims(momentum_state) {
        return shape_err(format!(
            "sgd_step: params {:?}, grads {:?}, state {:?}",
            params.dims, grads.dims, momentum_state.dims
        ));
    }
    sgd_update(&mut params.data, &grads.data, &mut momentum_state.data, lr, momentum);
    Ok(())
}

/// Central differences of a scalar function, one coordinate at a time.
///
/// The denominator is the step actually realised in `T` (`x + h` and
/// `x - h` round differently), which keeps the oracle exact for quadratics.
pub fn finite_difference_gradient<T: Real>(
    mut f: impl FnMut(&Tensor4<T>) -> f64,
    x: &Tensor4<T>,
    h: T,
) -> Tensor4<T> {
    assert!(h > T::zero(), "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor4::zeros(x.dims);
    for i in 0..x.len() {
        let orig = x.data[i];
        let plus = orig + h;
        let minus = orig - h;
        probe.data[i] = plus;
        let f_plus = f(&probe);
        probe.data[i] = minus;
        let f_minus = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = T::of((f_plus - f_minus) / (plus.as_f64() - minus.as_f64()));
    }
    grad
}

/// Absolute floor on the denominator of gradient comparisons.
pub const GRAD_ABS_FLOOR: f64 = 1e-5;
/// Relative tolerance for gradient comparisons.
pub const GRAD_REL_TOL: f64 = 1e-3;
/// Central-difference step for gradient comparisons.
pub const GRAD_STEP: f64 = 1e-3;

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_error<T: Real>(analytic: &[T], numeric: &[T], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
