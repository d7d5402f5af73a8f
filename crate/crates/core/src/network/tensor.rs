use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. Inference and training run in `f32`; the
/// gradient oracle runs the same code in `f64`.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C <- alpha * A B + beta * C` on strided row/column views.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Activations of shape (batch, channels, length).
///
/// Storage is channels-last: element `(b, c, t)` lives at
/// `(b * length + t) * channels + c`. This lets a stride-1 valid
/// convolution read its im2col rows straight out of the buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    data: Vec<T>,
    batch: usize,
    channels: usize,
    length: usize,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(batch: usize, channels: usize, length: usize) -> Self {
        Self {
            data: vec![T::zero(); batch * channels * length],
            batch,
            channels,
            length,
        }
    }

    /// Build from channels-last data.
    pub fn from_vec(data: Vec<T>, batch: usize, channels: usize, length: usize) -> Result<Self> {
        if data.len() != batch * channels * length {
            return Err(Error::shape(format!(
                "{} values do not fill a ({batch}, {channels}, {length}) tensor",
                data.len()
            )));
        }
        Ok(Self {
            data,
            batch,
            channels,
            length,
        })
    }

    /// Build from `(batch, channels, length)` row-major data.
    pub fn from_channels_first(data: &[T], batch: usize, channels: usize, length: usize) -> Result<Self> {
        let mut t = Self::from_vec(data.to_vec(), batch, channels, length)?;
        for b in 0..batch {
            for c in 0..channels {
                for i in 0..length {
                    let v = data[(b * channels + c) * length + i];
                    t.set(b, c, i, v);
                }
            }
        }
        Ok(t)
    }

    /// A batch of single-channel signals, one row per item.
    pub fn from_frames(frames: &[T], window: usize) -> Result<Self> {
        if window == 0 || frames.len() % window != 0 {
            return Err(Error::shape(format!(
                "{} samples are not a whole number of {window}-sample frames",
                frames.len()
            )));
        }
        Self::from_vec(frames.to_vec(), frames.len() / window, 1, window)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.channels, self.length)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
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

    fn index(&self, b: usize, c: usize, t: usize) -> usize {
        (b * self.length + t) * self.channels + c
    }

    pub fn get(&self, b: usize, c: usize, t: usize) -> T {
        self.data[self.index(b, c, t)]
    }

    pub fn set(&mut self, b: usize, c: usize, t: usize, v: T) {
        let i = self.index(b, c, t);
        self.data[i] = v;
    }

    /// Channels-last slab of one batch item.
    pub fn item(&self, b: usize) -> &[T] {
        let n = self.channels * self.length;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.channels * self.length;
        &mut self.data[b * n..(b + 1) * n]
    }

    /// `(batch, channels, length)` row-major copy.
    pub fn to_channels_first(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.data.len()];
        for b in 0..self.batch {
            for c in 0..self.channels {
                for t in 0..self.length {
                    out[(b * self.channels + c) * self.length + t] = self.get(b, c, t);
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named weight tensor with row-major dims.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn filled(dims: &[usize], v: T) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![v; dims.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> ParamTensor<U> {
        ParamTensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Ordered list of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    entries: Vec<(String, ParamTensor<T>)>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: ParamTensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Model(format!("duplicate tensor name '{name}'")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &ParamTensor<T> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut ParamTensor<T> {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub(crate) fn split_at_mut(
        &mut self,
        i: usize,
    ) -> (&mut [(String, ParamTensor<T>)], &mut [(String, ParamTensor<T>)]) {
        self.entries.split_at_mut(i)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names and dims, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), ParamTensor::zeros(&t.dims)))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

impl Params<f32> {
    /// Bitwise equality of names, dims and values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| {
                na == nb
                    && a.dims == b.dims
                    && a.data.len() == b.data.len()
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters as stored on disk.
pub type NetworkParams = Params<f32>;
