//! Dense row-major tensors and the handful of kernels the models need.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + Default + Debug + Display + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, x) in t.data.iter_mut().enumerate() {
            *x = f(i);
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension for matrices, 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    /// Cosine similarity of the flattened tensors.
    pub fn cosine(&self, other: &Self) -> Result<T> {
        let (na, nb) = (self.norm(), other.norm());
        if na == T::zero() || nb == T::zero() {
            return Err(Error::NonFinite("cosine of a zero-norm vector".into()));
        }
        let c = self.dot(other)? / (na * nb);
        Ok(c.max(-T::one()).min(T::one()))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub(crate) fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, other: &Self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self · other` for `[p×q]·[q×s]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (p, q) = self.matrix("matmul", other)?;
        let (q2, s) = other.matrix("matmul", self)?;
        if q != q2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); p * s];
        gemm_nn(&self.data, &other.data, &mut out, p, q, s);
        Ok(Self {
            shape: vec![p, s],
            data: out,
        })
    }

    /// `self · otherᵀ` for `[p×q]·[s×q]ᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (p, q) = self.matrix("matmul_nt", other)?;
        let (s, q2) = other.matrix("matmul_nt", self)?;
        if q != q2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); p * s];
        gemm_nt(&self.data, &other.data, &mut out, p, q, s);
        Ok(Self {
            shape: vec![p, s],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs a matrix, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&self) -> Result<Self> {
        if !self.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = self.clone();
        let c = self.cols();
        for row in out.data.chunks_mut(c) {
            softmax_in_place(row, c);
        }
        Ok(out)
    }
}

/// Softmax over `row[..visible]`; entries past `visible` are set to zero.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], visible: usize) {
    let max = row[..visible]
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in &mut row[..visible] {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in &mut row[..visible] {
        *x = *x / total;
    }
    for x in &mut row[visible..] {
        *x = T::zero();
    }
}

/// `out += a · b`, `a: [p×q]`, `b: [q×s]`. Zero coefficients are skipped;
/// masked attention and sliced losses make them common in backward passes.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, s: usize) {
    for i in 0..p {
        let out_row = &mut out[i * s..(i + 1) * s];
        for (k, &aik) in a[i * q..(i + 1) * q].iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(&b[k * s..(k + 1) * s]) {
                *o += aik * bkj;
            }
        }
    }
}

/// `out += a · bᵀ`, `a: [p×q]`, `b: [s×q]`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, s: usize) {
    // Transposing first turns the inner loop into an axpy, which vectorizes.
    let mut bt = vec![T::zero(); q * s];
    for j in 0..s {
        for k in 0..q {
            bt[k * s + j] = b[j * q + k];
        }
    }
    gemm_nn(a, &bt, out, p, q, s);
}

/// `out += aᵀ · b`, `a: [p×q]`, `b: [p×s]`, `out: [q×s]`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, s: usize) {
    for i in 0..p {
        let b_row = &b[i * s..(i + 1) * s];
        if b_row.iter().all(|&x| x == T::zero()) {
            continue;
        }
        for (k, &aik) in a[i * q..(i + 1) * q].iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            for (o, &bij) in out[k * s..(k + 1) * s].iter_mut().zip(b_row) {
                *o += aik * bij;
            }
        }
    }
}

impl<T: Scalar> Display for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}
