//! Dense n-dimensional arrays and the counter-based Gaussian sampler.

mod rng;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use rng::{
    derive_seed, inverse_normal_cdf, philox4x32_10, sample_standard_normal, sample_uniform, splitmix64, NoiseKey,
};

/// Floating-point element type. `f32` for training, `f64` for gradient checks.
pub trait Scalar: Float + Sum + Send + Sync + Debug + Display + Default + 'static {
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// How to fill a freshly created tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Fill(f64),
    Values(Vec<f64>),
    /// Zero-mean normal with variance `2 / (fan_in + fan_out)`.
    Xavier(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Exp,
    Neg,
    Sigmoid,
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(
            self,
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div | Elementwise::Max
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Index of the largest value; the smallest index wins ties.
    Argmax,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

/// Fan-in and fan-out used by Xavier initialization.
///
/// Rank 2 `[out, in]`, rank 4 `[out, in, kh, kw]`; any other rank is treated
/// as a per-element parameter block with `fan_in = fan_out = numel`.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [out, inp] => (*inp, *out),
        [out, inp, kh, kw] => (inp * kh * kw, out * kh * kw),
        _ => {
            let n = shape.iter().product();
            (n, n)
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but {} values were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn create(shape: &[usize], init: &Init) -> Result<Self> {
        let n: usize = shape.iter().product();
        match init {
            Init::Fill(v) => Ok(Self::full(shape, T::of(*v))),
            Init::Values(values) => Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect()),
            Init::Xavier(seed) => {
                let (fan_in, fan_out) = fans(shape);
                if n == 0 {
                    return Ok(Self::zeros(shape));
                }
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                let key = NoiseKey::new(*seed, u32::MAX, 0, 0);
                let mut t = sample_standard_normal::<T>(shape, key);
                let s = T::of(std);
                t.data.iter_mut().for_each(|v| *v = *v * s);
                Ok(t)
            }
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync + Send) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Returns the first non-finite element as an error.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                index,
                context: context.to_string(),
            }),
            None => Ok(()),
        }
    }

    pub fn elementwise(kind: Elementwise, a: &Self, b: Option<&Self>) -> Result<Self> {
        let out = match (kind.is_binary(), b) {
            (true, Some(b)) => {
                let f: fn(T, T) -> T = match kind {
                    Elementwise::Add => |x, y| x + y,
                    Elementwise::Sub => |x, y| x - y,
                    Elementwise::Mul => |x, y| x * y,
                    Elementwise::Div => |x, y| x / y,
                    Elementwise::Max => |x, y| if y > x { y } else { x },
                    _ => unreachable!(),
                };
                broadcast_zip(a, b, f)?
            }
            (false, None) => {
                let f: fn(T) -> T = match kind {
                    Elementwise::Exp => |x| x.exp(),
                    Elementwise::Neg => |x| -x,
                    Elementwise::Sigmoid => sigmoid,
                    _ => unreachable!(),
                };
                a.map(f)
            }
            (true, None) => {
                return Err(Error::usage(format!("{kind:?} needs two operands")));
            }
            (false, Some(_)) => {
                return Err(Error::usage(format!("{kind:?} takes one operand")));
            }
        };
        out.ensure_finite(&format!("{kind:?}"))?;
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Self::elementwise(Elementwise::Add, self, Some(other))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Self::elementwise(Elementwise::Sub, self, Some(other))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        Self::elementwise(Elementwise::Mul, self, Some(other))
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        Self::elementwise(Elementwise::Div, self, Some(other))
    }

    pub fn maximum(&self, other: &Self) -> Result<Self> {
        Self::elementwise(Elementwise::Max, self, Some(other))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        match (self.shape.as_slice(), other.shape.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => {
                let (m, k, n) = (*m, *k, *n);
                let mut out = vec![T::zero(); m * n];
                gemm(m, k, n, &self.data, &other.data, &mut out);
                Ok(Self::from_parts(vec![m, n], out))
            }
            (a, b) => Err(Error::shape(format!("matmul of {a:?} and {b:?}"))),
        }
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Self> {
        match self.shape.as_slice() {
            [r, c] => Ok(Self::from_parts(vec![*c, *r], transpose(&self.data, *r, *c))),
            s => Err(Error::shape(format!("transpose of rank-{} tensor", s.len()))),
        }
    }

    pub fn reduce(kind: Reduce, t: &Self, axis: usize) -> Result<Self> {
        if axis >= t.rank() {
            return Err(Error::shape(format!("axis {axis} out of range for rank {}", t.rank())));
        }
        let outer: usize = t.shape[..axis].iter().product();
        let extent = t.shape[axis];
        let inner: usize = t.shape[axis + 1..].iter().product();
        let mut shape = t.shape.clone();
        shape.remove(axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| t.data[(o * extent + j) * inner + i];
                out[o * inner + i] = match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let s = (0..extent).fold(T::zero(), |acc, j| acc + at(j));
                        if kind == Reduce::Mean {
                            s / T::of(extent as f64)
                        } else {
                            s
                        }
                    }
                    Reduce::Argmax => {
                        if extent == 0 {
                            return Err(Error::shape("argmax over an empty axis"));
                        }
                        T::of(argmax_by(extent, at) as f64)
                    }
                };
            }
        }
        Ok(Self::from_parts(shape, out))
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Index of the maximum of `f(0..n)`, smallest index on ties.
pub(crate) fn argmax_by<T: PartialOrd>(n: usize, f: impl Fn(usize) -> T) -> usize {
    let mut best = 0;
    let mut best_v = f(0);
    for j in 1..n {
        let v = f(j);
        if v > best_v {
            best = j;
            best_v = v;
        }
    }
    best
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("shapes {a:?} and {b:?} do not broadcast"))),
        };
    }
    Ok(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        data.push(f(a.data[ia], b.data[ib]));
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn transpose<T: Copy + Default>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// `out += a[m,k] * b[k,n]`, row-major. Rows of `out` are computed
/// independently, so the result does not depend on the thread count.
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    let row = |(i, c): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c.iter_mut().zip(br) {
                *cv = *cv + av * bv;
            }
        }
    };
    if m * k * n >= 1 << 16 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `out += a[m,k] * b[n,k]^T`, row-major; each output element is a dot
/// product of two contiguous rows.
pub(crate) fn gemm_abt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    let row = |(i, c): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, cv) in c.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *cv = *cv + dot(ar, br);
        }
    };
    if m * k * n >= 1 << 16 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn create_modes() {
        let z = Tensor::<f32>::create(&[2, 2], &Init::Fill(0.0)).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let v = Tensor::<f32>::create(&[3], &Init::Values(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(v.data(), &[1.0, 2.0, 3.0]);
        let err = Tensor::<f32>::create(&[2, 2], &Init::Values(vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn xavier_variance() {
        let w = Tensor::<f64>::create(&[1000, 1000], &Init::Xavier(7)).unwrap();
        let n = w.len() as f64;
        let mean = w.sum_all() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2.0 / 2000.0;
        assert!(((var - target) / target).abs() < 0.05, "var {var}");
        assert!(mean.abs() < 1e-4);
    }

    #[test]
    fn elementwise_basics() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        let zero = Tensor::scalar(0.0);
        assert_eq!(x.maximum(&zero).unwrap().data(), &[0.0, 0.0, 2.0]);
        let s = Tensor::elementwise(Elementwise::Sigmoid, &t(&[1], &[0.0]), None).unwrap();
        assert_eq!(s.data(), &[0.5]);
        let n = Tensor::elementwise(Elementwise::Neg, &a, None).unwrap();
        assert_eq!(n.data(), &[-1.0, -2.0]);
    }

    #[test]
    fn elementwise_errors() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
        let z = t(&[2], &[1.0, 0.0]);
        assert!(matches!(a.div(&z), Err(Error::NonFinite { index: 1, .. })));
        let big = t(&[1], &[1000.0]);
        assert!(Tensor::elementwise(Elementwise::Exp, &big, None).is_err());
    }

    #[test]
    fn broadcasting_trailing_dims() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let row = t(&[3], &[10.0, 20.0, 30.0]);
        assert_eq!(a.add(&row).unwrap().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let col = t(&[2, 1], &[100.0, 200.0]);
        assert_eq!(a.add(&col).unwrap().data(), &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);
    }

    #[test]
    fn matmul_examples() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.5, -2.0, 3.0, 4.25]);
        assert_eq!(i.matmul(&m).unwrap().data(), m.data());
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn reduce_examples() {
        let v = t(&[3], &[1.0, 2.0, 3.0]);
        assert_eq!(Tensor::reduce(Reduce::Sum, &v, 0).unwrap().item(), 6.0);
        let m = t(&[2], &[2.0, 4.0]);
        assert_eq!(Tensor::reduce(Reduce::Mean, &m, 0).unwrap().item(), 3.0);
        let am = t(&[3], &[0.1, 0.7, 0.7]);
        assert_eq!(Tensor::reduce(Reduce::Argmax, &am, 0).unwrap().item(), 1.0);
        assert!(matches!(Tensor::reduce(Reduce::Sum, &v, 1), Err(Error::Shape(_))));
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(Tensor::reduce(Reduce::Sum, &a, 0).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(Tensor::reduce(Reduce::Sum, &a, 1).unwrap().data(), &[6.0, 15.0]);
    }

    #[test]
    fn reshape_checks_count() {
        let a = t(&[2, 3], &[0.0; 6]);
        assert!(a.clone().reshape(&[3, 2]).is_ok());
        assert!(a.reshape(&[4]).is_err());
    }
}
