//! Rank-4 NCHW tensors and the primitive layers the hourglass is built from.
//!
//! Every primitive is a pure function: inputs are borrowed, outputs are
//! freshly allocated. Backward passes take whatever the forward pass cached
//! and return gradients shaped like their primals.

mod conv;
mod elementwise;
mod norm;
mod pool;

use std::fmt;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use crate::error::{shape_err, Error, Result};

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvSpec};
pub use elementwise::{add, concat_channels, relu, relu_backward, split_channels};
pub use norm::{
    batchnorm_apply, batchnorm_backward, batchnorm_forward, BatchNormCache, NormMode, RunningStats,
    BN_EPSILON, BN_MOMENTUM,
};
pub use pool::{
    maxpool2x2_backward, maxpool2x2_forward, upsample_nearest2x, upsample_nearest2x_backward,
};

/// Storage precision of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

/// Element type of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + AddAssign + Sum + fmt::Debug + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a @ b + beta * c` over raw strided matrices.
    ///
    /// # Safety
    /// The strides must describe regions inside the allocations behind the pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Dense row-major matrix product `c (m×n) = op(a) · op(b) [+ c]`.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n`
/// (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the length assertions above bound every strided access.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batch × channels × height × width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    /// Shape used for per-channel vectors (biases, norm parameters).
    pub const fn vector(len: usize) -> Self {
        Shape::new(len, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}×{}×{}×{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(shape_err!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Independent uniform draws in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: impl Into<Shape>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel())
            .map(|_| T::of(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// The `h×w` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|d| *d = v);
    }

    pub fn scale(&mut self, k: T) {
        self.data.iter_mut().for_each(|d| *d = *d * k);
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "cannot accumulate {} into {}",
                other.shape,
                self.shape
            ));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors if any element is NaN or infinite; `what` names the producer.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what} produced a non-finite value at flat index {i}"
            ))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Channels `[start, start + len)` of every sample.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape;
        if start + len > s.channels {
            return Err(shape_err!(
                "channel slice {start}..{} out of range for {s}",
                start + len
            ));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.batch * len * p);
        for n in 0..s.batch {
            let base = (n * s.channels + start) * p;
            data.extend_from_slice(&self.data[base..base + len * p]);
        }
        Ok(Tensor {
            shape: s.with_channels(len),
            data,
        })
    }

    /// Sample `n` as a batch of one.
    pub fn sample(&self, n: usize) -> Result<Self> {
        let s = self.shape;
        if n >= s.batch {
            return Err(shape_err!("sample {n} out of range for {s}"));
        }
        let len = s.channels * s.plane();
        Ok(Tensor {
            shape: Shape::new(1, s.channels, s.height, s.width),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        })
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("cannot stack zero tensors"))?
            .shape;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        let mut batch = 0;
        for t in items {
            let s = t.shape;
            if (s.channels, s.height, s.width) != (first.channels, first.height, first.width) {
                return Err(shape_err!("cannot stack {s} with {first}"));
            }
            batch += s.batch;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(batch, first.channels, first.height, first.width),
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 7]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn narrow_and_stack() {
        let t = Tensor::<f64>::from_fn([2, 3, 2, 2], |n, c, y, x| (n * 100 + c * 10 + y * 2 + x) as f64);
        let mid = t.narrow_channels(1, 1).unwrap();
        assert_eq!(mid.shape(), Shape::new(2, 1, 2, 2));
        assert_eq!(mid.at(1, 0, 1, 0), 112.0);
        let again = Tensor::stack(&[t.sample(0).unwrap(), t.sample(1).unwrap()]).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul(2, 2, 2, &a, true, &b, true, &mut c, false);
        // aᵀ bᵀ = (b a)ᵀ
        assert_eq!(c, [23.0, 31.0, 34.0, 46.0]);
    }

    #[test]
    fn check_finite_reports_index() {
        let mut t = Tensor::<f32>::zeros([1, 1, 2, 2]);
        t.data_mut()[3] = f32::NAN;
        let msg = t.check_finite("probe").unwrap_err().to_string();
        assert!(msg.contains("probe") && msg.contains('3'));
    }
}
