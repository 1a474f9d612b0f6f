//! Dense row-major tensors over `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Error, Result};

/// Element type tag, also used as the on-disk dtype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Scalar element type. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    /// `c = a * b + beta * c` for strided row/column-major operands.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_gemm_bounds(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * strides.0 + (cols - 1) as isize * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_real {
    ($ty:ty, $dtype:expr, $gemm:path) => {
        impl Real for $ty {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_gemm_bounds(a.len(), m, k, a_strides);
                check_gemm_bounds(b.len(), k, n, b_strides);
                check_gemm_bounds(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$ty>()];
                buf.copy_from_slice(bytes);
                <$ty>::from_le_bytes(buf)
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense tensor with row-major layout and an optional gradient accumulator.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(shape_err!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            ));
        }
        let t = Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    /// Fills by calling `f` with each flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    /// Mutable access to the raw values. Callers that may introduce
    /// non-finite values should follow up with [`Tensor::check_finite`].
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient as a tensor of the same shape, or zeros when absent.
    pub fn grad_tensor(&self) -> Tensor<T> {
        match &self.grad {
            Some(g) => Tensor::from_parts(self.shape.clone(), g.clone()),
            None => Tensor::zeros(&self.shape),
        }
    }

    /// Adds `delta` into the gradient slot, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(shape_err!(
                "gradient length {} for tensor of shape {:?}",
                delta.len(),
                self.shape
            ));
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += *d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    /// Adds an owned same-shape gradient, reusing its buffer on first use.
    pub(crate) fn accumulate_grad_owned(&mut self, delta: Tensor<T>) -> Result<()> {
        if self.grad.is_none() && delta.shape == self.shape {
            self.grad = Some(delta.data);
            return Ok(());
        }
        self.accumulate_grad(&delta.data)
    }

    /// Adds `delta` (`[H, W, len]`) into channels `start..start+len` of the
    /// gradient of a `[H, W, C]` tensor.
    pub(crate) fn accumulate_grad_channels(&mut self, start: usize, delta: &Tensor<T>) -> Result<()> {
        let (h, w, c) = self.dims3()?;
        let (dh, dw, len) = delta.dims3()?;
        if (dh, dw) != (h, w) || start + len > c {
            return Err(shape_err!(
                "channel gradient {:?} at {start} for tensor of shape {:?}",
                delta.shape,
                self.shape
            ));
        }
        let g = self.grad.get_or_insert_with(|| vec![T::zero(); h * w * c]);
        for (row, d) in g.chunks_exact_mut(c).zip(delta.data.chunks_exact(len)) {
            row[start..start + len].iter_mut().zip(d).for_each(|(g, &d)| *g += d);
        }
        Ok(())
    }

    pub(crate) fn take_grad(&mut self) -> Option<Tensor<T>> {
        let shape = self.shape.clone();
        self.grad.take().map(|g| Tensor::from_parts(shape, g))
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(H, W)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(shape_err!("expected [H, W], got {:?}", self.shape)),
        }
    }

    /// `(H, W, C)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(shape_err!("expected [H, W, C], got {:?}", self.shape)),
        }
    }

    /// `(H, W, S)` of a per-pixel square kernel tensor `[H, W, S, S]`.
    pub fn dims_kernel(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, a, b] if a == b => Ok((h, w, a)),
            _ => Err(shape_err!("expected [H, W, S, S], got {:?}", self.shape)),
        }
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index {i} out of bounds for extent {n}");
                acc * n + i
            })
    }

    /// Extracts channel `c` of an `[H, W, C]` tensor as `[H, W]`.
    pub fn channel(&self, c: usize) -> Result<Tensor<T>> {
        let (h, w, ch) = self.dims3()?;
        if c >= ch {
            return Err(shape_err!("channel {c} out of range for {ch} channels"));
        }
        let data = self.data.iter().skip(c).step_by(ch).copied().collect();
        Ok(Tensor::from_parts(vec![h, w], data))
    }

    /// Interleaves equally sized `[H, W]` planes into `[H, W, C]`.
    pub fn stack_channels(planes: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = planes
            .first()
            .ok_or_else(|| shape_err!("cannot stack zero planes"))?;
        let (h, w) = first.dims2()?;
        for p in planes {
            if p.dims2()? != (h, w) {
                return Err(shape_err!("plane shape {:?} != [{h}, {w}]", p.shape));
            }
        }
        let c = planes.len();
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h * w {
            data.extend(planes.iter().map(|p| p.data[i]));
        }
        Ok(Tensor::from_parts(vec![h, w, c], data))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.expect_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn expect_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(shape_err!("{:?} vs {:?}", self.shape, other.shape))
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// Converts element type, dropping any gradient.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        )
    }

    /// Crops `border` pixels from every side of the two leading axes.
    pub fn crop_border(&self, border: usize) -> Result<Tensor<T>> {
        if self.shape.len() < 2 {
            return Err(shape_err!("crop needs at least two axes, got {:?}", self.shape));
        }
        let (h, w) = (self.shape[0], self.shape[1]);
        if 2 * border >= h || 2 * border >= w {
            return Err(shape_err!("border {border} too large for {h}x{w}"));
        }
        let inner: usize = self.shape[2..].iter().product();
        let (oh, ow) = (h - 2 * border, w - 2 * border);
        let mut data = Vec::with_capacity(oh * ow * inner);
        for y in border..h - border {
            let start = (y * w + border) * inner;
            data.extend_from_slice(&self.data[start..start + ow * inner]);
        }
        let mut shape = vec![oh, ow];
        shape.extend_from_slice(&self.shape[2..]);
        Ok(Tensor::from_parts(shape, data))
    }
}
