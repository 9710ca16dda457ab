//! Dense row-major tensors and the forward kernels the model is built from.
//!
//! Every kernel here is a plain function over [`Tensor`] values; the
//! differentiable versions in [`crate::autodiff`] call into these and add a
//! backward rule.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Result, StrafeError};

/// Floating-point element type. `f32` is used for training, `f64` for
/// gradient checks.
pub trait Real:
    Float
    + FromPrimitive
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
    const DTYPE: &'static str;
    const BYTES: usize;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Train or eval behaviour for stochastic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(StrafeError::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(StrafeError::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(StrafeError::dim("tensor", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn glorot<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.random_range(-limit..=limit)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(StrafeError::NonFinite { op })
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(StrafeError::dim(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub(crate) fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(StrafeError::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ))
        }
    }
}

/// Standard matrix product of an `m×k` and a `k×n` matrix.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(StrafeError::dim(
            "matmul",
            format!("inner dimensions {k} and {k2} disagree"),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)?.check_finite("matmul")
}

/// Expands a mask to one flag per element of `x`. A mask may match `x`
/// exactly or cover only the last dimension (broadcast across rows).
pub(crate) fn expand_mask<T: Real>(x: &Tensor<T>, mask: &[bool]) -> Result<Vec<bool>> {
    if mask.len() == x.len() {
        Ok(mask.to_vec())
    } else if mask.len() == x.cols() {
        Ok(mask.iter().copied().cycle().take(x.len()).collect())
    } else {
        Err(StrafeError::dim(
            "softmax_lastdim",
            format!("mask of length {} does not broadcast to {:?}", mask.len(), x.shape()),
        ))
    }
}

/// Softmax over the last dimension. Masked (`false`) entries are exactly zero
/// and excluded from normalization.
pub fn softmax_lastdim<T: Real>(x: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let keep = match mask {
        Some(m) => Some(expand_mask(x, m)?),
        None => None,
    };
    let c = x.cols();
    let mut out = vec![T::zero(); x.len()];
    for (r, (row, out_row)) in x.data.chunks(c).zip(out.chunks_mut(c)).enumerate() {
        let live = |j: usize| keep.as_ref().is_none_or(|k| k[r * c + j]);
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if live(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(StrafeError::DegenerateRow { row: r });
        }
        let mut total = T::zero();
        for (j, (&v, o)) in row.iter().zip(out_row.iter_mut()).enumerate() {
            if live(j) {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for o in out_row.iter_mut() {
            *o = *o / total;
        }
    }
    Tensor::from_vec(x.shape.clone(), out)?.check_finite("softmax_lastdim")
}

/// Valid (unpadded), stride-1 convolution along the sequence axis.
///
/// `x` is `len_in × d`, `kernel` is `k × d × d_out`, `bias` has `d_out`
/// entries; the result is `(len_in − k + 1) × d_out`.
pub fn conv1d_seq<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (len_in, d) = x.dims2("conv1d_seq")?;
    let (k, kd, d_out) = match kernel.shape.as_slice() {
        [k, kd, o] => (*k, *kd, *o),
        other => return Err(StrafeError::dim("conv1d_seq", format!("kernel shape {other:?} is not k×d×d_out"))),
    };
    if kd != d {
        return Err(StrafeError::dim("conv1d_seq", format!("kernel depth {kd} != input width {d}")));
    }
    if bias.len() != d_out {
        return Err(StrafeError::dim("conv1d_seq", format!("bias length {} != {d_out}", bias.len())));
    }
    if k > len_in {
        return Err(StrafeError::dim("conv1d_seq", format!("kernel length {k} exceeds sequence length {len_in}")));
    }
    let len_out = len_in - k + 1;
    let mut out = Vec::with_capacity(len_out * d_out);
    for _ in 0..len_out {
        out.extend_from_slice(&bias.data);
    }
    // The window at output p covers input rows p..p+k, which are contiguous
    // in memory, so it can be treated as one (k·d)-vector against a
    // (k·d)×d_out matrix.
    let kd_len = k * d;
    for p in 0..len_out {
        let window = &x.data[p * d..p * d + kd_len];
        let out_row = &mut out[p * d_out..(p + 1) * d_out];
        for (i, &xv) in window.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let w_row = &kernel.data[i * d_out..(i + 1) * d_out];
            for (o, &w) in out_row.iter_mut().zip(w_row) {
                *o += xv * w;
            }
        }
    }
    Tensor::matrix(len_out, d_out, out)?.check_finite("conv1d_seq")
}

/// Inverted dropout. Returns the output together with the per-element
/// multiplier that was applied (0 or 1/(1−p)), which is what the backward
/// rule needs.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(StrafeError::Parameter {
            name: "dropout",
            detail: format!("probability {p} outside [0, 1)"),
        });
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let scale = T::of(1.0 / (1.0 - p));
    let multiplier: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
        .collect();
    let data = x.data.iter().zip(&multiplier).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::from_vec(x.shape.clone(), data)?, Some(multiplier)))
}
