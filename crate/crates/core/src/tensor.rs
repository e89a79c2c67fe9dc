//! Dense row-major tensors and the kernel set the fusion operators are built from.
//!
//! Feature maps use channel-last `[H, W, D]` layout (optionally with a leading
//! frame axis, `[F, H, W, D]`). Token sequences are `[T, D]` matrices where
//! `T = F * H * W`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point precision of a scalar buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision '{other}'"))),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one scalar from the first `PRECISION.bytes()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar to f64")
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            reason: "dimensions must be strictly positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Shape {
                shape: shape.to_vec(),
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Samples every entry from `uniform(-bound, bound)`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Interprets the tensor as a matrix, folding all leading axes into rows.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("non-empty shape");
        (self.data.len() / cols, cols)
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(Error::Shape {
                shape: s.to_vec(),
                reason: format!("{op} expects a rank-2 tensor"),
            }),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn into_reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|x| !x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, cols) = self.rows_cols();
        &self.data[r * cols..(r + 1) * cols]
    }
}

/// Learned affine map `x W + b` over the trailing axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProjection<T = f64> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> LinearProjection<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let (_, d_out) = weight.dims2("linear weight")?;
        if let Some(b) = &bias {
            if b.shape() != [d_out] {
                return Err(Error::dim("linear bias", weight.shape(), b.shape()));
            }
        }
        Ok(Self { weight, bias })
    }

    /// `uniform(-1/sqrt(d_in), 1/sqrt(d_in))` for weight and bias.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[d_in, d_out], bound, rng),
            bias: Some(Tensor::uniform(&[d_out], bound, rng)),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Tensor::eye(d),
            bias: Some(Tensor::zeros(&[d])),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Some(Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// One `k x k` filter per channel, stored `[k, k, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseKernel<T = f64> {
    pub weights: Tensor<T>,
}

impl<T: Scalar> DepthwiseKernel<T> {
    pub fn new(weights: Tensor<T>) -> Result<Self> {
        match weights.shape() {
            &[a, b, _] if a == b && a % 2 == 1 => Ok(Self { weights }),
            s => Err(Error::Shape {
                shape: s.to_vec(),
                reason: "depthwise kernel must be [k, k, D] with odd k".into(),
            }),
        }
    }

    pub fn init<R: Rng>(k: usize, channels: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((k * k) as f64).sqrt();
        Self::new(Tensor::uniform(&[k, k, channels], bound, rng)).expect("odd kernel")
    }

    /// Center tap 1, everything else 0: the identity filter.
    pub fn delta(k: usize, channels: usize) -> Self {
        let mut w = Tensor::zeros(&[k, k, channels]);
        let c = k / 2;
        for ch in 0..channels {
            w.data_mut()[(c * k + c) * channels + ch] = T::one();
        }
        Self::new(w).expect("odd kernel")
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[2]
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// `a * b^T` for `a: [M, K]`, `b: [N, K]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// `a^T * b` for `a: [K, M]`, `b: [K, N]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2("matmul_tn")?;
    let (k2, n) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2("transpose")?;
    let d = a.data();
    Ok(Tensor::from_fn(&[n, m], |idx| {
        let (j, i) = (idx / m, idx % m);
        d[i * n + j]
    }))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2("softmax_rows")?;
    if x.has_non_finite() {
        return Err(Error::Numeric {
            op: "softmax_rows",
            reason: "input contains NaN or infinite values".into(),
        });
    }
    let mut out = x.data().to_vec();
    for r in 0..m {
        let row = &mut out[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::from_vec(&[m, n], out)
}

const GELU_CUBIC: f64 = 0.044715;

/// Tanh-approximated GeLU.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(GELU_CUBIC);
    let th = (c * (x + a * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Splits a `[.., H, W, D]` shape into `(frames, H, W, D)`.
pub fn grid_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, d] => Ok((1, h, w, d)),
        [f, h, w, d] => Ok((f, h, w, d)),
        _ => Err(Error::Shape {
            shape: shape.to_vec(),
            reason: format!("{op} expects [H, W, D] or [F, H, W, D]"),
        }),
    }
}

/// Per-channel 2-D cross-correlation, stride 1, zero "same" padding.
///
/// Accepts `[H, W, D]` or a frame-batched `[F, H, W, D]`; frames never mix.
pub fn depthwise_conv<T: Scalar>(x: &Tensor<T>, k: &DepthwiseKernel<T>) -> Result<Tensor<T>> {
    let (f, h, w, d) = grid_dims(x.shape(), "depthwise_conv")?;
    if k.channels() != d {
        return Err(Error::dim("depthwise_conv", x.shape(), k.weights.shape()));
    }
    let ks = k.size();
    let r = (ks / 2) as isize;
    let xd = x.data();
    let kd = k.weights.data();
    let mut out = vec![T::zero(); x.len()];
    for fr in 0..f {
        let base = fr * h * w * d;
        for i in 0..h {
            for j in 0..w {
                let o = base + (i * w + j) * d;
                for a in 0..ks {
                    let si = i as isize + a as isize - r;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for b in 0..ks {
                        let sj = j as isize + b as isize - r;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let src = base + (si as usize * w + sj as usize) * d;
                        let kk = (a * ks + b) * d;
                        for c in 0..d {
                            out[o + c] = out[o + c] + kd[kk + c] * xd[src + c];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Gradient of [`depthwise_conv`] with respect to its input and its kernel.
pub fn depthwise_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &DepthwiseKernel<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (f, h, w, d) = grid_dims(x.shape(), "depthwise_conv_backward")?;
    if grad.shape() != x.shape() {
        return Err(Error::dim("depthwise_conv_backward", x.shape(), grad.shape()));
    }
    let ks = k.size();
    let r = (ks / 2) as isize;
    let (xd, kd, gd) = (x.data(), k.weights.data(), grad.data());
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.weights.len()];
    for fr in 0..f {
        let base = fr * h * w * d;
        for i in 0..h {
            for j in 0..w {
                let o = base + (i * w + j) * d;
                for a in 0..ks {
                    let si = i as isize + a as isize - r;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for b in 0..ks {
                        let sj = j as isize + b as isize - r;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let src = base + (si as usize * w + sj as usize) * d;
                        let kk = (a * ks + b) * d;
                        for c in 0..d {
                            gx[src + c] = gx[src + c] + kd[kk + c] * gd[o + c];
                            gk[kk + c] = gk[kk + c] + xd[src + c] * gd[o + c];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(k.weights.shape(), gk)?,
    ))
}

/// Per-channel mean over all spatial positions: `[H, W, D] -> [1, 1, D]`,
/// `[F, H, W, D] -> [F, 1, 1, D]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (f, h, w, d) = grid_dims(x.shape(), "global_avg_pool")?;
    let hw = h * w;
    let scale = T::one() / T::lit(hw as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); f * d];
    for fr in 0..f {
        let acc = &mut out[fr * d..(fr + 1) * d];
        for p in 0..hw {
            let src = &xd[(fr * hw + p) * d..(fr * hw + p + 1) * d];
            for (a, &v) in acc.iter_mut().zip(src) {
                *a = *a + v;
            }
        }
        for a in acc.iter_mut() {
            *a = *a * scale;
        }
    }
    let shape: Vec<usize> = if x.rank() == 3 {
        vec![1, 1, d]
    } else {
        vec![f, 1, 1, d]
    };
    Tensor::from_vec(&shape, out)
}

/// Adds `bias: [N]` to every row of `x: [.., N]`.
pub fn add_row_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, n) = x.rows_cols();
    if bias.shape() != [n] {
        return Err(Error::dim("add_row_bias", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    let bd = bias.data();
    for row in out.data_mut().chunks_mut(n) {
        for (o, &b) in row.iter_mut().zip(bd) {
            *o = *o + b;
        }
    }
    Ok(out)
}

/// `x W + b` over rows of `x: [T, D_in]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, p: &LinearProjection<T>) -> Result<Tensor<T>> {
    let (_, d_in) = x.dims2("linear")?;
    if d_in != p.d_in() {
        return Err(Error::dim("linear", x.shape(), p.weight.shape()));
    }
    let y = matmul(x, &p.weight)?;
    match &p.bias {
        Some(b) => add_row_bias(&y, b),
        None => Ok(y),
    }
}

/// Column sums of a `[.., N]` tensor.
pub fn sum_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (_, n) = x.rows_cols();
    let mut out = vec![T::zero(); n];
    for row in x.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::from_vec(&[n], out).expect("n > 0")
}

/// Concatenates tensors along the leading axis. Trailing axes must agree.
pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
    let tail = &first.shape()[1..];
    let mut lead = 0;
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(Error::dim("concat_rows", first.shape(), p.shape()));
        }
        lead += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    Tensor::from_vec(&shape, data)
}

/// Concatenates tensors along the trailing (channel) axis.
pub fn concat_last<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
    let lead = &first.shape()[..first.rank() - 1];
    let rows = first.rows_cols().0;
    let mut total = 0;
    for p in parts {
        if &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::dim("concat_last", first.shape(), p.shape()));
        }
        total += p.rows_cols().1;
    }
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::from_vec(&shape, data)
}

/// Splits the trailing axis into pieces of the given widths (inverse of [`concat_last`]).
pub fn split_last<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (rows, cols) = x.rows_cols();
    if widths.iter().sum::<usize>() != cols {
        return Err(Error::dim("split_last", x.shape(), widths));
    }
    let lead = &x.shape()[..x.rank() - 1];
    let mut out = Vec::with_capacity(widths.len());
    let mut offset = 0;
    for &wd in widths {
        let mut data = Vec::with_capacity(rows * wd);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[offset..offset + wd]);
        }
        let mut shape = lead.to_vec();
        shape.push(wd);
        out.push(Tensor::from_vec(&shape, data)?);
        offset += wd;
    }
    Ok(out)
}

/// `[H, W, C] -> [H/k, W/k, k*k*C]`, gathering each `k x k` patch into channels.
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (h, w, c) = match *x.shape() {
        [h, w, c] if k > 0 && h % k == 0 && w % k == 0 => (h, w, c),
        _ => {
            return Err(Error::Shape {
                shape: x.shape().to_vec(),
                reason: format!("space_to_depth needs [H, W, C] divisible by {k}"),
            })
        }
    };
    let (oh, ow, oc) = (h / k, w / k, k * k * c);
    let xd = x.data();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..oh {
        for j in 0..ow {
            for a in 0..k {
                for b in 0..k {
                    let src = ((i * k + a) * w + j * k + b) * c;
                    out.extend_from_slice(&xd[src..src + c]);
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, oc], out)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (oh, ow, oc) = match *x.shape() {
        [a, b, c] if k > 0 && c % (k * k) == 0 => (a, b, c),
        _ => {
            return Err(Error::Shape {
                shape: x.shape().to_vec(),
                reason: format!("depth_to_space needs channels divisible by {}", k * k),
            })
        }
    };
    let c = oc / (k * k);
    let (h, w) = (oh * k, ow * k);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    let mut src = 0;
    for i in 0..oh {
        for j in 0..ow {
            for a in 0..k {
                for b in 0..k {
                    let dst = ((i * k + a) * w + j * k + b) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    src += c;
                }
            }
        }
    }
    Tensor::from_vec(&[h, w, c], out)
}

/// Source taps for one axis of half-pixel bilinear resampling.
fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling of `[H, W, C]` by an integer factor (half-pixel centers).
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [h, w, c] = *x.shape() else {
        return Err(Error::Shape {
            shape: x.shape().to_vec(),
            reason: "upsample_bilinear expects [H, W, C]".into(),
        });
    };
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![T::zero(); oh * ow * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let o = (oy * ow + ox) * c;
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            for (sy, sx, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let wt = T::lit(wt);
                let s = (sy * w + sx) * c;
                for ch in 0..c {
                    out[o + ch] = out[o + ch] + wt * xd[s + ch];
                }
            }
        }
    }
    Tensor::from_vec(&[oh, ow, c], out)
}

/// Adjoint of [`upsample_bilinear`]: maps an output-sized gradient back to the input grid.
pub fn upsample_bilinear_adjoint<T: Scalar>(
    grad: &Tensor<T>,
    in_h: usize,
    in_w: usize,
    factor: usize,
) -> Result<Tensor<T>> {
    let [oh, ow, c] = *grad.shape() else {
        return Err(Error::Shape {
            shape: grad.shape().to_vec(),
            reason: "upsample adjoint expects [H, W, C]".into(),
        });
    };
    if oh != in_h * factor || ow != in_w * factor {
        return Err(Error::dim("upsample_bilinear_adjoint", grad.shape(), &[in_h, in_w, c]));
    }
    let ty = bilinear_taps(in_h, factor);
    let tx = bilinear_taps(in_w, factor);
    let gd = grad.data();
    let mut out = vec![T::zero(); in_h * in_w * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let o = (oy * ow + ox) * c;
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            for (sy, sx, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let wt = T::lit(wt);
                let s = (sy * in_w + sx) * c;
                for ch in 0..c {
                    out[s + ch] = out[s + ch] + wt * gd[o + ch];
                }
            }
        }
    }
    Tensor::from_vec(&[in_h, in_w, c], out)
}
