//! Dense row-major `f64` tensors.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Pointwise operations. Binary kinds accept a right operand of the same
/// shape, or a vector broadcast over the last axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Tanh,
    Sigmoid,
    Mul,
    Add,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Mul | Elementwise::Add)
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(Error::EmptyInput("tensor shape has a zero-length axis"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&s| s > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: &[f64]) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor {
            shape: vec![data.len()],
            data: data.to_vec(),
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn matrix<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        assert!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].as_ref().len();
        assert!(cols > 0, "matrix needs at least one column");
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged matrix rows");
            data.extend_from_slice(r.as_ref());
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn from `Uniform(lo, hi)` in row-major order.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SplitMix64) -> Self {
        let mut t = Self::zeros(shape);
        for x in &mut t.data {
            *x = rng.uniform(lo, hi);
        }
        t
    }

    /// `Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` for a `[rows x cols]`
    /// weight, where `fan_in = cols`.
    pub fn fan_in_uniform(rows: usize, cols: usize, rng: &mut SplitMix64) -> Self {
        let bound = 1.0 / libm::sqrt(cols as f64);
        Self::uniform(&[rows, cols], -bound, bound, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&s| s == 0) {
            return Err(Error::dims("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn as_matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => (self.rows(), self.cols()),
        }
    }

    /// `[m x k] · [k x n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dims("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// `[m x k] · [n x k]ᵀ`, the natural form for applying an `[out x in]`
    /// weight to a batch of row vectors.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[1] {
            return Err(Error::dims("matmul_t", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[0]);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out.push(a_row.iter().zip(b_row).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// `[k x m]ᵀ · [k x n]`.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[0] != other.shape[0] {
            return Err(Error::dims("t_matmul", &self.shape, &other.shape));
        }
        let (k, m, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = self.as_matrix_dims();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    /// True when `other` can be combined pointwise with `self`: same shape,
    /// or a vector matching the last axis.
    pub fn broadcastable(&self, other: &Tensor) -> bool {
        self.shape == other.shape || (other.rank() == 1 && other.shape[0] == self.cols())
    }

    fn zip_broadcast(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape == other.shape {
            return Ok(Tensor {
                shape: self.shape.clone(),
                data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            });
        }
        if other.rank() == 1 && other.shape[0] == self.cols() {
            let c = self.cols();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data: self
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| f(a, other.data[i % c]))
                    .collect(),
            });
        }
        Err(Error::dims(op, &self.shape, &other.shape))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|x| alpha * x)
    }

    pub fn relu(&self) -> Tensor {
        self.map(relu)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(libm::tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn elementwise(&self, kind: Elementwise, rhs: Option<&Tensor>) -> Result<Tensor> {
        match (kind, rhs) {
            (Elementwise::Relu, None) => Ok(self.relu()),
            (Elementwise::Tanh, None) => Ok(self.tanh()),
            (Elementwise::Sigmoid, None) => Ok(self.sigmoid()),
            (Elementwise::Add, Some(b)) => self.add(b),
            (Elementwise::Mul, Some(b)) => self.mul(b),
            (k, _) => Err(Error::Contract(format!(
                "{k:?} takes {} operand(s)",
                if k.is_binary() { 2 } else { 1 }
            ))),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sums a `[.. x c]` tensor down to a length-`c` vector (reverse of
    /// broadcasting over the last axis).
    pub fn sum_rows(&self) -> Tensor {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for chunk in self.data.chunks(c) {
            for (o, &x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        Tensor {
            shape: vec![c],
            data: out,
        }
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax_rows(&self) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(c) {
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|&x| x - lse));
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.rank() != 2 || start >= end || end > self.shape[0] {
            return Err(Error::Contract(format!(
                "row range {start}..{end} out of bounds for {:?}",
                self.shape
            )));
        }
        let c = self.shape[1];
        Tensor::new(&[end - start, c], self.data[start * c..end * c].to_vec())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    /// Row-major decimal text, 17 significant digits each, which parses back
    /// to the identical `f64`.
    pub fn to_decimal_strings(&self) -> Vec<String> {
        self.data.iter().map(|&x| format_f64(x)).collect()
    }

    pub fn from_decimal_strings<S: AsRef<str>>(shape: &[usize], text: &[S]) -> Result<Tensor> {
        let data = text
            .iter()
            .map(|s| {
                s.as_ref()
                    .parse::<f64>()
                    .map_err(|_| Error::Contract(format!("`{}` is not a decimal number", s.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }
}

/// Formats with 17 significant digits (`d.dddddddddddddddde±x`).
pub fn format_f64(x: f64) -> String {
    if x == 0.0 {
        // keep the sign of negative zero
        return if x.is_sign_negative() { "-0e0".into() } else { "0e0".into() };
    }
    format!("{x:.16e}")
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Numerically stable `log Σ exp(x_i)`; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + libm::log(xs.iter().map(|&x| libm::exp(x - m)).sum::<f64>())
}

/// `log(exp(a) + exp(b))`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + libm::log1p(libm::exp(lo - hi))
}
