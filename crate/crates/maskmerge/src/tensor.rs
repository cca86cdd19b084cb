//! Dense row-major f64 tensors and the small set of operations the encoder,
//! gradient engine, and merge arithmetic need.
//!
//! Every constructor and operation validates that the result is finite;
//! NaN/Inf is surfaced as [`Error::NonFinite`] instead of propagating.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Running count of f64 elements allocated through tensor constructors.
/// Used by tests to bound the working set of gradient passes.
static ALLOC_F64: AtomicU64 = AtomicU64::new(0);

/// Total f64 elements allocated by tensor constructors since process start.
pub fn alloc_f64_total() -> u64 {
    ALLOC_F64.load(Ordering::Relaxed)
}

/// Dense numeric array with shape; values are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        ALLOC_F64.fetch_add(data.len() as u64, Ordering::Relaxed);
        Tensor { shape, data }
    }

    /// Build a tensor from a flat row-major buffer, validating shape and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            });
        }
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("zero-sized dimension in {shape:?}"),
            });
        }
        let t = Tensor::raw(shape.to_vec(), data);
        t.check_finite("from_vec")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::raw(shape.to_vec(), vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        let t = Tensor::raw(shape.to_vec(), vec![value; numel]);
        t.check_finite("full")?;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows when viewed as a matrix (2-D only).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns when viewed as a matrix (2-D only).
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let w = self.shape[1];
        self.data[r * w + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.shape[1];
        &mut self.data[r * w..(r + 1) * w]
    }

    fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            })
        }
    }

    /// Standard matrix product, row-major: (m,k) x (k,n) -> (m,n).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.cols() != other.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape, other.shape),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = self.row(i);
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate().take(k) {
                let b_row = other.row(p);
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let t = Tensor::raw(vec![m, n], out);
        t.check_finite("matmul")?;
        Ok(t)
    }

    /// a x b^T: (m,k) x (n,k) -> (m,n). Avoids materializing transposes in backprop.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.cols() != other.cols() {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("{:?} x {:?}^T", self.shape, other.shape),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), other.rows());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = self.row(i);
            for j in 0..n {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a_row[p] * b_row[p];
                }
                out[i * n + j] = acc;
            }
        }
        let t = Tensor::raw(vec![m, n], out);
        t.check_finite("matmul_nt")?;
        Ok(t)
    }

    /// a^T x b: (k,m) x (k,n) -> (m,n).
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.rows() != other.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                detail: format!("{:?}^T x {:?}", self.shape, other.shape),
            });
        }
        let (k, m, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = self.row(p);
            let b_row = other.row(p);
            for (i, &a) in a_row.iter().enumerate().take(m) {
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let t = Tensor::raw(vec![m, n], out);
        t.check_finite("matmul_tn")?;
        Ok(t)
    }

    /// Matrix-vector product: (m,n) x (n,) -> (m,).
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || v.shape.len() != 1 || self.cols() != v.numel() {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                detail: format!("{:?} x {:?}", self.shape, v.shape),
            });
        }
        let mut out = vec![0.0; self.rows()];
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.row(i);
            *o = row.iter().zip(&v.data).map(|(a, b)| a * b).sum();
        }
        let t = Tensor::raw(vec![self.rows()], out);
        t.check_finite("matvec")?;
        Ok(t)
    }

    /// Vector-matrix product: (m,) x (m,n) -> (n,).
    pub fn vecmat(v: &Tensor, m: &Tensor) -> Result<Tensor> {
        if !m.is_matrix() || v.shape.len() != 1 || v.numel() != m.rows() {
            return Err(Error::ShapeMismatch {
                op: "vecmat",
                detail: format!("{:?} x {:?}", v.shape, m.shape),
            });
        }
        let n = m.cols();
        let mut out = vec![0.0; n];
        for (p, &a) in v.data.iter().enumerate() {
            let row = m.row(p);
            for (o, &b) in out.iter_mut().zip(row) {
                *o += a * b;
            }
        }
        let t = Tensor::raw(vec![n], out);
        t.check_finite("vecmat")?;
        Ok(t)
    }

    /// Outer product of two vectors: (m,) x (n,) -> (m,n).
    pub fn outer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 1 || b.shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "outer",
                detail: format!("{:?} x {:?}", a.shape, b.shape),
            });
        }
        let (m, n) = (a.numel(), b.numel());
        let mut out = Vec::with_capacity(m * n);
        for &x in &a.data {
            for &y in &b.data {
                out.push(x * y);
            }
        }
        let t = Tensor::raw(vec![m, n], out);
        t.check_finite("outer")?;
        Ok(t)
    }

    pub fn transposed(&self) -> Result<Tensor> {
        if !self.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "transposed",
                detail: format!("{:?} is not 2-D", self.shape),
            });
        }
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::raw(vec![n, m], out))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        let t = Tensor::raw(self.shape.clone(), data);
        t.check_finite("add")?;
        Ok(t)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        let t = Tensor::raw(self.shape.clone(), data);
        t.check_finite("sub")?;
        Ok(t)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        let t = Tensor::raw(self.shape.clone(), data);
        t.check_finite("mul")?;
        Ok(t)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a * c).collect();
        let t = Tensor::raw(self.shape.clone(), data);
        t.check_finite("scale")?;
        Ok(t)
    }

    /// self += alpha * other, in place. Shapes must match.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        self.check_finite("axpy")
    }

    /// Add a vector to every row of a matrix: (m,n) + (n,).
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || bias.shape.len() != 1 || bias.numel() != self.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                detail: format!("{:?} + {:?}", self.shape, bias.shape),
            });
        }
        let n = self.cols();
        let mut data = self.data.clone();
        for row in data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        let t = Tensor::raw(self.shape.clone(), data);
        t.check_finite("add_row")?;
        Ok(t)
    }

    /// Sum over rows of a matrix: (m,n) -> (n,).
    pub fn col_sum(&self) -> Result<Tensor> {
        if !self.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "col_sum",
                detail: format!("{:?} is not 2-D", self.shape),
            });
        }
        let n = self.cols();
        let mut out = vec![0.0; n];
        for row in self.data.chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let t = Tensor::raw(vec![n], out);
        t.check_finite("col_sum")?;
        Ok(t)
    }

    /// Sum of the elementwise product; shapes must match.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum();
        if s.is_finite() {
            Ok(s)
        } else {
            Err(Error::NonFinite { op: "dot" })
        }
    }

    /// Softmax along `axis`, computed with max-subtraction so large inputs
    /// cannot overflow.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {} out of range for {:?}", axis, self.shape),
            });
        }
        self.check_finite("softmax")?;
        let lane = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut data = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut max = f64::NEG_INFINITY;
                for s in 0..lane {
                    max = max.max(data[base + s * inner]);
                }
                let mut sum = 0.0;
                for s in 0..lane {
                    let idx = base + s * inner;
                    let e = (data[idx] - max).exp();
                    data[idx] = e;
                    sum += e;
                }
                for s in 0..lane {
                    data[base + s * inner] /= sum;
                }
            }
        }
        let t = Tensor::raw(self.shape.clone(), data);
        t.check_finite("softmax")?;
        Ok(t)
    }

    /// GELU with the exact erf-based definition.
    pub fn gelu(&self) -> Result<Tensor> {
        self.check_finite("gelu")?;
        let data = self.data.iter().map(|&x| gelu_scalar(x)).collect();
        let t = Tensor::raw(self.shape.clone(), data);
        t.check_finite("gelu")?;
        Ok(t)
    }

    /// Layer normalization over the last axis of a matrix, then gain/bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (out, _, _) = self.layer_norm_parts(gain, bias, eps)?;
        Ok(out)
    }

    /// Layer norm that also returns the normalized rows and per-row 1/std,
    /// which the backward pass needs.
    pub(crate) fn layer_norm_parts(
        &self,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Tensor, Vec<f64>)> {
        if !self.is_matrix()
            || gain.shape.len() != 1
            || bias.shape.len() != 1
            || gain.numel() != self.cols()
            || bias.numel() != self.cols()
        {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.shape, gain.shape, bias.shape
                ),
            });
        }
        self.check_finite("layer_norm")?;
        let (m, n) = (self.rows(), self.cols());
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = self.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = gain.data[j] * h + bias.data[j];
            }
        }
        let out = Tensor::raw(self.shape.clone(), out);
        out.check_finite("layer_norm")?;
        let xhat = Tensor::raw(self.shape.clone(), xhat);
        Ok((out, xhat, inv_std))
    }

    /// Raw little-endian IEEE-754 bytes, row-major, no padding. This is the
    /// payload layout used by checkpoint files.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Inverse of [`Tensor::to_le_bytes`].
    pub fn from_le_bytes(shape: &[usize], bytes: &[u8]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if bytes.len() != numel * 8 {
            return Err(Error::ShapeMismatch {
                op: "from_le_bytes",
                detail: format!("shape {:?} wants {} bytes, got {}", shape, numel * 8, bytes.len()),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        Tensor::from_vec(shape, data)
    }
}

/// Exact GELU: x/2 * (1 + erf(x / sqrt(2))).
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Derivative of exact GELU: Phi(x) + x * phi(x).
#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * phi
}
