//! Dense row-major `f64` tensors and the handful of kernels the model needs.
//!
//! Every kernel is a pure function with a fixed reduction order, so two calls
//! on equal inputs produce bitwise-equal outputs. Non-finite results are
//! reported as [`PvcError::NonFinite`] rather than propagated.

mod io;
mod rng;

pub use io::{read_pvct, read_pvct_from, write_pvct, write_pvct_to, PVCT_MAGIC, PVCT_VERSION};
pub use rng::Rng;

use crate::error::{PvcError, Result};

/// Normalization epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(PvcError::shape("new", format!("zero extent in {shape:?}")));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(PvcError::shape(
                "new",
                format!("shape {shape:?} needs {count} values, got {}", data.len()),
            ));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let count = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; count],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let count: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..count).map(&mut f).collect())
    }

    pub fn scalar_vec(values: &[f64]) -> Result<Self> {
        Tensor::new(vec![values.len()], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of range for extent {d}");
            acc * d + i
        })
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(PvcError::NonFinite { op })
        }
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        self.ensure_finite(op)?;
        Ok(self)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let count: usize = shape.iter().product();
        if count != self.len() || shape.contains(&0) {
            return Err(PvcError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd
            || axes
                .iter()
                .any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return Err(PvcError::shape(
                "permute",
                format!("axes {axes:?} for rank {nd}"),
            ));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; nd];
        for _ in 0..self.len() {
            let off: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
            data.push(self.data[off]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(PvcError::shape(
                "transpose",
                format!("rank {}", self.ndim()),
            ));
        }
        self.permute(&[1, 0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
        .checked("map")
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(PvcError::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
        .checked(op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.map(|v| v * s)
    }

    /// Adds a vector of length `last_dim` to every row.
    pub fn add_row_vector(&self, v: &Tensor) -> Result<Tensor> {
        self.row_broadcast(v, "add_row_vector", |a, b| a + b)
    }

    /// Multiplies every row elementwise by a vector of length `last_dim`.
    pub fn mul_row_vector(&self, v: &Tensor) -> Result<Tensor> {
        self.row_broadcast(v, "mul_row_vector", |a, b| a * b)
    }

    fn row_broadcast(
        &self,
        v: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let d = self.last_dim();
        if v.len() != d {
            return Err(PvcError::shape(
                op,
                format!("vector {} vs last axis {d}", v.len()),
            ));
        }
        let data = self
            .data
            .chunks(d)
            .flat_map(|row| row.iter().zip(&v.data).map(|(&a, &b)| f(a, b)))
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .checked(op)
    }

    /// Sums all rows of the `[rows, last_dim]` view into a `[last_dim]` vector.
    pub fn sum_rows(&self) -> Tensor {
        let d = self.last_dim();
        let mut acc = vec![0.0; d];
        for row in self.data.chunks(d) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        Tensor {
            shape: vec![d],
            data: acc,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(PvcError::shape(
                "dot",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn l2_distance(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "l2_distance shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Slice `[start, end)` along axis 0.
    pub fn slice0(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.shape[0] {
            return Err(PvcError::shape(
                "slice0",
                format!("[{start}, {end}) of extent {}", self.shape[0]),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Concatenates tensors along axis 0.
    pub fn concat0(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| PvcError::shape("concat0", "no parts"))?;
        let mut data = Vec::new();
        let mut lead = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(PvcError::shape(
                    "concat0",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor { shape, data })
    }

    /// Returns a copy with one element replaced. Used by finite differencing.
    pub fn with_value(&self, flat: usize, value: f64) -> Tensor {
        let mut t = self.clone();
        t.data[flat] = value;
        t
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `c[i,j] = Σ_p a[i,p]·b[p,j]`, summed in increasing `p`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(PvcError::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    Tensor {
        shape: vec![m, n],
        data: matmul_raw(&a.data, &b.data, m, k, n),
    }
    .checked("matmul")
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// Applies `x · w (+ bias)` to every row of `x`, where `w` is `[in, out]`.
/// The output keeps the leading extents of `x`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if w.ndim() != 2 || x.last_dim() != w.shape[0] {
        return Err(PvcError::shape(
            "linear",
            format!("input {:?} weight {:?}", x.shape, w.shape),
        ));
    }
    let (rows, k, n) = (x.rows(), w.shape[0], w.shape[1]);
    let mut data = matmul_raw(&x.data, &w.data, rows, k, n);
    if let Some(b) = bias {
        if b.len() != n {
            return Err(PvcError::shape(
                "linear",
                format!("bias {} vs out {n}", b.len()),
            ));
        }
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = n;
    Tensor { shape, data }.checked("linear")
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        return Err(PvcError::shape(
            "softmax",
            format!("axis {axis} of rank {}", x.ndim()),
        ));
    }
    let (outer, len, inner) = axis_layout(&x.shape, axis);
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len)
                .map(|j| x.data[at(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..len {
                let e = (x.data[at(j)] - max).exp();
                out[at(j)] = e;
                denom += e;
            }
            for j in 0..len {
                out[at(j)] /= denom;
            }
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
    .checked("softmax")
}

/// In-place softmax of a contiguous slice.
pub(crate) fn softmax_slice(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for e in v.iter_mut() {
        *e = (*e - max).exp();
        denom += *e;
    }
    for e in v.iter_mut() {
        *e /= denom;
    }
}

/// Normalizes each slice along `axis` to zero mean and unit variance, then
/// applies the optional per-element `gamma` scale and `beta` shift.
pub fn layer_norm(
    x: &Tensor,
    axis: usize,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
    eps: f64,
) -> Result<Tensor> {
    if axis >= x.ndim() {
        return Err(PvcError::shape(
            "layer_norm",
            format!("axis {axis} of rank {}", x.ndim()),
        ));
    }
    let (outer, len, inner) = axis_layout(&x.shape, axis);
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if let Some(p) = p {
            if p.len() != len {
                return Err(PvcError::shape(
                    "layer_norm",
                    format!("{name} length {} vs axis extent {len}", p.len()),
                ));
            }
        }
    }
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mean = (0..len).map(|j| x.data[at(j)]).sum::<f64>() / len as f64;
            let var = (0..len)
                .map(|j| {
                    let d = x.data[at(j)] - mean;
                    d * d
                })
                .sum::<f64>()
                / len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..len {
                let mut y = (x.data[at(j)] - mean) * inv;
                if let Some(g) = gamma {
                    y *= g.data[j];
                }
                if let Some(b) = beta {
                    y += b.data[j];
                }
                out[at(j)] = y;
            }
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
    .checked("layer_norm")
}

/// Layer norm over the last axis without affine parameters.
pub fn normalize_last(x: &Tensor) -> Result<Tensor> {
    layer_norm(x, x.ndim() - 1, None, None, LN_EPS)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

/// Derivative of `x·σ(x)`.
pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    x.map(silu_scalar)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.map(gelu_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        Rng::new(seed).gaussian_tensor(shape, 1.0)
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(PvcError::NonFinite { .. })
        ));
    }

    #[test]
    fn matmul_identity_and_projector() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let p = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&p, &b).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[3, 4], 1);
        let b = random(&[4, 2], 2);
        let mut naive = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.at(&[i, p]) * b.at(&[p, j]);
                }
                naive[i * 2 + j] = acc;
            }
        }
        let c = matmul(&a, &b).unwrap();
        assert!(c
            .data()
            .iter()
            .zip(&naive)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn matmul_shape_mismatch() {
        assert!(matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::zeros(&[3]), 0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let (x, c) = (17.25, 0.7);
        let s = softmax(&t(&[2], &[x, x + c]), 0).unwrap();
        assert!((s.data()[0] - sigmoid_scalar(-c)).abs() < 1e-15);
        assert!((s.data()[1] - sigmoid_scalar(c)).abs() < 1e-15);

        let s = softmax(&t(&[3], &[1.0, 2.0, 3.0]), 0).unwrap();
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (i, v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / denom).abs() < 1e-15);
        }
        assert!(softmax(&s, 1).is_err());
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = random(&[2, 3, 4], 9);
        let s = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let sum: f64 = (0..3).map(|j| s.at(&[o, j, i])).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let c = layer_norm(
            &Tensor::full(&[5], 3.5),
            0,
            Some(&Tensor::full(&[5], 1.0)),
            Some(&Tensor::zeros(&[5])),
            LN_EPS,
        )
        .unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        let x = random(&[5], 4);
        let beta = random(&[5], 5);
        let y = layer_norm(&x, 0, Some(&Tensor::zeros(&[5])), Some(&beta), LN_EPS).unwrap();
        assert_eq!(y, beta);

        // two-pass oracle
        let x = random(&[16], 6);
        let n = x.len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let oracle: Vec<f64> = x
            .data()
            .iter()
            .map(|v| (v - mean) / (var + LN_EPS).sqrt())
            .collect();
        let y = layer_norm(&x, 0, None, None, LN_EPS).unwrap();
        let diff = y
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn layer_norm_gamma_length_checked() {
        assert!(layer_norm(
            &Tensor::zeros(&[2, 3]),
            1,
            Some(&Tensor::zeros(&[2])),
            None,
            LN_EPS
        )
        .is_err());
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(40.0) - 40.0).abs() < 1e-12);
        // 1/(1+e^-1) to 18 digits: 0.731058578630004879
        assert!((silu_scalar(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((silu_grad_scalar(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reshape_and_transpose() {
        let x = random(&[2, 3, 4, 5], 3);
        let y = x
            .reshape(&[6, 4, 5])
            .unwrap()
            .reshape(&[2, 3, 4, 5])
            .unwrap();
        assert!(x.bitwise_eq(&y));
        assert!(x.reshape(&[7, 5]).is_err());

        let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(
            m.transpose().unwrap().data(),
            &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
        );
        assert_eq!(m.transpose().unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let x = random(&[2, 3, 4, 5], 11);
        let y = x.permute(&[0, 2, 1, 3]).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 5]);
        for a in 0..2 {
            for b in 0..4 {
                for c in 0..3 {
                    for d in 0..5 {
                        let src = ((a * 3 + c) * 4 + b) * 5 + d;
                        assert_eq!(y.at(&[a, b, c, d]).to_bits(), x.data()[src].to_bits());
                    }
                }
            }
        }
        assert!(x.permute(&[0, 0, 1, 2]).is_err());
        let back = y.permute(&[0, 2, 1, 3]).unwrap();
        assert!(back.bitwise_eq(&x));
    }

    #[test]
    fn row_broadcast_and_sums() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let v = t(&[2], &[10.0, 20.0]);
        assert_eq!(
            x.add_row_vector(&v).unwrap().data(),
            &[11.0, 22.0, 13.0, 24.0]
        );
        assert_eq!(
            x.mul_row_vector(&v).unwrap().data(),
            &[10.0, 40.0, 30.0, 80.0]
        );
        assert_eq!(x.sum_rows().data(), &[4.0, 6.0]);
    }

    #[test]
    fn linear_keeps_leading_axes() {
        let x = random(&[2, 3, 4], 21);
        let w = random(&[4, 6], 22);
        let b = random(&[6], 23);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 6]);
        let flat = matmul(&x.reshape(&[6, 4]).unwrap(), &w)
            .unwrap()
            .add_row_vector(&b)
            .unwrap();
        assert!(flat.reshape(&[2, 3, 6]).unwrap().bitwise_eq(&y));
    }

    #[test]
    fn overflow_is_an_error() {
        let x = Tensor::full(&[1, 1], 1e200);
        assert!(matches!(matmul(&x, &x), Err(PvcError::NonFinite { .. })));
    }
}
