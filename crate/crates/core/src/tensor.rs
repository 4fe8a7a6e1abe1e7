//! Dense row-major tensors, the parameter store, and the matrix kernels the
//! layers are built from.
//!
//! Training runs in `f32`. Everything is generic over [`Real`] so the same
//! code can be instantiated in `f64` for tight gradient checks.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("loss is not finite ({value})")]
    NonFiniteLoss { value: f64 },
    #[error("cannot normalize a zero vector")]
    ZeroVector,
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Floating point scalar the numeric code is generic over (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("Tensor::from_rows", "ragged rows"));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::lit(rng.normal() * std)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = F::zero());
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(shape_err(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        axpy(F::one(), &other.data, &mut self.data);
        Ok(())
    }

    pub fn scale(&mut self, s: F) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// Converts every element to another scalar type.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::lit(x.as_f64())).collect(),
        }
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.shape.len() != 2 {
            return Err(shape_err(
                op,
                format!("expected a matrix, got {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

// Kernels. All accumulate into the output slice.

/// `y += alpha * x`
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += a0 x0 + a1 x1 + a2 x2 + a3 x3`
#[inline]
fn axpy4<F: Real>(a: [F; 4], x: [&[F]; 4], y: &mut [F]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for j in 0..n {
        y[j] += a[0] * x0[j] + a[1] * x1[j] + a[2] * x2[j] + a[3] * x3[j];
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
///
/// Rows of `a` are processed in blocks so that each group of four rows of
/// `b` is read once per block; every output element still sees the same
/// sequence of operations as in a row-at-a-time product.
pub fn gemm_acc<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    const BLOCK: usize = 8;
    let k4 = k - k % 4;
    for i0 in (0..m).step_by(BLOCK) {
        let rows = i0..(i0 + BLOCK).min(m);
        for p in (0..k4).step_by(4) {
            let bs = [
                &b[p * n..(p + 1) * n],
                &b[(p + 1) * n..(p + 2) * n],
                &b[(p + 2) * n..(p + 3) * n],
                &b[(p + 3) * n..(p + 4) * n],
            ];
            for i in rows.clone() {
                let a_row = &a[i * k..(i + 1) * k];
                axpy4(
                    [a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]],
                    bs,
                    &mut c[i * n..(i + 1) * n],
                );
            }
        }
        for i in rows {
            for p in k4..k {
                axpy(
                    a[i * k + p],
                    &b[p * n..(p + 1) * n],
                    &mut c[i * n..(i + 1) * n],
                );
            }
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn gemm_at_b_acc<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    let m4 = m - m % 4;
    for i in (0..m4).step_by(4) {
        let rows = [
            &b[i * n..(i + 1) * n],
            &b[(i + 1) * n..(i + 2) * n],
            &b[(i + 2) * n..(i + 3) * n],
            &b[(i + 3) * n..(i + 4) * n],
        ];
        for p in 0..k {
            let coef = [
                a[i * k + p],
                a[(i + 1) * k + p],
                a[(i + 2) * k + p],
                a[(i + 3) * k + p],
            ];
            axpy4(coef, rows, &mut c[p * n..(p + 1) * n]);
        }
    }
    for i in m4..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], b_row, &mut c[p * n..(p + 1) * n]);
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub fn gemm_a_bt_acc<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] += dot(a_row, &b[p * n..(p + 1) * n]);
        }
    }
}

pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
    let (m, k) = a.require_matrix("matmul")?;
    let (k2, n) = b.require_matrix("matmul")?;
    if k != k2 {
        return Err(shape_err("matmul", format!("{m}x{k} times {k2}x{n}")));
    }
    let mut c = Tensor::zeros(&[m, n]);
    gemm_acc(m, k, n, &a.data, &b.data, &mut c.data);
    Ok(c)
}

/// Accumulates `dA += dC * B^T` and `dB += A^T * dC`.
pub fn matmul_backward<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    dc: &Tensor<F>,
    da: &mut Tensor<F>,
    db: &mut Tensor<F>,
) -> Result<(), TensorError> {
    let (m, k) = a.require_matrix("matmul_backward")?;
    let (_, n) = b.require_matrix("matmul_backward")?;
    if dc.shape != [m, n] || da.shape != a.shape || db.shape != b.shape {
        return Err(shape_err(
            "matmul_backward",
            "gradient shapes do not match operands",
        ));
    }
    gemm_a_bt_acc(m, k, n, &dc.data, &b.data, &mut da.data);
    gemm_at_b_acc(m, k, n, &a.data, &dc.data, &mut db.data);
    Ok(())
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let mut y = x.clone();
    let c = x.cols();
    if c == 0 {
        return y;
    }
    for row in y.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    y
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Given softmax output `y` and upstream `dy`, returns `dx`.
pub fn softmax_rows_backward<F: Real>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = Tensor::zeros(y.shape());
    let c = y.cols();
    if c == 0 {
        return dx;
    }
    for ((yr, dyr), dxr) in y
        .data
        .chunks(c)
        .zip(dy.data.chunks(c))
        .zip(dx.data.chunks_mut(c))
    {
        let s = dot(yr, dyr);
        for j in 0..c {
            dxr[j] = yr[j] * (dyr[j] - s);
        }
    }
    dx
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Named parameters with paired gradient buffers, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F = f32> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Panics on a duplicate name; parameter names are fixed by the model
    /// layout, so a clash is a programming error.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].grad
    }

    /// Value and gradient of one parameter, borrowed together.
    pub fn split(&mut self, id: ParamId) -> (&Tensor<F>, &mut Tensor<F>) {
        let p = &mut self.params[id.0];
        (&p.value, &mut p.grad)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill_zero();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Same names and values in another precision, gradients zeroed.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.cast());
        }
        out
    }
}
