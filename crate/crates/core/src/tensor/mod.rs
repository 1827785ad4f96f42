//! Dense `f64` tensors, seeded randomness, the reverse-mode tape and the
//! finite-difference gradient checker.
//!
//! Vectors are 1-D tensors. Matrix routines treat a 1-D tensor of length `n`
//! as a single `1 × n` row, so a vector can flow straight into `matmul`
//! without an explicit reshape.

mod gradcheck;
mod io;
mod rng;
mod tape;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

pub use gradcheck::{analytic_gradients, grad_check, max_relative_error, numeric_gradients, GradFn};
pub use io::{read_tensor, read_tensor_file, write_tensor, write_tensor_file, MAGIC, VERSION};
pub use rng::{Rng, ALGORITHM as RNG_ALGORITHM};
pub use tape::{CustomOp, Gradients, Tape, Var};

/// Lower clamp for the signed square root derivative and the l2 norm.
pub const TINY: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("extents must be positive, got {shape:?}"));
        }
        if numel(&shape) != data.len() {
            return dim_err(format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be nonempty");
        Self { shape: vec![data.len()], data }
    }

    /// Builds a `rows × cols` matrix from row-major values.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "extents must be positive");
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// `(rows, cols)` under the row-vector convention: scalars and vectors
    /// are a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [] => Ok((1, 1)),
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => dim_err(format!("expected a vector or matrix, got shape {s:?}")),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        let (_, c) = self.dims2().expect("matrix");
        self.data[i * c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2().expect("matrix");
        &self.data[i * c..(i + 1) * c]
    }

    /// Column `j` of a matrix, copied out.
    pub fn col(&self, j: usize) -> Vec<f64> {
        let (r, c) = self.dims2().expect("matrix");
        (0..r).map(|i| self.data[i * c + j]).collect()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} values", self.data.len());
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_with(&self, other: &Self, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!("{what}: shapes {:?} and {:?} differ", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.len() != other.len() {
            return dim_err(format!("dot: lengths {} and {} differ", self.len(), other.len()));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.len() != other.len() {
            return dim_err(format!("compare: shapes {:?} and {:?} differ", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product. Vectors act as single rows.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return dim_err(format!("matmul: inner extents differ for {:?} x {:?}", self.shape, other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = self.data.clone();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out })
    }

    pub fn activation(&self, kind: Activation) -> Self {
        self.map(|v| kind.apply(v))
    }

    /// Concatenates along the last axis. All parts must agree on the row
    /// count (vectors count as one row).
    pub fn concat(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let (rows, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                return dim_err(format!("concat: row counts {rows} and {r} differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        let vector_out = rows == 1 && parts.iter().all(|p| p.rank() <= 1);
        if vector_out {
            Self::new(vec![total], data)
        } else {
            Self::matrix(rows, total, data)
        }
    }

    /// Replicates a single row `n` times: the `x · 𝟙ᵀ` broadcast used to
    /// fuse one question vector with every lattice cell.
    pub fn repeat_rows(&self, n: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if r != 1 {
            return dim_err(format!("repeat_rows expects one row, got shape {:?}", self.shape));
        }
        if n == 0 {
            return dim_err("repeat_rows: count must be positive");
        }
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Self::matrix(n, c, data)
    }

    /// Divides each row by its Euclidean norm, clamped below at [`TINY`].
    pub fn l2_normalize_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = self.data.clone();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(TINY);
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self { shape: self.shape.clone(), data: out })
    }

    /// Inverted dropout mask: kept entries carry `1/(1-p)`, dropped ones 0.
    pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate must be in [0,1), got {p}")));
        }
        let keep = 1.0 / (1.0 - p);
        let data = (0..numel(shape)).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        Self::new(shape.to_vec(), data)
    }

    pub fn dropout(&self, p: f64, rng: &mut Rng) -> Result<Self> {
        let mask = Self::dropout_mask(&self.shape, p, rng)?;
        self.hadamard(&mask)
    }

    /// Flat argmax; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
    Relu,
    SignedSqrt,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::SignedSqrt => x.signum() * x.abs().sqrt(),
        }
    }

    /// Derivative given the input `x` and the output `y = apply(x)`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::SignedSqrt => 0.5 / x.abs().max(TINY).sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::SignedSqrt => "signed_sqrt",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "identity" => Activation::Identity,
            "relu" => Activation::Relu,
            "signed_sqrt" => Activation::SignedSqrt,
            other => return Err(Error::Config(format!("unknown activation kind '{other}'"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_cases() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);

        let r = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[11.0]);

        let z = Tensor::zeros(&[2, 3]);
        let any = Tensor::matrix(3, 4, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(z.matmul(&any).unwrap(), Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn hadamard_cases() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(x.hadamard(&Tensor::ones(&[3])).unwrap(), x);
        let p = Tensor::from_vec(vec![1.0, 2.0]).hadamard(&Tensor::from_vec(vec![3.0, 4.0]));
        assert_eq!(p.unwrap().data(), &[3.0, 8.0]);
        assert_eq!(x.hadamard(&Tensor::zeros(&[3])).unwrap(), Tensor::zeros(&[3]));
        assert!(x.hadamard(&Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn softmax_cases() {
        let s = Tensor::zeros(&[1, 4]).softmax_rows().unwrap();
        assert!(s.data().iter().all(|&v| close(v, 0.25, 1e-15)));

        let s = Tensor::from_vec(vec![0.0, 3f64.ln()]).softmax_rows().unwrap();
        assert!(close(s.data()[0], 0.25, 1e-12) && close(s.data()[1], 0.75, 1e-12));

        let row = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0]);
        let shifted = row.map(|v| v + 17.25);
        let d = row.softmax_rows().unwrap().max_abs_diff(&shifted.softmax_rows().unwrap());
        assert!(d.unwrap() < 1e-12);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let s = Tensor::from_vec(vec![1000.0, 1000.0]).softmax_rows().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn activation_cases() {
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::SignedSqrt.apply(-4.0), -2.0);
        assert_eq!(Activation::Identity.apply(1.25), 1.25);
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert!(Activation::SignedSqrt.derivative(0.0, 0.0).is_finite());
        assert!(matches!("cosh".parse::<Activation>(), Err(Error::Config(_))));
        for k in ["tanh", "sigmoid", "identity", "relu", "signed_sqrt"] {
            assert_eq!(k.parse::<Activation>().unwrap().name(), k);
        }
    }

    #[test]
    fn argmax_lowest_index_on_ties() {
        assert_eq!(Tensor::from_vec(vec![1.0, 1.0, 0.0]).argmax(), 0);
        assert_eq!(Tensor::from_vec(vec![0.1, 0.8, 0.1]).argmax(), 1);
        assert_eq!(Tensor::from_vec(vec![0.0, 2.0, 2.0]).argmax(), 1);
    }

    #[test]
    fn concat_and_repeat() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![3.0]);
        let c = Tensor::concat(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0]);

        let r = a.repeat_rows(3).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.row(2), &[1.0, 2.0]);
        assert!(Tensor::zeros(&[2, 2]).repeat_rows(2).is_err());
    }

    #[test]
    fn l2_normalize_handles_zero_rows() {
        let t = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let n = t.l2_normalize_rows().unwrap();
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert_eq!(n.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn dropout_is_inverted() {
        let mut rng = Rng::new(3);
        let m = Tensor::dropout_mask(&[10_000], 0.5, &mut rng).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = m.sum() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05);
        assert!(Tensor::dropout_mask(&[2], 1.0, &mut rng).is_err());
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
