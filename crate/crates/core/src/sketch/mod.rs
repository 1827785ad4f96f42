//! Count sketch, circular convolution and compact bilinear pooling.
//!
//! Compact bilinear pooling sketches each input with its own fixed hash
//! `h ∈ {1..d}` and sign `s ∈ {-1, +1}`, then circularly convolves the two
//! sketches. The result equals the count sketch of the outer product `x ⊗ y`
//! under the combined hash `h_x(i) + h_y(j)` (mod `d`) and sign
//! `s_x(i)·s_y(j)`, which is also a hashed bilinear form: every pairwise
//! product lands in exactly one output bucket.

pub mod fft;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{CustomOp, Rng, Tensor};

pub use fft::{circular_convolve_direct, circular_convolve_fft};

/// Fixed random hashes and signs for both inputs. Hash values are stored
/// 1-based, in `1..=d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchParams {
    pub d: usize,
    pub h_x: Vec<usize>,
    pub s_x: Vec<i8>,
    pub h_y: Vec<usize>,
    pub s_y: Vec<i8>,
}

fn check_hash(h: &[usize], s: &[i8], d: usize, what: &str) -> Result<()> {
    if h.len() != s.len() {
        return dim_err(format!("{what}: {} hashes but {} signs", h.len(), s.len()));
    }
    if let Some(bad) = h.iter().find(|&&v| v == 0 || v > d) {
        return Err(Error::Config(format!("{what}: hash value {bad} outside 1..={d}")));
    }
    if let Some(bad) = s.iter().find(|&&v| v != 1 && v != -1) {
        return Err(Error::Config(format!("{what}: sign {bad} is not ±1")));
    }
    Ok(())
}

impl SketchParams {
    pub fn new(d: usize, h_x: Vec<usize>, s_x: Vec<i8>, h_y: Vec<usize>, s_y: Vec<i8>) -> Result<Self> {
        let sp = Self { d, h_x, s_x, h_y, s_y };
        sp.validate()?;
        Ok(sp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("sketch dimension must be positive".into()));
        }
        if self.h_x.is_empty() || self.h_y.is_empty() {
            return dim_err("sketch inputs must be nonempty");
        }
        check_hash(&self.h_x, &self.s_x, self.d, "x")?;
        check_hash(&self.h_y, &self.s_y, self.d, "y")
    }

    /// Draws `h` uniformly from `1..=d` and `s` uniformly from `{-1, +1}`.
    pub fn sample(n_x: usize, n_y: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        if d == 0 || n_x == 0 || n_y == 0 {
            return Err(Error::Config(format!("sketch dims must be positive: n_x={n_x} n_y={n_y} d={d}")));
        }
        let (h_x, s_x) = draw(n_x, d, rng);
        let (h_y, s_y) = draw(n_y, d, rng);
        Self::new(d, h_x, s_x, h_y, s_y)
    }

    pub fn n_x(&self) -> usize {
        self.h_x.len()
    }

    pub fn n_y(&self) -> usize {
        self.h_y.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let sp: Self = serde_json::from_str(text)?;
        sp.validate()?;
        Ok(sp)
    }

    /// Output buckets hit by at least one term `x_i y_j`.
    pub fn reachable(&self) -> Vec<bool> {
        let mut hit = vec![false; self.d];
        for &hx in &self.h_x {
            for &hy in &self.h_y {
                hit[(hx - 1 + hy - 1) % self.d] = true;
            }
        }
        hit
    }

    /// 0-based output bucket of the bilinear term `x_i y_j`.
    pub fn combined_bucket(&self, i: usize, j: usize) -> usize {
        (self.h_x[i] - 1 + self.h_y[j] - 1) % self.d
    }

    pub fn combined_sign(&self, i: usize, j: usize) -> f64 {
        f64::from(self.s_x[i] * self.s_y[j])
    }
}

fn draw(n: usize, d: usize, rng: &mut Rng) -> (Vec<usize>, Vec<i8>) {
    let h = (0..n).map(|_| rng.below(d) + 1).collect();
    let s = (0..n).map(|_| if rng.sign() > 0.0 { 1 } else { -1 }).collect();
    (h, s)
}

/// `Ψ(v, h, s)_i = Σ_{j : h_j = i} s_j v_j`.
pub fn count_sketch(v: &Tensor, h: &[usize], s: &[i8], d: usize) -> Result<Tensor> {
    if v.len() != h.len() {
        return dim_err(format!("count sketch: input length {} but {} hashes", v.len(), h.len()));
    }
    if d == 0 {
        return Err(Error::Config("sketch dimension must be positive".into()));
    }
    check_hash(h, s, d, "count sketch")?;
    Ok(Tensor::from_vec(sketch_slice(v.data(), h, s, d)))
}

fn sketch_slice(v: &[f64], h: &[usize], s: &[i8], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for ((&x, &hi), &si) in v.iter().zip(h).zip(s) {
        out[hi - 1] += f64::from(si) * x;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMethod {
    Direct,
    Fft,
}

impl FromStr for ConvMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(ConvMethod::Direct),
            "fft" => Ok(ConvMethod::Fft),
            other => Err(Error::Config(format!("unknown convolution method '{other}'"))),
        }
    }
}

pub fn circular_convolution(a: &Tensor, b: &Tensor, method: ConvMethod) -> Result<Tensor> {
    if a.len() != b.len() {
        return dim_err(format!("circular convolution: lengths {} and {} differ", a.len(), b.len()));
    }
    let out = match method {
        ConvMethod::Direct => circular_convolve_direct(a.data(), b.data()),
        ConvMethod::Fft => circular_convolve_fft(a.data(), b.data()),
    };
    Ok(Tensor::from_vec(out))
}

/// `Φ(x, y) = Ψ(x, h_x, s_x) * Ψ(y, h_y, s_y)`, convolved by FFT.
pub fn compact_bilinear_pool(x: &Tensor, y: &Tensor, sp: &SketchParams) -> Result<Tensor> {
    if x.len() != sp.n_x() || y.len() != sp.n_y() {
        return dim_err(format!(
            "compact pooling expects x[{}], y[{}], got {:?} and {:?}",
            sp.n_x(),
            sp.n_y(),
            x.shape(),
            y.shape()
        ));
    }
    let a = count_sketch(x, &sp.h_x, &sp.s_x, sp.d)?;
    let b = count_sketch(y, &sp.h_y, &sp.s_y, sp.d)?;
    let mut out = circular_convolve_fft(a.data(), b.data());
    clear_unreachable(&mut out, &sp.reachable());
    Ok(Tensor::from_vec(out))
}

/// Zeroes buckets no term can reach. FFT roundoff leaves ~1e-17 there
/// with arbitrary sign, which a signed square root would amplify.
fn clear_unreachable(out: &mut [f64], reachable: &[bool]) {
    for (v, &r) in out.iter_mut().zip(reachable) {
        if !r {
            *v = 0.0;
        }
    }
}

/// Brute-force count sketch of the flattened outer product `x ⊗ y` under
/// the combined hash and sign.
pub fn outer_product_sketch(x: &Tensor, y: &Tensor, sp: &SketchParams) -> Result<Tensor> {
    if x.len() != sp.n_x() || y.len() != sp.n_y() {
        return dim_err("outer product sketch: input lengths do not match the sketch");
    }
    let mut out = vec![0.0; sp.d];
    for i in 0..sp.n_x() {
        for j in 0..sp.n_y() {
            out[sp.combined_bucket(i, j)] += sp.combined_sign(i, j) * x.data()[i] * y.data()[j];
        }
    }
    Ok(Tensor::from_vec(out))
}

/// The implicit `n_x × n_y` signed indicator matrix of one output bucket
/// (0-based): entry `(i, j)` is `s_x(i)·s_y(j)` when the term `x_i y_j`
/// hashes to `bucket`, else 0. `xᵀ W y` reproduces that output of
/// [`compact_bilinear_pool`].
pub fn hashed_bilinear_oracle(sp: &SketchParams, bucket: usize) -> Result<Tensor> {
    if bucket >= sp.d {
        return dim_err(format!("bucket {bucket} out of range for d = {}", sp.d));
    }
    let (nx, ny) = (sp.n_x(), sp.n_y());
    let mut w = vec![0.0; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            if sp.combined_bucket(i, j) == bucket {
                w[i * ny + j] = sp.combined_sign(i, j);
            }
        }
    }
    Tensor::matrix(nx, ny, w)
}

/// Tape primitive: row-paired compact bilinear pooling. Inputs `x: B×n_x`
/// and `y: B×n_y` (or vectors), output `B×d`. Hashes and signs are
/// constants; gradients flow to both inputs only.
pub struct CompactBilinearOp {
    params: SketchParams,
    reachable: Vec<bool>,
}

impl CompactBilinearOp {
    pub fn new(params: SketchParams) -> Self {
        let reachable = params.reachable();
        Self { params, reachable }
    }
}

/// `r[j] = Σ_k g[k] · a[(k - j) mod d]`, the adjoint of convolving with `a`.
fn circular_correlate(g: &[f64], a: &[f64]) -> Vec<f64> {
    let d = a.len();
    let reversed: Vec<f64> = (0..d).map(|m| a[(d - m) % d]).collect();
    circular_convolve_fft(g, &reversed)
}

impl CustomOp for CompactBilinearOp {
    fn name(&self) -> &str {
        "compact_bilinear"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let sp = &self.params;
        let (rows, nx) = inputs[0].dims2()?;
        let (rows_y, ny) = inputs[1].dims2()?;
        if rows != rows_y || nx != sp.n_x() || ny != sp.n_y() {
            return dim_err(format!(
                "compact pooling op: x {:?}, y {:?} against n_x={}, n_y={}",
                inputs[0].shape(),
                inputs[1].shape(),
                sp.n_x(),
                sp.n_y()
            ));
        }
        let mut out = Vec::with_capacity(rows * sp.d);
        for r in 0..rows {
            let a = sketch_slice(&inputs[0].data()[r * nx..(r + 1) * nx], &sp.h_x, &sp.s_x, sp.d);
            let b = sketch_slice(&inputs[1].data()[r * ny..(r + 1) * ny], &sp.h_y, &sp.s_y, sp.d);
            let mut row = circular_convolve_fft(&a, &b);
            clear_unreachable(&mut row, &self.reachable);
            out.extend(row);
        }
        Tensor::matrix(rows, sp.d, out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let sp = &self.params;
        let (rows, nx) = inputs[0].dims2()?;
        let ny = sp.n_y();
        let mut gx = vec![0.0; rows * nx];
        let mut gy = vec![0.0; rows * ny];
        for r in 0..rows {
            let a = sketch_slice(&inputs[0].data()[r * nx..(r + 1) * nx], &sp.h_x, &sp.s_x, sp.d);
            let b = sketch_slice(&inputs[1].data()[r * ny..(r + 1) * ny], &sp.h_y, &sp.s_y, sp.d);
            let mut g = grad.data()[r * sp.d..(r + 1) * sp.d].to_vec();
            clear_unreachable(&mut g, &self.reachable);
            let ga = circular_correlate(&g, &b);
            let gb = circular_correlate(&g, &a);
            for i in 0..nx {
                gx[r * nx + i] = f64::from(sp.s_x[i]) * ga[sp.h_x[i] - 1];
            }
            for j in 0..ny {
                gy[r * ny + j] = f64::from(sp.s_y[j]) * gb[sp.h_y[j] - 1];
            }
        }
        Ok(vec![Tensor::new(inputs[0].shape().to_vec(), gx)?, Tensor::new(inputs[1].shape().to_vec(), gy)?])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub empirical_mean: f64,
    pub empirical_variance: f64,
    pub expected_mean: f64,
    pub expected_variance: f64,
}

/// Closed-form mean `n_x n_y / d` and variance `n_x n_y (d-1) / d²` of the
/// number of bilinear terms landing in one output bucket.
pub fn expected_bucket_moments(n_x: usize, n_y: usize, d: usize) -> (f64, f64) {
    let terms = (n_x * n_y) as f64;
    let d = d as f64;
    (terms / d, terms * (d - 1.0) / (d * d))
}

/// Monte-Carlo count of bilinear terms hashed to bucket 0, over `trials`
/// fresh hash draws. Trial `t` draws from a stream derived from
/// `(rng seed, t)`.
pub fn bucket_statistics(n_x: usize, n_y: usize, d: usize, trials: usize, rng: &Rng) -> Result<BucketStats> {
    if trials == 0 {
        return Err(Error::Config("bucket statistics need at least one trial".into()));
    }
    if d == 0 || n_x == 0 || n_y == 0 {
        return Err(Error::Config(format!("sketch dims must be positive: n_x={n_x} n_y={n_y} d={d}")));
    }
    let counts: Vec<f64> = (0..trials)
        .map(|t| {
            let mut r = rng.derive_indexed("bucket-trial", t as u64);
            let mut hx = vec![0usize; d];
            let mut hy = vec![0usize; d];
            for _ in 0..n_x {
                hx[r.below(d)] += 1;
            }
            for _ in 0..n_y {
                hy[r.below(d)] += 1;
            }
            (0..d).map(|a| hx[a] * hy[(d - a) % d]).sum::<usize>() as f64
        })
        .collect();
    let (mean, var) = mean_and_variance(&counts);
    let (expected_mean, expected_variance) = expected_bucket_moments(n_x, n_y, d);
    Ok(BucketStats { empirical_mean: mean, empirical_variance: var, expected_mean, expected_variance })
}

/// Mean and unbiased sample variance (0 for a single sample).
fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerProductEstimate {
    pub mean_estimate: f64,
    pub std_error: f64,
    pub exact: f64,
}

impl InnerProductEstimate {
    /// `(mean - exact) / std_error`; 0 when the estimator has no spread.
    pub fn z_score(&self) -> f64 {
        let diff = self.mean_estimate - self.exact;
        if self.std_error == 0.0 {
            if diff.abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY.copysign(diff)
            }
        } else {
            diff / self.std_error
        }
    }
}

/// Monte-Carlo mean of `⟨Ψ(x, h, s), Ψ(y, h, s)⟩` with `(h, s)` shared by
/// both inputs and redrawn each trial.
pub fn inner_product_estimate(
    x: &Tensor,
    y: &Tensor,
    trials: usize,
    d: usize,
    rng: &Rng,
) -> Result<InnerProductEstimate> {
    if x.len() != y.len() {
        return dim_err(format!("inner product estimate: lengths {} and {} differ", x.len(), y.len()));
    }
    if trials == 0 || d == 0 {
        return Err(Error::Config("inner product estimate needs trials ≥ 1 and d ≥ 1".into()));
    }
    let n = x.len();
    let samples: Vec<f64> = (0..trials)
        .map(|t| {
            let mut r = rng.derive_indexed("inner-product-trial", t as u64);
            let (h, s) = draw(n, d, &mut r);
            let a = sketch_slice(x.data(), &h, &s, d);
            let b = sketch_slice(y.data(), &h, &s, d);
            a.iter().zip(&b).map(|(p, q)| p * q).sum()
        })
        .collect();
    let (mean, var) = mean_and_variance(&samples);
    Ok(InnerProductEstimate { mean_estimate: mean, std_error: (var / trials as f64).sqrt(), exact: x.dot(y)? })
}
