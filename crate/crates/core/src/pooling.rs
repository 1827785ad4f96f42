//! Bilinear pooling: the exact form `f_i = xᵀW_i y + b_i` and its low-rank
//! Hadamard factorization `f = Pᵀ(Uᵀx ∘ Vᵀy) + b` with the full-model,
//! nonlinear and shortcut variants.
//!
//! Every low-rank form is evaluated by recording it on a [`Tape`], so the
//! plain functions here and the differentiable training path share one
//! arithmetic sequence.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::store::Bundle;
use crate::tensor::{Activation, Rng, Tape, Tensor, Var};

/// Exact bilinear pooling weights: `w` is `L × N × M`, `b` has length `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullBilinearParams {
    w: Tensor,
    b: Tensor,
}

impl FullBilinearParams {
    pub fn new(w: Tensor, b: Tensor) -> Result<Self> {
        let [l, _, _] = w.shape() else {
            return dim_err(format!("full bilinear weights must be L×N×M, got {:?}", w.shape()));
        };
        if b.shape() != [*l] {
            return dim_err(format!("bias shape {:?} does not match L = {l}", b.shape()));
        }
        Ok(Self { w, b })
    }

    /// `(L, N, M)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.w.shape();
        (s[0], s[1], s[2])
    }

    pub fn weights(&self) -> &Tensor {
        &self.w
    }

    pub fn bias(&self) -> &Tensor {
        &self.b
    }

    pub fn count_params(&self) -> u64 {
        let (l, n, m) = self.dims();
        (l * (n * m + 1)) as u64
    }
}

/// `f_i = Σ_j Σ_k w_ijk x_j y_k + b_i`, by explicit loops.
pub fn full_bilinear(params: &FullBilinearParams, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (l, n, m) = params.dims();
    if x.len() != n || y.len() != m {
        return dim_err(format!("full bilinear expects x[{n}], y[{m}], got {:?} and {:?}", x.shape(), y.shape()));
    }
    let w = params.w.data();
    let out = (0..l)
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                for k in 0..m {
                    acc += w[(i * n + j) * m + k] * x.data()[j] * y.data()[k];
                }
            }
            acc + params.b.data()[i]
        })
        .collect();
    Ok(Tensor::from_vec(out))
}

/// Whether `d ≤ min(N, M)` is enforced at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    Restricted,
    Free,
}

/// Where the activation sits relative to the Hadamard product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// `Pᵀ(σ(Uᵀx) ∘ σ(Vᵀy)) + b`
    Before,
    /// `Pᵀσ(Uᵀx ∘ Vᵀy) + b`
    After,
    /// `Pᵀ(Uᵀx ∘ Vᵀy) + b`
    None,
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "before" => Ok(Placement::Before),
            "after" => Ok(Placement::After),
            "none" => Ok(Placement::None),
            other => Err(Error::Config(format!("unknown placement '{other}'"))),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Before => "before",
            Placement::After => "after",
            Placement::None => "none",
        })
    }
}

/// Low-rank bilinear pooling parameters: `U: N×d`, `V: M×d`, `P: d×c`,
/// `b: c`, optional input biases `b_x, b_y: d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingParams {
    pub u: Tensor,
    pub v: Tensor,
    pub p: Tensor,
    pub b: Tensor,
    pub bx: Option<Tensor>,
    pub by: Option<Tensor>,
    pub activation: Activation,
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => dim_err(format!("{what} must be a matrix, got shape {s:?}")),
    }
}

impl PoolingParams {
    /// Free-rank construction; only shapes are checked.
    pub fn new(u: Tensor, v: Tensor, p: Tensor, b: Tensor) -> Result<Self> {
        let params = Self { u, v, p, b, bx: None, by: None, activation: Activation::Identity };
        params.validate()?;
        Ok(params)
    }

    /// Construction that also enforces `d ≤ min(N, M)`.
    pub fn rank_restricted(u: Tensor, v: Tensor, p: Tensor, b: Tensor) -> Result<Self> {
        let params = Self::new(u, v, p, b)?;
        params.check_mode(RankMode::Restricted)?;
        Ok(params)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_input_biases(mut self, bx: Tensor, by: Tensor) -> Result<Self> {
        self.bx = Some(bx);
        self.by = Some(by);
        self.validate()?;
        Ok(self)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(
        n: usize,
        m: usize,
        d: usize,
        c: usize,
        mode: RankMode,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n == 0 || m == 0 || d == 0 || c == 0 {
            return Err(Error::Config(format!("pooling dims must be positive: N={n} M={m} d={d} c={c}")));
        }
        let params = Self {
            u: rng.glorot(n, d),
            v: rng.glorot(m, d),
            p: rng.glorot(d, c),
            b: Tensor::zeros(&[c]),
            bx: None,
            by: None,
            activation,
        };
        params.check_mode(mode)?;
        Ok(params)
    }

    pub fn check_mode(&self, mode: RankMode) -> Result<()> {
        let (n, m, d, _) = self.dims();
        if mode == RankMode::Restricted && d > n.min(m) {
            return Err(Error::Config(format!("rank-restricted pooling needs d ≤ min(N, M), got d={d}, N={n}, M={m}")));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let (_, d) = matrix_dims(&self.u, "U")?;
        let (_, dv) = matrix_dims(&self.v, "V")?;
        let (dp, c) = matrix_dims(&self.p, "P")?;
        if dv != d || dp != d {
            return dim_err(format!(
                "U, V, P disagree on d: {:?}, {:?}, {:?}",
                self.u.shape(),
                self.v.shape(),
                self.p.shape()
            ));
        }
        if self.b.shape() != [c] {
            return dim_err(format!("b must have length c = {c}, got {:?}", self.b.shape()));
        }
        for (name, bias) in [("b_x", &self.bx), ("b_y", &self.by)] {
            if let Some(t) = bias {
                if t.shape() != [d] {
                    return dim_err(format!("{name} must have length d = {d}, got {:?}", t.shape()));
                }
            }
        }
        Ok(())
    }

    /// `(N, M, d, c)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.u.shape();
        (s[0], self.v.shape()[0], s[1], self.p.shape()[1])
    }

    pub fn has_input_biases(&self) -> bool {
        self.bx.is_some() || self.by.is_some()
    }

    /// `d·N + d·M + d·c + c`; input biases are not counted.
    pub fn count_params(&self) -> u64 {
        let (n, m, d, c) = self.dims();
        (d * n + d * m + d * c + c) as u64
    }

    pub fn leaves(&self, tape: &mut Tape) -> PoolingVars {
        PoolingVars {
            u: tape.leaf(self.u.clone()),
            v: tape.leaf(self.v.clone()),
            p: tape.leaf(self.p.clone()),
            b: tape.leaf(self.b.clone()),
            bx: self.bx.as_ref().map(|t| tape.leaf(t.clone())),
            by: self.by.as_ref().map(|t| tape.leaf(t.clone())),
        }
    }

    pub fn to_bundle(&self) -> Bundle {
        let (n, m, d, c) = self.dims();
        let mut bundle = Bundle::new(serde_json::json!({
            "kind": "low_rank_pooling",
            "dims": {"N": n, "M": m, "d": d, "c": c},
            "activation": self.activation,
        }));
        bundle.insert("U", self.u.clone());
        bundle.insert("V", self.v.clone());
        bundle.insert("P", self.p.clone());
        bundle.insert("b", self.b.clone());
        if let Some(t) = &self.bx {
            bundle.insert("b_x", t.clone());
        }
        if let Some(t) = &self.by {
            bundle.insert("b_y", t.clone());
        }
        bundle
    }

    pub fn from_bundle(mut bundle: Bundle) -> Result<Self> {
        let activation = bundle
            .meta
            .get("activation")
            .cloned()
            .map(serde_json::from_value::<Activation>)
            .transpose()?
            .unwrap_or(Activation::Identity);
        let params = Self {
            u: bundle.take("U")?,
            v: bundle.take("V")?,
            p: bundle.take("P")?,
            b: bundle.take("b")?,
            bx: bundle.tensors.remove("b_x"),
            by: bundle.tensors.remove("b_y"),
            activation,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Tape handles for [`PoolingParams`].
#[derive(Debug, Clone, Copy)]
pub struct PoolingVars {
    pub u: Var,
    pub v: Var,
    pub p: Var,
    pub b: Var,
    pub bx: Option<Var>,
    pub by: Option<Var>,
}

fn add_row_bias(t: &mut Tape, z: Var, bias: Var) -> Result<Var> {
    let rows = t.value(z).dims2()?.0;
    let shape = t.value(z).shape().to_vec();
    let rep = t.repeat_rows(bias, rows)?;
    let rep = t.reshape(rep, &shape)?;
    t.add(z, rep)
}

/// Pre-bias fused term `Pᵀ(· ∘ ·)` for inputs stacked as rows (`x: B×N`,
/// `y: B×M`), with input biases applied when present.
pub fn fused_graph(
    t: &mut Tape,
    w: &PoolingVars,
    x: Var,
    y: Var,
    activation: Activation,
    placement: Placement,
) -> Result<Var> {
    fused_graph_with(t, w, x, y, activation, placement, None)
}

/// [`fused_graph`] with optional inverted dropout `(p, rng)` on the `x`
/// branch, after its activation when the activation precedes the product.
pub fn fused_graph_with(
    t: &mut Tape,
    w: &PoolingVars,
    x: Var,
    y: Var,
    activation: Activation,
    placement: Placement,
    x_dropout: Option<(f64, &mut Rng)>,
) -> Result<Var> {
    let mut px = t.matmul(x, w.u)?;
    if let Some(bx) = w.bx {
        px = add_row_bias(t, px, bx)?;
    }
    let mut py = t.matmul(y, w.v)?;
    if let Some(by) = w.by {
        py = add_row_bias(t, py, by)?;
    }
    let joint = match placement {
        Placement::Before => {
            let mut sx = t.activation(px, activation);
            if let Some((p, rng)) = x_dropout {
                sx = t.dropout(sx, p, rng)?;
            }
            let sy = t.activation(py, activation);
            t.hadamard(sx, sy)?
        }
        Placement::After | Placement::None => {
            if let Some((p, rng)) = x_dropout {
                px = t.dropout(px, p, rng)?;
            }
            let h = t.hadamard(px, py)?;
            if placement == Placement::After {
                t.activation(h, activation)
            } else {
                h
            }
        }
    };
    t.matmul(joint, w.p)
}

/// Full pooled output `fused + b` for row-stacked inputs.
pub fn pool_graph(
    t: &mut Tape,
    w: &PoolingVars,
    x: Var,
    y: Var,
    activation: Activation,
    placement: Placement,
) -> Result<Var> {
    let z = fused_graph(t, w, x, y, activation, placement)?;
    add_row_bias(t, z, w.b)
}

fn check_inputs(params: &PoolingParams, x: &Tensor, y: &Tensor) -> Result<()> {
    let (n, m, _, _) = params.dims();
    if x.len() != n || y.len() != m {
        return dim_err(format!("pooling expects x[{n}], y[{m}], got {:?} and {:?}", x.shape(), y.shape()));
    }
    Ok(())
}

fn eval_vector(
    params: &PoolingParams,
    x: &Tensor,
    y: &Tensor,
    activation: Activation,
    placement: Placement,
) -> Result<Tensor> {
    check_inputs(params, x, y)?;
    let mut t = Tape::new();
    let w = params.leaves(&mut t);
    let xv = t.leaf(x.clone());
    let yv = t.leaf(y.clone());
    let out = pool_graph(&mut t, &w, xv, yv, activation, placement)?;
    Ok(Tensor::from_vec(t.value(out).data().to_vec()))
}

/// `f = Pᵀ(Uᵀx ∘ Vᵀy) + b`. Requires identity activation and no input biases.
pub fn low_rank_pool(params: &PoolingParams, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if params.activation != Activation::Identity {
        return Err(Error::Config(format!(
            "low_rank_pool needs the identity activation, params carry {}",
            params.activation
        )));
    }
    if params.has_input_biases() {
        return Err(Error::Config("low_rank_pool takes no input biases; use full_model_pool".into()));
    }
    eval_vector(params, x, y, Activation::Identity, Placement::None)
}

/// Batched [`low_rank_pool`] over column-stacked inputs: `xs: N×B`,
/// `ys: M×B`, result `c×B`.
pub fn low_rank_pool_batch(params: &PoolingParams, xs: &Tensor, ys: &Tensor) -> Result<Tensor> {
    if params.activation != Activation::Identity || params.has_input_biases() {
        return Err(Error::Config("low_rank_pool_batch needs identity activation and no input biases".into()));
    }
    let (n, m, _, _) = params.dims();
    let (xr, xb) = matrix_dims(xs, "x batch")?;
    let (yr, yb) = matrix_dims(ys, "y batch")?;
    if xr != n || yr != m || xb != yb {
        return dim_err(format!(
            "batched pooling expects N×B and M×B with N={n}, M={m}, got {:?} and {:?}",
            xs.shape(),
            ys.shape()
        ));
    }
    let mut t = Tape::new();
    let w = params.leaves(&mut t);
    let xv = t.leaf(xs.transpose()?);
    let yv = t.leaf(ys.transpose()?);
    let out = pool_graph(&mut t, &w, xv, yv, Activation::Identity, Placement::None)?;
    t.value(out).transpose()
}

/// Single-output form `f_i = 𝟙ᵀ(U_iᵀx ∘ V_iᵀy) + b_i`.
pub fn rank_d_output(u_i: &Tensor, v_i: &Tensor, b_i: f64, x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, d) = matrix_dims(u_i, "U_i")?;
    let (m, dv) = matrix_dims(v_i, "V_i")?;
    if d != dv || x.len() != n || y.len() != m {
        return dim_err(format!(
            "rank-d output: U_i {:?}, V_i {:?}, x {:?}, y {:?}",
            u_i.shape(),
            v_i.shape(),
            x.shape(),
            y.shape()
        ));
    }
    let px = x.matmul(u_i)?;
    let py = y.matmul(v_i)?;
    Ok(px.hadamard(&py)?.sum() + b_i)
}

/// `f = Pᵀ((Uᵀx + b_x) ∘ (Vᵀy + b_y)) + b`, evaluated directly.
pub fn full_model_pool(params: &PoolingParams, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if params.bx.is_none() || params.by.is_none() {
        return Err(Error::Config("full_model_pool needs both input biases b_x and b_y".into()));
    }
    eval_vector(params, x, y, Activation::Identity, Placement::None)
}

/// The full model rewritten as a bias-free Hadamard term plus linear terms:
/// `f = Pᵀ(Uᵀx ∘ Vᵀy + U′ᵀx + V′ᵀy) + b′`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedFullModel {
    pub u: Tensor,
    pub v: Tensor,
    pub p: Tensor,
    /// `U′ = U·diag(b_y)`, `N×d`.
    pub u_lin: Tensor,
    /// `V′ = V·diag(b_x)`, `M×d`.
    pub v_lin: Tensor,
    /// `b′ = b + Pᵀ(b_x ∘ b_y)`.
    pub b: Tensor,
}

fn scale_columns(m: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (r, c) = matrix_dims(m, "matrix")?;
    let mut out = m.clone();
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[i * c + j] *= s.data()[j];
        }
    }
    Ok(out)
}

pub fn expand_full_model(params: &PoolingParams) -> Result<ExpandedFullModel> {
    let (Some(bx), Some(by)) = (&params.bx, &params.by) else {
        return Err(Error::Config("expand_full_model needs both input biases".into()));
    };
    let u_lin = scale_columns(&params.u, by)?;
    let v_lin = scale_columns(&params.v, bx)?;
    let shift = bx.hadamard(by)?.matmul(&params.p)?;
    let b = params.b.add(&Tensor::from_vec(shift.into_data()))?;
    Ok(ExpandedFullModel { u: params.u.clone(), v: params.v.clone(), p: params.p.clone(), u_lin, v_lin, b })
}

impl ExpandedFullModel {
    pub fn evaluate(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let joint = x.matmul(&self.u)?.hadamard(&y.matmul(&self.v)?)?;
        let inner = joint.add(&x.matmul(&self.u_lin)?)?.add(&y.matmul(&self.v_lin)?)?;
        let out = inner.matmul(&self.p)?;
        Tensor::from_vec(out.into_data()).add(&self.b)
    }
}

/// Low-rank pooling with the configured activation before the Hadamard
/// product, after it, or not at all.
pub fn nonlinear_pool(params: &PoolingParams, x: &Tensor, y: &Tensor, placement: Placement) -> Result<Tensor> {
    eval_vector(params, x, y, params.activation, placement)
}

/// Low-rank pooling plus linear shortcut maps `H_x: N×c`, `H_y: M×c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortcutParams {
    pub pooling: PoolingParams,
    pub hx: Tensor,
    pub hy: Tensor,
}

impl ShortcutParams {
    pub fn new(pooling: PoolingParams, hx: Tensor, hy: Tensor) -> Result<Self> {
        let (n, m, _, c) = pooling.dims();
        if hx.shape() != [n, c] || hy.shape() != [m, c] {
            return dim_err(format!(
                "shortcut maps must be {n}×{c} and {m}×{c}, got {:?} and {:?}",
                hx.shape(),
                hy.shape()
            ));
        }
        Ok(Self { pooling, hx, hy })
    }

    pub fn leaves(&self, tape: &mut Tape) -> ShortcutVars {
        ShortcutVars {
            pooling: self.pooling.leaves(tape),
            hx: tape.leaf(self.hx.clone()),
            hy: tape.leaf(self.hy.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ShortcutVars {
    pub pooling: PoolingVars,
    pub hx: Var,
    pub hy: Var,
}

/// `Pᵀ(σ(Uᵀx) ∘ σ(Vᵀy)) + H_xᵀx + H_yᵀy + b` for row-stacked inputs.
pub fn shortcut_graph(t: &mut Tape, w: &ShortcutVars, x: Var, y: Var, activation: Activation) -> Result<Var> {
    let z = fused_graph(t, &w.pooling, x, y, activation, Placement::Before)?;
    let sx = t.matmul(x, w.hx)?;
    let sy = t.matmul(y, w.hy)?;
    let z = t.add(z, sx)?;
    let z = t.add(z, sy)?;
    add_row_bias(t, z, w.pooling.b)
}

pub fn shortcut_pool(params: &ShortcutParams, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_inputs(&params.pooling, x, y)?;
    let mut t = Tape::new();
    let w = params.leaves(&mut t);
    let xv = t.leaf(x.clone());
    let yv = t.leaf(y.clone());
    let out = shortcut_graph(&mut t, &w, xv, yv, params.pooling.activation)?;
    Ok(Tensor::from_vec(t.value(out).data().to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    FullBilinear,
    LowRank,
    Compact,
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_bilinear" | "full" => Ok(PoolingKind::FullBilinear),
            "low_rank" => Ok(PoolingKind::LowRank),
            "compact" => Ok(PoolingKind::Compact),
            other => Err(Error::Config(format!("unknown pooling kind '{other}'"))),
        }
    }
}

/// Dimensions for parameter accounting. `outputs` is `L` for exact
/// bilinear pooling and `c = |Ω|` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDims {
    pub n: u64,
    pub m: u64,
    pub d: u64,
    pub outputs: u64,
}

/// An exact ratio kept as integers alongside its float value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: u64,
    pub denominator: u64,
    pub value: f64,
}

impl Ratio {
    fn new(numerator: u64, denominator: u64) -> Self {
        Self { numerator, denominator, value: numerator as f64 / denominator as f64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub kind: PoolingKind,
    /// Exact bilinear: `L(NM+1)`. Low rank: `dN + dM + dc + c`.
    /// Compact: the `d × c` projection after the sketch (the sketch itself
    /// has no trainable parameters).
    pub count: u64,
    /// Share of all parameters that serves a single output.
    pub per_output_ratio: Ratio,
}

pub fn count_params(kind: PoolingKind, dims: ParamDims) -> Result<ParamCount> {
    let ParamDims { n, m, d, outputs: c } = dims;
    let needed: &[(&str, u64)] = match kind {
        PoolingKind::FullBilinear => &[("N", n), ("M", m), ("L", c)],
        PoolingKind::LowRank => &[("N", n), ("M", m), ("d", d), ("c", c)],
        PoolingKind::Compact => &[("d", d), ("c", c)],
    };
    if let Some((name, _)) = needed.iter().find(|(_, v)| *v == 0) {
        return Err(Error::Config(format!("{name} must be positive for {kind:?} pooling")));
    }
    let overflow = || Error::Config(format!("parameter count overflows for {dims:?}"));
    Ok(match kind {
        PoolingKind::FullBilinear => ParamCount {
            kind,
            count: n.checked_mul(m).and_then(|nm| (nm + 1).checked_mul(c)).ok_or_else(overflow)?,
            per_output_ratio: Ratio::new(1, c),
        },
        PoolingKind::LowRank => ParamCount {
            kind,
            count: d.checked_mul(n + m + c).map(|v| v + c).ok_or_else(overflow)?,
            per_output_ratio: Ratio::new(n + m + 1, n + m + c),
        },
        PoolingKind::Compact => {
            ParamCount { kind, count: d.checked_mul(c).ok_or_else(overflow)?, per_output_ratio: Ratio::new(1, c) }
        }
    })
}
