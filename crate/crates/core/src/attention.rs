//! Multimodal low-rank bilinear attention networks.
//!
//! The MLB pipeline for a question vector `q` and a lattice of visual
//! features `F` (`S² × M`, one row per cell):
//!
//! ```text
//! α  = softmax_rows( (σ(q U_q) 𝟙 ∘ σ(F V_F)) P_α )ᵀ        G × S²
//! v̂  = ‖_g Σ_s α[g, s] F[s]                                G·M
//! p  = softmax( P_oᵀ(σ(W_qᵀq) ∘ σ(V_v̂ᵀv̂)) + b_o )          |Ω|
//! â  = argmax p
//! ```
//!
//! with `σ = tanh`. Both fusion sites are [`PoolingParams`] evaluated with
//! the activation before the Hadamard product, so the classifier stage is
//! literally nonlinear low-rank pooling followed by a softmax.
//!
//! Variants: MARN adds linear shortcut maps at the classifier, the MCB
//! variant replaces both fusion sites with compact bilinear pooling, and a
//! linear baseline sees only the concatenated raw inputs. [`mrn_stack`] and
//! [`hobm_energy`] are the residual-network recursion and the factored
//! three-way energy, evaluated on plain tensors.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::pooling::{fused_graph_with, Placement, PoolingParams, PoolingVars, RankMode};
use crate::sketch::{CompactBilinearOp, SketchParams};
use crate::store::Bundle;
use crate::tensor::{Activation, Rng, Tape, Tensor, Var};

/// Shape of an attention model and its task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Question embedding size `N`.
    pub n: usize,
    /// Visual channel size `M`.
    pub m: usize,
    /// Joint embedding size `d`.
    pub d: usize,
    /// Glimpse count `G`.
    pub glimpses: usize,
    /// Lattice side `S`; the lattice has `S²` cells.
    pub lattice: usize,
    /// Candidate answers `|Ω|`.
    pub answers: usize,
}

impl ModelDims {
    pub fn cells(&self) -> usize {
        self.lattice * self.lattice
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("N", self.n),
            ("M", self.m),
            ("d", self.d),
            ("G", self.glimpses),
            ("S", self.lattice),
            ("|Ω|", self.answers),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model dimension {name} must be positive")));
        }
        Ok(())
    }

    fn check_inputs(&self, q: &Tensor, f: &Tensor) -> Result<()> {
        if q.len() != self.n {
            return dim_err(format!("question must have {} entries, got shape {:?}", self.n, q.shape()));
        }
        if f.shape() != [self.cells(), self.m] {
            return dim_err(format!("visual features must be {}×{}, got {:?}", self.cells(), self.m, f.shape()));
        }
        Ok(())
    }
}

/// Parameters of the MLB network (and of MARN when `shortcut` is set).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModelParams {
    pub dims: ModelDims,
    /// Bias terms at both fusion sites and on the answer logits.
    pub biases: bool,
    /// Train-time dropout on the question branch `σ(Uᵀq)` of both sites.
    pub dropout: f64,
    /// `U_q: N×d`, `V_F: M×d`, `P_α: d×G`. Its output bias stays zero: a
    /// per-glimpse constant cancels in the softmax over cells.
    pub attention: PoolingParams,
    /// `W_q: N×d`, `V_v̂: (G·M)×d`, `P_o: d×|Ω|`, `b_o: |Ω|`.
    pub classifier: PoolingParams,
    /// MARN shortcut maps `H_q: N×|Ω|` and `H_v̂: (G·M)×|Ω|`.
    pub shortcut: Option<(Tensor, Tensor)>,
    /// Activation placement at the classifier; the attention site always
    /// applies `tanh` before the product.
    pub placement: Placement,
}

/// Tape handles for [`AttentionModelParams`].
#[derive(Debug, Clone, Copy)]
pub struct MlbVars {
    pub attention: PoolingVars,
    pub classifier: PoolingVars,
    pub shortcut: Option<(Var, Var)>,
}

fn bias_pair(biases: bool, d: usize) -> (Option<Tensor>, Option<Tensor>) {
    if biases {
        (Some(Tensor::zeros(&[d])), Some(Tensor::zeros(&[d])))
    } else {
        (None, None)
    }
}

impl AttentionModelParams {
    /// Glorot-initialized weights and zero biases.
    pub fn init(dims: ModelDims, biases: bool, dropout: f64, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {dropout}")));
        }
        let ModelDims { n, m, d, glimpses: g, answers, .. } = dims;
        let mut attention =
            PoolingParams::init(n, m, d, g, RankMode::Free, Activation::Tanh, &mut rng.derive("attention"))?;
        let mut classifier =
            PoolingParams::init(n, g * m, d, answers, RankMode::Free, Activation::Tanh, &mut rng.derive("classifier"))?;
        (attention.bx, attention.by) = bias_pair(biases, d);
        (classifier.bx, classifier.by) = bias_pair(biases, d);
        Ok(Self { dims, biases, dropout, attention, classifier, shortcut: None, placement: Placement::Before })
    }

    /// Adds Glorot-initialized MARN shortcut maps.
    pub fn with_shortcut(mut self, rng: &mut Rng) -> Self {
        let gm = self.dims.glimpses * self.dims.m;
        self.shortcut = Some((rng.glorot(self.dims.n, self.dims.answers), rng.glorot(gm, self.dims.answers)));
        self
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    pub fn leaves(&self, t: &mut Tape) -> MlbVars {
        MlbVars {
            attention: self.attention.leaves(t),
            classifier: self.classifier.leaves(t),
            shortcut: self.shortcut.as_ref().map(|(hq, hv)| (t.leaf(hq.clone()), t.leaf(hv.clone()))),
        }
    }

    /// Named tensors in a fixed order, with whether training updates them.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor, bool)> {
        let mut out = vec![
            ("U_q", &self.attention.u, true),
            ("V_F", &self.attention.v, true),
            ("P_alpha", &self.attention.p, true),
            ("b_alpha", &self.attention.b, false),
            ("W_q", &self.classifier.u, true),
            ("V_vhat", &self.classifier.v, true),
            ("P_o", &self.classifier.p, true),
            ("b_o", &self.classifier.b, self.biases),
        ];
        let opt = [
            ("b_Uq", &self.attention.bx),
            ("b_VF", &self.attention.by),
            ("b_Wq", &self.classifier.bx),
            ("b_Vvhat", &self.classifier.by),
        ];
        for (name, t) in opt {
            if let Some(t) = t {
                out.push((name, t, true));
            }
        }
        if let Some((hq, hv)) = &self.shortcut {
            out.push(("H_q", hq, true));
            out.push(("H_vhat", hv, true));
        }
        out
    }

    /// Same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.attention.u,
            &mut self.attention.v,
            &mut self.attention.p,
            &mut self.attention.b,
            &mut self.classifier.u,
            &mut self.classifier.v,
            &mut self.classifier.p,
            &mut self.classifier.b,
        ];
        for t in [&mut self.attention.bx, &mut self.attention.by, &mut self.classifier.bx, &mut self.classifier.by]
            .into_iter()
            .flatten()
        {
            out.push(t);
        }
        if let Some((hq, hv)) = &mut self.shortcut {
            out.push(hq);
            out.push(hv);
        }
        out
    }

    /// Same order as [`Self::named_tensors`].
    pub fn var_list(vars: &MlbVars) -> Vec<Var> {
        let a = &vars.attention;
        let c = &vars.classifier;
        let mut out = vec![a.u, a.v, a.p, a.b, c.u, c.v, c.p, c.b];
        out.extend([a.bx, a.by, c.bx, c.by].into_iter().flatten());
        if let Some((hq, hv)) = vars.shortcut {
            out.push(hq);
            out.push(hv);
        }
        out
    }

    /// Inverse of [`Self::var_list`] for handles created elsewhere, e.g. by
    /// a gradient checker.
    pub fn vars_from_slice(&self, vars: &[Var]) -> Result<MlbVars> {
        let want = self.named_tensors().len();
        if vars.len() != want {
            return dim_err(format!("expected {want} parameter handles, got {}", vars.len()));
        }
        let mut rest = vars[8..].iter().copied();
        let mut opt = |present: bool| if present { rest.next() } else { None };
        let (abx, aby) = (opt(self.attention.bx.is_some()), opt(self.attention.by.is_some()));
        let (cbx, cby) = (opt(self.classifier.bx.is_some()), opt(self.classifier.by.is_some()));
        let shortcut = match (opt(self.shortcut.is_some()), opt(self.shortcut.is_some())) {
            (Some(hq), Some(hv)) => Some((hq, hv)),
            _ => None,
        };
        let pool =
            |o: usize, bx, by| PoolingVars { u: vars[o], v: vars[o + 1], p: vars[o + 2], b: vars[o + 3], bx, by };
        Ok(MlbVars { attention: pool(0, abx, aby), classifier: pool(4, cbx, cby), shortcut })
    }
}

/// Optional train-time dropout source threaded through a forward pass.
pub type DropoutRng<'a> = Option<&'a mut Rng>;

/// Attention distribution `α` (`G × S²`) for a question `q` and features `F`
/// recorded on the tape.
pub fn attend_graph(
    t: &mut Tape,
    params: &AttentionModelParams,
    vars: &MlbVars,
    q: Var,
    f: Var,
    rng: DropoutRng<'_>,
) -> Result<Var> {
    let cells = params.dims.cells();
    let w = &vars.attention;
    let mut qp = t.matmul(q, w.u)?;
    if let Some(bx) = w.bx {
        let row = bx_row(t, bx)?;
        qp = t.add(qp, row)?;
    }
    let mut sq = t.activation(qp, Activation::Tanh);
    if let Some(r) = rng {
        sq = t.dropout(sq, params.dropout, r)?;
    }
    let sq = t.repeat_rows(sq, cells)?;
    let mut fp = t.matmul(f, w.v)?;
    if let Some(by) = w.by {
        let rep = t.repeat_rows(by, cells)?;
        fp = t.add(fp, rep)?;
    }
    let sf = t.activation(fp, Activation::Tanh);
    let joint = t.hadamard(sq, sf)?;
    let logits = t.matmul(joint, w.p)?;
    let logits = t.transpose(logits)?;
    t.softmax_rows(logits)
}

fn bx_row(t: &mut Tape, b: Var) -> Result<Var> {
    let n = t.value(b).len();
    t.reshape(b, &[1, n])
}

/// `v̂ = ‖_g Σ_s α[g, s] F[s]`: the glimpse rows of `α F`, concatenated in
/// ascending glimpse order.
pub fn glimpse_graph(t: &mut Tape, alpha: Var, f: Var) -> Result<Var> {
    let pooled = t.matmul(alpha, f)?;
    let n = t.value(pooled).len();
    t.reshape(pooled, &[1, n])
}

/// Answer distribution from `q` and `v̂`. Uses the shortcut maps when the
/// parameters carry them and `use_shortcut` is set.
pub fn classify_graph(
    t: &mut Tape,
    params: &AttentionModelParams,
    vars: &MlbVars,
    q: Var,
    vhat: Var,
    use_shortcut: bool,
    rng: DropoutRng<'_>,
) -> Result<Var> {
    let drop = rng.map(|r| (params.dropout, r));
    let mut z = fused_graph_with(t, &vars.classifier, q, vhat, Activation::Tanh, params.placement, drop)?;
    if use_shortcut {
        if let Some((hq, hv)) = vars.shortcut {
            let sq = t.matmul(q, hq)?;
            let sv = t.matmul(vhat, hv)?;
            z = t.add(z, sq)?;
            z = t.add(z, sv)?;
        }
    }
    let b = bx_row(t, vars.classifier.b)?;
    let logits = t.add(z, b)?;
    t.softmax_rows(logits)
}

/// Full MLB (or MARN) pass; returns `(α, answer distribution)`.
pub fn forward_graph(
    t: &mut Tape,
    params: &AttentionModelParams,
    vars: &MlbVars,
    q: Var,
    f: Var,
    mut rng: DropoutRng<'_>,
) -> Result<(Var, Var)> {
    let alpha = attend_graph(t, params, vars, q, f, rng.as_deref_mut())?;
    let vhat = glimpse_graph(t, alpha, f)?;
    let probs = classify_graph(t, params, vars, q, vhat, true, rng)?;
    Ok((alpha, probs))
}

fn flat(t: &Tape, v: Var) -> Tensor {
    Tensor::from_vec(t.value(v).data().to_vec())
}

pub fn attend(params: &AttentionModelParams, q: &Tensor, f: &Tensor) -> Result<Tensor> {
    params.dims.check_inputs(q, f)?;
    let mut t = Tape::new();
    let vars = params.leaves(&mut t);
    let qv = t.leaf(q.clone());
    let fv = t.leaf(f.clone());
    let alpha = attend_graph(&mut t, params, &vars, qv, fv, None)?;
    Ok(t.value(alpha).clone())
}

pub fn glimpse_pool(alpha: &Tensor, f: &Tensor) -> Result<Tensor> {
    let (_, cells) = alpha.dims2()?;
    let (rows, _) = f.dims2()?;
    if cells != rows {
        return dim_err(format!("α is {:?} but F is {:?}", alpha.shape(), f.shape()));
    }
    let mut t = Tape::new();
    let a = t.leaf(alpha.clone());
    let fv = t.leaf(f.clone());
    let v = glimpse_graph(&mut t, a, fv)?;
    Ok(flat(&t, v))
}

/// Answer distribution from a question and an attended feature, without
/// shortcut maps.
pub fn classify(params: &AttentionModelParams, q: &Tensor, vhat: &Tensor) -> Result<Tensor> {
    let gm = params.dims.glimpses * params.dims.m;
    if q.len() != params.dims.n || vhat.len() != gm {
        return dim_err(format!(
            "classify expects q[{}] and v̂[{gm}], got {:?} and {:?}",
            params.dims.n,
            q.shape(),
            vhat.shape()
        ));
    }
    let mut t = Tape::new();
    let vars = params.leaves(&mut t);
    let qv = t.leaf(q.clone());
    let vv = t.leaf(vhat.clone());
    let p = classify_graph(&mut t, params, &vars, qv, vv, false, None)?;
    Ok(flat(&t, p))
}

/// Evaluation-mode distribution over answers, shortcut maps included when
/// present.
pub fn forward(params: &AttentionModelParams, q: &Tensor, f: &Tensor) -> Result<Tensor> {
    params.dims.check_inputs(q, f)?;
    let mut t = Tape::new();
    let vars = params.leaves(&mut t);
    let qv = t.leaf(q.clone());
    let fv = t.leaf(f.clone());
    let (_, p) = forward_graph(&mut t, params, &vars, qv, fv, None)?;
    Ok(flat(&t, p))
}

/// `â = argmax p(a | q, F)`, lowest index on ties.
pub fn predict(params: &AttentionModelParams, q: &Tensor, f: &Tensor) -> Result<usize> {
    Ok(forward(params, q, f)?.argmax())
}

/// MARN pass: the classifier adds `H_qᵀq + H_v̂ᵀv̂` before the softmax.
pub fn marn_forward(params: &AttentionModelParams, q: &Tensor, f: &Tensor) -> Result<Tensor> {
    if params.shortcut.is_none() {
        return Err(Error::Config("marn_forward needs shortcut maps".into()));
    }
    forward(params, q, f)
}

impl AttentionModelParams {
    pub fn to_bundle(&self, variant: &str, seed: u64) -> Bundle {
        let mut b = Bundle::new(serde_json::json!({
            "variant": variant,
            "dims": self.dims,
            "activation": Activation::Tanh,
            "biases": self.biases,
            "dropout": self.dropout,
            "dropout_sites": ["attention.question_branch", "classifier.question_branch"],
            "shortcut": self.shortcut.is_some(),
            "placement": self.placement,
            "seed": seed,
        }));
        for (name, t, _) in self.named_tensors() {
            b.insert(name, t.clone());
        }
        b
    }

    pub fn from_bundle(mut b: Bundle) -> Result<Self> {
        let meta = &b.meta;
        let dims: ModelDims = serde_json::from_value(meta["dims"].clone())?;
        let biases = meta["biases"].as_bool().unwrap_or(false);
        let dropout = meta["dropout"].as_f64().unwrap_or(0.0);
        let shortcut = meta["shortcut"].as_bool().unwrap_or(false);
        let placement = match meta.get("placement") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => Placement::Before,
        };
        let take_opt = |b: &mut Bundle, name: &str| -> Result<Option<Tensor>> {
            if biases {
                b.take(name).map(Some)
            } else {
                Ok(None)
            }
        };
        let attention = PoolingParams {
            u: b.take("U_q")?,
            v: b.take("V_F")?,
            p: b.take("P_alpha")?,
            b: b.take("b_alpha")?,
            bx: take_opt(&mut b, "b_Uq")?,
            by: take_opt(&mut b, "b_VF")?,
            activation: Activation::Tanh,
        };
        let classifier = PoolingParams {
            u: b.take("W_q")?,
            v: b.take("V_vhat")?,
            p: b.take("P_o")?,
            b: b.take("b_o")?,
            bx: take_opt(&mut b, "b_Wq")?,
            by: take_opt(&mut b, "b_Vvhat")?,
            activation: Activation::Tanh,
        };
        let shortcut = if shortcut { Some((b.take("H_q")?, b.take("H_vhat")?)) } else { None };
        let params = Self { dims, biases, dropout, attention, classifier, shortcut, placement };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        let ModelDims { n, m, d, glimpses: g, answers, .. } = self.dims;
        let expect = [
            (&self.attention.u, vec![n, d]),
            (&self.attention.v, vec![m, d]),
            (&self.attention.p, vec![d, g]),
            (&self.classifier.u, vec![n, d]),
            (&self.classifier.v, vec![g * m, d]),
            (&self.classifier.p, vec![d, answers]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("tensor shape {:?} does not match dims {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Compact-bilinear attention network: both fusion sites use compact
/// bilinear pooling followed by signed square root, row-wise l2
/// normalization, dropout and a linear projection.
#[derive(Debug, Clone, PartialEq)]
pub struct McbParams {
    pub dims: ModelDims,
    /// Sketch of `(q, F_s)`: `n_x = N`, `n_y = M`.
    pub attention_sketch: SketchParams,
    /// Sketch of `(q, v̂)`: `n_x = N`, `n_y = G·M`.
    pub classifier_sketch: SketchParams,
    /// `d_sketch × G`.
    pub attention_proj: Tensor,
    /// `d_sketch × |Ω|`.
    pub classifier_proj: Tensor,
    pub classifier_bias: Tensor,
    /// Dropout after normalization (0.1 by default).
    pub feature_dropout: f64,
    /// Dropout on the question vector (0.3 by default).
    pub question_dropout: f64,
}

pub const MCB_FEATURE_DROPOUT: f64 = 0.1;
pub const MCB_QUESTION_DROPOUT: f64 = 0.3;

impl McbParams {
    pub fn init(dims: ModelDims, sketch_dim: usize, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let mut hashes = rng.derive("hash");
        let attention_sketch = SketchParams::sample(dims.n, dims.m, sketch_dim, &mut hashes)?;
        let classifier_sketch = SketchParams::sample(dims.n, dims.glimpses * dims.m, sketch_dim, &mut hashes)?;
        let mut init = rng.derive("init");
        Ok(Self {
            dims,
            attention_sketch,
            classifier_sketch,
            attention_proj: init.glorot(sketch_dim, dims.glimpses),
            classifier_proj: init.glorot(sketch_dim, dims.answers),
            classifier_bias: Tensor::zeros(&[dims.answers]),
            feature_dropout: MCB_FEATURE_DROPOUT,
            question_dropout: MCB_QUESTION_DROPOUT,
        })
    }

    pub fn sketch_dim(&self) -> usize {
        self.attention_sketch.d
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor, bool)> {
        vec![
            ("proj_alpha", &self.attention_proj, true),
            ("proj_o", &self.classifier_proj, true),
            ("b_o", &self.classifier_bias, true),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.attention_proj, &mut self.classifier_proj, &mut self.classifier_bias]
    }

    pub fn to_bundle(&self, seed: u64) -> Bundle {
        let mut b = Bundle::new(serde_json::json!({
            "variant": "mcb-att",
            "dims": self.dims,
            "activation": Activation::SignedSqrt,
            "feature_dropout": self.feature_dropout,
            "question_dropout": self.question_dropout,
            "attention_sketch": self.attention_sketch,
            "classifier_sketch": self.classifier_sketch,
            "seed": seed,
        }));
        for (name, t, _) in self.named_tensors() {
            b.insert(name, t.clone());
        }
        b
    }

    pub fn from_bundle(mut b: Bundle) -> Result<Self> {
        let meta = b.meta.clone();
        let attention_sketch: SketchParams = serde_json::from_value(meta["attention_sketch"].clone())?;
        let classifier_sketch: SketchParams = serde_json::from_value(meta["classifier_sketch"].clone())?;
        attention_sketch.validate()?;
        classifier_sketch.validate()?;
        Ok(Self {
            dims: serde_json::from_value(meta["dims"].clone())?,
            attention_sketch,
            classifier_sketch,
            attention_proj: b.take("proj_alpha")?,
            classifier_proj: b.take("proj_o")?,
            classifier_bias: b.take("b_o")?,
            feature_dropout: meta["feature_dropout"].as_f64().unwrap_or(MCB_FEATURE_DROPOUT),
            question_dropout: meta["question_dropout"].as_f64().unwrap_or(MCB_QUESTION_DROPOUT),
        })
    }
}

/// Handles for the trainable MCB tensors, in [`McbParams::named_tensors`]
/// order.
pub fn mcb_leaves(params: &McbParams, t: &mut Tape) -> Vec<Var> {
    params.named_tensors().into_iter().map(|(_, x, _)| t.leaf(x.clone())).collect()
}

/// compact pooling → signed sqrt → l2 rows → dropout → projection
fn mcb_stage(
    t: &mut Tape,
    sketch: &SketchParams,
    x: Var,
    y: Var,
    proj: Var,
    dropout: f64,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let z = t.custom(Box::new(CompactBilinearOp::new(sketch.clone())), &[x, y])?;
    let z = t.activation(z, Activation::SignedSqrt);
    let mut z = t.l2_normalize_rows(z)?;
    if let Some(r) = rng {
        z = t.dropout(z, dropout, r)?;
    }
    t.matmul(z, proj)
}

/// MCB attention pass; `vars` from [`mcb_leaves`]. Returns `(α, distribution)`.
pub fn mcb_forward_graph(
    t: &mut Tape,
    params: &McbParams,
    vars: &[Var],
    q: Var,
    f: Var,
    mut rng: DropoutRng<'_>,
) -> Result<(Var, Var)> {
    let cells = params.dims.cells();
    let n = params.dims.n;
    let mut qd = t.reshape(q, &[1, n])?;
    if let Some(r) = rng.as_deref_mut() {
        qd = t.dropout(qd, params.question_dropout, r)?;
    }
    let qrep = t.repeat_rows(qd, cells)?;
    let scores = mcb_stage(t, &params.attention_sketch, qrep, f, vars[0], params.feature_dropout, rng.as_deref_mut())?;
    let scores = t.transpose(scores)?;
    let alpha = t.softmax_rows(scores)?;
    let vhat = glimpse_graph(t, alpha, f)?;
    let logits = mcb_stage(t, &params.classifier_sketch, qd, vhat, vars[1], params.feature_dropout, rng)?;
    let b = bx_row(t, vars[2])?;
    let logits = t.add(logits, b)?;
    let probs = t.softmax_rows(logits)?;
    Ok((alpha, probs))
}

/// Evaluation-mode MCB attention pass: `(α, distribution)`. Passing an rng
/// enables both dropout sites.
pub fn mcb_attention_forward(
    params: &McbParams,
    q: &Tensor,
    f: &Tensor,
    rng: DropoutRng<'_>,
) -> Result<(Tensor, Tensor)> {
    params.dims.check_inputs(q, f)?;
    let mut t = Tape::new();
    let vars = mcb_leaves(params, &mut t);
    let qv = t.leaf(q.clone());
    let fv = t.leaf(f.clone());
    let (a, p) = mcb_forward_graph(&mut t, params, &vars, qv, fv, rng)?;
    Ok((t.value(a).clone(), flat(&t, p)))
}

/// Additive baseline: `softmax([q, vec(F)] W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub dims: ModelDims,
    /// `(N + S²·M) × |Ω|`.
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    pub fn init(dims: ModelDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let inputs = dims.n + dims.cells() * dims.m;
        Ok(Self { dims, w: rng.glorot(inputs, dims.answers), b: Tensor::zeros(&[dims.answers]) })
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor, bool)> {
        vec![("W", &self.w, true), ("b", &self.b, true)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn to_bundle(&self, seed: u64) -> Bundle {
        let mut b = Bundle::new(serde_json::json!({"variant": "baseline-linear", "dims": self.dims, "seed": seed}));
        b.insert("W", self.w.clone());
        b.insert("b", self.b.clone());
        b
    }

    pub fn from_bundle(mut b: Bundle) -> Result<Self> {
        Ok(Self { dims: serde_json::from_value(b.meta["dims"].clone())?, w: b.take("W")?, b: b.take("b")? })
    }
}

/// `vars = [W, b]`.
pub fn linear_forward_graph(t: &mut Tape, params: &LinearParams, vars: &[Var], q: Var, f: Var) -> Result<Var> {
    let n = params.dims.n;
    let flat_len = params.dims.cells() * params.dims.m;
    let qr = t.reshape(q, &[1, n])?;
    let fr = t.reshape(f, &[1, flat_len])?;
    let x = t.concat(&[qr, fr])?;
    let z = t.matmul(x, vars[0])?;
    let b = bx_row(t, vars[1])?;
    let z = t.add(z, b)?;
    t.softmax_rows(z)
}

/// One MRN learning block: `F(q, v) = σ(W_q q) ∘ σ(W_2 σ(W_1 v))`, then
/// projected by `W_F`. Matrices act on column vectors (`out × in`).
#[derive(Debug, Clone, PartialEq)]
pub struct MrnBlock {
    pub w_q: Tensor,
    pub w_1: Tensor,
    pub w_2: Tensor,
    pub w_f: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrnBlockParams {
    /// Shortcut projection `W_q′` applied to the original question.
    pub w_q_shortcut: Tensor,
    pub blocks: Vec<MrnBlock>,
    pub activation: Activation,
}

fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (r, c) = w.dims2()?;
    if c != x.len() {
        return dim_err(format!("matrix {:?} cannot act on vector of length {}", w.shape(), x.len()));
    }
    let out = (0..r).map(|i| w.row(i).iter().zip(x.data()).map(|(a, b)| a * b).sum()).collect::<Vec<f64>>();
    Ok(Tensor::from_vec(out))
}

/// `F^(k)(q, v)` for one block.
pub fn mrn_block(block: &MrnBlock, activation: Activation, q: &Tensor, v: &Tensor) -> Result<Tensor> {
    let sq = matvec(&block.w_q, q)?.activation(activation);
    let hidden = matvec(&block.w_1, v)?.activation(activation);
    let sv = matvec(&block.w_2, &hidden)?.activation(activation);
    sq.hadamard(&sv)
}

/// `H_L(q, v) = W_q′ q + Σ_{l=1}^{L} W_F^(l) F^(l)(H_{l-1}, v)` with
/// `H_0 = q`; each block consumes the previous partial sum `H_{l-1}`.
pub fn mrn_stack(params: &MrnBlockParams, q: &Tensor, v: &Tensor) -> Result<Tensor> {
    if params.blocks.is_empty() {
        return Err(Error::Config("MRN stack needs at least one block".into()));
    }
    let mut acc = matvec(&params.w_q_shortcut, q)?;
    let mut h = q.clone();
    for block in &params.blocks {
        let residual = matvec(&block.w_f, &mrn_block(block, params.activation, &h, v)?)?;
        acc = acc.add(&residual).map_err(|_| {
            Error::Dimension(format!("block output {:?} does not match shortcut width {}", residual.shape(), acc.len()))
        })?;
        h = acc.clone();
    }
    Ok(acc)
}

/// Factored three-way energy weights: `W^x: I×F`, `W^y: J×F`, `W^h: K×F`,
/// `w^h: K`, `w^y: J`.
#[derive(Debug, Clone, PartialEq)]
pub struct HobmFactors {
    pub wx: Tensor,
    pub wy: Tensor,
    pub wh: Tensor,
    pub bh: Tensor,
    pub by: Tensor,
}

impl HobmFactors {
    pub fn new(wx: Tensor, wy: Tensor, wh: Tensor, bh: Tensor, by: Tensor) -> Result<Self> {
        let f = wx.dims2()?.1;
        if wy.dims2()?.1 != f || wh.dims2()?.1 != f {
            return dim_err(format!(
                "factor matrices disagree on F: {:?}, {:?}, {:?}",
                wx.shape(),
                wy.shape(),
                wh.shape()
            ));
        }
        if bh.len() != wh.dims2()?.0 || by.len() != wy.dims2()?.0 {
            return dim_err("bias lengths must match K and J");
        }
        Ok(Self { wx, wy, wh, bh, by })
    }
}

/// `-E(y, h; x) = (xᵀW^x ∘ yᵀW^y ∘ hᵀW^h) 𝟙 + hᵀw^h + yᵀw^y`.
pub fn hobm_energy(fac: &HobmFactors, x: &Tensor, y: &Tensor, h: &Tensor) -> Result<f64> {
    let fx = x.matmul(&fac.wx)?;
    let fy = y.matmul(&fac.wy)?;
    let fh = h.matmul(&fac.wh)?;
    let three = fx.hadamard(&fy)?.hadamard(&fh)?.sum();
    Ok(three + h.dot(&fac.bh)? + y.dot(&fac.by)?)
}
