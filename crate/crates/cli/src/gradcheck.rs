//! Finite-difference checks over every differentiable op and model loss at
//! randomized small shapes.

use mlb_core::attention::{
    forward_graph, linear_forward_graph, mcb_forward_graph, AttentionModelParams, LinearParams, McbParams, ModelDims,
};
use mlb_core::pooling::{pool_graph, shortcut_graph, Placement, PoolingVars, ShortcutVars};
use mlb_core::sketch::{CompactBilinearOp, SketchParams};
use mlb_core::tensor::{analytic_gradients, max_relative_error, numeric_gradients, GradFn};
use mlb_core::{Activation, Error, Result, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Random shape draws; every check runs once per draw.
    pub trials: usize,
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Test hook: perturbs every analytic gradient before comparison.
    pub corrupt_gradient: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { trials: 3, step: 1e-6, tolerance: 1e-5, corrupt_gradient: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub trial: usize,
    pub shape: String,
    pub parameters: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Shapes bounded by `N,M,d,S²,G,|Ω| ≤ 6,5,4,9,2,4`.
#[derive(Debug, Clone, Copy)]
struct Shape {
    n: usize,
    m: usize,
    d: usize,
    lattice: usize,
    glimpses: usize,
    answers: usize,
}

impl Shape {
    fn draw(rng: &mut Rng) -> Self {
        Shape {
            n: 1 + rng.below(6),
            m: 1 + rng.below(5),
            d: 1 + rng.below(4),
            lattice: 1 + rng.below(3),
            glimpses: 1 + rng.below(2),
            answers: 2 + rng.below(3),
        }
    }

    fn dims(&self) -> ModelDims {
        ModelDims {
            n: self.n,
            m: self.m,
            d: self.d,
            glimpses: self.glimpses,
            lattice: self.lattice,
            answers: self.answers,
        }
    }

    fn label(&self) -> String {
        format!(
            "N={} M={} d={} S={} G={} answers={}",
            self.n, self.m, self.d, self.lattice, self.glimpses, self.answers
        )
    }
}

struct Runner<'a> {
    cfg: &'a GradcheckConfig,
    entries: Vec<GradcheckEntry>,
}

impl Runner<'_> {
    fn check(&mut self, name: &str, trial: usize, shape: String, f: impl GradFn, params: &[Tensor]) -> Result<()> {
        let numeric = numeric_gradients(&f, params, self.cfg.step)?;
        let (_, mut analytic) = analytic_gradients(&f, params)?;
        if self.cfg.corrupt_gradient {
            for g in &mut analytic {
                if let Some(x) = g.data_mut().first_mut() {
                    *x += 1e-2;
                }
            }
        }
        let err = max_relative_error(&analytic, &numeric);
        self.entries.push(GradcheckEntry {
            name: name.to_string(),
            trial,
            shape,
            parameters: params.iter().map(Tensor::len).sum(),
            max_rel_error: err,
            pass: err < self.cfg.tolerance,
        });
        Ok(())
    }
}

/// `Σ out ∘ r` for a fixed random `r`, turning any output into a scalar.
fn project(t: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = t.leaf(r.reshape(t.value(out).shape())?);
    let h = t.hadamard(out, rv)?;
    Ok(t.sum(h))
}

fn pooling_vars(v: &[Var]) -> PoolingVars {
    PoolingVars { u: v[0], v: v[1], p: v[2], b: v[3], bx: Some(v[4]), by: Some(v[5]) }
}

/// Bounded away from zero so the signed square root stays smooth.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let t = rng.uniform_tensor(shape, 1.0);
    let mut signs = rng.derive("signs");
    let data = t.data().iter().map(|x| (0.2 + 0.8 * x.abs()) * signs.sign()).collect::<Vec<_>>();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub fn run_gradcheck(cfg: &GradcheckConfig, seed: u64) -> Result<GradcheckReport> {
    if cfg.trials == 0 {
        return Err(Error::Config("gradcheck needs at least one trial".into()));
    }
    if cfg.step.is_nan() || cfg.step <= 0.0 || cfg.tolerance.is_nan() || cfg.tolerance <= 0.0 {
        return Err(Error::Config("step and tolerance must be positive".into()));
    }
    let master = Rng::new(seed);
    let mut run = Runner { cfg, entries: Vec::new() };
    for trial in 0..cfg.trials {
        let mut rng = master.derive_indexed("trial", trial as u64);
        let sh = Shape::draw(&mut rng);
        let label = sh.label();
        let rows = 2;

        // low-rank pooling, each activation placement, with input biases
        for placement in [Placement::Before, Placement::After, Placement::None] {
            let mut params = vec![
                rng.glorot(sh.n, sh.d),
                rng.glorot(sh.m, sh.d),
                rng.glorot(sh.d, sh.answers),
                rng.uniform_tensor(&[sh.answers], 0.5),
                rng.uniform_tensor(&[sh.d], 0.5),
                rng.uniform_tensor(&[sh.d], 0.5),
            ];
            params.push(rng.uniform_tensor(&[rows, sh.n], 1.0));
            params.push(rng.uniform_tensor(&[rows, sh.m], 1.0));
            let r = rng.uniform_tensor(&[rows * sh.answers], 1.0);
            let f = move |t: &mut Tape, v: &[Var]| {
                let out = pool_graph(t, &pooling_vars(v), v[6], v[7], Activation::Tanh, placement)?;
                project(t, out, &r)
            };
            run.check(&format!("low_rank_pool/{placement}"), trial, label.clone(), f, &params)?;
        }

        // shortcut pooling
        {
            let params = vec![
                rng.glorot(sh.n, sh.d),
                rng.glorot(sh.m, sh.d),
                rng.glorot(sh.d, sh.answers),
                rng.uniform_tensor(&[sh.answers], 0.5),
                rng.uniform_tensor(&[sh.d], 0.5),
                rng.uniform_tensor(&[sh.d], 0.5),
                rng.glorot(sh.n, sh.answers),
                rng.glorot(sh.m, sh.answers),
                rng.uniform_tensor(&[rows, sh.n], 1.0),
                rng.uniform_tensor(&[rows, sh.m], 1.0),
            ];
            let r = rng.uniform_tensor(&[rows * sh.answers], 1.0);
            let f = move |t: &mut Tape, v: &[Var]| {
                let w = ShortcutVars { pooling: pooling_vars(v), hx: v[6], hy: v[7] };
                let out = shortcut_graph(t, &w, v[8], v[9], Activation::Tanh)?;
                project(t, out, &r)
            };
            run.check("shortcut_pool", trial, label.clone(), f, &params)?;
        }

        // compact bilinear pooling
        {
            let d = 1 + rng.below(7);
            let sketch = SketchParams::sample(sh.n, sh.m, d, &mut rng)?;
            let params = vec![rng.uniform_tensor(&[rows, sh.n], 1.0), rng.uniform_tensor(&[rows, sh.m], 1.0)];
            let r = rng.uniform_tensor(&[rows * d], 1.0);
            let f = move |t: &mut Tape, v: &[Var]| {
                let out = t.custom(Box::new(CompactBilinearOp::new(sketch.clone())), &[v[0], v[1]])?;
                project(t, out, &r)
            };
            run.check("compact_bilinear_pool", trial, format!("{label} sketch_d={d}"), f, &params)?;
        }

        // signed square root then row-wise l2 normalization
        {
            let params = vec![away_from_zero(&mut rng, &[rows, sh.d + 1])];
            let r = rng.uniform_tensor(&[rows * (sh.d + 1)], 1.0);
            let f = move |t: &mut Tape, v: &[Var]| {
                let s = t.activation(v[0], Activation::SignedSqrt);
                let out = t.l2_normalize_rows(s)?;
                project(t, out, &r)
            };
            run.check("signed_sqrt_l2_rows", trial, label.clone(), f, &params)?;
        }

        // softmax + cross-entropy on logits
        {
            let target = rng.below(sh.answers);
            let params = vec![rng.uniform_tensor(&[1, sh.answers], 2.0)];
            let f = move |t: &mut Tape, v: &[Var]| {
                let p = t.softmax_rows(v[0])?;
                t.nll(p, target)
            };
            run.check("softmax_cross_entropy", trial, label.clone(), f, &params)?;
        }

        let dims = sh.dims();
        let q = rng.uniform_tensor(&[sh.n], 1.0);
        let feats = rng.uniform_tensor(&[dims.cells(), sh.m], 1.0);
        let target = rng.below(sh.answers);

        // MLB, MARN and MLB with a fixed dropout mask; inputs included
        for (name, shortcut, dropout) in
            [("mlb_loss", false, false), ("marn_loss", true, false), ("mlb_loss_dropout", false, true)]
        {
            let mut model = AttentionModelParams::init(dims, true, 0.5, &mut rng.derive(name))?;
            if shortcut {
                model = model.with_shortcut(&mut rng.derive("shortcut"));
            }
            for p in model.tensors_mut() {
                // nonzero biases exercise every path
                if p.rank() == 1 {
                    *p = rng.uniform_tensor(p.shape(), 0.3);
                }
            }
            let mut params: Vec<Tensor> = model.named_tensors().into_iter().map(|e| e.1.clone()).collect();
            let k = params.len();
            params.push(q.clone());
            params.push(feats.clone());
            let f = move |t: &mut Tape, v: &[Var]| {
                let vars = model.vars_from_slice(&v[..k])?;
                let mut mask_rng = Rng::new(17);
                let drop = if dropout { Some(&mut mask_rng) } else { None };
                let (_, probs) = forward_graph(t, &model, &vars, v[k], v[k + 1], drop)?;
                t.nll(probs, target)
            };
            run.check(name, trial, label.clone(), f, &params)?;
        }

        // compact-pooling attention network, trainable tensors only
        {
            let model = McbParams::init(dims, 1 + rng.below(7), &mut rng.derive("mcb"))?;
            let params: Vec<Tensor> = model.named_tensors().into_iter().map(|e| e.1.clone()).collect();
            let (qc, fc) = (q.clone(), feats.clone());
            let f = move |t: &mut Tape, v: &[Var]| {
                let qv = t.leaf(qc.clone());
                let fv = t.leaf(fc.clone());
                let (_, probs) = mcb_forward_graph(t, &model, v, qv, fv, None)?;
                t.nll(probs, target)
            };
            run.check("mcb_loss", trial, label.clone(), f, &params)?;
        }

        // linear baseline
        {
            let model = LinearParams::init(dims, &mut rng.derive("linear"))?;
            let params = vec![model.w.clone(), model.b.clone(), q.clone(), feats.clone()];
            let f = move |t: &mut Tape, v: &[Var]| {
                let probs = linear_forward_graph(t, &model, &v[..2], v[2], v[3])?;
                t.nll(probs, target)
            };
            run.check("linear_loss", trial, label.clone(), f, &params)?;
        }
    }
    let max = run.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    let pass = run.entries.iter().all(|e| e.pass);
    Ok(GradcheckReport {
        seed,
        step: cfg.step,
        tolerance: cfg.tolerance,
        entries: run.entries,
        max_rel_error: max,
        pass,
    })
}
