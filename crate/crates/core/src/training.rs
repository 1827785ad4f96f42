//! Loss, RMSProp with an exponential learning-rate schedule, per-element
//! gradient clipping, the training loop and evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    forward_graph, linear_forward_graph, mcb_forward_graph, mcb_leaves, AttentionModelParams, DropoutRng, LinearParams,
    McbParams, ModelDims,
};
use crate::data::{augment, generate_toy_dataset, sample_answer, vqa_accuracy, Dataset, ToyConfig, ToySample};
use crate::error::{dim_err, Error, Result};
use crate::pooling::Placement;
use crate::store::Bundle;
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Optimizer and model sizes. Defaults keep the published `η`, `λ`, `p`,
/// `θ` and shrink the dimensions to desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// `η`
    pub learning_rate: f64,
    /// `λ`, applied once per iteration.
    pub lr_decay: f64,
    /// `p`
    pub dropout: f64,
    /// `θ`, per-element bound.
    pub clip: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// RMSProp `ρ`.
    pub rms_decay: f64,
    /// RMSProp `ε`.
    pub rms_epsilon: f64,
    /// `G`
    pub glimpses: usize,
    /// `d`
    pub joint_dim: usize,
    /// `S`
    pub lattice: usize,
    /// `N`
    pub question_dim: usize,
    /// `M`
    pub visual_dim: usize,
    /// `|Ω|`
    pub answers: usize,
    /// Iterations between metric rows.
    pub eval_interval: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            lr_decay: 0.99997592083,
            dropout: 0.5,
            clip: 10.0,
            batch_size: 64,
            iterations: 5000,
            rms_decay: 0.99,
            rms_epsilon: 1e-8,
            glimpses: 1,
            joint_dim: 32,
            lattice: 4,
            question_dim: 32,
            visual_dim: 16,
            answers: 2,
            eval_interval: 250,
        }
    }
}

impl HyperParams {
    /// The published single-model configuration, for shape audits.
    pub fn published() -> Self {
        Self {
            batch_size: 100,
            iterations: 250_000,
            glimpses: 2,
            joint_dim: 1200,
            lattice: 14,
            question_dim: 2400,
            visual_dim: 2048,
            answers: 2000,
            eval_interval: 25_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0,1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if !(0.0..1.0).contains(&self.rms_decay) || self.rms_epsilon < 0.0 {
            return bad("rms_decay must be in [0,1) and rms_epsilon non-negative".into());
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be positive".into());
        }
        self.model_dims().validate()
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            n: self.question_dim,
            m: self.visual_dim,
            d: self.joint_dim,
            glimpses: self.glimpses,
            lattice: self.lattice,
            answers: self.answers,
        }
    }

    /// `η·λ^k`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.learning_rate * self.lr_decay.powf(iteration as f64)
    }
}

/// `−ln max(dist[target], 1e-12)`.
pub fn cross_entropy(dist: &Tensor, target: usize) -> Result<f64> {
    if target >= dist.len() {
        return Err(Error::Data(format!("target {target} out of range for {} answers", dist.len())));
    }
    let total = dist.sum();
    if total.is_nan() || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("distribution sums to {total}, not 1")));
    }
    Ok(-dist.data()[target].max(1e-12).ln())
}

/// Clamps every entry to `[−θ, θ]`.
pub fn clip_gradients(grads: &[Tensor], theta: f64) -> Vec<Tensor> {
    grads.iter().map(|g| g.map(|x| x.max(-theta).min(theta))).collect()
}

/// RMSProp state: one running mean square per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub iteration: usize,
    pub acc: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(hp: &HyperParams, shapes: &[&[usize]]) -> Result<Self> {
        let acc = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self {
            learning_rate: hp.learning_rate,
            lr_decay: hp.lr_decay,
            rho: hp.rms_decay,
            epsilon: hp.rms_epsilon,
            iteration: 0,
            acc,
        })
    }

    pub fn effective_lr(&self) -> f64 {
        self.learning_rate * self.lr_decay.powf(self.iteration as f64)
    }

    /// `acc ← ρ acc + (1−ρ) g²; w ← w − lr·g/(√acc + ε)`, then advances the
    /// schedule.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.acc.len() || grads.len() != self.acc.len() {
            return dim_err(format!(
                "optimizer tracks {} tensors, got {} params and {} gradients",
                self.acc.len(),
                params.len(),
                grads.len()
            ));
        }
        for ((p, g), a) in params.iter().zip(grads).zip(&self.acc) {
            if p.shape() != g.shape() || p.shape() != a.shape() {
                return dim_err(format!("gradient {:?} does not match parameter {:?}", g.shape(), p.shape()));
            }
        }
        let lr = self.effective_lr();
        for ((p, g), a) in params.iter_mut().zip(grads).zip(&mut self.acc) {
            for ((w, &gi), ai) in p.data_mut().iter_mut().zip(g.data()).zip(a.data_mut()) {
                *ai = self.rho * *ai + (1.0 - self.rho) * gi * gi;
                if gi != 0.0 {
                    *w -= lr * gi / (ai.sqrt() + self.epsilon);
                }
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "mlb")]
    Mlb,
    #[serde(rename = "marn")]
    Marn,
    #[serde(rename = "mcb-att")]
    McbAtt,
    #[serde(rename = "baseline-linear")]
    BaselineLinear,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Mlb, Variant::Marn, Variant::McbAtt, Variant::BaselineLinear];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Mlb => "mlb",
            Variant::Marn => "marn",
            Variant::McbAtt => "mcb-att",
            Variant::BaselineLinear => "baseline-linear",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// Model options outside the hyperparameter table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    /// Bias terms at both fusion sites and on the answer logits.
    pub biases: bool,
    /// Activation placement at the classifier.
    pub placement: Placement,
    /// Sketch dimension of the compact-pooling variant.
    pub sketch_dim: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self { biases: true, placement: Placement::Before, sketch_dim: 64 }
    }
}

/// A trainable network of any variant.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    /// MLB, or MARN when the parameters carry shortcut maps.
    Attention(AttentionModelParams),
    Mcb(McbParams),
    Linear(LinearParams),
}

enum Handles {
    Attention(crate::attention::MlbVars),
    Flat(Vec<Var>),
}

impl Model {
    pub fn init(variant: Variant, hp: &HyperParams, opts: &ModelOptions, rng: &Rng) -> Result<Model> {
        hp.validate()?;
        let dims = hp.model_dims();
        let mut r = rng.derive(variant.name());
        Ok(match variant {
            Variant::Mlb | Variant::Marn => {
                let p =
                    AttentionModelParams::init(dims, opts.biases, hp.dropout, &mut r)?.with_placement(opts.placement);
                Model::Attention(if variant == Variant::Marn {
                    p.with_shortcut(&mut rng.derive("shortcut"))
                } else {
                    p
                })
            }
            Variant::McbAtt => {
                if opts.sketch_dim == 0 {
                    return Err(Error::Config("sketch_dim must be positive".into()));
                }
                Model::Mcb(McbParams::init(dims, opts.sketch_dim, &mut r)?)
            }
            Variant::BaselineLinear => Model::Linear(LinearParams::init(dims, &mut r)?),
        })
    }

    pub fn variant(&self) -> Variant {
        match self {
            Model::Attention(p) if p.shortcut.is_some() => Variant::Marn,
            Model::Attention(_) => Variant::Mlb,
            Model::Mcb(_) => Variant::McbAtt,
            Model::Linear(_) => Variant::BaselineLinear,
        }
    }

    pub fn dims(&self) -> ModelDims {
        match self {
            Model::Attention(p) => p.dims,
            Model::Mcb(p) => p.dims,
            Model::Linear(p) => p.dims,
        }
    }

    /// `(name, tensor, trainable)` in a fixed order.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor, bool)> {
        match self {
            Model::Attention(p) => p.named_tensors(),
            Model::Mcb(p) => p.named_tensors(),
            Model::Linear(p) => p.named_tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Attention(p) => p.tensors_mut(),
            Model::Mcb(p) => p.tensors_mut(),
            Model::Linear(p) => p.tensors_mut(),
        }
    }

    /// Sets every tensor to zero; the model then predicts uniformly.
    pub fn zero_weights(&mut self) {
        for t in self.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
    }

    fn trainable_mask(&self) -> Vec<bool> {
        self.named_tensors().into_iter().map(|(_, _, tr)| tr).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.named_tensors().into_iter().filter(|e| e.2).map(|e| e.1.len()).sum()
    }

    fn leaves(&self, t: &mut Tape) -> (Handles, Vec<Var>) {
        match self {
            Model::Attention(p) => {
                let v = p.leaves(t);
                let list = AttentionModelParams::var_list(&v);
                (Handles::Attention(v), list)
            }
            Model::Mcb(p) => {
                let v = mcb_leaves(p, t);
                (Handles::Flat(v.clone()), v)
            }
            Model::Linear(p) => {
                let v = p.named_tensors().into_iter().map(|(_, x, _)| t.leaf(x.clone())).collect::<Vec<_>>();
                (Handles::Flat(v.clone()), v)
            }
        }
    }

    fn probs_graph(&self, t: &mut Tape, h: &Handles, q: Var, f: Var, rng: DropoutRng<'_>) -> Result<Var> {
        match (self, h) {
            (Model::Attention(p), Handles::Attention(v)) => Ok(forward_graph(t, p, v, q, f, rng)?.1),
            (Model::Mcb(p), Handles::Flat(v)) => Ok(mcb_forward_graph(t, p, v, q, f, rng)?.1),
            (Model::Linear(p), Handles::Flat(v)) => linear_forward_graph(t, p, v, q, f),
            _ => unreachable!("handles always come from the same model"),
        }
    }

    /// Evaluation-mode answer distribution.
    pub fn forward(&self, q: &Tensor, f: &Tensor) -> Result<Tensor> {
        let dims = self.dims();
        if q.len() != dims.n || f.shape() != [dims.cells(), dims.m] {
            return dim_err(format!("model expects q[{}] and F[{}×{}]", dims.n, dims.cells(), dims.m));
        }
        let mut t = Tape::new();
        let (h, _) = self.leaves(&mut t);
        let qv = t.leaf(q.clone());
        let fv = t.leaf(f.clone());
        let p = self.probs_graph(&mut t, &h, qv, fv, None)?;
        Ok(Tensor::from_vec(t.value(p).data().to_vec()))
    }

    pub fn predict(&self, q: &Tensor, f: &Tensor) -> Result<usize> {
        Ok(self.forward(q, f)?.argmax())
    }

    /// Mean cross-entropy of `targets` over `samples`, recorded on a fresh
    /// tape with the parameter leaves in [`Model::named_tensors`] order.
    pub fn loss_graph(
        &self,
        t: &mut Tape,
        samples: &[(&ToySample, usize)],
        mut rng: DropoutRng<'_>,
    ) -> Result<(Var, Vec<Var>)> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let (h, params) = self.leaves(t);
        let mut losses = Vec::with_capacity(samples.len());
        for (s, target) in samples {
            let qv = t.leaf(s.q.clone());
            let fv = t.leaf(s.f.clone());
            let p = self.probs_graph(t, &h, qv, fv, rng.as_deref_mut())?;
            losses.push(t.nll(p, *target)?);
        }
        let total = t.add_n(&losses)?;
        Ok((t.scale(total, 1.0 / samples.len() as f64), params))
    }

    pub fn to_bundle(&self, seed: u64) -> Bundle {
        match self {
            Model::Attention(p) => p.to_bundle(self.variant().name(), seed),
            Model::Mcb(p) => p.to_bundle(seed),
            Model::Linear(p) => p.to_bundle(seed),
        }
    }

    pub fn from_bundle(b: Bundle) -> Result<Model> {
        let variant: Variant = b.meta["variant"]
            .as_str()
            .ok_or_else(|| Error::Format("checkpoint manifest has no variant".into()))?
            .parse()
            .map_err(|e: Error| Error::Format(e.to_string()))?;
        let model = match variant {
            Variant::Mlb | Variant::Marn => Model::Attention(AttentionModelParams::from_bundle(b)?),
            Variant::McbAtt => Model::Mcb(McbParams::from_bundle(b)?),
            Variant::BaselineLinear => Model::Linear(LinearParams::from_bundle(b)?),
        };
        if model.variant() != variant {
            return Err(Error::Format(format!("checkpoint claims {variant} but holds {}", model.variant())));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Prediction equals the sample label.
    Exact,
    /// `min(|a_k|/3, 1)` against the sample's annotations.
    Vqa,
}

fn check_dims(model: &ModelDims, ds: &Dataset) -> Result<()> {
    let d = ds.dims;
    if (d.n, d.m, d.lattice, d.answers) != (model.n, model.m, model.lattice, model.answers) {
        return Err(Error::Data(format!("dataset dims {d:?} do not match model dims {model:?}")));
    }
    Ok(())
}

/// Mean metric of an arbitrary predictor over a dataset; 0 when empty.
pub fn evaluate_with(
    ds: &Dataset,
    metric: Metric,
    mut predict: impl FnMut(&ToySample) -> Result<usize>,
) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in &ds.samples {
        let a = predict(s)?;
        total += match metric {
            Metric::Exact => f64::from(u8::from(a == s.label)),
            Metric::Vqa => vqa_accuracy(i64::from(s.answers.count_of(a)))?,
        };
    }
    Ok(total / ds.len() as f64)
}

pub fn evaluate(model: &Model, ds: &Dataset, metric: Metric) -> Result<f64> {
    check_dims(&model.dims(), ds)?;
    evaluate_with(ds, metric, |s| model.predict(&s.q, &s.f))
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iter: usize,
    /// Evaluation-mode cross-entropy against the labels of the monitored
    /// training subset.
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    /// Learning rate of the next update.
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "iter,loss,train_acc,eval_acc,lr";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.iter, self.loss, self.train_acc, self.eval_acc, self.lr)
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    /// Draw each target from the annotations instead of using the mode.
    pub answer_sampling: bool,
    /// Training samples monitored for `loss` and `train_acc`.
    pub monitor_samples: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { answer_sampling: true, monitor_samples: 512 }
    }
}

fn snapshot(
    model: &Model,
    train: &Dataset,
    eval: &Dataset,
    opts: &TrainOptions,
    iter: usize,
    lr: f64,
) -> Result<MetricsRow> {
    let k = opts.monitor_samples.min(train.len());
    let (mut loss, mut hits) = (0.0, 0usize);
    for s in &train.samples[..k] {
        let p = model.forward(&s.q, &s.f)?;
        let pt = p.data()[s.label];
        loss += if pt.is_nan() { pt } else { -pt.max(1e-12).ln() };
        hits += usize::from(p.argmax() == s.label);
    }
    let denom = k.max(1) as f64;
    Ok(MetricsRow {
        iter,
        loss: loss / denom,
        train_acc: hits as f64 / denom,
        eval_acc: evaluate(model, eval, Metric::Exact)?,
        lr,
    })
}

/// Trains in place and returns the metrics log: a row before the first
/// update, every `eval_interval` iterations, and after the last one.
///
/// Minibatches walk a fresh permutation of the training set each epoch.
/// Dropout masks and sampled answers come from per-iteration sub-streams of
/// `rng`, so the run is a pure function of its inputs.
pub fn train(
    model: &mut Model,
    train: &Dataset,
    eval: &Dataset,
    hp: &HyperParams,
    opts: &TrainOptions,
    rng: &Rng,
) -> Result<Vec<MetricsRow>> {
    hp.validate()?;
    check_dims(&model.dims(), train)?;
    check_dims(&model.dims(), eval)?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mask = model.trainable_mask();
    let shapes: Vec<Vec<usize>> = model.named_tensors().iter().filter(|e| e.2).map(|e| e.1.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = RmsProp::new(hp, &shape_refs)?;
    let mut rows = vec![snapshot(model, train, eval, opts, 0, opt.effective_lr())?];

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for iter in 0..hp.iterations {
        let mut batch = Vec::with_capacity(hp.batch_size);
        let mut answer_rng = rng.derive_indexed("answers", iter as u64);
        while batch.len() < hp.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                rng.derive_indexed("epoch", epoch).shuffle(&mut order);
                epoch += 1;
                cursor = 0;
            }
            let s = &train.samples[order[cursor]];
            cursor += 1;
            let target = if opts.answer_sampling {
                sample_answer(&s.answers, &mut answer_rng)?
            } else {
                s.answers.mode().unwrap_or(s.label)
            };
            batch.push((s, target));
        }
        let mut t = Tape::new();
        let mut drop_rng = rng.derive_indexed("dropout", iter as u64);
        let (loss, vars) = model.loss_graph(&mut t, &batch, Some(&mut drop_rng))?;
        let value = t.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { iteration: iter, loss: value });
        }
        let grads = t.backward(loss)?;
        let raw: Vec<Tensor> = vars.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| grads.get(*v)).collect();
        let clipped = clip_gradients(&raw, hp.clip);
        let mut params: Vec<&mut Tensor> =
            model.tensors_mut().into_iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| p).collect();
        opt.step(&mut params, &clipped)?;
        let done = iter + 1;
        if done % hp.eval_interval == 0 || done == hp.iterations {
            rows.push(snapshot(model, train, eval, opts, done, opt.effective_lr())?);
        }
    }
    Ok(rows)
}

/// Toy-task sizes for an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataOptions {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub distractors: usize,
    pub divided_rate: f64,
    /// Size of the singleton-annotated augmentation pool.
    pub extra_samples: usize,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self { train_samples: 4000, eval_samples: 1000, distractors: 4, divided_rate: 0.0, extra_samples: 0 }
    }
}

/// Everything a toy training run depends on besides the seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub hyper: HyperParams,
    pub model: ModelOptions,
    pub data: DataOptions,
    pub train: TrainOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Mlb,
            hyper: HyperParams::default(),
            model: ModelOptions::default(),
            data: DataOptions::default(),
            train: TrainOptions::default(),
        }
    }
}

impl ExperimentConfig {
    fn toy(&self, count: usize) -> ToyConfig {
        let h = &self.hyper;
        ToyConfig {
            lattice: h.lattice,
            n: h.question_dim,
            m: h.visual_dim,
            answers: h.answers,
            count,
            distractors: self.data.distractors,
            divided_rate: self.data.divided_rate,
        }
    }

    /// `(train, eval)` sets drawn from independent sub-streams of `seed`.
    pub fn datasets(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let rng = Rng::new(seed);
        let base = generate_toy_dataset(&self.toy(self.data.train_samples), &rng.derive("train-data"))?;
        let extra = generate_toy_dataset(&self.toy(self.data.extra_samples), &rng.derive("extra-data"))?;
        let eval = generate_toy_dataset(&self.toy(self.data.eval_samples), &rng.derive("eval-data"))?;
        Ok((augment(&base, &extra)?, eval))
    }

    pub fn init_model(&self, seed: u64) -> Result<Model> {
        Model::init(self.variant, &self.hyper, &self.model, &Rng::new(seed).derive("model"))
    }
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: Model,
    pub rows: Vec<MetricsRow>,
    pub eval: Dataset,
}

/// Generates data, initializes and trains one model.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<Experiment> {
    let (train_set, eval) = cfg.datasets(seed)?;
    let mut model = cfg.init_model(seed)?;
    let rows = train(&mut model, &train_set, &eval, &cfg.hyper, &cfg.train, &Rng::new(seed).derive("train"))?;
    Ok(Experiment { model, rows, eval })
}
