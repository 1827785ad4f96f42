//! Subcommand bodies. Each resolves its config, writes its artifacts under
//! `--out` and returns an exit code; errors map through [`crate::exit_code`].

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use mlb_core::pooling::{count_params, ParamDims, PoolingKind};
use mlb_core::sketch::{bucket_statistics, inner_product_estimate};
use mlb_core::store::Bundle;
use mlb_core::training::{evaluate, metrics_csv, run_experiment, ExperimentConfig, Metric, Model};
use mlb_core::{Error, Result, Rng};
use serde::{Deserialize, Serialize};

use crate::config::resolve;
use crate::equiv::{run_equiv, EquivConfig};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::{Command, Common, EXIT_OK, EXIT_VERIFY};

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn to_json(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn verdict(pass: bool) -> i32 {
    if pass {
        EXIT_OK
    } else {
        EXIT_VERIFY
    }
}

pub fn dispatch(cmd: &Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Gradcheck(c) => cmd_gradcheck(c, out),
        Command::Equiv(c) => cmd_equiv(c, out),
        Command::SketchStats(c) => cmd_sketch_stats(c, out),
        Command::Params(c) => cmd_params(c, out),
        Command::Train(c) => cmd_train(c, out),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint.as_deref(), out),
    }
}

fn cmd_gradcheck(c: &Common, out: &mut dyn Write) -> Result<i32> {
    let cfg: GradcheckConfig = resolve(c.config.as_deref(), &c.set)?;
    let report = run_gradcheck(&cfg, c.seed)?;
    write_file(&c.out, "gradcheck.json", &to_json(&report)?)?;
    for e in &report.entries {
        writeln!(out, "{:<28} trial {} max_rel_error {:e} {}", e.name, e.trial, e.max_rel_error, pass_word(e.pass))?;
    }
    writeln!(
        out,
        "gradcheck: {} checks, max relative error {:e}, {}",
        report.entries.len(),
        report.max_rel_error,
        pass_word(report.pass)
    )?;
    Ok(verdict(report.pass))
}

fn pass_word(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

fn cmd_equiv(c: &Common, out: &mut dyn Write) -> Result<i32> {
    let cfg: EquivConfig = resolve(c.config.as_deref(), &c.set)?;
    let report = run_equiv(&cfg, c.seed)?;
    write_file(&c.out, "equiv.json", &to_json(&report)?)?;
    for e in &report.entries {
        writeln!(out, "{:<36} max deviation {:e} {}", e.name, e.max_deviation, pass_word(e.pass))?;
    }
    Ok(verdict(report.pass))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SketchStatsConfig {
    pub n_x: usize,
    pub n_y: usize,
    /// Sketch dimension.
    pub d: usize,
    /// Hash draws for the bucket moments; at least 1000.
    pub trials: usize,
    /// Hash draws for the inner-product estimate; at least 1000.
    pub inner_product_trials: usize,
    /// Length of the two vectors whose inner product is estimated.
    pub inner_product_dim: usize,
    /// Relative tolerance on the bucket-count mean.
    pub mean_tolerance: f64,
    /// Relative tolerance on the bucket-count variance.
    pub variance_tolerance: f64,
    /// Largest accepted |z| of the inner-product estimate.
    pub z_limit: f64,
}

impl Default for SketchStatsConfig {
    fn default() -> Self {
        Self {
            n_x: 8,
            n_y: 8,
            d: 4,
            trials: 20_000,
            inner_product_trials: 10_000,
            inner_product_dim: 8,
            mean_tolerance: 0.01,
            variance_tolerance: 0.10,
            z_limit: 3.0,
        }
    }
}

fn relative(emp: f64, exp: f64) -> f64 {
    if exp == 0.0 {
        emp.abs()
    } else {
        (emp - exp).abs() / exp.abs()
    }
}

fn cmd_sketch_stats(c: &Common, out: &mut dyn Write) -> Result<i32> {
    let cfg: SketchStatsConfig = resolve(c.config.as_deref(), &c.set)?;
    if cfg.trials < 1000 || cfg.inner_product_trials < 1000 {
        return Err(Error::Config("sketch-stats needs at least 1000 trials".into()));
    }
    if cfg.inner_product_dim == 0 {
        return Err(Error::Config("inner_product_dim must be positive".into()));
    }
    let rng = Rng::new(c.seed);
    let stats = bucket_statistics(cfg.n_x, cfg.n_y, cfg.d, cfg.trials, &rng.derive("buckets"))?;
    let mut vectors = rng.derive("vectors");
    let x = vectors.uniform_tensor(&[cfg.inner_product_dim], 1.0);
    let y = vectors.uniform_tensor(&[cfg.inner_product_dim], 1.0);
    let ip = inner_product_estimate(&x, &y, cfg.inner_product_trials, cfg.d, &rng.derive("inner-product"))?;

    let rows = [
        (
            "bucket_mean",
            stats.empirical_mean,
            stats.expected_mean,
            relative(stats.empirical_mean, stats.expected_mean),
            cfg.mean_tolerance,
        ),
        (
            "bucket_variance",
            stats.empirical_variance,
            stats.expected_variance,
            relative(stats.empirical_variance, stats.expected_variance),
            cfg.variance_tolerance,
        ),
        ("inner_product_z", ip.mean_estimate, ip.exact, ip.z_score().abs(), cfg.z_limit),
    ];
    let mut csv = String::from("quantity,empirical,expected,deviation,limit,pass\n");
    let mut pass = true;
    for (name, emp, exp, dev, limit) in rows {
        let ok = dev <= limit;
        pass &= ok;
        writeln!(csv, "{name},{emp},{exp},{dev},{limit},{ok}").expect("string write");
    }
    write_file(&c.out, "sketch_stats.csv", &csv)?;
    out.write_all(csv.as_bytes())?;
    Ok(verdict(pass))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsConfig {
    pub n: u64,
    pub m: u64,
    /// Joint embedding size.
    pub d: u64,
    /// Output count `c` (answers, or `L` for full bilinear pooling).
    pub outputs: u64,
    /// Extra joint sizes to tabulate, e.g. `[800,1000,1200,1400]`.
    pub sweep: Vec<u64>,
}

impl Default for ParamsConfig {
    fn default() -> Self {
        Self { n: 2400, m: 2048, d: 1200, outputs: 2000, sweep: Vec::new() }
    }
}

/// `kind,n,m,d,outputs,count,ratio_numerator,ratio_denominator,ratio`.
pub fn params_table(cfg: &ParamsConfig) -> Result<String> {
    let mut csv = String::from("kind,n,m,d,outputs,count,ratio_numerator,ratio_denominator,ratio\n");
    let mut ds = vec![cfg.d];
    ds.extend(cfg.sweep.iter().copied().filter(|d| *d != cfg.d));
    for d in ds {
        let dims = ParamDims { n: cfg.n, m: cfg.m, d, outputs: cfg.outputs };
        for (kind, name) in [
            (PoolingKind::FullBilinear, "full_bilinear"),
            (PoolingKind::LowRank, "low_rank"),
            (PoolingKind::Compact, "compact"),
        ] {
            let pc = count_params(kind, dims)?;
            let r = pc.per_output_ratio;
            writeln!(
                csv,
                "{name},{},{},{d},{},{},{},{},{:.4}",
                cfg.n, cfg.m, cfg.outputs, pc.count, r.numerator, r.denominator, r.value
            )
            .expect("string write");
        }
    }
    Ok(csv)
}

fn cmd_params(c: &Common, out: &mut dyn Write) -> Result<i32> {
    let cfg: ParamsConfig = resolve(c.config.as_deref(), &c.set)?;
    let csv = params_table(&cfg)?;
    write_file(&c.out, "params.csv", &csv)?;
    out.write_all(csv.as_bytes())?;
    Ok(EXIT_OK)
}

fn cmd_train(c: &Common, out: &mut dyn Write) -> Result<i32> {
    let cfg: ExperimentConfig = resolve(c.config.as_deref(), &c.set)?;
    let exp = run_experiment(&cfg, c.seed)?;
    write_file(&c.out, "metrics.csv", &metrics_csv(&exp.rows))?;
    write_file(&c.out, "config.json", &to_json(&cfg)?)?;
    let mut bundle = exp.model.to_bundle(c.seed);
    bundle.meta["experiment"] = serde_json::to_value(cfg)?;
    bundle.meta["rng"] = mlb_core::tensor::RNG_ALGORITHM.into();
    bundle.save(c.out.join("checkpoint"))?;
    let last = exp.rows.last().expect("at least the initial row");
    writeln!(
        out,
        "{} trained {} iterations: loss {} train_acc {} eval_acc {}",
        cfg.variant, last.iter, last.loss, last.train_acc, last.eval_acc
    )?;
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct EvalReport {
    variant: String,
    checkpoint: Option<String>,
    samples: usize,
    exact: f64,
    vqa: f64,
}

fn cmd_eval(c: &Common, checkpoint: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let cfg: ExperimentConfig = resolve(c.config.as_deref(), &c.set)?;
    let (_, eval) = cfg.datasets(c.seed)?;
    let model = match checkpoint {
        Some(dir) => Model::from_bundle(Bundle::load(dir)?)?,
        None => {
            let mut m = cfg.init_model(c.seed)?;
            m.zero_weights();
            m
        }
    };
    if model.dims() != cfg.hyper.model_dims() {
        return Err(Error::Format(format!(
            "checkpoint dims {:?} do not match the configured dims {:?}",
            model.dims(),
            cfg.hyper.model_dims()
        )));
    }
    let report = EvalReport {
        variant: model.variant().to_string(),
        checkpoint: checkpoint.map(|p| p.display().to_string()),
        samples: eval.len(),
        exact: evaluate(&model, &eval, Metric::Exact)?,
        vqa: evaluate(&model, &eval, Metric::Vqa)?,
    };
    write_file(&c.out, "eval.json", &to_json(&report)?)?;
    writeln!(out, "{} on {} samples: exact {} vqa {}", report.variant, report.samples, report.exact, report.vqa)?;
    Ok(EXIT_OK)
}
