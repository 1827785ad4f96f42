//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mlb_cli::commands::{params_table, ParamsConfig};
use mlb_cli::equiv::{run_equiv, EquivConfig, EquivReport};
use mlb_cli::gradcheck::{run_gradcheck, GradcheckConfig};
use mlb_core::attention::{attend, forward, forward_graph, AttentionModelParams, ModelDims};
use mlb_core::data::{generate_toy_dataset, sample_answer, vqa_accuracy, AnswerMultiset, ToyConfig};
use mlb_core::pooling::{count_params, ParamDims, PoolingKind, RankMode};
use mlb_core::sketch::{bucket_statistics, inner_product_estimate};
use mlb_core::tensor::grad_check;
use mlb_core::training::{run_experiment, ExperimentConfig, HyperParams, Model, ModelOptions, Variant};
use mlb_core::{Rng, Tape, Var};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn entry(report: &EquivReport, name: &str) -> f64 {
    report.entries.iter().find(|e| e.name == name).unwrap_or_else(|| panic!("no entry {name}")).max_deviation
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed < Duration::from_secs(secs)
}

fn low_rank_reconstruction() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut instances = 0;
    for (i, (n, m, d, outputs)) in
        [(6, 6, 4, 3), (1, 1, 1, 1), (3, 5, 2, 2), (6, 2, 4, 1), (4, 6, 3, 3)].into_iter().enumerate()
    {
        let cfg = EquivConfig { instances: 100, n, m, d, outputs, rank_mode: RankMode::Free, ..EquivConfig::default() };
        let report = run_equiv(&cfg, 100 + i as u64).expect("equiv");
        worst = worst.max(entry(&report, "low_rank_reconstruction"));
        instances += cfg.instances;
    }
    let t = start.elapsed();
    outcome(worst < 1e-12 && within(t, 5), format!("{instances} instances, max |diff| {worst:e}, {t:.2?}"))
}

fn expansion_identity() -> Outcome {
    let start = Instant::now();
    let report = run_equiv(&EquivConfig::default(), 2).expect("equiv");
    let dev = entry(&report, "full_model_expansion");
    let t = start.elapsed();
    outcome(dev <= 1e-10 && within(t, 5), format!("100 instances, max |diff| {dev:e}, {t:.2?}"))
}

fn sketch_identities() -> Outcome {
    let start = Instant::now();
    let cfg = EquivConfig { sketch_dim: 7, max_conv_len: 256, instances: 100, ..EquivConfig::default() };
    let report = run_equiv(&cfg, 3).expect("equiv");
    let (a, b, c) = (
        entry(&report, "fft_convolution"),
        entry(&report, "compact_vs_outer_product_sketch"),
        entry(&report, "hashed_bilinear_form"),
    );
    let t = start.elapsed();
    outcome(
        a < 1e-9 && b <= 1e-9 && c <= 1e-12 && within(t, 30),
        format!("(a) fft {a:e} (b) outer product {b:e} (c) hashed form {c:e}, {t:.2?}"),
    )
}

fn sketch_moments() -> Outcome {
    let start = Instant::now();
    let rng = Rng::new(4);
    let s = bucket_statistics(8, 8, 4, 20_000, &rng.derive("buckets")).expect("buckets");
    let mut v = rng.derive("vectors");
    let x = v.uniform_tensor(&[8], 1.0);
    let y = v.uniform_tensor(&[8], 1.0);
    let ip = inner_product_estimate(&x, &y, 10_000, 4, &rng.derive("inner-product")).expect("estimate");
    let mean_ok = (s.empirical_mean - 16.0).abs() <= 0.01 * 16.0 && s.expected_mean == 16.0;
    let var_ok = (s.empirical_variance - 12.0).abs() <= 0.10 * 12.0 && s.expected_variance == 12.0;
    let z = ip.z_score();
    let t = start.elapsed();
    outcome(
        mean_ok && var_ok && z.abs() <= 3.0 && within(t, 60),
        format!("mean {:.4} variance {:.4} inner-product z {z:.3}, {t:.2?}", s.empirical_mean, s.empirical_variance),
    )
}

fn parameter_accounting() -> Outcome {
    let compact =
        count_params(PoolingKind::Compact, ParamDims { n: 2400, m: 2048, d: 16_000, outputs: 3000 }).expect("count");
    let low =
        count_params(PoolingKind::LowRank, ParamDims { n: 2400, m: 2048, d: 1200, outputs: 2000 }).expect("count");
    let r = low.per_output_ratio;
    let table = params_table(&ParamsConfig::default()).expect("table");
    let row_ok = table.lines().any(|l| l.starts_with("low_rank,") && l.ends_with(",4449,6448,0.6900"));
    let pass = compact.count == 48_000_000
        && (r.numerator, r.denominator) == (4449, 6448)
        && r.value == 4449.0 / 6448.0
        && row_ok;
    outcome(
        pass,
        format!("compact {} low-rank ratio {}/{} = {:.6}", compact.count, r.numerator, r.denominator, r.value),
    )
}

fn desk_gradient() -> Outcome {
    let start = Instant::now();
    let hp = HyperParams::default();
    let Model::Attention(mut model) =
        Model::init(Variant::Mlb, &hp, &ModelOptions::default(), &Rng::new(61)).expect("init")
    else {
        unreachable!()
    };
    let mut rng = Rng::new(62);
    for t in model.tensors_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = rng.uniform_tensor(t.shape(), 0.1);
        }
    }
    let ds = generate_toy_dataset(&ToyConfig { count: 4, ..ToyConfig::default() }, &Rng::new(63)).expect("data");
    let params: Vec<_> = model.named_tensors().into_iter().map(|(_, t, _)| t.clone()).collect();
    let count: usize = params.iter().map(|p| p.len()).sum();
    let loss = |t: &mut Tape, vars: &[Var]| {
        let mv = model.vars_from_slice(vars)?;
        let mut parts = Vec::new();
        for s in &ds.samples {
            let q = t.leaf(s.q.clone());
            let f = t.leaf(s.f.clone());
            let (_, p) = forward_graph(t, &model, &mv, q, f, None)?;
            parts.push(t.nll(p, s.label)?);
        }
        t.add_n(&parts)
    };
    let desk = grad_check(loss, &params, 1e-6).expect("grad check");
    let suite = run_gradcheck(&GradcheckConfig::default(), 6).expect("gradcheck suite");
    let t = start.elapsed();
    outcome(
        desk < 1e-5 && suite.pass && within(t, 60),
        format!(
            "{count} parameters at N=32 M=16 d=32 S=4, max rel error {desk:e}; random-shape suite {:e}, {t:.2?}",
            suite.max_rel_error
        ),
    )
}

fn normalization() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..1000u64 {
        let mut rng = Rng::new(7000 + i);
        let dims = ModelDims {
            n: 1 + rng.below(8),
            m: 1 + rng.below(8),
            d: 1 + rng.below(6),
            glimpses: 1 + rng.below(3),
            lattice: 1 + rng.below(4),
            answers: 2 + rng.below(6),
        };
        let mut params = AttentionModelParams::init(dims, rng.bernoulli(0.5), 0.0, &mut rng).expect("init");
        let scale = rng.uniform(0.1, 5.0);
        for t in params.tensors_mut() {
            *t = rng.uniform_tensor(t.shape(), scale);
        }
        let q = rng.uniform_tensor(&[dims.n], 3.0);
        let f = rng.uniform_tensor(&[dims.cells(), dims.m], 3.0);
        let alpha = attend(&params, &q, &f).expect("attend");
        for g in 0..dims.glimpses {
            worst = worst.max((alpha.row(g).iter().sum::<f64>() - 1.0).abs());
        }
        worst = worst.max((forward(&params, &q, &f).expect("forward").sum() - 1.0).abs());
    }
    outcome(worst <= 1e-12, format!("1000 instances, max |sum - 1| {worst:e}"))
}

fn answer_sampling() -> Outcome {
    let mut rng = Rng::new(8);
    let draws = 100_000usize;
    let ms = AnswerMultiset::new([(0, 7), (1, 3)]);
    let hits = (0..draws).filter(|_| sample_answer(&ms, &mut rng).expect("draw") == 1).count() as f64;
    let p = 0.3;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let z = (hits - draws as f64 * p) / sigma;
    let two = AnswerMultiset::new([(0, 8), (1, 2)]);
    let never = (0..draws).all(|_| sample_answer(&two, &mut rng).expect("draw") == 0);
    let metric: Vec<f64> = [0, 1, 2, 3, 7].into_iter().map(|c| vqa_accuracy(c).expect("metric")).collect();
    let metric_ok = metric == [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0];
    outcome(
        z.abs() <= 3.0 && never && metric_ok,
        format!("frequency z {z:.3}, two-vote runner-up never drawn: {never}, metric {metric:?}"),
    )
}

fn learnability() -> Outcome {
    let base = ExperimentConfig::default();
    let start = Instant::now();
    let g1 = run_experiment(&base, 1).expect("mlb g1");
    let t1 = start.elapsed();
    let acc = |e: &mlb_core::training::Experiment| e.rows.last().expect("rows").eval_acc;
    let mut cfg = base;
    cfg.hyper.glimpses = 2;
    let g2 = run_experiment(&cfg, 1).expect("mlb g2");
    let linear = run_experiment(&ExperimentConfig { variant: Variant::BaselineLinear, ..base }, 1).expect("linear");
    let (a1, a2, al) = (acc(&g1), acc(&g2), acc(&linear));
    outcome(
        a1 >= 0.90 && base.hyper.iterations <= 5000 && within(t1, 300) && al <= 0.65 && a2 >= a1 - 0.02,
        format!("MLB G=1 {a1:.3} in {t1:.1?}, G=2 {a2:.3}, linear {al:.3}"),
    )
}

fn hobm() -> Outcome {
    let report = run_equiv(&EquivConfig { instances: 200, ..EquivConfig::default() }, 10).expect("equiv");
    let dev = entry(&report, "hobm_factored_energy");
    outcome(dev <= 1e-10, format!("200 instances, max |diff| {dev:e}"))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("read dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).expect("read"));
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let work = tempfile::tempdir().expect("tempdir");
    let ckpt = work.path().join("ckpt");
    let small = [
        "--set",
        "hyper.iterations=40",
        "--set",
        "hyper.eval_interval=20",
        "--set",
        "data.train_samples=200",
        "--set",
        "data.eval_samples=100",
    ];
    let ck = ckpt.join("checkpoint").display().to_string();
    let mut eval_args = vec!["eval", "--checkpoint", ck.as_str()];
    eval_args.extend(small);
    let mut train_args = vec!["train"];
    train_args.extend(small);
    let runs: Vec<Vec<&str>> = vec![
        vec!["gradcheck"],
        vec!["equiv"],
        vec!["sketch-stats"],
        vec!["params", "--set", "sweep=[800,1000,1200,1400]"],
        train_args.clone(),
        eval_args,
    ];
    // eval needs a checkpoint to read
    let status = Command::new(env!("CARGO_BIN_EXE_mlb"))
        .args(&train_args)
        .args(["--seed", "5", "--out"])
        .arg(&ckpt)
        .status()
        .expect("train");
    if !status.success() {
        return outcome(false, "could not write the checkpoint for eval".into());
    }
    let mut bad = Vec::new();
    for args in &runs {
        let out = work.path().join("out");
        let mut seen = Vec::new();
        for _ in 0..2 {
            let _ = std::fs::remove_dir_all(&out);
            let o = Command::new(env!("CARGO_BIN_EXE_mlb"))
                .args(args)
                .args(["--seed", "5", "--out"])
                .arg(&out)
                .output()
                .expect("run mlb");
            seen.push((o.status.code(), o.stdout, o.stderr, snapshot(&out)));
        }
        if seen[0] != seen[1] || seen[0].0 != Some(0) || seen[0].3.is_empty() {
            bad.push(args[0]);
        }
    }
    outcome(bad.is_empty(), format!("{} subcommands run twice; differing or failing: {bad:?}", runs.len()))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("low-rank reconstruction", low_rank_reconstruction),
        ("full-model expansion identity", expansion_identity),
        ("sketch identities", sketch_identities),
        ("sketch moments and inner product", sketch_moments),
        ("parameter accounting", parameter_accounting),
        ("MLB gradient at desk shapes", desk_gradient),
        ("normalization invariants", normalization),
        ("answer sampling and VQA metric", answer_sampling),
        ("multiplicative-fusion learnability", learnability),
        ("HOBM factored energy", hobm),
        ("CLI determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.pass);
        println!("criterion {:>2} {:<36} {}  {}", i + 1, name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
