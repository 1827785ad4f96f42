use mlb_core::attention::forward_graph;
use mlb_core::data::{generate_toy_dataset, AnswerMultiset, Dataset, ToyConfig};
use mlb_core::store::Bundle;
use mlb_core::tensor::grad_check;
use mlb_core::training::{
    evaluate, evaluate_with, metrics_csv, run_experiment, train, ExperimentConfig, HyperParams, Metric, Model,
    ModelOptions, TrainOptions, Variant, METRICS_HEADER,
};
use mlb_core::{Error, Rng, Tape};

fn small(iterations: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.hyper.iterations = iterations;
    cfg.hyper.eval_interval = 10;
    cfg.hyper.batch_size = 8;
    cfg.data.train_samples = 64;
    cfg.data.eval_samples = 32;
    cfg.train.monitor_samples = 16;
    cfg
}

#[test]
fn training_is_bit_reproducible() {
    for variant in Variant::ALL {
        let cfg = ExperimentConfig { variant, ..small(25) };
        let a = run_experiment(&cfg, 4).unwrap();
        let b = run_experiment(&cfg, 4).unwrap();
        assert_eq!(metrics_csv(&a.rows), metrics_csv(&b.rows), "{variant}");
        assert_eq!(a.model.named_tensors(), b.model.named_tensors(), "{variant}");
        assert_eq!(a.rows.iter().map(|r| r.iter).collect::<Vec<_>>(), [0, 10, 20, 25]);
    }
}

#[test]
fn zero_iterations_log_only_the_initial_row() {
    let cfg = small(0);
    let exp = run_experiment(&cfg, 1).unwrap();
    assert_eq!(exp.rows.len(), 1);
    assert_eq!(exp.model, cfg.init_model(1).unwrap());
    let csv = metrics_csv(&exp.rows);
    assert!(csv.starts_with(&format!("{METRICS_HEADER}\n0,")));
}

#[test]
fn sampling_singletons_equals_mode_training() {
    let cfg = small(20);
    let (mut train_set, eval) = cfg.datasets(2).unwrap();
    for s in &mut train_set.samples {
        s.answers = AnswerMultiset::singleton(s.label);
    }
    let rng = Rng::new(2).derive("train");
    let mut sampled = cfg.init_model(2).unwrap();
    let mut mode = sampled.clone();
    let a =
        train(&mut sampled, &train_set, &eval, &cfg.hyper, &TrainOptions { answer_sampling: true, ..cfg.train }, &rng)
            .unwrap();
    let b =
        train(&mut mode, &train_set, &eval, &cfg.hyper, &TrainOptions { answer_sampling: false, ..cfg.train }, &rng)
            .unwrap();
    assert_eq!(a, b);
    assert_eq!(sampled, mode);
}

#[test]
fn evaluation_of_oracle_and_constant_predictors() {
    let cfg = ToyConfig { count: 400, divided_rate: 0.5, ..ToyConfig::default() };
    let ds = generate_toy_dataset(&cfg, &Rng::new(8)).unwrap();
    assert_eq!(evaluate_with(&ds, Metric::Exact, |s| Ok(s.label)).unwrap(), 1.0);
    assert_eq!(evaluate_with(&ds, Metric::Vqa, |s| Ok(s.label)).unwrap(), 1.0);
    assert_eq!(evaluate_with(&ds, Metric::Exact, |_| Ok(0)).unwrap(), 0.5);
    let empty = Dataset { dims: ds.dims, samples: Vec::new() };
    assert_eq!(evaluate_with(&empty, Metric::Exact, |_| Ok(0)).unwrap(), 0.0);
}

#[test]
fn evaluation_rejects_mismatched_data() {
    let model = small(0).init_model(1).unwrap();
    let cfg = ToyConfig { answers: 3, count: 4, ..ToyConfig::default() };
    let ds = generate_toy_dataset(&cfg, &Rng::new(1)).unwrap();
    assert!(matches!(evaluate(&model, &ds, Metric::Exact), Err(Error::Data(_))));
}

#[test]
fn divergence_is_reported() {
    let mut cfg = small(5);
    cfg.hyper.learning_rate = 1e308;
    cfg.hyper.clip = 1e308;
    assert!(matches!(run_experiment(&cfg, 1), Err(Error::Divergence { .. })));
}

#[test]
fn checkpoints_round_trip_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    for variant in Variant::ALL {
        let cfg = ExperimentConfig { variant, ..small(3) };
        let model = run_experiment(&cfg, 6).unwrap().model;
        let path = dir.path().join(variant.name());
        model.to_bundle(6).save(&path).unwrap();
        assert_eq!(Model::from_bundle(Bundle::load(&path).unwrap()).unwrap(), model);
    }
}

#[test]
fn mlb_loss_gradient_at_desk_shapes() {
    let hp = HyperParams::default();
    let mut model = match Model::init(Variant::Mlb, &hp, &ModelOptions::default(), &Rng::new(31)).unwrap() {
        Model::Attention(p) => p,
        _ => unreachable!(),
    };
    // move biases off zero so their gradients are exercised
    let mut rng = Rng::new(32);
    for t in model.tensors_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = rng.uniform_tensor(t.shape(), 0.1);
        }
    }
    let toy = ToyConfig { count: 3, ..ToyConfig::default() };
    let ds = generate_toy_dataset(&toy, &Rng::new(33)).unwrap();
    let params: Vec<_> = model.named_tensors().into_iter().map(|(_, t, _)| t.clone()).collect();
    let loss = |t: &mut Tape, vars: &[mlb_core::Var]| {
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
    let err = grad_check(loss, &params, 1e-6).unwrap();
    assert!(err < 1e-5, "max relative error {err}");
}
