use std::collections::HashMap;

use mlb_core::data::{
    augment, generate_toy_dataset, sample_answer, vqa_accuracy, AnswerMultiset, Dataset, Source, ToyConfig, ToySample,
};
use mlb_core::{Error, Rng};

fn config(count: usize) -> ToyConfig {
    ToyConfig { count, ..ToyConfig::default() }
}

/// Plug-in mutual information in bits between a discrete key and the label.
fn mutual_information(pairs: impl Iterator<Item = (Vec<i64>, usize)>) -> f64 {
    let mut joint: HashMap<(Vec<i64>, usize), f64> = HashMap::new();
    let mut total = 0.0;
    for p in pairs {
        *joint.entry(p).or_default() += 1.0;
        total += 1.0;
    }
    let mut px: HashMap<Vec<i64>, f64> = HashMap::new();
    let mut py: HashMap<usize, f64> = HashMap::new();
    for ((k, y), c) in &joint {
        *px.entry(k.clone()).or_default() += c;
        *py.entry(*y).or_default() += c;
    }
    joint
        .iter()
        .map(|((k, y), c)| {
            let pxy = c / total;
            pxy * (pxy / (px[k] / total * py[y] / total)).log2()
        })
        .sum()
}

fn question_key(s: &ToySample) -> Vec<i64> {
    s.q.data().iter().map(|&v| v as i64).collect()
}

fn attribute_at(ds: &Dataset, s: &ToySample, cell: usize) -> usize {
    let off = ds.dims.attribute_offset();
    let row = s.f.row(cell);
    (0..ds.dims.answers).find(|&a| row[off + a] == 1.0).expect("one-hot attribute")
}

fn lookup_oracle(ds: &Dataset, s: &ToySample) -> usize {
    let cells = ds.dims.cells();
    let q = s.q.data();
    let target = (0..cells).find(|&i| q[i] == 1.0).unwrap();
    let qa = (0..ds.dims.answers).find(|&a| q[cells + a] == 1.0).unwrap();
    (qa + attribute_at(ds, s, target)) % ds.dims.answers
}

#[test]
fn single_modalities_carry_no_label_information() {
    let ds = generate_toy_dataset(&config(10_000), &Rng::new(3)).unwrap();
    let from_question = mutual_information(ds.samples.iter().map(|s| (question_key(s), s.label)));
    assert!(from_question < 0.02, "question-only MI {from_question}");
    for cell in [0, 5, 15] {
        let from_cell =
            mutual_information(ds.samples.iter().map(|s| (vec![attribute_at(&ds, s, cell) as i64], s.label)));
        assert!(from_cell < 0.02, "cell {cell} MI {from_cell}");
    }
}

#[test]
fn lookup_oracle_labels_every_sample() {
    for answers in [2, 3, 5] {
        let cfg = ToyConfig { answers, n: 32, m: 16, ..config(2000) };
        let ds = generate_toy_dataset(&cfg, &Rng::new(answers as u64)).unwrap();
        assert!(ds.samples.iter().all(|s| lookup_oracle(&ds, s) == s.label));
    }
}

#[test]
fn classes_are_balanced() {
    for count in [7, 8, 1001] {
        let cfg = ToyConfig { answers: 3, ..config(count) };
        let ds = generate_toy_dataset(&cfg, &Rng::new(9)).unwrap();
        let mut hist = [0usize; 3];
        ds.samples.iter().for_each(|s| hist[s.label] += 1);
        assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1, "{hist:?}");
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = generate_toy_dataset(&config(8), &Rng::new(42)).unwrap();
    let b = generate_toy_dataset(&config(8), &Rng::new(42)).unwrap();
    assert_eq!(a, b);
    let c = generate_toy_dataset(&config(8), &Rng::new(43)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn annotations_keep_the_label_as_mode() {
    let cfg = ToyConfig { divided_rate: 0.5, ..config(2000) };
    let ds = generate_toy_dataset(&cfg, &Rng::new(5)).unwrap();
    assert!(ds.samples.iter().all(|s| s.answers.mode() == Some(s.label) && s.answers.total() == 10));
    let frac = ds.divided_fraction();
    assert!((frac - 0.5).abs() < 0.05, "divided fraction {frac}");
}

#[test]
fn inconsistent_dims_are_rejected() {
    for cfg in [
        ToyConfig { answers: 1, ..config(4) },
        ToyConfig { n: 10, ..config(4) },
        ToyConfig { m: 5, ..config(4) },
        ToyConfig { lattice: 0, ..config(4) },
    ] {
        assert!(matches!(generate_toy_dataset(&cfg, &Rng::new(1)), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn augmentation_counts_tags_and_singletons() {
    let base = generate_toy_dataset(&config(30), &Rng::new(1)).unwrap();
    let extra = generate_toy_dataset(&config(20), &Rng::new(2)).unwrap();
    assert_eq!(augment(&base, &generate_toy_dataset(&config(0), &Rng::new(2)).unwrap()).unwrap(), base);

    let all = augment(&base, &extra).unwrap();
    assert_eq!(all.len(), 50);
    let shuffled = all.shuffled(&mut Rng::new(7));
    assert_ne!(shuffled.samples, all.samples);
    let extras: Vec<_> = shuffled.samples.iter().filter(|s| s.source == Source::Extra).collect();
    assert_eq!(extras.len(), 20);
    assert!(extras.iter().all(|s| s.answers == AnswerMultiset::singleton(s.label)));
    for s in &extra.samples {
        assert!(extras.iter().any(|e| e.q == s.q && e.f == s.f && e.label == s.label));
    }

    let other = generate_toy_dataset(&ToyConfig { answers: 3, ..config(5) }, &Rng::new(2)).unwrap();
    assert!(matches!(augment(&base, &other), Err(Error::Data(_))));
}

#[test]
fn dataset_files_round_trip() {
    let cfg = ToyConfig { divided_rate: 0.3, ..config(25) };
    let base = generate_toy_dataset(&cfg, &Rng::new(11)).unwrap();
    let ds = augment(&base, &generate_toy_dataset(&config(5), &Rng::new(12)).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
}

#[test]
fn answer_sampling_frequencies() {
    let ms = AnswerMultiset::new([(0, 7), (1, 3)]);
    let mut rng = Rng::new(2024);
    let draws = 100_000;
    let hits = (0..draws).filter(|_| sample_answer(&ms, &mut rng).unwrap() == 1).count() as f64;
    let p = 0.3;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    assert!((hits - draws as f64 * p).abs() <= 3.0 * sigma, "{hits} hits");

    let two = AnswerMultiset::new([(0, 8), (1, 2)]);
    assert!((0..10_000).all(|_| sample_answer(&two, &mut rng).unwrap() == 0));
    let one = AnswerMultiset::new([(4, 10)]);
    assert!((0..1000).all(|_| sample_answer(&one, &mut rng).unwrap() == 4));
    assert!(matches!(sample_answer(&AnswerMultiset::new([]), &mut rng), Err(Error::Data(_))));
}

#[test]
fn vqa_accuracy_values() {
    let got: Vec<f64> = (0..6).map(|c| vqa_accuracy(c).unwrap()).collect();
    assert_eq!(got, [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0, 1.0]);
    assert!(matches!(vqa_accuracy(-1), Err(Error::Data(_))));
}
