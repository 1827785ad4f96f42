//! Synthetic multimodal QA task, answer sampling and the VQA metric.
//!
//! Every toy sample asks for the attribute of one lattice cell, combined
//! with a question attribute: `label = (qa + attr[target]) mod |Ω|`, which
//! is XOR when `|Ω| = 2`. Neither modality alone carries information about
//! the label, and additive fusion cannot represent the interaction.
//!
//! Layout of the inputs:
//!
//! ```text
//! q    = onehot(target cell; S²) ‖ onehot(qa; |Ω|) ‖ 0…               N
//! F[s] = code(s; ±1 bits) ‖ onehot(attr[s]; |Ω|) ‖ U(-1,1) distractors ‖ 0…   M
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor_file, write_tensor_file, Rng, Tensor};

/// Annotator answers for one question, sorted by count (non-increasing),
/// ties broken by ascending answer index. Serializes as `[[answer, count], …]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, u32)>", into = "Vec<(usize, u32)>")]
pub struct AnswerMultiset {
    entries: Vec<(usize, u32)>,
}

impl AnswerMultiset {
    /// Merges duplicate answers and drops zero counts.
    pub fn new(entries: impl IntoIterator<Item = (usize, u32)>) -> Self {
        let mut merged: Vec<(usize, u32)> = Vec::new();
        for (a, c) in entries {
            if c == 0 {
                continue;
            }
            match merged.iter_mut().find(|(b, _)| *b == a) {
                Some(e) => e.1 += c,
                None => merged.push((a, c)),
            }
        }
        merged.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
        Self { entries: merged }
    }

    /// A single answer given once, as for the augmentation pool.
    pub fn singleton(answer: usize) -> Self {
        Self { entries: vec![(answer, 1)] }
    }

    pub fn entries(&self) -> &[(usize, u32)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> u32 {
        self.entries.iter().map(|e| e.1).sum()
    }

    /// `a₀`, the most frequent answer.
    pub fn mode(&self) -> Option<usize> {
        self.entries.first().map(|e| e.0)
    }

    /// `(a₁, |a₁|)`, the runner-up.
    pub fn runner_up(&self) -> Option<(usize, u32)> {
        self.entries.get(1).copied()
    }

    pub fn count_of(&self, answer: usize) -> u32 {
        self.entries.iter().find(|e| e.0 == answer).map_or(0, |e| e.1)
    }

    /// `p(a₁) = |a₁| / Σ|aᵢ|` when `|a₁| ≥ 3`, otherwise 0.
    pub fn runner_up_probability(&self) -> f64 {
        match self.runner_up() {
            Some((_, c)) if c >= 3 => c as f64 / self.total() as f64,
            _ => 0.0,
        }
    }

    /// Divided answers: the runner-up has at least three votes.
    pub fn is_divided(&self) -> bool {
        self.runner_up().is_some_and(|(_, c)| c >= 3)
    }
}

impl TryFrom<Vec<(usize, u32)>> for AnswerMultiset {
    type Error = Error;

    fn try_from(v: Vec<(usize, u32)>) -> Result<Self> {
        let ms = Self::new(v.iter().copied());
        if ms.entries.len() != v.len() {
            return Err(Error::Data("answer multiset has zero or repeated entries".into()));
        }
        Ok(ms)
    }
}

impl From<AnswerMultiset> for Vec<(usize, u32)> {
    fn from(ms: AnswerMultiset) -> Self {
        ms.entries
    }
}

/// Draws `a₁` with probability `p(a₁)`, else `a₀`.
pub fn sample_answer(ms: &AnswerMultiset, rng: &mut Rng) -> Result<usize> {
    let a0 = ms.mode().ok_or_else(|| Error::Data("cannot sample from an empty answer multiset".into()))?;
    let p1 = ms.runner_up_probability();
    if p1 > 0.0 && rng.unit() < p1 {
        Ok(ms.entries[1].0)
    } else {
        Ok(a0)
    }
}

/// `min(|a_k| / 3, 1)`.
pub fn vqa_accuracy(count: i64) -> Result<f64> {
    if count < 0 {
        return Err(Error::Data(format!("answer count must be non-negative, got {count}")));
    }
    Ok((count as f64 / 3.0).min(1.0))
}

/// Which pool a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Base,
    Extra,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Base => "base",
            Source::Extra => "extra",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    /// `N`
    pub q: Tensor,
    /// `S² × M`
    pub f: Tensor,
    pub label: usize,
    pub answers: AnswerMultiset,
    pub source: Source,
}

/// Input shape shared by every sample of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub n: usize,
    pub m: usize,
    pub lattice: usize,
    pub answers: usize,
}

impl DataDims {
    pub fn cells(&self) -> usize {
        self.lattice * self.lattice
    }

    /// Number of ±1 position bits per cell.
    pub fn position_bits(&self) -> usize {
        let cells = self.cells();
        (usize::BITS - (cells - 1).leading_zeros()).max(1) as usize
    }

    /// Channel offset of the one-hot attribute in each feature row.
    pub fn attribute_offset(&self) -> usize {
        self.position_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    /// Lattice side `S`.
    pub lattice: usize,
    /// Question size `N`; needs `N ≥ S² + |Ω|`.
    pub n: usize,
    /// Channel count `M`; needs room for position bits, attribute and
    /// distractors.
    pub m: usize,
    pub answers: usize,
    pub count: usize,
    /// Uniform noise channels per cell.
    pub distractors: usize,
    /// Fraction of samples whose runner-up answer gets at least three votes.
    pub divided_rate: f64,
}

/// Annotators per base question.
pub const ANNOTATORS: u32 = 10;

impl Default for ToyConfig {
    fn default() -> Self {
        Self { lattice: 4, n: 32, m: 16, answers: 2, count: 4000, distractors: 4, divided_rate: 0.0 }
    }
}

impl ToyConfig {
    pub fn dims(&self) -> DataDims {
        DataDims { n: self.n, m: self.m, lattice: self.lattice, answers: self.answers }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if self.lattice == 0 {
            return Err(Error::Config("lattice side must be positive".into()));
        }
        if self.answers < 2 {
            return Err(Error::Config(format!("need at least 2 answers, got {}", self.answers)));
        }
        if self.n < dims.cells() + self.answers {
            return Err(Error::Config(format!(
                "N = {} cannot encode {} cells and {} answers",
                self.n,
                dims.cells(),
                self.answers
            )));
        }
        let channels = dims.position_bits() + self.answers + self.distractors;
        if self.m < channels {
            return Err(Error::Config(format!("M = {} is smaller than the {channels} channels needed", self.m)));
        }
        if !(0.0..=1.0).contains(&self.divided_rate) {
            return Err(Error::Config(format!("divided_rate must be in [0,1], got {}", self.divided_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: DataDims,
    pub samples: Vec<ToySample>,
}

/// Base-pool annotations: the label keeps a strict majority; divided
/// samples give a wrong answer 3 or 4 votes, others 0 to 2.
fn annotate(label: usize, answers: usize, divided: bool, rng: &mut Rng) -> AnswerMultiset {
    let k = if divided { 3 + rng.below(2) as u32 } else { rng.below(3) as u32 };
    let other = (label + 1 + rng.below(answers - 1)) % answers;
    AnswerMultiset::new([(label, ANNOTATORS - k), (other, k)])
}

/// Deterministic toy dataset. Labels are balanced (`i mod |Ω|`, shuffled);
/// each sample draws from its own indexed sub-stream.
pub fn generate_toy_dataset(cfg: &ToyConfig, rng: &Rng) -> Result<Dataset> {
    cfg.validate()?;
    let dims = cfg.dims();
    let cells = dims.cells();
    let bits = dims.position_bits();
    let omega = cfg.answers;
    let mut labels: Vec<usize> = (0..cfg.count).map(|i| i % omega).collect();
    rng.derive("labels").shuffle(&mut labels);
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut r = rng.derive_indexed("sample", i as u64);
            let target = r.below(cells);
            let qa = r.below(omega);
            let mut q = vec![0.0; cfg.n];
            q[target] = 1.0;
            q[cells + qa] = 1.0;
            let mut f = vec![0.0; cells * cfg.m];
            for s in 0..cells {
                let row = &mut f[s * cfg.m..(s + 1) * cfg.m];
                for (b, slot) in row.iter_mut().take(bits).enumerate() {
                    *slot = if (s >> b) & 1 == 1 { 1.0 } else { -1.0 };
                }
                let attr = if s == target { (label + omega - qa) % omega } else { r.below(omega) };
                row[bits + attr] = 1.0;
                for slot in &mut row[bits + omega..bits + omega + cfg.distractors] {
                    *slot = r.uniform(-1.0, 1.0);
                }
            }
            let divided = cfg.divided_rate > 0.0 && r.unit() < cfg.divided_rate;
            ToySample {
                q: Tensor::from_vec(q),
                f: Tensor::new(vec![cells, cfg.m], f).expect("feature shape"),
                label,
                answers: annotate(label, omega, divided, &mut r),
                source: Source::Base,
            }
        })
        .collect();
    Ok(Dataset { dims, samples })
}

/// Concatenates `extra` after `base`. Extra samples are tagged and carry
/// singleton multisets of their label.
pub fn augment(base: &Dataset, extra: &Dataset) -> Result<Dataset> {
    if !extra.samples.is_empty() && base.dims != extra.dims {
        return Err(Error::Data(format!("cannot augment {:?} with {:?}", base.dims, extra.dims)));
    }
    let mut samples = base.samples.clone();
    samples.extend(extra.samples.iter().map(|s| ToySample {
        answers: AnswerMultiset::singleton(s.label),
        source: Source::Extra,
        ..s.clone()
    }));
    Ok(Dataset { dims: base.dims, samples })
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    label: usize,
    answers: AnswerMultiset,
    source: Source,
}

#[derive(Serialize, Deserialize)]
struct Index {
    dims: DataDims,
    samples: Vec<IndexEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn shuffled(&self, rng: &mut Rng) -> Dataset {
        let mut samples = self.samples.clone();
        rng.shuffle(&mut samples);
        Dataset { dims: self.dims, samples }
    }

    /// Fraction of samples with divided answers.
    pub fn divided_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.answers.is_divided()).count() as f64 / self.samples.len() as f64
    }

    /// Writes `index.json`, `q.mlbt` (`count × N`) and `f.mlbt`
    /// (`count × S² × M`).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let index = Index {
            dims: self.dims,
            samples: self
                .samples
                .iter()
                .map(|s| IndexEntry { label: s.label, answers: s.answers.clone(), source: s.source })
                .collect(),
        };
        std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)? + "\n")?;
        if self.samples.is_empty() {
            return Ok(());
        }
        let count = self.samples.len();
        let qs: Vec<f64> = self.samples.iter().flat_map(|s| s.q.data().iter().copied()).collect();
        let fs: Vec<f64> = self.samples.iter().flat_map(|s| s.f.data().iter().copied()).collect();
        write_tensor_file(dir.join("q.mlbt"), &Tensor::new(vec![count, self.dims.n], qs)?)?;
        write_tensor_file(dir.join("f.mlbt"), &Tensor::new(vec![count, self.dims.cells(), self.dims.m], fs)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index: Index = serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
        let dims = index.dims;
        if index.samples.is_empty() {
            return Ok(Dataset { dims, samples: Vec::new() });
        }
        let count = index.samples.len();
        let qs = read_tensor_file(dir.join("q.mlbt"))?;
        let fs = read_tensor_file(dir.join("f.mlbt"))?;
        if qs.shape() != [count, dims.n] || fs.shape() != [count, dims.cells(), dims.m] {
            return Err(Error::Format(format!(
                "dataset blobs {:?} / {:?} do not match the index",
                qs.shape(),
                fs.shape()
            )));
        }
        let (qn, fl) = (dims.n, dims.cells() * dims.m);
        let samples = index
            .samples
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                Ok(ToySample {
                    q: Tensor::from_vec(qs.data()[i * qn..(i + 1) * qn].to_vec()),
                    f: Tensor::new(vec![dims.cells(), dims.m], fs.data()[i * fl..(i + 1) * fl].to_vec())?,
                    label: e.label,
                    answers: e.answers,
                    source: e.source,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { dims, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiset_orders_and_breaks_ties_by_index() {
        let ms = AnswerMultiset::new([(5, 3), (2, 3), (7, 4)]);
        assert_eq!(ms.entries(), &[(7, 4), (2, 3), (5, 3)]);
        assert_eq!(ms.mode(), Some(7));
        assert_eq!(ms.runner_up(), Some((2, 3)));
        assert!(ms.is_divided());
    }

    #[test]
    fn runner_up_probability_cases() {
        assert!((AnswerMultiset::new([(0, 7), (1, 3)]).runner_up_probability() - 0.3).abs() < 1e-15);
        assert_eq!(AnswerMultiset::new([(0, 8), (1, 2)]).runner_up_probability(), 0.0);
        assert_eq!(AnswerMultiset::new([(0, 10)]).runner_up_probability(), 0.0);
    }

    #[test]
    fn below_three_never_emits_runner_up() {
        let ms = AnswerMultiset::new([(0, 8), (1, 2)]);
        let mut rng = Rng::new(3);
        assert!((0..10_000).all(|_| sample_answer(&ms, &mut rng).unwrap() == 0));
    }

    #[test]
    fn empty_multiset_is_a_data_error() {
        let ms = AnswerMultiset::new([]);
        assert!(matches!(sample_answer(&ms, &mut Rng::new(0)), Err(Error::Data(_))));
    }

    #[test]
    fn vqa_metric_values() {
        assert_eq!(vqa_accuracy(0).unwrap(), 0.0);
        assert_eq!(vqa_accuracy(1).unwrap(), 1.0 / 3.0);
        assert_eq!(vqa_accuracy(2).unwrap(), 2.0 / 3.0);
        assert_eq!(vqa_accuracy(3).unwrap(), 1.0);
        assert_eq!(vqa_accuracy(11).unwrap(), 1.0);
        assert!(matches!(vqa_accuracy(-1), Err(Error::Data(_))));
    }

    #[test]
    fn multiset_json_shape() {
        let ms = AnswerMultiset::new([(1, 3), (0, 7)]);
        assert_eq!(serde_json::to_string(&ms).unwrap(), "[[0,7],[1,3]]");
        let back: AnswerMultiset = serde_json::from_str("[[1,3],[0,7]]").unwrap();
        assert_eq!(back, ms);
        assert!(serde_json::from_str::<AnswerMultiset>("[[1,3],[1,2]]").is_err());
    }

    #[test]
    fn position_bits() {
        let d = |s| DataDims { n: 1, m: 1, lattice: s, answers: 2 };
        assert_eq!(d(1).position_bits(), 1);
        assert_eq!(d(2).position_bits(), 2);
        assert_eq!(d(3).position_bits(), 4);
        assert_eq!(d(4).position_bits(), 4);
    }

    #[test]
    fn config_errors() {
        let bad = [
            ToyConfig { answers: 1, ..Default::default() },
            ToyConfig { n: 17, ..Default::default() },
            ToyConfig { m: 9, ..Default::default() },
            ToyConfig { divided_rate: 1.5, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(generate_toy_dataset(&cfg, &Rng::new(0)), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn labels_are_balanced() {
        let cfg = ToyConfig { answers: 3, count: 100, ..Default::default() };
        let ds = generate_toy_dataset(&cfg, &Rng::new(9)).unwrap();
        let mut counts = [0usize; 3];
        for s in &ds.samples {
            counts[s.label] += 1;
        }
        assert!(counts.iter().all(|&c| (33..=34).contains(&c)));
    }

    #[test]
    fn augment_identity_and_sizes() {
        let cfg = ToyConfig { count: 10, ..Default::default() };
        let base = generate_toy_dataset(&cfg, &Rng::new(1)).unwrap();
        let empty = Dataset { dims: base.dims, samples: vec![] };
        assert_eq!(augment(&base, &empty).unwrap(), base);
        let extra = generate_toy_dataset(&ToyConfig { count: 7, ..cfg }, &Rng::new(2)).unwrap();
        let all = augment(&base, &extra).unwrap();
        assert_eq!(all.len(), 17);
        assert!(all.samples[10..].iter().all(|s| s.source == Source::Extra && s.answers.total() == 1));
        let other = generate_toy_dataset(&ToyConfig { lattice: 3, ..cfg }, &Rng::new(2)).unwrap();
        assert!(matches!(augment(&base, &other), Err(Error::Data(_))));
    }
}
