//! Synthetic benchmarks and JSONL ingestion.
//!
//! The vocabulary is partitioned so the reasoning each task demands is a
//! property of the data:
//!
//! ```text
//! 0          padding
//! 1..7       static group A
//! 7..13      static group B
//! 13..16     static neutral fillers
//! 16, 17     temporal markers a, b
//! 18..32     temporal fillers
//! ```
//!
//! Static labels depend only on the token multiset. Temporal labels depend
//! only on the order of `a` and `b`, and every multiset is equally likely
//! under both labels, so an order-blind model sits at chance.

use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::encoder::TokenBatch;
use crate::error::{HectoError, Result};
use crate::moe::Targets;
use crate::RunRng;

pub const GROUP_A: Range<usize> = 1..7;
pub const GROUP_B: Range<usize> = 7..13;
pub const STATIC_FILLERS: Range<usize> = 13..16;
pub const MARKER_A: usize = 16;
pub const MARKER_B: usize = 17;
pub const TEMPORAL_FILLERS: Range<usize> = 18..32;

/// Smallest vocabulary that holds the partition above.
pub const MIN_VOCAB: usize = 32;

/// Shortest generated sequence, clipped to the position budget.
pub const MIN_LEN: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubtaskTag {
    Static,
    Temporal,
}

impl SubtaskTag {
    pub fn label(self) -> &'static str {
        match self {
            SubtaskTag::Static => "static",
            SubtaskTag::Temporal => "temporal",
        }
    }
}

/// One record. `target` is a class index for classification tasks and a
/// real value for regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<SubtaskTag>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Dataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn tags(&self) -> Vec<Option<SubtaskTag>> {
        self.examples.iter().map(|e| e.tag).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.examples.iter().map(|e| e.target).collect()
    }

    /// Targets as class indices; fails on anything that is not a
    /// non-negative integer.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if e.target >= 0.0 && e.target.fract() == 0.0 && e.target.is_finite() {
                    Ok(e.target as usize)
                } else {
                    Err(HectoError::Mode(format!(
                        "example {i} has target {} which is not a class label",
                        e.target
                    )))
                }
            })
            .collect()
    }

    pub fn max_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0)
    }

    /// Tokens and supervision for the examples at `indices`.
    pub fn batch(&self, indices: &[usize], classification: bool) -> Result<(TokenBatch, Targets)> {
        let seqs: Vec<&[usize]> = indices.iter().map(|&i| self.examples[i].tokens.as_slice()).collect();
        let batch = TokenBatch::from_sequences(&seqs);
        let sub = Dataset::new(indices.iter().map(|&i| self.examples[i].clone()).collect());
        let targets = if classification {
            Targets::Labels(sub.labels()?)
        } else {
            Targets::Values(sub.values())
        };
        Ok((batch, targets))
    }

    /// Deterministic split: the last `round(n · fraction)` examples are held out.
    pub fn split(&self, held_out_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(HectoError::Config(format!(
                "held-out fraction must lie in [0, 1), got {held_out_fraction}"
            )));
        }
        let n_eval = (self.len() as f64 * held_out_fraction).round() as usize;
        let cut = self.len() - n_eval;
        Ok((
            Dataset::new(self.examples[..cut].to_vec()),
            Dataset::new(self.examples[cut..].to_vec()),
        ))
    }

    pub fn validate(&self, vocab_size: usize, max_tokens: usize) -> Result<()> {
        for (i, e) in self.examples.iter().enumerate() {
            if e.tokens.is_empty() || e.tokens.len() > max_tokens {
                return Err(HectoError::Data(format!(
                    "example {i} has {} tokens, expected 1..={max_tokens}",
                    e.tokens.len()
                )));
            }
            if let Some(&bad) = e.tokens.iter().find(|&&t| t >= vocab_size) {
                return Err(HectoError::Data(format!(
                    "example {i}: token {bad} outside vocabulary of {vocab_size}"
                )));
            }
            if !e.target.is_finite() {
                return Err(HectoError::Data(format!("example {i} has a non-finite target")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Static,
    Temporal,
    Mixed,
    Regression,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Static, TaskKind::Temporal, TaskKind::Mixed, TaskKind::Regression];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Static => "static",
            TaskKind::Temporal => "temporal",
            TaskKind::Mixed => "mixed",
            TaskKind::Regression => "regression",
        }
    }

    pub fn is_regression(self) -> bool {
        self == TaskKind::Regression
    }
}

impl FromStr for TaskKind {
    type Err = HectoError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| HectoError::Config(format!("unknown task '{s}' (expected static, temporal, mixed or regression)")))
    }
}

/// Everything a generator needs besides the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub n: usize,
    /// Static share for the mixed task.
    pub ratio: f64,
    /// Longest generated sequence.
    pub max_tokens: usize,
    /// Fraction of the data held out for evaluation.
    pub held_out: f64,
    /// Data seed, independent of the model seeds.
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Mixed,
            n: 2000,
            ratio: 0.5,
            max_tokens: 16,
            held_out: 0.2,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn generate(&self) -> Result<Dataset> {
        let seed = self.seed;
        match self.kind {
            TaskKind::Static => gen_static(self.n, self.max_tokens, seed),
            TaskKind::Temporal => gen_temporal(self.n, self.max_tokens, seed),
            TaskKind::Mixed => gen_mixed(self.n, self.ratio, self.max_tokens, seed),
            TaskKind::Regression => gen_regression(self.n, self.max_tokens, seed),
        }
    }
}

fn check_n(n: usize, max_tokens: usize) -> Result<()> {
    if n == 0 {
        return Err(HectoError::Config("n must be at least 1".into()));
    }
    if max_tokens < 2 {
        return Err(HectoError::Config(format!("max_tokens must be >= 2, got {max_tokens}")));
    }
    Ok(())
}

fn sample_len(rng: &mut RunRng, max_tokens: usize) -> usize {
    rng.random_range(MIN_LEN.min(max_tokens)..=max_tokens)
}

fn pick(rng: &mut RunRng, group: &Range<usize>) -> usize {
    rng.random_range(group.clone())
}

/// Label 0 when group A holds the strict majority, 1 for group B.
pub fn static_label(tokens: &[usize]) -> Option<usize> {
    let a = tokens.iter().filter(|t| GROUP_A.contains(t)).count();
    let b = tokens.iter().filter(|t| GROUP_B.contains(t)).count();
    match a.cmp(&b) {
        std::cmp::Ordering::Greater => Some(0),
        std::cmp::Ordering::Less => Some(1),
        std::cmp::Ordering::Equal => None,
    }
}

/// Label 1 when `a` precedes `b`.
pub fn temporal_label(tokens: &[usize]) -> Option<usize> {
    let pa = tokens.iter().position(|&t| t == MARKER_A)?;
    let pb = tokens.iter().position(|&t| t == MARKER_B)?;
    Some(usize::from(pa < pb))
}

fn static_example(rng: &mut RunRng, max_tokens: usize, label: usize) -> Vec<usize> {
    let len = sample_len(rng, max_tokens);
    let grouped = rng.random_range(1..=len);
    let majority = rng.random_range(grouped / 2 + 1..=grouped);
    let (major, minor) = if label == 0 { (&GROUP_A, &GROUP_B) } else { (&GROUP_B, &GROUP_A) };
    let mut tokens = Vec::with_capacity(len);
    tokens.extend((0..majority).map(|_| pick(rng, major)));
    tokens.extend((majority..grouped).map(|_| pick(rng, minor)));
    tokens.extend((grouped..len).map(|_| pick(rng, &STATIC_FILLERS)));
    tokens.shuffle(rng);
    tokens
}

fn temporal_example(rng: &mut RunRng, max_tokens: usize, label: usize) -> Vec<usize> {
    let len = sample_len(rng, max_tokens);
    let mut tokens: Vec<usize> = (0..len).map(|_| pick(rng, &TEMPORAL_FILLERS)).collect();
    let slots = rand::seq::index::sample(rng, len, 2);
    let (p, q) = (slots.index(0).min(slots.index(1)), slots.index(0).max(slots.index(1)));
    // The position pair is drawn independently of the label, so both orders
    // are equally likely for every multiset.
    let (pa, pb) = if label == 1 { (p, q) } else { (q, p) };
    tokens[pa] = MARKER_A;
    tokens[pb] = MARKER_B;
    tokens
}

/// Balanced labels: example `i` gets label `i % 2` before the final shuffle.
fn balanced<F>(n: usize, seed: u64, tag: Option<SubtaskTag>, mut make: F) -> Dataset
where
    F: FnMut(&mut RunRng, usize) -> Vec<usize>,
{
    let mut rng = RunRng::seed_from_u64(seed);
    let mut examples: Vec<Example> = (0..n)
        .map(|i| {
            let label = i % 2;
            Example {
                tokens: make(&mut rng, label),
                target: label as f64,
                tag,
            }
        })
        .collect();
    examples.shuffle(&mut rng);
    Dataset::new(examples)
}

/// Majority-group classification; the label is a function of the multiset.
pub fn gen_static(n: usize, max_tokens: usize, seed: u64) -> Result<Dataset> {
    check_n(n, max_tokens)?;
    Ok(balanced(n, seed, None, |rng, y| static_example(rng, max_tokens, y)))
}

/// Order-of-markers classification.
pub fn gen_temporal(n: usize, max_tokens: usize, seed: u64) -> Result<Dataset> {
    check_n(n, max_tokens)?;
    Ok(balanced(n, seed, None, |rng, y| temporal_example(rng, max_tokens, y)))
}

/// `round(n · ratio)` static examples and the rest temporal, tagged and shuffled.
pub fn gen_mixed(n: usize, ratio: f64, max_tokens: usize, seed: u64) -> Result<Dataset> {
    check_n(n, max_tokens)?;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(HectoError::Config(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let n_static = (n as f64 * ratio).round() as usize;
    let mut seeds = RunRng::seed_from_u64(seed);
    let (s1, s2, s3) = (seeds.random(), seeds.random(), seeds.random());
    let st = balanced(n_static, s1, Some(SubtaskTag::Static), |rng, y| static_example(rng, max_tokens, y));
    let tm = balanced(n - n_static, s2, Some(SubtaskTag::Temporal), |rng, y| {
        temporal_example(rng, max_tokens, y)
    });
    let mut examples = st.examples;
    examples.extend(tm.examples);
    examples.shuffle(&mut RunRng::seed_from_u64(s3));
    Ok(Dataset::new(examples))
}

/// `target = 5 · pos(a) / (len − 1)`.
pub fn regression_target(tokens: &[usize]) -> Option<f64> {
    let pa = tokens.iter().position(|&t| t == MARKER_A)?;
    if tokens.len() < 2 {
        return None;
    }
    Some(5.0 * pa as f64 / (tokens.len() - 1) as f64)
}

pub fn gen_regression(n: usize, max_tokens: usize, seed: u64) -> Result<Dataset> {
    check_n(n, max_tokens)?;
    let mut rng = RunRng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|_| {
            let len = sample_len(&mut rng, max_tokens);
            let mut tokens: Vec<usize> = (0..len).map(|_| pick(&mut rng, &TEMPORAL_FILLERS)).collect();
            tokens[rng.random_range(0..len)] = MARKER_A;
            let target = regression_target(&tokens).expect("one marker, len >= 2");
            Example { tokens, target, tag: None }
        })
        .collect();
    Ok(Dataset::new(examples))
}

pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for e in &dataset.examples {
        serde_json::to_writer(&mut out, e).map_err(|err| HectoError::Data(err.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| HectoError::io(path, e))?;
    f.write_all(&out).map_err(|e| HectoError::io(path, e))
}

/// Parses JSONL text. Blank lines are skipped; line numbers start at 1.
pub fn parse_jsonl(text: &str, vocab_size: usize) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let e: Example = serde_json::from_str(line).map_err(|err| HectoError::Parse {
            line: line_no,
            message: err.to_string(),
        })?;
        if let Some(&bad) = e.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(HectoError::Parse {
                line: line_no,
                message: format!("token {bad} outside vocabulary of {vocab_size}"),
            });
        }
        if e.tokens.is_empty() {
            return Err(HectoError::Parse {
                line: line_no,
                message: "empty token list".into(),
            });
        }
        examples.push(e);
    }
    Ok(Dataset::new(examples))
}

pub fn load_jsonl(path: &Path, vocab_size: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| HectoError::io(path, e))?;
    parse_jsonl(&text, vocab_size)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;

    const A: usize = MARKER_A;
    const B: usize = MARKER_B;

    #[test]
    fn static_label_examples() {
        assert_eq!(static_label(&[1, 2, 3, 4, 5, 8]), Some(0));
        assert_eq!(static_label(&[8, 9, 1]), Some(1));
        assert_eq!(static_label(&[1, 8]), None);
    }

    #[test]
    fn temporal_label_examples() {
        assert_eq!(temporal_label(&[A, 20, B]), Some(1));
        assert_eq!(temporal_label(&[B, 20, A]), Some(0));
    }

    #[test]
    fn regression_target_examples() {
        let mut t = vec![20; 11];
        t[0] = A;
        assert_eq!(regression_target(&t), Some(0.0));
        t[0] = 20;
        t[10] = A;
        assert_eq!(regression_target(&t), Some(5.0));
        t[10] = 20;
        t[4] = A;
        assert_eq!(regression_target(&t), Some(2.0));
    }

    #[test]
    fn static_set_is_solved_by_the_majority_oracle() {
        let ds = gen_static(1000, 23, 3).unwrap();
        for e in &ds.examples {
            assert_eq!(static_label(&e.tokens), Some(e.target as usize));
            assert!(e.tokens.len() >= MIN_LEN && e.tokens.len() <= 23);
        }
    }

    #[test]
    fn temporal_examples_carry_each_marker_once() {
        let ds = gen_temporal(500, 16, 4).unwrap();
        for e in &ds.examples {
            assert_eq!(e.tokens.iter().filter(|&&t| t == A).count(), 1);
            assert_eq!(e.tokens.iter().filter(|&&t| t == B).count(), 1);
            assert!(e.tokens.iter().all(|t| *t == A || *t == B || TEMPORAL_FILLERS.contains(t)));
            assert_eq!(temporal_label(&e.tokens), Some(e.target as usize));
        }
        let ones = ds.examples.iter().filter(|e| e.target == 1.0).count();
        assert_eq!(ones, 250);
    }

    /// Every placement of a and b among `t` slots, with the remaining slots
    /// holding a fixed filler arrangement.
    fn orderings(t: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for pa in 0..t {
            for pb in 0..t {
                if pa == pb {
                    continue;
                }
                let mut s: Vec<usize> = (0..t).map(|i| 18 + i % 3).collect();
                s[pa] = A;
                s[pb] = B;
                out.push(s);
            }
        }
        out
    }

    fn multiset_key(tokens: &[usize]) -> Vec<usize> {
        let mut k = tokens.to_vec();
        k.sort_unstable();
        k
    }

    #[test]
    fn exhaustive_multiset_balance() {
        for t in 2..=6 {
            let mut by_multiset: BTreeMap<Vec<usize>, [usize; 2]> = BTreeMap::new();
            for s in orderings(t) {
                let y = temporal_label(&s).unwrap();
                by_multiset.entry(multiset_key(&s)).or_default()[y] += 1;
            }
            for (k, counts) in by_multiset {
                assert_eq!(counts[0], counts[1], "T={t} multiset {k:?}");
            }
        }
    }

    #[test]
    fn multiset_classifiers_are_at_chance_on_small_t() {
        // The best multiset function predicts one label per multiset; with
        // balanced counts it gets exactly half right.
        for t in 2..=6 {
            let mut by_multiset: BTreeMap<Vec<usize>, [usize; 2]> = BTreeMap::new();
            let all = orderings(t);
            for s in &all {
                by_multiset.entry(multiset_key(s)).or_default()[temporal_label(s).unwrap()] += 1;
            }
            let best: usize = by_multiset.values().map(|c| c[0].max(c[1])).sum();
            assert_eq!(2 * best, all.len());
        }
    }

    #[test]
    fn mixed_split_and_vocabulary_partition() {
        let ds = gen_mixed(1000, 0.5, 16, 5).unwrap();
        let st: Vec<_> = ds.examples.iter().filter(|e| e.tag == Some(SubtaskTag::Static)).collect();
        let tm: Vec<_> = ds.examples.iter().filter(|e| e.tag == Some(SubtaskTag::Temporal)).collect();
        assert_eq!((st.len(), tm.len()), (500, 500));
        assert!(st.iter().all(|e| !e.tokens.contains(&A) && !e.tokens.contains(&B)));
        assert!(tm.iter().all(|e| e.tokens.iter().filter(|&&t| t == A || t == B).count() == 2));
        assert!(ds.examples.iter().all(|e| e.target == 0.0 || e.target == 1.0));
    }

    #[test]
    fn multiset_oracle_on_the_mixed_set() {
        // Lookup table from multiset to majority label, fitted on an
        // independent draw, with the majority-group count as fallback.
        let fit = gen_mixed(1000, 0.5, 16, 7).unwrap();
        let mut votes: BTreeMap<Vec<usize>, [usize; 2]> = BTreeMap::new();
        for e in &fit.examples {
            votes.entry(multiset_key(&e.tokens)).or_default()[e.target as usize] += 1;
        }
        let oracle = |tokens: &[usize]| match votes.get(&multiset_key(tokens)) {
            Some(c) if c[0] != c[1] => usize::from(c[1] > c[0]),
            _ => static_label(tokens).unwrap_or(1),
        };
        let ds = gen_mixed(1000, 0.5, 16, 6).unwrap();
        let acc = |tag: SubtaskTag| {
            let sub: Vec<_> = ds.examples.iter().filter(|e| e.tag == Some(tag)).collect();
            sub.iter().filter(|e| oracle(&e.tokens) == e.target as usize).count() as f64 / sub.len() as f64
        };
        assert_eq!(acc(SubtaskTag::Static), 1.0);
        assert!((acc(SubtaskTag::Temporal) - 0.5).abs() <= 0.03);
    }

    #[test]
    fn generators_are_deterministic() {
        for kind in TaskKind::ALL {
            let cfg = |seed| TaskConfig { kind, n: 50, seed, ..TaskConfig::default() };
            assert_eq!(cfg(9).generate().unwrap(), cfg(9).generate().unwrap());
            assert_ne!(cfg(9).generate().unwrap(), cfg(10).generate().unwrap());
        }
    }

    #[test]
    fn bad_generator_arguments() {
        assert!(gen_static(0, 16, 0).is_err());
        assert!(gen_mixed(10, 1.0, 16, 0).is_err());
        assert!(gen_mixed(10, 0.0, 16, 0).is_err());
        assert!("bogus".parse::<TaskKind>().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        for ds in [gen_mixed(40, 0.5, 16, 1).unwrap(), gen_regression(40, 16, 1).unwrap()] {
            save_jsonl(&ds, &path).unwrap();
            assert_eq!(load_jsonl(&path, 32).unwrap(), ds);
        }
    }

    #[test]
    fn jsonl_edge_cases() {
        assert!(parse_jsonl("", 32).unwrap().is_empty());
        let text = "{\"tokens\":[1,2],\"target\":0}\n{\"tokens\":[1,40],\"target\":1}\n";
        match parse_jsonl(text, 32) {
            Err(HectoError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_jsonl("{\"tokens\":[1]}\nnot json", 32) {
            Err(HectoError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        let tagged = parse_jsonl("{\"tokens\":[3],\"target\":1,\"tag\":\"static\"}", 32).unwrap();
        assert_eq!(tagged.examples[0].tag, Some(SubtaskTag::Static));
    }

    #[test]
    fn split_holds_out_the_tail() {
        let ds = gen_static(10, 16, 0).unwrap();
        let (tr, ev) = ds.split(0.2).unwrap();
        assert_eq!((tr.len(), ev.len()), (8, 2));
        assert_eq!(ev.examples[..], ds.examples[8..]);
    }

    proptest! {
        #[test]
        fn static_labels_ignore_order(seed in any::<u64>(), perm_seed in any::<u64>()) {
            let ds = gen_static(5, 23, seed).unwrap();
            for e in &ds.examples {
                let mut t = e.tokens.clone();
                t.shuffle(&mut RunRng::seed_from_u64(perm_seed));
                prop_assert_eq!(static_label(&t), Some(e.target as usize));
            }
        }

        #[test]
        fn swapping_markers_flips_the_temporal_label(seed in any::<u64>()) {
            let ds = gen_temporal(5, 16, seed).unwrap();
            for e in &ds.examples {
                let swapped: Vec<usize> = e.tokens.iter().map(|&t| match t {
                    MARKER_A => MARKER_B,
                    MARKER_B => MARKER_A,
                    t => t,
                }).collect();
                prop_assert_eq!(temporal_label(&swapped), Some(1 - e.target as usize));
            }
        }
    }
}
