//! Routing statistics, task metrics, latency, and report files.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Graph;
use crate::encoder::TokenBatch;
use crate::error::{HectoError, Result};
use crate::losses::{LOG_FLOOR, ROW_SUM_TOLERANCE};
use crate::moe::{HectoModel, Phase, RoutingDecision};
use crate::tasks::Dataset;
use crate::RunRng;

/// Per-expert usage seen three ways.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    /// Fraction of samples whose selected set contains each expert. Sums to
    /// 1 under Top-1 and to 2 under Top-2.
    pub selected: Vec<f64>,
    /// `selected` renormalized to sum to 1.
    pub partition: Vec<f64>,
    /// Mean soft gate probability per expert.
    pub soft: Vec<f64>,
}

pub fn expert_usage(decisions: &[RoutingDecision]) -> Result<Usage> {
    let first = decisions
        .first()
        .ok_or_else(|| HectoError::Data("expert usage needs at least one decision".into()))?;
    let k = first.g.len();
    let n = decisions.len() as f64;
    let mut counts = vec![0usize; k];
    let mut soft = vec![0.0; k];
    for d in decisions {
        if d.g.len() != k {
            return Err(HectoError::Data("decisions disagree on the number of experts".into()));
        }
        for &e in &d.selected {
            counts[e] += 1;
        }
        for (s, g) in soft.iter_mut().zip(&d.g) {
            *s += g;
        }
    }
    let total: usize = counts.iter().sum();
    Ok(Usage {
        selected: counts.iter().map(|&c| c as f64 / n).collect(),
        partition: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        soft: soft.into_iter().map(|s| s / n).collect(),
    })
}

/// Percentages in the "20.1% / 79.9%" layout.
pub fn format_usage(fractions: &[f64]) -> String {
    fractions
        .iter()
        .map(|f| format!("{:.1}%", 100.0 * f))
        .collect::<Vec<_>>()
        .join(" / ")
}

fn check_row(i: usize, row: &[f64]) -> Result<()> {
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(HectoError::Contract(format!("gate row {i} is not a probability vector")));
    }
    Ok(())
}

/// Mean row entropy in nats and in bits.
pub fn mean_gate_entropy<R: AsRef<[f64]>>(rows: &[R]) -> Result<(f64, f64)> {
    if rows.is_empty() {
        return Err(HectoError::Data("entropy of an empty gate matrix".into()));
    }
    let mut total = 0.0;
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_ref();
        check_row(i, r)?;
        total -= r.iter().map(|&p| p * p.max(LOG_FLOOR).ln()).sum::<f64>();
    }
    let nats = total / rows.len() as f64;
    Ok((nats, nats / LN_2))
}

/// Mean soft gate probability per group, keyed by group name.
pub fn classwise_routing<S: AsRef<str>>(
    decisions: &[RoutingDecision],
    groups: &[S],
) -> Result<BTreeMap<String, Vec<f64>>> {
    if decisions.len() != groups.len() {
        return Err(HectoError::Data(format!(
            "{} decisions but {} group labels",
            decisions.len(),
            groups.len()
        )));
    }
    let mut acc: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, (d, grp)) in decisions.iter().zip(groups).enumerate() {
        check_row(i, &d.g)?;
        let (sum, n) = acc
            .entry(grp.as_ref().to_string())
            .or_insert_with(|| (vec![0.0; d.g.len()], 0));
        for (s, g) in sum.iter_mut().zip(&d.g) {
            *s += g;
        }
        *n += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(k, (sum, n))| (k, sum.into_iter().map(|s| s / n as f64).collect()))
        .collect())
}

/// Group used for classwise routing: the subtask tag when present, otherwise
/// the class label, otherwise a single bucket.
pub fn routing_groups(dataset: &Dataset, classification: bool) -> Vec<String> {
    dataset
        .examples
        .iter()
        .map(|e| match e.tag {
            Some(t) => t.label().to_string(),
            None if classification => format!("class{}", e.target as usize),
            None => "all".to_string(),
        })
        .collect()
}

/// Held-out task metrics. Fields that do not apply to the task mode, and a
/// Pearson r that is undefined, are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub mse: Option<f64>,
    pub pearson: Option<f64>,
}

pub fn classification_metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<TaskMetrics> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(HectoError::Data(format!(
            "need aligned nonempty predictions and labels, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    let mut correct = 0;
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(HectoError::Data(format!("class index out of range for {classes} classes")));
        }
        if p == y {
            tp[p] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let f1: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(TaskMetrics {
        accuracy: Some(correct as f64 / labels.len() as f64),
        macro_f1: Some(f1 / classes as f64),
        ..TaskMetrics::default()
    })
}

/// Centered Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn regression_metrics(predictions: &[f64], targets: &[f64]) -> Result<TaskMetrics> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(HectoError::Data(format!(
            "need aligned nonempty predictions and targets, got {} and {}",
            predictions.len(),
            targets.len()
        )));
    }
    let mse = predictions.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / targets.len() as f64;
    Ok(TaskMetrics {
        mse: Some(mse),
        pearson: pearson(predictions, targets),
        ..TaskMetrics::default()
    })
}

/// Routing summary over one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub usage: Usage,
    pub entropy_nats: f64,
    pub entropy_bits: f64,
    pub classwise: BTreeMap<String, Vec<f64>>,
}

impl RoutingStats {
    pub fn from_decisions<S: AsRef<str>>(decisions: &[RoutingDecision], groups: &[S]) -> Result<Self> {
        let gates: Vec<&[f64]> = decisions.iter().map(|d| d.g.as_slice()).collect();
        let (entropy_nats, entropy_bits) = mean_gate_entropy(&gates)?;
        Ok(RoutingStats {
            usage: expert_usage(decisions)?,
            entropy_nats,
            entropy_bits,
            classwise: classwise_routing(decisions, groups)?,
        })
    }
}

/// Mean single-sample eval forward time, overall and split by the expert
/// the sample was routed to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub repetitions: usize,
    pub overall_ms: f64,
    /// `None` for experts no sample was routed to.
    pub per_expert_ms: Vec<Option<f64>>,
    pub samples_per_expert: Vec<usize>,
}

pub fn latency_profile(model: &HectoModel, dataset: &Dataset, repetitions: usize) -> Result<LatencyProfile> {
    if repetitions == 0 {
        return Err(HectoError::Config("latency profile needs at least one repetition".into()));
    }
    if dataset.is_empty() {
        return Err(HectoError::Data("latency profile on an empty dataset".into()));
    }
    let k = model.num_experts();
    // unused in the eval phase but required by the forward signature
    let mut rng = RunRng::seed_from_u64(0);
    let mut sum_ms = vec![0.0; k];
    let mut count = vec![0usize; k];
    let mut total_ms = 0.0;
    for i in 0..dataset.len() {
        let batch = TokenBatch::from_sequences(&[dataset.examples[i].tokens.as_slice()]);
        // warm-up pass, also fixes the routing path for this sample
        let out = model.forward(&mut Graph::new(), &batch, Phase::Eval, &mut rng, None)?;
        let path = out.decisions[0].selected[0];
        let start = Instant::now();
        for _ in 0..repetitions {
            model.forward(&mut Graph::new(), &batch, Phase::Eval, &mut rng, None)?;
        }
        let ms = start.elapsed().as_secs_f64() * 1e3 / repetitions as f64;
        total_ms += ms;
        sum_ms[path] += ms;
        count[path] += 1;
    }
    Ok(LatencyProfile {
        repetitions,
        overall_ms: total_ms / dataset.len() as f64,
        per_expert_ms: sum_ms
            .iter()
            .zip(&count)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect(),
        samples_per_expert: count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| HectoError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HectoError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| HectoError::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

/// Serializes CSV records with a fixed header.
pub fn to_csv<R: Serialize>(header: &[&str], records: &[R]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let err = |e: csv::Error| HectoError::Data(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in records {
        w.serialize(r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| HectoError::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HectoError::Data(e.to_string()))
}

pub fn write_csv<R: Serialize>(header: &[&str], records: &[R], path: &Path) -> Result<()> {
    write_atomic(path, to_csv(header, records)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn dec(g: &[f64], selected: &[usize]) -> RoutingDecision {
        RoutingDecision {
            g: g.to_vec(),
            selected: selected.to_vec(),
            m: vec![0.0; g.len()],
        }
    }

    #[test]
    fn usage_examples() {
        let all_one: Vec<_> = (0..4).map(|_| dec(&[0.2, 0.8], &[1])).collect();
        assert_eq!(expert_usage(&all_one).unwrap().selected, vec![0.0, 1.0]);
        let mut three = all_one.clone();
        three[0] = dec(&[0.6, 0.4], &[0]);
        let u = expert_usage(&three).unwrap();
        assert_eq!(u.selected, vec![0.25, 0.75]);
        assert_eq!(format_usage(&u.selected), "25.0% / 75.0%");
        assert_eq!(format_usage(&[0.201, 0.799]), "20.1% / 79.9%");
        assert!(expert_usage(&[]).is_err());
    }

    #[test]
    fn top2_usage_views() {
        let d = vec![dec(&[0.5, 0.3, 0.2], &[0, 1]), dec(&[0.2, 0.3, 0.5], &[1, 2])];
        let u = expert_usage(&d).unwrap();
        assert_eq!(u.selected, vec![0.5, 1.0, 0.5]);
        assert_eq!(u.partition, vec![0.25, 0.5, 0.25]);
    }

    #[test]
    fn entropy_examples() {
        let (n, b) = mean_gate_entropy(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert_abs_diff_eq!(n, 0.6931, epsilon = 1e-4);
        assert_eq!(b, 1.0);
        assert_eq!(mean_gate_entropy(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(), (0.0, 0.0));
        let (n, b) = mean_gate_entropy(&[[1.0, 0.0], [0.5, 0.5]]).unwrap();
        assert_abs_diff_eq!(n, 0.3466, epsilon = 1e-4);
        assert_abs_diff_eq!(b, 0.5, epsilon = 1e-12);
        assert!(mean_gate_entropy(&[[0.9, 0.9]]).is_err());
    }

    #[test]
    fn classwise_examples() {
        let d: Vec<_> = (0..3).map(|_| dec(&[0.3, 0.7], &[1])).collect();
        let cw = classwise_routing(&d, &["x"; 3]).unwrap();
        assert_abs_diff_eq!(cw["x"][0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(cw["x"][1], 0.7, epsilon = 1e-15);

        let d = vec![dec(&[0.9, 0.1], &[0]), dec(&[0.2, 0.8], &[1])];
        let cw = classwise_routing(&d, &["static", "temporal"]).unwrap();
        assert_eq!(cw["static"], vec![0.9, 0.1]);
        assert_eq!(cw["temporal"], vec![0.2, 0.8]);
        assert!(classwise_routing(&d, &["only one"]).is_err());
    }

    #[test]
    fn classification_metric_examples() {
        let m = classification_metrics(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (Some(1.0), Some(1.0)));
        let m = classification_metrics(&[0, 0, 0, 0], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(m.accuracy, Some(0.5));
        // TP=1, FP=1, FN=1, TN=1 for class 1
        let m = classification_metrics(&[1, 1, 0, 0], &[1, 0, 1, 0], 2).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (Some(0.5), Some(0.5)));
        // class 2 never appears on either side and counts as F1 = 0
        let m = classification_metrics(&[0, 1], &[0, 1], 3).unwrap();
        assert_abs_diff_eq!(m.macro_f1.unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert!(classification_metrics(&[], &[], 2).is_err());
    }

    #[test]
    fn regression_metric_examples() {
        let y = [0.5, 1.0, 2.5, 4.0];
        let p: Vec<f64> = y.iter().map(|v| 2.0 * v + 1.0).collect();
        let m = regression_metrics(&p, &y).unwrap();
        assert_abs_diff_eq!(m.pearson.unwrap(), 1.0, epsilon = 1e-12);
        let expected = y.iter().map(|v| (v + 1.0f64).powi(2)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(m.mse.unwrap(), expected, epsilon = 1e-12);
        let shifted: Vec<f64> = y.iter().map(|v| v + 3.0).collect();
        assert_abs_diff_eq!(pearson(&shifted, &y).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &y[..3]), None);
        assert_eq!(regression_metrics(&[1.0; 3], &y[..3]).unwrap().pearson, None);
    }

    #[test]
    fn csv_header_is_fixed() {
        #[derive(Serialize)]
        struct Row {
            a: u32,
            b: f64,
        }
        let s = to_csv(&["a", "b"], &[Row { a: 1, b: 0.5 }]).unwrap();
        assert_eq!(s, "a,b\n1,0.5\n");
        assert_eq!(to_csv::<Row>(&["a", "b"], &[]).unwrap(), "a,b\n");
    }

    proptest! {
        #[test]
        fn bits_are_nats_over_ln2(rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..8)) {
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| { let s: f64 = r.iter().sum(); r.into_iter().map(|v| v / s).collect() }).collect();
            let (n, b) = mean_gate_entropy(&rows).unwrap();
            prop_assert_eq!((n / LN_2).to_bits(), b.to_bits());
        }

        #[test]
        fn pearson_is_affine_invariant(
            xs in prop::collection::vec(-10.0f64..10.0, 3..30),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x.sin() + 0.1 * i as f64).collect();
            let base = pearson(&xs, &ys);
            let moved: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
            match (base, pearson(&moved, &ys)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
            }
        }

        #[test]
        fn classwise_rows_are_stochastic(
            rows in prop::collection::vec((prop::collection::vec(0.01f64..1.0, 3), 0usize..3), 1..20),
        ) {
            let decisions: Vec<_> = rows.iter().map(|(r, _)| {
                let s: f64 = r.iter().sum();
                dec(&r.iter().map(|v| v / s).collect::<Vec<_>>(), &[0])
            }).collect();
            let groups: Vec<String> = rows.iter().map(|(_, c)| format!("c{c}")).collect();
            for row in classwise_routing(&decisions, &groups).unwrap().values() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let u = expert_usage(&decisions).unwrap();
            prop_assert!((u.selected.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
