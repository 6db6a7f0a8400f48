//! AdamW, the seeded epoch loop, and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::analytics::{classification_metrics, regression_metrics, routing_groups, RoutingStats, TaskMetrics};
use crate::diffcore::{Graph, ParamStore};
use crate::error::{HectoError, Result};
use crate::experts::TaskMode;
use crate::losses::{total_loss, LossWeights};
use crate::moe::{HectoModel, Phase, RoutingDecision};
use crate::tasks::Dataset;
use crate::RunRng;

/// Batch size used by [`evaluate`]; it has no effect on the numbers.
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 5,
            seeds: vec![0, 1, 2],
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(HectoError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(HectoError::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(HectoError::Config("learning rate or betas out of range".into()));
        }
        if !(self.eps_adam > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(HectoError::Config("eps_adam must be positive and weight_decay non-negative".into()));
        }
        if self.seeds.is_empty() {
            return Err(HectoError::Config("at least one seed is required".into()));
        }
        let w = self.loss_weights;
        if !(w.lambda_ent >= 0.0 && w.lambda_div >= 0.0 && w.lambda_ent.is_finite() && w.lambda_div.is_finite()) {
            return Err(HectoError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Moment buffers for every registered parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        AdamW {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients held in `store`. Frozen parameters and
    /// their moments are left alone.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig) -> Result<()> {
        for (_, p) in store.iter() {
            if !p.frozen && p.tensor.grad().iter().any(|g| !g.is_finite()) {
                return Err(HectoError::Numeric(format!("non-finite gradient in {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let grad = p.tensor.grad().to_vec();
            for (j, theta) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *theta -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.eps_adam) + cfg.weight_decay * *theta);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: TaskMetrics,
    pub decisions: Vec<RoutingDecision>,
}

/// Eval-phase pass: argmax routing, no dropout.
pub fn evaluate(model: &HectoModel, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(HectoError::Data("cannot evaluate on an empty dataset".into()));
    }
    let mode = model.config().mode;
    let classification = matches!(mode, TaskMode::Classification { .. });
    let labels = if classification { Some(dataset.labels()?) } else { None };
    let mut rng = RunRng::seed_from_u64(0);
    let mut decisions = Vec::with_capacity(dataset.len());
    let mut classes = Vec::new();
    let mut values = Vec::new();
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (batch, _) = dataset.batch(chunk, false)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, Phase::Eval, &mut rng, None)?;
        let preds = g.value(out.predictions);
        for i in 0..chunk.len() {
            let row = preds.row_slice(i);
            if classification {
                classes.push(crate::moe::argmax(row));
            } else {
                values.push(row[0]);
            }
        }
        decisions.extend(out.decisions);
    }
    let metrics = match (mode, labels) {
        (TaskMode::Classification { classes: c }, Some(labels)) => classification_metrics(&classes, &labels, c)?,
        _ => regression_metrics(&values, &dataset.values())?,
    };
    Ok(Evaluation { metrics, decisions })
}

/// One row per epoch; every number is a deterministic function of
/// (seed, config, dataset).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the full objective over the epoch's steps.
    pub train_loss: f64,
    pub train_task_loss: f64,
    /// Metrics on the held-out split.
    pub held_out: TaskMetrics,
    pub routing: RoutingStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub experts: Vec<String>,
    /// Name of the split the per-epoch metrics were measured on.
    pub eval_split: String,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub epochs: Vec<EpochRecord>,
    pub param_checksum: String,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
}

/// Wall-clock measurements, kept apart from [`RunReport`] so the report
/// stays bitwise reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub seed: u64,
    pub epoch_seconds: Vec<f64>,
    /// Mean held-out forward time per sample for each epoch.
    pub eval_ms_per_sample: Vec<f64>,
}

pub fn hex(checksum: u64) -> String {
    format!("{checksum:016x}")
}

/// Trains `model` in place on `train` and evaluates on `held_out` after
/// every epoch.
pub fn train(
    model: &mut HectoModel,
    train: &Dataset,
    held_out: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(RunReport, RunTiming)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(HectoError::Data("training set is empty".into()));
    }
    if held_out.is_empty() {
        return Err(HectoError::Data("held-out set is empty".into()));
    }
    let classification = matches!(model.config().mode, TaskMode::Classification { .. });
    let enc = &model.config().encoder;
    train.validate(enc.vocab_size, enc.max_tokens())?;
    held_out.validate(enc.vocab_size, enc.max_tokens())?;

    // Stream 1 keeps the data order and routing samples independent of the
    // initialization stream.
    let mut rng = RunRng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(&model.params);
    let groups = routing_groups(held_out, classification);
    let encoder_before = model.encoder_checksum();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut timing = RunTiming {
        seed,
        epoch_seconds: Vec::new(),
        eval_ms_per_sample: Vec::new(),
    };

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut task_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, targets) = train.batch(chunk, classification)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch, Phase::Train, &mut rng, None)?;
            let task = model.net.task_loss(&mut g, out.predictions, &targets)?;
            let loss = total_loss(&mut g, task, out.gates, cfg.loss_weights)?;
            g.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate_grads(&g);
            opt.step(&mut model.params, cfg)?;
            loss_sum += g.value(loss).item() * chunk.len() as f64;
            task_sum += g.value(task).item() * chunk.len() as f64;
        }
        timing.epoch_seconds.push(start.elapsed().as_secs_f64());

        let eval_start = Instant::now();
        let ev = evaluate(model, held_out)?;
        timing
            .eval_ms_per_sample
            .push(eval_start.elapsed().as_secs_f64() * 1e3 / held_out.len() as f64);
        let loss = loss_sum / train.len() as f64;
        if !loss.is_finite() {
            return Err(HectoError::Numeric(format!("training loss diverged in epoch {epoch}")));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss,
            train_task_loss: task_sum / train.len() as f64,
            held_out: ev.metrics,
            routing: RoutingStats::from_decisions(&ev.decisions, &groups)?,
        });
    }

    let report = RunReport {
        seed,
        experts: model.config().experts.iter().map(|k| k.label().to_string()).collect(),
        eval_split: "held-out".to_string(),
        train_examples: train.len(),
        eval_examples: held_out.len(),
        epochs,
        param_checksum: hex(model.params.checksum()),
        encoder_checksum_before: hex(encoder_before),
        encoder_checksum_after: hex(model.encoder_checksum()),
    };
    Ok((report, timing))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::diffcore::Tensor;

    fn scalar_store(theta: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.register("theta", Tensor::scalar(theta)).unwrap();
        s.get_mut(id).tensor.grad_mut()[0] = grad;
        s
    }

    fn cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    fn theta(s: &ParamStore) -> f64 {
        s.iter().next().unwrap().1.tensor.data()[0]
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut s = scalar_store(0.7, 3.0);
        AdamW::new(&s).step(&mut s, &cfg(0.0, 0.01)).unwrap();
        assert_eq!(theta(&s), 0.7);
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut s = scalar_store(2.0, 0.0);
        AdamW::new(&s).step(&mut s, &cfg(0.1, 0.01)).unwrap();
        assert_eq!(theta(&s), 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut s = scalar_store(1.0, 1.0);
        AdamW::new(&s).step(&mut s, &cfg(0.1, 0.0)).unwrap();
        assert_abs_diff_eq!(theta(&s), 0.9, epsilon = 1e-7);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = scalar_store(1.0, 1.0);
        let id = s.ids().next().unwrap();
        s.set_frozen(id, true);
        AdamW::new(&s).step(&mut s, &cfg(0.1, 0.01)).unwrap();
        assert_eq!(theta(&s), 1.0);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = scalar_store(1.0, f64::NAN);
        match AdamW::new(&s).step(&mut s, &cfg(0.1, 0.0)) {
            Err(HectoError::Numeric(msg)) => assert!(msg.contains("theta")),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        let negative = LossWeights { lambda_ent: -0.1, lambda_div: 0.0 };
        assert!(TrainConfig { loss_weights: negative, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
