//! Browser bindings. Each exported function returns a JSON string so the page
//! needs no glue beyond `JSON.parse`.

use hecto::analytics::{mean_gate_entropy, routing_groups, RoutingStats};
use hecto::diffcore::{softmax_row, Graph, Tensor};
use hecto::experts::ExpertKind;
use hecto::losses::{diversity_penalty, entropy_penalty, total_loss, LossWeights};
use hecto::moe::{HectoModel, ModelConfig, Phase};
use hecto::tasks::gen_mixed;
use hecto::trainer::{evaluate, AdamW, TrainConfig};
use hecto::RunRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize, PartialEq)]
pub struct Softmax {
    pub probs: Vec<f64>,
    pub entropy_bits: f64,
    pub max_bits: f64,
}

pub fn softmax_stats(logits: &[f64], tau: f64) -> Result<Softmax, String> {
    if logits.is_empty() || !(tau > 0.0) {
        return Err("need at least one logit and a positive temperature".into());
    }
    let probs = softmax_row(logits, tau);
    let (_, bits) = mean_gate_entropy(&[probs.clone()]).map_err(|e| e.to_string())?;
    Ok(Softmax {
        probs,
        entropy_bits: bits,
        max_bits: (logits.len() as f64).log2(),
    })
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Penalties {
    pub entropy: f64,
    pub diversity: f64,
    /// Regularizer contribution at the default weights.
    pub weighted: f64,
}

/// `flat` holds `rows` gate vectors back to back.
pub fn penalty_values(flat: &[f64], rows: usize) -> Result<Penalties, String> {
    if rows == 0 || flat.is_empty() || flat.len() % rows != 0 {
        return Err(format!("{} values do not split into {rows} rows", flat.len()));
    }
    let k = flat.len() / rows;
    let t = Tensor::matrix(rows, k, flat.to_vec()).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let gates = g.constant(t);
    let zero = g.constant(Tensor::scalar(0.0));
    let e = entropy_penalty(&mut g, gates).map_err(|e| e.to_string())?;
    let d = diversity_penalty(&mut g, gates).map_err(|e| e.to_string())?;
    let w = total_loss(&mut g, zero, gates, LossWeights::default()).map_err(|e| e.to_string())?;
    Ok(Penalties {
        entropy: g.value(e).item(),
        diversity: g.value(d).item(),
        weighted: g.value(w).item(),
    })
}

#[derive(Debug, Serialize, PartialEq)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub accuracy: f64,
    pub entropy_bits: f64,
    /// Percent of held-out samples of each tag routed to the GRU expert.
    pub gru_static: f64,
    pub gru_temporal: f64,
}

/// Trains a small FFNN+GRU model on the mixed task and records how routing
/// drifts per epoch. `lambda_scale` multiplies both regularizer weights.
pub fn routing_trajectory(seed: u64, epochs: usize, n: usize, lambda_scale: f64) -> Result<Vec<TrajectoryPoint>, String> {
    let fail = |e: hecto::error::HectoError| e.to_string();
    let data = gen_mixed(n, 0.5, 12, seed).map_err(fail)?;
    let (train, held_out) = data.split(0.25).map_err(fail)?;
    let d = LossWeights::default();
    let cfg = TrainConfig {
        loss_weights: LossWeights {
            lambda_ent: d.lambda_ent * lambda_scale,
            lambda_div: d.lambda_div * lambda_scale,
        },
        ..TrainConfig::default()
    };
    cfg.validate().map_err(fail)?;
    let mc = ModelConfig {
        experts: vec![ExpertKind::Ffnn, ExpertKind::Gru],
        ..ModelConfig::default()
    };
    let mut model = HectoModel::new(mc, seed).map_err(fail)?;
    let mut opt = AdamW::new(&model.params);
    let mut rng = RunRng::seed_from_u64(seed);
    rng.set_stream(1);
    let groups = routing_groups(&held_out, true);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut points = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, targets) = train.batch(chunk, true).map_err(fail)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch, Phase::Train, &mut rng, None).map_err(fail)?;
            let task = model.net.task_loss(&mut g, out.predictions, &targets).map_err(fail)?;
            let loss = total_loss(&mut g, task, out.gates, cfg.loss_weights).map_err(fail)?;
            g.backward(loss).map_err(fail)?;
            model.params.zero_grad();
            model.params.accumulate_grads(&g);
            opt.step(&mut model.params, &cfg).map_err(fail)?;
        }
        let ev = evaluate(&model, &held_out).map_err(fail)?;
        let stats = RoutingStats::from_decisions(&ev.decisions, &groups).map_err(fail)?;
        let gru = |tag: &str| stats.classwise.get(tag).map_or(0.0, |row| 100.0 * row[1]);
        points.push(TrajectoryPoint {
            epoch,
            accuracy: ev.metrics.accuracy.unwrap_or(0.0),
            entropy_bits: stats.entropy_bits,
            gru_static: gru("static"),
            gru_temporal: gru("temporal"),
        });
    }
    Ok(points)
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn softmax(logits: Vec<f64>, tau: f64) -> Result<String, JsError> {
    json(softmax_stats(&logits, tau))
}

#[wasm_bindgen]
pub fn penalties(flat: Vec<f64>, rows: usize) -> Result<String, JsError> {
    json(penalty_values(&flat, rows))
}

#[wasm_bindgen]
pub fn trajectory(seed: u32, epochs: usize, n: usize, lambda_scale: f64) -> Result<String, JsError> {
    json(routing_trajectory(seed as u64, epochs, n, lambda_scale))
}
