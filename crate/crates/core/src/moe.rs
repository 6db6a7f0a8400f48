//! Dual projections, the temperature-softmax gate, routing policies, and the
//! assembled model.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Var};
use crate::encoder::{Encoder, EncoderConfig, TokenBatch};
use crate::error::{HectoError, Result};
use crate::experts::{Expert, ExpertKind, Linear, TaskMode, TcnConfig};
use crate::RunRng;

/// Routing probabilities must sum to one within this tolerance.
pub const GATE_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInput {
    /// The summary projection `z`, the same vector the feedforward expert sees.
    Summary,
    /// The summary projection applied to the mean of the token rows.
    MeanPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingPolicy {
    HardTop1,
    Top2,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub tau: f64,
    pub input_mode: GateInput,
    pub policy: RoutingPolicy,
    pub d_hidden: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            tau: 1.5,
            input_mode: GateInput::Summary,
            policy: RoutingPolicy::HardTop1,
            d_hidden: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub d_proj: usize,
    pub d_hid: usize,
    pub experts: Vec<ExpertKind>,
    pub gate: GateConfig,
    pub mode: TaskMode,
    pub tcn: TcnConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            d_proj: 16,
            d_hid: 8,
            experts: vec![ExpertKind::Ffnn, ExpertKind::Gru],
            gate: GateConfig::default(),
            mode: TaskMode::Classification { classes: 2 },
            tcn: TcnConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.experts.is_empty() {
            return Err(HectoError::Config("expert pool must not be empty".into()));
        }
        if !(self.gate.tau > 0.0) || !self.gate.tau.is_finite() {
            return Err(HectoError::Config(format!("gate.tau must be positive, got {}", self.gate.tau)));
        }
        if self.gate.policy == RoutingPolicy::Top2 && self.experts.len() < 2 {
            return Err(HectoError::Config("top2 routing needs at least two experts".into()));
        }
        if self.d_proj == 0 || self.d_hid == 0 || self.gate.d_hidden == 0 {
            return Err(HectoError::Config("layer widths must be positive".into()));
        }
        if let TaskMode::Classification { classes } = self.mode {
            if classes < 2 {
                return Err(HectoError::Config(format!("need at least 2 classes, got {classes}")));
            }
        }
        Ok(())
    }
}

/// Per-sample routing outcome: gate probabilities `g`, the experts that ran,
/// and the forward mixture weights `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub g: Vec<f64>,
    pub selected: Vec<usize>,
    pub m: Vec<f64>,
}

fn check_distribution(g: &[f64]) -> Result<()> {
    let sum: f64 = g.iter().sum();
    if g.is_empty() || g.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > GATE_SUM_TOLERANCE {
        return Err(HectoError::Numeric(format!("invalid gate distribution {g:?}")));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(g: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in g.iter().enumerate() {
        if v > g[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from the categorical distribution `g`.
pub fn sample_categorical(g: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in g.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last cumulative sum
    g.iter().rposition(|&p| p > 0.0).unwrap_or(g.len() - 1)
}

/// The two largest entries in ascending index order; ties favour lower indices.
fn top2(g: &[f64]) -> [usize; 2] {
    let first = argmax(g);
    let mut second = if first == 0 { 1 } else { 0 };
    for (i, &v) in g.iter().enumerate() {
        if i != first && v > g[second] {
            second = i;
        }
    }
    if first < second {
        [first, second]
    } else {
        [second, first]
    }
}

/// Chooses the experts to execute for one sample.
pub fn route(g: &[f64], policy: RoutingPolicy, phase: Phase, rng: &mut impl Rng) -> Result<RoutingDecision> {
    check_distribution(g)?;
    let k = g.len();
    let (selected, m) = match (policy, phase) {
        (RoutingPolicy::HardTop1, Phase::Train) => {
            let s = sample_categorical(g, rng);
            (vec![s], one_hot(k, s))
        }
        (RoutingPolicy::HardTop1, Phase::Eval) => {
            let s = argmax(g);
            (vec![s], one_hot(k, s))
        }
        (RoutingPolicy::Top2, _) => {
            if k < 2 {
                return Err(HectoError::Config("top2 routing needs at least two experts".into()));
            }
            let sel = top2(g);
            let total = g[sel[0]] + g[sel[1]];
            let mut m = vec![0.0; k];
            for &i in &sel {
                m[i] = g[i] / total;
            }
            (sel.to_vec(), m)
        }
        (RoutingPolicy::Soft, _) => ((0..k).collect(), g.to_vec()),
    };
    Ok(RoutingDecision {
        g: g.to_vec(),
        selected,
        m,
    })
}

fn one_hot(k: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

/// Routing replayed from an earlier forward pass: the selected experts and
/// the gate values treated as constants by the straight-through estimator.
/// Used to make the training loss a deterministic function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedRouting {
    pub selected: Vec<Vec<usize>>,
    pub detached: Vec<Vec<f64>>,
}

impl FixedRouting {
    pub fn from_decisions(decisions: &[RoutingDecision]) -> Self {
        FixedRouting {
            selected: decisions.iter().map(|d| d.selected.clone()).collect(),
            detached: decisions.iter().map(|d| d.g.clone()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `B × C` logits or `B × 1` regression outputs.
    pub predictions: Var,
    /// `B × K` soft gate probabilities, always the input to the regularizers.
    pub gates: Var,
    pub decisions: Vec<RoutingDecision>,
    /// Number of samples each expert was executed on.
    pub expert_calls: Vec<usize>,
}

/// Supervision for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Vec<f64>),
}

/// Parameter layout of the model; the values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct HectoNet {
    cfg: ModelConfig,
    encoder: Encoder,
    summary_proj: Linear,
    sequence_proj: Linear,
    gate_hidden: Linear,
    gate_out: Linear,
    experts: Vec<Expert>,
}

impl HectoNet {
    pub fn new(cfg: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone(), store, rng)?;
        let d_embed = cfg.encoder.d_embed;
        let summary_proj = Linear::new(store, "proj.summary", d_embed, cfg.d_proj, rng)?;
        let sequence_proj = Linear::new(store, "proj.sequence", d_embed, cfg.d_proj, rng)?;
        let gate_hidden = Linear::new(store, "gate.hidden", cfg.d_proj, cfg.gate.d_hidden, rng)?;
        let gate_out = Linear::new(store, "gate.out", cfg.gate.d_hidden, cfg.num_experts(), rng)?;
        let experts = cfg
            .experts
            .iter()
            .enumerate()
            .map(|(i, &kind)| Expert::new(kind, i, cfg.d_proj, cfg.d_hid, cfg.mode, &cfg.tcn, store, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(HectoNet {
            cfg,
            encoder,
            summary_proj,
            sequence_proj,
            gate_hidden,
            gate_out,
            experts,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn gate_layers(&self) -> (Linear, Linear) {
        (self.gate_hidden, self.gate_out)
    }

    pub fn projections(&self) -> (Linear, Linear) {
        (self.summary_proj, self.sequence_proj)
    }

    /// `z = ReLU(H[0] · W_cls + b_cls)`, `1 × d_proj`.
    pub fn project_summary(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let slot = g.row(h, 0)?;
        let pre = self.summary_proj.forward(g, store, slot)?;
        Ok(g.relu(pre))
    }

    /// `H′ = H[1..=T] · W_seq + b_seq`, `T × d_proj`.
    pub fn project_sequence(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let t = g.value(h).rows() - 1;
        let tokens = g.rows(h, 1, t)?;
        self.sequence_proj.forward(g, store, tokens)
    }

    /// Summary projection applied to the mean of the first `len` token rows.
    pub fn project_mean_pool(&self, g: &mut Graph, store: &ParamStore, h: Var, len: usize) -> Result<Var> {
        let tokens = g.rows(h, 1, len)?;
        let mean = g.mean_rows(tokens);
        let pre = self.summary_proj.forward(g, store, mean)?;
        Ok(g.relu(pre))
    }

    /// `softmax((ReLU(x · W₁ + b₁) · W₂ + b₂) / τ)` row-wise, `B × K`.
    pub fn gate_forward(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Result<Var> {
        let pre = self.gate_hidden.forward(g, store, input)?;
        let hidden = g.relu(pre);
        let logits = self.gate_out.forward(g, store, hidden)?;
        g.softmax_temperature(logits, self.cfg.gate.tau)
    }

    /// Full forward pass. Only the experts in each sample's selected set are
    /// evaluated. `rng` drives routing samples and dropout in the training
    /// phase; `fixed` replays an earlier routing instead of sampling.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &TokenBatch,
        phase: Phase,
        rng: &mut RunRng,
        fixed: Option<&FixedRouting>,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(HectoError::Data("empty batch".into()));
        }
        if let Some(f) = fixed {
            if f.selected.len() != batch.len() || f.detached.len() != batch.len() {
                return Err(HectoError::Contract("fixed routing does not match the batch".into()));
            }
        }
        let hs = self.encoder.encode(g, store, batch)?;
        let zs = hs
            .iter()
            .map(|&h| self.project_summary(g, store, h))
            .collect::<Result<Vec<_>>>()?;
        let gate_rows = match self.cfg.gate.input_mode {
            GateInput::Summary => zs.clone(),
            GateInput::MeanPool => hs
                .iter()
                .zip(&batch.lengths)
                .map(|(&h, &len)| self.project_mean_pool(g, store, h, len))
                .collect::<Result<Vec<_>>>()?,
        };
        let gate_in = g.concat_rows(&gate_rows)?;
        let gates = self.gate_forward(g, store, gate_in)?;

        let policy = self.cfg.gate.policy;
        let k = self.cfg.num_experts();
        let mut expert_calls = vec![0; k];
        let mut decisions = Vec::with_capacity(batch.len());
        let mut rows = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let gi = g.value(gates).row_slice(i).to_vec();
            let (selected, detached) = match fixed {
                Some(f) => (f.selected[i].clone(), f.detached[i].clone()),
                None => (route(&gi, policy, phase, rng)?.selected, gi.clone()),
            };
            let seq = if selected.iter().any(|&e| self.experts[e].kind.reads_sequence()) {
                Some(self.project_sequence(g, store, hs[i])?)
            } else {
                None
            };

            let weights = self.mixture_weights(g, gates, i, &selected, &detached, phase)?;
            let mut m = vec![0.0; k];
            let mut acc: Option<Var> = None;
            for (&e, &w) in selected.iter().zip(&weights) {
                let dropout_rng = match phase {
                    Phase::Train => Some(&mut *rng),
                    Phase::Eval => None,
                };
                let out = self.experts[e].forward(g, store, zs[i], seq, batch.lengths[i], dropout_rng)?;
                expert_calls[e] += 1;
                let term = match w {
                    Some(w) => {
                        m[e] = g.value(w).item();
                        g.scale_by(out.output, w)?
                    }
                    None => {
                        m[e] = 1.0;
                        out.output
                    }
                };
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
            rows.push(acc.ok_or_else(|| HectoError::Contract(format!("sample {i} routed to no expert")))?);
            decisions.push(RoutingDecision { g: gi, selected, m });
        }
        let predictions = g.concat_rows(&rows)?;
        Ok(ForwardOutput {
            predictions,
            gates,
            decisions,
            expert_calls,
        })
    }

    /// Differentiable mixture weight for each selected expert; `None` means a
    /// constant weight of one.
    fn mixture_weights(
        &self,
        g: &mut Graph,
        gates: Var,
        i: usize,
        selected: &[usize],
        detached: &[f64],
        phase: Phase,
    ) -> Result<Vec<Option<Var>>> {
        match (self.cfg.gate.policy, phase) {
            (RoutingPolicy::HardTop1, Phase::Train) => selected
                .iter()
                .map(|&e| {
                    let p = g.element(gates, i, e)?;
                    g.straight_through(p, detached[e]).map(Some)
                })
                .collect(),
            (RoutingPolicy::HardTop1, Phase::Eval) => Ok(vec![None; selected.len()]),
            (RoutingPolicy::Top2, _) => {
                let ps = selected
                    .iter()
                    .map(|&e| g.element(gates, i, e))
                    .collect::<Result<Vec<_>>>()?;
                let mut total = ps[0];
                for &p in &ps[1..] {
                    total = g.add(total, p)?;
                }
                let inv = g.recip(total);
                ps.into_iter().map(|p| g.scale_by(p, inv).map(Some)).collect()
            }
            (RoutingPolicy::Soft, _) => selected.iter().map(|&e| g.element(gates, i, e).map(Some)).collect(),
        }
    }

    /// Task loss on `predictions` against `targets`.
    pub fn task_loss(&self, g: &mut Graph, predictions: Var, targets: &Targets) -> Result<Var> {
        match (self.cfg.mode, targets) {
            (TaskMode::Classification { .. }, Targets::Labels(l)) => g.cross_entropy(predictions, l),
            (TaskMode::Regression, Targets::Values(v)) => g.mse(predictions, v),
            _ => Err(HectoError::Mode("targets do not match the model's task mode".into())),
        }
    }
}

/// A network layout together with its parameter values.
#[derive(Clone, Debug)]
pub struct HectoModel {
    pub net: HectoNet,
    pub params: ParamStore,
}

impl HectoModel {
    /// Builds and initializes a model; all randomness comes from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = RunRng::seed_from_u64(seed);
        let net = HectoNet::new(cfg, &mut params, &mut rng)?;
        Ok(HectoModel { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn num_experts(&self) -> usize {
        self.net.config().num_experts()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &TokenBatch,
        phase: Phase,
        rng: &mut RunRng,
        fixed: Option<&FixedRouting>,
    ) -> Result<ForwardOutput> {
        self.net.forward(g, &self.params, batch, phase, rng, fixed)
    }

    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.net.encoder.set_frozen(&mut self.params, frozen);
    }

    pub fn encoder_checksum(&self) -> u64 {
        self.net.encoder.checksum(&self.params)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::diffcore::Tensor;

    fn rng() -> RunRng {
        RunRng::seed_from_u64(0)
    }

    #[test]
    fn eval_argmax_routing() {
        let d = route(&[0.9, 0.1], RoutingPolicy::HardTop1, Phase::Eval, &mut rng()).unwrap();
        assert_eq!(d.selected, vec![0]);
        assert_eq!(d.m, vec![1.0, 0.0]);
    }

    #[test]
    fn eval_tie_goes_to_the_lowest_index() {
        let d = route(&[0.5, 0.5], RoutingPolicy::HardTop1, Phase::Eval, &mut rng()).unwrap();
        assert_eq!(d.selected, vec![0]);
        let d = route(&[0.2, 0.4, 0.4], RoutingPolicy::HardTop1, Phase::Eval, &mut rng()).unwrap();
        assert_eq!(d.selected, vec![1]);
    }

    #[test]
    fn top2_over_two_experts_is_the_identity_renormalization() {
        let d = route(&[0.7, 0.3], RoutingPolicy::Top2, Phase::Train, &mut rng()).unwrap();
        assert_eq!(d.selected, vec![0, 1]);
        assert_abs_diff_eq!(d.m[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(d.m[1], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn top2_picks_the_two_largest_and_renormalizes() {
        let d = route(&[0.1, 0.5, 0.1, 0.3], RoutingPolicy::Top2, Phase::Eval, &mut rng()).unwrap();
        assert_eq!(d.selected, vec![1, 3]);
        assert_eq!(d.m.iter().filter(|&&v| v != 0.0).count(), 2);
        assert_abs_diff_eq!(d.m.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.m[1], 0.625, epsilon = 1e-12);
    }

    #[test]
    fn soft_routing_runs_everything() {
        let d = route(&[0.2, 0.3, 0.5], RoutingPolicy::Soft, Phase::Train, &mut rng()).unwrap();
        assert_eq!(d.selected, vec![0, 1, 2]);
        assert_eq!(d.m, vec![0.2, 0.3, 0.5]);
    }

    #[test]
    fn train_sampling_follows_the_categorical_law() {
        let mut r = RunRng::seed_from_u64(42);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| {
                route(&[0.8, 0.2], RoutingPolicy::HardTop1, Phase::Train, &mut r).unwrap().selected == vec![0]
            })
            .count();
        let frac = hits as f64 / n as f64;
        assert!((0.78..=0.82).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn invalid_distributions_are_rejected() {
        for g in [vec![0.6, 0.6], vec![f64::NAN, 1.0], vec![1.5, -0.5]] {
            assert!(matches!(
                route(&g, RoutingPolicy::HardTop1, Phase::Eval, &mut rng()),
                Err(HectoError::Numeric(_))
            ));
        }
    }

    fn tiny_model(experts: Vec<ExpertKind>, policy: RoutingPolicy) -> HectoModel {
        let cfg = ModelConfig {
            experts,
            gate: GateConfig {
                policy,
                ..GateConfig::default()
            },
            ..ModelConfig::default()
        };
        HectoModel::new(cfg, 3).unwrap()
    }

    fn zero(model: &mut HectoModel, lin: Linear) {
        for id in [lin.w, lin.b] {
            model.params.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_gate_is_uniform_and_single_expert_gate_is_one() {
        let mut model = tiny_model(vec![ExpertKind::Ffnn, ExpertKind::Gru, ExpertKind::Gru], RoutingPolicy::Soft);
        let (h, o) = model.net.gate_layers();
        zero(&mut model, h);
        zero(&mut model, o);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.3; 16], vec![-1.0; 16]]).unwrap());
        let p = model.net.gate_forward(&mut g, &model.params, x).unwrap();
        for v in g.data(p) {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }

        let model = tiny_model(vec![ExpertKind::Gru], RoutingPolicy::HardTop1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.7; 16]));
        let p = model.net.gate_forward(&mut g, &model.params, x).unwrap();
        assert_eq!(g.data(p), &[1.0]);
    }

    #[test]
    fn gate_hand_case_matches_the_temperature_softmax() {
        let mut model = tiny_model(vec![ExpertKind::Ffnn, ExpertKind::Gru], RoutingPolicy::HardTop1);
        let (h, o) = model.net.gate_layers();
        zero(&mut model, h);
        zero(&mut model, o);
        model.params.get_mut(o.b).tensor.data_mut().copy_from_slice(&[1.0, 0.0]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.5; 16]));
        let p = model.net.gate_forward(&mut g, &model.params, x).unwrap();
        assert_abs_diff_eq!(g.data(p)[0], 0.6607, epsilon = 1e-4);
        assert_abs_diff_eq!(g.data(p)[1], 0.3393, epsilon = 1e-4);
    }

    #[test]
    fn projection_examples() {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                vocab_size: 4,
                d_embed: 2,
                max_len: 4,
                frozen: false,
            },
            d_proj: 2,
            ..ModelConfig::default()
        };
        let mut model = HectoModel::new(cfg, 0).unwrap();
        let (s, q) = model.net.projections();
        let set = |m: &mut HectoModel, id, v: &[f64]| m.params.get_mut(id).tensor.data_mut().copy_from_slice(v);
        set(&mut model, s.w, &[1.0, 0.0, 0.0, 1.0]);
        set(&mut model, s.b, &[-1.0, 1.0]);
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]]).unwrap());
        let z = model.net.project_summary(&mut g, &model.params, h).unwrap();
        assert_eq!(g.data(z), &[0.0, 1.5]);

        set(&mut model, s.w, &[0.0; 4]);
        set(&mut model, s.b, &[0.0; 2]);
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]]).unwrap());
        let z = model.net.project_summary(&mut g, &model.params, h).unwrap();
        assert_eq!(g.data(z), &[0.0, 0.0]);

        // "multiply by two" on the first coordinate
        set(&mut model, q.w, &[2.0, 0.0, 0.0, 0.0]);
        set(&mut model, q.b, &[0.0, 0.0]);
        let hp = model.net.project_sequence(&mut g, &model.params, h).unwrap();
        assert_eq!(g.value(hp).to_rows(), vec![vec![2.0, 0.0], vec![4.0, 0.0], vec![6.0, 0.0]]);

        let h2 = g.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0], vec![9.0, 9.0], vec![3.0, 0.0]]).unwrap());
        let hp2 = model.net.project_sequence(&mut g, &model.params, h2).unwrap();
        let (a, b) = (g.value(hp).to_rows(), g.value(hp2).to_rows());
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1], b[1]);
        assert_eq!(a[2], b[2]);

        set(&mut model, q.w, &[0.0; 4]);
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(4, 2));
        let hp = model.net.project_sequence(&mut g, &model.params, h).unwrap();
        assert!(g.data(hp).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hard_top1_executes_one_expert_per_sample() {
        let model = tiny_model(vec![ExpertKind::Ffnn, ExpertKind::Gru], RoutingPolicy::HardTop1);
        let batch = TokenBatch::from_sequences(&[vec![1, 2, 3], vec![4, 5], vec![6, 7, 8, 9], vec![10]]);
        for phase in [Phase::Train, Phase::Eval] {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch, phase, &mut rng(), None).unwrap();
            assert_eq!(out.expert_calls.iter().sum::<usize>(), batch.len());
            for d in &out.decisions {
                assert_eq!(d.selected.len(), 1);
                assert_eq!(d.m.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(d.m.iter().filter(|&&v| v == 0.0).count(), 1);
            }
        }
    }

    #[test]
    fn soft_prediction_is_the_gate_weighted_sum() {
        let model = tiny_model(vec![ExpertKind::Ffnn, ExpertKind::Gru], RoutingPolicy::Soft);
        let batch = TokenBatch::from_sequences(&[vec![1, 2, 3, 4]]);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, Phase::Eval, &mut rng(), None).unwrap();
        let gv = g.value(out.gates).row_slice(0).to_vec();

        let hs = model.net.encoder().encode(&mut g, &model.params, &batch).unwrap();
        let z = model.net.project_summary(&mut g, &model.params, hs[0]).unwrap();
        let s = model.net.project_sequence(&mut g, &model.params, hs[0]).unwrap();
        let y: Vec<Vec<f64>> = model
            .net
            .experts()
            .iter()
            .map(|e| {
                let o = e.forward(&mut g, &model.params, z, Some(s), 4, None).unwrap();
                g.data(o.output).to_vec()
            })
            .collect();
        for c in 0..2 {
            let expected = gv[0] * y[0][c] + gv[1] * y[1][c];
            assert_abs_diff_eq!(g.value(out.predictions).get(0, c), expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let model = tiny_model(vec![ExpertKind::Ffnn, ExpertKind::Tcn], RoutingPolicy::HardTop1);
        let batch = TokenBatch::from_sequences(&[vec![1, 2, 3], vec![9, 8, 7, 6, 5]]);
        let run = |seed| {
            let mut g = Graph::new();
            let out = model
                .forward(&mut g, &batch, Phase::Eval, &mut RunRng::seed_from_u64(seed), None)
                .unwrap();
            g.data(out.predictions).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn gate_rows_are_distributions_for_every_configuration() {
        for input_mode in [GateInput::Summary, GateInput::MeanPool] {
            for policy in [RoutingPolicy::HardTop1, RoutingPolicy::Top2, RoutingPolicy::Soft] {
                let cfg = ModelConfig {
                    experts: vec![ExpertKind::Ffnn, ExpertKind::Ffnn, ExpertKind::Gru, ExpertKind::Gru],
                    gate: GateConfig {
                        input_mode,
                        policy,
                        ..GateConfig::default()
                    },
                    ..ModelConfig::default()
                };
                let model = HectoModel::new(cfg, 5).unwrap();
                let batch = TokenBatch::from_sequences(&[vec![1, 2, 3], vec![4, 5, 6, 7, 8]]);
                let mut g = Graph::new();
                let out = model.forward(&mut g, &batch, Phase::Train, &mut rng(), None).unwrap();
                for row in g.value(out.gates).to_rows() {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn config_invariants() {
        let mut cfg = ModelConfig::default();
        cfg.experts.clear();
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            experts: vec![ExpertKind::Gru],
            gate: GateConfig {
                policy: RoutingPolicy::Top2,
                ..GateConfig::default()
            },
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            gate: GateConfig {
                tau: 0.0,
                ..GateConfig::default()
            },
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_parameter_is_registered_once() {
        let model = tiny_model(vec![ExpertKind::Ffnn, ExpertKind::Gru, ExpertKind::Tcn], RoutingPolicy::Soft);
        let mut names: Vec<&str> = model.params.iter().map(|(_, p)| p.name.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
        // each expert owns a disjoint parameter prefix
        for (i, e) in model.net.experts().iter().enumerate() {
            let prefix = format!("expert{i}.{}", e.kind.label().to_lowercase());
            assert!(names.iter().any(|n| n.starts_with(&prefix)));
        }
    }
}
