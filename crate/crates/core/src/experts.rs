//! Structurally distinct experts.
//!
//! The feedforward expert only ever sees the summary projection `z`; the GRU
//! and TCN experts only ever see the projected token sequence `H′`. Each
//! expert owns its parameters and its own output head.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{HectoError, Result};
use crate::RunRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Ffnn,
    Gru,
    Tcn,
}

impl ExpertKind {
    pub fn reads_sequence(self) -> bool {
        !matches!(self, ExpertKind::Ffnn)
    }

    pub fn label(self) -> &'static str {
        match self {
            ExpertKind::Ffnn => "FFNN",
            ExpertKind::Gru => "GRU",
            ExpertKind::Tcn => "TCN",
        }
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskMode {
    Classification { classes: usize },
    Regression,
}

impl TaskMode {
    pub fn output_dim(self) -> usize {
        match self {
            TaskMode::Classification { classes } => classes,
            TaskMode::Regression => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcnConfig {
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub dropout: f64,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            kernel: 3,
            dilations: vec![1, 2],
            dropout: 0.1,
        }
    }
}

/// Glorot-uniform weight matrix.
pub(crate) fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("shape is consistent")
}

/// Affine layer `x · w + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            w: store.register(format!("{name}.w"), glorot(rng, d_in, d_out))?,
            b: store.register(format!("{name}.b"), Tensor::zeros(1, d_out))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

/// Per-expert output layer: class logits or one scalar.
#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub linear: Linear,
    pub mode: TaskMode,
}

impl Head {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        self.linear.forward(g, store, hidden)
    }

    /// `ŷ = w · hidden + b`; only valid for a regression model.
    pub fn regression(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        match self.mode {
            TaskMode::Regression => self.forward(g, store, hidden),
            TaskMode::Classification { .. } => Err(HectoError::Mode(
                "regression head called on a classification model".into(),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnnParams {
    pub hidden: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_u: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_u: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_u: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

#[derive(Clone, Debug)]
pub struct TcnParams {
    pub cfg: TcnConfig,
    /// `layers[l][j]` is the tap applied to position `t - j * dilations[l]`.
    pub layers: Vec<Vec<ParamId>>,
    pub biases: Vec<ParamId>,
    pub residual: ParamId,
}

#[derive(Clone, Debug)]
pub enum ExpertBody {
    Ffnn(FfnnParams),
    Gru(GruParams),
    Tcn(TcnParams),
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertOutput {
    pub hidden: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub kind: ExpertKind,
    pub body: ExpertBody,
    pub head: Head,
}

impl Expert {
    pub fn new(
        kind: ExpertKind,
        index: usize,
        d_proj: usize,
        d_hid: usize,
        mode: TaskMode,
        tcn: &TcnConfig,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let prefix = format!("expert{index}.{}", kind.label().to_lowercase());
        let body = match kind {
            ExpertKind::Ffnn => ExpertBody::Ffnn(FfnnParams {
                hidden: Linear::new(store, &format!("{prefix}.hidden"), d_proj, d_hid, rng)?,
            }),
            ExpertKind::Gru => {
                let mut w = |name: &str, rows: usize| {
                    store.register(format!("{prefix}.{name}"), glorot(rng, rows, d_hid))
                };
                let (w_u, w_r, w_h) = (w("w_u", d_proj)?, w("w_r", d_proj)?, w("w_h", d_proj)?);
                let (u_u, u_r, u_h) = (w("u_u", d_hid)?, w("u_r", d_hid)?, w("u_h", d_hid)?);
                let mut b = |name: &str| store.register(format!("{prefix}.{name}"), Tensor::zeros(1, d_hid));
                ExpertBody::Gru(GruParams {
                    w_u,
                    w_r,
                    w_h,
                    u_u,
                    u_r,
                    u_h,
                    b_u: b("b_u")?,
                    b_r: b("b_r")?,
                    b_h: b("b_h")?,
                })
            }
            ExpertKind::Tcn => {
                if tcn.kernel == 0 || tcn.dilations.is_empty() || !(0.0..1.0).contains(&tcn.dropout) {
                    return Err(HectoError::Config(format!("invalid TCN settings {tcn:?}")));
                }
                let mut layers = Vec::new();
                let mut biases = Vec::new();
                for l in 0..tcn.dilations.len() {
                    let d_in = if l == 0 { d_proj } else { d_hid };
                    let taps = (0..tcn.kernel)
                        .map(|j| store.register(format!("{prefix}.conv{l}.tap{j}"), glorot(rng, d_in, d_hid)))
                        .collect::<Result<Vec<_>>>()?;
                    layers.push(taps);
                    biases.push(store.register(format!("{prefix}.conv{l}.b"), Tensor::zeros(1, d_hid))?);
                }
                let residual = store.register(format!("{prefix}.residual"), glorot(rng, d_proj, d_hid))?;
                ExpertBody::Tcn(TcnParams {
                    cfg: tcn.clone(),
                    layers,
                    biases,
                    residual,
                })
            }
        };
        let head = Head {
            linear: Linear::new(store, &format!("{prefix}.head"), d_hid, mode.output_dim(), rng)?,
            mode,
        };
        Ok(Expert { kind, body, head })
    }

    /// Runs the expert on one sample. `summary` is `1 × d_proj`; `sequence`
    /// is `T × d_proj` of which the first `len` rows are real. `dropout_rng`
    /// enables dropout (training only).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        summary: Var,
        sequence: Option<Var>,
        len: usize,
        dropout_rng: Option<&mut RunRng>,
    ) -> Result<ExpertOutput> {
        let hidden = match &self.body {
            ExpertBody::Ffnn(p) => ffnn_hidden(g, store, p, summary)?,
            ExpertBody::Gru(p) => {
                let seq = sequence.ok_or_else(|| HectoError::Contract("GRU expert needs the sequence".into()))?;
                gru_hidden(g, store, p, seq, len)?
            }
            ExpertBody::Tcn(p) => {
                let seq = sequence.ok_or_else(|| HectoError::Contract("TCN expert needs the sequence".into()))?;
                tcn_hidden(g, store, p, seq, len, dropout_rng)?
            }
        };
        let output = self.head.forward(g, store, hidden)?;
        Ok(ExpertOutput { hidden, output })
    }
}

/// `tanh(z · W₁ + b₁)`
pub fn ffnn_hidden(g: &mut Graph, store: &ParamStore, p: &FfnnParams, z: Var) -> Result<Var> {
    let pre = p.hidden.forward(g, store, z)?;
    Ok(g.tanh(pre))
}

/// One recurrence step given the input-side pre-activations `x·W + b` for the
/// update, reset and candidate gates.
fn gru_step(g: &mut Graph, store: &ParamStore, p: &GruParams, xu: Var, xr: Var, xh: Var, h: Var) -> Result<Var> {
    let (u_u, u_r, u_h) = (g.param(store, p.u_u), g.param(store, p.u_r), g.param(store, p.u_h));
    let hu = g.matmul(h, u_u)?;
    let pre_u = g.add(xu, hu)?;
    let u = g.sigmoid(pre_u);
    let hr = g.matmul(h, u_r)?;
    let pre_r = g.add(xr, hr)?;
    let r = g.sigmoid(pre_r);
    let rh = g.mul(r, h)?;
    let rhu = g.matmul(rh, u_h)?;
    let pre_c = g.add(xh, rhu)?;
    let cand = g.tanh(pre_c);
    let keep = g.affine(u, -1.0, 1.0);
    let old = g.mul(keep, h)?;
    let new = g.mul(u, cand)?;
    g.add(old, new)
}

/// `h_t = (1 − u) ⊙ h_{t−1} + u ⊙ tanh(x W_h + (r ⊙ h_{t−1}) U_h + b_h)` with
/// `u`, `r` the sigmoid update and reset gates.
pub fn gru_cell(g: &mut Graph, store: &ParamStore, p: &GruParams, x: Var, h_prev: Var) -> Result<Var> {
    let lin = |g: &mut Graph, w: ParamId, b: ParamId| {
        let (w, b) = (g.param(store, w), g.param(store, b));
        g.linear(x, w, b)
    };
    let xu = lin(g, p.w_u, p.b_u)?;
    let xr = lin(g, p.w_r, p.b_r)?;
    let xh = lin(g, p.w_h, p.b_h)?;
    gru_step(g, store, p, xu, xr, xh, h_prev)
}

/// Final GRU state after `len` steps from `h₀ = 0`.
pub fn gru_hidden(g: &mut Graph, store: &ParamStore, p: &GruParams, seq: Var, len: usize) -> Result<Var> {
    if len == 0 {
        return Err(HectoError::Data("GRU expert given an empty sequence".into()));
    }
    let x = g.rows(seq, 0, len)?;
    let lin = |g: &mut Graph, w: ParamId, b: ParamId| {
        let (w, b) = (g.param(store, w), g.param(store, b));
        g.linear(x, w, b)
    };
    let xu = lin(g, p.w_u, p.b_u)?;
    let xr = lin(g, p.w_r, p.b_r)?;
    let xh = lin(g, p.w_h, p.b_h)?;
    let d_hid = g.value(xu).cols();
    let mut h = g.constant(Tensor::zeros(1, d_hid));
    for t in 0..len {
        let (ut, rt, ht) = (g.row(xu, t)?, g.row(xr, t)?, g.row(xh, t)?);
        h = gru_step(g, store, p, ut, rt, ht, h)?;
    }
    Ok(h)
}

/// Causal dilated convolution over the rows of `x`: `Σ_j shift(x, j·d) · W_j + b`.
pub fn causal_conv(g: &mut Graph, store: &ParamStore, x: Var, taps: &[ParamId], bias: ParamId, dilation: usize) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (j, &tap) in taps.iter().enumerate() {
        let w = g.param(store, tap);
        let xw = g.matmul(x, w)?;
        let shifted = if j == 0 { xw } else { g.shift_rows(xw, j * dilation) };
        acc = Some(match acc {
            None => shifted,
            Some(a) => g.add(a, shifted)?,
        });
    }
    let acc = acc.ok_or_else(|| HectoError::Config("convolution without taps".into()))?;
    let b = g.param(store, bias);
    g.add_row_bias(acc, b)
}

/// Residual block of causal dilated convolutions, ReLU and dropout between
/// layers; the hidden state is the output at the last real position.
pub fn tcn_hidden(
    g: &mut Graph,
    store: &ParamStore,
    p: &TcnParams,
    seq: Var,
    len: usize,
    dropout_rng: Option<&mut RunRng>,
) -> Result<Var> {
    let states = tcn_states(g, store, p, seq, len, dropout_rng)?;
    g.row(states, len - 1)
}

/// Block output at every one of the first `len` positions, `len × d_hid`.
pub fn tcn_states(
    g: &mut Graph,
    store: &ParamStore,
    p: &TcnParams,
    seq: Var,
    len: usize,
    mut dropout_rng: Option<&mut RunRng>,
) -> Result<Var> {
    if len == 0 {
        return Err(HectoError::Data("TCN expert given an empty sequence".into()));
    }
    let x = g.rows(seq, 0, len)?;
    let mut a = x;
    let last = p.layers.len() - 1;
    for (l, (taps, &bias)) in p.layers.iter().zip(&p.biases).enumerate() {
        a = causal_conv(g, store, a, taps, bias, p.cfg.dilations[l])?;
        if l < last {
            a = g.relu(a);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                a = dropout(g, a, p.cfg.dropout, rng)?;
            }
        }
    }
    let r = g.param(store, p.residual);
    let res = g.matmul(x, r)?;
    g.add(a, res)
}

/// Inverted dropout with a mask drawn from `rng`.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut RunRng) -> Result<Var> {
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.shape(x).to_vec();
    let mask = (0..g.value(x).numel())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}
