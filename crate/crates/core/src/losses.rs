//! Composite training objective: task loss, gate entropy, and load balance.
//!
//! ```text
//! L = L_task + λ_ent · ( −1/B Σ_i Σ_k g_ik ln g_ik )
//!            + λ_div · Σ_k ( ḡ_k / Σ_ℓ ḡ_ℓ )²,      ḡ_k = Σ_i g_ik
//! ```

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Var};
use crate::error::{HectoError, Result};

/// Probabilities are clamped to this value inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Row sums must be within this distance of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ent: f64,
    pub lambda_div: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ent: 0.05,
            lambda_div: 0.08,
        }
    }
}

impl LossWeights {
    pub const NONE: LossWeights = LossWeights {
        lambda_ent: 0.0,
        lambda_div: 0.0,
    };
}

fn check_rows(graph: &Graph, gates: Var) -> Result<()> {
    let t = graph.value(gates);
    for i in 0..t.rows() {
        let s: f64 = t.row_slice(i).iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE || t.row_slice(i).iter().any(|v| !v.is_finite()) {
            return Err(HectoError::Contract(format!(
                "gate row {i} sums to {s}, expected a probability vector"
            )));
        }
    }
    Ok(())
}

/// Mean per-row entropy of `gates` (B×K), in nats.
pub fn entropy_penalty(graph: &mut Graph, gates: Var) -> Result<Var> {
    check_rows(graph, gates)?;
    let b = graph.value(gates).rows() as f64;
    let ln = graph.ln_clamped(gates, LOG_FLOOR);
    let plogp = graph.mul(gates, ln)?;
    let total = graph.sum(plogp);
    Ok(graph.affine(total, -1.0 / b, 0.0))
}

/// Squared L2 norm of the normalized per-expert gate mass.
pub fn diversity_penalty(graph: &mut Graph, gates: Var) -> Result<Var> {
    check_rows(graph, gates)?;
    let mass = graph.sum_rows(gates);
    let total = graph.sum(mass);
    let inv = graph.recip(total);
    let share = graph.scale_by(mass, inv)?;
    let sq = graph.mul(share, share)?;
    Ok(graph.sum(sq))
}

/// `task + λ_ent · entropy + λ_div · diversity`.
///
/// With both weights zero the task loss node is returned unchanged.
pub fn total_loss(graph: &mut Graph, task: Var, gates: Var, weights: LossWeights) -> Result<Var> {
    if weights.lambda_ent == 0.0 && weights.lambda_div == 0.0 {
        return Ok(task);
    }
    let ent = entropy_penalty(graph, gates)?;
    let div = diversity_penalty(graph, gates)?;
    let ent = graph.affine(ent, weights.lambda_ent, 0.0);
    let div = graph.affine(div, weights.lambda_div, 0.0);
    let reg = graph.add(ent, div)?;
    graph.add(task, reg)
}
