//! Central-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{HectoError, Result};

/// Gradients smaller than this are compared in absolute terms. Central
/// differences at ε = 1e-5 carry roundoff near 1e-11 on O(1) losses, so a
/// smaller floor turns that noise into relative error.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the gradient produced by `backward` against
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every scalar of every registered parameter.
///
/// `loss_fn` must be deterministic: any randomness (routing samples, dropout
/// masks) has to be replayed identically on each call.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    epsilon: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    let (mut graph, loss) = loss_fn(store)?;
    graph.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|(_, p)| vec![0.0; p.tensor.numel()])
        .collect();
    for (id, g) in graph.param_grads() {
        analytic[id.index()].copy_from_slice(g);
    }
    drop(graph);

    let mut eval = |store: &ParamStore, path: &dyn Fn() -> String| -> Result<f64> {
        let (g, l) = loss_fn(store)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(HectoError::Numeric(format!("non-finite loss while perturbing {}", path())));
        }
        Ok(v)
    };

    let ids: Vec<_> = store.ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for id in ids {
        let name = store.name(id).to_string();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for j in 0..store.value(id).numel() {
            let path = || format!("{name}[{j}]");
            let a = analytic[id.index()][j];
            if !a.is_finite() {
                return Err(HectoError::Numeric(format!("non-finite gradient at {}", path())));
            }
            let original = store.value(id).data()[j];
            store.get_mut(id).tensor.data_mut()[j] = original + epsilon;
            let plus = eval(store, &path);
            store.get_mut(id).tensor.data_mut()[j] = original - epsilon;
            let minus = eval(store, &path);
            store.get_mut(id).tensor.data_mut()[j] = original;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        tensors.push(TensorCheck {
            name,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel < tol,
        });
    }
    Ok(GradCheckReport {
        epsilon,
        tolerance: tol,
        tensors,
    })
}
