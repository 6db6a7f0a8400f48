use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{HectoError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Flat registry of every trainable tensor, keyed by a unique dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

/// Serialized form of one parameter: name, shape and flat values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(HectoError::Contract(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(true),
            frozen: false,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds the parameter-leaf gradients of `graph` into the registry.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (id, g) in graph.param_grads() {
            for (a, b) in self.params[id.0].tensor.grad_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// FNV-1a over the bit patterns of the selected parameters' values.
    pub fn checksum_where(&self, mut keep: impl FnMut(&Param) -> bool) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        for p in self.params.iter().filter(|p| keep(p)) {
            for byte in p.name.bytes() {
                h = (h ^ u64::from(byte)).wrapping_mul(PRIME);
            }
            for v in p.tensor.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h = (h ^ u64::from(byte)).wrapping_mul(PRIME);
                }
            }
        }
        h
    }

    pub fn checksum(&self) -> u64 {
        self.checksum_where(|_| true)
    }

    pub fn to_named_arrays(&self) -> Vec<NamedArray> {
        self.params
            .iter()
            .map(|p| NamedArray {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites values from `arrays`; every registered parameter must be
    /// present with a matching shape.
    pub fn load_named_arrays(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let by_name: HashMap<&str, &NamedArray> =
            arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        for p in &mut self.params {
            let a = by_name
                .get(p.name.as_str())
                .ok_or_else(|| HectoError::Data(format!("checkpoint lacks parameter {}", p.name)))?;
            if a.shape != p.tensor.shape() || a.data.len() != p.tensor.numel() {
                return Err(HectoError::dim("load_named_arrays", p.tensor.shape(), &a.shape));
            }
            p.tensor.data_mut().copy_from_slice(&a.data);
        }
        if arrays.len() != self.params.len() {
            return Err(HectoError::Data(format!(
                "checkpoint has {} parameters, model has {}",
                arrays.len(),
                self.params.len()
            )));
        }
        Ok(())
    }
}
