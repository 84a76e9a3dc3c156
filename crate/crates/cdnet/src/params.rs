//! Flat parameter registry.
//!
//! All learnable tensors live in one [`ParamStore`], registered in a fixed
//! order with unique dotted names. The store is the single source of truth
//! for the optimizer, the checkpoint format, and the parameter-sharing
//! cardinality checks (a sequential cascade registers exactly one LD
//! parameter set no matter how many times it is applied).

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Real, Tape, Tensor};

/// Handle to one registered parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    tensor: Tensor,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    /// Register a tensor under a unique name. Registration order is the
    /// canonical parameter order used by the optimizer and checkpoints.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name `{name}`"
        );
        self.entries.push(ParamEntry { name, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar coordinate count across all parameters.
    pub fn coordinate_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }
}

/// Mapping from parameters to their leaf nodes on one tape.
///
/// Binding copies every parameter tensor onto the tape; after `backward`,
/// [`ParamBinding::extract_grads`] collects the per-parameter gradients back
/// out in store order.
pub struct ParamBinding {
    nodes: Vec<NodeId>,
}

impl ParamBinding {
    pub fn bind_all(store: &ParamStore, tape: &mut Tape) -> Self {
        let nodes = store.entries.iter().map(|e| tape.leaf(e.tensor.clone())).collect();
        ParamBinding { nodes }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    pub fn extract_grads(&self, tape: &Tape) -> Result<ParamGrads> {
        let mut grads = Vec::with_capacity(self.nodes.len());
        for &n in &self.nodes {
            grads.push(tape.grad(n)?.to_vec());
        }
        Ok(ParamGrads { grads })
    }
}

/// Per-parameter gradients, parallel to the store's registration order.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Vec<Real>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads { grads: store.entries.iter().map(|e| vec![0.0; e.tensor.len()]).collect() }
    }

    pub fn get(&self, id: ParamId) -> &[Real] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [Real] {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Accumulate `other` into `self` (used by per-episode optimizer steps).
    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::Internal("accumulating mismatched gradient sets".into()));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: Real) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }

    /// Global L2 norm over the parameters not in `skip`.
    pub fn global_norm(&self, skip: &HashSet<ParamId>) -> Real {
        let mut acc = 0.0;
        for (i, g) in self.grads.iter().enumerate() {
            if skip.contains(&ParamId(i)) {
                continue;
            }
            for &x in g {
                acc += x * x;
            }
        }
        acc.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_round_trips_gradients() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let binding = ParamBinding::bind_all(&store, &mut tape);
        let zero = tape.leaf(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let loss = tape.squared_l2(binding.node(w), zero).unwrap();
        tape.backward(loss).unwrap();
        let grads = binding.extract_grads(&tape).unwrap();
        assert_eq!(grads.get(w), &[2.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.0).unwrap());
        store.register("w", Tensor::scalar(1.0).unwrap());
    }
}
