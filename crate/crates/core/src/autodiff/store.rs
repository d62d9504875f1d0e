//! Named parameter storage shared across training steps.

use super::tensor::Tensor;
use crate::num::Real;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

/// Handle to a variable inside a [`VarStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(0);

/// Ordered collection of named trainable tensors.
///
/// Iteration order is insertion order, which fixes the order of gradient
/// clipping, optimiser updates, and checkpoint serialisation.
///
/// Each store carries a process-unique identity so that a single recording
/// graph can reference parameters from several stores (say, separate world
/// model / actor / critic stores) without their [`VarId`] indices colliding.
pub struct VarStore<F> {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> VarStore<F> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Process-unique identity of this store.
    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a new variable. Duplicate names are a caller bug.
    pub fn add(&mut self, name: &str, value: Tensor<F>) -> VarId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate variable name {name:?}"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.by_name.insert(name.to_string(), id);
        VarId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: VarId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<VarId> {
        self.by_name.get(name).copied().map(VarId)
    }

    pub fn get(&self, id: VarId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: VarId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (VarId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (VarId(i), n.as_str(), &self.values[i]))
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }
}

impl<F: Real> Default for VarStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_stable() {
        let mut s = VarStore::<f32>::new();
        let a = s.add("w1", Tensor::zeros(vec![2, 2]));
        let b = s.add("b1", Tensor::zeros(vec![2]));
        assert_eq!(s.name(a), "w1");
        assert_eq!(s.name(b), "b1");
        let names: Vec<&str> = s.iter().map(|(_, n, _)| n).collect();
        assert_eq!(names, ["w1", "b1"]);
        assert_eq!(s.param_count(), 6);
    }

    #[test]
    #[should_panic(expected = "duplicate variable name")]
    fn duplicate_names_rejected() {
        let mut s = VarStore::<f32>::new();
        s.add("w", Tensor::zeros(vec![1]));
        s.add("w", Tensor::zeros(vec![1]));
    }
}
