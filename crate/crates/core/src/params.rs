//! Named parameter storage and per-step binding onto a tape.

use std::cell::RefCell;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Network weights `w` versus architecture parameters `α`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Weight,
    Arch,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, group });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self, group: ParamGroup) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].group == group)
            .map(ParamId)
            .collect()
    }

    /// Number of scalars in a group.
    pub fn numel(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.numel())
            .sum()
    }
}

/// Gradients indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Rescale so the global L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let norm: f64 = self
            .grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            for g in self.grads.iter_mut().flatten() {
                *g = g.map(|v| v * s);
            }
        }
    }
}

/// Lazily places parameters on a tape. Parameters outside the trainable
/// group become constants and receive no gradient.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: Option<ParamGroup>,
    both: bool,
    selected: Option<Vec<bool>>,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Binder<'t, 's> {
    /// Track gradients for one group only.
    pub fn new(tape: &'t Tape, store: &'s ParamStore, trainable: Option<ParamGroup>) -> Self {
        Binder {
            tape,
            store,
            trainable,
            both: false,
            selected: None,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Track gradients for every parameter.
    pub fn all(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Binder {
            both: true,
            ..Self::new(tape, store, None)
        }
    }

    /// Track gradients for exactly `ids`.
    pub fn selected(tape: &'t Tape, store: &'s ParamStore, ids: &[ParamId]) -> Self {
        let mut mask = vec![false; store.len()];
        for id in ids {
            mask[id.0] = true;
        }
        Binder {
            selected: Some(mask),
            ..Self::new(tape, store, None)
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let track = match &self.selected {
            Some(mask) => mask[id.0],
            None => self.both || self.trainable == Some(e.group),
        };
        let v = self.tape.leaf(e.value.clone(), track);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let bound = self.bound.borrow();
        ParamGrads {
            grads: bound
                .iter()
                .map(|v| v.and_then(|v| grads.get(v).cloned()))
                .collect(),
        }
    }
}

/// Uniform(-s, s) with `s = 1/sqrt(fan_in)`.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let s = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-s..s))
}
