//! Named parameter storage and the per-forward binding session.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tape::{NormMode, RunningStats, Tape, Var};
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// Trained by the optimiser.
    Parameter,
    /// Persistent state that is not trained (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<F> {
    pub name: String,
    pub kind: EntryKind,
    pub value: Tensor<F>,
}

/// Ordered, uniquely named set of tensors owned by a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, kind: EntryKind, value: Tensor<F>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            kind,
            value,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        self.insert(name, EntryKind::Parameter, value)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        self.insert(name, EntryKind::Buffer, value)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Entry<F> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn entries(&self) -> &[Entry<F>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn parameter_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind == EntryKind::Parameter)
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.parameter_ids().map(|id| self.get(id).numel()).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Writes batch-norm statistics collected by a training [`Session`].
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<F>>) {
        for u in updates {
            self.entries[u.mean.0].value.data_mut().copy_from_slice(&u.stats.mean);
            self.entries[u.var.0].value.data_mut().copy_from_slice(&u.stats.var);
        }
    }
}

#[derive(Clone, Debug)]
pub struct StatUpdate<F> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: RunningStats<F>,
}

/// One forward (and optionally backward) evaluation against a read-only store.
///
/// Parameters are bound onto the tape lazily. Batch-norm statistic updates are
/// collected instead of written, so the store can be shared between sessions.
pub struct Session<'s, F: Float> {
    pub tape: Tape<F>,
    store: &'s ParamStore<F>,
    bound: Vec<Option<Var>>,
    mode: NormMode,
    track_grads: bool,
    stat_updates: Vec<StatUpdate<F>>,
}

impl<'s, F: Float> Session<'s, F> {
    pub fn new(store: &'s ParamStore<F>, mode: NormMode, track_grads: bool) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; store.entries.len()],
            mode,
            track_grads,
            stat_updates: Vec::new(),
        }
    }

    /// Training session: batch statistics and gradient tracking.
    pub fn train(store: &'s ParamStore<F>) -> Self {
        Self::new(store, NormMode::Train, true)
    }

    /// Inference session: running statistics, no gradient tracking.
    pub fn eval(store: &'s ParamStore<F>) -> Self {
        Self::new(store, NormMode::Eval, false)
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = &self.store.entries[id.0];
        let requires = self.track_grads && entry.kind == EntryKind::Parameter;
        let v = self.tape.leaf(entry.value.clone(), requires);
        self.bound[id.0] = Some(v);
        v
    }

    /// Latest statistics for a batch-norm layer, including updates made earlier in this session.
    pub fn running_stats(&self, mean: ParamId, var: ParamId) -> RunningStats<F> {
        if let Some(u) = self.stat_updates.iter().rev().find(|u| u.mean == mean) {
            return u.stats.clone();
        }
        RunningStats {
            mean: self.store.get(mean).data().to_vec(),
            var: self.store.get(var).data().to_vec(),
        }
    }

    pub fn record_stats(&mut self, mean: ParamId, var: ParamId, stats: RunningStats<F>) {
        self.stat_updates.push(StatUpdate { mean, var, stats });
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<F>> {
        // Only the last update per layer matters.
        let mut latest: Vec<StatUpdate<F>> = Vec::new();
        for u in self.stat_updates.drain(..) {
            if let Some(slot) = latest.iter_mut().find(|l| l.mean == u.mean) {
                *slot = u;
            } else {
                latest.push(u);
            }
        }
        latest
    }

    /// Gradients of every bound parameter after [`Tape::backward`].
    pub fn param_grads(&self) -> Vec<(ParamId, &[F])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}
