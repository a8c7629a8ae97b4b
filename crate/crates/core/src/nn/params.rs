use std::cell::RefCell;
use std::collections::HashMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by gradient descent.
    Trainable,
    /// State updated during the forward pass (batch-norm running stats).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Element> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Every tensor of a model, keyed by a canonical dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Spec(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, kind, value, grad: None });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    /// Replaces a value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::State(format!(
                "{}: shape {:?} does not match {:?}",
                entry.name,
                value.shape(),
                entry.value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        match &mut entry.grad {
            Some(acc) => acc.add_assign(g),
            slot @ None => {
                if g.shape() != entry.value.shape() {
                    return Err(Error::State(format!("gradient shape mismatch for {}", entry.name)));
                }
                *slot = Some(g.clone());
                Ok(())
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), kind: e.kind, value: e.value.cast(), grad: None })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Global L2 norm of the trainable values and the name/norm of the
    /// largest single tensor.
    pub fn norm_report(&self) -> (f64, String, f64) {
        let mut total = 0.0;
        let mut worst = (String::new(), 0.0f64);
        for e in self.entries.iter().filter(|e| e.kind == ParamKind::Trainable) {
            let sq = e.value.norm_sq();
            total += sq;
            if !(sq.sqrt() <= worst.1) {
                worst = (e.name.clone(), sq.sqrt());
            }
        }
        (total.sqrt(), worst.0, worst.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormSettings {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormSettings {
    fn default() -> Self {
        Self { eps: 1e-5, momentum: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State of one forward pass: binds parameters to tape leaves and collects
/// buffer updates until the pass is committed.
pub struct Forward<'t, 's, T: Element> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    track_params: bool,
    bn: BatchNormSettings,
    leaves: RefCell<HashMap<ParamId, Var<'t, T>>>,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'t, 's, T: Element> Forward<'t, 's, T> {
    /// Parameters become gradient-tracking leaves in train mode and
    /// constants in eval mode.
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            track_params: mode == Mode::Train,
            bn: BatchNormSettings::default(),
            leaves: RefCell::new(HashMap::new()),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn with_param_tracking(mut self, track: bool) -> Self {
        self.track_params = track;
        self
    }

    pub fn with_batch_norm(mut self, bn: BatchNormSettings) -> Self {
        self.bn = bn;
        self
    }

    /// Substitutes `var` for parameter `id` in this pass.
    pub fn bind(&self, id: ParamId, var: Var<'t, T>) {
        self.leaves.borrow_mut().insert(id, var);
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn batch_norm_settings(&self) -> BatchNormSettings {
        self.bn
    }

    /// The tape variable for a parameter; one leaf per parameter per pass,
    /// so a parameter used twice accumulates both gradient contributions.
    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        if let Some(v) = self.leaves.borrow().get(&id) {
            return *v;
        }
        let value = self.store.value(id).clone();
        let var = if self.track_params { self.tape.leaf(value) } else { self.tape.constant(value) };
        self.leaves.borrow_mut().insert(id, var);
        var
    }

    /// Current value of a buffer, including updates staged in this pass.
    pub fn buffer(&self, id: ParamId) -> Tensor<T> {
        self.updates
            .borrow()
            .iter()
            .rev()
            .find(|(u, _)| *u == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| self.store.value(id).clone())
    }

    pub fn stage_buffer(&self, id: ParamId, value: Tensor<T>) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Buffer updates to apply with [`ParamStore::set_value`].
    pub fn take_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }

    /// Gradients that reached parameter leaves after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut grads: Vec<_> = self.leaves.borrow().iter().filter_map(|(&id, v)| v.grad().map(|g| (id, g))).collect();
        grads.sort_by_key(|(id, _)| *id);
        grads
    }
}

impl<T: Element> ParamStore<T> {
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
        for (id, value) in updates {
            self.set_value(id, value)?;
        }
        Ok(())
    }
}
