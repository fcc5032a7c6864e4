//! Named parameter storage and per-forward-pass sessions.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::autograd::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State updated during the forward pass (e.g. running statistics).
    Buffer,
}

#[derive(Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    kind: ParamKind,
    frozen: bool,
}

/// Ordered collection of named tensors making up one or more models.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.entries.push(Entry { name: name.to_string(), value, kind, frozen: false });
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn scope(&mut self, prefix: &str) -> Scope<'_, T> {
        Scope { store: self, prefix: prefix.to_string() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(TensorError::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    /// Excludes every parameter whose name starts with `prefix` from gradient
    /// tracking (or re-enables it).
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let e = &self.entries[id.0];
        e.kind == ParamKind::Trainable && !e.frozen
    }

    /// Number of scalar entries in trainable (non-buffer) tensors.
    pub fn num_parameters(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Parameter count of entries whose name starts with `prefix`.
    pub fn num_parameters_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>, ParamKind)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value, e.kind))
    }

    /// Overwrites values by name. Every store entry must be present with the
    /// same shape.
    pub fn load_named(&mut self, tensors: &HashMap<String, Tensor<T>>) -> Result<()> {
        for e in &mut self.entries {
            let t = tensors
                .get(&e.name)
                .ok_or_else(|| TensorError::Other(format!("missing tensor {}", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(TensorError::Shape(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.cast(), kind: e.kind, frozen: e.frozen })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Prefix-qualified registration helper.
pub struct Scope<'a, T> {
    store: &'a mut ParamStore<T>,
    prefix: String,
}

impl<T: Scalar> Scope<'_, T> {
    pub fn sub(&mut self, name: &str) -> Scope<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Scope { store: self.store, prefix }
    }

    fn qualified(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let q = self.qualified(name);
        self.store.add(&q, value, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let q = self.qualified(name);
        self.store.add(&q, value, ParamKind::Buffer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds a [`ParamStore`] for one forward (and optional backward) pass.
pub struct Session<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    vars: RefCell<Vec<Option<Var<T>>>>,
    mode: Mode,
    track: bool,
    buffer_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        Self {
            store,
            vars: RefCell::new(vec![None; store.len()]),
            mode,
            track: track_grads,
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    /// Training mode with gradient tracking.
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self::new(store, Mode::Train, true)
    }

    /// Inference mode without gradients.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self::new(store, Mode::Eval, false)
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<T> {
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = &vars[id.0] {
            return v.clone();
        }
        let requires = self.track && self.store.is_trainable(id);
        let v = Var::leaf(self.store.get(id).clone(), requires);
        vars[id.0] = Some(v.clone());
        v
    }

    pub fn update_buffer(&self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    /// Gradients of every parameter touched in this session.
    pub fn grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.as_ref().and_then(|v| v.grad()).map(|g| (ParamId(i), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_qualify_names() {
        let mut store = ParamStore::<f32>::new();
        let id = store.scope("a").sub("b").param("w", Tensor::zeros([2]));
        assert_eq!(store.name(id), "a.b.w");
        assert_eq!(store.id("a.b.w"), Some(id));
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut store = ParamStore::<f64>::new();
        let a = store.scope("enc").param("w", Tensor::ones([1]));
        let b = store.scope("dec").param("w", Tensor::ones([1]));
        store.set_frozen("enc", true);
        let s = Session::train(&store);
        let y = s.param(a).mul(&s.param(b)).unwrap().sum();
        y.backward();
        let grads = s.grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, b);
    }
}
