use std::collections::HashMap;
use std::sync::Arc;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Index of a canonical parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
struct Entry<T> {
    name: String,
    value: Arc<Tensor<T>>,
    grad: Option<Tensor<T>>,
}

/// Named, ordered learnable tensors. Weight tying is expressed with aliases:
/// an alias name resolves to exactly one canonical tensor and is never
/// counted or updated separately.
#[derive(Clone, Default)]
pub struct ParamStore<T: Element = f32> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
    aliases: Vec<(String, String)>,
    alias_index: HashMap<String, usize>,
    ties: HashMap<String, Vec<ParamId>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
            aliases: Vec::new(),
            alias_index: HashMap::new(),
            ties: HashMap::new(),
        }
    }

    fn name_taken(&self, name: &str) -> bool {
        self.index.contains_key(name) || self.alias_index.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.name_taken(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
            grad: None,
        });
        Ok(ParamId(id))
    }

    /// Make `name` refer to the canonical tensor `canonical`.
    pub fn alias(&mut self, name: impl Into<String>, canonical: &str) -> Result<ParamId> {
        let name = name.into();
        if self.name_taken(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let &id = self
            .index
            .get(canonical)
            .ok_or_else(|| Error::UnknownParam(canonical.to_string()))?;
        self.alias_index.insert(name.clone(), id);
        self.aliases.push((name, canonical.to_string()));
        Ok(ParamId(id))
    }

    pub(crate) fn tie_group(&self, key: &str) -> Option<&[ParamId]> {
        self.ties.get(key).map(Vec::as_slice)
    }

    pub(crate) fn set_tie_group(&mut self, key: &str, ids: Vec<ParamId>) {
        self.ties.insert(key.to_string(), ids);
    }

    /// Resolve a canonical or alias name.
    pub fn resolve(&self, name: &str) -> Option<ParamId> {
        self.index
            .get(name)
            .or_else(|| self.alias_index.get(name))
            .map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.resolve(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Canonical (name, tensor) pairs in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &*e.value))
    }

    /// (alias, canonical) pairs in registration order.
    pub fn aliases(&self) -> &[(String, String)] {
        &self.aliases
    }

    /// Number of canonical tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over canonical tensors; aliases count nothing.
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Put every canonical tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Binding<T> {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|e| tape.shared_leaf(Arc::clone(&e.value), trainable))
                .collect(),
        }
    }

    /// Move the leaf gradients of `binding` into the store. Parameters the
    /// loss never reached keep `None`.
    pub fn absorb_grads(&mut self, binding: &Binding<T>, grads: &mut Gradients<T>) {
        for (entry, var) in self.entries.iter_mut().zip(&binding.vars) {
            entry.grad = grads.take(var);
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Option<Tensor<T>>) {
        self.entries[id.0].grad = grad;
    }

    pub fn clear_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.grad = None);
    }

    /// Copy values from `other`, which must have identical canonical names,
    /// shapes, and aliases.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::WeightMismatch(format!(
                "model has {} tensors, weights have {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter().zip(&other.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::WeightMismatch(format!(
                    "expected `{}` {}, found `{}` {}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
        }
        if self.aliases != other.aliases {
            return Err(Error::WeightMismatch("alias table differs".into()));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            mine.value = Arc::clone(&theirs.value);
            mine.grad = None;
        }
        Ok(())
    }

    pub fn shape_of(&self, id: ParamId) -> Shape {
        self.entries[id.0].value.shape()
    }
}

/// Tape leaves for every canonical parameter of one store.
pub struct Binding<T: Element = f32> {
    vars: Vec<Var<T>>,
}

impl<T: Element> Binding<T> {
    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }
}
