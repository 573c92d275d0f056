//! Named parameter storage with scope tags.
//!
//! Parameters live outside the tape so that a fresh graph can be recorded
//! every step while the optimizer mutates values in place between steps.

use ndarray::ArrayD;

use super::Scalar;

/// Handle to one parameter array in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Which part of the network a parameter belongs to.
///
/// `Inference` parameters are the ones read by the plain forward pass;
/// `Ttg` parameters exist only for the training-time transition generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Inference,
    Ttg,
}

/// Scope selector for parameter counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountScope {
    Full,
    Inference,
    Ttg,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub scope: Scope,
    pub value: ArrayD<T>,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, scope: Scope, value: ArrayD<T>) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            scope,
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn scope(&self, id: ParamId) -> Scope {
        self.entries[id.0].scope
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars in the requested scope.
    pub fn param_count(&self, scope: CountScope) -> usize {
        self.entries
            .iter()
            .filter(|e| match scope {
                CountScope::Full => true,
                CountScope::Inference => e.scope == Scope::Inference,
                CountScope::Ttg => e.scope == Scope::Ttg,
            })
            .map(|e| e.value.len())
            .sum()
    }
}
