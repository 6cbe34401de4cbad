//! Name-keyed registries for interchangeable strategies.
//!
//! Every pluggable piece of the pipeline (neighbour search backend, spectral
//! reducer, hidden activation, optimizer, pair weighting) implements a trait
//! with a `name()` and is looked up here by the string that appears in config
//! files and on the command line.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{GwclError, Result};

/// Anything that can be stored in a [`Registry`].
pub trait Named {
    fn name(&self) -> &'static str;
}

pub struct Registry<T: ?Sized + Named> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Arc<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, item: Arc<T>) {
        self.entries.insert(item.name(), item);
    }

    pub fn with(mut self, item: Arc<T>) -> Self {
        self.register(item);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| GwclError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}
