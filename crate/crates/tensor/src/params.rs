use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::{Array, Element};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Named parameter tensors, iterated in lexicographic name order.
///
/// Each store carries a process-unique id so a [`crate::Tape`] can tell
/// several stores (generator, discriminator, ...) apart. Cloning yields a
/// new id.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: u64,
    tensors: BTreeMap<String, Arc<Array<T>>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self { id: fresh_id(), tensors: self.tensors.clone() }
    }
}

impl<T: Element> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { id: fresh_id(), tensors: BTreeMap::new() }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.tensors.get(name).map(Arc::as_ref)
    }

    pub(crate) fn get_shared(&self, name: &str) -> Option<Arc<Array<T>>> {
        self.tensors.get(name).cloned()
    }

    /// Mutable access; copies the tensor if a tape still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array<T>> {
        self.tensors.remove(name).map(|a| Arc::try_unwrap(a).unwrap_or_else(|a| (*a).clone()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Copies every tensor into another element type.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            id: fresh_id(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast()))).collect(),
        }
    }

    /// Moves all tensors of `other` in under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParamStore<T>) {
        for (k, v) in other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
    }
}
