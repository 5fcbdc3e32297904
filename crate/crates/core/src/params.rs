//! Flat, ordered, named parameter registry.
//!
//! Model components hold indices into a [`ParamStore`]; the store can be
//! mapped to another element type (tape handles, gradients, optimizer
//! moments) without losing names or order.

use std::collections::HashMap;

use crate::error::{CtfError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    items: Vec<T>,
    lookup: HashMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            items: Vec::new(),
            lookup: HashMap::new(),
        }
    }
}

impl<T> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append an entry and return its index. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, item: T) -> Result<usize> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(CtfError::Contract(format!("duplicate parameter `{name}`")));
        }
        let idx = self.items.len();
        self.lookup.insert(name.clone(), idx);
        self.names.push(name);
        self.items.push(item);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, idx: usize) -> &T {
        &self.items[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut T {
        &mut self.items[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&T> {
        self.index_of(name).map(|i| &self.items[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut T> {
        self.index_of(name).map(|i| &mut self.items[i])
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn items_mut(&mut self) -> &mut [T] {
        &mut self.items
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &T)> {
        self.names.iter().map(String::as_str).zip(&self.items)
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            items: self.iter().map(|(n, t)| f(n, t)).collect(),
            lookup: self.lookup.clone(),
        }
    }
}

impl ParamStore<Tensor> {
    /// Total number of scalars across all entries.
    pub fn numel(&self) -> usize {
        self.items.iter().map(Tensor::numel).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_lookup_and_map() {
        let mut s = ParamStore::new();
        let a = s.push("a", Tensor::zeros(vec![2, 3])).unwrap();
        let b = s.push("b", Tensor::scalar(1.0)).unwrap();
        assert_eq!((a, b), (0, 1));
        assert!(s.push("a", Tensor::scalar(0.0)).is_err());
        assert_eq!(s.index_of("b"), Some(1));
        assert_eq!(s.numel(), 7);
        let shapes = s.map(|_, t| t.shape().to_vec());
        assert_eq!(shapes.by_name("a"), Some(&vec![2, 3]));
        assert_eq!(shapes.names(), s.names());
    }

    #[test]
    fn empty_store_counts_zero() {
        assert_eq!(ParamStore::<Tensor>::new().numel(), 0);
    }
}
