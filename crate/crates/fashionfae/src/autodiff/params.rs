use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor. Shared sites in the model hold clones of the
/// same `ParamRef`, so one update is visible everywhere.
#[derive(Debug)]
pub struct Param {
    name: String,
    value: RefCell<Tensor>,
}

pub type ParamRef = Rc<Param>;

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.value.borrow()
    }

    pub fn value_mut(&self) -> RefMut<'_, Tensor> {
        self.value.borrow_mut()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.borrow().shape()
    }
}

/// Ordered collection of the model's trainable parameters.
///
/// Iteration order is insertion order, which makes optimizer state and
/// checkpoints deterministic.
#[derive(Debug, Default)]
pub struct ParameterSet {
    items: Vec<ParamRef>,
    by_name: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamRef> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let p = Rc::new(Param {
            name: name.clone(),
            value: RefCell::new(value),
        });
        self.by_name.insert(name, self.items.len());
        self.items.push(p.clone());
        Ok(p)
    }

    /// Registers an existing parameter (shared ownership) in this set.
    pub fn adopt(&mut self, p: ParamRef) -> Result<()> {
        if self.by_name.contains_key(p.name()) {
            return Err(Error::invalid(format!(
                "duplicate parameter name `{}`",
                p.name()
            )));
        }
        self.by_name.insert(p.name().to_string(), self.items.len());
        self.items.push(p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamRef> {
        self.by_name.get(name).map(|&i| &self.items[i])
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamRef> {
        self.items.iter()
    }

    /// Total scalar coordinate count across all parameters.
    pub fn total_coords(&self) -> usize {
        self.items.iter().map(|p| p.value().numel()).sum()
    }

    /// Overwrite values from another set by name. Missing or mis-shaped
    /// entries are errors.
    pub fn load_values(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for p in &self.items {
            let t = values.get(p.name()).ok_or_else(|| {
                Error::invalid(format!("checkpoint missing parameter `{}`", p.name()))
            })?;
            if t.shape() != p.shape() {
                return Err(Error::invalid(format!(
                    "checkpoint shape {:?} does not match parameter `{}` shape {:?}",
                    t.shape(),
                    p.name(),
                    p.shape()
                )));
            }
            *p.value_mut() = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_lookup() {
        let mut ps = ParameterSet::new();
        ps.create("b", Tensor::zeros(1, 2)).unwrap();
        ps.create("a", Tensor::zeros(2, 2)).unwrap();
        let names: Vec<_> = ps.iter().map(|p| p.name().to_string()).collect();
        assert_eq!(names, vec!["b", "a"]);
        assert_eq!(ps.get("a").unwrap().shape(), (2, 2));
        assert_eq!(ps.total_coords(), 6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParameterSet::new();
        ps.create("w", Tensor::zeros(1, 1)).unwrap();
        assert!(ps.create("w", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn shared_ref_updates_are_visible() {
        let mut ps = ParameterSet::new();
        let p = ps.create("w", Tensor::scalar(1.0)).unwrap();
        let alias = p.clone();
        p.value_mut().data_mut()[0] = 5.0;
        assert_eq!(alias.value().data()[0], 5.0);
        assert!(Rc::ptr_eq(&p, &alias));
    }
}
