use std::collections::HashMap;

use crate::error::{Result, SgcnError};
use crate::numcore::{Real, Tape, Tensor, Var};

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(SgcnError::invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| SgcnError::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(SgcnError::invalid(format!("missing parameter {name}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total element count.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor on `tape`; with `trainable` they receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.variable(t.shape(), t.data().to_vec()).expect("stored shapes are valid")
                } else {
                    tape.constant(t.shape(), t.data().to_vec()).expect("stored shapes are valid")
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Pairs already-recorded handles, in store order, with the names.
    pub fn bound_from(&self, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.entries.len() {
            return Err(SgcnError::invalid(format!(
                "{} handles for {} parameters",
                vars.len(),
                self.entries.len()
            )));
        }
        Ok(Bound {
            vars,
            index: self.index.clone(),
        })
    }

    /// Adds the tape gradients of `bound` into the stored tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for ((_, t), &v) in self.entries.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors_mut().for_each(Tensor::zero_grad);
    }
}

/// Tape handles of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| SgcnError::invalid(format!("missing parameter {name}")))
    }
}
