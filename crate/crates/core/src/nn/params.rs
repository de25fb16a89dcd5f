use std::collections::HashMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Optimizer group a parameter belongs to; groups are frozen or trained
/// as a unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupId(pub u8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// State that is saved with the model but never differentiated
    /// (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub kind: ParamKind,
    pub group: GroupId,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>, kind: ParamKind, group: GroupId) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        let grad = vec![T::zero(); value.len()];
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            kind,
            group,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: vec![U::zero(); p.value.len()],
                    kind: p.kind,
                    group: p.group,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics of active groups are updated.
    Train,
    /// Running statistics; deterministic in the input.
    Infer,
}

/// One forward pass: the tape being recorded, the parameters it reads, and
/// which groups receive gradients.
pub struct Ctx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a mut ParamStore<T>,
    pub mode: Mode,
    /// Whether train-mode batch norm folds batch statistics into the running
    /// statistics. Cleared for passes over generated data.
    pub track_stats: bool,
    active: Vec<GroupId>,
    bound: HashMap<usize, Var>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a mut ParamStore<T>, mode: Mode, active: &[GroupId]) -> Self {
        Ctx {
            tape,
            params,
            mode,
            track_stats: true,
            active: active.to_vec(),
            bound: HashMap::new(),
        }
    }

    pub fn is_active(&self, group: GroupId) -> bool {
        self.active.contains(&group)
    }

    /// The tape variable holding a parameter, bound on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id.0) {
            return v;
        }
        let p = &self.params.params[id.0];
        let requires_grad = p.kind == ParamKind::Trainable && self.active.contains(&p.group);
        let v = self.tape.leaf(p.value.clone(), requires_grad);
        self.bound.insert(id.0, v);
        v
    }

    /// Runs the backward pass and adds every bound parameter's gradient into
    /// its store entry.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)?;
        let mut bound: Vec<(usize, Var)> = self.bound.iter().map(|(&k, &v)| (k, v)).collect();
        bound.sort_unstable_by_key(|&(k, _)| k);
        for (idx, var) in bound {
            if let Some(g) = self.tape.grad(var) {
                let p = &mut self.params.params[idx];
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            }
        }
        Ok(())
    }
}
