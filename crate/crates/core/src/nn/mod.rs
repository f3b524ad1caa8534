//! Trainable building blocks on top of the tape.
//!
//! Parameters live in a [`ParamStore`]; layers only hold [`ParamId`]s. A
//! forward pass creates a [`Graph`] over a fresh [`Tape`], which binds each
//! parameter to a tape variable the first time a layer asks for it. Frozen
//! parameters are bound as constants and never receive gradients.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod layers;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::gradient_check;
pub use layers::{GruCell, Linear, Mlp, LEAKY_SLOPE};

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub value: Tensor,
}

/// Registry of named parameters, each tagged with a group label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            group: group.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.params.iter().map(|p| p.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    /// Copies values from `other`, matching parameters by name.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .find(&p.name)
                .ok_or_else(|| Error::Config(format!("parameter {} missing from source", p.name)))?;
            let src = other.value(id);
            if src.shape() != p.value.shape() {
                return Err(Error::shape(
                    "assign_from",
                    format!("{}: {:?} vs {:?}", p.name, p.value.shape(), src.shape()),
                ));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradients indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads {
            grads: store.params.iter().map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn set(&mut self, id: ParamId, g: Vec<f64>) {
        self.grads[id.0] = Some(g);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Euclidean norm of the gradients of one parameter group.
    pub fn group_norm(&self, store: &ParamStore, group: &str) -> f64 {
        store
            .iter()
            .filter(|(_, p)| p.group == group)
            .filter_map(|(id, _)| self.get(id))
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

type TrainableFn<'a> = Box<dyn Fn(&Param) -> bool + 'a>;

/// One forward pass over a parameter store.
pub struct Graph<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    trainable: TrainableFn<'a>,
}

impl<'a> Graph<'a> {
    /// Every parameter is trainable.
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self::with_filter(tape, store, |_| true)
    }

    /// No parameter receives gradients.
    pub fn frozen(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self::with_filter(tape, store, |_| false)
    }

    /// Only parameters accepted by `trainable` receive gradients.
    pub fn with_filter(
        tape: &'a Tape,
        store: &'a ParamStore,
        trainable: impl Fn(&Param) -> bool + 'a,
    ) -> Self {
        Graph {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable: Box::new(trainable),
        }
    }

    /// Uses caller-provided variables for the parameters, in store order.
    pub(crate) fn prebound(tape: &'a Tape, store: &'a ParamStore, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), store.len());
        Graph {
            tape,
            store,
            bound: RefCell::new(vars.iter().map(|&v| Some(v)).collect()),
            trainable: Box::new(|_| true),
        }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return Ok(v);
        }
        let p = self.store.get(id);
        let v = if (self.trainable)(p) {
            self.tape.leaf(p.value.clone())?
        } else {
            self.tape.constant(p.value.clone())?
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        Ok(v)
    }

    /// Backpropagates `loss` and gathers parameter gradients. Parameters
    /// that were frozen or unused have no entry.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let grads: Gradients = self.tape.backward(loss)?;
        let mut out = ParamGrads::zeros_like(self.store);
        for (i, v) in self.bound.borrow().iter().enumerate() {
            if let Some(g) = v.and_then(|v| grads.get(v)) {
                out.grads[i] = Some(g.to_vec());
            }
        }
        Ok(out)
    }
}
