//! Named parameter storage and the per-step forward session that binds
//! parameters onto a gradient tape.

use ndtensor::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// How the optimiser treats a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Learnable, with weight decay.
    Weight,
    /// Learnable, exempt from weight decay.
    NoDecay,
    /// State updated outside gradient descent (running stats, centers).
    Buffer,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>, kind: ParamKind) -> ParamId {
        tensor.set_requires_grad(kind.learnable());
        self.params.push(Param {
            name: name.into(),
            kind,
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Number of learnable scalars.
    pub fn num_learnable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.learnable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Number of learnable scalars whose name starts with `prefix`.
    pub fn num_learnable_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.learnable() && p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config("parameter inventories differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    dst.name,
                    dst.tensor.shape(),
                    src.name,
                    src.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum StoreRef<'a, T: Real> {
    Shared(&'a ParamStore<T>),
    Exclusive(&'a mut ParamStore<T>),
}

/// A fresh tape plus lazily created leaves for the parameters it touches.
pub struct Session<'a, T: Real> {
    pub tape: Tape<T>,
    store: StoreRef<'a, T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        let n = store.len();
        Session {
            tape: Tape::new(),
            store: StoreRef::Exclusive(store),
            bound: vec![None; n],
            mode,
        }
    }

    /// Eval-mode session over a shared store. Parameters can be read and
    /// differentiated, but nothing is written back.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Session {
            tape: Tape::new(),
            bound: vec![None; store.len()],
            store: StoreRef::Shared(store),
            mode: Mode::Eval,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        match &self.store {
            StoreRef::Shared(s) => s,
            StoreRef::Exclusive(s) => s,
        }
    }

    pub fn store_mut(&mut self) -> Result<&mut ParamStore<T>> {
        match &mut self.store {
            StoreRef::Shared(_) => Err(Error::Config("parameter store is frozen".into())),
            StoreRef::Exclusive(s) => Ok(s),
        }
    }

    /// Tape variable for a stored parameter, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = match &self.store {
            StoreRef::Shared(s) => self.tape.leaf(s.get(id)),
            StoreRef::Exclusive(s) => self.tape.leaf(s.get(id)),
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    /// Runs the backward sweep and adds the resulting gradients into the
    /// stored parameters.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)?;
        let StoreRef::Exclusive(store) = &mut self.store else {
            return Err(Error::Config("cannot accumulate gradients into a frozen store".into()));
        };
        for (i, v) in self.bound.iter().enumerate() {
            let Some(v) = v else { continue };
            if let Some(g) = self.tape.grad(*v) {
                store.params[i].tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
