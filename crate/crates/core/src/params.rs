//! Named parameter storage and per-forward-pass tape sessions.
//!
//! A [`ParamBank`] owns every learnable tensor of a model in a fixed,
//! deterministic order. Each forward pass opens a [`Session`], which places
//! all parameters onto a fresh tape as named leaves; after `backward`, the
//! session maps node gradients back to bank order for the optimizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside its bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named parameter tensors.
#[derive(Default)]
pub struct ParamBank {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a fresh tensor drawn uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut R,
    ) -> ParamId {
        self.add(name, Tensor::uniform_init(shape, rng))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Iterates `(name, tensor)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn total_coords(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a tensor by name; shape must match. Used by checkpoint loading.
    pub fn set_by_name(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .id_by_name(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name:?}")))?;
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_by_name",
                lhs: self.tensors[id.0].shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    /// Deep copy of all tensors, e.g. for best-checkpoint tracking.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.tensors.clone()
    }

    /// Restores tensors from a snapshot taken on the same bank layout.
    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.tensors.len(), "snapshot layout mismatch");
        self.tensors.clone_from_slice(snapshot);
    }

    /// Opens a tape session with every parameter placed as a named leaf.
    pub fn session(&self) -> Session {
        let mut tape = Tape::new();
        let vars = self
            .iter()
            .map(|(name, t)| tape.leaf_named(t.clone(), name))
            .collect();
        Session { tape, vars }
    }
}

/// One forward pass: a tape plus the leaf handles of all bank parameters.
pub struct Session {
    pub tape: Tape,
    vars: Vec<Var>,
}

impl Session {
    /// Tape leaf for a bank parameter.
    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in bank order; parameters no path reached come back as zeros.
    pub fn bank_grads(&self, grads: &Grads, bank: &ParamBank) -> Vec<Tensor> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, &v)| grads.of_or_zeros(v, bank.tensors[i].shape()))
            .collect()
    }
}
