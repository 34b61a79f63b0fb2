//! Named parameter storage and the forward-pass context.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, ValueId};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat registry of named parameter tensors.
///
/// Registration order is fixed by model construction, which makes optimizer
/// state, checkpoint sections and gradient write-back line up by index.
#[derive(Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn register(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.requires_grad = true;
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter_mut())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copy of all parameter buffers, for best-checkpoint tracking.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.data.clone()).collect()
    }

    /// Restore buffers captured by [`ParamSet::snapshot`].
    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "snapshot has {} buffers for {} parameters",
                snapshot.len(),
                self.tensors.len()
            )));
        }
        for (t, s) in self.tensors.iter_mut().zip(snapshot) {
            if t.data.len() != s.len() {
                return Err(Error::contract("snapshot buffer length mismatch"));
            }
            t.data.copy_from_slice(s);
        }
        Ok(())
    }
}

/// One forward (and optionally backward) pass over a tape.
///
/// Parameters are bound lazily: the first use of a `ParamId` copies the
/// tensor onto the tape as a tracked leaf and later uses reuse that leaf, so
/// each parameter occurs exactly once per pass.
pub struct Forward {
    pub tape: Tape,
    bound: Vec<Option<ValueId>>,
    track: bool,
}

impl Forward {
    /// Pass that records gradients for all bound parameters.
    pub fn tracked() -> Self {
        Forward { tape: Tape::new(), bound: Vec::new(), track: true }
    }

    /// Inference pass; parameters are bound untracked and `backward` is
    /// pointless but harmless.
    pub fn inference() -> Self {
        Forward { tape: Tape::new(), bound: Vec::new(), track: false }
    }

    pub fn is_tracked(&self) -> bool {
        self.track
    }

    /// Bind a parameter, reusing the existing leaf on repeated use.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> ValueId {
        if self.bound.len() < params.len() {
            self.bound.resize(params.len(), None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = params.tensor(id);
        let v = self
            .tape
            .leaf_parts(t.data.clone(), t.shape.clone(), self.track)
            .expect("registered parameter has a consistent shape");
        self.bound[id.0] = Some(v);
        v
    }

    /// Untracked input leaf.
    pub fn input(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<ValueId> {
        self.tape.leaf_parts(data, shape, false)
    }

    pub fn input_tensor(&mut self, t: &Tensor) -> ValueId {
        self.tape
            .leaf_parts(t.data.clone(), t.shape.clone(), false)
            .expect("tensor invariants hold")
    }

    /// Backpropagate from a scalar loss and write gradients back into the
    /// parameter set (accumulating with any existing gradient).
    pub fn backward(&mut self, loss: ValueId, params: &mut ParamSet) -> Result<()> {
        if !self.track {
            return Err(Error::contract("backward on an inference pass"));
        }
        self.tape.backward(loss)?;
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = self.tape.grad(*v) {
                    params.tensor_mut(ParamId(i)).accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    /// Tape gradient of a bound parameter from the last `backward`.
    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.bound.get(id.0).copied().flatten().and_then(|v| self.tape.grad(v))
    }
}
