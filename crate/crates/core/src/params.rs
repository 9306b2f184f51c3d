//! Named parameter storage and the small layer handles built on it.

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained, weight decay applies.
    Weight,
    /// Trained, excluded from weight decay (class token, positional tables).
    NoDecay,
    /// Running statistics; updated by forward passes, never by the optimizer.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.value.len())
            .sum()
    }

    /// Replace the value of `name`, requiring an identical shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::format(format!("unknown parameter `{name}`")))?;
        let cur = &mut self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamSet::set",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *cur = value;
        Ok(())
    }
}

/// `y = x W + b` with `W[in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Affine {
    /// Registers `{prefix}.weight` and `{prefix}.bias` as zeros; see
    /// [`crate::model::init_params`] for initialization.
    pub fn register(set: &mut ParamSet, prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = set.add(
            format!("{prefix}.weight"),
            Tensor::zeros(&[fan_in, fan_out]),
            ParamKind::Weight,
        );
        let bias = set.add(
            format!("{prefix}.bias"),
            Tensor::zeros(&[fan_out]),
            ParamKind::Weight,
        );
        Affine {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Layer-norm affine parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

impl Norm {
    pub fn register(set: &mut ParamSet, prefix: &str, width: usize) -> Self {
        let gamma = set.add(
            format!("{prefix}.gamma"),
            Tensor::full(&[width], 1.0),
            ParamKind::Weight,
        );
        let beta = set.add(
            format!("{prefix}.beta"),
            Tensor::zeros(&[width]),
            ParamKind::Weight,
        );
        Norm { gamma, beta, width }
    }
}

/// Batch-norm affine parameters plus running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNormParams {
    pub affine: Norm,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Weight of the new batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNormParams {
    pub fn register(set: &mut ParamSet, prefix: &str, width: usize) -> Self {
        let affine = Norm::register(set, prefix, width);
        let running_mean = set.add(
            format!("{prefix}.running_mean"),
            Tensor::zeros(&[width]),
            ParamKind::Buffer,
        );
        let running_var = set.add(
            format!("{prefix}.running_var"),
            Tensor::full(&[width], 1.0),
            ParamKind::Buffer,
        );
        BatchNormParams {
            affine,
            running_mean,
            running_var,
        }
    }
}
