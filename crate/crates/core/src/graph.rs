//! A tape bound to a [`ParamSet`]: the forward-pass context used by every
//! layer.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::params::{Affine, BatchNormParams, Norm, ParamId, ParamKind, ParamSet, BN_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "eval" => Ok(Mode::Eval),
            _ => Err(Error::config(format!("unknown mode `{s}`"))),
        }
    }
}

pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    vars: Vec<Option<Var>>,
    mode: Mode,
    bn_nodes: Vec<(BatchNormParams, Var)>,
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        ParamGrads {
            grads: params
                .entries()
                .iter()
                .map(|e| (e.kind != ParamKind::Buffer).then(|| Tensor::zeros(e.value.shape())))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.index()].as_ref()
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads[id.index()].as_mut()
    }

    /// Elementwise sum with another gradient set over the same parameters.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

impl<'p> Graph<'p> {
    /// Bind every trainable parameter as a tape leaf.
    pub fn new(params: &'p ParamSet, mode: Mode) -> Self {
        let mut tape = Tape::new();
        let vars = params
            .entries()
            .iter()
            .map(|e| (e.kind != ParamKind::Buffer).then(|| tape.param(e.value.clone())))
            .collect();
        Graph {
            tape,
            params,
            vars,
            mode,
            bn_nodes: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()].expect("buffers are not bound to the tape")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn affine(&mut self, a: &Affine, x: Var) -> Result<Var> {
        let (w, b) = (self.var(a.weight), self.var(a.bias));
        self.tape.linear(x, w, Some(b))
    }

    pub fn layer_norm(&mut self, n: &Norm, x: Var) -> Result<Var> {
        let (g, b) = (self.var(n.gamma), self.var(n.beta));
        self.tape.layer_norm(x, g, b)
    }

    /// Batch statistics in train mode, running statistics in eval mode.
    pub fn batch_norm(&mut self, bn: &BatchNormParams, x: Var) -> Result<Var> {
        let (g, b) = (self.var(bn.affine.gamma), self.var(bn.affine.beta));
        let out = match self.mode {
            Mode::Train => self.tape.batch_norm(x, g, b, None)?,
            Mode::Eval => {
                let m = self.params.get(bn.running_mean).data();
                let v = self.params.get(bn.running_var).data();
                self.tape.batch_norm(x, g, b, Some((m, v)))?
            }
        };
        if self.mode == Mode::Train {
            self.bn_nodes.push((*bn, out));
        }
        Ok(out)
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let mut g = self.tape.backward(loss)?;
        let grads = self
            .params
            .entries()
            .iter()
            .zip(&self.vars)
            .map(|(e, v)| v.map(|v| g.take(v).unwrap_or_else(|| Tensor::zeros(e.value.shape()))))
            .collect();
        Ok(ParamGrads { grads })
    }

    /// Fold the batch statistics of this pass into `params`' running buffers.
    pub fn update_running_stats(&self, params: &mut ParamSet) -> Result<()> {
        for (bn, node) in &self.bn_nodes {
            let stats = self
                .tape
                .batch_stats(*node)
                .ok_or_else(|| Error::Invariant("train-mode batch norm without stats".into()))?;
            for (id, batch) in [(bn.running_mean, &stats.mean), (bn.running_var, &stats.var)] {
                let run = params.get_mut(id);
                for (r, b) in run.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        Ok(())
    }
}
