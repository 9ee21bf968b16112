//! Named parameters and the small layers built from tape ops.

use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

pub type ParamId = usize;

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, checking shapes name by name.
    pub fn load(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Contract(alloc::format!(
                "expected {} parameters, got {}",
                self.len(),
                entries.len()
            )));
        }
        for (id, (name, t)) in entries.iter().enumerate() {
            if name != &self.names[id] || t.shape() != self.tensors[id].shape() {
                return Err(Error::Dimension {
                    op: "load parameters",
                    lhs: self.tensors[id].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        for (id, (_, t)) in entries.iter().enumerate() {
            self.tensors[id] = t.clone();
        }
        Ok(())
    }

    /// Registers every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }
}

/// Tape variables of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    /// Wraps tape variables listed in [`ParamStore`] order, e.g. the
    /// leaves handed out by a gradient check.
    pub fn from_vars(vars: &[Var]) -> Self {
        Bindings(vars.to_vec())
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl core::ops::Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id]
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`.
    FanIn,
    Zeros,
    Uniform(f64),
}

pub(crate) fn init_tensor<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::FanIn => {
            let bound = 1.0 / math::sqrt(fan_in.max(1) as f64);
            Tensor::uniform(shape, -bound, bound, rng)
        }
        Init::Uniform(bound) => Tensor::uniform(shape, -bound, bound, rng),
    }
}

/// Fully connected layer `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            alloc::format!("{name}.weight"),
            init_tensor(&[inputs, outputs], inputs, init, rng),
        );
        let bias = bias.then(|| {
            let t = match init {
                Init::Zeros => Tensor::zeros(&[outputs]),
                _ => init_tensor(&[outputs], inputs, init, rng),
            };
            store.add(alloc::format!("{name}.bias"), t)
        });
        Linear {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bindings, x: Var) -> Result<Var> {
        tape.linear(x, params[self.weight], self.bias.map(|b| params[b]))
    }
}

/// Stack of linear layers with an activation between them (and
/// optionally after the last one).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Option<Activation>,
    pub activate_last: bool,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`; the last layer uses `last_init`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Option<Activation>,
        activate_last: bool,
        last_init: Init,
        rng: &mut R,
    ) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last_init } else { Init::FanIn };
                Linear::new(
                    store,
                    &alloc::format!("{name}.{i}"),
                    widths[i],
                    widths[i + 1],
                    true,
                    init,
                    rng,
                )
            })
            .collect();
        Mlp {
            layers,
            activation,
            activate_last,
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bindings, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, params, h)?;
            if let Some(act) = self.activation {
                if i + 1 < n || self.activate_last {
                    h = tape.activation(h, act);
                }
            }
        }
        Ok(h)
    }
}

/// Learned per-channel scale and shift of a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        LayerNormParams {
            gamma: store.add(alloc::format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(alloc::format!("{name}.beta"), Tensor::zeros(&[channels])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bindings, x: Var) -> Result<Var> {
        tape.layer_norm(x, params[self.gamma], params[self.beta], self.eps)
    }
}
