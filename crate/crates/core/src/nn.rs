//! Parameter containers and the binding of named parameters to a tape.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{ConvVars, Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named, ordered access to every learnable tensor.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }
}

/// Supplies a tape variable for each named parameter a forward pass reads.
pub trait Scope {
    fn tape(&self) -> &Tape;
    fn param(&mut self, name: &str, value: &Tensor) -> Var;
}

/// Creates a fresh leaf for each parameter and remembers which name it
/// belongs to, so gradients can be routed back after `backward`.
pub struct Binder<'t> {
    tape: &'t Tape,
    bound: Vec<(String, Var)>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Self {
            tape,
            bound: Vec::new(),
        }
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.bound.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Gradients keyed by parameter name. Parameters the loss does not
    /// reach get zeros.
    pub fn gradients(&self, grads: &mut Grads) -> HashMap<String, Vec<f32>> {
        self.bound
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .take(*v)
                    .unwrap_or_else(|| vec![0.0; self.tape.value(*v).numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

impl Scope for Binder<'_> {
    fn tape(&self) -> &Tape {
        self.tape
    }

    fn param(&mut self, name: &str, value: &Tensor) -> Var {
        let v = self.tape.leaf(value.clone());
        self.bound.push((name.to_string(), v));
        v
    }
}

/// Resolves parameters to variables that already exist on the tape.
pub struct Preset<'t> {
    tape: &'t Tape,
    vars: HashMap<String, Var>,
}

impl<'t> Preset<'t> {
    pub fn new(tape: &'t Tape, vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            tape,
            vars: vars.into_iter().collect(),
        }
    }
}

impl Scope for Preset<'_> {
    fn tape(&self) -> &Tape {
        self.tape
    }

    fn param(&mut self, name: &str, value: &Tensor) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => self.tape.constant(value.clone()),
        }
    }
}

/// Weights of one 2-D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    /// Kaiming-uniform weights, zero bias, "same" padding `(k-1)/2`.
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel size {k} must be odd"
            )));
        }
        if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!(
                "groups {groups} must divide C_in {cin} and C_out {cout}"
            )));
        }
        let cg = cin / groups;
        Ok(Self {
            weight: Tensor::kaiming_uniform(&[cout, cg, k, k], cg * k * k, rng),
            bias: bias.then(|| Tensor::zeros(&[cout])),
            stride,
            padding: (k - 1) / 2,
            groups,
        })
    }

    pub fn zeros(cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, k, k]),
            bias: bias.then(|| Tensor::zeros(&[cout])),
            stride: 1,
            padding: (k - 1) / 2,
            groups: 1,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn bind<S: Scope>(&self, s: &mut S, name: &str) -> ConvVars {
        let weight = s.param(&join(name, "weight"), &self.weight);
        let bias = self.bias.as_ref().map(|b| s.param(&join(name, "bias"), b));
        ConvVars {
            weight,
            bias,
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }

    pub fn forward<S: Scope>(&self, s: &mut S, name: &str, x: Var) -> Result<Var> {
        let vars = self.bind(s, name);
        s.tape().conv2d(x, &vars)
    }

    /// Multiply-accumulates for an `h×w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let k = self.kernel();
        let (ho, wo) = (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        );
        (ho * wo * self.weight.numel()) as u64
    }
}

impl Module for ConvParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}
