use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{join, ConvParams, Module, Scope};
use crate::tensor::kernels::Activation;
use crate::tensor::Tensor;

/// Squeeze-and-excitation: global pool, 1×1 reduce, ReLU, 1×1 expand,
/// hard-sigmoid gate broadcast over space.
#[derive(Clone, Debug, PartialEq)]
pub struct SeParams {
    pub reduce: ConvParams,
    pub expand: ConvParams,
    pub ratio: usize,
}

impl SeParams {
    pub fn new(channels: usize, ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = Self::hidden(channels, ratio)?;
        Ok(Self {
            reduce: ConvParams::new(channels, hidden, 1, 1, 1, true, rng)?,
            expand: ConvParams::new(hidden, channels, 1, 1, 1, true, rng)?,
            ratio,
        })
    }

    pub fn zeros(channels: usize, ratio: usize) -> Result<Self> {
        let hidden = Self::hidden(channels, ratio)?;
        Ok(Self {
            reduce: ConvParams::zeros(channels, hidden, 1, true),
            expand: ConvParams::zeros(hidden, channels, 1, true),
            ratio,
        })
    }

    fn hidden(channels: usize, ratio: usize) -> Result<usize> {
        if ratio == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "SE needs positive channels and ratio, got {channels} and {ratio}"
            )));
        }
        Ok((channels / ratio).max(1))
    }

    pub fn channels(&self) -> usize {
        self.reduce.in_channels()
    }

    /// The `[n, c, 1, 1]` gate in `[0, 1]`.
    pub fn gate<S: Scope>(&self, s: &mut S, name: &str, x: Var) -> Result<Var> {
        let (_, c, _, _) = s.tape().value(x).nchw()?;
        if c != self.channels() {
            return Err(Error::shape(
                "se",
                format!("input has C={c}, SE built for C={}", self.channels()),
            ));
        }
        let pooled = s.tape().global_avg_pool(x)?;
        let h = self.reduce.forward(s, &join(name, "reduce"), pooled)?;
        let h = s.tape().relu(h);
        let e = self.expand.forward(s, &join(name, "expand"), h)?;
        Ok(s.tape().activation(Activation::HardSigmoid, e))
    }

    pub fn forward<S: Scope>(&self, s: &mut S, name: &str, x: Var) -> Result<Var> {
        let g = self.gate(s, name, x)?;
        s.tape().mul(x, g)
    }
}

impl Module for SeParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.expand.visit(&join(prefix, "expand"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.expand.visit_mut(&join(prefix, "expand"), f);
    }
}
