use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gabor::{gabor_bank, GaborConfig};
use super::shape::{check_channels, shape_branch_forward, ShapeBranchParams, DEFORM_K};
use crate::autograd::{ConvVars, Var};
use crate::error::{Error, Result};
use crate::nn::{join, ConvParams, Module, Scope};
use crate::tensor::kernels::Activation;
use crate::tensor::Tensor;

/// How the final gate meets the block input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StamResidual {
    /// `y = x ⊗ σ(M_stam)`
    #[default]
    Gate,
    /// `y = x + x ⊗ σ(M_stam)`
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StamConfig {
    /// Channel compression of the descriptor, `C → C/r`.
    pub r: usize,
    /// Hidden width of the fusion block.
    pub d: usize,
    pub gabor: GaborConfig,
    pub fusion_activation: Activation,
    pub residual: StamResidual,
}

impl Default for StamConfig {
    fn default() -> Self {
        Self {
            r: 2,
            d: 8,
            gabor: GaborConfig::default(),
            fusion_activation: Activation::Hardswish,
            residual: StamResidual::Gate,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StamParams {
    pub desc: ConvParams,
    pub shape: ShapeBranchParams,
    pub gabor_weight: Tensor,
    pub texture_fuse: ConvParams,
    pub fusion_up: ConvParams,
    pub fusion_down: ConvParams,
    pub config: StamConfig,
}

/// Raw (pre-sigmoid) single-channel attention maps of one STAM pass.
#[derive(Clone, Copy, Debug)]
pub struct StamMaps {
    pub shape: Var,
    pub texture: Var,
    pub stam: Var,
}

impl StamParams {
    pub fn new(channels: usize, config: StamConfig, rng: &mut impl Rng) -> Result<Self> {
        config.gabor.validate()?;
        if config.r == 0 || !channels.is_multiple_of(config.r) || channels / config.r == 0 {
            return Err(Error::InvalidArgument(format!(
                "STAM channels {channels} not divisible by r={}",
                config.r
            )));
        }
        if config.d == 0 {
            return Err(Error::InvalidArgument(
                "STAM fusion width d must be positive".into(),
            ));
        }
        let c = channels / config.r;
        let bank = config.gabor.orientations.len();
        Ok(Self {
            desc: ConvParams::new(channels, c, 1, 1, 1, true, rng)?,
            shape: ShapeBranchParams::new(c, rng)?,
            gabor_weight: gabor_bank(&config.gabor, c)?,
            texture_fuse: ConvParams::new(bank, 1, 1, 1, 1, true, rng)?,
            fusion_up: ConvParams::new(2, config.d, 3, 1, 1, true, rng)?,
            fusion_down: ConvParams::new(config.d, 1, 1, 1, 1, true, rng)?,
            config,
        })
    }

    pub fn channels(&self) -> usize {
        self.desc.in_channels()
    }

    pub fn reduced_channels(&self) -> usize {
        self.desc.out_channels()
    }

    /// The five-step pass: descriptor, shape score, shape-gated texture
    /// input, texture score, fused gate applied to `x`.
    pub fn forward<S: Scope>(&self, s: &mut S, name: &str, x: Var) -> Result<(Var, StamMaps)> {
        check_channels(s, x, self.channels())?;
        let x_desc = self.desc.forward(s, &join(name, "desc"), x)?;
        let m_shape = shape_branch_forward(s, &join(name, "shape"), x_desc, &self.shape)?;
        let shape_gate = s.tape().sigmoid(m_shape);
        let x_texture = s.tape().mul(x_desc, shape_gate)?;
        let m_texture = texture_branch_forward(s, &join(name, "texture"), x_texture, self)?;
        let m_stam = self.fuse(s, name, m_shape, m_texture)?;
        let gate = s.tape().sigmoid(m_stam);
        let gated = s.tape().mul(x, gate)?;
        let y = match self.config.residual {
            StamResidual::Gate => gated,
            StamResidual::Additive => s.tape().add(x, gated)?,
        };
        Ok((
            y,
            StamMaps {
                shape: m_shape,
                texture: m_texture,
                stam: m_stam,
            },
        ))
    }

    /// `fusion_down(act(fusion_up([M_shape; M_texture])))`, raw.
    pub fn fuse<S: Scope>(
        &self,
        s: &mut S,
        name: &str,
        m_shape: Var,
        m_texture: Var,
    ) -> Result<Var> {
        let both = s.tape().concat_channels(&[m_shape, m_texture])?;
        let up = self.fusion_up.forward(s, &join(name, "fusion.up"), both)?;
        let up = s.tape().activation(self.config.fusion_activation, up);
        self.fusion_down.forward(s, &join(name, "fusion.down"), up)
    }
}

/// Gabor-initialized convolution bank (no bias) then a 1×1 fuse to one
/// channel; raw score.
pub fn texture_branch_forward<S: Scope>(
    s: &mut S,
    name: &str,
    x_texture: Var,
    p: &StamParams,
) -> Result<Var> {
    check_channels(s, x_texture, p.reduced_channels())?;
    let k = p.gabor_weight.dims()[2];
    let w = s.param(&join(name, "gabor_weight"), &p.gabor_weight);
    let responses = s.tape().conv2d(
        x_texture,
        &ConvVars {
            weight: w,
            bias: None,
            stride: 1,
            padding: k / 2,
            groups: 1,
        },
    )?;
    p.texture_fuse.forward(s, &join(name, "fuse"), responses)
}

impl Module for StamParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.desc.visit(&join(prefix, "desc"), f);
        self.shape.visit(&join(prefix, "shape"), f);
        f(join(prefix, "texture.gabor_weight"), &self.gabor_weight);
        self.texture_fuse.visit(&join(prefix, "texture.fuse"), f);
        self.fusion_up.visit(&join(prefix, "fusion.up"), f);
        self.fusion_down.visit(&join(prefix, "fusion.down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.desc.visit_mut(&join(prefix, "desc"), f);
        self.shape.visit_mut(&join(prefix, "shape"), f);
        f(join(prefix, "texture.gabor_weight"), &mut self.gabor_weight);
        self.texture_fuse
            .visit_mut(&join(prefix, "texture.fuse"), f);
        self.fusion_up.visit_mut(&join(prefix, "fusion.up"), f);
        self.fusion_down.visit_mut(&join(prefix, "fusion.down"), f);
    }
}

/// Closed-form parameter count of one STAM on `channels` inputs with an
/// 8-filter Gabor bank of extent `k`.
pub fn stam_param_count(channels: usize, r: usize, k: usize, d: usize) -> usize {
    let c = channels / r;
    let points = DEFORM_K * DEFORM_K;
    let bank = 8;
    let desc = channels * c + c;
    let offset_pred = c * points * 3 * points + 3 * points;
    let dcn = c * c * points;
    let proj = c + 1;
    let gabor = bank * c * k * k;
    let texture_fuse = bank + 1;
    let fusion_up = 2 * 9 * d + d;
    let fusion_down = d + 1;
    desc + offset_pred + dcn + proj + gabor + texture_fuse + fusion_up + fusion_down
}
