use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{join, ConvParams, Module, Scope};
use crate::tensor::Tensor;

/// Sampling points of the deformable kernel (3×3).
pub const DEFORM_K: usize = 3;
const POINTS: usize = DEFORM_K * DEFORM_K;

/// Deformable 3×3 convolution followed by a 1×1 projection to one channel.
///
/// `offset_pred` emits `2·9` offsets as `(dy, dx)` pairs per kernel point,
/// then 9 modulation scalars. Its weights and offset biases start at zero
/// and the modulation biases at one, so a fresh branch computes an ordinary
/// 3×3 convolution with `dcn_weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeBranchParams {
    pub offset_pred: ConvParams,
    pub dcn_weight: Tensor,
    pub proj: ConvParams,
}

impl ShapeBranchParams {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("shape branch needs channels".into()));
        }
        let mut offset_pred = ConvParams::zeros(channels, 3 * POINTS, DEFORM_K, true);
        if let Some(b) = &mut offset_pred.bias {
            b.data_mut()[2 * POINTS..].fill(1.0);
        }
        Ok(Self {
            offset_pred,
            dcn_weight: Tensor::kaiming_uniform(
                &[channels, channels, DEFORM_K, DEFORM_K],
                channels * POINTS,
                rng,
            ),
            proj: ConvParams::new(channels, 1, 1, 1, 1, true, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.dcn_weight.dims()[0]
    }
}

impl Module for ShapeBranchParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.offset_pred.visit(&join(prefix, "offset_pred"), f);
        f(join(prefix, "dcn_weight"), &self.dcn_weight);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.offset_pred.visit_mut(&join(prefix, "offset_pred"), f);
        f(join(prefix, "dcn_weight"), &mut self.dcn_weight);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// `y(p) = Σ_k w_k · m_k(p) · x(p + p_k + Δp_k(p))`, with `Δp` and `m`
/// predicted from `x` and sampled bilinearly. Modulation is unbounded.
pub fn deformable_conv_forward<S: Scope>(
    s: &mut S,
    name: &str,
    x: Var,
    p: &ShapeBranchParams,
) -> Result<Var> {
    check_channels(s, x, p.channels())?;
    let offsets = p.offset_pred.forward(s, &join(name, "offset_pred"), x)?;
    let w = s.param(&join(name, "dcn_weight"), &p.dcn_weight);
    s.tape().deform_conv2d(x, offsets, w)
}

/// Raw single-channel shape score `M_shape`; no activation.
pub fn shape_branch_forward<S: Scope>(
    s: &mut S,
    name: &str,
    x_desc: Var,
    p: &ShapeBranchParams,
) -> Result<Var> {
    let d = deformable_conv_forward(s, name, x_desc, p)?;
    p.proj.forward(s, &join(name, "proj"), d)
}

pub(crate) fn check_channels<S: Scope>(s: &S, x: Var, expected: usize) -> Result<()> {
    let (_, c, _, _) = s.tape().value(x).nchw()?;
    if c != expected {
        return Err(Error::shape(
            "attention branch",
            format!("input has C={c}, branch built for C={expected}"),
        ));
    }
    Ok(())
}
