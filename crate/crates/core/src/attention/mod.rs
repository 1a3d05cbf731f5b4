//! Channel attention (squeeze-and-excitation) and the shape-texture spatial
//! attention module with its two branches.

pub mod gabor;
mod se;
mod shape;
mod stam;

pub use gabor::{gabor_kernel, GaborConfig};
pub use se::SeParams;
pub use shape::{deformable_conv_forward, shape_branch_forward, ShapeBranchParams, DEFORM_K};
pub use stam::{
    stam_param_count, texture_branch_forward, StamConfig, StamMaps, StamParams, StamResidual,
};
