//! Oriented Gabor kernels used to initialize the texture branch.

use std::f32::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaborConfig {
    /// Odd kernel extent.
    pub k: usize,
    /// Wavelength of the carrier, in pixels.
    pub wavelength: f32,
    /// Standard deviation of the Gaussian envelope, in pixels.
    pub sigma: f32,
    /// Carrier phase, radians.
    pub phase: f32,
    /// Spatial aspect ratio of the envelope.
    pub gamma: f32,
    pub orientations: Vec<f32>,
}

impl Default for GaborConfig {
    fn default() -> Self {
        Self {
            k: 5,
            wavelength: 3.0,
            sigma: 1.5,
            phase: 0.0,
            gamma: 0.5,
            orientations: (0..8).map(|i| i as f32 * PI / 8.0).collect(),
        }
    }
}

impl GaborConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 3 || self.k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "Gabor kernel extent must be odd and at least 3, got {}",
                self.k
            )));
        }
        if !(self.wavelength > 0.0 && self.sigma > 0.0 && self.gamma > 0.0) {
            return Err(Error::InvalidArgument(
                "Gabor wavelength, sigma and gamma must be positive".into(),
            ));
        }
        if self.orientations.is_empty() {
            return Err(Error::InvalidArgument(
                "Gabor bank has no orientations".into(),
            ));
        }
        Ok(())
    }
}

/// `k×k` kernel `exp(-(x'² + γ²y'²)/(2σ²)) · cos(2πx'/λ + ψ)` sampled on the
/// integer grid centred at zero; rows index `y`, columns index `x`.
pub fn gabor_kernel(cfg: &GaborConfig, theta: f32) -> Result<Tensor> {
    cfg.validate()?;
    let k = cfg.k;
    let c = (k / 2) as f32;
    let (sin, cos) = theta.sin_cos();
    let two_sigma2 = 2.0 * cfg.sigma * cfg.sigma;
    Ok(Tensor::from_fn(&[k, k], |i| {
        let y = (i / k) as f32 - c;
        let x = (i % k) as f32 - c;
        let xr = x * cos + y * sin;
        let yr = -x * sin + y * cos;
        let envelope = (-(xr * xr + cfg.gamma * cfg.gamma * yr * yr) / two_sigma2).exp();
        envelope * (2.0 * PI * xr / cfg.wavelength + cfg.phase).cos()
    }))
}

/// `[orientations, cin, k, k]` bank: each orientation's kernel replicated
/// across input channels and scaled by `1/cin`.
pub fn gabor_bank(cfg: &GaborConfig, cin: usize) -> Result<Tensor> {
    let k2 = cfg.k * cfg.k;
    let mut data = Vec::with_capacity(cfg.orientations.len() * cin * k2);
    let scale = 1.0 / cin as f32;
    for &theta in &cfg.orientations {
        let kern = gabor_kernel(cfg, theta)?;
        for _ in 0..cin {
            data.extend(kern.data().iter().map(|v| v * scale));
        }
    }
    Tensor::new(&[cfg.orientations.len(), cin, cfg.k, cfg.k], data)
}
