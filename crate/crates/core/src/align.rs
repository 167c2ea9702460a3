//! Style projection of feature maps.
//!
//! Both transforms normalize each channel by its own statistics and then
//! re-scale/re-shift it. The divisor is `sqrt(var + floor^2)`, so a flat
//! channel maps to its target mean instead of dividing by zero.

use alloc::format;
use alloc::vec::Vec;

use crate::style::{channel_moments, guarded_sigma, FeatureMap, SIGMA_FLOOR};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentParams {
    /// 1 keeps the input style, 0 maps fully onto the unified mean style.
    pub alpha: f64,
    pub sigma_floor: f64,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        Self { alpha: 0.6, sigma_floor: SIGMA_FLOOR }
    }
}

impl AlignmentParams {
    pub fn new(alpha: f64) -> Result<Self> {
        let p = Self { alpha, ..Self::default() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Parameter("sigma_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Re-styles every channel of `z` to mean `mu_s[c]` and std `sigma_s[c]`.
pub fn align_to_style(z: &FeatureMap, mu_s: &[f64], sigma_s: &[f64]) -> Result<FeatureMap> {
    align_to_style_with_floor(z, mu_s, sigma_s, SIGMA_FLOOR)
}

pub fn align_to_style_with_floor(z: &FeatureMap, mu_s: &[f64], sigma_s: &[f64], sigma_floor: f64) -> Result<FeatureMap> {
    let c = z.channels();
    if mu_s.len() != c || sigma_s.len() != c {
        return Err(Error::Shape(format!(
            "target style has {}/{} channels, feature map {c}",
            mu_s.len(),
            sigma_s.len()
        )));
    }
    let mut out = z.clone();
    for ch in 0..c {
        let (mean, var) = channel_moments(z.channel(ch));
        let gain = sigma_s[ch] / guarded_sigma(var, sigma_floor);
        let shift = mu_s[ch];
        for v in out.channel_mut(ch) {
            *v = gain * (*v - mean) + shift;
        }
    }
    Ok(out)
}

/// Partial projection towards the unified mean style `(mu_T, sigma_T)`:
/// channel `c` ends up with mean `a*mu_u + (1-a)*mu_T` and std
/// `a*sigma_u + (1-a)*sigma_T`, where `(mu_u, sigma_u)` is its own style.
pub fn partial_align(z: &FeatureMap, unified_mean: &[f64], params: &AlignmentParams) -> Result<FeatureMap> {
    params.validate()?;
    let c = z.channels();
    if unified_mean.len() != 2 * c {
        return Err(Error::Shape(format!(
            "unified mean of length {} for a {c}-channel feature map",
            unified_mean.len()
        )));
    }
    let (mu_t, sigma_t) = unified_mean.split_at(c);
    let a = params.alpha;
    let mut out = z.clone();
    for ch in 0..c {
        let (mean, var) = channel_moments(z.channel(ch));
        let sigma_u = var.sqrt();
        let target_sigma = a * sigma_u + (1.0 - a) * sigma_t[ch];
        let target_mu = a * mean + (1.0 - a) * mu_t[ch];
        let gain = target_sigma / guarded_sigma(var, params.sigma_floor);
        for v in out.channel_mut(ch) {
            *v = gain * (*v - mean) + target_mu;
        }
    }
    Ok(out)
}

/// Cached per-channel statistics of one forward alignment, for backprop.
#[derive(Debug, Clone)]
pub(crate) struct AlignCache {
    /// normalized values `(z - mean) / guarded_sigma`
    pub normalized: Vec<f64>,
    pub inv_sigma: Vec<f64>,
    pub sigma_s: Vec<f64>,
}

/// Forward alignment that also returns the cache for [`align_backward`].
pub(crate) fn align_forward(z: &FeatureMap, mu_s: &[f64], sigma_s: &[f64], sigma_floor: f64) -> (FeatureMap, AlignCache) {
    let c = z.channels();
    let p = z.plane();
    let mut out = z.clone();
    let mut normalized = Vec::with_capacity(c * p);
    let mut inv_sigma = Vec::with_capacity(c);
    for ch in 0..c {
        let (mean, var) = channel_moments(z.channel(ch));
        let inv = 1.0 / guarded_sigma(var, sigma_floor);
        inv_sigma.push(inv);
        for v in out.channel_mut(ch) {
            let xhat = (*v - mean) * inv;
            normalized.push(xhat);
            *v = sigma_s[ch] * xhat + mu_s[ch];
        }
    }
    (out, AlignCache { normalized, inv_sigma, sigma_s: sigma_s.to_vec() })
}

/// Gradient w.r.t. the pre-alignment map given the gradient w.r.t. the
/// aligned map. Target statistics are constants; the input's own mean and
/// std are differentiated through.
pub(crate) fn align_backward(cache: &AlignCache, grad_out: &[f64], plane: usize) -> Vec<f64> {
    let mut grad_in = alloc::vec![0.0; grad_out.len()];
    let n = plane as f64;
    for (ch, (&inv, &s)) in cache.inv_sigma.iter().zip(&cache.sigma_s).enumerate() {
        let range = ch * plane..(ch + 1) * plane;
        let xhat = &cache.normalized[range.clone()];
        let g = &grad_out[range.clone()];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for (gi, xi) in g.iter().zip(xhat) {
            sum_g += gi;
            sum_gx += gi * xi;
        }
        let mean_g = s * sum_g / n;
        let mean_gx = s * sum_gx / n;
        for ((out, gi), xi) in grad_in[range].iter_mut().zip(g).zip(xhat) {
            *out = inv * (s * gi - mean_g - xi * mean_gx);
        }
    }
    grad_in
}
