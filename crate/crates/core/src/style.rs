//! Feature maps and their style statistics.
//!
//! An [`InstanceStyle`] is the per-channel mean and population standard
//! deviation of one `C x H x W` feature map; a [`GaussianStyle`] is a normal
//! distribution over the concatenated `2C`-dimensional style vectors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::{sqrt_psd, SymMatrix};
use crate::{Error, Result};

/// Default floor for standard deviations that end up in a denominator.
pub const SIGMA_FLOOR: f64 = 1e-5;

/// A `C x H x W` activation tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("feature map {channels}x{height}x{width} has an empty axis")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    /// Skips the finiteness scan; shape must already be right.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self { channels, height, width, data }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    /// Spatial size `H * W`.
    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }
    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }
}

/// Per-channel mean and standard deviation plus their concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStyle {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    epsilon: Vec<f64>,
}

impl InstanceStyle {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() || mu.is_empty() {
            return Err(Error::Shape(format!("mu has {} channels, sigma {}", mu.len(), sigma.len())));
        }
        if sigma.iter().any(|&s| s < 0.0 || !s.is_finite()) || mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::Parameter("style needs finite mu and nonnegative finite sigma".into()));
        }
        let mut epsilon = mu.clone();
        epsilon.extend_from_slice(&sigma);
        Ok(Self { mu, sigma, epsilon })
    }

    /// Splits a `2C` vector into `(mu, sigma)`.
    pub fn from_epsilon(epsilon: &[f64]) -> Result<Self> {
        if epsilon.len() % 2 != 0 {
            return Err(Error::Shape(format!("style vector of odd length {}", epsilon.len())));
        }
        let c = epsilon.len() / 2;
        Self::new(epsilon[..c].to_vec(), epsilon[c..].to_vec())
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }
    pub fn mu(&self) -> &[f64] {
        &self.mu
    }
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }
    pub fn epsilon(&self) -> &[f64] {
        &self.epsilon
    }
}

/// Channel means and population standard deviations (`1/HW` normalization).
pub fn compute_instance_style(z: &FeatureMap) -> InstanceStyle {
    let c = z.channels();
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    for ch in 0..c {
        let (m, var) = channel_moments(z.channel(ch));
        mu.push(m);
        sigma.push(var.sqrt());
    }
    let mut epsilon = mu.clone();
    epsilon.extend_from_slice(&sigma);
    InstanceStyle { mu, sigma, epsilon }
}

/// Mean and population variance of one channel, two-pass.
#[inline]
pub(crate) fn channel_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Standard deviation used as a divisor: `sqrt(var + floor^2)`.
#[inline]
pub(crate) fn guarded_sigma(var: f64, floor: f64) -> f64 {
    (var + floor * floor).sqrt()
}

/// A normal distribution over `2C`-dimensional style vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStyle {
    mean: Vec<f64>,
    covariance: SymMatrix,
}

impl GaussianStyle {
    pub fn new(mean: Vec<f64>, covariance: SymMatrix) -> Result<Self> {
        if mean.len() != covariance.dim() {
            return Err(Error::Shape(format!(
                "mean of length {} with a {}x{} covariance",
                mean.len(),
                covariance.dim(),
                covariance.dim()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian mean"));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
    pub fn covariance(&self) -> &SymMatrix {
        &self.covariance
    }

    /// `(mu, sigma)` halves of the mean vector.
    pub fn split_mean(&self) -> (&[f64], &[f64]) {
        self.mean.split_at(self.mean.len() / 2)
    }
}

/// Mean and population covariance (`1/n`) of a set of style vectors.
pub fn estimate_domain_style(styles: &[InstanceStyle]) -> Result<GaussianStyle> {
    let vectors: Vec<&[f64]> = styles.iter().map(|s| s.epsilon()).collect();
    estimate_gaussian(&vectors)
}

pub(crate) fn estimate_gaussian(points: &[&[f64]]) -> Result<GaussianStyle> {
    let first = points.first().ok_or(Error::Empty("domain style needs at least one instance"))?;
    let d = first.len();
    if let Some(bad) = points.iter().find(|p| p.len() != d) {
        return Err(Error::Shape(format!("style vectors of length {d} and {}", bad.len())));
    }
    let n = points.len() as f64;
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for p in points {
        for ((c, v), m) in centered.iter_mut().zip(p.iter()).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / n;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    GaussianStyle::new(mean, SymMatrix::symmetrized(d, cov))
}

/// Fréchet (2-Wasserstein) distance between two Gaussians.
pub fn frechet_distance(a: &GaussianStyle, b: &GaussianStyle) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("gaussians of dim {} and {}", a.dim(), b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_b = sqrt_psd(&b.covariance, 0.0)?;
    let cross = sqrt_psd(&root_b.sandwich(&a.covariance), 0.0)?;
    let trace_term = a.covariance.trace() + b.covariance.trace() - 2.0 * cross.trace();
    // negative residue is rounding in the cross term
    let scale = a.covariance.trace().abs() + b.covariance.trace().abs();
    let trace_term = if trace_term < 0.0 && trace_term > -1e-8 * scale.max(1.0) {
        0.0
    } else {
        trace_term
    };
    Ok((mean_term + trace_term).max(0.0).sqrt())
}

/// Average L2 distance between the unified `(mu, sigma)` halves and each
/// instance's `(mu, sigma)`. Returns `(d_mu, d_sigma)`.
pub fn domain_gap_terms(unified: &GaussianStyle, styles: &[InstanceStyle]) -> Result<(f64, f64)> {
    if styles.is_empty() {
        return Err(Error::Empty("domain gap needs at least one instance"));
    }
    let (mu_t, sigma_t) = unified.split_mean();
    let mut d_mu = 0.0;
    let mut d_sigma = 0.0;
    for s in styles {
        if s.channels() != mu_t.len() || unified.dim() % 2 != 0 {
            return Err(Error::Shape(format!(
                "instance style with {} channels against a unified style of dim {}",
                s.channels(),
                unified.dim()
            )));
        }
        d_mu += l2(mu_t, s.mu());
        d_sigma += l2(sigma_t, s.sigma());
    }
    let n = styles.len() as f64;
    Ok((d_mu / n, d_sigma / n))
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(mean: &[f64], cov: &[f64]) -> GaussianStyle {
        let d = mean.len();
        GaussianStyle::new(mean.to_vec(), SymMatrix::new(d, cov.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn instance_style_examples() {
        let z = FeatureMap::new(1, 2, 2, vec![5.0; 4]).unwrap();
        let s = compute_instance_style(&z);
        assert_eq!(s.mu(), &[5.0]);
        assert_eq!(s.sigma(), &[0.0]);

        let z = FeatureMap::new(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = compute_instance_style(&z);
        assert_eq!(s.mu(), &[2.5]);
        assert!((s.sigma()[0] - 1.25f64.sqrt()).abs() < 1e-15);
        assert!((s.sigma()[0] - 1.118034).abs() < 1e-6);
        assert_eq!(s.epsilon(), &[2.5, s.sigma()[0]]);

        let z = FeatureMap::new(2, 1, 3, vec![0.5, -1.0, 4.0, 0.5, -1.0, 4.0]).unwrap();
        let s = compute_instance_style(&z);
        assert_eq!(s.mu()[0], s.mu()[1]);
        assert_eq!(s.sigma()[0], s.sigma()[1]);
    }

    #[test]
    fn feature_map_validation() {
        assert!(FeatureMap::new(0, 1, 1, vec![]).is_err());
        assert!(FeatureMap::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(FeatureMap::new(1, 1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn domain_style_examples() {
        let e = InstanceStyle::new(vec![0.3], vec![1.2]).unwrap();
        let g = estimate_domain_style(&[e.clone()]).unwrap();
        assert_eq!(g.mean(), e.epsilon());
        assert!(g.covariance().is_zero());

        let a = InstanceStyle::from_epsilon(&[0.0, 1.0]).unwrap();
        let b = InstanceStyle::from_epsilon(&[2.0, 3.0]).unwrap();
        let g = estimate_domain_style(&[a, b]).unwrap();
        assert_eq!(g.mean(), &[1.0, 2.0]);
        assert_eq!(g.covariance().as_slice(), &[1.0, 1.0, 1.0, 1.0]);

        let g = estimate_domain_style(&vec![e; 7]).unwrap();
        assert!(g.covariance().is_zero());
    }

    #[test]
    fn domain_style_errors() {
        assert!(matches!(estimate_domain_style(&[]), Err(Error::Empty(_))));
        let a = InstanceStyle::new(vec![0.0], vec![1.0]).unwrap();
        let b = InstanceStyle::new(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(estimate_domain_style(&[a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn frechet_examples() {
        let a = gaussian(&[0.0], &[1.0]);
        let b = gaussian(&[2.0], &[9.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 8f64.sqrt()).abs() < 1e-12);
        assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);

        // commuting diagonal covariances: sum of per-axis (mean diff)^2 + (std diff)^2
        let a = gaussian(&[1.0, -2.0, 0.5], &[4.0, 0.0, 0.0, 0.0, 0.25, 0.0, 0.0, 0.0, 1.0]);
        let b = gaussian(&[0.0, 1.0, 0.5], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 9.0]);
        let expected: f64 = [(1.0f64, 2.0f64, 1.0f64), (-3.0, 0.5, 1.0), (0.0, 1.0, 3.0)]
            .iter()
            .map(|(dm, sa, sb)| dm * dm + (sa - sb) * (sa - sb))
            .sum::<f64>()
            .sqrt();
        assert!((frechet_distance(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!(frechet_distance(&a, &gaussian(&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn gap_terms_examples() {
        let unified = gaussian(&[1.0, 2.0, 0.5, 0.5], &[0.0; 16]);
        let same = InstanceStyle::new(vec![1.0, 2.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(domain_gap_terms(&unified, &[same.clone(), same]).unwrap(), (0.0, 0.0));

        let off = InstanceStyle::new(vec![4.0, 6.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(domain_gap_terms(&unified, &[off]).unwrap(), (5.0, 0.0));

        let plus = InstanceStyle::new(vec![1.6, 2.8], vec![0.5, 0.5]).unwrap();
        let minus = InstanceStyle::new(vec![0.4, 1.2], vec![0.5, 0.5]).unwrap();
        let (d_mu, _) = domain_gap_terms(&unified, &[plus, minus]).unwrap();
        assert!((d_mu - 1.0).abs() < 1e-12);
        assert!(matches!(domain_gap_terms(&unified, &[]), Err(Error::Empty(_))));
    }
}
