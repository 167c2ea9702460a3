//! The unified domain: one Gaussian over style vectors that every training
//! feature map is projected onto.

use alloc::format;
use alloc::vec::Vec;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::cluster::{fit_style_gmm, ClusterConfig, StyleClusterModel};
use crate::numerics::{cholesky_psd, min_eigenvalue, regularize_psd, sqrt_psd, LowerTriangular, SymMatrix, NEGATIVE_EIG_TOL};
use crate::style::{GaussianStyle, InstanceStyle, SIGMA_FLOOR};
use crate::{Error, Result};

pub const BARYCENTER_TOL: f64 = 1e-10;
pub const BARYCENTER_MAX_ITER: usize = 500;
/// Relative diagonal lift applied before factoring a covariance for sampling.
const SAMPLING_JITTER: f64 = 1e-12;

/// How cluster Gaussians are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnifiedMethod {
    /// Elementwise mean of cluster means and covariances.
    #[default]
    Average,
    /// 2-Wasserstein barycenter via the covariance fixed-point iteration.
    Barycenter,
}

impl UnifiedMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            UnifiedMethod::Average => "average",
            UnifiedMethod::Barycenter => "barycenter",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            UnifiedMethod::Average => 0,
            UnifiedMethod::Barycenter => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(UnifiedMethod::Average),
            1 => Some(UnifiedMethod::Barycenter),
            _ => None,
        }
    }
}

impl core::str::FromStr for UnifiedMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(UnifiedMethod::Average),
            "barycenter" => Ok(UnifiedMethod::Barycenter),
            other => Err(Error::Parameter(format!("unknown unified method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedDomain {
    pub style: GaussianStyle,
    pub method: UnifiedMethod,
    /// Fixed-point updates applied (0 for averaging).
    pub iterations: usize,
    /// `||S - F(S)||_F` of the returned covariance under the barycenter map
    /// (0 for averaging).
    pub residual: f64,
    pub converged: bool,
}

impl UnifiedDomain {
    pub fn channels(&self) -> usize {
        self.style.dim() / 2
    }
}

fn check_components(components: &[GaussianStyle]) -> Result<usize> {
    let first = components.first().ok_or(Error::Empty("no components to merge"))?;
    let d = first.dim();
    if let Some(c) = components.iter().find(|c| c.dim() != d) {
        return Err(Error::Shape(format!("components of dim {d} and {}", c.dim())));
    }
    Ok(d)
}

fn mean_vector(components: &[GaussianStyle], d: usize) -> Vec<f64> {
    let mut mean = alloc::vec![0.0; d];
    for c in components {
        for (m, v) in mean.iter_mut().zip(c.mean()) {
            *m += v;
        }
    }
    let n = components.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// One application of the barycenter map `S -> mean_k (S^1/2 C_k S^1/2)^1/2`.
fn barycenter_map(current: &SymMatrix, components: &[GaussianStyle]) -> Result<SymMatrix> {
    let root = sqrt_psd(current, 0.0)?;
    let roots = components
        .iter()
        .map(|c| sqrt_psd(&root.sandwich(c.covariance()), 0.0))
        .collect::<Result<Vec<_>>>()?;
    SymMatrix::mean_of(current.dim(), roots.iter())
}

/// Gaussian 2-Wasserstein barycenter with equal weights. The mean is the
/// mean of means; the covariance starts at the mean covariance and is
/// iterated until successive iterates differ by less than `tol` (Frobenius).
pub fn barycenter_gaussian(components: &[GaussianStyle], tol: f64, max_iter: usize) -> Result<UnifiedDomain> {
    let d = check_components(components)?;
    for c in components {
        let min = min_eigenvalue(c.covariance())?;
        if min < -NEGATIVE_EIG_TOL * c.covariance().frobenius_norm().max(1.0) {
            return Err(Error::NotPsd { min_eigenvalue: min });
        }
    }
    let mean = mean_vector(components, d);
    let mut sigma = SymMatrix::mean_of(d, components.iter().map(|c| c.covariance()))?;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let next = barycenter_map(&sigma, components)?;
        iterations += 1;
        let step = next.frobenius_distance(&sigma);
        sigma = next;
        if step < tol {
            converged = true;
            break;
        }
    }
    let residual = sigma.frobenius_distance(&barycenter_map(&sigma, components)?);
    Ok(UnifiedDomain {
        style: GaussianStyle::new(mean, sigma)?,
        method: UnifiedMethod::Barycenter,
        iterations,
        residual,
        converged,
    })
}

/// Elementwise average of cluster means and covariances.
pub fn average_clusters(components: &[GaussianStyle]) -> Result<UnifiedDomain> {
    let d = check_components(components)?;
    let mean = mean_vector(components, d);
    let cov = SymMatrix::mean_of(d, components.iter().map(|c| c.covariance()))?;
    Ok(UnifiedDomain {
        style: GaussianStyle::new(mean, cov)?,
        method: UnifiedMethod::Average,
        iterations: 0,
        residual: 0.0,
        converged: true,
    })
}

pub fn aggregate(components: &[GaussianStyle], method: UnifiedMethod) -> Result<UnifiedDomain> {
    match method {
        UnifiedMethod::Average => average_clusters(components),
        UnifiedMethod::Barycenter => barycenter_gaussian(components, BARYCENTER_TOL, BARYCENTER_MAX_ITER),
    }
}

/// Clusters harvested styles and merges the clusters into one Gaussian.
pub fn determine_unified_domain(
    styles: &[InstanceStyle],
    cluster_config: &ClusterConfig,
    method: UnifiedMethod,
) -> Result<(UnifiedDomain, StyleClusterModel)> {
    let model = fit_style_gmm(styles, cluster_config)?;
    let unified = aggregate(&model.components, method)?;
    Ok((unified, model))
}

/// Draws style statistics from a unified domain. The covariance factor is
/// computed once.
#[derive(Debug, Clone)]
pub struct StyleSampler {
    mean: Vec<f64>,
    factor: LowerTriangular,
    sigma_floor: f64,
}

impl StyleSampler {
    pub fn new(domain: &UnifiedDomain) -> Result<Self> {
        Self::with_sigma_floor(domain, SIGMA_FLOOR)
    }

    pub fn with_sigma_floor(domain: &UnifiedDomain, sigma_floor: f64) -> Result<Self> {
        let cov = domain.style.covariance();
        let factor = if cov.is_zero() {
            LowerTriangular::zeros(cov.dim())
        } else {
            let lift = SAMPLING_JITTER * cov.frobenius_norm();
            cholesky_psd(&regularize_psd(cov, lift)?)?
        };
        Ok(Self { mean: domain.style.mean().to_vec(), factor, sigma_floor })
    }

    pub fn channels(&self) -> usize {
        self.mean.len() / 2
    }

    /// `eps = mean + L g` with `g` standard normal, split into `(mu, sigma)`;
    /// sigma entries are clamped below at the sigma floor.
    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let g: Vec<f64> = (0..self.mean.len()).map(|_| StandardNormal.sample(rng)).collect();
        let offset = self.factor.mul_vec(&g);
        let eps: Vec<f64> = self.mean.iter().zip(&offset).map(|(m, o)| m + o).collect();
        let c = self.channels();
        let mu = eps[..c].to_vec();
        let sigma = eps[c..].iter().map(|s| s.max(self.sigma_floor)).collect();
        (mu, sigma)
    }
}

/// One-shot draw; builds a [`StyleSampler`] each call.
pub fn sample_style<R: RngCore + ?Sized>(domain: &UnifiedDomain, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok(StyleSampler::new(domain)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn g(mean: &[f64], cov: SymMatrix) -> GaussianStyle {
        GaussianStyle::new(mean.to_vec(), cov).unwrap()
    }

    #[test]
    fn identical_components_are_a_fixed_point() {
        let cov = SymMatrix::new(2, vec![2.0, 0.3, 0.3, 1.0]).unwrap();
        let comps = vec![g(&[1.0, 2.0], cov.clone()); 3];
        let u = barycenter_gaussian(&comps, BARYCENTER_TOL, BARYCENTER_MAX_ITER).unwrap();
        assert_eq!(u.iterations, 1);
        assert!(u.residual < 1e-12);
        assert!(u.style.covariance().frobenius_distance(&cov) < 1e-12);
        assert_eq!(u.style.mean(), &[1.0, 2.0]);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let comps = [g(&[0.0], SymMatrix::from_diagonal(&[1.0])), g(&[2.0], SymMatrix::from_diagonal(&[9.0]))];
        let u = barycenter_gaussian(&comps, BARYCENTER_TOL, BARYCENTER_MAX_ITER).unwrap();
        assert_eq!(u.style.mean(), &[1.0]);
        assert!((u.style.covariance().get(0, 0) - 4.0).abs() < 1e-9);
        assert!(u.converged);
    }

    #[test]
    fn rejects_indefinite_component() {
        let comps = [g(&[0.0, 0.0], SymMatrix::from_diagonal(&[-1.0, 1.0]))];
        assert!(matches!(
            barycenter_gaussian(&comps, BARYCENTER_TOL, BARYCENTER_MAX_ITER),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn averaging_examples() {
        let a = g(&[0.0, 0.0], SymMatrix::identity(2));
        let b = g(&[2.0, 2.0], SymMatrix::identity(2).scale(3.0));
        let u = average_clusters(&[a.clone(), b]).unwrap();
        assert_eq!(u.style.mean(), &[1.0, 1.0]);
        assert_eq!(u.style.covariance(), &SymMatrix::identity(2).scale(2.0));
        assert_eq!(u.method, UnifiedMethod::Average);
        assert_eq!(average_clusters(&[a.clone()]).unwrap().style, a);
        assert_eq!(average_clusters(&[a.clone(), a.clone(), a.clone()]).unwrap().style, a);
        assert!(matches!(average_clusters(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn zero_covariance_samples_the_mean() {
        let u = average_clusters(&[g(&[0.5, -0.25, 1.5, 2.0], SymMatrix::zeros(4))]).unwrap();
        let sampler = StyleSampler::new(&u).unwrap();
        let mut rng = crate::rng::stream(1, 0);
        for _ in 0..5 {
            assert_eq!(sampler.sample(&mut rng), (vec![0.5, -0.25], vec![1.5, 2.0]));
        }
    }

    #[test]
    fn negative_sigma_is_clamped() {
        let u = average_clusters(&[g(&[0.0, -0.5], SymMatrix::zeros(2))]).unwrap();
        let mut rng = crate::rng::stream(1, 0);
        let (mu, sigma) = sample_style(&u, &mut rng).unwrap();
        assert_eq!(mu, vec![0.0]);
        assert_eq!(sigma, vec![SIGMA_FLOOR]);
    }

    #[test]
    fn sampling_is_reproducible() {
        let cov = SymMatrix::new(2, vec![1.0, 0.5, 0.5, 2.0]).unwrap();
        let u = average_clusters(&[g(&[0.0, 3.0], cov)]).unwrap();
        let s = StyleSampler::new(&u).unwrap();
        let a: Vec<_> = {
            let mut rng = crate::rng::stream(42, 7);
            (0..10).map(|_| s.sample(&mut rng)).collect()
        };
        let b: Vec<_> = {
            let mut rng = crate::rng::stream(42, 7);
            (0..10).map(|_| s.sample(&mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [UnifiedMethod::Average, UnifiedMethod::Barycenter] {
            assert_eq!(m.as_str().parse::<UnifiedMethod>().unwrap(), m);
            assert_eq!(UnifiedMethod::from_code(m.code()), Some(m));
        }
        assert!("median".parse::<UnifiedMethod>().is_err());
    }
}
