//! Gaussian mixture clustering of style vectors.
//!
//! Plain EM with full covariances. Each M-step covariance has its spectrum
//! clipped from below at `covariance_floor`, which is the constrained
//! maximizer, so the log-likelihood stays monotone.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use rand::Rng as _;

use crate::numerics::{cholesky_psd, clamp_eigenvalues, LowerTriangular, SymMatrix};
use crate::style::{estimate_gaussian, GaussianStyle, InstanceStyle};
use crate::{Error, Result};

/// Components whose effective point count drops below this are re-seeded.
const COLLAPSE_MASS: f64 = 1e-8;
const LLOYD_ITERATIONS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub n_clusters: usize,
    pub max_iterations: usize,
    /// Stop once the mean per-point log-likelihood improves by less than this.
    pub log_likelihood_tol: f64,
    pub covariance_floor: f64,
    pub seed: u64,
    /// Symmetric Dirichlet prior on the weights; 1 means plain maximum likelihood.
    pub weight_concentration: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            n_clusters: 4,
            max_iterations: 200,
            log_likelihood_tol: 1e-6,
            covariance_floor: 1e-6,
            seed: 0,
            weight_concentration: 1.0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::Config("n_clusters must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.log_likelihood_tol > 0.0) {
            return Err(Error::Config("log_likelihood_tol must be positive".into()));
        }
        if !(self.covariance_floor > 0.0) {
            return Err(Error::Config("covariance_floor must be positive".into()));
        }
        if !(self.weight_concentration > 0.0) {
            return Err(Error::Config("weight_concentration must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleClusterModel {
    pub weights: Vec<f64>,
    pub components: Vec<GaussianStyle>,
    /// Total log-likelihood of the data under the returned parameters.
    pub final_log_likelihood: f64,
    pub iterations_run: usize,
    /// Mean per-point log-likelihood at every E-step.
    pub log_likelihood_trace: Vec<f64>,
    /// Trace indices right after a collapsed component was re-seeded.
    pub reseed_iterations: Vec<usize>,
    pub converged: bool,
    /// All inputs were identical and more than one cluster was requested.
    pub degenerate: bool,
}

struct Component {
    mean: Vec<f64>,
    covariance: SymMatrix,
    chol: LowerTriangular,
    log_norm: f64,
}

impl Component {
    fn new(mean: Vec<f64>, covariance: SymMatrix) -> Result<Self> {
        let chol = cholesky_psd(&covariance)?;
        let d = mean.len() as f64;
        let log_norm = -0.5 * (d * (2.0 * PI).ln() + chol.log_det_gram());
        Ok(Self { mean, covariance, chol, log_norm })
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let y = self.chol.solve(&diff);
        self.log_norm - 0.5 * y.iter().map(|v| v * v).sum::<f64>()
    }
}

impl StyleClusterModel {
    pub fn n_clusters(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Posterior responsibilities of a raw vector, plus the argmax (lowest index wins ties).
    pub fn predict_point(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("point of dim {} for a dim-{} model", x.len(), self.dim())));
        }
        let comps = self
            .components
            .iter()
            .map(|g| Component::new(g.mean().to_vec(), g.covariance().clone()))
            .collect::<Result<Vec<_>>>()?;
        let log_w: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        let mut resp = vec![0.0; comps.len()];
        posterior(&comps, &log_w, x, &mut resp);
        Ok((argmax(&resp), resp))
    }

    /// Hard labels for a batch of points.
    pub fn assign<P: AsRef<[f64]>>(&self, points: &[P]) -> Result<Vec<usize>> {
        points.iter().map(|p| self.predict_point(p.as_ref()).map(|(k, _)| k)).collect()
    }

    /// Components (and weights) sorted by the first mean coordinate.
    pub fn canonicalized(&self) -> StyleClusterModel {
        let mut order: Vec<usize> = (0..self.components.len()).collect();
        order.sort_by(|&a, &b| self.components[a].mean()[0].total_cmp(&self.components[b].mean()[0]));
        let mut out = self.clone();
        out.components = order.iter().map(|&k| self.components[k].clone()).collect();
        out.weights = order.iter().map(|&k| self.weights[k]).collect();
        out
    }
}

/// Fits a mixture to instance-style vectors.
pub fn fit_style_gmm(styles: &[InstanceStyle], config: &ClusterConfig) -> Result<StyleClusterModel> {
    let points: Vec<&[f64]> = styles.iter().map(|s| s.epsilon()).collect();
    fit_gmm(&points, config)
}

/// Posterior over components for one style.
pub fn predict_cluster(model: &StyleClusterModel, style: &InstanceStyle) -> Result<(usize, Vec<f64>)> {
    model.predict_point(style.epsilon())
}

/// EM on arbitrary equal-length vectors.
pub fn fit_gmm<P: AsRef<[f64]>>(points: &[P], config: &ClusterConfig) -> Result<StyleClusterModel> {
    config.validate()?;
    let k = config.n_clusters;
    let n = points.len();
    if n < k || n == 0 {
        return Err(Error::InsufficientData { points: n, clusters: k });
    }
    let d = points[0].as_ref().len();
    if d == 0 {
        return Err(Error::Shape("zero-length style vectors".into()));
    }
    if let Some(p) = points.iter().find(|p| p.as_ref().len() != d) {
        return Err(Error::Shape(format!("vectors of length {d} and {}", p.as_ref().len())));
    }
    let points: Vec<&[f64]> = points.iter().map(|p| p.as_ref()).collect();
    let floor = config.covariance_floor;
    let global = estimate_gaussian(&points)?;
    let global_cov = clamp_eigenvalues(global.covariance(), floor)?;

    if k > 1 && global.covariance().is_zero() {
        let comp = GaussianStyle::new(global.mean().to_vec(), SymMatrix::identity(d).scale(floor))?;
        let c = Component::new(comp.mean().to_vec(), comp.covariance().clone())?;
        let total = points.iter().map(|p| c.log_density(p)).sum::<f64>();
        return Ok(StyleClusterModel {
            weights: vec![1.0 / k as f64; k],
            components: vec![comp; k],
            final_log_likelihood: total,
            iterations_run: 0,
            log_likelihood_trace: vec![total / n as f64],
            reseed_iterations: Vec::new(),
            converged: true,
            degenerate: true,
        });
    }

    let mut rng = crate::rng::stream(config.seed, 0x6d6d);
    let centers = kmeans_plus_plus(&points, k, &mut rng);

    // hard assignment to the seeds gives the first M-step
    let mut resp = vec![0.0; n * k];
    for (i, p) in points.iter().enumerate() {
        let best = (0..k)
            .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
            .unwrap_or(0);
        resp[i * k + best] = 1.0;
    }
    let mut comps = Vec::with_capacity(k);
    for (c, center) in centers.iter().enumerate() {
        let mass: f64 = (0..n).map(|i| resp[i * k + c]).sum();
        if mass > 0.0 {
            comps.push(m_step_component(&points, &resp, k, c, mass, floor)?);
        } else {
            comps.push(Component::new(center.clone(), global_cov.clone())?);
        }
    }
    let mut log_w = vec![(1.0 / k as f64).ln(); k];

    let mut trace = Vec::new();
    let mut reseeds = Vec::new();
    let mut converged = false;
    let mut total_ll = f64::NEG_INFINITY;
    let mut point_ll = vec![0.0; n];
    let mut row = vec![0.0; k];
    let max_reseeds = 3 * k;

    for _iter in 0..config.max_iterations {
        // E-step
        total_ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            let ll = posterior(&comps, &log_w, p, &mut row);
            resp[i * k..(i + 1) * k].copy_from_slice(&row);
            point_ll[i] = ll;
            total_ll += ll;
        }
        if !total_ll.is_finite() {
            return Err(Error::NonFinite("mixture log-likelihood"));
        }
        let mean_ll = total_ll / n as f64;
        if let Some(&prev) = trace.last() {
            let just_reseeded = reseeds.last() == Some(&trace.len());
            if !just_reseeded && mean_ll - prev < config.log_likelihood_tol {
                trace.push(mean_ll);
                converged = true;
                break;
            }
        }
        trace.push(mean_ll);

        // M-step
        let masses: Vec<f64> = (0..k).map(|c| (0..n).map(|i| resp[i * k + c]).sum()).collect();
        let alpha = config.weight_concentration;
        let denom = n as f64 + k as f64 * (alpha - 1.0);
        let mut weights: Vec<f64> = masses.iter().map(|m| ((m + alpha - 1.0) / denom).max(0.0)).collect();
        let mut collapsed = Vec::new();
        for c in 0..k {
            if masses[c] < COLLAPSE_MASS * n as f64 || weights[c] == 0.0 {
                collapsed.push(c);
            } else {
                comps[c] = m_step_component(&points, &resp, k, c, masses[c], floor)?;
            }
        }
        if !collapsed.is_empty() && reseeds.len() < max_reseeds {
            // restart collapsed components on the worst-explained points
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| point_ll[a].total_cmp(&point_ll[b]));
            for (slot, &c) in collapsed.iter().enumerate() {
                let idx = order[slot.min(n - 1)];
                comps[c] = Component::new(points[idx].to_vec(), global_cov.clone())?;
                weights[c] = 1.0 / n as f64;
            }
            reseeds.push(trace.len());
        }
        let sum: f64 = weights.iter().sum();
        log_w = weights.iter().map(|w| (w / sum).ln()).collect();
    }

    let weights: Vec<f64> = log_w.iter().map(|l| l.exp()).collect();
    let sum: f64 = weights.iter().sum();
    let weights = weights.iter().map(|w| w / sum).collect();
    let components = comps
        .into_iter()
        .map(|c| GaussianStyle::new(c.mean, c.covariance))
        .collect::<Result<Vec<_>>>()?;
    Ok(StyleClusterModel {
        weights,
        components,
        final_log_likelihood: total_ll,
        iterations_run: trace.len(),
        log_likelihood_trace: trace,
        reseed_iterations: reseeds,
        converged,
        degenerate: false,
    })
}

fn m_step_component(
    points: &[&[f64]],
    resp: &[f64],
    k: usize,
    c: usize,
    mass: f64,
    floor: f64,
) -> Result<Component> {
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for (i, p) in points.iter().enumerate() {
        let r = resp[i * k + c];
        if r == 0.0 {
            continue;
        }
        for (m, v) in mean.iter_mut().zip(p.iter()) {
            *m += r * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= mass);
    let mut cov = vec![0.0; d * d];
    let mut diff = vec![0.0; d];
    for (i, p) in points.iter().enumerate() {
        let r = resp[i * k + c];
        if r == 0.0 {
            continue;
        }
        for ((df, v), m) in diff.iter_mut().zip(p.iter()).zip(&mean) {
            *df = v - m;
        }
        for a in 0..d {
            let ra = r * diff[a];
            for b in a..d {
                cov[a * d + b] += ra * diff[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / mass;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    let cov = clamp_eigenvalues(&SymMatrix::symmetrized(d, cov), floor)?;
    Component::new(mean, cov)
}

/// Fills `out` with normalized responsibilities; returns the point's log-likelihood.
fn posterior(comps: &[Component], log_w: &[f64], x: &[f64], out: &mut [f64]) -> f64 {
    for ((o, c), lw) in out.iter_mut().zip(comps).zip(log_w) {
        *o = lw + c.log_density(x);
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    max + sum.ln()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
/// Greedy k-means++ seeding (`2 + ln k` candidates per step, keeping the one
/// that lowers the potential most), then a few Lloyd iterations.
fn kmeans_plus_plus(points: &[&[f64]], k: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let trials = 2 + (k as f64).ln() as usize;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].to_vec());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let idx = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut chosen = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    acc += w;
                    if acc > target && w > 0.0 {
                        chosen = i;
                        break;
                    }
                }
                chosen
            } else {
                rng.random_range(0..n)
            };
            let next: Vec<f64> = d2.iter().zip(points).map(|(dd, p)| dd.min(sq_dist(p, points[idx]))).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, idx, next));
            }
        }
        let (_, idx, next) = best.expect("at least one trial");
        d2 = next;
        centers.push(points[idx].to_vec());
    }
    lloyd(points, &mut centers, LLOYD_ITERATIONS);
    centers
}

fn lloyd(points: &[&[f64]], centers: &mut [Vec<f64>], iterations: usize) {
    let k = centers.len();
    let d = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..iterations {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap_or(0);
            changed |= *l != best;
            *l = best;
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            // empty clusters keep their seed
            if counts[c] > 0 {
                for (m, s) in centers[c].iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *m = s / counts[c] as f64;
                }
            }
        }
    }
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same points");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0usize; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let pairs = |m: usize| (m * m.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&m| pairs(m)).sum();
    let row: f64 = (0..ka).map(|i| pairs((0..kb).map(|j| table[i * kb + j]).sum())).sum();
    let col: f64 = (0..kb).map(|j| pairs((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let expected = row * col / pairs(n).max(1.0);
    let max_index = 0.5 * (row + col);
    if max_index == expected {
        return 1.0;
    }
    (index - expected) / (max_index - expected)
}
