//! Two-phase training, inference and the experiment protocols built on them.
//!
//! Training runs plain (ERM) updates for the first `initial_epochs` epochs and
//! aligned updates afterwards. After every epoch that is a multiple of
//! `update_interval`, styles are harvested from the whole training set with
//! the current `theta_s` and the unified domain is recomputed.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use crate::align::{partial_align, AlignmentParams};
use crate::cluster::ClusterConfig;
use crate::datagen::{LabeledSample, SyntheticDataset};
use crate::net::{argmax, loss_and_grad, sgd_step, Architecture, DeskNet, OptimState, TrainMode};
use crate::rng::{derive_seed, stream};
use crate::style::{compute_instance_style, domain_gap_terms, estimate_domain_style, frechet_distance, GaussianStyle, InstanceStyle};
use crate::unified::{determine_unified_domain, StyleSampler, UnifiedDomain, UnifiedMethod};
use crate::{Error, Result};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_STYLE: u64 = 2;
const SEED_INIT: u64 = 0x1a1;
const SEED_CLUSTER: u64 = 0xc1;

/// Channel widths of the two convolution stages.
pub const STYLE_CHANNELS: usize = 8;
pub const TRUNK_CHANNELS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_epochs: usize,
    pub update_interval: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub n_clusters: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub unified_method: UnifiedMethod,
    pub mode: TrainMode,
    /// Keep the `theta_s` weights from the end of the initial phase and use
    /// them at inference instead of the final ones.
    pub freeze_initial_style: bool,
    pub cluster_max_iterations: usize,
    pub cluster_tol: f64,
    pub covariance_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let cluster = ClusterConfig::default();
        Self {
            epochs: 30,
            initial_epochs: 5,
            update_interval: 5,
            learning_rate: 0.05,
            momentum: 0.0,
            n_clusters: 4,
            alpha: 0.6,
            batch_size: 32,
            seed: 0,
            unified_method: UnifiedMethod::Average,
            mode: TrainMode::ConstStyle,
            freeze_initial_style: false,
            cluster_max_iterations: cluster.max_iterations,
            cluster_tol: cluster.log_likelihood_tol,
            covariance_floor: cluster.covariance_floor,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.initial_epochs == 0 || self.initial_epochs > self.epochs {
            return fail(format!("initial_epochs must lie in [1, {}], got {}", self.epochs, self.initial_epochs));
        }
        if self.update_interval == 0 {
            return fail("update_interval must be at least 1".into());
        }
        if self.mode == TrainMode::ConstStyle
            && self.initial_epochs < self.epochs
            && self.update_interval > self.initial_epochs
        {
            return fail(format!(
                "update_interval {} exceeds initial_epochs {}: no unified domain would exist when aligned training starts",
                self.update_interval, self.initial_epochs
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        AlignmentParams::new(self.alpha)?;
        OptimState::new(self.learning_rate, self.momentum)?;
        self.cluster_config(0).validate()
    }

    /// Clustering settings for the refresh after `epoch`.
    pub fn cluster_config(&self, epoch: usize) -> ClusterConfig {
        ClusterConfig {
            n_clusters: self.n_clusters,
            max_iterations: self.cluster_max_iterations,
            log_likelihood_tol: self.cluster_tol,
            covariance_floor: self.covariance_floor,
            seed: derive_seed(self.seed ^ SEED_CLUSTER, epoch as u64),
            ..ClusterConfig::default()
        }
    }

    /// Inference alpha: conststyle models use `alpha`, ERM models run plain.
    pub fn eval_alpha(&self) -> f64 {
        match self.mode {
            TrainMode::ConstStyle => self.alpha,
            TrainMode::Erm => 1.0,
        }
    }

    pub fn is_refresh_epoch(&self, epoch: usize) -> bool {
        epoch % self.update_interval == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Forward path used during this epoch.
    pub phase: TrainMode,
    /// Mean cross-entropy over the epoch's samples.
    pub loss: f64,
    pub train_accuracy: f64,
    pub refresh: bool,
    /// Barycenter residual of the refresh, when one happened.
    pub barycenter_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefreshRecord {
    pub epoch: usize,
    pub method: UnifiedMethod,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub gmm_iterations: usize,
    pub gmm_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub refreshes: Vec<RefreshRecord>,
}

/// Everything a training run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub net: DeskNet,
    /// Latest unified domain; `None` when no refresh epoch occurred.
    pub unified: Option<UnifiedDomain>,
    /// `theta_s` weights at the end of the initial phase, if requested.
    pub initial_style_params: Option<Vec<f64>>,
    pub report: TrainReport,
}

impl TrainedModel {
    /// The network used at inference (final weights, or final weights with
    /// the stored initial `theta_s`).
    pub fn inference_net(&self) -> Result<DeskNet> {
        match &self.initial_style_params {
            Some(p) => self.net.with_style_params(p),
            None => Ok(self.net.clone()),
        }
    }
}

/// Architecture for a dataset's image shape and class count.
pub fn architecture_for(dataset: &SyntheticDataset) -> Result<Architecture> {
    let [c, h, w] = dataset.image_shape().ok_or(Error::Empty("dataset"))?;
    let arch = Architecture {
        in_channels: c,
        height: h,
        width: w,
        style_channels: STYLE_CHANNELS,
        trunk_channels: TRUNK_CHANNELS,
        n_classes: dataset.n_classes,
    };
    arch.validate()?;
    Ok(arch)
}

/// Instance styles of `samples` at the `theta_s` output, without alignment.
pub fn harvest_styles<'a, I>(net: &DeskNet, samples: I) -> Result<Vec<InstanceStyle>>
where
    I: IntoIterator<Item = &'a LabeledSample>,
{
    samples
        .into_iter()
        .map(|s| net.forward_style(&s.input).map(|(z, _)| compute_instance_style(&z)))
        .collect()
}

pub fn train(dataset: &SyntheticDataset, config: &TrainConfig) -> Result<TrainedModel> {
    train_observed(dataset, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_observed<F>(dataset: &SyntheticDataset, config: &TrainConfig, mut observer: F) -> Result<TrainedModel>
where
    F: FnMut(&EpochRecord),
{
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let arch = architecture_for(dataset)?;
    let mut net = DeskNet::new(arch, derive_seed(config.seed, SEED_INIT))?;
    let mut optim = OptimState::new(config.learning_rate, config.momentum)?;
    let mut shuffle_rng = stream(config.seed, STREAM_SHUFFLE);
    let mut style_rng = stream(config.seed, STREAM_STYLE);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut unified: Option<UnifiedDomain> = None;
    let mut sampler: Option<StyleSampler> = None;
    let mut initial_style_params = None;
    let mut report = TrainReport::default();

    for epoch in 1..=config.epochs {
        let aligned = config.mode == TrainMode::ConstStyle && epoch > config.initial_epochs;
        let phase = if aligned { TrainMode::ConstStyle } else { TrainMode::Erm };
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let lg = loss_and_grad(&net, &batch, sampler.as_ref().filter(|_| aligned), &mut style_rng, phase)?;
            loss_sum += lg.loss * batch.len() as f64;
            correct += lg.correct;
            sgd_step(&mut net, &lg.grad, &mut optim)?;
        }

        let refresh = config.is_refresh_epoch(epoch);
        let mut residual = None;
        if refresh {
            let styles = harvest_styles(&net, &dataset.samples)?;
            let (domain, model) =
                determine_unified_domain(&styles, &config.cluster_config(epoch), config.unified_method)?;
            report.refreshes.push(RefreshRecord {
                epoch,
                method: domain.method,
                iterations: domain.iterations,
                residual: domain.residual,
                converged: domain.converged,
                gmm_iterations: model.iterations_run,
                gmm_degenerate: model.degenerate,
            });
            residual = Some(domain.residual);
            sampler = Some(StyleSampler::new(&domain)?);
            unified = Some(domain);
        }
        if config.freeze_initial_style && epoch == config.initial_epochs {
            initial_style_params = Some(net.style_params().to_vec());
        }

        let record = EpochRecord {
            epoch,
            phase,
            loss: loss_sum / dataset.len() as f64,
            train_accuracy: correct as f64 / dataset.len() as f64,
            refresh,
            barycenter_residual: residual,
        };
        if !record.loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        observer(&record);
        report.epochs.push(record);
    }
    Ok(TrainedModel { net, unified, initial_style_params, report })
}

/// Logits after the partial projection towards `unified` (plain forward
/// when `unified` is `None`, which requires `alpha == 1`).
pub fn infer_logits(net: &DeskNet, unified: Option<&UnifiedDomain>, x: &crate::style::FeatureMap, alpha: f64) -> Result<Vec<f64>> {
    let params = AlignmentParams::new(alpha)?;
    let (z, mut trace) = net.forward_style(x)?;
    let z = match unified {
        Some(u) => {
            if u.channels() != z.channels() {
                return Err(Error::Shape(format!(
                    "unified domain has {} channels, style features {}",
                    u.channels(),
                    z.channels()
                )));
            }
            partial_align(&z, u.style.mean(), &params)?
        }
        None if alpha == 1.0 => z,
        None => return Err(Error::State("alpha < 1 needs a unified domain")),
    };
    net.forward_head(&z, &mut trace)
}

/// Predicted labels; no randomness is involved.
pub fn infer(net: &DeskNet, unified: Option<&UnifiedDomain>, samples: &[LabeledSample], alpha: f64) -> Result<Vec<usize>> {
    samples.iter().map(|s| infer_logits(net, unified, &s.input, alpha).map(|l| argmax(&l))).collect()
}

/// Predicted labels from the network alone, no alignment step.
pub fn plain_predictions(net: &DeskNet, samples: &[LabeledSample]) -> Result<Vec<usize>> {
    samples.iter().map(|s| net.logits(&s.input).map(|l| argmax(&l))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainEval {
    pub domain_id: usize,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Fréchet distance between this domain's style Gaussian (at `theta_s`)
    /// and the unified domain; `None` without a unified domain.
    pub frechet_to_unified: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub alpha: f64,
    pub domains: Vec<DomainEval>,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

/// Evaluates `model` on every domain of `dataset`.
pub fn evaluate(model: &TrainedModel, dataset: &SyntheticDataset, alpha: f64) -> Result<EvalReport> {
    let net = model.inference_net()?;
    evaluate_net(&net, model.unified.as_ref(), dataset, alpha)
}

pub fn evaluate_net(net: &DeskNet, unified: Option<&UnifiedDomain>, dataset: &SyntheticDataset, alpha: f64) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let k = net.architecture().n_classes;
    if dataset.n_classes > k {
        return Err(Error::Shape(format!("dataset has {} classes, model {k}", dataset.n_classes)));
    }
    let predictions = infer(net, unified, &dataset.samples, alpha)?;
    let mut confusion = vec![vec![0usize; k]; k];
    for (s, &p) in dataset.samples.iter().zip(&predictions) {
        confusion[s.class_label][p] += 1;
    }
    let mut domains = Vec::with_capacity(dataset.domain_ids.len());
    for &id in &dataset.domain_ids {
        let idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].domain_id == id).collect();
        if idx.is_empty() {
            continue;
        }
        let correct = idx.iter().filter(|&&i| predictions[i] == dataset.samples[i].class_label).count();
        let frechet = match unified {
            Some(u) => {
                let styles = harvest_styles(net, idx.iter().map(|&i| &dataset.samples[i]))?;
                Some(frechet_distance(&estimate_domain_style(&styles)?, &u.style)?)
            }
            None => None,
        };
        domains.push(DomainEval {
            domain_id: id,
            n: idx.len(),
            correct,
            accuracy: correct as f64 / idx.len() as f64,
            frechet_to_unified: frechet,
        });
    }
    let correct: usize = domains.iter().map(|d| d.correct).sum();
    let n = dataset.len();
    Ok(EvalReport { alpha, domains, n, correct, accuracy: correct as f64 / n as f64, confusion })
}

/// Trains on every domain except `holdout` and evaluates on `holdout`.
pub fn run_fold(dataset: &SyntheticDataset, holdout: usize, config: &TrainConfig) -> Result<(TrainedModel, EvalReport)> {
    if !dataset.domain_ids.contains(&holdout) {
        return Err(Error::Config(format!("domain {holdout} is not in the dataset")));
    }
    let seen = dataset.without_domain(holdout);
    if seen.is_empty() {
        return Err(Error::Config("no seen domains remain".into()));
    }
    let model = train(&seen, config)?;
    let report = evaluate(&model, &dataset.domain(holdout), config.eval_alpha())?;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaveOneOut {
    /// One report per held-out domain, in dataset domain order.
    pub folds: Vec<EvalReport>,
    /// Mean of the per-fold accuracies.
    pub average_accuracy: f64,
}

pub fn run_leave_one_out(dataset: &SyntheticDataset, config: &TrainConfig) -> Result<LeaveOneOut> {
    if dataset.domain_ids.len() < 2 {
        return Err(Error::Config("leave-one-out needs at least two domains".into()));
    }
    let folds = dataset
        .domain_ids
        .iter()
        .map(|&d| run_fold(dataset, d, config).map(|(_, r)| r))
        .collect::<Result<Vec<_>>>()?;
    let average_accuracy = folds.iter().map(|r| r.accuracy).sum::<f64>() / folds.len() as f64;
    Ok(LeaveOneOut { folds, average_accuracy })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceRow {
    pub domain_id: usize,
    pub erm_frechet: f64,
    pub erm_accuracy: f64,
    pub conststyle_frechet: f64,
    pub conststyle_accuracy: f64,
}

/// Trains an ERM and a conststyle model (same seed) on `base_domain` of
/// `train_set` and evaluates both on every domain of `test_set`. Distances
/// are measured with each model's own `theta_s` and unified domain.
pub fn distance_sweep(
    train_set: &SyntheticDataset,
    test_set: &SyntheticDataset,
    base_domain: usize,
    config: &TrainConfig,
) -> Result<Vec<DistanceRow>> {
    if test_set.domain_ids.len() < 3 {
        return Err(Error::Config("a distance sweep needs at least three shift levels".into()));
    }
    let base = train_set.domain(base_domain);
    if base.is_empty() {
        return Err(Error::Config(format!("domain {base_domain} is not in the training set")));
    }
    let erm_cfg = TrainConfig { mode: TrainMode::Erm, ..config.clone() };
    let cs_cfg = TrainConfig { mode: TrainMode::ConstStyle, ..config.clone() };
    let erm = train(&base, &erm_cfg)?;
    let cs = train(&base, &cs_cfg)?;
    let erm_eval = evaluate(&erm, test_set, erm_cfg.eval_alpha())?;
    let cs_eval = evaluate(&cs, test_set, cs_cfg.eval_alpha())?;
    erm_eval
        .domains
        .iter()
        .zip(&cs_eval.domains)
        .map(|(e, c)| {
            Ok(DistanceRow {
                domain_id: e.domain_id,
                erm_frechet: e.frechet_to_unified.ok_or(Error::State("ERM run produced no unified domain"))?,
                erm_accuracy: e.accuracy,
                conststyle_frechet: c.frechet_to_unified.ok_or(Error::State("conststyle run produced no unified domain"))?,
                conststyle_accuracy: c.accuracy,
            })
        })
        .collect()
}

/// Re-runs inference for each alpha; the model is not retrained.
pub fn alpha_sweep(model: &TrainedModel, dataset: &SyntheticDataset, alphas: &[f64]) -> Result<Vec<EvalReport>> {
    let net = model.inference_net()?;
    alphas.iter().map(|&a| evaluate_net(&net, model.unified.as_ref(), dataset, a)).collect()
}

/// Retrains the fold for each cluster count.
pub fn cluster_sweep(
    dataset: &SyntheticDataset,
    holdout: usize,
    config: &TrainConfig,
    cluster_counts: &[usize],
) -> Result<Vec<(usize, EvalReport)>> {
    cluster_counts
        .iter()
        .map(|&n| {
            let cfg = TrainConfig { n_clusters: n, ..config.clone() };
            run_fold(dataset, holdout, &cfg).map(|(_, r)| (n, r))
        })
        .collect()
}

/// Source of wall-clock readings in seconds.
pub trait Clock {
    fn now(&mut self) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRow {
    pub size: usize,
    pub seconds_per_epoch: f64,
}

/// Mean wall-clock time per epoch when training on the first `size`
/// samples of a fixed shuffle of `dataset`, for each size in ascending
/// order. Every epoch is timed, so `config.epochs` should be at least 3.
pub fn scalability_sweep<C: Clock>(
    dataset: &SyntheticDataset,
    sizes: &[usize],
    config: &TrainConfig,
    clock: &mut C,
) -> Result<Vec<ScaleRow>> {
    if sizes.is_empty() {
        return Err(Error::Config("no sizes given".into()));
    }
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    if let Some(&big) = sizes.last().filter(|&&s| s > dataset.len()) {
        return Err(Error::Config(format!("size {big} exceeds the {} available samples", dataset.len())));
    }
    if sizes[0] == 0 {
        return Err(Error::Config("sizes must be positive".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut stream(config.seed, 0x5ca1e));
    let mut rows = Vec::with_capacity(sizes.len());
    for size in sizes {
        let subset = SyntheticDataset {
            samples: order[..size].iter().map(|&i| dataset.samples[i].clone()).collect(),
            n_classes: dataset.n_classes,
            domain_ids: dataset.domain_ids.clone(),
            seed: dataset.seed,
        };
        let start = clock.now();
        train(&subset, config)?;
        let elapsed = clock.now() - start;
        rows.push(ScaleRow { size, seconds_per_epoch: elapsed / config.epochs as f64 });
    }
    Ok(rows)
}

/// Least-squares line `y = intercept + slope * x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Shape(format!("linear fit over {} x and {} y values", xs.len(), ys.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Parameter("all x values are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((my - slope * mx, slope))
}

/// Largest `|y - fit(x)| / fit(x)` over the points.
pub fn max_relative_deviation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let (a, b) = linear_fit(xs, ys)?;
    Ok(xs.iter().zip(ys).map(|(x, y)| ((y - (a + b * x)) / (a + b * x)).abs()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub domain_id: usize,
    pub d_mu: f64,
    pub d_sigma: f64,
    pub frechet: f64,
}

/// Distance terms between each domain's styles and the unified Gaussian.
pub fn bound_diagnostics(unified: &GaussianStyle, domains: &[(usize, Vec<InstanceStyle>)]) -> Result<Vec<BoundRow>> {
    domains
        .iter()
        .map(|(id, styles)| {
            let (d_mu, d_sigma) = domain_gap_terms(unified, styles)?;
            let frechet = frechet_distance(&estimate_domain_style(styles)?, unified)?;
            Ok(BoundRow { domain_id: *id, d_mu, d_sigma, frechet })
        })
        .collect()
}

/// Harvests each domain's styles with `net` and runs [`bound_diagnostics`].
pub fn diagnose(net: &DeskNet, unified: &UnifiedDomain, dataset: &SyntheticDataset) -> Result<Vec<BoundRow>> {
    let domains = dataset
        .domain_ids
        .iter()
        .map(|&id| harvest_styles(net, dataset.samples.iter().filter(|s| s.domain_id == id)).map(|s| (id, s)))
        .collect::<Result<Vec<_>>>()?;
    bound_diagnostics(&unified.style, &domains)
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// Returns `None` when either input is constant.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
