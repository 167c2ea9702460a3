//! Procedural multi-domain image data.
//!
//! Classes are fixed geometric patterns drawn with per-sample jitter; a
//! domain is a style transform on top of them: channel rotation, per-channel
//! gain and bias, then additive Gaussian noise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::{derive_seed, stream};
use crate::style::FeatureMap;
use crate::{Error, Result};

pub const N_TEMPLATES: usize = 8;
pub const IMAGE_CHANNELS: usize = 3;
pub const DEFAULT_SIDE: usize = 16;

/// Per-channel rendering of the pattern intensity `p` in `[0, 1]`.
const CHANNEL_GAIN: [f64; IMAGE_CHANNELS] = [1.0, 0.8, -0.6];
const CHANNEL_BASE: [f64; IMAGE_CHANNELS] = [0.0, 0.1, 0.8];
/// Pixel noise present even in the canonical domain.
const CONTENT_NOISE: f64 = 0.05;
const MAX_SHIFT: i64 = 2;
/// Per-sample, per-channel contrast (log-gain) and brightness jitter.
const SAMPLE_LOG_GAIN_STD: f64 = 0.05;
const SAMPLE_BIAS_STD: f64 = 0.05;

/// Shift magnitudes per unit of shift level. Each style parameter gets a
/// random sign and a magnitude drawn from its range, shared by the family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyParams {
    pub log_gain: (f64, f64),
    pub bias: (f64, f64),
    /// Channel rotation angle range, radians.
    pub angle: (f64, f64),
    pub noise: f64,
    /// All domains shift along one direction; otherwise each domain draws
    /// its own signs.
    pub shared_direction: bool,
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self { log_gain: (0.5, 0.8), bias: (0.6, 1.0), angle: (0.05, 0.1), noise: 0.05, shared_direction: false }
    }
}

impl FamilyParams {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("log_gain", self.log_gain), ("bias", self.bias), ("angle", self.angle)] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("{name} range must satisfy 0 <= lo <= hi, got ({lo}, {hi})")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and nonnegative, got {}", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub channel_gain: [f64; IMAGE_CHANNELS],
    pub channel_bias: [f64; IMAGE_CHANNELS],
    /// Rotation angle applied to channel pairs (0,1) then (1,2).
    pub channel_mix_angle: f64,
    pub noise_sigma: f64,
    pub shift_level: f64,
}

impl DomainSpec {
    pub fn identity(domain_id: usize) -> Self {
        Self {
            domain_id,
            channel_gain: [1.0; IMAGE_CHANNELS],
            channel_bias: [0.0; IMAGE_CHANNELS],
            channel_mix_angle: 0.0,
            noise_sigma: 0.0,
            shift_level: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_gain.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Config(format!("domain {}: gains must be positive", self.domain_id)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("domain {}: noise_sigma must be nonnegative", self.domain_id)));
        }
        if self.channel_bias.iter().chain([&self.channel_mix_angle]).any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("domain {}: non-finite parameters", self.domain_id)));
        }
        Ok(())
    }

    /// Style transform of one clean image, without noise.
    pub fn apply_affine(&self, image: &FeatureMap) -> FeatureMap {
        let p = image.plane();
        let (s, c) = self.channel_mix_angle.sin_cos();
        let src = image.as_slice();
        let mut out = vec![0.0; src.len()];
        for i in 0..p {
            let x0 = src[i];
            let x1 = src[p + i];
            let x2 = src[2 * p + i];
            // rotate (0,1), then (1,2)
            let y0 = c * x0 - s * x1;
            let t1 = s * x0 + c * x1;
            let y1 = c * t1 - s * x2;
            let y2 = s * t1 + c * x2;
            out[i] = self.channel_gain[0] * y0 + self.channel_bias[0];
            out[p + i] = self.channel_gain[1] * y1 + self.channel_bias[1];
            out[2 * p + i] = self.channel_gain[2] * y2 + self.channel_bias[2];
        }
        FeatureMap::from_raw(IMAGE_CHANNELS, image.height(), image.width(), out)
    }
}

/// Domains along one shared shift direction; domain `k` sits at
/// `shift_levels[k]` units from the canonical (identity) domain.
pub fn make_domain_family(n_domains: usize, shift_levels: &[f64], seed: u64) -> Result<Vec<DomainSpec>> {
    make_domain_family_with(n_domains, shift_levels, seed, &FamilyParams::default())
}

pub fn make_domain_family_with(
    n_domains: usize,
    shift_levels: &[f64],
    seed: u64,
    params: &FamilyParams,
) -> Result<Vec<DomainSpec>> {
    params.validate()?;
    if shift_levels.len() != n_domains {
        return Err(Error::Config(format!(
            "{n_domains} domains but {} shift levels",
            shift_levels.len()
        )));
    }
    if let Some(l) = shift_levels.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(Error::Config(format!("shift levels must be finite and nonnegative, got {l}")));
    }
    let mut rng = stream(seed, 0xd0);
    let mut magnitude = |(lo, hi): (f64, f64)| if lo < hi { rng.random_range(lo..hi) } else { lo };
    let gain_mag: [f64; IMAGE_CHANNELS] = core::array::from_fn(|_| magnitude(params.log_gain));
    let bias_mag: [f64; IMAGE_CHANNELS] = core::array::from_fn(|_| magnitude(params.bias));
    let angle_mag = magnitude(params.angle);
    let n_signs = 2 * IMAGE_CHANNELS + 1;
    let shared: Vec<f64> = (0..n_signs).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Ok(shift_levels
        .iter()
        .enumerate()
        .map(|(k, &level)| {
            let signs: Vec<f64> = if params.shared_direction {
                shared.clone()
            } else {
                let mut r = stream(derive_seed(seed, k as u64), 0xd1);
                (0..n_signs).map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
            };
            DomainSpec {
                domain_id: k,
                channel_gain: core::array::from_fn(|c| (signs[c] * gain_mag[c] * level).exp()),
                channel_bias: core::array::from_fn(|c| signs[IMAGE_CHANNELS + c] * bias_mag[c] * level),
                channel_mix_angle: signs[2 * IMAGE_CHANNELS] * angle_mag * level,
                noise_sigma: params.noise * level,
                shift_level: level,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub input: FeatureMap,
    pub class_label: usize,
    pub domain_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub samples: Vec<LabeledSample>,
    pub n_classes: usize,
    pub domain_ids: Vec<usize>,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples whose domain satisfies `keep`, in original order.
    pub fn filter_domains(&self, keep: impl Fn(usize) -> bool) -> SyntheticDataset {
        SyntheticDataset {
            samples: self.samples.iter().filter(|s| keep(s.domain_id)).cloned().collect(),
            n_classes: self.n_classes,
            domain_ids: self.domain_ids.iter().copied().filter(|&d| keep(d)).collect(),
            seed: self.seed,
        }
    }

    pub fn domain(&self, domain_id: usize) -> SyntheticDataset {
        self.filter_domains(|d| d == domain_id)
    }

    pub fn without_domain(&self, domain_id: usize) -> SyntheticDataset {
        self.filter_domains(|d| d != domain_id)
    }

    /// Sample counts per `(domain index, class)` cell, domain-major.
    pub fn cell_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.domain_ids.len() * self.n_classes];
        for s in &self.samples {
            if let Some(d) = self.domain_ids.iter().position(|&id| id == s.domain_id) {
                counts[d * self.n_classes + s.class_label] += 1;
            }
        }
        counts
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.samples.first().map(|s| s.input.shape())
    }
}

/// Clean (canonical-domain, noise-free) rendering of template `class`
/// translated by `(dy, dx)` with intensity scale `amp`.
pub fn render_template(class: usize, side: usize, dy: i64, dx: i64, amp: f64) -> FeatureMap {
    let p = side * side;
    let mut data = vec![0.0; IMAGE_CHANNELS * p];
    let s = side as f64;
    for y in 0..side {
        for x in 0..side {
            let yy = y as i64 - dy;
            let xx = x as i64 - dx;
            let v = amp * pattern(class, yy, xx, s);
            for c in 0..IMAGE_CHANNELS {
                data[c * p + y * side + x] = CHANNEL_GAIN[c] * v + CHANNEL_BASE[c];
            }
        }
    }
    FeatureMap::from_raw(IMAGE_CHANNELS, side, side, data)
}

fn pattern(class: usize, y: i64, x: i64, side: f64) -> f64 {
    let fy = y as f64 + 0.5;
    let fx = x as f64 + 0.5;
    let cy = fy - side / 2.0;
    let cx = fx - side / 2.0;
    let r = (cy * cy + cx * cx).sqrt();
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    match class {
        0 => on(y.rem_euclid(4) < 2),                          // horizontal bars
        1 => on(x.rem_euclid(4) < 2),                          // vertical bars
        2 => on((y.div_euclid(3) + x.div_euclid(3)) % 2 == 0), // checker
        3 => on(r < side * 0.3),                               // disk
        4 => on((x + y).rem_euclid(6) < 3),                    // diagonal stripes
        5 => on((r - side * 0.3).abs() < 1.5),                 // ring
        6 => on(cy.abs() < 1.5 || cx.abs() < 1.5),             // cross
        _ => {
            // radial sectors
            let a = cy.atan2(cx) + PI;
            on(((a / (PI / 3.0)) as i64) % 2 == 0)
        }
    }
}

/// `per_class_per_domain` samples of each of `n_classes` templates in every
/// domain, `3 x 16 x 16` each.
pub fn generate_dataset(
    domains: &[DomainSpec],
    n_classes: usize,
    per_class_per_domain: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    generate_dataset_sized(domains, n_classes, per_class_per_domain, DEFAULT_SIDE, seed)
}

pub fn generate_dataset_sized(
    domains: &[DomainSpec],
    n_classes: usize,
    per_class_per_domain: usize,
    side: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if n_classes < 2 {
        return Err(Error::Config("at least two classes are required".into()));
    }
    if n_classes > N_TEMPLATES {
        return Err(Error::Config(format!("{n_classes} classes requested, only {N_TEMPLATES} templates exist")));
    }
    if per_class_per_domain == 0 {
        return Err(Error::Config("per-class-per-domain count must be at least 1".into()));
    }
    if domains.is_empty() {
        return Err(Error::Config("no domains given".into()));
    }
    if side < 4 {
        return Err(Error::Config("images must be at least 4 pixels wide".into()));
    }
    for (i, d) in domains.iter().enumerate() {
        d.validate()?;
        if domains[..i].iter().any(|o| o.domain_id == d.domain_id) {
            return Err(Error::Config(format!("duplicate domain id {}", d.domain_id)));
        }
    }
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::with_capacity(domains.len() * n_classes * per_class_per_domain);
    for spec in domains {
        let mut rng = stream(derive_seed(seed, spec.domain_id as u64), 1);
        for class in 0..n_classes {
            for _ in 0..per_class_per_domain {
                let dy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
                let dx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
                let amp = rng.random_range(0.8..1.2);
                let mut clean = render_template(class, side, dy, dx, amp);
                for v in clean.as_mut_slice() {
                    *v += CONTENT_NOISE * unit.sample(&mut rng);
                }
                for c in 0..IMAGE_CHANNELS {
                    let gain = (SAMPLE_LOG_GAIN_STD * unit.sample(&mut rng)).exp();
                    let bias = SAMPLE_BIAS_STD * unit.sample(&mut rng);
                    clean.channel_mut(c).iter_mut().for_each(|v| *v = gain * *v + bias);
                }
                let mut image = spec.apply_affine(&clean);
                if spec.noise_sigma > 0.0 {
                    for v in image.as_mut_slice() {
                        *v += spec.noise_sigma * unit.sample(&mut rng);
                    }
                }
                samples.push(LabeledSample { input: image, class_label: class, domain_id: spec.domain_id });
            }
        }
    }
    Ok(SyntheticDataset {
        samples,
        n_classes,
        domain_ids: domains.iter().map(|d| d.domain_id).collect(),
        seed,
    })
}
