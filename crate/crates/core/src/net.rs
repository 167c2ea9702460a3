//! DeskNet: a three-stage convolutional classifier with hand-written
//! backpropagation.
//!
//! | stage     | op                                   | output (16x16 input) |
//! |-----------|--------------------------------------|----------------------|
//! | `theta_s` | conv 3x3, 3 -> 8, valid, ReLU        | 8 x 14 x 14          |
//! | `theta_f` | conv 3x3, 8 -> 16, valid, ReLU, GAP  | 16                   |
//! | `zeta`    | linear 16 -> K                       | K logits             |
//!
//! The style statistics are taken from the `theta_s` output; alignment, when
//! enabled, sits between `theta_s` and `theta_f`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;
use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::align::{align_backward, align_forward, AlignCache};
use crate::datagen::LabeledSample;
use crate::style::{FeatureMap, SIGMA_FLOOR};
use crate::unified::StyleSampler;
use crate::{Error, Result};

const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub style_channels: usize,
    pub trunk_channels: usize,
    pub n_classes: usize,
}

impl Architecture {
    pub fn desk(n_classes: usize) -> Self {
        Self { in_channels: 3, height: 16, width: 16, style_channels: 8, trunk_channels: 16, n_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 * KERNEL - 1 || self.width < 2 * KERNEL - 1 {
            return Err(Error::Config(format!("input {}x{} too small for two valid 3x3 convolutions", self.height, self.width)));
        }
        if [self.in_channels, self.style_channels, self.trunk_channels].contains(&0) || self.n_classes < 2 {
            return Err(Error::Config("layer widths must be positive and n_classes >= 2".into()));
        }
        Ok(())
    }

    /// Shape of the `theta_s` output.
    pub fn style_shape(&self) -> [usize; 3] {
        [self.style_channels, self.height - KERNEL + 1, self.width - KERNEL + 1]
    }

    fn trunk_hw(&self) -> (usize, usize) {
        (self.height - 2 * (KERNEL - 1), self.width - 2 * (KERNEL - 1))
    }

    fn layout(&self) -> Layout {
        let k2 = KERNEL * KERNEL;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let w1 = take(self.style_channels * self.in_channels * k2);
        let b1 = take(self.style_channels);
        let w2 = take(self.trunk_channels * self.style_channels * k2);
        let b2 = take(self.trunk_channels);
        let w3 = take(self.n_classes * self.trunk_channels);
        let b3 = take(self.n_classes);
        Layout { w1, b1, w2, b2, w3, b3, total: at }
    }

    pub fn n_params(&self) -> usize {
        self.layout().total
    }

    /// Parameter index range belonging to `theta_s`.
    pub fn style_param_range(&self) -> Range<usize> {
        let l = self.layout();
        l.w1.start..l.b1.end
    }
}

#[derive(Debug, Clone)]
struct Layout {
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    w3: Range<usize>,
    b3: Range<usize>,
    total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainMode {
    Erm,
    #[default]
    ConstStyle,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Erm => "erm",
            TrainMode::ConstStyle => "conststyle",
        }
    }
}

impl core::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(TrainMode::Erm),
            "conststyle" => Ok(TrainMode::ConstStyle),
            other => Err(Error::Parameter(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeskNet {
    arch: Architecture,
    params: Vec<f64>,
}

/// Activations cached by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    input: Option<FeatureMap>,
    /// `theta_s` pre-activation
    style_pre: Vec<f64>,
    /// `theta_s` output before alignment
    style_out: Option<FeatureMap>,
    align: Option<AlignCache>,
    /// input to `theta_f` (after alignment, if any)
    head_in: Option<FeatureMap>,
    trunk_pre: Vec<f64>,
    pooled: Vec<f64>,
}

impl ForwardTrace {
    pub fn style_features(&self) -> Option<&FeatureMap> {
        self.style_out.as_ref()
    }

    pub fn aligned_features(&self) -> Option<&FeatureMap> {
        self.align.as_ref().and(self.head_in.as_ref())
    }

    /// ReLU on/off pattern of both convolution stages.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.style_pre.iter().chain(&self.trunk_pre).map(|&v| v > 0.0).collect()
    }
}

/// Mean cross-entropy over a batch and its parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Samples whose argmax logit matched the label.
    pub correct: usize,
}

impl DeskNet {
    /// He-normal convolution weights, scaled normal head weights, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let l = arch.layout();
        let mut params = vec![0.0; l.total];
        let mut rng = crate::rng::stream(seed, 0x1417);
        let k2 = (KERNEL * KERNEL) as f64;
        let fill = |slice: &mut [f64], std: f64, rng: &mut crate::rng::Rng| {
            let d = Normal::new(0.0, std).expect("positive std");
            slice.iter_mut().for_each(|p| *p = d.sample(rng));
        };
        fill(&mut params[l.w1.clone()], (2.0 / (arch.in_channels as f64 * k2)).sqrt(), &mut rng);
        fill(&mut params[l.w2.clone()], (2.0 / (arch.style_channels as f64 * k2)).sqrt(), &mut rng);
        fill(&mut params[l.w3.clone()], (1.0 / arch.trunk_channels as f64).sqrt(), &mut rng);
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch, params: vec![0.0; arch.n_params()] })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.n_params() {
            return Err(Error::Shape(format!("{} parameters for an architecture with {}", params.len(), arch.n_params())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn style_params(&self) -> &[f64] {
        &self.params[self.arch.style_param_range()]
    }

    /// Copy of `self` whose `theta_s` weights come from `other`.
    pub fn with_style_params(&self, style: &[f64]) -> Result<Self> {
        let range = self.arch.style_param_range();
        if style.len() != range.len() {
            return Err(Error::Shape(format!("{} style parameters, expected {}", style.len(), range.len())));
        }
        let mut out = self.clone();
        out.params[range].copy_from_slice(style);
        Ok(out)
    }

    /// `theta_s`: returns the style feature map and a trace holding the input.
    pub fn forward_style(&self, x: &FeatureMap) -> Result<(FeatureMap, ForwardTrace)> {
        let a = &self.arch;
        if x.shape() != [a.in_channels, a.height, a.width] {
            return Err(Error::Shape(format!(
                "input {:?}, expected {:?}",
                x.shape(),
                [a.in_channels, a.height, a.width]
            )));
        }
        let l = a.layout();
        let [sc, oh, ow] = a.style_shape();
        let mut pre = vec![0.0; sc * oh * ow];
        conv_forward(x.as_slice(), a.in_channels, a.height, a.width, &self.params[l.w1], &self.params[l.b1], sc, &mut pre);
        let out: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let z = FeatureMap::from_raw(sc, oh, ow, out);
        let trace = ForwardTrace { input: Some(x.clone()), style_pre: pre, style_out: Some(z.clone()), ..Default::default() };
        Ok((z, trace))
    }

    /// `zeta(theta_f(z))`; records the head activations into `trace`.
    pub fn forward_head(&self, z: &FeatureMap, trace: &mut ForwardTrace) -> Result<Vec<f64>> {
        let a = &self.arch;
        if z.shape() != a.style_shape() {
            return Err(Error::Shape(format!("style features {:?}, expected {:?}", z.shape(), a.style_shape())));
        }
        let l = a.layout();
        let [sc, sh, sw] = a.style_shape();
        let (th, tw) = a.trunk_hw();
        let tc = a.trunk_channels;
        let mut pre = vec![0.0; tc * th * tw];
        conv_forward(z.as_slice(), sc, sh, sw, &self.params[l.w2.clone()], &self.params[l.b2.clone()], tc, &mut pre);
        let plane = th * tw;
        let pooled: Vec<f64> = (0..tc)
            .map(|c| pre[c * plane..(c + 1) * plane].iter().map(|v| v.max(0.0)).sum::<f64>() / plane as f64)
            .collect();
        let logits = self.classify_pooled(&pooled);
        trace.head_in = Some(z.clone());
        trace.trunk_pre = pre;
        trace.pooled = pooled;
        Ok(logits)
    }

    /// `theta_f` output (after ReLU, before pooling).
    pub fn trunk_features(&self, z: &FeatureMap) -> Result<FeatureMap> {
        let mut trace = ForwardTrace::default();
        self.forward_head(z, &mut trace)?;
        let (th, tw) = self.arch.trunk_hw();
        let relu = trace.trunk_pre.iter().map(|v| v.max(0.0)).collect();
        Ok(FeatureMap::from_raw(self.arch.trunk_channels, th, tw, relu))
    }

    /// `zeta` applied to the global average pool of a trunk feature map.
    pub fn classify_trunk(&self, trunk: &FeatureMap) -> Result<Vec<f64>> {
        if trunk.channels() != self.arch.trunk_channels {
            return Err(Error::Shape(format!(
                "trunk map with {} channels, expected {}",
                trunk.channels(),
                self.arch.trunk_channels
            )));
        }
        let n = trunk.plane() as f64;
        let pooled: Vec<f64> = (0..trunk.channels()).map(|c| trunk.channel(c).iter().sum::<f64>() / n).collect();
        Ok(self.classify_pooled(&pooled))
    }

    fn classify_pooled(&self, pooled: &[f64]) -> Vec<f64> {
        let l = self.arch.layout();
        let tc = self.arch.trunk_channels;
        let w3 = &self.params[l.w3];
        let b3 = &self.params[l.b3];
        (0..self.arch.n_classes)
            .map(|k| b3[k] + w3[k * tc..(k + 1) * tc].iter().zip(pooled).map(|(w, p)| w * p).sum::<f64>())
            .collect()
    }

    /// Logits of a plain forward pass.
    pub fn logits(&self, x: &FeatureMap) -> Result<Vec<f64>> {
        let (z, mut trace) = self.forward_style(x)?;
        self.forward_head(&z, &mut trace)
    }

    /// Forward pass for one sample, optionally re-styled to `(mu_s, sigma_s)`.
    fn forward_sample(&self, x: &FeatureMap, target: Option<(&[f64], &[f64])>) -> Result<(Vec<f64>, ForwardTrace)> {
        let (z, mut trace) = self.forward_style(x)?;
        let logits = match target {
            None => self.forward_head(&z, &mut trace)?,
            Some((mu_s, sigma_s)) => {
                let (aligned, cache) = align_forward(&z, mu_s, sigma_s, SIGMA_FLOOR);
                trace.align = Some(cache);
                self.forward_head(&aligned, &mut trace)?
            }
        };
        Ok((logits, trace))
    }

    /// Adds `scale * dLoss/dparams` for one sample into `grad`.
    fn backward(&self, trace: &ForwardTrace, dlogits: &[f64], scale: f64, grad: &mut [f64]) {
        let a = &self.arch;
        let l = a.layout();
        let tc = a.trunk_channels;
        let [sc, sh, sw] = a.style_shape();
        let (th, tw) = a.trunk_hw();
        let plane = th * tw;

        // zeta
        let mut dpooled = vec![0.0; tc];
        {
            let w3 = &self.params[l.w3.clone()];
            for (k, &g) in dlogits.iter().enumerate() {
                let g = g * scale;
                grad[l.b3.start + k] += g;
                for c in 0..tc {
                    grad[l.w3.start + k * tc + c] += g * trace.pooled[c];
                    dpooled[c] += g * w3[k * tc + c];
                }
            }
        }
        // GAP + ReLU
        let mut dpre2 = vec![0.0; tc * plane];
        for c in 0..tc {
            let g = dpooled[c] / plane as f64;
            for i in c * plane..(c + 1) * plane {
                if trace.trunk_pre[i] > 0.0 {
                    dpre2[i] = g;
                }
            }
        }
        // theta_f conv
        let head_in = trace.head_in.as_ref().expect("forward_head ran");
        let mut dhead = vec![0.0; sc * sh * sw];
        {
            let (gw, rest) = grad[l.w2.start..].split_at_mut(l.w2.len());
            let gb = &mut rest[..l.b2.len()];
            conv_backward(head_in.as_slice(), sc, sh, sw, &self.params[l.w2.clone()], tc, &dpre2, gw, gb, Some(&mut dhead));
        }
        // alignment
        let dstyle = match &trace.align {
            Some(cache) => align_backward(cache, &dhead, sh * sw),
            None => dhead,
        };
        // theta_s ReLU + conv
        let dpre1: Vec<f64> = dstyle
            .iter()
            .zip(&trace.style_pre)
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect();
        let input = trace.input.as_ref().expect("forward_style ran");
        let (gw, rest) = grad[l.w1.start..].split_at_mut(l.w1.len());
        let gb = &mut rest[..l.b1.len()];
        conv_backward(input.as_slice(), a.in_channels, a.height, a.width, &self.params[l.w1], sc, &dpre1, gw, gb, None);
    }
}

/// Valid 3x3 convolution, `out` is `oc x (h-2) x (w-2)` and overwritten.
#[allow(clippy::too_many_arguments)]
fn conv_forward(input: &[f64], ic: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], oc: usize, out: &mut [f64]) {
    let oh = h - KERNEL + 1;
    let ow = w - KERNEL + 1;
    let plane = oh * ow;
    for o in 0..oc {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(bias[o]);
        for i in 0..ic {
            let src = &input[i * h * w..(i + 1) * h * w];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let wv = weight[((o * ic + i) * KERNEL + ky) * KERNEL + kx];
                    for y in 0..oh {
                        let row = &src[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                        for (d, s) in dst[y * ow..(y + 1) * ow].iter_mut().zip(row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and, if requested, the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    ic: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    oc: usize,
    dout: &[f64],
    gweight: &mut [f64],
    gbias: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let oh = h - KERNEL + 1;
    let ow = w - KERNEL + 1;
    let plane = oh * ow;
    for o in 0..oc {
        let g = &dout[o * plane..(o + 1) * plane];
        gbias[o] += g.iter().sum::<f64>();
        for i in 0..ic {
            let src = &input[i * h * w..(i + 1) * h * w];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let widx = ((o * ic + i) * KERNEL + ky) * KERNEL + kx;
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let row = &src[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                        for (gv, s) in g[y * ow..(y + 1) * ow].iter().zip(row) {
                            acc += gv * s;
                        }
                    }
                    gweight[widx] += acc;
                    if let Some(dx) = dinput.as_deref_mut() {
                        let wv = weight[widx];
                        let dst = &mut dx[i * h * w..(i + 1) * h * w];
                        for y in 0..oh {
                            let row = &mut dst[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                            for (d, gv) in row.iter_mut().zip(&g[y * ow..(y + 1) * ow]) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -p[label].max(f64::MIN_POSITIVE).ln();
    let mut d = p;
    d[label] -= 1.0;
    (loss, d)
}

fn style_targets<R: RngCore + ?Sized>(
    batch_len: usize,
    mode: TrainMode,
    sampler: Option<&StyleSampler>,
    rng: &mut R,
) -> Result<Vec<Option<(Vec<f64>, Vec<f64>)>>> {
    match mode {
        TrainMode::Erm => Ok(vec![None; batch_len]),
        TrainMode::ConstStyle => {
            let sampler = sampler.ok_or(Error::State("conststyle mode needs a unified domain"))?;
            Ok((0..batch_len).map(|_| Some(sampler.sample(rng))).collect())
        }
    }
}

/// Mean cross-entropy of `batch` and its gradient over every parameter.
/// In conststyle mode one style is drawn per sample (in batch order) and the
/// `theta_s` output is re-styled before `theta_f`.
pub fn loss_and_grad<R: RngCore + ?Sized>(
    net: &DeskNet,
    batch: &[&LabeledSample],
    sampler: Option<&StyleSampler>,
    rng: &mut R,
    mode: TrainMode,
) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let targets = style_targets(batch.len(), mode, sampler, rng)?;
    if let Some(s) = sampler.filter(|_| mode == TrainMode::ConstStyle) {
        if s.channels() != net.arch.style_channels {
            return Err(Error::Shape(format!(
                "unified domain has {} channels, style layer {}",
                s.channels(),
                net.arch.style_channels
            )));
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; net.n_params()];
    let mut loss = 0.0;
    let mut correct = 0;
    for (sample, target) in batch.iter().zip(&targets) {
        check_label(net, sample)?;
        let t = target.as_ref().map(|(m, s)| (m.as_slice(), s.as_slice()));
        let (logits, trace) = net.forward_sample(&sample.input, t)?;
        if argmax(&logits) == sample.class_label {
            correct += 1;
        }
        let (l, dlogits) = cross_entropy(&logits, sample.class_label);
        loss += l;
        net.backward(&trace, &dlogits, scale, &mut grad);
    }
    Ok(LossGrad { loss: loss * scale, grad, correct })
}

/// Loss plus the concatenated ReLU patterns of every sample, drawing styles
/// exactly like [`loss_and_grad`]. Used to detect kinks inside a
/// finite-difference stencil.
pub fn loss_with_pattern<R: RngCore + ?Sized>(
    net: &DeskNet,
    batch: &[&LabeledSample],
    sampler: Option<&StyleSampler>,
    rng: &mut R,
    mode: TrainMode,
) -> Result<(f64, Vec<bool>)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let targets = style_targets(batch.len(), mode, sampler, rng)?;
    let mut loss = 0.0;
    let mut pattern = Vec::new();
    for (sample, target) in batch.iter().zip(&targets) {
        check_label(net, sample)?;
        let t = target.as_ref().map(|(m, s)| (m.as_slice(), s.as_slice()));
        let (logits, trace) = net.forward_sample(&sample.input, t)?;
        loss += cross_entropy(&logits, sample.class_label).0;
        pattern.extend(trace.activation_pattern());
    }
    Ok((loss / batch.len() as f64, pattern))
}

fn check_label(net: &DeskNet, sample: &LabeledSample) -> Result<()> {
    if sample.class_label >= net.arch.n_classes {
        return Err(Error::Shape(format!("label {} for {} classes", sample.class_label, net.arch.n_classes)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl OptimState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(momentum >= 0.0) || momentum >= 1.0 {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self { learning_rate, momentum, velocity: Vec::new() })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

/// `v <- momentum * v + g; params <- params - lr * v`.
pub fn sgd_step(net: &mut DeskNet, gradient: &[f64], optim: &mut OptimState) -> Result<()> {
    if gradient.len() != net.n_params() {
        return Err(Error::Shape(format!("gradient of length {} for {} parameters", gradient.len(), net.n_params())));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    if optim.velocity.len() != gradient.len() {
        optim.velocity = vec![0.0; gradient.len()];
    }
    for ((p, v), g) in net.params.iter_mut().zip(optim.velocity.iter_mut()).zip(gradient) {
        *v = optim.momentum * *v + g;
        *p -= optim.learning_rate * *v;
    }
    if net.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("parameters after update"));
    }
    Ok(())
}
