use conststyle_core::datagen::{generate_dataset, make_domain_family, LabeledSample};
use conststyle_core::net::{loss_and_grad, loss_with_pattern, sgd_step, softmax, Architecture, DeskNet, OptimState, TrainMode};
use conststyle_core::pipeline::harvest_styles;
use conststyle_core::rng::stream;
use conststyle_core::style::{estimate_domain_style, FeatureMap};
use conststyle_core::unified::{average_clusters, StyleSampler};
use rand::Rng;

const H: f64 = 1e-4;

fn batch(n_per_cell: usize, seed: u64) -> Vec<LabeledSample> {
    let fam = make_domain_family(2, &[0.0, 1.0], seed).unwrap();
    generate_dataset(&fam, 4, n_per_cell, seed).unwrap().samples
}

fn sampler_for(net: &DeskNet, samples: &[LabeledSample]) -> StyleSampler {
    let styles = harvest_styles(net, samples).unwrap();
    StyleSampler::new(&average_clusters(&[estimate_domain_style(&styles).unwrap()]).unwrap()).unwrap()
}

/// Largest relative error between analytic and central-difference
/// derivatives over `coords` random coordinates. Coordinates whose stencil
/// crosses a ReLU kink are replaced by fresh draws.
fn gradient_check(mode: TrainMode, coords: usize, seed: u64) -> f64 {
    let samples = batch(1, seed);
    let refs: Vec<&LabeledSample> = samples.iter().take(4).collect();
    let net = DeskNet::new(Architecture::desk(4), seed).unwrap();
    let sampler = sampler_for(&net, &samples);
    let sampler = (mode == TrainMode::ConstStyle).then_some(&sampler);
    let style_rng = stream(seed, 2);
    let analytic = loss_and_grad(&net, &refs, sampler, &mut style_rng.clone(), mode).unwrap();
    let (_, base_pattern) = loss_with_pattern(&net, &refs, sampler, &mut style_rng.clone(), mode).unwrap();
    let mut pick = stream(seed, 3);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < coords {
        let i = pick.random_range(0..net.n_params());
        let eval = |delta: f64| {
            let mut p = net.clone();
            p.params_mut()[i] += delta;
            loss_with_pattern(&p, &refs, sampler, &mut style_rng.clone(), mode).unwrap()
        };
        let (plus, pp) = eval(H);
        let (minus, pm) = eval(-H);
        if pp != base_pattern || pm != base_pattern {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * H);
        let a = analytic.grad[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        checked += 1;
    }
    worst
}

#[test]
fn gradients_match_finite_differences_erm() {
    let err = gradient_check(TrainMode::Erm, 1000, 1);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn gradients_match_finite_differences_conststyle() {
    let err = gradient_check(TrainMode::ConstStyle, 1000, 2);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn pooling_ignores_trunk_pixel_order() {
    let net = DeskNet::new(Architecture::desk(4), 5).unwrap();
    let x = &batch(1, 5)[3].input;
    let (z, mut trace) = net.forward_style(x).unwrap();
    let logits = net.forward_head(&z, &mut trace).unwrap();
    let trunk = net.trunk_features(&z).unwrap();
    assert_eq!(net.classify_trunk(&trunk).unwrap(), logits);
    let mut rng = stream(5, 1);
    let p = trunk.plane();
    let mut perm: Vec<usize> = (0..p).collect();
    for i in (1..p).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut shuffled = Vec::with_capacity(trunk.as_slice().len());
    for c in 0..trunk.channels() {
        shuffled.extend(perm.iter().map(|&j| trunk.channel(c)[j]));
    }
    let shuffled = FeatureMap::new(trunk.channels(), trunk.height(), trunk.width(), shuffled).unwrap();
    for (a, b) in net.classify_trunk(&shuffled).unwrap().iter().zip(&logits) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn forward_is_pure() {
    let net = DeskNet::new(Architecture::desk(4), 6).unwrap();
    let x = &batch(1, 6)[0].input;
    let a = net.logits(x).unwrap();
    assert_eq!(a, net.logits(x).unwrap());
    assert!((softmax(&a).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(net.forward_style(x).unwrap().0.shape(), [8, 14, 14]);
}

#[test]
fn eight_sample_batch_overfits() {
    let samples = batch(1, 7);
    let refs: Vec<&LabeledSample> = samples.iter().take(8).collect();
    let mut net = DeskNet::new(Architecture::desk(4), 7).unwrap();
    let mut optim = OptimState::new(0.05, 0.0).unwrap();
    let mut rng = stream(7, 2);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let lg = loss_and_grad(&net, &refs, None, &mut rng, TrainMode::Erm).unwrap();
        losses.push(lg.loss);
        sgd_step(&mut net, &lg.grad, &mut optim).unwrap();
        assert!(net.params().iter().all(|v| v.is_finite()));
    }
    assert!(losses[49] < losses[0], "{} -> {}", losses[0], losses[49]);
}

#[test]
fn conststyle_needs_a_sampler() {
    let samples = batch(1, 8);
    let refs: Vec<&LabeledSample> = samples.iter().take(2).collect();
    let net = DeskNet::new(Architecture::desk(4), 8).unwrap();
    let err = loss_and_grad(&net, &refs, None, &mut stream(8, 2), TrainMode::ConstStyle).unwrap_err();
    assert!(matches!(err, conststyle_core::Error::State(_)));
}
