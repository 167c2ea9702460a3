use conststyle_core::align::{align_to_style, partial_align, AlignmentParams};
use conststyle_core::numerics::{min_eigenvalue, SymMatrix};
use conststyle_core::rng::stream;
use conststyle_core::style::{compute_instance_style, estimate_domain_style, frechet_distance, FeatureMap, GaussianStyle, InstanceStyle};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn map_strategy() -> impl Strategy<Value = FeatureMap> {
    (1usize..5, 2usize..6, 2usize..6).prop_flat_map(|(c, h, w)| {
        (proptest::collection::vec(-3.0f64..3.0, c * h * w), 0.1f64..3.0)
            .prop_map(move |(v, scale)| FeatureMap::new(c, h, w, v.into_iter().map(|x| x * scale).collect()).unwrap())
    })
}

fn target_strategy(c: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (proptest::collection::vec(-5.0f64..5.0, c), proptest::collection::vec(0.1f64..5.0, c))
}

fn permute_pixels(z: &FeatureMap, perm: &[usize]) -> FeatureMap {
    let p = z.plane();
    let mut out = Vec::with_capacity(z.as_slice().len());
    for c in 0..z.channels() {
        let ch = z.channel(c);
        out.extend(perm.iter().map(|&i| ch[i]));
    }
    let _ = p;
    FeatureMap::new(z.channels(), z.height(), z.width(), out).unwrap()
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream(seed, 0);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    perm
}

/// Channels with at least two distinct values, so sigma is well above the floor.
fn spread(z: &FeatureMap) -> bool {
    compute_instance_style(z).sigma().iter().all(|&s| s > 1e-3)
}

proptest! {
    #[test]
    fn style_ignores_pixel_order(z in map_strategy(), seed in any::<u64>()) {
        let a = compute_instance_style(&z);
        let b = compute_instance_style(&permute_pixels(&z, &shuffled(z.plane(), seed)));
        for (x, y) in a.epsilon().iter().zip(b.epsilon()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_response(z in map_strategy(), a in 0.1f64..4.0, b in -3.0f64..3.0) {
        let shifted = FeatureMap::new(z.channels(), z.height(), z.width(), z.as_slice().iter().map(|v| a * v + b).collect()).unwrap();
        let s0 = compute_instance_style(&z);
        let s1 = compute_instance_style(&shifted);
        for c in 0..z.channels() {
            prop_assert!((s1.mu()[c] - (a * s0.mu()[c] + b)).abs() < 1e-9);
            prop_assert!((s1.sigma()[c] - a * s0.sigma()[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn epsilon_layout(z in map_strategy()) {
        let s = compute_instance_style(&z);
        let c = z.channels();
        prop_assert_eq!(&s.epsilon()[..c], s.mu());
        prop_assert_eq!(&s.epsilon()[c..], s.sigma());
        prop_assert!(s.sigma().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn aligned_map_carries_the_target_style((z, t) in map_strategy().prop_flat_map(|z| { let c = z.channels(); (Just(z), target_strategy(c)) })) {
        prop_assume!(spread(&z));
        let out = align_to_style(&z, &t.0, &t.1).unwrap();
        let s = compute_instance_style(&out);
        for c in 0..z.channels() {
            prop_assert!((s.mu()[c] - t.0[c]).abs() < 1e-5);
            prop_assert!((s.sigma()[c] - t.1[c]).abs() < 1e-5);
        }
    }

    #[test]
    fn alignment_is_idempotent((z, t) in map_strategy().prop_flat_map(|z| { let c = z.channels(); (Just(z), target_strategy(c)) })) {
        prop_assume!(spread(&z));
        let once = align_to_style(&z, &t.0, &t.1).unwrap();
        let twice = align_to_style(&once, &t.0, &t.1).unwrap();
        for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn alignment_commutes_with_pixel_permutation((z, t, alpha) in map_strategy().prop_flat_map(|z| { let c = z.channels(); (Just(z), target_strategy(c), 0.0f64..=1.0) }), seed in any::<u64>()) {
        let perm = shuffled(z.plane(), seed);
        let a = permute_pixels(&align_to_style(&z, &t.0, &t.1).unwrap(), &perm);
        let b = align_to_style(&permute_pixels(&z, &perm), &t.0, &t.1).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let mut unified = t.0.clone();
        unified.extend(&t.1);
        let params = AlignmentParams::new(alpha).unwrap();
        let a = permute_pixels(&partial_align(&z, &unified, &params).unwrap(), &perm);
        let b = partial_align(&permute_pixels(&z, &perm), &unified, &params).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn partial_projection_endpoints((z, t) in map_strategy().prop_flat_map(|z| { let c = z.channels(); (Just(z), target_strategy(c)) })) {
        prop_assume!(spread(&z));
        let mut unified = t.0.clone();
        unified.extend(&t.1);
        let keep = partial_align(&z, &unified, &AlignmentParams::new(1.0).unwrap()).unwrap();
        for (a, b) in keep.as_slice().iter().zip(z.as_slice()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        let full = partial_align(&z, &unified, &AlignmentParams::new(0.0).unwrap()).unwrap();
        let direct = align_to_style(&z, &t.0, &t.1).unwrap();
        for (a, b) in full.as_slice().iter().zip(direct.as_slice()) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn domain_covariance_is_psd(n in 1usize..30, c in 1usize..4, seed in any::<u64>()) {
        let mut rng = stream(seed, 3);
        let styles: Vec<InstanceStyle> = (0..n)
            .map(|_| {
                let mu = (0..c).map(|_| normal(&mut rng)).collect();
                let sigma = (0..c).map(|_| rng.random_range(0.0..2.0)).collect();
                InstanceStyle::new(mu, sigma).unwrap()
            })
            .collect();
        let g = estimate_domain_style(&styles).unwrap();
        prop_assert!(min_eigenvalue(g.covariance()).unwrap() >= -1e-8);
    }
}

fn random_gaussian(rng: &mut impl Rng, d: usize) -> GaussianStyle {
    let mean: Vec<f64> = (0..d).map(|_| 3.0 * normal(rng)).collect::<Vec<f64>>();
    let raw: Vec<f64> = (0..d * d).map(|_| normal(rng)).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = (0..d).map(|k| raw[i * d + k] * raw[j * d + k]).sum::<f64>() / d as f64;
        }
        cov[i * d + i] += 0.01;
    }
    GaussianStyle::new(mean, SymMatrix::symmetrized(d, cov)).unwrap()
}

#[test]
fn frechet_one_dimensional_closed_form() {
    let a = GaussianStyle::new(vec![0.0], SymMatrix::from_diagonal(&[1.0])).unwrap();
    let b = GaussianStyle::new(vec![2.0], SymMatrix::from_diagonal(&[9.0])).unwrap();
    // (0-2)^2 + (1-3)^2
    assert!((frechet_distance(&a, &b).unwrap() - 8f64.sqrt()).abs() < 1e-10);
    assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);
}

#[test]
fn frechet_is_a_metric_on_random_triples() {
    let mut rng = stream(11, 0);
    for t in 0..20 {
        let d = 2 + t % 5;
        let g: Vec<GaussianStyle> = (0..3).map(|_| random_gaussian(&mut rng, d)).collect();
        let ab = frechet_distance(&g[0], &g[1]).unwrap();
        let ba = frechet_distance(&g[1], &g[0]).unwrap();
        let bc = frechet_distance(&g[1], &g[2]).unwrap();
        let ac = frechet_distance(&g[0], &g[2]).unwrap();
        assert!((ab - ba).abs() < 1e-9, "{ab} {ba}");
        assert!(ac <= ab + bc + 1e-8);
        assert!(frechet_distance(&g[0], &g[0]).unwrap() < 1e-6);
    }
}

#[test]
fn frechet_matches_commuting_closed_form() {
    // diagonal covariances: d^2 = |m1-m2|^2 + sum (sqrt(a_i) - sqrt(b_i))^2
    let a = GaussianStyle::new(vec![1.0, -1.0, 0.5], SymMatrix::from_diagonal(&[4.0, 0.25, 1.0])).unwrap();
    let b = GaussianStyle::new(vec![0.0, 1.0, 0.5], SymMatrix::from_diagonal(&[1.0, 1.0, 16.0])).unwrap();
    let expected = (1.0 + 4.0 + 0.0 + 1.0 + 0.25 + 9.0f64).sqrt();
    assert!((frechet_distance(&a, &b).unwrap() - expected).abs() < 1e-10);
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}
