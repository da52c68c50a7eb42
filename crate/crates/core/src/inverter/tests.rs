use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::field::model::test_support::{randomize, tiny_arch, unit_domain};

fn g(mu: f64, sigma: f64) -> GaussianSummary {
    GaussianSummary { mu, sigma }
}

fn model(seed: u64) -> ExplorableModel {
    let mut m = ExplorableModel::new(tiny_arch(2), unit_domain(2), seed).unwrap();
    randomize(&mut m, seed, -1.0, 1.0);
    m
}

#[test]
fn kl_gaussian_anchors() {
    assert_eq!(kl_gaussian(&g(0.3, 0.7), 0.3, 0.7).unwrap(), 0.0);
    assert!((kl_gaussian(&g(0.0, 1.0), 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
    assert!((kl_gaussian(&g(0.0, 2.0), 0.0, 1.0).unwrap() - 0.318_147).abs() < 1e-6);
    assert!(kl_gaussian(&g(0.0, 0.0), 0.0, 1.0).is_err());
    assert!(kl_gaussian(&g(0.0, 1.0), 0.0, -1.0).is_err());
}

proptest! {
    #[test]
    fn kl_gaussian_is_nonnegative(mu in -3.0f64..3.0, s in 0.01f64..3.0, mt in -3.0f64..3.0, st in 0.01f64..3.0) {
        let d = kl_gaussian(&g(mu, s), mt, st).unwrap();
        prop_assert!(d >= -1e-15);
        prop_assert!(kl_gaussian(&g(mt, st), mt, st).unwrap().abs() < 1e-15);
    }

    #[test]
    fn js_is_bounded_and_symmetric(mu in -3.0f64..3.0, s in 0.05f64..2.0, mt in -3.0f64..3.0, st in 0.05f64..2.0) {
        let a = js_divergence(&g(mu, s), &TargetDistribution::Gaussian { mu: mt, sigma: st }).unwrap();
        let b = js_divergence(&g(mt, st), &TargetDistribution::Gaussian { mu, sigma: s }).unwrap();
        prop_assert!(a >= -1e-12 && a <= std::f64::consts::LN_2 + 1e-12);
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn derived_boxes_are_valid(c in prop::collection::vec(-1e6f64..1e6, 5), q in prop::collection::vec(-1e6f64..1e6, 5)) {
        let s = SearchState { x_c: c, x_sqrt: q, beta: 0.02, free_center: vec![true; 5], free_scale: vec![true; 5], lr: 0.01, iteration: 0 };
        for (lo, hi) in s.bounds() {
            prop_assert!(-1.0 < lo && lo < hi && hi < 1.0);
        }
    }
}

#[test]
fn derived_boxes_fuzz() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100_000 {
        let scale = 10f64.powf(rng.random_range(-2.0..4.0));
        let s = SearchState {
            x_c: vec![rng.random_range(-scale..scale)],
            x_sqrt: vec![rng.random_range(-scale..scale)],
            beta: 0.02,
            free_center: vec![true],
            free_scale: vec![true],
            lr: 0.01,
            iteration: 0,
        };
        let (lo, hi) = s.bounds()[0];
        assert!(-1.0 < lo && lo < hi && hi < 1.0, "{s:?}");
    }
}

#[test]
fn kl_histogram_examples() {
    // One bin of width 2ε around μ whose Gaussian mass is exactly 1 under the
    // midpoint rule.
    let eps = 0.01;
    let sigma = 2.0 * eps * crate::grad::gaussian::INV_SQRT_2PI;
    let d = kl_histogram(&g(0.5, sigma), &[0.5 - eps, 0.5 + eps], &[3.0]).unwrap();
    assert!(d.abs() <= 1e-3, "{d}");

    let (mu, s) = (0.2, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bins = 64;
    let edges: Vec<f64> = (0..=bins).map(|i| mu - 4.0 * s + 8.0 * s * i as f64 / bins as f64).collect();
    let mut counts = vec![0.0; bins];
    for _ in 0..1_000_000 {
        // Box–Muller.
        let (u1, u2): (f64, f64) = (rng.random_range(f64::EPSILON..1.0), rng.random());
        let x = mu + s * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        let b = ((x - edges[0]) / (edges[1] - edges[0])).floor();
        if (0.0..bins as f64).contains(&b) {
            counts[b as usize] += 1.0;
        }
    }
    let d = kl_histogram(&g(mu, s), &edges, &counts).unwrap();
    assert!(d <= 0.01, "{d}");

    let far = kl_histogram(&g(0.0, 0.01), &[10.0, 11.0], &[1.0]).unwrap();
    assert!(far.is_finite() && far > 20.0);
    assert!(kl_histogram(&g(0.0, 1.0), &[0.0, 1.0], &[0.0]).is_err());
    assert!(kl_histogram(&g(0.0, 1.0), &[1.0, 0.0], &[1.0]).is_err());
}

#[test]
fn js_examples() {
    let t = TargetDistribution::Gaussian { mu: 0.4, sigma: 0.2 };
    assert!(js_divergence(&g(0.4, 0.2), &t).unwrap().abs() < 1e-15);
    let apart = js_divergence(&g(0.0, 1.0), &TargetDistribution::Gaussian { mu: 10.0, sigma: 1.0 }).unwrap();
    assert!((apart - std::f64::consts::LN_2).abs() < 1e-3, "{apart}");
    let h = TargetDistribution::Histogram { edges: vec![0.0, 0.5, 1.0], counts: vec![1.0, 1.0] };
    let d = js_divergence(&g(0.3, 0.3), &h).unwrap();
    assert!(d > 0.0 && d < std::f64::consts::LN_2);
}

fn options(mode: SearchMode) -> SearchOptions {
    SearchOptions { mode, restarts: 2, max_iterations: 20, ..Default::default() }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let m = model(3);
    let target = TargetDistribution::Gaussian { mu: 0.2, sigma: 0.05 };
    for kind in [Divergence::Kl, Divergence::Js] {
        let opts = SearchOptions { divergence: kind, ..options(SearchMode::Joint) };
        let p = Problem::new(&m, &target, &opts).unwrap();
        let s = p.initial_state(0);
        let ev = p.evaluate(&s).unwrap();
        let h = 1e-6;
        for a in 0..5 {
            let mut up = s.clone();
            up.x_c[a] += h;
            let mut dn = s.clone();
            dn.x_c[a] -= h;
            let fd = (p.evaluate(&up).unwrap().loss - p.evaluate(&dn).unwrap().loss) / (2.0 * h);
            let an = ev.grad_c[a];
            assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-3), "{kind:?} axis {a}: fd {fd} analytic {an}");
        }
    }
}

#[test]
fn zero_loss_start_is_a_candidate() {
    let m = model(4);
    let mut opts = options(SearchMode::Param);
    opts.restarts = 1;
    opts.max_iterations = 3;
    let probe = Problem::new(&m, &TargetDistribution::Gaussian { mu: 0.0, sigma: 1.0 }, &opts).unwrap();
    let ev = probe.evaluate(&probe.initial_state(0)).unwrap();
    let c = probe.candidate(&ev, 0, 0);
    let target = TargetDistribution::Gaussian { mu: c.mu, sigma: c.sigma };
    let out = search(&m, &target, &opts).unwrap();
    assert_eq!(out.candidates[0].iteration, 0);
    assert!(out.candidates[0].divergence < 1e-12);
}

#[test]
fn candidates_replay_and_serialize() {
    let m = model(5);
    let mut opts = options(SearchMode::Joint);
    opts.max_iterations = 300;
    opts.keep_threshold = 1e-2;
    opts.lr = 0.05;
    let target = TargetDistribution::Gaussian { mu: 0.3, sigma: 0.1 };
    let out = search(&m, &target, &opts).unwrap();
    assert_eq!(out.best.len(), 2);
    let all: Vec<&Candidate> = out.candidates.iter().chain(&out.best).collect();
    for c in all {
        let d = replay(&m, &target, Divergence::Kl, c).unwrap();
        assert!((d - c.divergence).abs() <= 1e-9, "{d} {}", c.divergence);
    }
    for w in out.candidates.windows(2) {
        assert!(w[0].divergence <= w[1].divergence);
    }
    let j = serde_json::to_value(&out.best[0]).unwrap();
    for k in ["params_physical", "center_physical", "scale_physical", "divergence", "mu", "sigma"] {
        assert!(j.get(k).is_some(), "{k}");
    }
    let again = search(&m, &target, &opts).unwrap();
    assert_eq!(again.best, out.best);
}

#[test]
fn frozen_axes_stay_put() {
    let m = model(6);
    let mut opts = options(SearchMode::Joint);
    opts.frozen_scale = vec![0, 1, 2];
    opts.frozen_center = vec![3];
    opts.init_center = vec![None, None, None, Some(0.25), None];
    opts.init_scale = vec![Some(0.1); 5];
    let p = Problem::new(&m, &TargetDistribution::Gaussian { mu: 0.5, sigma: 0.1 }, &opts).unwrap();
    let s0 = p.initial_state(0);
    assert!((s0.x_c[3].tanh() - m.domain.params[0].bounds().normalize(0.25)).abs() < 1e-12);
    let ev = p.evaluate(&s0).unwrap();
    let s1 = Problem::step(&s0, &ev, 0.1);
    assert_eq!(s1.x_c[3], s0.x_c[3]);
    assert_eq!(&s1.x_sqrt[..3], &s0.x_sqrt[..3]);
    assert_ne!(s1.x_c[0], s0.x_c[0]);
    // Spatial-only search leaves the parameter box fixed.
    let spatial = options(SearchMode::Spatial);
    let sp = Problem::new(&m, &TargetDistribution::Gaussian { mu: 0.5, sigma: 0.1 }, &spatial).unwrap();
    let ev = sp.evaluate(&sp.initial_state(1)).unwrap();
    assert_eq!(ev.bounds[3], [-1.0, 1.0]);
    assert!(ev.grad_c[3..].iter().all(|&g| g == 0.0));
}

#[test]
fn non_finite_model_aborts_with_diagnostics() {
    let mut m = model(7);
    m.decoder.layers[0].bias[0] = f32::NAN;
    let err = search(&m, &TargetDistribution::Gaussian { mu: 0.5, sigma: 0.1 }, &options(SearchMode::Param)).unwrap_err();
    assert!(matches!(err, Error::SearchDiverged { .. }), "{err:?}");
}

#[test]
fn rejects_bad_options() {
    let m = model(8);
    let t = TargetDistribution::Gaussian { mu: 0.5, sigma: 0.1 };
    let mut o = options(SearchMode::Param);
    o.restarts = 0;
    assert!(search(&m, &t, &o).is_err());
    let mut o = options(SearchMode::Param);
    o.frozen_scale = vec![9];
    assert!(search(&m, &t, &o).is_err());
    assert!(search(&m, &TargetDistribution::Gaussian { mu: 0.5, sigma: 0.0 }, &options(SearchMode::Param)).is_err());
}
