//! End-to-end use of the public API: synthesize, train, round-trip,
//! propagate and search.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xinr::data::quadrature::uniform_rule;
use xinr::data::{AnalyticFamily, EnsembleDataset, Split};
use xinr::explorer::up_summaries;
use xinr::field::{checkpoint, Activation, ArchConfig, Bounds, DomainSpec, ParamAxis};
use xinr::inverter::{search, SearchOptions, TargetDistribution};
use xinr::paf::{propagate, NoiseSymbolRegistry, PafMode};
use xinr::region::{AxisQuery, QueryRegion};
use xinr::trainer::{evaluate_members, TrainConfig, Trainer};
use xinr::ExplorableModel;

fn small_arch(m: usize, activation: Activation) -> ArchConfig {
    ArchConfig {
        spatial_grid_res: 4,
        plane_res: 8,
        line_res: 2,
        spatial_dim: 4,
        param_dim: 3,
        decoder_hidden: 8,
        decoder_layers: 2,
        n_params: m,
        activation,
        ..ArchConfig::default()
    }
}

/// Identity decoder and two-vertex lines: the output is affine in each
/// parameter.
fn affine_model(seed: u64) -> ExplorableModel {
    let domain = DomainSpec {
        spatial: [Bounds::new(0.0, 1.0); 3],
        params: vec![ParamAxis { name: "a".into(), min: 0.0, max: 2.0 }, ParamAxis { name: "b".into(), min: -1.0, max: 1.0 }],
        value_min: 0.0,
        value_max: 1.0,
    };
    let mut m = ExplorableModel::new(small_arch(2, Activation::Identity), domain, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in m.features.structures_mut() {
        g.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    m
}

#[test]
fn train_round_trip_and_evaluate() {
    let data = EnsembleDataset::synthesize(&AnalyticFamily::desk(), 4, 1, 8, 3).unwrap();
    let mut model = ExplorableModel::new(small_arch(2, Activation::Relu), data.domain().clone(), 2).unwrap();
    let cfg = TrainConfig { epochs: 3, steps_per_epoch: Some(40), batch_size: 512, ..Default::default() };
    let history = Trainer::new(cfg).train(&mut model, &data).unwrap();
    assert_eq!(history.len(), 3);
    assert!(history[2].train_mse < history[0].train_mse, "{history:?}");
    assert!(history[2].val_mse.is_some_and(f64::is_finite));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.xinr");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), checkpoint::to_bytes(&model).unwrap());
    let a = evaluate_members(&model, &data, &data.indices(Split::Test)).unwrap();
    let b = evaluate_members(&back, &data, &data.indices(Split::Test)).unwrap();
    assert_eq!(a.psnr.to_bits(), b.psnr.to_bits());
    assert!(a.md > 0.0 && a.md <= 1.0);
}

#[test]
fn planted_parameter_box_is_recovered_in_parameter_mode() {
    let model = affine_model(5);
    let planted = QueryRegion {
        spatial: [AxisQuery::Range(0.0, 1.0), AxisQuery::Range(0.0, 1.0), AxisQuery::Range(0.0, 1.0)],
        params: vec![AxisQuery::Range(0.6, 1.0), AxisQuery::Range(-0.2, 0.3)],
    };
    let (s, _) = propagate(&model, &planted, &NoiseSymbolRegistry::new(), PafMode::Condensed).unwrap();
    let d = &model.domain;
    let target = TargetDistribution::Gaussian { mu: d.denormalize_value(s.mu), sigma: s.sigma * d.value_span() };
    let out = search(&model, &target, &SearchOptions { restarts: 4, max_iterations: 400, ..Default::default() }).unwrap();
    let best = out.best.iter().map(|c| c.divergence).fold(f64::INFINITY, f64::min);
    assert!(best < 1e-3, "best divergence {best}");
}

/// Uniform mean and standard deviation of `f` over the box by tensor
/// Gauss-Legendre quadrature.
fn quadrature(f: impl Fn(&[f64]) -> f64, a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (xa, wa) = uniform_rule(a.0, a.1, 8);
    let (xb, wb) = uniform_rule(b.0, b.1, 8);
    let (mut m1, mut m2) = (0.0, 0.0);
    for (pa, qa) in xa.iter().zip(&wa) {
        for (pb, qb) in xb.iter().zip(&wb) {
            let v = f(&[*pa, *pb]);
            m1 += qa * qb * v;
            m2 += qa * qb * v * v;
        }
    }
    (m1, (m2 - m1 * m1).max(0.0).sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exact_propagation_of_an_affine_model_equals_quadrature(
        seed in 0u64..1000,
        a in (-1.0f64..1.0, -1.0f64..1.0),
        b in (-1.0f64..1.0, -1.0f64..1.0),
        pin_b in any::<bool>(),
    ) {
        let model = affine_model(seed);
        let (a, mut b) = ((a.0.min(a.1), a.0.max(a.1)), (b.0.min(b.1), b.0.max(b.1)));
        if pin_b {
            b.1 = b.0;
        }
        prop_assume!(a.1 - a.0 > 1e-3 && (pin_b || b.1 - b.0 > 1e-3));
        let d = &model.domain;
        let phys = |i: usize, (lo, hi): (f64, f64)| {
            let bd = d.params[i].bounds();
            if lo == hi { AxisQuery::Point(bd.denormalize(lo)) } else { AxisQuery::Range(bd.denormalize(lo), bd.denormalize(hi)) }
        };
        let dims = [3, 2, 2];
        let up = up_summaries(&model, &[phys(0, a), phys(1, b)], dims, PafMode::Exact).unwrap();
        for (v, (mu, sigma)) in up.iter().enumerate() {
            let idx = [v % 3, (v / 3) % 2, v / 6];
            let x = xinr::data::dataset::voxel_normalized(dims, idx);
            let (qm, qs) = quadrature(|p| model.forward(x, p).unwrap(), a, b);
            prop_assert!((mu - qm).abs() <= 1e-9, "mean {mu} vs {qm}");
            // Two ranged lines multiply into a product of symbols that the
            // form carries per channel, so only the one-range std is exact.
            if pin_b {
                prop_assert!((sigma - qs).abs() <= 1e-9, "std {sigma} vs {qs}");
            }
        }
    }
}
