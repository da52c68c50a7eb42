//! Hybrid Hadamard spatial features are per-variable cubic polynomials on
//! every cell shared by the grid and the three planes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xinr::field::{ArchConfig, Bounds, DomainSpec, Fusion, ParamAxis, SpatialVariant};
use xinr::ExplorableModel;

const NODES: usize = 4;

fn model(seed: u64) -> ExplorableModel {
    let arch = ArchConfig {
        spatial_grid_res: 5,
        plane_res: 9,
        line_res: 4,
        spatial_dim: 3,
        param_dim: 2,
        decoder_hidden: 4,
        decoder_layers: 1,
        n_params: 1,
        fusion: Fusion::Hadamard,
        spatial_variant: SpatialVariant::Hybrid,
        ..ArchConfig::default()
    };
    let domain = DomainSpec {
        spatial: [Bounds::new(0.0, 1.0); 3],
        params: vec![ParamAxis { name: "p".into(), min: 0.0, max: 1.0 }],
        value_min: 0.0,
        value_max: 1.0,
    };
    let mut m = ExplorableModel::new(arch, domain, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in m.features.structures_mut() {
        g.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    m
}

fn lagrange(nodes: &[f64], t: f64) -> Vec<f64> {
    (0..nodes.len())
        .map(|i| (0..nodes.len()).filter(|&j| j != i).map(|j| (t - nodes[j]) / (nodes[i] - nodes[j])).product())
        .collect()
}

/// Largest error of the tensor-product cubic interpolant of `fuse_spatial`
/// on the cell around `x`, over `probes` random points in that cell.
fn max_reconstruction_error(m: &ExplorableModel, x: [f64; 3], probes: usize, rng: &mut impl Rng) -> f64 {
    let cell = m.spatial_cell(x);
    let nodes: Vec<Vec<f64>> =
        cell.iter().map(|&(lo, hi)| (0..NODES).map(|i| lo + (hi - lo) * i as f64 / (NODES - 1) as f64).collect()).collect();
    let mut samples = Vec::with_capacity(NODES * NODES * NODES);
    for k in 0..NODES {
        for j in 0..NODES {
            for i in 0..NODES {
                samples.push(m.fuse_spatial([nodes[0][i], nodes[1][j], nodes[2][k]]).unwrap());
            }
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let q: [f64; 3] = std::array::from_fn(|a| rng.random_range(cell[a].0..cell[a].1));
        let w: Vec<Vec<f64>> = (0..3).map(|a| lagrange(&nodes[a], q[a])).collect();
        let direct = m.fuse_spatial(q).unwrap();
        for (c, want) in direct.iter().enumerate() {
            let mut got = 0.0;
            for k in 0..NODES {
                for j in 0..NODES {
                    for i in 0..NODES {
                        got += w[0][i] * w[1][j] * w[2][k] * samples[i + NODES * (j + NODES * k)][c];
                    }
                }
            }
            worst = worst.max((got - want).abs());
        }
    }
    worst
}

#[test]
fn fused_feature_is_cubic_per_axis_on_shared_cells() {
    let m = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let err = max_reconstruction_error(&m, x, 50, &mut rng);
        assert!(err <= 1e-9, "cell around {x:?}: error {err}");
    }
}

#[test]
fn shared_cell_contains_point_and_respects_every_structure() {
    let m = model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        for (a, (lo, hi)) in m.spatial_cell(x).into_iter().enumerate() {
            assert!(lo <= x[a] && x[a] <= hi && lo < hi);
            assert!(hi - lo <= 2.0 / 8.0 + 1e-15);
        }
    }
}

#[test]
fn crossing_a_breakpoint_breaks_the_polynomial() {
    // A cubic fitted on one cell does not extend across a plane breakpoint.
    let m = model(6);
    let cell = m.spatial_cell([0.1, 0.1, 0.1]);
    let mut wide = cell;
    wide[0].1 = (cell[0].1 + 0.2).min(1.0);
    let nodes: Vec<f64> = (0..NODES).map(|i| wide[0].0 + (wide[0].1 - wide[0].0) * i as f64 / 3.0).collect();
    let f = |t: f64| m.fuse_spatial([t, 0.1, 0.1]).unwrap()[0];
    let vals: Vec<f64> = nodes.iter().map(|&t| f(t)).collect();
    let worst = (0..20)
        .map(|s| {
            let t = wide[0].0 + (wide[0].1 - wide[0].0) * (s as f64 + 0.5) / 20.0;
            let w = lagrange(&nodes, t);
            (w.iter().zip(&vals).map(|(a, b)| a * b).sum::<f64>() - f(t)).abs()
        })
        .fold(0.0, f64::max);
    assert!(worst > 1e-6);
}
