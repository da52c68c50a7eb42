//! Ground-truth parameter statistics of an analytic family, by tensor-product
//! Gauss–Legendre quadrature or Monte Carlo over a parameter box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::family::{AnalyticFamily, Member};
use crate::data::quadrature::uniform_rule;
use crate::data::volume::{voxel_position, VolumeGrid};
use crate::error::{Error, Result};
use crate::region::AxisQuery;

/// Smallest quadrature order accepted per ranged axis.
pub const MIN_QUADRATURE_ORDER: usize = 32;

/// Weighted parameter nodes whose weights sum to 1.
#[derive(Clone, Debug)]
pub struct ParamRule {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Set for Monte Carlo rules, which report a standard error.
    pub sampled: bool,
}

fn check_box(family: &AnalyticFamily, params: &[AxisQuery]) -> Result<()> {
    if params.len() != family.n_params() {
        return Err(Error::Shape(format!("box has {} parameters, family has {}", params.len(), family.n_params())));
    }
    for (q, a) in params.iter().zip(&family.params) {
        let (lo, hi) = q.bounds();
        if !(lo <= hi) || !a.bounds().contains(lo) || !a.bounds().contains(hi) {
            return Err(Error::Region(format!("parameter `{}`: [{lo}, {hi}] outside [{}, {}]", a.name, a.min, a.max)));
        }
    }
    Ok(())
}

impl ParamRule {
    /// Tensor-product rule of `order` nodes on every ranged axis.
    pub fn quadrature(family: &AnalyticFamily, params: &[AxisQuery], order: usize) -> Result<Self> {
        check_box(family, params)?;
        if order < MIN_QUADRATURE_ORDER {
            return Err(Error::Config(format!("quadrature order {order} below {MIN_QUADRATURE_ORDER}")));
        }
        let mut points = vec![Vec::with_capacity(params.len())];
        let mut weights = vec![1.0];
        for q in params {
            let (nodes, w) = match *q {
                AxisQuery::Range(lo, hi) if hi > lo => uniform_rule(lo, hi, order),
                _ => (vec![q.bounds().0], vec![1.0]),
            };
            let mut np = Vec::with_capacity(points.len() * nodes.len());
            let mut nw = Vec::with_capacity(points.len() * nodes.len());
            for (p, pw) in points.iter().zip(&weights) {
                for (x, xw) in nodes.iter().zip(&w) {
                    let mut v = p.clone();
                    v.push(*x);
                    np.push(v);
                    nw.push(pw * xw);
                }
            }
            points = np;
            weights = nw;
        }
        Ok(Self { points, weights, sampled: false })
    }

    /// `n` iid uniform draws over the box.
    pub fn monte_carlo(family: &AnalyticFamily, params: &[AxisQuery], n: usize, seed: u64) -> Result<Self> {
        check_box(family, params)?;
        if n < 2 {
            return Err(Error::Config("Monte Carlo needs at least 2 samples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                params
                    .iter()
                    .map(|q| match *q {
                        AxisQuery::Range(lo, hi) if hi > lo => rng.random_range(lo..hi),
                        _ => q.bounds().0,
                    })
                    .collect()
            })
            .collect();
        Ok(Self { points, weights: vec![1.0 / n as f64; n], sampled: true })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn members(&self, family: &AnalyticFamily) -> Vec<Member> {
        self.points.iter().map(|p| family.member(p)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleStats {
    pub mean: f64,
    pub var: f64,
    /// Standard error of `mean`, for Monte Carlo rules.
    pub mean_se: Option<f64>,
}

impl OracleStats {
    pub fn std(&self) -> f64 {
        self.var.max(0.0).sqrt()
    }
}

fn weighted_stats(values: &[f64], rule: &ParamRule) -> OracleStats {
    let mean: f64 = values.iter().zip(&rule.weights).map(|(v, w)| v * w).sum();
    let var: f64 = values.iter().zip(&rule.weights).map(|(v, w)| w * (v - mean) * (v - mean)).sum();
    let mean_se = rule.sampled.then(|| {
        let n = values.len() as f64;
        (var * n / (n - 1.0) / n).sqrt()
    });
    OracleStats { mean, var, mean_se }
}

/// Mean and variance of `f(x; p)` over the rule's parameter distribution.
pub fn oracle_stats(family: &AnalyticFamily, x: [f64; 3], rule: &ParamRule) -> OracleStats {
    let values: Vec<f64> = rule.points.iter().map(|p| family.eval(x, p)).collect();
    weighted_stats(&values, rule)
}

/// Covariance and Pearson correlation of `f(a; p)` and `f(b; p)`.
pub fn oracle_covariance(family: &AnalyticFamily, a: [f64; 3], b: [f64; 3], rule: &ParamRule) -> (f64, f64) {
    let members = rule.members(family);
    let fa: Vec<f64> = members.iter().map(|m| m.value(a)).collect();
    let fb: Vec<f64> = members.iter().map(|m| m.value(b)).collect();
    let sa = weighted_stats(&fa, rule);
    let sb = weighted_stats(&fb, rule);
    let cov: f64 = (0..fa.len()).map(|i| rule.weights[i] * (fa[i] - sa.mean) * (fb[i] - sb.mean)).sum();
    (cov, cov / (sa.std() * sb.std()))
}

/// Oracle mean and standard deviation volumes.
#[derive(Clone, Debug)]
pub struct OracleFields {
    pub mean: VolumeGrid,
    pub std: VolumeGrid,
}

fn voxel_values(members: &[Member], x: [f64; 3], buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(members.iter().map(|m| m.value(x)));
}

pub fn oracle_fields(family: &AnalyticFamily, rule: &ParamRule, dims: [usize; 3]) -> OracleFields {
    let members = rule.members(family);
    let n = dims[0] * dims[1] * dims[2];
    let stats: Vec<(f32, f32)> = (0..n)
        .into_par_iter()
        .map_init(Vec::new, |buf, idx| {
            let x = voxel_position(dims, &family.spatial, coords(dims, idx));
            voxel_values(&members, x, buf);
            let s = weighted_stats(buf, rule);
            (s.mean as f32, s.std() as f32)
        })
        .collect();
    let (mean, std): (Vec<f32>, Vec<f32>) = stats.into_iter().unzip();
    OracleFields {
        mean: VolumeGrid::new(dims, family.spatial, mean).expect("sized"),
        std: VolumeGrid::new(dims, family.spatial, std).expect("sized"),
    }
}

/// Pearson correlation of every voxel against the voxel at `reference`.
pub fn oracle_correlation(
    family: &AnalyticFamily,
    rule: &ParamRule,
    dims: [usize; 3],
    reference: [usize; 3],
) -> Result<VolumeGrid> {
    let members = rule.members(family);
    let mut fr = Vec::new();
    voxel_values(&members, voxel_position(dims, &family.spatial, reference), &mut fr);
    let sr = weighted_stats(&fr, rule);
    if sr.std() == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    let n = dims[0] * dims[1] * dims[2];
    let values: Vec<f32> = (0..n)
        .into_par_iter()
        .map_init(Vec::new, |buf, idx| {
            let c = coords(dims, idx);
            if c == reference {
                return 1.0;
            }
            voxel_values(&members, voxel_position(dims, &family.spatial, c), buf);
            let s = weighted_stats(buf, rule);
            if s.std() == 0.0 {
                return 0.0;
            }
            let cov: f64 = (0..buf.len()).map(|i| rule.weights[i] * (buf[i] - s.mean) * (fr[i] - sr.mean)).sum();
            (cov / (s.std() * sr.std())).clamp(-1.0, 1.0) as f32
        })
        .collect();
    VolumeGrid::new(dims, family.spatial, values)
}

fn coords(dims: [usize; 3], idx: usize) -> [usize; 3] {
    [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::family::{Blob, ParamExpr};
    use crate::field::domain::{Bounds, ParamAxis};

    fn linear_family(slope: f64) -> AnalyticFamily {
        AnalyticFamily {
            name: "linear".into(),
            spatial: [Bounds::new(0.0, 1.0); 3],
            params: vec![ParamAxis { name: "a".into(), min: 0.0, max: 2.0 }],
            blobs: vec![],
            background: ParamExpr::linear(0.5, vec![slope]),
            background_slope: [0.0; 3],
        }
    }

    #[test]
    fn constant_family_has_zero_variance() {
        let f = AnalyticFamily::constant(0.5);
        let rule = ParamRule::quadrature(&f, &[AxisQuery::Range(0.0, 1.0)], 32).unwrap();
        let s = oracle_stats(&f, [0.3, 0.4, 0.5], &rule);
        assert!((s.mean - 0.5).abs() < 1e-14);
        assert!(s.var.abs() < 1e-28);
    }

    #[test]
    fn linear_in_parameter_gives_uniform_variance() {
        // Slope is per normalized unit; [0.5, 1.5] is half the axis, width 1 normalized.
        let f = linear_family(0.3);
        let rule = ParamRule::quadrature(&f, &[AxisQuery::Range(0.5, 1.5)], 32).unwrap();
        let s = oracle_stats(&f, [0.5; 3], &rule);
        assert!((s.mean - 0.5).abs() < 1e-14);
        assert!((s.var - 0.3f64.powi(2) * 1.0 / 12.0).abs() < 1e-14);
    }

    #[test]
    fn quadrature_agrees_with_monte_carlo() {
        let f = AnalyticFamily::desk();
        let params = [AxisQuery::Range(-0.08, 0.05), AxisQuery::Range(0.7, 1.3)];
        let q = ParamRule::quadrature(&f, &params, 32).unwrap();
        let mc = ParamRule::monte_carlo(&f, &params, 1_000_000, 3).unwrap();
        for x in [[0.5, 0.5, 0.5], [0.42, 0.51, 0.47], [0.3, 0.65, 0.3]] {
            let a = oracle_stats(&f, x, &q);
            let b = oracle_stats(&f, x, &mc);
            let se = b.mean_se.unwrap();
            assert!((a.mean - b.mean).abs() < 3.0 * se, "{a:?} {b:?}");
            assert!((a.var - b.var).abs() < 0.01 * a.var + 1e-12, "{a:?} {b:?}");
        }
    }

    #[test]
    fn rejects_bad_boxes_and_orders() {
        let f = AnalyticFamily::desk();
        assert!(ParamRule::quadrature(&f, &[AxisQuery::Range(-0.2, 0.0), AxisQuery::Point(1.0)], 32).is_err());
        assert!(ParamRule::quadrature(&f, &[AxisQuery::Point(0.0), AxisQuery::Point(1.0)], 8).is_err());
        assert!(ParamRule::quadrature(&f, &[AxisQuery::Point(0.0)], 32).is_err());
        assert!(ParamRule::monte_carlo(&f, &[AxisQuery::Point(0.0), AxisQuery::Point(1.0)], 1, 0).is_err());
    }

    #[test]
    fn fields_match_pointwise_stats() {
        let f = AnalyticFamily::desk();
        let params = [AxisQuery::Range(-0.1, 0.1), AxisQuery::Range(0.6, 1.4)];
        let rule = ParamRule::quadrature(&f, &params, 32).unwrap();
        let dims = [6, 5, 4];
        let fields = oracle_fields(&f, &rule, dims);
        let idx = [3, 2, 1];
        let s = oracle_stats(&f, fields.mean.voxel_position(idx), &rule);
        let i = fields.mean.index(3, 2, 1);
        assert_eq!(fields.mean.values[i], s.mean as f32);
        assert_eq!(fields.std.values[i], s.std() as f32);
        let corr = oracle_correlation(&f, &rule, dims, idx).unwrap();
        assert_eq!(corr.values[i], 1.0);
        let other = [1, 4, 2];
        let (_, rho) = oracle_covariance(&f, fields.mean.voxel_position(idx), fields.mean.voxel_position(other), &rule);
        let j = corr.index(1, 4, 2);
        assert!((corr.values[j] as f64 - rho).abs() < 1e-6);
    }

    #[test]
    fn two_blob_correlation_sign() {
        // One blob grows with the parameter, the other shrinks.
        let c = ParamExpr::constant;
        let f = AnalyticFamily {
            name: "pair".into(),
            spatial: [Bounds::new(0.0, 1.0); 3],
            params: vec![ParamAxis { name: "a".into(), min: 0.0, max: 1.0 }],
            blobs: vec![
                Blob { center: [c(0.25), c(0.5), c(0.5)], amplitude: ParamExpr::linear(1.0, vec![0.5]), width: c(0.1) },
                Blob { center: [c(0.75), c(0.5), c(0.5)], amplitude: ParamExpr::linear(1.0, vec![-0.5]), width: c(0.1) },
            ],
            background: c(0.0),
            background_slope: [0.0; 3],
        };
        let rule = ParamRule::quadrature(&f, &[AxisQuery::Range(0.0, 1.0)], 32).unwrap();
        let (_, same) = oracle_covariance(&f, [0.25, 0.5, 0.5], [0.3, 0.5, 0.5], &rule);
        let (_, opposite) = oracle_covariance(&f, [0.25, 0.5, 0.5], [0.75, 0.5, 0.5], &rule);
        assert!(same > 0.99);
        assert!(opposite < -0.99);
    }
}
