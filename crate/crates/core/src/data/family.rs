//! Closed-form synthetic ensembles: sums of Gaussian blobs whose centers,
//! amplitudes and widths vary smoothly with the simulation parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::domain::{Bounds, DomainSpec, ParamAxis};

/// `constant + Σ linear[i]·u_i + Σ amp·sin(freq·u_param + phase)` over
/// normalized parameters `u ∈ [-1, 1]^m`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamExpr {
    pub constant: f64,
    pub linear: Vec<f64>,
    pub sines: Vec<SineTerm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineTerm {
    pub param: usize,
    pub amp: f64,
    pub freq: f64,
    #[serde(default)]
    pub phase: f64,
}

impl ParamExpr {
    pub fn constant(c: f64) -> Self {
        Self { constant: c, ..Self::default() }
    }

    pub fn linear(c: f64, slopes: Vec<f64>) -> Self {
        Self { constant: c, linear: slopes, sines: vec![] }
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        let mut v = self.constant;
        for (s, x) in self.linear.iter().zip(u) {
            v += s * x;
        }
        for t in &self.sines {
            v += t.amp * (t.freq * u[t.param] + t.phase).sin();
        }
        v
    }

    fn max_param(&self) -> Option<usize> {
        let lin = self.linear.iter().rposition(|&s| s != 0.0);
        let sin = self.sines.iter().map(|t| t.param).max();
        lin.max(sin)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// Center per spatial axis, in physical units.
    pub center: [ParamExpr; 3],
    pub amplitude: ParamExpr,
    pub width: ParamExpr,
}

/// A named closed-form field `f(x, y, z; p)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticFamily {
    pub name: String,
    pub spatial: [Bounds; 3],
    pub params: Vec<ParamAxis>,
    #[serde(default)]
    pub blobs: Vec<Blob>,
    #[serde(default)]
    pub background: ParamExpr,
    /// Spatial gradient of the background, per physical unit.
    #[serde(default)]
    pub background_slope: [f64; 3],
}

/// Blob parameters resolved at one parameter vector.
#[derive(Clone, Copy, Debug)]
struct Resolved {
    center: [f64; 3],
    amp: f64,
    inv2w2: f64,
}

/// A family evaluated at one parameter vector, ready for many spatial points.
#[derive(Clone, Debug)]
pub struct Member {
    blobs: Vec<Resolved>,
    background: f64,
    slope: [f64; 3],
    origin: [f64; 3],
}

impl Member {
    #[inline]
    pub fn value(&self, x: [f64; 3]) -> f64 {
        let mut v = self.background;
        for k in 0..3 {
            v += self.slope[k] * (x[k] - self.origin[k]);
        }
        for b in &self.blobs {
            let d2: f64 = (0..3).map(|k| (x[k] - b.center[k]).powi(2)).sum();
            v += b.amp * (-d2 * b.inv2w2).exp();
        }
        v
    }
}

impl AnalyticFamily {
    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::Config("family needs at least one parameter".into()));
        }
        let m = self.params.len();
        let exprs = self
            .blobs
            .iter()
            .flat_map(|b| b.center.iter().chain([&b.amplitude, &b.width]))
            .chain([&self.background]);
        for e in exprs {
            if e.max_param().is_some_and(|i| i >= m) {
                return Err(Error::Config(format!("expression references parameter beyond m={m}")));
            }
        }
        for (b, n) in self.spatial.iter().zip(["x", "y", "z"]) {
            if !(b.min < b.max) {
                return Err(Error::Config(format!("spatial axis {n}: min must be < max")));
            }
        }
        Ok(())
    }

    fn normalize(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.params).map(|(&v, a)| a.bounds().normalize(v)).collect()
    }

    /// Resolves the family at physical parameters `p`.
    pub fn member(&self, p: &[f64]) -> Member {
        let u = self.normalize(p);
        let blobs = self
            .blobs
            .iter()
            .map(|b| {
                let w = b.width.eval(&u);
                Resolved {
                    center: [b.center[0].eval(&u), b.center[1].eval(&u), b.center[2].eval(&u)],
                    amp: b.amplitude.eval(&u),
                    inv2w2: 1.0 / (2.0 * w * w),
                }
            })
            .collect();
        Member {
            blobs,
            background: self.background.eval(&u),
            slope: self.background_slope,
            origin: [self.spatial[0].min, self.spatial[1].min, self.spatial[2].min],
        }
    }

    /// `f(x; p)` at physical coordinates.
    pub fn eval(&self, x: [f64; 3], p: &[f64]) -> f64 {
        self.member(p).value(x)
    }

    /// Domain with value range left for the caller to fill from data.
    pub fn domain(&self, value_min: f64, value_max: f64) -> DomainSpec {
        DomainSpec {
            spatial: self.spatial,
            params: self.params.clone(),
            value_min,
            value_max,
        }
    }

    /// Two-parameter desk family: `shift` translates the central blob along
    /// x, `amp` scales it; two satellite blobs respond smoothly to both.
    pub fn desk() -> Self {
        let c = ParamExpr::constant;
        Self {
            name: "desk".into(),
            spatial: [Bounds::new(0.0, 1.0); 3],
            params: vec![
                ParamAxis { name: "shift".into(), min: -0.1, max: 0.1 },
                ParamAxis { name: "amp".into(), min: 0.6, max: 1.4 },
            ],
            blobs: vec![
                Blob {
                    center: [ParamExpr::linear(0.5, vec![0.1, 0.0]), c(0.5), c(0.5)],
                    amplitude: ParamExpr::linear(1.0, vec![0.0, 0.4]),
                    width: c(0.14),
                },
                Blob {
                    center: [c(0.25), c(0.7), c(0.3)],
                    amplitude: ParamExpr {
                        constant: 0.6,
                        linear: vec![0.0, 0.1],
                        sines: vec![SineTerm { param: 0, amp: 0.15, freq: 1.5, phase: 0.0 }],
                    },
                    width: ParamExpr::linear(0.12, vec![0.0, 0.015]),
                },
                Blob {
                    center: [c(0.75), ParamExpr::linear(0.3, vec![0.0, 0.04]), c(0.7)],
                    amplitude: ParamExpr::linear(0.5, vec![0.05, -0.15]),
                    width: c(0.16),
                },
            ],
            background: c(0.1),
            background_slope: [0.0, 0.0, 0.05],
        }
    }

    /// One-parameter family equal to `value` everywhere.
    pub fn constant(value: f64) -> Self {
        Self {
            name: "constant".into(),
            spatial: [Bounds::new(0.0, 1.0); 3],
            params: vec![ParamAxis { name: "p0".into(), min: 0.0, max: 1.0 }],
            blobs: vec![],
            background: ParamExpr::constant(value),
            background_slope: [0.0; 3],
        }
    }
}
