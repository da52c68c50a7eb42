//! Inverse search: gradient descent on a query box so that its propagated
//! distribution matches a target, collecting every box that gets close.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::domain::DomainSpec;
use crate::field::ExplorableModel;
use crate::grad::{Tape, Var};
use crate::paf::traced::{propagate_traced, TracedModel};
use crate::paf::{propagate, GaussianSummary, NoiseSymbolRegistry, PafMode};
use crate::region::{AxisQuery, QueryRegion};
use crate::tensor::Tensor;

/// Floor on Gaussian bin mass.
pub const Q_FLOOR: f64 = 1e-12;
/// Bins used to discretize a Gaussian for the JS divergence.
pub const JS_BINS: usize = 256;
/// Half-width of the JS grid in standard deviations.
pub const JS_SPAN: f64 = 6.0;
/// Projection limits on the optimized state, keeping derived bounds
/// strictly inside `(-1, 1)` in floating point.
pub const CENTER_LIMIT: f64 = 3.0;
pub const SQRT_LIMIT: f64 = 2.0;
/// Retries with a halved learning rate before a non-finite step aborts.
pub const MAX_RETRIES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetDistribution {
    Gaussian { mu: f64, sigma: f64 },
    Histogram { edges: Vec<f64>, counts: Vec<f64> },
}

impl TargetDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            TargetDistribution::Gaussian { mu, sigma } => {
                if !mu.is_finite() || !(*sigma > 0.0) || !sigma.is_finite() {
                    return Err(Error::Distribution(format!("gaussian target needs finite mu and sigma > 0, got ({mu}, {sigma})")));
                }
            }
            TargetDistribution::Histogram { edges, counts } => {
                if edges.len() != counts.len() + 1 || counts.is_empty() {
                    return Err(Error::Distribution(format!("{} edges for {} counts", edges.len(), counts.len())));
                }
                if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::Distribution("histogram edges must be finite and strictly increasing".into()));
                }
                if counts.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
                    return Err(Error::Distribution("histogram counts must be finite and non-negative".into()));
                }
                if !(counts.iter().sum::<f64>() > 0.0) {
                    return Err(Error::Distribution("histogram has no mass".into()));
                }
            }
        }
        Ok(())
    }

    /// The target in normalized value units.
    pub fn normalized(&self, domain: &DomainSpec) -> Result<Self> {
        self.validate()?;
        let span = domain.value_span();
        Ok(match self {
            TargetDistribution::Gaussian { mu, sigma } => {
                TargetDistribution::Gaussian { mu: domain.normalize_value(*mu), sigma: sigma / span }
            }
            TargetDistribution::Histogram { edges, counts } => TargetDistribution::Histogram {
                edges: edges.iter().map(|e| domain.normalize_value(*e)).collect(),
                counts: counts.clone(),
            },
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    #[default]
    Kl,
    Js,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Distribution(format!("summary sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// `KL(target ‖ N(μ, σ²))` for a Gaussian target, on the tape.
fn kl_gaussian_var(tape: &mut Tape, mu: Var, sigma: Var, mt: f64, st: f64) -> Var {
    let ls = tape.log(sigma);
    let ln_ratio = tape.add_scalar(ls, -st.ln());
    let nm = tape.neg(mu);
    let d = tape.add_scalar(nm, mt);
    let d2 = tape.square(d);
    let num = tape.add_scalar(d2, st * st);
    let s2 = tape.square(sigma);
    let den = tape.scale(s2, 2.0);
    let frac = tape.div(num, den);
    let sum = tape.add(ln_ratio, frac);
    tape.add_scalar(sum, -0.5)
}

/// `Σ p_i ln(p_i / q_i)` with `q_i` the bin width times the density at the
/// bin center, floored at [`Q_FLOOR`].
fn kl_histogram_var(tape: &mut Tape, mu: Var, sigma: Var, edges: &[f64], counts: &[f64]) -> Var {
    let total: f64 = counts.iter().sum();
    let bins: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] > 0.0).collect();
    let h = bins.len();
    let p: Vec<f64> = bins.iter().map(|&i| counts[i] / total).collect();
    let centers: Vec<f64> = bins.iter().map(|&i| 0.5 * (edges[i] + edges[i + 1])).collect();
    let widths: Vec<f64> = bins.iter().map(|&i| edges[i + 1] - edges[i]).collect();
    let c = tape.constant(Tensor::row_vector(centers));
    let mu_b = tape.broadcast(mu, 1, h);
    let sig_b = tape.broadcast(sigma, 1, h);
    let off = tape.sub(c, mu_b);
    let z = tape.div(off, sig_b);
    let dens = tape.pdf(z);
    let w = tape.constant(Tensor::row_vector(widths));
    let mass = tape.mul(dens, w);
    let q = tape.div(mass, sig_b);
    let q = tape.clamp_min(q, Q_FLOOR);
    let lq = tape.log(q);
    let lp = tape.constant(Tensor::row_vector(p.iter().map(|v| v.ln()).collect()));
    let diff = tape.sub(lp, lq);
    let pc = tape.constant(Tensor::row_vector(p));
    let terms = tape.mul(pc, diff);
    tape.sum(terms)
}

fn gaussian_bin_mass(edges: &[f64], mu: f64, sigma: f64) -> Vec<f64> {
    use crate::grad::gaussian::phi;
    edges.windows(2).map(|w| phi((w[1] - mu) / sigma) - phi((w[0] - mu) / sigma)).collect()
}

fn floor_normalize(v: &[f64]) -> Vec<f64> {
    let f: Vec<f64> = v.iter().map(|x| x.max(Q_FLOOR)).collect();
    let s: f64 = f.iter().sum();
    f.into_iter().map(|x| x / s).collect()
}

/// JS bin grid and target masses. A Gaussian target is discretized into
/// [`JS_BINS`] bins spanning both distributions to ±[`JS_SPAN`] σ.
fn js_grid(target: &TargetDistribution, mu: f64, sigma: f64) -> (Vec<f64>, Vec<f64>) {
    match target {
        TargetDistribution::Gaussian { mu: mt, sigma: st } => {
            let lo = (mt - JS_SPAN * st).min(mu - JS_SPAN * sigma);
            let hi = (mt + JS_SPAN * st).max(mu + JS_SPAN * sigma);
            let edges: Vec<f64> = (0..=JS_BINS).map(|i| lo + (hi - lo) * i as f64 / JS_BINS as f64).collect();
            let p = floor_normalize(&gaussian_bin_mass(&edges, *mt, *st));
            (edges, p)
        }
        TargetDistribution::Histogram { edges, counts } => (edges.clone(), floor_normalize(counts)),
    }
}

fn js_var(tape: &mut Tape, mu: Var, sigma: Var, target: &TargetDistribution) -> Var {
    let (edges, p) = js_grid(target, tape.value(mu).item(), tape.value(sigma).item());
    let h = p.len();
    let e = tape.constant(Tensor::row_vector(edges));
    let mu_b = tape.broadcast(mu, 1, h + 1);
    let sig_b = tape.broadcast(sigma, 1, h + 1);
    let off = tape.sub(e, mu_b);
    let z = tape.div(off, sig_b);
    let cdf = tape.phi(z);
    let upper = tape.slice_cols(cdf, 1, h);
    let lower = tape.slice_cols(cdf, 0, h);
    let mass = tape.sub(upper, lower);
    let mass = tape.clamp_min(mass, Q_FLOOR);
    let total = tape.sum(mass);
    let total_b = tape.broadcast(total, 1, h);
    let q = tape.div(mass, total_b);
    let pc = tape.constant(Tensor::row_vector(p.clone()));
    let pq = tape.add(pc, q);
    let m = tape.scale(pq, 0.5);
    let lm = tape.log(m);
    let lp = tape.constant(Tensor::row_vector(p.iter().map(|v| v.ln()).collect()));
    let dp = tape.sub(lp, lm);
    let tp = tape.mul(pc, dp);
    let lq = tape.log(q);
    let dq = tape.sub(lq, lm);
    let tq = tape.mul(q, dq);
    let both = tape.add(tp, tq);
    let s = tape.sum(both);
    tape.scale(s, 0.5)
}

/// Divergence of the summary `(mu, sigma)` from a normalized target.
fn divergence_var(tape: &mut Tape, kind: Divergence, mu: Var, sigma: Var, target: &TargetDistribution) -> Var {
    match (kind, target) {
        (Divergence::Kl, TargetDistribution::Gaussian { mu: mt, sigma: st }) => kl_gaussian_var(tape, mu, sigma, *mt, *st),
        (Divergence::Kl, TargetDistribution::Histogram { edges, counts }) => kl_histogram_var(tape, mu, sigma, edges, counts),
        (Divergence::Js, t) => js_var(tape, mu, sigma, t),
    }
}

fn eval_plain(kind: Divergence, s: &GaussianSummary, target: &TargetDistribution) -> Result<f64> {
    check_sigma(s.sigma)?;
    target.validate()?;
    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::scalar(s.mu));
    let sigma = tape.constant(Tensor::scalar(s.sigma));
    let d = divergence_var(&mut tape, kind, mu, sigma, target);
    Ok(tape.value(d).item())
}

/// `ln(σ/σ_t) + (σ_t² + (μ_t − μ)²)/(2σ²) − 1/2`.
pub fn kl_gaussian(s: &GaussianSummary, mu_t: f64, sigma_t: f64) -> Result<f64> {
    eval_plain(Divergence::Kl, s, &TargetDistribution::Gaussian { mu: mu_t, sigma: sigma_t })
}

pub fn kl_histogram(s: &GaussianSummary, edges: &[f64], counts: &[f64]) -> Result<f64> {
    eval_plain(Divergence::Kl, s, &TargetDistribution::Histogram { edges: edges.to_vec(), counts: counts.to_vec() })
}

pub fn js_divergence(s: &GaussianSummary, target: &TargetDistribution) -> Result<f64> {
    eval_plain(Divergence::Js, s, target)
}

pub fn divergence(kind: Divergence, s: &GaussianSummary, target: &TargetDistribution) -> Result<f64> {
    eval_plain(kind, s, target)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    #[default]
    Param,
    Spatial,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchOptions {
    pub mode: SearchMode,
    pub divergence: Divergence,
    pub restarts: usize,
    pub max_iterations: usize,
    pub lr: f64,
    /// Minimum pre-tanh scale.
    pub beta: f64,
    pub keep_threshold: f64,
    pub seed: u64,
    /// Spatial box held fixed in parameter-only search; the whole domain
    /// when absent.
    pub spatial: Option<[AxisQuery; 3]>,
    /// Parameters held fixed in spatial-only search; the full ranges when
    /// absent.
    pub params: Option<Vec<AxisQuery>>,
    /// Per-axis initial center in physical units (x, y, z, parameters);
    /// random when absent.
    pub init_center: Vec<Option<f64>>,
    /// Per-axis initial pre-tanh scale `x_s`; random when absent.
    pub init_scale: Vec<Option<f64>>,
    /// Axes whose center is not optimized.
    pub frozen_center: Vec<usize>,
    /// Axes whose scale is not optimized.
    pub frozen_scale: Vec<usize>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            mode: SearchMode::Param,
            divergence: Divergence::Kl,
            restarts: 16,
            max_iterations: 1000,
            lr: 1e-2,
            beta: 0.02,
            keep_threshold: 1e-5,
            seed: 0,
            spatial: None,
            params: None,
            init_center: vec![],
            init_scale: vec![],
            frozen_center: vec![],
            frozen_scale: vec![],
        }
    }
}

/// Optimizable box: per axis, `x_s = x_sqrt² + β` and bounds
/// `tanh(x_c ∓ x_s)` in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    pub x_c: Vec<f64>,
    pub x_sqrt: Vec<f64>,
    pub beta: f64,
    /// Axes updated by gradient steps, per component.
    pub free_center: Vec<bool>,
    pub free_scale: Vec<bool>,
    pub lr: f64,
    pub iteration: usize,
}

impl SearchState {
    /// Clamps the state to `|x_c| ≤ CENTER_LIMIT`, `|x_sqrt| ≤ SQRT_LIMIT`.
    pub fn project(&mut self) {
        self.x_c.iter_mut().for_each(|v| *v = v.clamp(-CENTER_LIMIT, CENTER_LIMIT));
        self.x_sqrt.iter_mut().for_each(|v| *v = v.clamp(-SQRT_LIMIT, SQRT_LIMIT));
    }

    /// Derived `(x_min, x_max)` per axis, after projection.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let mut s = self.clone();
        s.project();
        s.x_c
            .iter()
            .zip(&s.x_sqrt)
            .map(|(c, q)| {
                let xs = q * q + s.beta;
                ((c - xs).tanh(), (c + xs).tanh())
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// `[lo, hi]` per parameter.
    pub params_physical: Vec<[f64; 2]>,
    pub center_physical: [f64; 3],
    /// Half-width per spatial axis.
    pub scale_physical: [f64; 3],
    pub divergence: f64,
    /// Propagated summary in physical units.
    pub mu: f64,
    pub sigma: f64,
    pub restart: usize,
    pub iteration: usize,
    /// Normalized `[lo, hi]` for every axis.
    pub bounds_normalized: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Boxes below the keep threshold, by increasing divergence.
    pub candidates: Vec<Candidate>,
    /// Lowest-divergence box seen in each restart.
    pub best: Vec<Candidate>,
    pub seconds: f64,
}

/// How each axis enters the query box.
#[derive(Clone, Copy, Debug)]
enum AxisRole {
    Optimized,
    Fixed(f64, f64),
}

struct Problem<'a> {
    traced: TracedModel,
    domain: &'a DomainSpec,
    roles: Vec<AxisRole>,
    target: TargetDistribution,
    opts: &'a SearchOptions,
}

struct Evaluation {
    loss: f64,
    summary: GaussianSummary,
    grad_c: Vec<f64>,
    grad_sqrt: Vec<f64>,
    bounds: Vec<[f64; 2]>,
}

fn normalized_axis(domain: &DomainSpec, a: usize, v: f64) -> f64 {
    if a < 3 {
        domain.spatial[a].normalize(v)
    } else {
        domain.params[a - 3].bounds().normalize(v)
    }
}

fn denormalized_axis(domain: &DomainSpec, a: usize, u: f64) -> f64 {
    if a < 3 {
        domain.spatial[a].denormalize(u)
    } else {
        domain.params[a - 3].bounds().denormalize(u)
    }
}

impl<'a> Problem<'a> {
    fn new(model: &'a ExplorableModel, target: &TargetDistribution, opts: &'a SearchOptions) -> Result<Self> {
        let domain = &model.domain;
        let n_axes = 3 + domain.n_params();
        if opts.restarts == 0 || opts.max_iterations == 0 {
            return Err(Error::Config("search needs at least one restart and one iteration".into()));
        }
        if !(opts.lr > 0.0 && opts.beta > 0.0 && opts.keep_threshold > 0.0) {
            return Err(Error::Config("lr, beta and keep_threshold must be positive".into()));
        }
        for v in [&opts.init_center, &opts.init_scale] {
            if !v.is_empty() && v.len() != n_axes {
                return Err(Error::Shape(format!("per-axis options need {n_axes} entries, got {}", v.len())));
            }
        }
        if opts.frozen_center.iter().chain(&opts.frozen_scale).any(|&a| a >= n_axes) {
            return Err(Error::Config(format!("frozen axis index must be below {n_axes}")));
        }
        let fixed = |q: &AxisQuery, a: usize| -> Result<AxisRole> {
            let mut region = QueryRegion::point([domain.spatial[0].min, domain.spatial[1].min, domain.spatial[2].min], &domain.params.iter().map(|p| p.min).collect::<Vec<_>>());
            if a < 3 {
                region.spatial[a] = *q;
            } else {
                region.params[a - 3] = *q;
            }
            let (lo, hi) = region.spans(domain)?[a].bounds();
            Ok(AxisRole::Fixed(lo, hi))
        };
        let mut roles = Vec::with_capacity(n_axes);
        for a in 0..n_axes {
            let optimized = match opts.mode {
                SearchMode::Param => a >= 3,
                SearchMode::Spatial => a < 3,
                SearchMode::Joint => true,
            };
            roles.push(if optimized {
                AxisRole::Optimized
            } else if a < 3 {
                let q = opts.spatial.map(|s| s[a]).unwrap_or(AxisQuery::Range(domain.spatial[a].min, domain.spatial[a].max));
                fixed(&q, a)?
            } else {
                let p = &domain.params[a - 3];
                let q = opts.params.as_ref().map(|v| v.get(a - 3).copied()).unwrap_or(Some(AxisQuery::Range(p.min, p.max)));
                fixed(&q.ok_or_else(|| Error::Shape("fixed parameter list too short".into()))?, a)?
            });
        }
        Ok(Self { traced: TracedModel::new(model), domain, roles, target: target.normalized(domain)?, opts })
    }

    fn initial_state(&self, restart: usize) -> SearchState {
        let o = self.opts;
        let mut rng = ChaCha8Rng::seed_from_u64(o.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(restart as u64));
        let n = self.roles.len();
        let mut x_c = vec![0.0; n];
        let mut x_sqrt = vec![0.0; n];
        for a in 0..n {
            x_c[a] = match o.init_center.get(a).copied().flatten() {
                Some(v) => normalized_axis(self.domain, a, v).clamp(-0.999_999, 0.999_999).atanh(),
                None => rng.random_range(-0.8f64..0.8).atanh(),
            };
            let xs = match o.init_scale.get(a).copied().flatten() {
                Some(s) => s,
                None => rng.random_range(0.05..0.5),
            };
            x_sqrt[a] = (xs - o.beta).max(0.0).sqrt();
        }
        let opt = |a: usize| matches!(self.roles[a], AxisRole::Optimized);
        let mut s = SearchState {
            x_c,
            x_sqrt,
            beta: o.beta,
            free_center: (0..n).map(|a| opt(a) && !o.frozen_center.contains(&a)).collect(),
            free_scale: (0..n).map(|a| opt(a) && !o.frozen_scale.contains(&a)).collect(),
            lr: o.lr,
            iteration: 0,
        };
        s.project();
        s
    }

    fn evaluate(&self, state: &SearchState) -> Result<Evaluation> {
        let n = self.roles.len();
        let mut tape = Tape::new();
        let xc = tape.leaf(Tensor::row_vector(state.x_c.clone()));
        let xq = tape.leaf(Tensor::row_vector(state.x_sqrt.clone()));
        let q2 = tape.square(xq);
        let xs = tape.add_scalar(q2, state.beta);
        let a = tape.sub(xc, xs);
        let b = tape.add(xc, xs);
        let lo_t = tape.tanh(a);
        let hi_t = tape.tanh(b);
        let mask: Vec<f64> = self.roles.iter().map(|r| matches!(r, AxisRole::Optimized) as u8 as f64).collect();
        let (mut flo, mut fhi) = (vec![0.0; n], vec![0.0; n]);
        for (i, r) in self.roles.iter().enumerate() {
            if let AxisRole::Fixed(l, h) = r {
                flo[i] = *l;
                fhi[i] = *h;
            }
        }
        let m = tape.constant(Tensor::row_vector(mask));
        let lo_m = tape.mul(lo_t, m);
        let hi_m = tape.mul(hi_t, m);
        let flo_c = tape.constant(Tensor::row_vector(flo));
        let fhi_c = tape.constant(Tensor::row_vector(fhi));
        let lo = tape.add(lo_m, flo_c);
        let hi = tape.add(hi_m, fhi_c);
        let ranged: Vec<bool> = (0..n).map(|i| tape.value(hi).data()[i] > tape.value(lo).data()[i]).collect();
        let bounds: Vec<[f64; 2]> = (0..n).map(|i| [tape.value(lo).data()[i], tape.value(hi).data()[i]]).collect();
        let s = propagate_traced(&mut tape, &self.traced, lo, hi, &ranged)?;
        let summary = GaussianSummary { mu: tape.value(s.mu).item(), sigma: tape.value(s.sigma).item() };
        check_sigma(summary.sigma)?;
        let loss = divergence_var(&mut tape, self.opts.divergence, s.mu, s.sigma, &self.target);
        let report = tape.backward(loss)?;
        Ok(Evaluation {
            loss: report.loss,
            summary,
            grad_c: report.get(xc).expect("leaf").data().to_vec(),
            grad_sqrt: report.get(xq).expect("leaf").data().to_vec(),
            bounds,
        })
    }

    fn candidate(&self, ev: &Evaluation, restart: usize, iteration: usize) -> Candidate {
        let d = self.domain;
        let phys = |a: usize, u: f64| denormalized_axis(d, a, u);
        let b = &ev.bounds;
        Candidate {
            params_physical: (3..b.len()).map(|a| [phys(a, b[a][0]), phys(a, b[a][1])]).collect(),
            center_physical: std::array::from_fn(|a| 0.5 * (phys(a, b[a][0]) + phys(a, b[a][1]))),
            scale_physical: std::array::from_fn(|a| 0.5 * (phys(a, b[a][1]) - phys(a, b[a][0]))),
            divergence: ev.loss,
            mu: d.denormalize_value(ev.summary.mu),
            sigma: ev.summary.sigma * d.value_span(),
            restart,
            iteration,
            bounds_normalized: b.clone(),
        }
    }

    /// Evaluation that tolerates non-finite results as `None`; other
    /// errors propagate.
    fn try_evaluate(&self, state: &SearchState) -> Result<Option<Evaluation>> {
        match self.evaluate(state) {
            Ok(ev) if ev.loss.is_finite() && ev.grad_c.iter().chain(&ev.grad_sqrt).all(|g| g.is_finite()) => Ok(Some(ev)),
            Ok(_) | Err(Error::NonFiniteGradient { .. }) | Err(Error::Distribution(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn step(state: &SearchState, ev: &Evaluation, lr: f64) -> SearchState {
        let mut next = state.clone();
        for a in 0..next.x_c.len() {
            if next.free_center[a] {
                next.x_c[a] -= lr * ev.grad_c[a];
            }
            if next.free_scale[a] {
                next.x_sqrt[a] -= lr * ev.grad_sqrt[a];
            }
        }
        next.project();
        next
    }

    fn run(&self, restart: usize) -> Result<(Vec<Candidate>, Candidate)> {
        let mut state = self.initial_state(restart);
        let mut ev = self
            .try_evaluate(&state)?
            .ok_or(Error::SearchDiverged { restart, iteration: 0, retries: 0, lr: state.lr })?;
        let mut kept = Vec::new();
        let mut best = self.candidate(&ev, restart, 0);
        let mut escape = false;
        loop {
            let it = state.iteration;
            if ev.loss < best.divergence {
                best = self.candidate(&ev, restart, it);
            }
            if ev.loss < self.opts.keep_threshold {
                kept.push(self.candidate(&ev, restart, it));
                escape = true;
            }
            if it + 1 >= self.opts.max_iterations {
                break;
            }
            let mut lr = if escape { state.lr * 10.0 } else { state.lr };
            escape = false;
            let mut retries = 0;
            let (next, next_ev) = loop {
                let next = Self::step(&state, &ev, lr);
                if let Some(e) = self.try_evaluate(&next)? {
                    break (next, e);
                }
                retries += 1;
                if retries > MAX_RETRIES {
                    return Err(Error::SearchDiverged { restart, iteration: it + 1, retries: MAX_RETRIES, lr });
                }
                lr *= 0.5;
            };
            state = next;
            state.iteration = it + 1;
            ev = next_ev;
        }
        Ok((kept, best))
    }
}

/// Multi-start gradient search for boxes whose propagated distribution
/// matches `target` (physical units).
pub fn search(model: &ExplorableModel, target: &TargetDistribution, opts: &SearchOptions) -> Result<SearchOutcome> {
    search_with_progress(model, target, opts, |_, _, _| {})
}

/// [`search`], calling `progress(restart, kept, best)` as each restart
/// finishes.
pub fn search_with_progress(
    model: &ExplorableModel,
    target: &TargetDistribution,
    opts: &SearchOptions,
    progress: impl Fn(usize, &[Candidate], &Candidate) + Sync,
) -> Result<SearchOutcome> {
    let start = Instant::now();
    let problem = Problem::new(model, target, opts)?;
    let runs: Vec<(Vec<Candidate>, Candidate)> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let (kept, best) = problem.run(r)?;
            progress(r, &kept, &best);
            Ok((kept, best))
        })
        .collect::<Result<_>>()?;
    let mut candidates = Vec::new();
    let mut best = Vec::with_capacity(runs.len());
    for (k, b) in runs {
        candidates.extend(k);
        best.push(b);
    }
    let key = |c: &Candidate| (c.divergence, c.restart, c.iteration);
    candidates.sort_by(|a, b| key(a).partial_cmp(&key(b)).expect("finite divergences"));
    Ok(SearchOutcome { candidates, best, seconds: start.elapsed().as_secs_f64() })
}

/// Physical query region of a candidate.
pub fn candidate_region(model: &ExplorableModel, c: &Candidate) -> QueryRegion {
    let d = &model.domain;
    let q = |a: usize| {
        let [lo, hi] = c.bounds_normalized[a];
        let (l, h) = (denormalized_axis(d, a, lo), denormalized_axis(d, a, hi));
        if lo == hi {
            AxisQuery::Point(l)
        } else {
            AxisQuery::Range(l, h)
        }
    };
    QueryRegion { spatial: std::array::from_fn(q), params: (3..3 + d.n_params()).map(q).collect() }
}

/// Divergence of a recorded candidate, recomputed by plain propagation.
pub fn replay(model: &ExplorableModel, target: &TargetDistribution, kind: Divergence, c: &Candidate) -> Result<f64> {
    let registry = NoiseSymbolRegistry::new();
    let (s, _) = propagate(model, &candidate_region(model, c), &registry, PafMode::Condensed)?;
    divergence(kind, &s, &target.normalized(&model.domain)?)
}

#[cfg(test)]
mod tests;
