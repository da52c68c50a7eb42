//! Probabilistic affine forms: random vectors carried as a center plus
//! coefficient vectors on standardized, independent noise symbols.
//!
//! A [`Paf`] holds `B` rows (independent query positions) of width `k`.
//! Shared terms are one symbol for every row; private terms are a distinct
//! symbol per row (`base + row`). The condensed `local` block is one
//! independent symbol per row and element, stored as a standard deviation.

pub mod traced;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::arch::{Activation, Fusion};
use crate::field::grid::FeatureGrid;
use crate::field::model::{DenseDecoder, ExplorableModel};
use crate::grad::gaussian::phi_pdf;
use crate::range_stats::{box_moments, AxisSpan};
use crate::region::QueryRegion;
use crate::tensor::{matmul_bt, Tensor};

pub type SymbolId = u64;

/// Terms whose largest coefficient magnitude is below this are dropped.
pub const PRUNE_TOL: f64 = 1e-12;

const FIRST_FRESH: SymbolId = 1 << 16;

static NEXT_REGISTRY: AtomicU64 = AtomicU64::new(1);

/// Hands out noise-symbol ids. Primary symbols are the model input axes and
/// keep the same id in every propagation; fresh ids come from an atomic
/// counter and never repeat.
#[derive(Debug)]
pub struct NoiseSymbolRegistry {
    id: u64,
    next: AtomicU64,
}

impl Default for NoiseSymbolRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl NoiseSymbolRegistry {
    pub fn new() -> Self {
        Self { id: NEXT_REGISTRY.fetch_add(1, Ordering::Relaxed), next: AtomicU64::new(FIRST_FRESH) }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Symbol of model input axis `axis` (0..3 spatial, 3.. parameters).
    pub fn primary(&self, axis: usize) -> SymbolId {
        axis as SymbolId
    }

    pub fn fresh(&self) -> SymbolId {
        self.fresh_block(1)
    }

    /// First id of `n` consecutive fresh ids.
    pub fn fresh_block(&self, n: usize) -> SymbolId {
        self.next.fetch_add(n.max(1) as u64, Ordering::Relaxed)
    }
}

/// How approximation-error symbols are kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PafMode {
    /// One independent symbol per element, variance-equivalent to all the
    /// fresh symbols that reached it.
    #[default]
    Condensed,
    /// Every fresh symbol is kept as its own term.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mu: f64,
    pub sigma: f64,
}

/// Least-squares linear fit of ReLU under `N(μ, σ²)` and its exact moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReluMoments {
    /// `a = Φ(μ/σ)`.
    pub slope: f64,
    /// `E[ReLU(x)]`.
    pub mean: f64,
    /// `Var[ReLU(x)]`.
    pub var: f64,
}

impl ReluMoments {
    pub fn intercept(&self, mu: f64) -> f64 {
        self.mean - self.slope * mu
    }

    /// Standard deviation left unexplained by the linear fit.
    #[inline(always)]
    pub fn fresh(&self, sigma: f64) -> f64 {
        (self.var - self.slope * self.slope * sigma * sigma).max(0.0).sqrt()
    }
}

/// Branch-free so batch loops vectorize; a non-positive `sigma` gives the
/// deterministic ReLU.
#[inline(always)]
pub fn relu_moments(mu: f64, sigma: f64) -> ReluMoments {
    let live = sigma > 0.0;
    let s = if live { sigma } else { 1.0 };
    let (cdf, dens) = phi_pdf(mu / s);
    let mean = mu * cdf + s * dens;
    let second = (mu * mu + s * s) * cdf + mu * s * dens;
    let var = (second - mean * mean).max(0.0);
    let step = if mu > 0.0 { 1.0 } else { 0.0 };
    ReluMoments {
        slope: if live { cdf } else { step },
        mean: if live { mean } else { mu.max(0.0) },
        var: if live { var } else { 0.0 },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paf {
    registry: u64,
    center: Tensor,
    shared: BTreeMap<SymbolId, Tensor>,
    private: BTreeMap<SymbolId, Tensor>,
    local: Option<(SymbolId, Tensor)>,
}

fn check_registry(a: u64, b: u64) -> Result<u64> {
    match (a, b) {
        (0, x) | (x, 0) => Ok(x),
        (x, y) if x == y => Ok(x),
        _ => Err(Error::RegistryMismatch),
    }
}

fn max_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x * y)
}

fn union_keys<'a>(a: &'a BTreeMap<SymbolId, Tensor>, b: &'a BTreeMap<SymbolId, Tensor>) -> Vec<SymbolId> {
    let mut keys: Vec<SymbolId> = a.keys().chain(b.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    keys
}

impl Paf {
    /// Deterministic form: no symbols.
    pub fn constant(center: Tensor) -> Self {
        Self { registry: 0, center, shared: BTreeMap::new(), private: BTreeMap::new(), local: None }
    }

    pub fn from_vec(center: Vec<f64>) -> Self {
        Self::constant(Tensor::row_vector(center))
    }

    /// Adds `coeff` (one row, or one per row) on shared symbol `id`.
    pub fn with_term(mut self, registry: &NoiseSymbolRegistry, id: SymbolId, coeff: Tensor) -> Result<Self> {
        self.registry = check_registry(self.registry, registry.id())?;
        let coeff = self.fit_rows(coeff)?;
        match self.shared.get_mut(&id) {
            Some(t) => t.add_assign(&coeff),
            None => {
                self.shared.insert(id, coeff);
            }
        }
        self.prune();
        Ok(self)
    }

    fn fit_rows(&self, t: Tensor) -> Result<Tensor> {
        let (b, k) = self.center.shape();
        if t.cols() != k || (t.rows() != b && t.rows() != 1) {
            return Err(Error::Shape(format!("coefficient {}x{} does not fit a {b}x{k} form", t.rows(), t.cols())));
        }
        if t.rows() == b {
            return Ok(t);
        }
        let mut out = Tensor::zeros(b, k);
        for r in 0..b {
            out.row_mut(r).copy_from_slice(t.row(0));
        }
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.center.rows()
    }

    pub fn width(&self) -> usize {
        self.center.cols()
    }

    pub fn registry(&self) -> u64 {
        self.registry
    }

    pub fn center(&self) -> &Tensor {
        &self.center
    }

    pub fn shared_terms(&self) -> &BTreeMap<SymbolId, Tensor> {
        &self.shared
    }

    pub fn private_terms(&self) -> &BTreeMap<SymbolId, Tensor> {
        &self.private
    }

    /// Condensed per-element standard deviation, when present.
    pub fn local(&self) -> Option<&Tensor> {
        self.local.as_ref().map(|(_, t)| t)
    }

    pub fn term_count(&self) -> usize {
        self.shared.len() + self.private.len()
    }

    pub fn is_deterministic(&self) -> bool {
        self.shared.is_empty() && self.private.is_empty() && self.local.is_none()
    }

    fn terms(&self) -> impl Iterator<Item = &Tensor> {
        self.shared.values().chain(self.private.values())
    }

    /// Per-element variance `Σ coeff²`.
    pub fn variance(&self) -> Tensor {
        let mut v = Tensor::zeros(self.rows(), self.width());
        for t in self.terms().chain(self.local()) {
            for (a, c) in v.data_mut().iter_mut().zip(t.data()) {
                *a += c * c;
            }
        }
        v
    }

    /// Gaussian summary of row `r` of a scalar form.
    pub fn summary(&self, r: usize) -> Result<GaussianSummary> {
        if self.width() != 1 {
            return Err(Error::Shape(format!("summary needs a scalar form, width is {}", self.width())));
        }
        let mut var = 0.0;
        for t in self.terms().chain(self.local()) {
            var += t.get(r, 0) * t.get(r, 0);
        }
        Ok(GaussianSummary { mu: self.center.get(r, 0), sigma: var.sqrt() })
    }

    pub fn summaries(&self) -> Result<Vec<GaussianSummary>> {
        (0..self.rows()).map(|r| self.summary(r)).collect()
    }

    fn prune(&mut self) {
        self.shared.retain(|_, t| max_abs(t) >= PRUNE_TOL);
        self.private.retain(|_, t| max_abs(t) >= PRUNE_TOL);
        if matches!(&self.local, Some((_, t)) if max_abs(t) < PRUNE_TOL) {
            self.local = None;
        }
    }

    fn set_local(&mut self, registry: &NoiseSymbolRegistry, std: Tensor) {
        self.local = Some((registry.fresh_block(std.rows()), std));
    }

    /// New fresh symbols with per-element standard deviation `std`.
    fn add_fresh(&mut self, registry: &NoiseSymbolRegistry, mode: PafMode, std: Tensor) -> Result<()> {
        self.registry = check_registry(self.registry, registry.id())?;
        match mode {
            PafMode::Condensed => {
                let merged = match self.local.take() {
                    Some((_, l)) => l.zip_map(&std, |a, b| (a * a + b * b).sqrt()),
                    None => std,
                };
                self.set_local(registry, merged);
            }
            PafMode::Exact => {
                let (b, k) = std.shape();
                for e in 0..k {
                    let mut t = Tensor::zeros(b, k);
                    let mut any = false;
                    for r in 0..b {
                        let v = std.get(r, e);
                        t.row_mut(r)[e] = v;
                        any |= v.abs() >= PRUNE_TOL;
                    }
                    if any {
                        self.private.insert(registry.fresh_block(b), t);
                    }
                }
            }
        }
        self.prune();
        Ok(())
    }

    /// `W·x + b` with `w: [out×k]`.
    pub fn linear(&self, w: &Tensor, b: &[f64]) -> Result<Paf> {
        if w.cols() != self.width() || b.len() != w.rows() {
            return Err(Error::Shape(format!(
                "linear map {}x{} with bias {} applied to width {}",
                w.rows(),
                w.cols(),
                b.len(),
                self.width()
            )));
        }
        let rows = self.rows();
        let mut center = matmul_bt(&self.center, w);
        for r in 0..rows {
            center.row_mut(r).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        // All terms go through one matmul.
        let n_terms = self.term_count();
        let mut shared = BTreeMap::new();
        let mut private = BTreeMap::new();
        if n_terms > 0 {
            let k = self.width();
            let mut stacked = Vec::with_capacity(n_terms * rows * k);
            for t in self.terms() {
                stacked.extend_from_slice(t.data());
            }
            let out = matmul_bt(&Tensor::from_vec(n_terms * rows, k, stacked), w);
            let o = w.rows();
            let chunk = |i: usize| Tensor::from_vec(rows, o, out.data()[i * rows * o..(i + 1) * rows * o].to_vec());
            for (i, id) in self.shared.keys().chain(self.private.keys()).enumerate() {
                if i < self.shared.len() {
                    shared.insert(*id, chunk(i));
                } else {
                    private.insert(*id, chunk(i));
                }
            }
        }
        let local = self.local.as_ref().map(|(id, l)| {
            let v = matmul_bt(&l.squared(), &w.squared());
            (*id, v.map(f64::sqrt))
        });
        let mut out = Paf { registry: self.registry, center, shared, private, local };
        out.prune();
        Ok(out)
    }

    fn check_pair(&self, other: &Paf) -> Result<u64> {
        if self.center.shape() != other.center.shape() {
            return Err(Error::Shape(format!(
                "forms of shape {:?} and {:?} cannot be combined",
                self.center.shape(),
                other.center.shape()
            )));
        }
        check_registry(self.registry, other.registry)
    }

    /// Element-wise sum.
    pub fn add(&self, other: &Paf, registry: &NoiseSymbolRegistry) -> Result<Paf> {
        let reg = self.check_pair(other)?;
        let sum_map = |a: &BTreeMap<SymbolId, Tensor>, b: &BTreeMap<SymbolId, Tensor>| {
            union_keys(a, b)
                .into_iter()
                .map(|id| {
                    let t = match (a.get(&id), b.get(&id)) {
                        (Some(x), Some(y)) => x.zip_map(y, |p, q| p + q),
                        (Some(x), None) | (None, Some(x)) => x.clone(),
                        (None, None) => unreachable!(),
                    };
                    (id, t)
                })
                .collect()
        };
        let mut out = Paf {
            registry: reg,
            center: self.center.zip_map(&other.center, |p, q| p + q),
            shared: sum_map(&self.shared, &other.shared),
            private: sum_map(&self.private, &other.private),
            local: None,
        };
        match (&self.local, &other.local) {
            (Some((ia, la)), Some((ib, lb))) if ia == ib => out.local = Some((*ia, la.zip_map(lb, |p, q| (p + q).abs()))),
            (Some((_, la)), Some((_, lb))) => {
                out.registry = check_registry(out.registry, registry.id())?;
                out.set_local(registry, la.zip_map(lb, |p, q| p.hypot(q)));
            }
            (Some(l), None) | (None, Some(l)) => out.local = Some(l.clone()),
            (None, None) => {}
        }
        out.prune();
        Ok(out)
    }

    /// Element-wise product with exact first and second moments under
    /// independent standard Gaussian symbols.
    pub fn hadamard(&self, other: &Paf, registry: &NoiseSymbolRegistry, mode: PafMode) -> Result<Paf> {
        self.check_pair(other)?;
        let (a0, b0) = (&self.center, &other.center);
        let (rows, k) = a0.shape();

        // Norms and shared inner products include the local blocks.
        let a2 = self.variance();
        let b2 = other.variance();
        let mut dot = Tensor::zeros(rows, k);
        let mut add_dot = |x: &Tensor, y: &Tensor| {
            for ((d, p), q) in dot.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                *d += p * q;
            }
        };
        for (id, t) in &self.shared {
            if let Some(u) = other.shared.get(id) {
                add_dot(t, u);
            }
        }
        for (id, t) in &self.private {
            if let Some(u) = other.private.get(id) {
                add_dot(t, u);
            }
        }
        let same_local = matches!((&self.local, &other.local), (Some((i, _)), Some((j, _))) if i == j);
        if same_local {
            add_dot(self.local().unwrap(), other.local().unwrap());
        }

        let combine = |a: &BTreeMap<SymbolId, Tensor>, b: &BTreeMap<SymbolId, Tensor>| -> BTreeMap<SymbolId, Tensor> {
            union_keys(a, b)
                .into_iter()
                .map(|id| {
                    let mut t = Tensor::zeros(rows, k);
                    if let Some(x) = a.get(&id) {
                        t.add_assign(&mul(x, b0));
                    }
                    if let Some(y) = b.get(&id) {
                        t.add_assign(&mul(y, a0));
                    }
                    (id, t)
                })
                .collect()
        };

        let center = {
            let mut c = mul(a0, b0);
            c.add_assign(&dot);
            c
        };
        // Linear part carried by the local blocks.
        let local_linear = match (self.local(), other.local()) {
            (Some(la), Some(lb)) if same_local => Some(mul(la, b0).zip_map(&mul(lb, a0), |p, q| (p + q).abs())),
            (la, lb) => {
                let mut v: Option<Tensor> = None;
                if let Some(la) = la {
                    v = Some(mul(la, b0).squared());
                }
                if let Some(lb) = lb {
                    let t = mul(lb, a0).squared();
                    v = Some(match v {
                        Some(mut x) => {
                            x.add_assign(&t);
                            x
                        }
                        None => t,
                    });
                }
                v.map(|x| x.map(f64::sqrt))
            }
        };
        let quad = a2.zip_map(&b2, |p, q| p * q).zip_map(&dot, |s, d| (s + d * d).sqrt());

        let mut out = Paf {
            registry: check_registry(self.registry, other.registry)?,
            center,
            shared: combine(&self.shared, &other.shared),
            private: combine(&self.private, &other.private),
            local: None,
        };
        if let Some(l) = local_linear {
            out.set_local(registry, l);
        }
        out.add_fresh(registry, mode, quad)?;
        Ok(out)
    }

    /// Element-wise activation, linearized per element under a Gaussian view
    /// of its input.
    pub fn activation(&self, act: Activation, registry: &NoiseSymbolRegistry, mode: PafMode) -> Result<Paf> {
        if act == Activation::Identity {
            return Ok(self.clone());
        }
        let var = self.variance();
        let (rows, k) = self.center.shape();
        let mut slope = Tensor::zeros(rows, k);
        let mut center = Tensor::zeros(rows, k);
        let mut fresh = Tensor::zeros(rows, k);
        for i in 0..rows * k {
            let mu = self.center.data()[i];
            let sigma = var.data()[i].sqrt();
            let m = relu_moments(mu, sigma);
            slope.data_mut()[i] = m.slope;
            center.data_mut()[i] = m.mean;
            fresh.data_mut()[i] = m.fresh(sigma);
        }
        let scale = |map: &BTreeMap<SymbolId, Tensor>| map.iter().map(|(id, t)| (*id, mul(t, &slope))).collect();
        let mut out = Paf {
            registry: self.registry,
            center,
            shared: scale(&self.shared),
            private: scale(&self.private),
            local: self.local.as_ref().map(|(id, l)| (*id, mul(l, &slope).map(f64::abs))),
        };
        out.add_fresh(registry, mode, fresh)?;
        Ok(out)
    }

    /// Column-wise concatenation.
    pub fn concat_cols(parts: &[&Paf]) -> Result<Paf> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let rows = first.rows();
        let mut registry = 0;
        for p in parts {
            if p.rows() != rows {
                return Err(Error::Shape("concatenated forms differ in row count".into()));
            }
            registry = check_registry(registry, p.registry)?;
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.width()).collect();
        let total: usize = widths.iter().sum();
        let place = |pieces: Vec<(usize, &Tensor)>| {
            let mut t = Tensor::zeros(rows, total);
            for (off, src) in pieces {
                for r in 0..rows {
                    t.row_mut(r)[off..off + src.cols()].copy_from_slice(src.row(r));
                }
            }
            t
        };
        let offsets: Vec<usize> = widths.iter().scan(0, |acc, w| {
            let o = *acc;
            *acc += w;
            Some(o)
        }).collect();
        let gather = |get: &dyn Fn(&Paf) -> &BTreeMap<SymbolId, Tensor>| -> BTreeMap<SymbolId, Tensor> {
            let mut keys: Vec<SymbolId> = parts.iter().flat_map(|p| get(p).keys().copied()).collect();
            keys.sort_unstable();
            keys.dedup();
            keys.into_iter()
                .map(|id| {
                    let pieces = parts
                        .iter()
                        .zip(&offsets)
                        .filter_map(|(p, &o)| get(p).get(&id).map(|t| (o, t)))
                        .collect();
                    (id, place(pieces))
                })
                .collect()
        };
        let center = place(parts.iter().zip(&offsets).map(|(p, &o)| (o, &p.center)).collect());
        let locals: Vec<(usize, &Tensor)> =
            parts.iter().zip(&offsets).filter_map(|(p, &o)| p.local().map(|l| (o, l))).collect();
        let local_id = parts.iter().find_map(|p| p.local.as_ref().map(|(id, _)| *id));
        let local = local_id.map(|id| (id, place(locals)));
        Ok(Paf {
            registry,
            center,
            shared: gather(&|p| &p.shared),
            private: gather(&|p| &p.private),
            local,
        })
    }

    /// Repeats a one-row form over `n` rows. Its private symbols become
    /// shared, since every row now reads the same random variable.
    pub fn broadcast_rows(&self, n: usize, registry: &NoiseSymbolRegistry) -> Result<Paf> {
        if self.rows() != 1 {
            return Err(Error::Shape(format!("broadcast needs one row, form has {}", self.rows())));
        }
        let rep = |t: &Tensor| {
            let mut out = Tensor::zeros(n, t.cols());
            for r in 0..n {
                out.row_mut(r).copy_from_slice(t.row(0));
            }
            out
        };
        let mut shared: BTreeMap<SymbolId, Tensor> = self.shared.iter().map(|(id, t)| (*id, rep(t))).collect();
        for (id, t) in &self.private {
            shared.insert(*id, rep(t));
        }
        let mut out = Paf { registry: self.registry, center: rep(&self.center), shared, private: BTreeMap::new(), local: None };
        if let Some(l) = self.local() {
            out.registry = check_registry(out.registry, registry.id())?;
            out.set_local(registry, rep(l));
        }
        Ok(out)
    }

    /// Adds a deterministic `[B×k]` offset to the center.
    pub fn shift(&mut self, offset: &Tensor) -> Result<()> {
        if offset.shape() != self.center.shape() {
            return Err(Error::Shape("offset shape differs from the form".into()));
        }
        self.center.add_assign(offset);
        Ok(())
    }

    /// Row `r` as a one-row form.
    pub fn row(&self, r: usize) -> Paf {
        let pick = |t: &Tensor| Tensor::row_vector(t.row(r).to_vec());
        let mut out = Paf {
            registry: self.registry,
            center: pick(&self.center),
            shared: self.shared.iter().map(|(id, t)| (*id, pick(t))).collect(),
            private: self.private.iter().map(|(id, t)| (*id + r as u64, pick(t))).collect(),
            local: self.local.as_ref().map(|(id, t)| (*id + r as u64, pick(t))),
        };
        out.prune();
        out
    }

    /// Rewrites the condensed block as one private symbol per element,
    /// keeping each symbol's identity.
    pub fn materialize_local(&self) -> Paf {
        let mut out = self.clone();
        if let Some((id, l)) = out.local.take() {
            let (b, k) = l.shape();
            for c in 0..k {
                let mut t = Tensor::zeros(b, k);
                for r in 0..b {
                    t.row_mut(r)[c] = l.get(r, c);
                }
                out.private.insert(id + ((c as u64) << 40), t);
            }
            out.prune();
        }
        out
    }

    /// Symbol-id to coefficient map for row `r`, column `c`.
    pub(crate) fn symbols_at(&self, r: usize, c: usize) -> BTreeMap<SymbolId, f64> {
        let mut out = BTreeMap::new();
        for (id, t) in &self.shared {
            out.insert(*id, t.get(r, c));
        }
        for (id, t) in &self.private {
            out.insert(*id + r as u64, t.get(r, c));
        }
        if let Some((id, t)) = &self.local {
            // Distinct per element: offset by the column as well.
            out.insert(*id + r as u64 + ((c as u64) << 40), t.get(r, c));
        }
        out
    }
}

/// `Cov` between row `ra` of scalar form `a` and row `rb` of scalar form `b`:
/// the sum over symbols they share.
pub fn covariance_rows(a: &Paf, ra: usize, b: &Paf, rb: usize) -> Result<f64> {
    if a.width() != 1 || b.width() != 1 {
        return Err(Error::Shape("covariance needs scalar forms".into()));
    }
    check_registry(a.registry, b.registry)?;
    let sa = a.symbols_at(ra, 0);
    let sb = b.symbols_at(rb, 0);
    Ok(sa.iter().filter_map(|(id, x)| sb.get(id).map(|y| x * y)).sum())
}

pub fn covariance(a: &Paf, b: &Paf) -> Result<f64> {
    covariance_rows(a, 0, b, 0)
}

/// Pearson correlation of two scalar forms, clamped to `[-1, 1]`.
pub fn pearson_rows(a: &Paf, ra: usize, b: &Paf, rb: usize) -> Result<f64> {
    let cov = covariance_rows(a, ra, b, rb)?;
    let sa = a.summary(ra)?.sigma;
    let sb = b.summary(rb)?.sigma;
    if !(sa > 0.0 && sb > 0.0) {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((cov / (sa * sb)).clamp(-1.0, 1.0))
}

pub fn pearson(a: &Paf, b: &Paf) -> Result<f64> {
    pearson_rows(a, 0, b, 0)
}

/// Input form of one structure over the spans of its own axes.
pub fn structure_paf(
    grid: &FeatureGrid,
    spans: &[AxisSpan],
    registry: &NoiseSymbolRegistry,
    mode: PafMode,
) -> Result<Paf> {
    let axes = grid.structure().axes();
    if spans.iter().all(|s| !s.is_range()) {
        let u: Vec<f64> = spans.iter().map(|s| s.bounds().0).collect();
        return Ok(Paf::from_vec(grid.interpolate(&u)?));
    }
    let st = box_moments(grid, spans)?.stats(spans);
    let mut paf = Paf::from_vec(st.center);
    for (k, s) in spans.iter().enumerate() {
        if s.is_range() {
            paf = paf.with_term(registry, registry.primary(axes[k]), Tensor::row_vector(st.beta[k].clone()))?;
        }
    }
    paf.add_fresh(registry, mode, Tensor::row_vector(st.residual))?;
    Ok(paf)
}

/// Input forms of every structure, spatial first, for normalized `spans`
/// over all model axes (x, y, z, parameters).
#[derive(Clone, Debug)]
pub struct InputPafs {
    pub spatial: Vec<Paf>,
    pub lines: Vec<Paf>,
}

pub fn paf_from_spans(
    model: &ExplorableModel,
    spans: &[AxisSpan],
    registry: &NoiseSymbolRegistry,
    mode: PafMode,
) -> Result<InputPafs> {
    if spans.len() != 3 + model.n_params() {
        return Err(Error::Shape(format!("expected {} spans, got {}", 3 + model.n_params(), spans.len())));
    }
    let build = |g: &FeatureGrid| {
        let s: Vec<AxisSpan> = g.structure().axes().iter().map(|&a| spans[a]).collect();
        structure_paf(g, &s, registry, mode)
    };
    Ok(InputPafs {
        spatial: model.features.spatial.iter().map(build).collect::<Result<_>>()?,
        lines: model.features.lines.iter().map(build).collect::<Result<_>>()?,
    })
}

pub fn paf_from_range(
    model: &ExplorableModel,
    region: &QueryRegion,
    registry: &NoiseSymbolRegistry,
    mode: PafMode,
) -> Result<InputPafs> {
    paf_from_spans(model, &region.spans(&model.domain)?, registry, mode)
}

/// Fuses structure forms as the model fuses feature vectors.
pub fn fuse(parts: &[Paf], fusion: Fusion, registry: &NoiseSymbolRegistry, mode: PafMode) -> Result<Paf> {
    let mut it = parts.iter();
    let mut acc = it.next().ok_or_else(|| Error::Config("no structures to fuse".into()))?.clone();
    for p in it {
        acc = match fusion {
            Fusion::Hadamard => acc.hadamard(p, registry, mode)?,
            Fusion::Addition => acc.add(p, registry)?,
        };
    }
    Ok(acc)
}

/// Pushes an ensemble-feature form through the decoder.
pub fn propagate_decoder(dec: &DenseDecoder, input: &Paf, registry: &NoiseSymbolRegistry, mode: PafMode) -> Result<Paf> {
    let pre = input.linear(&dec.weights[0], &dec.biases[0])?;
    decode_from(dec, pre, 0, registry, mode)
}

/// Continues the decoder from the pre-activation output of layer `layer`.
pub fn decode_from(
    dec: &DenseDecoder,
    pre: Paf,
    layer: usize,
    registry: &NoiseSymbolRegistry,
    mode: PafMode,
) -> Result<Paf> {
    let last = dec.weights.len() - 1;
    let mut h = pre;
    for l in layer..last {
        h = h.activation(dec.activation, registry, mode)?;
        h = h.linear(&dec.weights[l + 1], &dec.biases[l + 1])?;
    }
    Ok(h)
}

/// Output form over normalized `spans`.
pub fn propagate_spans(
    model: &ExplorableModel,
    spans: &[AxisSpan],
    registry: &NoiseSymbolRegistry,
    mode: PafMode,
) -> Result<(GaussianSummary, Paf)> {
    let inputs = paf_from_spans(model, spans, registry, mode)?;
    let s = fuse(&inputs.spatial, model.arch.fusion, registry, mode)?;
    let p = fuse(&inputs.lines, model.arch.fusion, registry, mode)?;
    let feat = Paf::concat_cols(&[&s, &p])?;
    let out = propagate_decoder(&model.dense_decoder(), &feat, registry, mode)?;
    Ok((out.summary(0)?, out))
}

/// Propagates a physical-unit region through the model; the summary is in
/// normalized value units.
pub fn propagate(
    model: &ExplorableModel,
    region: &QueryRegion,
    registry: &NoiseSymbolRegistry,
    mode: PafMode,
) -> Result<(GaussianSummary, Paf)> {
    propagate_spans(model, &region.spans(&model.domain)?, registry, mode)
}
