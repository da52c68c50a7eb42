//! Condensed propagation recorded on a [`Tape`], differentiable with respect
//! to the query box bounds.
//!
//! Every form carries one coefficient row per ranged axis (in axis order),
//! so products and sums align without id lookups.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::arch::{Activation, Fusion};
use crate::field::grid::FeatureGrid;
use crate::field::model::{DenseDecoder, ExplorableModel};
use crate::grad::gaussian::{pdf, phi, INV_SQRT_2PI};
use crate::grad::{CustomOp, Tape, Var};
use crate::range_stats::{BoxMomentsOp, RESIDUAL_CUTOFF};
use crate::tensor::Tensor;

use super::relu_moments;

const SQRT_12: f64 = 3.464_101_615_137_754_6;

#[derive(Clone, Copy, Debug)]
pub struct TracedPaf {
    /// `[1×k]`.
    pub center: Var,
    /// `[M×k]`, one row per ranged axis.
    pub coeffs: Option<Var>,
    /// `[1×k]` condensed standard deviation.
    pub local: Option<Var>,
}

/// Output summary handles, each `[1×1]`.
#[derive(Clone, Copy, Debug)]
pub struct TracedSummary {
    pub mu: Var,
    pub sigma: Var,
}

/// ReLU linear fit under `N(μ, σ²)`: inputs `μ` and `σ` (`[1×k]`), output
/// `[3×k]` with rows slope, mean and variance.
#[derive(Debug)]
pub struct ReluMomentsOp;

impl CustomOp for ReluMomentsOp {
    fn name(&self) -> &'static str {
        "relu_moments"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (mu, sigma) = (inputs[0], inputs[1]);
        let k = mu.cols();
        let mut out = Tensor::zeros(3, k);
        for e in 0..k {
            let m = relu_moments(mu.data()[e], sigma.data()[e]);
            out.row_mut(0)[e] = m.slope;
            out.row_mut(1)[e] = m.mean;
            out.row_mut(2)[e] = m.var;
        }
        out
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (mu, sigma) = (inputs[0], inputs[1]);
        let k = mu.cols();
        let mut gmu = Tensor::zeros(1, k);
        let mut gsig = Tensor::zeros(1, k);
        for e in 0..k {
            let (m, s) = (mu.data()[e], sigma.data()[e]);
            let (ga, ge, gv) = (grad.get(0, e), grad.get(1, e), grad.get(2, e));
            let mean = output.get(1, e);
            let (dm, ds) = if s > 0.0 {
                let z = m / s;
                let (cdf, dens) = (phi(z), pdf(z));
                let da = (dens / s, -dens * z / s);
                let de = (cdf, dens);
                let dv = (2.0 * mean * (1.0 - cdf), 2.0 * s * cdf - 2.0 * mean * dens);
                (ga * da.0 + ge * de.0 + gv * dv.0, ga * da.1 + ge * de.1 + gv * dv.1)
            } else {
                let step = if m > 0.0 { 1.0 } else { 0.0 };
                (ge * step, if m == 0.0 { ge * INV_SQRT_2PI } else { 0.0 })
            };
            gmu.data_mut()[e] = dm;
            gsig.data_mut()[e] = ds;
        }
        vec![gmu, gsig]
    }
}

fn add_opt(tape: &mut Tape, a: Option<Var>, b: Option<Var>) -> Option<Var> {
    match (a, b) {
        (Some(x), Some(y)) => Some(tape.add(x, y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// `Σ coeff² + local²` as `[1×k]`, or `None` when deterministic.
fn norm2(tape: &mut Tape, p: &TracedPaf) -> Option<Var> {
    let c = p.coeffs.map(|a| {
        let sq = tape.square(a);
        tape.sum_rows(sq)
    });
    let l = p.local.map(|l| tape.square(l));
    add_opt(tape, c, l)
}

impl TracedPaf {
    pub fn constant(center: Var) -> Self {
        Self { center, coeffs: None, local: None }
    }

    pub fn hadamard(&self, tape: &mut Tape, other: &TracedPaf) -> TracedPaf {
        let (a0, b0) = (self.center, other.center);
        let dot = match (self.coeffs, other.coeffs) {
            (Some(a), Some(b)) => {
                let ab = tape.mul(a, b);
                Some(tape.sum_rows(ab))
            }
            _ => None,
        };
        let prod = tape.mul(a0, b0);
        let center = match dot {
            Some(d) => tape.add(prod, d),
            None => prod,
        };
        let ca = self.coeffs.map(|a| tape.mul_row(a, b0));
        let cb = other.coeffs.map(|b| tape.mul_row(b, a0));
        let coeffs = add_opt(tape, ca, cb);

        let la = self.local.map(|l| {
            let t = tape.mul(l, b0);
            tape.square(t)
        });
        let lb = other.local.map(|l| {
            let t = tape.mul(l, a0);
            tape.square(t)
        });
        let quad = match (norm2(tape, self), norm2(tape, other)) {
            (Some(na), Some(nb)) => {
                let q = tape.mul(na, nb);
                Some(match dot {
                    Some(d) => {
                        let d2 = tape.square(d);
                        tape.add(q, d2)
                    }
                    None => q,
                })
            }
            _ => None,
        };
        let l2 = add_opt(tape, la, lb);
        let l2 = add_opt(tape, l2, quad);
        TracedPaf { center, coeffs, local: l2.map(|v| tape.sqrt(v)) }
    }

    pub fn add(&self, tape: &mut Tape, other: &TracedPaf) -> TracedPaf {
        let center = tape.add(self.center, other.center);
        let coeffs = add_opt(tape, self.coeffs, other.coeffs);
        let la = self.local.map(|l| tape.square(l));
        let lb = other.local.map(|l| tape.square(l));
        let l2 = add_opt(tape, la, lb);
        TracedPaf { center, coeffs, local: l2.map(|v| tape.sqrt(v)) }
    }

    /// `W·x + b` with `w: [out×k]`, `b: [1×out]` and `w2 = w⊙w`.
    pub fn linear(&self, tape: &mut Tape, w: Var, b: Var, w2: Var) -> TracedPaf {
        let z = tape.matmul_t(self.center, w);
        let center = tape.add_row(z, b);
        let coeffs = self.coeffs.map(|a| tape.matmul_t(a, w));
        let local = self.local.map(|l| {
            let sq = tape.square(l);
            let v = tape.matmul_t(sq, w2);
            tape.sqrt(v)
        });
        TracedPaf { center, coeffs, local }
    }

    pub fn activation(&self, tape: &mut Tape, act: Activation) -> TracedPaf {
        if act == Activation::Identity {
            return *self;
        }
        let Some(var) = norm2(tape, self) else {
            let center = tape.relu(self.center);
            return TracedPaf::constant(center);
        };
        let sigma = tape.sqrt(var);
        let mom = tape.custom(Arc::new(ReluMomentsOp), &[self.center, sigma]);
        let slope = tape.slice_rows(mom, 0, 1);
        let mean = tape.slice_rows(mom, 1, 1);
        let v = tape.slice_rows(mom, 2, 1);
        let a2 = tape.square(slope);
        let explained = tape.mul(a2, var);
        let gap = tape.sub(v, explained);
        let fresh2 = tape.clamp_min(gap, 0.0);
        let kept = self.local.map(|l| {
            let sq = tape.square(l);
            tape.mul(a2, sq)
        });
        let l2 = match kept {
            Some(k) => tape.add(k, fresh2),
            None => fresh2,
        };
        let local = Some(tape.sqrt(l2));
        let coeffs = self.coeffs.map(|a| tape.mul_row(a, slope));
        TracedPaf { center: mean, coeffs, local }
    }

    pub fn summary(&self, tape: &mut Tape) -> TracedSummary {
        let sigma = match norm2(tape, self) {
            Some(v) => tape.sqrt(v),
            None => tape.constant(Tensor::zeros(1, 1)),
        };
        TracedSummary { mu: self.center, sigma }
    }
}

fn concat(tape: &mut Tape, parts: &[TracedPaf], widths: &[usize], m: usize) -> TracedPaf {
    let centers: Vec<Var> = parts.iter().map(|p| p.center).collect();
    let center = tape.concat_cols(&centers);
    let coeffs = if parts.iter().any(|p| p.coeffs.is_some()) {
        let cols: Vec<Var> = parts
            .iter()
            .zip(widths)
            .map(|(p, &w)| p.coeffs.unwrap_or_else(|| tape.constant(Tensor::zeros(m, w))))
            .collect();
        Some(tape.concat_cols(&cols))
    } else {
        None
    };
    let local = if parts.iter().any(|p| p.local.is_some()) {
        let cols: Vec<Var> = parts
            .iter()
            .zip(widths)
            .map(|(p, &w)| p.local.unwrap_or_else(|| tape.constant(Tensor::zeros(1, w))))
            .collect();
        Some(tape.concat_cols(&cols))
    } else {
        None
    };
    TracedPaf { center, coeffs, local }
}

fn select_cols(tape: &mut Tape, v: Var, axes: &[usize]) -> Var {
    let cols: Vec<Var> = axes.iter().map(|&a| tape.slice_cols(v, a, 1)).collect();
    if cols.len() == 1 {
        cols[0]
    } else {
        tape.concat_cols(&cols)
    }
}

/// Model pieces shared across traced propagations.
#[derive(Clone, Debug)]
pub struct TracedModel {
    pub spatial: Vec<Arc<FeatureGrid>>,
    pub lines: Vec<Arc<FeatureGrid>>,
    pub decoder: DenseDecoder,
    squared: Vec<Tensor>,
    fusion: Fusion,
    widths: [usize; 2],
    axis_names: Vec<String>,
}

impl TracedModel {
    pub fn new(model: &ExplorableModel) -> Self {
        let decoder = model.dense_decoder();
        let squared = decoder.weights.iter().map(Tensor::squared).collect();
        Self {
            spatial: model.features.spatial.iter().map(|g| Arc::new(g.clone())).collect(),
            lines: model.features.lines.iter().map(|g| Arc::new(g.clone())).collect(),
            decoder,
            squared,
            fusion: model.arch.fusion,
            widths: [model.arch.spatial_dim, model.arch.param_dim],
            axis_names: (0..3 + model.n_params()).map(|a| model.domain.axis_name(a)).collect(),
        }
    }

    pub fn n_axes(&self) -> usize {
        self.axis_names.len()
    }
}

/// Records propagation over the box `[lo, hi]` (each `[1×(3+m)]`, normalized
/// coordinates). `ranged[a]` marks axes carried as uniform ranges; the others
/// are points at `lo`.
pub fn propagate_traced(
    tape: &mut Tape,
    model: &TracedModel,
    lo: Var,
    hi: Var,
    ranged: &[bool],
) -> Result<TracedSummary> {
    let n_axes = model.n_axes();
    if ranged.len() != n_axes || tape.value(lo).shape() != (1, n_axes) || tape.value(hi).shape() != (1, n_axes) {
        return Err(Error::Shape(format!("traced propagation needs {n_axes} axes")));
    }
    for a in 0..n_axes {
        let (l, h) = (tape.value(lo).data()[a], tape.value(hi).data()[a]);
        if !(-1.0..=1.0).contains(&l) || !(-1.0..=1.0).contains(&h) || !(l <= h) {
            return Err(Error::Domain { axis: model.axis_names[a].clone(), value: if l < -1.0 || l > h { l } else { h } });
        }
    }
    let order: Vec<usize> = (0..n_axes).filter(|&a| ranged[a]).collect();
    let m = order.len();

    let build = |tape: &mut Tape, g: &Arc<FeatureGrid>| -> TracedPaf {
        let axes = g.structure().axes();
        let mask: Vec<bool> = axes.iter().map(|&a| ranged[a]).collect();
        let c = g.channels();
        let lo_s = select_cols(tape, lo, &axes);
        let hi_s = select_cols(tape, hi, &axes);
        let op = Arc::new(BoxMomentsOp { grid: g.clone(), ranged: mask.clone() });
        let mom = tape.custom(op, &[lo_s, hi_s]);
        let mean = tape.slice_rows(mom, 0, 1);
        if mask.iter().all(|r| !r) {
            return TracedPaf::constant(mean);
        }
        let second = tape.slice_rows(mom, 1, 1);
        let mut betas: Vec<Option<Var>> = vec![None; axes.len()];
        let mut explained: Option<Var> = None;
        for (k, &a) in axes.iter().enumerate() {
            if !ranged[a] {
                continue;
            }
            let l = tape.slice_cols(lo, a, 1);
            let h = tape.slice_cols(hi, a, 1);
            let s = tape.add(l, h);
            let mu = tape.scale(s, 0.5);
            let w = tape.sub(h, l);
            let sd = tape.scale(w, 1.0 / SQRT_12);
            let mu_b = tape.broadcast(mu, 1, c);
            let sd_b = tape.broadcast(sd, 1, c);
            let cross = tape.slice_rows(mom, 2 + k, 1);
            let mm = tape.mul(mean, mu_b);
            let centered = tape.sub(cross, mm);
            let beta = tape.div(centered, sd_b);
            let b2 = tape.square(beta);
            explained = add_opt(tape, explained, Some(b2));
            betas[k] = Some(beta);
        }
        let mean2 = tape.square(mean);
        let var = tape.sub(second, mean2);
        let gap = tape.sub(var, explained.expect("ranged structure"));
        // Residuals at rounding level are exactly zero, as in the plain path.
        let keep: Vec<f64> = tape
            .value(gap)
            .data()
            .iter()
            .zip(tape.value(var).data())
            .map(|(g, v)| if *g <= RESIDUAL_CUTOFF * v.abs() { 0.0 } else { 1.0 })
            .collect();
        let keep = tape.constant(Tensor::row_vector(keep));
        let clamped = tape.clamp_min(gap, 0.0);
        let masked = tape.mul(clamped, keep);
        let residual = tape.sqrt(masked);
        let rows: Vec<Var> = order
            .iter()
            .map(|&a| match axes.iter().position(|&x| x == a) {
                Some(k) => betas[k].unwrap_or_else(|| tape.constant(Tensor::zeros(1, c))),
                None => tape.constant(Tensor::zeros(1, c)),
            })
            .collect();
        let coeffs = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) };
        TracedPaf { center: mean, coeffs: Some(coeffs), local: Some(residual) }
    };

    let fuse = |tape: &mut Tape, parts: Vec<TracedPaf>, fusion: Fusion| -> Result<TracedPaf> {
        let mut it = parts.into_iter();
        let mut acc = it.next().ok_or_else(|| Error::Config("no structures to fuse".into()))?;
        for p in it {
            acc = match fusion {
                Fusion::Hadamard => acc.hadamard(tape, &p),
                Fusion::Addition => acc.add(tape, &p),
            };
        }
        Ok(acc)
    };

    let sp: Vec<TracedPaf> = model.spatial.iter().map(|g| build(tape, g)).collect();
    let lp: Vec<TracedPaf> = model.lines.iter().map(|g| build(tape, g)).collect();
    let s = fuse(tape, sp, model.fusion)?;
    let p = fuse(tape, lp, model.fusion)?;
    let mut h = concat(tape, &[s, p], &model.widths, m);
    let dec = &model.decoder;
    let last = dec.weights.len() - 1;
    for l in 0..=last {
        let w = tape.constant(dec.weights[l].clone());
        let b = tape.constant(Tensor::row_vector(dec.biases[l].clone()));
        let w2 = tape.constant(model.squared[l].clone());
        h = h.linear(tape, w, b, w2);
        if l < last {
            h = h.activation(tape, dec.activation);
        }
    }
    Ok(h.summary(tape))
}
