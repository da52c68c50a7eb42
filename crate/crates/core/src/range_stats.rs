//! Closed-form moments of multilinearly interpolated features over uniform
//! input ranges.
//!
//! Along a ranged axis the features are piecewise linear between grid
//! vertices, so every moment splits into per-segment polynomial integrals.
//! [`PiecewiseLinear`] covers the one-dimensional case; [`box_moments`]
//! handles any structure over a product of ranges and points.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::grid::{locate, vertex_coord, FeatureGrid};
use crate::grad::CustomOp;
use crate::tensor::Tensor;

/// Widths below this are point queries.
pub const DEGENERATE_WIDTH: f64 = 1e-12;

/// Residual variances below this fraction of the channel variance are
/// rounding noise and are reported as exactly zero.
pub const RESIDUAL_CUTOFF: f64 = 1e-10;

const SQRT_12: f64 = 3.464_101_615_137_754_6;

/// A channel-wise piecewise linear function on `[breaks[0], breaks[n-1]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseLinear {
    pub breaks: Vec<f64>,
    /// `values[i]` holds every channel at `breaks[i]`.
    pub values: Vec<Vec<f64>>,
}

impl PiecewiseLinear {
    pub fn new(breaks: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if breaks.len() < 2 || breaks.len() != values.len() {
            return Err(Error::Region("piecewise function needs two or more breakpoints with values".into()));
        }
        if breaks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Region("breakpoints must be strictly increasing".into()));
        }
        let c = values[0].len();
        if values.iter().any(|v| v.len() != c) {
            return Err(Error::Shape("breakpoint values differ in channel count".into()));
        }
        Ok(Self { breaks, values })
    }

    pub fn channels(&self) -> usize {
        self.values[0].len()
    }

    fn width(&self) -> f64 {
        self.breaks[self.breaks.len() - 1] - self.breaks[0]
    }

    /// Segments as `(a, b, v_a, v_b)` per channel `c`.
    fn segments(&self, c: usize) -> impl Iterator<Item = (f64, f64, f64, f64)> + '_ {
        self.breaks
            .windows(2)
            .zip(self.values.windows(2))
            .map(move |(x, v)| (x[0], x[1], v[0][c], v[1][c]))
    }
}

/// Restricts a line to `[lo, hi]`: breakpoints are the endpoints plus every
/// vertex strictly inside.
pub fn extract_piecewise(line: &FeatureGrid, lo: f64, hi: f64) -> Result<PiecewiseLinear> {
    if line.ndim() != 1 {
        return Err(Error::Shape(format!("{} is not a line", line.structure().name())));
    }
    if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) {
        return Err(Error::Region(format!("range [{lo}, {hi}] leaves [-1, 1]")));
    }
    if !(hi - lo >= DEGENERATE_WIDTH) {
        return Err(Error::DegenerateRange { lo, hi });
    }
    let r = line.res();
    let mut breaks = vec![lo];
    for i in 0..r {
        let v = vertex_coord(r, i);
        if v > lo && v < hi {
            breaks.push(v);
        }
    }
    breaks.push(hi);
    let values = breaks.iter().map(|&u| line.interpolate(&[u])).collect::<Result<Vec<_>>>()?;
    PiecewiseLinear::new(breaks, values)
}

/// Mean of each channel under a uniform input over the function's span.
pub fn range_mean(pw: &PiecewiseLinear) -> Vec<f64> {
    let w = pw.width();
    (0..pw.channels())
        .map(|c| pw.segments(c).map(|(a, b, va, vb)| (b - a) * (va + vb) * 0.5).sum::<f64>() / w)
        .collect()
}

/// `E[F²]` per channel.
pub fn range_second_moment(pw: &PiecewiseLinear) -> Vec<f64> {
    let w = pw.width();
    (0..pw.channels())
        .map(|c| {
            pw.segments(c)
                .map(|(a, b, va, vb)| (b - a) * (va * va + va * vb + vb * vb) / 3.0)
                .sum::<f64>()
                / w
        })
        .collect()
}

/// `E[F²] − E[F]²`, clamped at zero.
pub fn range_variance(pw: &PiecewiseLinear) -> Vec<f64> {
    range_second_moment(pw)
        .into_iter()
        .zip(range_mean(pw))
        .map(|(s, m)| (s - m * m).max(0.0))
        .collect()
}

/// `Cov(F, Z)` with `Z` the standardized uniform input.
pub fn range_param_cov(pw: &PiecewiseLinear) -> Vec<f64> {
    let w = pw.width();
    let lo = pw.breaks[0];
    let mu = lo + 0.5 * w;
    let sigma = w / SQRT_12;
    (0..pw.channels())
        .map(|c| {
            // E[F·(x − μ)] per segment, with x shifted so the integrand stays small.
            let e: f64 = pw
                .segments(c)
                .map(|(a, b, va, vb)| {
                    let (a, b) = (a - mu, b - mu);
                    (b - a) * (va * (2.0 * a + b) + vb * (a + 2.0 * b)) / 6.0
                })
                .sum::<f64>()
                / w;
            e / sigma
        })
        .collect()
}

/// One model input restricted to a point or a uniform range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AxisSpan {
    Point(f64),
    Range(f64, f64),
}

impl AxisSpan {
    /// Ranges narrower than [`DEGENERATE_WIDTH`] collapse to their midpoint.
    pub fn new(lo: f64, hi: f64) -> Self {
        if hi - lo < DEGENERATE_WIDTH {
            AxisSpan::Point(0.5 * (lo + hi))
        } else {
            AxisSpan::Range(lo, hi)
        }
    }

    pub fn is_range(&self) -> bool {
        matches!(self, AxisSpan::Range(..))
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            AxisSpan::Point(u) => (u, u),
            AxisSpan::Range(lo, hi) => (lo, hi),
        }
    }

    /// Mean and standard deviation of the uniform input.
    pub fn mean_std(&self) -> (f64, f64) {
        let (lo, hi) = self.bounds();
        (0.5 * (lo + hi), (hi - lo) / SQRT_12)
    }
}

/// Raw moments of every channel of one structure over a box.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxMoments {
    /// `E[g]`.
    pub mean: Vec<f64>,
    /// `E[g²]`.
    pub second: Vec<f64>,
    /// `E[g · u_k]` per structure axis (zeros for point axes).
    pub cross: Vec<Vec<f64>>,
}

/// Structure moments repackaged as an affine form over standardized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureStats {
    pub center: Vec<f64>,
    /// `Cov(g, Z_k)` per structure axis (zeros for point axes).
    pub beta: Vec<Vec<f64>>,
    /// `√max(Var − Σβ², 0)`, zero below [`RESIDUAL_CUTOFF`].
    pub residual: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Piece {
    cell: usize,
    weight: f64,
    i1: [f64; 2],
    i2: [[f64; 2]; 2],
    ix: [f64; 2],
}

fn piece(res: usize, cell: usize, t0: f64, t1: f64, weight: f64) -> Piece {
    let (m1, m2) = if t1 > t0 {
        (0.5 * (t0 + t1), (t0 * t0 + t0 * t1 + t1 * t1) / 3.0)
    } else {
        (t0, t0 * t0)
    };
    let xs = vertex_coord(res, cell);
    let h = 2.0 / (res - 1) as f64;
    Piece {
        cell,
        weight,
        i1: [1.0 - m1, m1],
        i2: [[1.0 - 2.0 * m1 + m2, m1 - m2], [m1 - m2, m2]],
        ix: [xs * (1.0 - m1) + h * (m1 - m2), xs * m1 + h * m2],
    }
}

fn axis_pieces(res: usize, span: AxisSpan) -> Vec<Piece> {
    match span {
        AxisSpan::Point(u) => {
            let (cell, t) = locate(res, u);
            vec![piece(res, cell, t, t, 1.0)]
        }
        AxisSpan::Range(lo, hi) => {
            let w = hi - lo;
            let (c0, _) = locate(res, lo);
            let mut out = Vec::new();
            let mut cell = c0;
            loop {
                let a = vertex_coord(res, cell).max(lo);
                let b = vertex_coord(res, cell + 1).min(hi);
                if b > a {
                    let scale = 0.5 * (res - 1) as f64;
                    let t0 = (a - vertex_coord(res, cell)) * scale;
                    let t1 = (b - vertex_coord(res, cell)) * scale;
                    out.push(piece(res, cell, t0, t1.min(1.0), (b - a) / w));
                }
                if cell + 2 >= res || vertex_coord(res, cell + 1) >= hi {
                    break;
                }
                cell += 1;
            }
            out
        }
    }
}

fn check_span(grid: &FeatureGrid, spans: &[AxisSpan]) -> Result<()> {
    if spans.len() != grid.ndim() {
        return Err(Error::Shape(format!("{} needs {} spans, got {}", grid.structure().name(), grid.ndim(), spans.len())));
    }
    for s in spans {
        let (lo, hi) = s.bounds();
        if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) || !(lo <= hi) {
            return Err(Error::Region(format!("span [{lo}, {hi}] is not inside [-1, 1]")));
        }
    }
    Ok(())
}

/// Moments of `grid` over the product of `spans` (one per structure axis).
pub fn box_moments(grid: &FeatureGrid, spans: &[AxisSpan]) -> Result<BoxMoments> {
    check_span(grid, spans)?;
    Ok(box_moments_unchecked(grid, spans, true))
}

pub(crate) fn box_moments_unchecked(grid: &FeatureGrid, spans: &[AxisSpan], with_second: bool) -> BoxMoments {
    let d = grid.ndim();
    let c = grid.channels();
    let res = grid.res();
    let pieces: Vec<Vec<Piece>> = spans.iter().map(|&s| axis_pieces(res, s)).collect();
    let corners = 1usize << d;
    let mut mean = vec![0.0; c];
    let mut second = vec![0.0; c];
    let mut cross = vec![vec![0.0; c]; d];
    let values = grid.values();

    let mut idx = vec![0usize; d];
    let mut p1 = vec![0.0; corners];
    let mut px = vec![vec![0.0; corners]; d];
    let mut pair = vec![0.0; corners * corners];
    let mut feat = vec![0.0; corners * c];
    loop {
        let ps: Vec<&Piece> = (0..d).map(|k| &pieces[k][idx[k]]).collect();
        let weight: f64 = ps.iter().map(|p| p.weight).product();
        for v in 0..corners {
            let mut w = 1.0;
            let mut flat = 0usize;
            let mut stride = 1usize;
            for k in 0..d {
                let b = (v >> k) & 1;
                w *= ps[k].i1[b];
                flat += (ps[k].cell + b) * stride;
                stride *= res;
            }
            p1[v] = w;
            for a in 0..d {
                let mut wx = 1.0;
                for k in 0..d {
                    let b = (v >> k) & 1;
                    wx *= if k == a { ps[k].ix[b] } else { ps[k].i1[b] };
                }
                px[a][v] = wx;
            }
            for (ch, f) in feat[v * c..(v + 1) * c].iter_mut().zip(&values[flat * c..(flat + 1) * c]) {
                *ch = *f as f64;
            }
        }
        for v in 0..corners {
            let f = &feat[v * c..(v + 1) * c];
            for ch in 0..c {
                mean[ch] += weight * p1[v] * f[ch];
            }
            for a in 0..d {
                if spans[a].is_range() {
                    for ch in 0..c {
                        cross[a][ch] += weight * px[a][v] * f[ch];
                    }
                }
            }
        }
        if with_second {
            for v in 0..corners {
                for w in 0..corners {
                    let mut q = 1.0;
                    for k in 0..d {
                        q *= ps[k].i2[(v >> k) & 1][(w >> k) & 1];
                    }
                    pair[v * corners + w] = q;
                }
            }
            for v in 0..corners {
                let fv = &feat[v * c..(v + 1) * c];
                for w in 0..corners {
                    let q = weight * pair[v * corners + w];
                    if q == 0.0 {
                        continue;
                    }
                    let fw = &feat[w * c..(w + 1) * c];
                    for ch in 0..c {
                        second[ch] += q * fv[ch] * fw[ch];
                    }
                }
            }
        }
        // Advance the mixed-radix cell counter.
        let mut k = 0;
        loop {
            if k == d {
                return BoxMoments { mean, second, cross };
            }
            idx[k] += 1;
            if idx[k] < pieces[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

impl BoxMoments {
    pub fn stats(&self, spans: &[AxisSpan]) -> StructureStats {
        let c = self.mean.len();
        let mut beta = vec![vec![0.0; c]; spans.len()];
        let mut explained = vec![0.0; c];
        for (k, s) in spans.iter().enumerate() {
            if !s.is_range() {
                continue;
            }
            let (mu, sigma) = s.mean_std();
            for ch in 0..c {
                let b = (self.cross[k][ch] - self.mean[ch] * mu) / sigma;
                beta[k][ch] = b;
                explained[ch] += b * b;
            }
        }
        let residual = (0..c)
            .map(|ch| {
                let var = self.second[ch] - self.mean[ch] * self.mean[ch];
                let r2 = var - explained[ch];
                if r2 <= RESIDUAL_CUTOFF * var.abs() {
                    0.0
                } else {
                    r2.sqrt()
                }
            })
            .collect();
        StructureStats { center: self.mean.clone(), beta, residual }
    }
}

/// Mean, signed input covariances and residual of a structure over a box.
pub fn structure_stats(grid: &FeatureGrid, spans: &[AxisSpan]) -> Result<StructureStats> {
    Ok(box_moments(grid, spans)?.stats(spans))
}

/// Tape primitive: raw box moments as a function of the box bounds.
///
/// Inputs are `lo` and `hi`, each `[1×d]`. The output is `[(2+d)×C]` with rows
/// `E[g]`, `E[g²]`, then `E[g·u_k]` per axis. Gradients for ranged axes use
/// the boundary-face identity `∂E[h]/∂hi = (E_face(hi)[h] − E[h]) / W`; point
/// axes receive zero gradient.
#[derive(Debug)]
pub struct BoxMomentsOp {
    pub grid: Arc<FeatureGrid>,
    pub ranged: Vec<bool>,
}

impl BoxMomentsOp {
    fn spans(&self, lo: &Tensor, hi: &Tensor) -> Vec<AxisSpan> {
        self.ranged
            .iter()
            .enumerate()
            .map(|(k, &r)| {
                let (a, b) = (lo.data()[k], hi.data()[k]);
                if r {
                    AxisSpan::Range(a, b)
                } else {
                    AxisSpan::Point(0.5 * (a + b))
                }
            })
            .collect()
    }

    fn pack(&self, m: &BoxMoments) -> Tensor {
        let c = m.mean.len();
        let d = self.ranged.len();
        let mut data = Vec::with_capacity((2 + d) * c);
        data.extend_from_slice(&m.mean);
        data.extend_from_slice(&m.second);
        for row in &m.cross {
            data.extend_from_slice(row);
        }
        Tensor::from_vec(2 + d, c, data)
    }
}

impl CustomOp for BoxMomentsOp {
    fn name(&self) -> &'static str {
        "box_moments"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let spans = self.spans(inputs[0], inputs[1]);
        self.pack(&box_moments_unchecked(&self.grid, &spans, true))
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let d = self.ranged.len();
        let c = output.cols();
        let spans = self.spans(inputs[0], inputs[1]);
        let mut glo = Tensor::zeros(1, d);
        let mut ghi = Tensor::zeros(1, d);
        for a in 0..d {
            let AxisSpan::Range(lo, hi) = spans[a] else { continue };
            let w = hi - lo;
            for (side, at) in [(0usize, lo), (1usize, hi)] {
                let mut face_spans = spans.clone();
                face_spans[a] = AxisSpan::Point(at);
                let face = self.pack(&box_moments_unchecked(&self.grid, &face_spans, true));
                let mut total = 0.0;
                for row in 0..2 + d {
                    // Face moments of g·u_a pick up the constant coordinate.
                    let face_row: Vec<f64> = if row == 2 + a {
                        face.row(0).iter().map(|v| v * at).collect()
                    } else {
                        face.row(row).to_vec()
                    };
                    for ch in 0..c {
                        let diff = face_row[ch] - output.get(row, ch);
                        total += grad.get(row, ch) * diff;
                    }
                }
                if side == 0 {
                    glo.data_mut()[a] = -total / w;
                } else {
                    ghi.data_mut()[a] = total / w;
                }
            }
        }
        vec![glo, ghi]
    }
}
