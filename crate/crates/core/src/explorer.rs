//! Field-level exploration: propagated (UP) and sampled (SPL) mean and
//! standard-deviation volumes, correlation against a reference voxel, and
//! the comparison harness.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::oracle::OracleFields;
use crate::data::VolumeGrid;
use crate::error::{Error, Result};
use crate::field::arch::Activation;
use crate::field::domain::DomainSpec;
use crate::field::model::DenseDecoder;
use crate::field::ExplorableModel;
use crate::metrics::{psnr_capped, value_range};
use crate::paf::{decode_from, fuse, paf_from_spans, relu_moments, NoiseSymbolRegistry, Paf, PafMode};
use crate::range_stats::AxisSpan;
use crate::region::AxisQuery;
use crate::tensor::{matmul_bt, Tensor};

/// Voxels per sampled or symbolic batch.
const CHUNK: usize = 512;
/// Voxels per dense condensed batch, sized to keep its blocks in cache.
const DENSE_CHUNK: usize = 32;

/// Mean and standard deviation volumes in physical units.
#[derive(Clone, Debug)]
pub struct FieldPair {
    pub mean: VolumeGrid,
    pub std: VolumeGrid,
    pub seconds: f64,
}

fn voxel_count(dims: [usize; 3]) -> Result<usize> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("volume dims {dims:?} must be positive")));
    }
    Ok(dims[0] * dims[1] * dims[2])
}

fn voxel_coords(dims: [usize; 3], idx: usize) -> [usize; 3] {
    [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])]
}

fn linear_index(dims: [usize; 3], c: [usize; 3]) -> usize {
    c[0] + dims[0] * (c[1] + dims[1] * c[2])
}

/// Normalized coordinates of a voxel center.
fn voxel_normalized(dims: [usize; 3], c: [usize; 3]) -> [f64; 3] {
    std::array::from_fn(|a| DomainSpec::voxel_center(c[a], dims[a]))
}

fn param_spans(model: &ExplorableModel, params: &[AxisQuery]) -> Result<Vec<AxisSpan>> {
    let d = &model.domain;
    if params.len() != d.n_params() {
        return Err(Error::Shape(format!("box has {} parameters, domain has {}", params.len(), d.n_params())));
    }
    let region = crate::region::QueryRegion::at([d.spatial[0].min, d.spatial[1].min, d.spatial[2].min], params.to_vec());
    Ok(region.spans(d)?[3..].to_vec())
}

/// First decoder layer split into its spatial and parameter column blocks.
struct SplitLayer {
    spatial: Tensor,
    params: Tensor,
}

fn split_first_layer(model: &ExplorableModel, dec: &DenseDecoder) -> SplitLayer {
    let w = &dec.weights[0];
    let c = model.arch.spatial_dim;
    let cp = model.arch.param_dim;
    let block = |off: usize, width: usize| {
        let mut t = Tensor::zeros(w.rows(), width);
        for r in 0..w.rows() {
            t.row_mut(r).copy_from_slice(&w.row(r)[off..off + width]);
        }
        t
    };
    SplitLayer { spatial: block(0, c), params: block(c, cp) }
}

/// `[B × C]` fused spatial features and their first-layer contribution.
fn spatial_preactivation(model: &ExplorableModel, split: &SplitLayer, dims: [usize; 3], range: std::ops::Range<usize>) -> Result<Tensor> {
    let c = model.arch.spatial_dim;
    let mut s = Tensor::zeros(range.len(), c);
    for (r, idx) in range.enumerate() {
        let f = model.fuse_spatial(voxel_normalized(dims, voxel_coords(dims, idx)))?;
        s.row_mut(r).copy_from_slice(&f);
    }
    Ok(matmul_bt(&s, &split.spatial))
}

/// Propagation context shared by every voxel: the parameter part of the
/// first layer as a one-row form.
struct UpContext {
    dec: DenseDecoder,
    squared: Vec<Tensor>,
    split: SplitLayer,
    registry: NoiseSymbolRegistry,
    param_pre: Paf,
    /// Coefficient rows of `param_pre`, shared terms first, then private.
    term_rows: Vec<Vec<f64>>,
    mode: PafMode,
}

/// A condensed form over a run of voxels whose symbols are all shared,
/// stored as contiguous `[rows × width]` blocks: block 0 is the center and
/// blocks `1..` the symbol coefficients. Fresh noise stays condensed in
/// `local`.
struct DenseForm {
    rows: usize,
    width: usize,
    blocks: usize,
    data: Vec<f64>,
    local: Vec<f64>,
}

/// Condensed ReLU over one dense form: `center` becomes the ReLU mean, each
/// `n`-sized block of `terms` is scaled by the slope, and `local` becomes
/// the propagated independent deviation.
fn relu_pass(center: &mut [f64], terms: &mut [f64], local: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
        // SAFETY: the enabled features were detected on this CPU.
        return unsafe { relu_pass_avx2(center, terms, local) };
    }
    relu_pass_generic(center, terms, local)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
fn relu_pass_avx2(center: &mut [f64], terms: &mut [f64], local: &mut [f64]) {
    relu_pass_generic(center, terms, local)
}

#[inline(always)]
fn relu_pass_generic(center: &mut [f64], terms: &mut [f64], local: &mut [f64]) {
    let n = center.len();
    let mut slope: Vec<f64> = local.iter().map(|v| v * v).collect();
    for block in terms.chunks_exact(n) {
        slope.iter_mut().zip(block).for_each(|(v, c)| *v += c * c);
    }
    for ((c, v), l) in center.iter_mut().zip(slope.iter_mut()).zip(local.iter_mut()) {
        let sigma = v.sqrt();
        let m = relu_moments(*c, sigma);
        let kept = *l * m.slope;
        let fresh = m.fresh(sigma);
        *c = m.mean;
        *v = m.slope;
        *l = (kept * kept + fresh * fresh).sqrt();
    }
    for block in terms.chunks_exact_mut(n) {
        block.iter_mut().zip(&slope).for_each(|(c, s)| *c *= s);
    }
}

impl DenseForm {
    fn activation(&mut self, act: Activation) {
        if act == Activation::Identity {
            return;
        }
        let (center, terms) = self.data.split_at_mut(self.rows * self.width);
        relu_pass(center, terms, &mut self.local);
    }

    fn linear(self, w: &Tensor, w2: &Tensor, bias: &[f64]) -> DenseForm {
        let (rows, blocks, out) = (self.rows, self.blocks, w.rows());
        let mut data = matmul_bt(&Tensor::from_vec(blocks * rows, self.width, self.data), w).into_vec();
        for r in 0..rows {
            data[r * out..(r + 1) * out].iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let sq: Vec<f64> = self.local.iter().map(|v| v * v).collect();
        let local = matmul_bt(&Tensor::from_vec(rows, self.width, sq), w2).into_vec().into_iter().map(f64::sqrt).collect();
        DenseForm { rows, width: out, blocks, data, local }
    }

    /// `(μ, σ)` of row `r` of a scalar form.
    fn summary(&self, r: usize) -> (f64, f64) {
        let n = self.rows;
        let mut var = self.local[r] * self.local[r];
        for b in 1..self.blocks {
            var += self.data[b * n + r] * self.data[b * n + r];
        }
        (self.data[r], var.sqrt())
    }

    /// Covariance of every row of a scalar form with row 0 of `reference`.
    fn covariance_with(&self, reference: &DenseForm) -> Vec<f64> {
        let n = self.rows;
        (0..n).map(|r| (1..self.blocks).map(|b| self.data[b * n + r] * reference.data[b]).sum()).collect()
    }
}

/// Rows `Vᵀ·T` for the eigenvectors `V` of `T·Tᵀ` with non-negligible
/// eigenvalues. The Gram matrix `TᵀT` is preserved up to the dropped
/// directions, so every variance and covariance is unchanged.
fn orthogonal_reduce(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = rows.len();
    if k < 2 {
        return rows.to_vec();
    }
    let gram = nalgebra::DMatrix::from_fn(k, k, |i, j| rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>());
    let eig = nalgebra::SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    (0..k)
        .filter(|&e| eig.eigenvalues[e] > top * 1e-24)
        .map(|e| {
            let v = eig.eigenvectors.column(e);
            (0..rows[0].len()).map(|j| (0..k).map(|i| v[i] * rows[i][j]).sum()).collect()
        })
        .collect()
}

impl UpContext {
    fn new(model: &ExplorableModel, params: &[AxisQuery], mode: PafMode) -> Result<Self> {
        let dec = model.dense_decoder();
        let squared = dec.weights.iter().map(Tensor::squared).collect();
        let split = split_first_layer(model, &dec);
        let registry = NoiseSymbolRegistry::new();
        let mut spans = vec![AxisSpan::Point(0.0); 3];
        spans.extend(param_spans(model, params)?);
        let inputs = paf_from_spans(model, &spans, &registry, mode)?;
        // Every voxel reads the same parameter draw, so its residual noise
        // is kept as explicit symbols shared across voxels.
        let p = fuse(&inputs.lines, model.arch.fusion, &registry, mode)?.materialize_local();
        let param_pre = p.linear(&split.params, &dec.biases[0])?;
        let rows: Vec<Vec<f64>> = param_pre.shared_terms().values().chain(param_pre.private_terms().values()).map(|t| t.row(0).to_vec()).collect();
        let term_rows = if mode == PafMode::Condensed { orthogonal_reduce(&rows) } else { rows };
        Ok(Self { dec, squared, split, registry, param_pre, term_rows, mode })
    }

    /// Output forms (normalized value units) for a run of voxels.
    fn outputs(&self, model: &ExplorableModel, dims: [usize; 3], range: std::ops::Range<usize>) -> Result<Paf> {
        let sw = spatial_preactivation(model, &self.split, dims, range.clone())?;
        let mut pre = self.param_pre.broadcast_rows(range.len(), &self.registry)?;
        pre.shift(&sw)?;
        decode_from(&self.dec, pre, 0, &self.registry, self.mode)
    }

    /// Condensed outputs for a run of voxels, without per-symbol bookkeeping.
    fn dense_outputs(&self, model: &ExplorableModel, dims: [usize; 3], range: std::ops::Range<usize>) -> Result<DenseForm> {
        let rows = range.len();
        let mut sw = spatial_preactivation(model, &self.split, dims, range)?.into_vec();
        let width = self.param_pre.width();
        let c = self.param_pre.center().row(0);
        for r in 0..rows {
            sw[r * width..(r + 1) * width].iter_mut().zip(c).for_each(|(v, p)| *v += p);
        }
        let mut data = sw;
        data.reserve(self.term_rows.len() * rows * width);
        for t in &self.term_rows {
            for _ in 0..rows {
                data.extend_from_slice(t);
            }
        }
        let mut h = DenseForm { rows, width, blocks: 1 + self.term_rows.len(), data, local: vec![0.0; rows * width] };
        let last = self.dec.weights.len() - 1;
        for l in 0..last {
            h.activation(self.dec.activation);
            h = h.linear(&self.dec.weights[l + 1], &self.squared[l + 1], &self.dec.biases[l + 1]);
        }
        Ok(h)
    }

    /// `(μ, σ)` per voxel in normalized value units.
    fn summaries(&self, model: &ExplorableModel, dims: [usize; 3], range: std::ops::Range<usize>) -> Result<Vec<(f64, f64)>> {
        if self.mode == PafMode::Condensed {
            let out = self.dense_outputs(model, dims, range)?;
            return Ok((0..out.rows).map(|r| out.summary(r)).collect());
        }
        Ok(self.outputs(model, dims, range)?.summaries()?.into_iter().map(|s| (s.mu, s.sigma)).collect())
    }
}

fn chunks(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(size)).map(|i| i * size..((i + 1) * size).min(n)).collect()
}

fn volume(model: &ExplorableModel, dims: [usize; 3], values: Vec<f32>) -> VolumeGrid {
    VolumeGrid::new(dims, model.domain.spatial, values).expect("sized")
}

/// Per-voxel propagated `(mu, sigma)` in normalized value units.
pub fn up_summaries(model: &ExplorableModel, params: &[AxisQuery], dims: [usize; 3], mode: PafMode) -> Result<Vec<(f64, f64)>> {
    let n = voxel_count(dims)?;
    let ctx = UpContext::new(model, params, mode)?;
    let size = if mode == PafMode::Condensed { DENSE_CHUNK } else { CHUNK };
    let parts: Vec<Vec<(f64, f64)>> =
        chunks(n, size).into_par_iter().map(|range| ctx.summaries(model, dims, range)).collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Per-voxel propagated mean and standard deviation over the parameter box.
pub fn up_field(model: &ExplorableModel, params: &[AxisQuery], dims: [usize; 3], mode: PafMode) -> Result<FieldPair> {
    let start = Instant::now();
    let (mean, std): (Vec<f32>, Vec<f32>) =
        up_summaries(model, params, dims, mode)?.into_iter().map(|(mu, sigma)| physical(&model.domain, mu, sigma)).unzip();
    Ok(FieldPair { mean: volume(model, dims, mean), std: volume(model, dims, std), seconds: start.elapsed().as_secs_f64() })
}

fn physical(d: &DomainSpec, mu: f64, sigma: f64) -> (f32, f32) {
    (d.denormalize_value(mu) as f32, (sigma * d.value_span()) as f32)
}

/// Model output in physical units at every voxel center for physical
/// parameters `p`.
pub fn predict_field(model: &ExplorableModel, p: &[f64], dims: [usize; 3]) -> Result<VolumeGrid> {
    let n = voxel_count(dims)?;
    let u = model.domain.normalize_params(p)?;
    let dec = model.dense_decoder();
    let parts: Vec<Vec<f32>> = chunks(n, CHUNK)
        .into_par_iter()
        .map(|range| {
            let xs: Vec<[f64; 3]> = range.map(|i| voxel_normalized(dims, voxel_coords(dims, i))).collect();
            let ps: Vec<f64> = xs.iter().flat_map(|_| u.iter().copied()).collect();
            Ok(model.forward_many_with(&dec, &xs, &ps)?.into_iter().map(|v| model.domain.denormalize_value(v) as f32).collect())
        })
        .collect::<Result<_>>()?;
    Ok(volume(model, dims, parts.into_iter().flatten().collect()))
}

/// Pearson correlation of every voxel's propagated output with the output
/// at `reference`. Voxels with zero variance read 0.
pub fn correlation_field(
    model: &ExplorableModel,
    params: &[AxisQuery],
    reference: [usize; 3],
    dims: [usize; 3],
    mode: PafMode,
) -> Result<VolumeGrid> {
    let n = voxel_count(dims)?;
    if (0..3).any(|a| reference[a] >= dims[a]) {
        return Err(Error::Region(format!("reference voxel {reference:?} outside dims {dims:?}")));
    }
    let ctx = UpContext::new(model, params, mode)?;
    let ref_idx = linear_index(dims, reference);
    let pearson = |cov: &[f64], sd: &[f64], base: usize, ref_sigma: f64| -> Vec<f32> {
        (0..cov.len())
            .map(|r| {
                if base + r == ref_idx {
                    1.0
                } else if sd[r] > 0.0 {
                    (cov[r] / (sd[r] * ref_sigma)).clamp(-1.0, 1.0) as f32
                } else {
                    0.0
                }
            })
            .collect()
    };
    let parts: Vec<Vec<f32>> = if mode == PafMode::Condensed {
        let ref_out = ctx.dense_outputs(model, dims, ref_idx..ref_idx + 1)?;
        let ref_sigma = ref_out.summary(0).1;
        if ref_sigma <= 0.0 {
            return Err(Error::UndefinedCorrelation);
        }
        chunks(n, DENSE_CHUNK)
            .into_par_iter()
            .map(|range| {
                let base = range.start;
                let out = ctx.dense_outputs(model, dims, range)?;
                let sd: Vec<f64> = (0..out.rows).map(|r| out.summary(r).1).collect();
                Ok(pearson(&out.covariance_with(&ref_out), &sd, base, ref_sigma))
            })
            .collect::<Result<_>>()?
    } else {
        let ref_out = ctx.outputs(model, dims, ref_idx..ref_idx + 1)?;
        let ref_sigma = ref_out.summary(0)?.sigma;
        if ref_sigma <= 0.0 {
            return Err(Error::UndefinedCorrelation);
        }
        let ref_symbols = ref_out.symbols_at(0, 0);
        chunks(n, CHUNK)
            .into_par_iter()
            .map(|range| {
                let base = range.start;
                let out = ctx.outputs(model, dims, range.clone())?;
                let sd: Vec<f64> = out.variance().data().iter().map(|v| v.sqrt()).collect();
                let mut cov = vec![0.0; range.len()];
                for (id, t) in out.shared_terms() {
                    if let Some(v) = ref_symbols.get(id) {
                        cov.iter_mut().enumerate().for_each(|(r, c)| *c += t.get(r, 0) * v);
                    }
                }
                for (id, t) in out.private_terms() {
                    for (r, c) in cov.iter_mut().enumerate() {
                        if let Some(v) = ref_symbols.get(&(id + r as u64)) {
                            *c += t.get(r, 0) * v;
                        }
                    }
                }
                Ok(pearson(&cov, &sd, base, ref_sigma))
            })
            .collect::<Result<_>>()?
    };
    Ok(volume(model, dims, parts.into_iter().flatten().collect()))
}

/// Voxel with the largest value; ties go to the lowest linear index.
pub fn pick_reference(mean: &VolumeGrid) -> [usize; 3] {
    let mut best = 0;
    for (i, v) in mean.values.iter().enumerate() {
        if *v > mean.values[best] || mean.values[best].is_nan() {
            best = i;
        }
    }
    mean.coords_of(best)
}

/// `n` uniform draws over the normalized parameter spans.
fn draw_params(spans: &[AxisSpan], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            spans
                .iter()
                .map(|s| match *s {
                    AxisSpan::Range(lo, hi) => rng.random_range(lo..hi),
                    AxisSpan::Point(v) => v,
                })
                .collect()
        })
        .collect()
}

/// Sampled statistics per voxel, accumulated with Welford updates.
struct SampleStats {
    mean: Vec<f64>,
    m2: Vec<f64>,
    /// Co-moment with the reference voxel, when one is tracked.
    cross: Option<Vec<f64>>,
}

struct Sampler<'a> {
    model: &'a ExplorableModel,
    dec: DenseDecoder,
    split: SplitLayer,
    /// First-layer parameter contribution, with bias, per sample.
    param_pre: Vec<Vec<f64>>,
}

impl<'a> Sampler<'a> {
    fn new(model: &'a ExplorableModel, samples: &[Vec<f64>]) -> Result<Self> {
        let dec = model.dense_decoder();
        let split = split_first_layer(model, &dec);
        let param_pre = samples
            .iter()
            .map(|p| {
                let f = model.fuse_params(p)?;
                Ok((0..split.params.rows())
                    .map(|o| dec.biases[0][o] + split.params.row(o).iter().zip(&f).map(|(w, x)| w * x).sum::<f64>())
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { model, dec, split, param_pre })
    }

    /// Normalized outputs of sample `s` for voxels whose spatial
    /// preactivations are `sw`.
    fn decode(&self, sw: &Tensor, s: usize) -> Vec<f64> {
        let mut h = sw.clone();
        let act = self.dec.activation;
        for r in 0..h.rows() {
            for (v, p) in h.row_mut(r).iter_mut().zip(&self.param_pre[s]) {
                *v = act.apply(*v + p);
            }
        }
        let h = self.dec.hidden_from(&h, 1);
        self.dec.apply_layer(&h, self.dec.weights.len() - 1, false).into_vec()
    }

    fn run(&self, dims: [usize; 3], reference: Option<f64>, ref_values: &[f64], range: std::ops::Range<usize>) -> Result<SampleStats> {
        let sw = spatial_preactivation(self.model, &self.split, dims, range.clone())?;
        let b = range.len();
        let mut st = SampleStats { mean: vec![0.0; b], m2: vec![0.0; b], cross: reference.map(|_| vec![0.0; b]) };
        // With the reference centered exactly, any per-voxel offset leaves
        // the co-moment unchanged; the first draw keeps it well scaled.
        let mut offset = Vec::new();
        for s in 0..self.param_pre.len() {
            let y = self.decode(&sw, s);
            if s == 0 {
                offset = y.clone();
            }
            let k = (s + 1) as f64;
            for r in 0..b {
                let d = y[r] - st.mean[r];
                st.mean[r] += d / k;
                st.m2[r] += d * (y[r] - st.mean[r]);
                if let (Some(c), Some(ref_mean)) = (st.cross.as_mut(), reference) {
                    c[r] += (y[r] - offset[r]) * (ref_values[s] - ref_mean);
                }
            }
        }
        Ok(st)
    }
}

fn check_samples(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Config(format!("sampling needs at least 2 draws, got {n}")));
    }
    Ok(())
}

/// Sampled per-voxel `(mean, std)` (ddof = 1) in normalized value units at
/// normalized parameter draws `samples`.
pub fn spl_summaries(model: &ExplorableModel, samples: &[Vec<f64>], dims: [usize; 3]) -> Result<Vec<(f64, f64)>> {
    check_samples(samples.len())?;
    let n = voxel_count(dims)?;
    let sampler = Sampler::new(model, samples)?;
    let denom = (samples.len() - 1) as f64;
    let parts: Vec<Vec<(f64, f64)>> = chunks(n, CHUNK)
        .into_par_iter()
        .map(|range| {
            let st = sampler.run(dims, None, &[], range)?;
            Ok(st.mean.iter().zip(&st.m2).map(|(m, m2)| (*m, (m2 / denom).max(0.0).sqrt())).collect())
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Sampled mean and standard deviation (ddof = 1) at normalized
/// parameter draws `samples`.
pub fn spl_field_at(model: &ExplorableModel, samples: &[Vec<f64>], dims: [usize; 3]) -> Result<FieldPair> {
    let start = Instant::now();
    let (mean, std): (Vec<f32>, Vec<f32>) =
        spl_summaries(model, samples, dims)?.into_iter().map(|(m, s)| physical(&model.domain, m, s)).unzip();
    Ok(FieldPair { mean: volume(model, dims, mean), std: volume(model, dims, std), seconds: start.elapsed().as_secs_f64() })
}

/// `n` seeded uniform draws over a physical parameter box, normalized.
pub fn draw_box(model: &ExplorableModel, params: &[AxisQuery], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    Ok(draw_params(&param_spans(model, params)?, n, seed))
}

/// Sampled fields from `n` seeded uniform draws over the box.
pub fn spl_field(model: &ExplorableModel, params: &[AxisQuery], n: usize, dims: [usize; 3], seed: u64) -> Result<FieldPair> {
    check_samples(n)?;
    let samples = draw_params(&param_spans(model, params)?, n, seed);
    spl_field_at(model, &samples, dims)
}

/// Sampled Pearson correlation with the voxel at `reference`.
pub fn spl_correlation(
    model: &ExplorableModel,
    params: &[AxisQuery],
    reference: [usize; 3],
    n: usize,
    dims: [usize; 3],
    seed: u64,
) -> Result<VolumeGrid> {
    check_samples(n)?;
    let nv = voxel_count(dims)?;
    if (0..3).any(|a| reference[a] >= dims[a]) {
        return Err(Error::Region(format!("reference voxel {reference:?} outside dims {dims:?}")));
    }
    let samples = draw_params(&param_spans(model, params)?, n, seed);
    let sampler = Sampler::new(model, &samples)?;
    let ref_idx = linear_index(dims, reference);
    let ref_sw = spatial_preactivation(model, &sampler.split, dims, ref_idx..ref_idx + 1)?;
    let ref_values: Vec<f64> = (0..n).map(|s| sampler.decode(&ref_sw, s)[0]).collect();
    let ref_mean = ref_values.iter().sum::<f64>() / n as f64;
    let ref_m2: f64 = ref_values.iter().map(|v| (v - ref_mean) * (v - ref_mean)).sum();
    if ref_m2 <= 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    let parts: Vec<Vec<f32>> = chunks(nv, CHUNK)
        .into_par_iter()
        .map(|range| {
            let base = range.start;
            let st = sampler.run(dims, Some(ref_mean), &ref_values, range)?;
            let cross = st.cross.expect("tracked");
            Ok((0..st.mean.len())
                .map(|r| {
                    if base + r == ref_idx {
                        1.0
                    } else if st.m2[r] > 0.0 {
                        (cross[r] / (st.m2[r] * ref_m2).sqrt()).clamp(-1.0, 1.0) as f32
                    } else {
                        0.0
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(volume(model, dims, parts.into_iter().flatten().collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    /// Sample count; absent for propagation.
    pub n: Option<usize>,
    pub seconds: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,n,seconds,psnr_mean,psnr_std\n");
        for r in &self.rows {
            let n = r.n.map(|n| n.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", r.method, n, r.seconds, r.psnr_mean, r.psnr_std));
        }
        out
    }
}

fn values(g: &VolumeGrid) -> Vec<f64> {
    g.values.iter().map(|&v| v as f64).collect()
}

/// PSNR of a field pair against the oracle, each over the oracle's own
/// value range.
pub fn score_fields(fields: &FieldPair, oracle: &OracleFields) -> Result<(f64, f64)> {
    for (a, b) in [(&fields.mean, &oracle.mean), (&fields.std, &oracle.std)] {
        if a.dims != b.dims {
            return Err(Error::Shape(format!("field dims {:?} differ from oracle dims {:?}", a.dims, b.dims)));
        }
    }
    let om = values(&oracle.mean);
    let os = values(&oracle.std);
    Ok((
        psnr_capped(&values(&fields.mean), &om, value_range(&om))?,
        psnr_capped(&values(&fields.std), &os, value_range(&os))?,
    ))
}

/// Times and scores UP and SPL at each sample budget against the oracle.
pub fn compare_up_spl(
    model: &ExplorableModel,
    params: &[AxisQuery],
    oracle: &OracleFields,
    budgets: &[usize],
    seed: u64,
    mode: PafMode,
) -> Result<ComparisonReport> {
    let dims = oracle.mean.dims;
    let mut rows = Vec::with_capacity(budgets.len() + 1);
    let up = up_field(model, params, dims, mode)?;
    let (pm, ps) = score_fields(&up, oracle)?;
    rows.push(ComparisonRow { method: "up".into(), n: None, seconds: up.seconds, psnr_mean: pm, psnr_std: ps });
    for &n in budgets {
        let spl = spl_field(model, params, n, dims, seed)?;
        let (pm, ps) = score_fields(&spl, oracle)?;
        rows.push(ComparisonRow { method: "spl".into(), n: Some(n), seconds: spl.seconds, psnr_mean: pm, psnr_std: ps });
    }
    Ok(ComparisonReport { rows })
}

/// Wall-clock seconds of repeated UP and SPL field runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingReport {
    pub dims: [usize; 3],
    pub spl_samples: usize,
    pub up_seconds: Vec<f64>,
    pub spl_seconds: Vec<f64>,
    pub up_median: f64,
    pub spl_median: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Alternates `runs` condensed UP and `n`-sample SPL field computations and
/// reports each run's time and the medians.
pub fn time_up_vs_spl(
    model: &ExplorableModel,
    params: &[AxisQuery],
    dims: [usize; 3],
    n: usize,
    runs: usize,
    seed: u64,
) -> Result<TimingReport> {
    if runs == 0 {
        return Err(Error::Config("timing needs at least one run".into()));
    }
    let mut up = Vec::with_capacity(runs);
    let mut spl = Vec::with_capacity(runs);
    for r in 0..runs {
        up.push(up_field(model, params, dims, PafMode::Condensed)?.seconds);
        spl.push(spl_field(model, params, n, dims, seed + r as u64)?.seconds);
    }
    Ok(TimingReport {
        dims,
        spl_samples: n,
        up_median: median(&up),
        spl_median: median(&spl),
        up_seconds: up,
        spl_seconds: spl,
    })
}
