use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{Activation, ArchConfig, Fusion};
use super::domain::DomainSpec;
use super::grid::{locate, vertex_coord, FeatureGrid, Structure};
use crate::error::{Error, Result};
use crate::tensor::{matmul_bt, Tensor};

/// One affine decoder layer, weights stored row-major as `[outputs × inputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect(),
            bias: (0..outputs).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }

    pub fn weight_tensor(&self) -> Tensor {
        Tensor::from_f32(self.outputs, self.inputs, &self.weight)
    }

    pub fn bias_f64(&self) -> Vec<f64> {
        self.bias.iter().map(|&b| b as f64).collect()
    }
}

/// MLP decoder: `decoder_layers` hidden layers followed by an affine output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpDecoder {
    pub layers: Vec<Linear>,
}

impl MlpDecoder {
    pub fn init(arch: &ArchConfig, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(arch.decoder_layers + 1);
        let mut width = arch.ensemble_width();
        for _ in 0..arch.decoder_layers {
            layers.push(Linear::init(width, arch.decoder_hidden, rng));
            width = arch.decoder_hidden;
        }
        layers.push(Linear::init(width, 1, rng));
        Self { layers }
    }
}

/// All learnable feature structures.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    /// Spatial structures in fusion order (grid first, then XY, YZ, XZ).
    pub spatial: Vec<FeatureGrid>,
    /// One line per simulation parameter.
    pub lines: Vec<FeatureGrid>,
}

impl FeatureStore {
    pub fn init(arch: &ArchConfig, rng: &mut impl Rng) -> Self {
        let c = arch.spatial_dim;
        let mut spatial = Vec::new();
        if arch.spatial_variant.uses_grid() {
            spatial.push(FeatureGrid::uniform(
                Structure::Grid3d,
                arch.spatial_grid_res,
                c,
                -1e-4,
                1e-4,
                rng,
            ));
        }
        if arch.spatial_variant.uses_planes() {
            for s in [Structure::PlaneXy, Structure::PlaneYz, Structure::PlaneXz] {
                spatial.push(FeatureGrid::uniform(s, arch.plane_res, c, 0.999, 1.001, rng));
            }
        }
        let lines = (0..arch.n_params)
            .map(|i| FeatureGrid::uniform(Structure::Line(i), arch.line_res, arch.param_dim, 0.01, 0.25, rng))
            .collect();
        Self { spatial, lines }
    }

    pub fn structures(&self) -> impl Iterator<Item = &FeatureGrid> {
        self.spatial.iter().chain(self.lines.iter())
    }

    pub fn structures_mut(&mut self) -> impl Iterator<Item = &mut FeatureGrid> {
        self.spatial.iter_mut().chain(self.lines.iter_mut())
    }
}

/// The surrogate `F(x, p) = y` over normalized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplorableModel {
    pub arch: ArchConfig,
    pub features: FeatureStore,
    pub decoder: MlpDecoder,
    pub domain: DomainSpec,
}

/// `f64` copy of the decoder for batched and propagated evaluation.
#[derive(Clone, Debug)]
pub struct DenseDecoder {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

impl DenseDecoder {
    pub fn decode_one(&self, feature: &[f64]) -> f64 {
        let mut h = feature.to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = b.clone();
            for (o, n) in next.iter_mut().enumerate() {
                let row = w.row(o);
                *n += row.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>();
            }
            if l < last {
                next.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            h = next;
        }
        h[0]
    }

    /// Decode a `[B × width]` batch of ensemble features.
    pub fn decode_batch(&self, features: &Tensor) -> Vec<f64> {
        let mut h = self.hidden_from(features, 0);
        let last = self.weights.len() - 1;
        h = self.apply_layer(&h, last, false);
        h.into_vec()
    }

    /// Runs layers `start..last` (all hidden layers from `start`), applying
    /// the activation after each.
    pub fn hidden_from(&self, input: &Tensor, start: usize) -> Tensor {
        let last = self.weights.len() - 1;
        let mut h = input.clone();
        for l in start..last {
            h = self.apply_layer(&h, l, true);
        }
        h
    }

    pub fn apply_layer(&self, input: &Tensor, l: usize, activate: bool) -> Tensor {
        let mut out = matmul_bt(input, &self.weights[l]);
        let b = &self.biases[l];
        for r in 0..out.rows() {
            for (v, bb) in out.row_mut(r).iter_mut().zip(b) {
                *v += bb;
                if activate {
                    *v = self.activation.apply(*v);
                }
            }
        }
        out
    }
}

impl ExplorableModel {
    pub fn new(arch: ArchConfig, domain: DomainSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        domain.validate()?;
        if domain.n_params() != arch.n_params {
            return Err(Error::Config(format!(
                "architecture has {} parameter lines but the domain lists {} parameters",
                arch.n_params,
                domain.n_params()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = FeatureStore::init(&arch, &mut rng);
        let decoder = MlpDecoder::init(&arch, &mut rng);
        Ok(Self { arch, features, decoder, domain })
    }

    pub fn n_params(&self) -> usize {
        self.arch.n_params
    }

    pub fn dense_decoder(&self) -> DenseDecoder {
        DenseDecoder {
            weights: self.decoder.layers.iter().map(Linear::weight_tensor).collect(),
            biases: self.decoder.layers.iter().map(Linear::bias_f64).collect(),
            activation: self.arch.activation,
        }
    }

    pub(crate) fn axis_namer(&self) -> impl Fn(usize) -> String + '_ {
        move |a| self.domain.axis_name(a)
    }

    fn fuse(&self, grids: &[FeatureGrid], coords_of: impl Fn(&FeatureGrid) -> Vec<f64>, width: usize) -> Result<Vec<f64>> {
        let namer = self.axis_namer();
        let mut acc: Option<Vec<f64>> = None;
        let mut buf = vec![0.0; width];
        for g in grids {
            g.interpolate_into(&coords_of(g), &mut buf, &namer)?;
            match acc.as_mut() {
                None => acc = Some(buf.clone()),
                Some(a) => match self.arch.fusion {
                    Fusion::Hadamard => a.iter_mut().zip(&buf).for_each(|(x, y)| *x *= y),
                    Fusion::Addition => a.iter_mut().zip(&buf).for_each(|(x, y)| *x += y),
                },
            }
        }
        acc.ok_or_else(|| Error::Config("model has no structures to fuse".into()))
    }

    /// Fused spatial feature (length C) at normalized `x`.
    pub fn fuse_spatial(&self, x: [f64; 3]) -> Result<Vec<f64>> {
        self.fuse(
            &self.features.spatial,
            |g| g.structure().axes().iter().map(|&a| x[a]).collect(),
            self.arch.spatial_dim,
        )
    }

    /// Normalized `(lo, hi)` per spatial axis of the cell around `x` on
    /// which every spatial structure is multilinear.
    pub fn spatial_cell(&self, x: [f64; 3]) -> [(f64, f64); 3] {
        let mut cell = [(-1.0f64, 1.0f64); 3];
        for g in &self.features.spatial {
            for a in g.structure().axes() {
                let (i, _) = locate(g.res(), x[a]);
                cell[a].0 = cell[a].0.max(vertex_coord(g.res(), i));
                cell[a].1 = cell[a].1.min(vertex_coord(g.res(), i + 1));
            }
        }
        cell
    }

    /// Fused parameter feature (length Cp) at normalized `p`.
    pub fn fuse_params(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.arch.n_params {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.arch.n_params,
                p.len()
            )));
        }
        self.fuse(
            &self.features.lines,
            |g| match g.structure() {
                Structure::Line(i) => vec![p[i]],
                _ => unreachable!("lines only"),
            },
            self.arch.param_dim,
        )
    }

    pub fn ensemble_feature(&self, x: [f64; 3], p: &[f64]) -> Result<Vec<f64>> {
        let mut f = self.fuse_spatial(x)?;
        f.extend(self.fuse_params(p)?);
        Ok(f)
    }

    /// Normalized model output at normalized `(x, p)`.
    pub fn forward(&self, x: [f64; 3], p: &[f64]) -> Result<f64> {
        let f = self.ensemble_feature(x, p)?;
        Ok(self.dense_decoder().decode_one(&f))
    }

    /// Batched forward: `xs[i]` paired with `params[i*m..(i+1)*m]`.
    pub fn forward_many(&self, xs: &[[f64; 3]], params: &[f64]) -> Result<Vec<f64>> {
        let dec = self.dense_decoder();
        self.forward_many_with(&dec, xs, params)
    }

    pub fn forward_many_with(&self, dec: &DenseDecoder, xs: &[[f64; 3]], params: &[f64]) -> Result<Vec<f64>> {
        let m = self.arch.n_params;
        if params.len() != xs.len() * m {
            return Err(Error::Shape("params length must equal xs.len() * n_params".into()));
        }
        const CHUNK: usize = 2048;
        let width = self.arch.ensemble_width();
        let mut out = Vec::with_capacity(xs.len());
        for (ci, chunk) in xs.chunks(CHUNK).enumerate() {
            let mut feats = Tensor::zeros(chunk.len(), width);
            for (r, x) in chunk.iter().enumerate() {
                let i = ci * CHUNK + r;
                let f = self.ensemble_feature(*x, &params[i * m..(i + 1) * m])?;
                feats.row_mut(r).copy_from_slice(&f);
            }
            out.extend(dec.decode_batch(&feats));
        }
        Ok(out)
    }

    /// Normalized output mapped back to physical units.
    pub fn predict_physical(&self, x_phys: [f64; 3], p_phys: &[f64]) -> Result<f64> {
        let x = self.domain.normalize_spatial(x_phys);
        let p = self.domain.normalize_params(p_phys)?;
        Ok(self.domain.denormalize_value(self.forward(x, &p)?))
    }

    pub fn parameter_count(&self) -> usize {
        self.features.structures().map(|g| g.values().len()).sum::<usize>()
            + self
                .decoder
                .layers
                .iter()
                .map(|l| l.weight.len() + l.bias.len())
                .sum::<usize>()
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::field::domain::{Bounds, ParamAxis};

    pub fn unit_domain(m: usize) -> DomainSpec {
        DomainSpec {
            spatial: [Bounds::new(0.0, 1.0); 3],
            params: (0..m)
                .map(|i| ParamAxis { name: format!("p{i}"), min: 0.0, max: 1.0 })
                .collect(),
            value_min: 0.0,
            value_max: 1.0,
        }
    }

    pub fn tiny_arch(m: usize) -> ArchConfig {
        ArchConfig {
            spatial_grid_res: 4,
            plane_res: 6,
            line_res: 5,
            spatial_dim: 4,
            param_dim: 3,
            decoder_hidden: 8,
            decoder_layers: 2,
            n_params: m,
            ..ArchConfig::default()
        }
    }

    /// Replace every learnable value by draws from U(lo, hi).
    pub fn randomize(model: &mut ExplorableModel, seed: u64, lo: f32, hi: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in model.features.structures_mut() {
            g.values_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
        }
        for l in &mut model.decoder.layers {
            l.weight.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            l.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::field::arch::SpatialVariant;

    /// Straight-line reference: every step written out by hand.
    fn reference_forward(m: &ExplorableModel, x: [f64; 3], p: &[f64]) -> f64 {
        fn interp(g: &FeatureGrid, u: &[f64]) -> Vec<f64> {
            let r = g.res();
            let d = u.len();
            let mut idx = vec![0usize; d];
            let mut t = vec![0.0; d];
            for k in 0..d {
                let s = (u[k] + 1.0) / 2.0 * (r - 1) as f64;
                let mut i = s.floor() as usize;
                if i > r - 2 {
                    i = r - 2;
                }
                idx[k] = i;
                t[k] = s - i as f64;
            }
            let mut out = vec![0.0; g.channels()];
            for corner in 0..(1usize << d) {
                let mut w = 1.0;
                let mut v = vec![0usize; d];
                for k in 0..d {
                    if corner & (1 << k) != 0 {
                        w *= t[k];
                        v[k] = idx[k] + 1;
                    } else {
                        w *= 1.0 - t[k];
                        v[k] = idx[k];
                    }
                }
                let f = g.vertex(&v);
                for c in 0..out.len() {
                    out[c] += w * f[c] as f64;
                }
            }
            out
        }
        let mut sp = vec![1.0; m.arch.spatial_dim];
        for g in &m.features.spatial {
            let u: Vec<f64> = g.structure().axes().iter().map(|&a| x[a]).collect();
            let f = interp(g, &u);
            for c in 0..sp.len() {
                sp[c] *= f[c];
            }
        }
        let mut pf = vec![1.0; m.arch.param_dim];
        for (i, g) in m.features.lines.iter().enumerate() {
            let f = interp(g, &[p[i]]);
            for c in 0..pf.len() {
                pf[c] *= f[c];
            }
        }
        let mut h: Vec<f64> = sp.into_iter().chain(pf).collect();
        let n = m.decoder.layers.len();
        for (l, layer) in m.decoder.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.outputs];
            for o in 0..layer.outputs {
                let mut s = layer.bias[o] as f64;
                for i in 0..layer.inputs {
                    s += layer.weight[o * layer.inputs + i] as f64 * h[i];
                }
                next[o] = if l + 1 < n { s.max(0.0) } else { s };
            }
            h = next;
        }
        h[0]
    }

    #[test]
    fn init_ranges_follow_setup() {
        let a = tiny_arch(2);
        let m = ExplorableModel::new(a, unit_domain(2), 1).unwrap();
        let grid = &m.features.spatial[0];
        assert!(grid.values().iter().all(|v| v.abs() <= 1e-4));
        for p in &m.features.spatial[1..] {
            assert!(p.values().iter().all(|&v| (0.999..=1.001).contains(&v)));
        }
        for l in &m.features.lines {
            assert!(l.values().iter().all(|&v| (0.01..=0.25).contains(&v)));
        }
        assert_eq!(m.decoder.layers.len(), 3);
        assert_eq!(m.decoder.layers[0].inputs, 7);
        assert_eq!(m.decoder.layers[2].outputs, 1);
    }

    #[test]
    fn forward_matches_reference_bit_for_bit() {
        let mut m = ExplorableModel::new(tiny_arch(2), unit_domain(2), 5).unwrap();
        randomize(&mut m, 17, -1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let got = m.forward(x, &p).unwrap();
            let want = reference_forward(&m, x, &p);
            // Same operation order except for the fold's first step (1.0 * f).
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn batched_forward_matches_scalar() {
        let mut m = ExplorableModel::new(tiny_arch(1), unit_domain(1), 2).unwrap();
        randomize(&mut m, 3, -1.0, 1.0);
        let xs: Vec<[f64; 3]> = (0..40).map(|i| [i as f64 / 40.0 - 0.5, 0.1, -0.3]).collect();
        let ps: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let batch = m.forward_many(&xs, &ps).unwrap();
        for i in 0..40 {
            let one = m.forward(xs[i], &ps[i..i + 1]).unwrap();
            assert!((batch[i] - one).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_decoder_returns_bias() {
        let mut a = tiny_arch(1);
        a.activation = Activation::Identity;
        let mut m = ExplorableModel::new(a, unit_domain(1), 0).unwrap();
        for l in &mut m.decoder.layers {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        m.decoder.layers.last_mut().unwrap().bias[0] = 0.625;
        assert_eq!(m.forward([0.3, -0.2, 0.9], &[0.1]).unwrap(), 0.625);
        assert_eq!(m.forward([-1.0, 1.0, 0.0], &[-1.0]).unwrap(), 0.625);
    }

    #[test]
    fn unit_planes_pass_grid_through() {
        let mut m = ExplorableModel::new(tiny_arch(1), unit_domain(1), 4).unwrap();
        randomize(&mut m, 8, -1.0, 1.0);
        for p in &mut m.features.spatial[1..] {
            p.values_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let x = [0.21, -0.66, 0.05];
        let g = m.features.spatial[0].interpolate(&x).unwrap();
        assert_eq!(m.fuse_spatial(x).unwrap(), g);
    }

    #[test]
    fn zero_grid_absorbs() {
        let mut m = ExplorableModel::new(tiny_arch(1), unit_domain(1), 4).unwrap();
        m.features.spatial[0].values_mut().iter_mut().for_each(|v| *v = 0.0);
        assert!(m.fuse_spatial([0.1, 0.2, 0.3]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_line_passes_through() {
        let mut m = ExplorableModel::new(tiny_arch(1), unit_domain(1), 4).unwrap();
        randomize(&mut m, 1, 0.0, 1.0);
        let direct = m.features.lines[0].interpolate(&[0.33]).unwrap();
        assert_eq!(m.fuse_params(&[0.33]).unwrap(), direct);
    }

    #[test]
    fn zero_line_zeroes_param_feature() {
        let mut m = ExplorableModel::new(tiny_arch(2), unit_domain(2), 4).unwrap();
        m.features.lines[1].values_mut().iter_mut().for_each(|v| *v = 0.0);
        assert!(m.fuse_params(&[0.3, -0.4]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_lines_multiply_per_channel() {
        let mut m = ExplorableModel::new(tiny_arch(2), unit_domain(2), 4).unwrap();
        randomize(&mut m, 21, -1.0, 1.0);
        let a = m.features.lines[0].interpolate(&[0.4]).unwrap();
        let b = m.features.lines[1].interpolate(&[-0.8]).unwrap();
        let got = m.fuse_params(&[0.4, -0.8]).unwrap();
        for c in 0..got.len() {
            assert_eq!(got[c], a[c] * b[c]);
        }
    }

    #[test]
    fn variants_select_structures() {
        for (v, n) in [
            (SpatialVariant::Hybrid, 4),
            (SpatialVariant::GridOnly, 1),
            (SpatialVariant::PlanesOnly, 3),
        ] {
            let a = ArchConfig { spatial_variant: v, ..tiny_arch(1) };
            let m = ExplorableModel::new(a, unit_domain(1), 0).unwrap();
            assert_eq!(m.features.spatial.len(), n);
        }
    }

    #[test]
    fn addition_fusion_sums() {
        let a = ArchConfig { fusion: Fusion::Addition, ..tiny_arch(2) };
        let mut m = ExplorableModel::new(a, unit_domain(2), 0).unwrap();
        randomize(&mut m, 2, -1.0, 1.0);
        let a0 = m.features.lines[0].interpolate(&[0.1]).unwrap();
        let a1 = m.features.lines[1].interpolate(&[0.2]).unwrap();
        let got = m.fuse_params(&[0.1, 0.2]).unwrap();
        for c in 0..got.len() {
            assert_eq!(got[c], a0[c] + a1[c]);
        }
    }

    #[test]
    fn out_of_range_param_is_error() {
        let m = ExplorableModel::new(tiny_arch(1), unit_domain(1), 0).unwrap();
        assert!(matches!(m.forward([0.0; 3], &[1.2]), Err(Error::Domain { .. })));
    }
}
