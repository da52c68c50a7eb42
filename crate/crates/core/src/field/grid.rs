//! Dense feature grids queried by multilinear interpolation.
//!
//! Vertices sit on cell corners spanning exactly `[-1, 1]` per axis, so a
//! structure with resolution `R` has `R - 1` cells per axis. Storage is
//! vertex-major with the first axis fastest and channels contiguous per vertex:
//! `data[(i0 + R*(i1 + R*i2)) * C + c]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity of a learnable structure within a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Structure {
    Grid3d,
    PlaneXy,
    PlaneYz,
    PlaneXz,
    Line(usize),
}

impl Structure {
    /// Model input axes read by this structure (0..3 spatial, 3.. parameters).
    pub fn axes(&self) -> Vec<usize> {
        match *self {
            Structure::Grid3d => vec![0, 1, 2],
            Structure::PlaneXy => vec![0, 1],
            Structure::PlaneYz => vec![1, 2],
            Structure::PlaneXz => vec![0, 2],
            Structure::Line(i) => vec![3 + i],
        }
    }

    pub fn name(&self) -> String {
        match *self {
            Structure::Grid3d => "grid3d".into(),
            Structure::PlaneXy => "plane_xy".into(),
            Structure::PlaneYz => "plane_yz".into(),
            Structure::PlaneXz => "plane_xz".into(),
            Structure::Line(i) => format!("line_{i}"),
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "grid3d" => Some(Structure::Grid3d),
            "plane_xy" => Some(Structure::PlaneXy),
            "plane_yz" => Some(Structure::PlaneYz),
            "plane_xz" => Some(Structure::PlaneXz),
            _ => name.strip_prefix("line_")?.parse().ok().map(Structure::Line),
        }
    }
}

/// Cell index and in-cell fraction for a normalized coordinate.
#[inline]
pub fn locate(res: usize, u: f64) -> (usize, f64) {
    let t = (u + 1.0) * 0.5 * (res - 1) as f64;
    let i = (t.floor().max(0.0) as usize).min(res - 2);
    (i, t - i as f64)
}

/// Normalized coordinate of vertex `i` on an axis with `res` vertices.
#[inline]
pub fn vertex_coord(res: usize, i: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (res - 1) as f64
}

/// Up to eight (vertex, weight) pairs describing one interpolation.
#[derive(Clone, Copy, Debug)]
pub struct CellWeights {
    pub n: usize,
    pub vertex: [usize; 8],
    pub weight: [f64; 8],
    /// Derivative of each weight with respect to each normalized coordinate.
    pub dweight: [[f64; 3]; 8],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    structure: Structure,
    res: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(structure: Structure, res: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if res < 2 {
            return Err(Error::Config(format!("{} resolution must be >= 2", structure.name())));
        }
        let want = res.pow(structure.axes().len() as u32) * channels;
        if data.len() != want {
            return Err(Error::Shape(format!(
                "{}: expected {want} values, got {}",
                structure.name(),
                data.len()
            )));
        }
        Ok(Self { structure, res, channels, data })
    }

    pub fn filled(structure: Structure, res: usize, channels: usize, value: f32) -> Self {
        let n = res.pow(structure.axes().len() as u32) * channels;
        Self::new(structure, res, channels, vec![value; n]).expect("consistent shape")
    }

    pub fn uniform(
        structure: Structure,
        res: usize,
        channels: usize,
        lo: f32,
        hi: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let n = res.pow(structure.axes().len() as u32) * channels;
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::new(structure, res, channels, data).expect("consistent shape")
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn ndim(&self) -> usize {
        self.structure.axes().len()
    }

    pub fn vertex_count(&self) -> usize {
        self.res.pow(self.ndim() as u32)
    }

    /// Tensor shape as written to checkpoints: `[R; ndim] + [C]`.
    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.res; self.ndim()];
        s.push(self.channels);
        s
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Features stored at a vertex given per-axis indices.
    pub fn vertex(&self, idx: &[usize]) -> &[f32] {
        let v = self.flat_vertex(idx);
        &self.data[v * self.channels..(v + 1) * self.channels]
    }

    pub fn flat_vertex(&self, idx: &[usize]) -> usize {
        idx.iter().rev().fold(0, |acc, &i| acc * self.res + i)
    }

    fn check(&self, coords: &[f64], axis_names: &dyn Fn(usize) -> String) -> Result<()> {
        if coords.len() != self.ndim() {
            return Err(Error::Shape(format!(
                "{} expects {} coordinates, got {}",
                self.structure.name(),
                self.ndim(),
                coords.len()
            )));
        }
        for (k, &u) in coords.iter().enumerate() {
            if !(-1.0..=1.0).contains(&u) {
                return Err(Error::Domain {
                    axis: axis_names(self.structure.axes()[k]),
                    value: u,
                });
            }
        }
        Ok(())
    }

    /// Interpolation corners for in-range coordinates (one per structure axis).
    pub fn cell_weights(&self, coords: &[f64]) -> Result<CellWeights> {
        self.check(coords, &default_axis_name)?;
        Ok(self.cell_weights_unchecked(coords))
    }

    pub(crate) fn cell_weights_unchecked(&self, coords: &[f64]) -> CellWeights {
        let d = coords.len();
        let scale = 0.5 * (self.res - 1) as f64;
        let mut cell = [0usize; 3];
        let mut frac = [0f64; 3];
        for k in 0..d {
            let (i, t) = locate(self.res, coords[k]);
            cell[k] = i;
            frac[k] = t;
        }
        let n = 1 << d;
        let mut out = CellWeights {
            n,
            vertex: [0; 8],
            weight: [0.0; 8],
            dweight: [[0.0; 3]; 8],
        };
        for corner in 0..n {
            let mut v = 0usize;
            let mut stride = 1usize;
            let mut w = 1.0;
            let mut parts = [0f64; 3];
            let mut slopes = [0f64; 3];
            for k in 0..d {
                let bit = (corner >> k) & 1;
                v += (cell[k] + bit) * stride;
                stride *= self.res;
                let (p, s) = if bit == 1 { (frac[k], scale) } else { (1.0 - frac[k], -scale) };
                parts[k] = p;
                slopes[k] = s;
                w *= p;
            }
            for k in 0..d {
                let mut dw = slopes[k];
                for j in 0..d {
                    if j != k {
                        dw *= parts[j];
                    }
                }
                out.dweight[corner][k] = dw;
            }
            out.vertex[corner] = v;
            out.weight[corner] = w;
        }
        out
    }

    /// Multilinear interpolation at normalized coordinates, one per axis of
    /// this structure.
    pub fn interpolate(&self, coords: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.interpolate_into(coords, &mut out, &default_axis_name)?;
        Ok(out)
    }

    pub fn interpolate_into(
        &self,
        coords: &[f64],
        out: &mut [f64],
        axis_names: &dyn Fn(usize) -> String,
    ) -> Result<()> {
        self.check(coords, axis_names)?;
        self.interpolate_unchecked(coords, out);
        Ok(())
    }

    pub(crate) fn interpolate_unchecked(&self, coords: &[f64], out: &mut [f64]) {
        let cw = self.cell_weights_unchecked(coords);
        out.iter_mut().for_each(|o| *o = 0.0);
        let c = self.channels;
        for k in 0..cw.n {
            let w = cw.weight[k];
            if w == 0.0 {
                continue;
            }
            let base = cw.vertex[k] * c;
            for (o, &f) in out.iter_mut().zip(&self.data[base..base + c]) {
                *o += w * f as f64;
            }
        }
    }
}

/// Precomputed interpolation corners for a batch of coordinates, used by the
/// tape's gather primitive.
#[derive(Clone, Debug)]
pub struct GatherPlan {
    pub rows: usize,
    pub corners: usize,
    pub ndim: usize,
    pub vertex_count: usize,
    pub channels: usize,
    pub vertex: Vec<usize>,
    pub weight: Vec<f64>,
    /// `rows * corners * ndim` weight derivatives.
    pub dweight: Vec<f64>,
}

impl FeatureGrid {
    /// Plans interpolation at `coords`, a row-major `[rows × ndim]` buffer.
    pub fn gather_plan(&self, coords: &[f64], axis_names: &dyn Fn(usize) -> String) -> Result<GatherPlan> {
        let d = self.ndim();
        if coords.len() % d != 0 {
            return Err(Error::Shape(format!("coordinate buffer is not a multiple of {d}")));
        }
        let rows = coords.len() / d;
        let corners = 1 << d;
        let mut plan = GatherPlan {
            rows,
            corners,
            ndim: d,
            vertex_count: self.vertex_count(),
            channels: self.channels,
            vertex: Vec::with_capacity(rows * corners),
            weight: Vec::with_capacity(rows * corners),
            dweight: Vec::with_capacity(rows * corners * d),
        };
        for u in coords.chunks(d) {
            self.check(u, axis_names)?;
            let cw = self.cell_weights_unchecked(u);
            for k in 0..corners {
                plan.vertex.push(cw.vertex[k]);
                plan.weight.push(cw.weight[k]);
                plan.dweight.extend_from_slice(&cw.dweight[k][..d]);
            }
        }
        Ok(plan)
    }
}

pub(crate) fn default_axis_name(axis: usize) -> String {
    if axis < 3 {
        super::domain::SPATIAL_AXIS_NAMES[axis].to_string()
    } else {
        format!("p{}", axis - 3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_cell_interpolates_to_constant() {
        let g = FeatureGrid::filled(Structure::Grid3d, 4, 3, 0.75);
        let v = g.interpolate(&[0.13, -0.4, 0.9]).unwrap();
        for x in v {
            assert!((x - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn vertices_return_stored_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = FeatureGrid::uniform(Structure::PlaneXz, 5, 2, -1.0, 1.0, &mut rng);
        for i in 0..5 {
            for j in 0..5 {
                let u = [vertex_coord(5, i), vertex_coord(5, j)];
                let got = g.interpolate(&u).unwrap();
                let want = g.vertex(&[i, j]);
                for (a, &b) in got.iter().zip(want) {
                    assert_eq!(*a, b as f64);
                }
            }
        }
    }

    #[test]
    fn linear_midpoint() {
        let g = FeatureGrid::new(Structure::Line(0), 2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(g.interpolate(&[0.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn out_of_range_names_axis() {
        let g = FeatureGrid::filled(Structure::PlaneYz, 3, 1, 1.0);
        match g.interpolate(&[0.0, 1.5]) {
            Err(Error::Domain { axis, value }) => {
                assert_eq!(axis, "z");
                assert_eq!(value, 1.5);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.interpolate(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn continuous_across_cell_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = FeatureGrid::uniform(Structure::Grid3d, 5, 4, -1.0, 1.0, &mut rng);
        let b = vertex_coord(5, 2);
        let lo = g.interpolate(&[b - 1e-12, 0.3, -0.2]).unwrap();
        let hi = g.interpolate(&[b + 1e-12, 0.3, -0.2]).unwrap();
        for (a, c) in lo.iter().zip(hi) {
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_along_each_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = FeatureGrid::uniform(Structure::Grid3d, 3, 2, -1.0, 1.0, &mut rng);
        // Inside one cell, points along x are affine: midpoint = average.
        let a = g.interpolate(&[0.1, 0.2, 0.3]).unwrap();
        let b = g.interpolate(&[0.7, 0.2, 0.3]).unwrap();
        let m = g.interpolate(&[0.4, 0.2, 0.3]).unwrap();
        for k in 0..2 {
            assert!((m[k] - 0.5 * (a[k] + b[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn names_round_trip() {
        for s in [
            Structure::Grid3d,
            Structure::PlaneXy,
            Structure::PlaneYz,
            Structure::PlaneXz,
            Structure::Line(7),
        ] {
            assert_eq!(Structure::from_name(&s.name()), Some(s));
        }
    }
}
