use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    /// Physical value to the normalized `[-1, 1]` coordinate.
    pub fn normalize(&self, v: f64) -> f64 {
        2.0 * (v - self.min) / (self.max - self.min) - 1.0
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        self.min + (u + 1.0) * 0.5 * (self.max - self.min)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamAxis {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl ParamAxis {
    pub fn bounds(&self) -> Bounds {
        Bounds::new(self.min, self.max)
    }
}

/// Physical extents of the spatial and parameter inputs plus the value range
/// used to map training values to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub spatial: [Bounds; 3],
    pub params: Vec<ParamAxis>,
    pub value_min: f64,
    pub value_max: f64,
}

pub const SPATIAL_AXIS_NAMES: [&str; 3] = ["x", "y", "z"];

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        for (b, name) in self.spatial.iter().zip(SPATIAL_AXIS_NAMES) {
            if !(b.min < b.max) {
                return Err(Error::Config(format!("spatial axis {name}: min must be < max")));
            }
        }
        for p in &self.params {
            if !(p.min < p.max) {
                return Err(Error::Config(format!("parameter {}: min must be < max", p.name)));
            }
        }
        if !(self.value_min < self.value_max) {
            return Err(Error::Config("value_min must be < value_max".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn value_span(&self) -> f64 {
        self.value_max - self.value_min
    }

    pub fn normalize_value(&self, v: f64) -> f64 {
        (v - self.value_min) / self.value_span()
    }

    pub fn denormalize_value(&self, v: f64) -> f64 {
        self.value_min + v * self.value_span()
    }

    pub fn normalize_spatial(&self, x: [f64; 3]) -> [f64; 3] {
        [
            self.spatial[0].normalize(x[0]),
            self.spatial[1].normalize(x[1]),
            self.spatial[2].normalize(x[2]),
        ]
    }

    pub fn denormalize_spatial(&self, u: [f64; 3]) -> [f64; 3] {
        [
            self.spatial[0].denormalize(u[0]),
            self.spatial[1].denormalize(u[1]),
            self.spatial[2].denormalize(u[2]),
        ]
    }

    pub fn normalize_params(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                p.len()
            )));
        }
        Ok(p.iter()
            .zip(&self.params)
            .map(|(&v, a)| a.bounds().normalize(v))
            .collect())
    }

    pub fn denormalize_params(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.params)
            .map(|(&v, a)| a.bounds().denormalize(v))
            .collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Name of a model input axis: spatial axes first, then parameters.
    pub fn axis_name(&self, axis: usize) -> String {
        if axis < 3 {
            SPATIAL_AXIS_NAMES[axis].to_string()
        } else {
            self.params
                .get(axis - 3)
                .map(|p| p.name.clone())
                .unwrap_or_else(|| format!("p{}", axis - 3))
        }
    }

    /// Normalized coordinate of voxel-center `i` along an axis with `n` voxels.
    pub fn voxel_center(i: usize, n: usize) -> f64 {
        (2 * i + 1) as f64 / n as f64 - 1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nyx_like() -> DomainSpec {
        DomainSpec {
            spatial: [Bounds::new(0.0, 1.0); 3],
            params: vec![
                ParamAxis { name: "OmM".into(), min: 0.12, max: 0.155 },
                ParamAxis { name: "OmB".into(), min: 0.0215, max: 0.0235 },
                ParamAxis { name: "h".into(), min: 0.55, max: 0.85 },
            ],
            value_min: -2.0,
            value_max: 3.0,
        }
    }

    #[test]
    fn bounds_map_to_unit_box() {
        let d = nyx_like();
        let u = d.normalize_params(&[0.12, 0.0225, 0.85]).unwrap();
        assert!((u[0] + 1.0).abs() < 1e-12);
        assert!(u[1].abs() < 1e-9);
        assert!((u[2] - 1.0).abs() < 1e-12);
        assert_eq!(d.normalize_value(-2.0), 0.0);
        assert_eq!(d.normalize_value(3.0), 1.0);
    }

    #[test]
    fn normalization_is_invertible() {
        let d = nyx_like();
        for v in [-2.0, -0.3, 0.0, 1.7, 3.0] {
            assert!((d.denormalize_value(d.normalize_value(v)) - v).abs() <= 1e-7);
        }
        let p = [0.13, 0.022, 0.6];
        let back = d.denormalize_params(&d.normalize_params(&p).unwrap());
        for (a, b) in p.iter().zip(back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_inverted_bounds() {
        let mut d = nyx_like();
        d.params[1].max = 0.02;
        assert!(d.validate().is_err());
    }

    #[test]
    fn voxel_centers_stay_inside() {
        assert!((DomainSpec::voxel_center(0, 4) + 0.75).abs() < 1e-15);
        assert!((DomainSpec::voxel_center(3, 4) - 0.75).abs() < 1e-15);
    }
}
