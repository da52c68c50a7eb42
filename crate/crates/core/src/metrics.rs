//! Volume comparison metrics.

use crate::data::VolumeGrid;
use crate::error::{Error, Result};

/// Reported PSNR for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("fields have {a} and {b} voxels")));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Shape("empty fields".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(range² / MSE)`, infinite when the fields are equal.
pub fn psnr(a: &[f64], b: &[f64], data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::Config(format!("PSNR data range must be positive, got {data_range}")));
    }
    let e = mse(a, b)?;
    Ok(if e == 0.0 { f64::INFINITY } else { 10.0 * (data_range * data_range / e).log10() })
}

/// PSNR with the infinite case reported as [`PSNR_CAP`].
pub fn psnr_capped(a: &[f64], b: &[f64], data_range: f64) -> Result<f64> {
    Ok(psnr(a, b, data_range)?.min(PSNR_CAP))
}

pub fn max_difference(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs())))
}

/// `max − min` of a field.
pub fn value_range(a: &[f64]) -> f64 {
    let (lo, hi) = a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    hi - lo
}

fn grid_values(g: &VolumeGrid) -> Vec<f64> {
    g.values.iter().map(|&v| v as f64).collect()
}

fn check_dims(a: &VolumeGrid, b: &VolumeGrid) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!("volume dims {:?} and {:?} differ", a.dims, b.dims)));
    }
    Ok(())
}

pub fn volume_psnr(a: &VolumeGrid, b: &VolumeGrid, data_range: f64) -> Result<f64> {
    check_dims(a, b)?;
    psnr_capped(&grid_values(a), &grid_values(b), data_range)
}

/// Maximum difference after mapping both volumes to `[0, 1]` with the
/// value range `[vmin, vmax]`.
pub fn volume_max_difference(a: &VolumeGrid, b: &VolumeGrid, vmin: f64, vmax: f64) -> Result<f64> {
    check_dims(a, b)?;
    let n = |g: &VolumeGrid| g.values.iter().map(|&v| (v as f64 - vmin) / (vmax - vmin)).collect::<Vec<_>>();
    max_difference(&n(a), &n(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchors() {
        let a = vec![0.2, 0.5, 0.9];
        assert_eq!(psnr_capped(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(max_difference(&a, &a).unwrap(), 0.0);
        let mut c = a.clone();
        c[1] += 0.5;
        assert!((max_difference(&a, &c).unwrap() - 0.5).abs() < 1e-15);
        assert!(psnr(&a, &b[..2], 1.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn psnr_symmetric(a in prop::collection::vec(-1.0f64..1.0, 16), b in prop::collection::vec(-1.0f64..1.0, 16)) {
            prop_assert_eq!(psnr(&a, &b, 2.0).unwrap(), psnr(&b, &a, 2.0).unwrap());
        }

        #[test]
        fn max_difference_is_metric(
            a in prop::collection::vec(-1.0f64..1.0, 12),
            b in prop::collection::vec(-1.0f64..1.0, 12),
            c in prop::collection::vec(-1.0f64..1.0, 12),
        ) {
            let ab = max_difference(&a, &b).unwrap();
            let bc = max_difference(&b, &c).unwrap();
            let ac = max_difference(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-15);
            prop_assert_eq!(ab, max_difference(&b, &a).unwrap());
            let brute = (0..12).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max);
            prop_assert_eq!(ab, brute);
        }
    }
}
