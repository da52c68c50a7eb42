//! Standard normal CDF and density.

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `Φ(z)`, evaluated through `erfc` so the lower tail keeps full relative
/// precision.
pub fn phi(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// `φ(z)`.
pub fn pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

const HART_NUM: [f64; 7] = [
    3.526_249_659_989_11e-2,
    0.700_383_064_443_688,
    6.373_962_203_531_65,
    33.912_866_078_383,
    112.079_291_497_871,
    221.213_596_169_931,
    220.206_867_912_376,
];
const HART_DEN: [f64; 8] = [
    8.838_834_764_831_84e-2,
    1.755_667_163_182_64,
    16.064_177_579_207,
    86.780_732_202_946_1,
    296.564_248_779_674,
    637.333_633_378_831,
    793.826_512_519_948,
    440.413_735_824_752,
];

#[inline(always)]
fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().fold(0.0, |acc, &k| acc * x + k)
}

const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
/// `1.5·2⁵²`: adding it rounds to an integer held in the low mantissa bits.
const ROUND_SHIFTER: f64 = 6_755_399_441_055_744.0;

/// `1/n!` for `n = 12, 11, …, 0`.
const EXP_TAYLOR: [f64; 13] = {
    let mut c = [1.0; 13];
    let mut n = 1;
    while n <= 12 {
        c[12 - n] = c[13 - n] / n as f64;
        n += 1;
    }
    c
};

/// `eˣ` for `x ∈ [-700, 0]`, branch-free so batch loops vectorize.
#[inline(always)]
pub fn exp_nonpositive(x: f64) -> f64 {
    let t = x * std::f64::consts::LOG2_E + ROUND_SHIFTER;
    let k = t - ROUND_SHIFTER;
    let r = x - k * LN2_HI - k * LN2_LO;
    let p = horner(&EXP_TAYLOR, r);
    let scale = f64::from_bits((t.to_bits().wrapping_add(1023)) << 52);
    p * scale
}

/// `(Φ(z), φ(z))` from a single exponential, using Hart's rational
/// approximation of the tail mass (absolute error near 1e-15).
#[inline(always)]
pub fn phi_pdf(z: f64) -> (f64, f64) {
    let a = z.abs().min(37.0);
    let e = exp_nonpositive(-0.5 * a * a);
    let rational = e * horner(&HART_NUM, a) / horner(&HART_DEN, a);
    let fraction = e * INV_SQRT_2PI / (a + 1.0 / (a + 2.0 / (a + 3.0 / (a + 4.0 / (a + 0.65)))));
    let tail = if a < 7.071_067_811_865_47 { rational } else { fraction };
    (if z > 0.0 { 1.0 - tail } else { tail }, INV_SQRT_2PI * e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors() {
        assert_eq!(phi(0.0), 0.5);
        assert!((pdf(0.0) - 0.398_942_280_4).abs() < 1e-10);
    }

    #[test]
    fn matches_erf_reference() {
        for i in -80..=80 {
            let z = i as f64 * 0.1;
            let reference = 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
            assert!((phi(z) - reference).abs() <= 1e-12, "z={z}");
        }
    }

    #[test]
    fn single_exponential_form_matches() {
        for i in -4000..=4000 {
            let z = i as f64 * 0.01;
            let (p, d) = phi_pdf(z);
            assert!((p - phi(z)).abs() <= 2e-15, "z={z}");
            assert!((d - pdf(z)).abs() <= 1e-16, "z={z}");
        }
        assert!(phi_pdf(-40.0).0 < 1e-290);
        assert_eq!(phi_pdf(40.0).0, 1.0);
    }

    #[test]
    fn exponential_matches_std() {
        for i in 0..=70_000 {
            let x = -(i as f64) * 0.01;
            let (got, want) = (exp_nonpositive(x), x.exp());
            assert!((got - want).abs() <= 4e-16 * want, "x={x}");
        }
    }

    #[test]
    fn symmetric() {
        for z in [0.13, 0.9, 2.2, 4.7, 7.5] {
            assert!((phi(z) + phi(-z) - 1.0).abs() < 1e-15);
            assert_eq!(pdf(z), pdf(-z));
        }
    }

    #[test]
    fn density_is_derivative_of_cdf() {
        for z in [-3.0, -0.4, 0.0, 1.1, 2.5] {
            let h = 1e-5;
            let fd = (phi(z + h) - phi(z - h)) / (2.0 * h);
            assert!((fd - pdf(z)).abs() < 1e-9);
        }
    }
}
