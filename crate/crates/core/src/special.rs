//! Normal-distribution special functions with tail-stable variants.
//!
//! The quantized likelihoods need differences of normal CDFs over cells that
//! may sit many standard deviations into a tail. Those differences are never
//! formed directly there; instead both terms are factored through the scaled
//! complementary error function `erfcx(x) = exp(x^2) erfc(x)`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{numerical, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
fn ln_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Standard normal CDF.
#[inline]
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Natural log of the standard normal CDF, accurate deep into the lower tail.
pub fn ln_phi(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if x < -5.0 {
        // Phi(x) = 0.5 * erfcx(-x/sqrt2) * exp(-x^2/2)
        (0.5 * erfcx(-x * FRAC_1_SQRT_2)).ln() - 0.5 * x * x
    } else {
        phi(x).ln()
    }
}

/// Scaled complementary error function `exp(x^2) * erfc(x)`.
pub fn erfcx(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        // Overflows to +inf for x below about -26.6, as it should.
        return 2.0 * (x * x).exp() - erfcx(-x);
    }
    if x < 2.0 {
        return (x * x).exp() * libm::erfc(x);
    }
    if x.is_infinite() {
        return 0.0;
    }
    // Continued fraction 1/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))),
    // evaluated with the modified Lentz method.
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = 0.5 * k as f64;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        d = 1.0 / d;
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / (PI.sqrt() * f)
}

/// Mills ratio `Q(x) / phi(x)` where `Q = 1 - Phi`.
#[inline]
pub fn mills_ratio(x: f64) -> f64 {
    (PI / 2.0).sqrt() * erfcx(x * FRAC_1_SQRT_2)
}

/// `Phi(b) - Phi(a)` for `a <= b`, computed without cancellation in either tail.
pub fn phi_diff(a: f64, b: f64) -> f64 {
    if a >= b {
        return 0.0;
    }
    if a >= 0.0 {
        0.5 * (libm::erfc(a * FRAC_1_SQRT_2) - libm::erfc(b * FRAC_1_SQRT_2))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b * FRAC_1_SQRT_2) - libm::erfc(-a * FRAC_1_SQRT_2))
    } else {
        1.0 - phi(a) - 0.5 * libm::erfc(b * FRAC_1_SQRT_2)
    }
}

/// Moments of a standard normal truncated to `[a, b]`.
///
/// `r1 = (phi(a) - phi(b)) / Z` and `r2 = (a phi(a) - b phi(b)) / Z` with
/// `Z = Phi(b) - Phi(a)`; the truncated mean is `r1` and the variance is
/// `1 + r2 - r1^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedStd {
    pub r1: f64,
    pub r2: f64,
    /// `ln Z`, finite even when `Z` itself underflows.
    pub ln_mass: f64,
}

impl TruncatedStd {
    pub fn mean(&self) -> f64 {
        self.r1
    }

    pub fn variance(&self) -> f64 {
        (1.0 + self.r2 - self.r1 * self.r1).max(0.0)
    }

    pub fn mass(&self) -> f64 {
        self.ln_mass.exp()
    }
}

#[inline]
fn x_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        x * normal_pdf(x)
    }
}

/// Standardized truncated-normal moments for the interval `[a, b]`.
pub fn truncated_std(a: f64, b: f64) -> Result<TruncatedStd> {
    if a.is_nan() || b.is_nan() || a >= b {
        return Err(numerical(format!("invalid truncation interval [{a}, {b}]")));
    }
    if b <= 0.0 {
        // Reflect into the upper tail.
        let t = upper_tail(-b, -a)?;
        return Ok(TruncatedStd {
            r1: -t.r1,
            r2: t.r2,
            ln_mass: t.ln_mass,
        });
    }
    if a >= 0.0 {
        return upper_tail(a, b);
    }
    let z = phi_diff(a, b);
    if z <= 0.0 {
        return Err(numerical(format!("vanishing mass on [{a}, {b}]")));
    }
    Ok(TruncatedStd {
        r1: (normal_pdf(a) - normal_pdf(b)) / z,
        r2: (x_pdf(a) - x_pdf(b)) / z,
        ln_mass: z.ln(),
    })
}

// 0 <= a < b <= inf. Everything is factored through phi(a).
fn upper_tail(a: f64, b: f64) -> Result<TruncatedStd> {
    let (e, mb_e, b_e) = if b.is_infinite() {
        (0.0, 0.0, 0.0)
    } else {
        let e = (-0.5 * (b - a) * (b + a)).exp();
        (e, mills_ratio(b) * e, b * e)
    };
    let denom = mills_ratio(a) - mb_e;
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(numerical(format!(
            "degenerate cell mass on [{a}, {b}] (scaled mass {denom})"
        )));
    }
    Ok(TruncatedStd {
        r1: (1.0 - e) / denom,
        r2: (a - b_e) / denom,
        ln_mass: ln_normal_pdf(a) + denom.ln(),
    })
}

/// Mean of `N(mu, sd^2)` truncated to `[a, b]`.
pub fn trunc_normal_mean(mu: f64, sd: f64, a: f64, b: f64) -> Result<f64> {
    if !(sd > 0.0) {
        return Err(numerical(format!("non-positive scale {sd}")));
    }
    let t = truncated_std((a - mu) / sd, (b - mu) / sd)?;
    Ok(mu + sd * t.r1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_reference_values() {
        assert_eq!(phi(0.0), 0.5);
        // scipy.stats.norm.cdf(1.96)
        assert!((phi(1.96) - 0.975_002_104_851_779_5).abs() < 1e-15);
        for &x in &[0.1, 0.7, 1.3, 2.5, 4.0, 6.0] {
            assert!((phi(-x) - (1.0 - phi(x))).abs() < 1e-15, "x={x}");
        }
    }

    #[test]
    fn ln_phi_deep_tail() {
        // scipy.stats.norm.logcdf(-10)
        assert!((ln_phi(-10.0) + 53.231_285_150_512_48).abs() < 1e-10);
        let scaled = (ln_phi(-10.0) + 50.0).exp();
        assert!(scaled.is_finite() && scaled > 0.0);
        // Asymptotic expansion Phi(-x) ~ phi(x)/x (1 - 1/x^2 + 3/x^4 - 15/x^6).
        let x: f64 = 38.0;
        let series = normal_pdf(x).ln() - x.ln()
            + (1.0 - 1.0 / x.powi(2) + 3.0 / x.powi(4) - 15.0 / x.powi(6)).ln();
        assert!((ln_phi(-x) - series).abs() < 1e-9);
    }

    #[test]
    fn erfcx_matches_direct_form_and_asymptote() {
        for &x in &[0.0f64, 0.5, 1.9, 2.0, 2.1, 3.0, 5.0, 10.0] {
            let direct = (x * x).exp() * libm::erfc(x);
            assert!((erfcx(x) - direct).abs() / direct < 1e-13, "x={x}");
        }
        let x = 1e4;
        let asym = 1.0 / (x * PI.sqrt()) * (1.0 - 0.5 / (x * x));
        assert!((erfcx(x) - asym).abs() / asym < 1e-12);
        assert!((erfcx(-1.0) - (1.0f64).exp() * libm::erfc(-1.0)).abs() < 1e-13);
    }

    #[test]
    fn truncated_mean_known_cases() {
        assert_eq!(
            trunc_normal_mean(0.3, 1.2, f64::NEG_INFINITY, f64::INFINITY).unwrap(),
            0.3
        );
        assert!(trunc_normal_mean(0.0, 1.0, -1.5, 1.5).unwrap().abs() < 1e-15);
        let half = trunc_normal_mean(0.0, 1.0, 0.0, f64::INFINITY).unwrap();
        assert!((half - (2.0 / PI).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn tail_cells_stay_inside_bounds() {
        // Cell 30 to 40 standard deviations out: the naive Phi difference is 0.
        let m = trunc_normal_mean(0.0, 1.0, 30.0, 40.0).unwrap();
        assert!(m > 30.0 && m < 30.1);
        let m = trunc_normal_mean(0.0, 1.0, -40.0, -30.0).unwrap();
        assert!(m < -30.0 && m > -30.1);
        let t = truncated_std(30.0, f64::INFINITY).unwrap();
        assert!(t.ln_mass < -400.0 && t.ln_mass.is_finite());
        assert!(t.variance() > 0.0 && t.variance() < 1.0);
    }

    #[test]
    fn tail_branch_agrees_with_direct_branch_near_zero() {
        // Cells straddling the branch point must give continuous answers.
        let a = truncated_std(1e-9, 1.0).unwrap();
        let b = truncated_std(-1e-9, 1.0).unwrap();
        assert!((a.r1 - b.r1).abs() < 1e-8);
        assert!((a.r2 - b.r2).abs() < 1e-8);
        assert!((a.ln_mass - b.ln_mass).abs() < 1e-8);
    }

    #[test]
    fn empty_interval_is_an_error() {
        assert!(truncated_std(1.0, 1.0).is_err());
        assert!(truncated_std(2.0, 1.0).is_err());
    }
}
