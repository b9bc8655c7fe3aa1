//! ADC models and their observation likelihoods.
//!
//! The physical converter is a per-axis uniform quantizer with `2^bits`
//! levels centred on `k * step`. Cells at the two extreme codes extend to
//! infinity. The pseudo-de-quantization (PDQ) model replaces the quantizer by
//! an additive linear gain-plus-noise model on the inference side only.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::random::complex_gaussian;
use crate::special::{phi_diff, truncated_std};

/// Converter description shared by simulation and inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum QuantizerSpec {
    /// Infinite-resolution ADC.
    None,
    /// Uniform quantizer with exact likelihood.
    Uniform { bits: u32, step: f64 },
    /// Uniform hardware, PDQ likelihood. `input_power` is `E|x|^2` of the
    /// pre-ADC samples and scales the distortion variance.
    Pdq {
        bits: u32,
        step: f64,
        rho: f64,
        input_power: f64,
    },
}

impl QuantizerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            QuantizerSpec::None => Ok(()),
            QuantizerSpec::Uniform { bits, step } => check_uniform(bits, step),
            QuantizerSpec::Pdq {
                bits,
                step,
                rho,
                input_power,
            } => {
                check_uniform(bits, step)?;
                if !(0.0..1.0).contains(&rho) {
                    return Err(domain(format!("PDQ distortion factor {rho} outside [0, 1)")));
                }
                if !(input_power >= 0.0) || !input_power.is_finite() {
                    return Err(domain("PDQ input power must be finite and non-negative"));
                }
                Ok(())
            }
        }
    }

    /// The converter that actually produces samples.
    pub fn adc(&self) -> QuantizerSpec {
        match *self {
            QuantizerSpec::Pdq { bits, step, .. } => QuantizerSpec::Uniform { bits, step },
            other => other,
        }
    }

    pub fn bits(&self) -> Option<u32> {
        match *self {
            QuantizerSpec::None => None,
            QuantizerSpec::Uniform { bits, .. } | QuantizerSpec::Pdq { bits, .. } => Some(bits),
        }
    }

    /// Variance of the additive noise seen by inference, per complex sample.
    ///
    /// For uniform and none this is just `noise_var`; PDQ adds the scaled
    /// distortion term.
    pub fn effective_noise(&self, noise_var: f64) -> f64 {
        match *self {
            QuantizerSpec::Pdq {
                rho, input_power, ..
            } => (1.0 - rho) * (1.0 - rho) * noise_var + rho * (1.0 - rho) * input_power,
            _ => noise_var,
        }
    }
}

fn check_uniform(bits: u32, step: f64) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(domain(format!("bit depth {bits} outside 1..=16")));
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(domain(format!("quantization step must be positive, got {step}")));
    }
    Ok(())
}

/// Per-axis code indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantCode {
    pub k1: i32,
    pub k2: i32,
}

/// One ADC output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation {
    Analog(Complex64),
    Code(QuantCode),
}

impl Observation {
    /// Numeric value of the sample; codes map to their cell centres.
    pub fn value(&self, step: f64) -> Complex64 {
        match *self {
            Observation::Analog(v) => v,
            Observation::Code(c) => Complex64::new(c.k1 as f64 * step, c.k2 as f64 * step),
        }
    }
}

/// Smallest and largest code index for `bits` bits.
pub fn code_range(bits: u32) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half + 1, half)
}

/// Code of one real axis.
pub fn quantize_axis(x: f64, bits: u32, step: f64) -> i32 {
    let (lo, hi) = code_range(bits);
    // Cell k is [(k - 1/2) step, (k + 1/2) step).
    let k = (x / step + 0.5).floor();
    if k <= lo as f64 {
        lo
    } else if k >= hi as f64 {
        hi
    } else {
        k as i32
    }
}

/// Passes `x` through the converter described by `spec`.
///
/// PDQ draws from its own linearized model `(1 - rho) x + n_q`.
pub fn quantize<R: Rng + ?Sized>(
    x: Complex64,
    spec: &QuantizerSpec,
    rng: &mut R,
) -> Result<Observation> {
    if x.re.is_nan() || x.im.is_nan() {
        return Err(domain("cannot quantize NaN"));
    }
    spec.validate()?;
    Ok(match *spec {
        QuantizerSpec::None => Observation::Analog(x),
        QuantizerSpec::Uniform { bits, step } => Observation::Code(QuantCode {
            k1: quantize_axis(x.re, bits, step),
            k2: quantize_axis(x.im, bits, step),
        }),
        QuantizerSpec::Pdq {
            rho, input_power, ..
        } => {
            let nq = complex_gaussian(rng, rho * (1.0 - rho) * input_power);
            Observation::Analog(x * (1.0 - rho) + nq)
        }
    })
}

/// Lower and upper threshold of code `k`.
pub fn thresholds(k: i32, bits: u32, step: f64) -> Result<(f64, f64)> {
    check_uniform(bits, step)?;
    let (lo, hi) = code_range(bits);
    if k < lo || k > hi {
        return Err(domain(format!("code {k} outside {lo}..={hi}")));
    }
    let lower = if k == lo {
        f64::NEG_INFINITY
    } else {
        (k as f64 - 0.5) * step
    };
    let upper = if k == hi {
        f64::INFINITY
    } else {
        (k as f64 + 0.5) * step
    };
    Ok((lower, upper))
}

fn axis_log_prob(k: i32, mean: f64, sd: f64, bits: u32, step: f64) -> Result<f64> {
    let (lo, hi) = thresholds(k, bits, step)?;
    if sd == 0.0 {
        return Ok(if lo <= mean && mean < hi {
            0.0
        } else {
            f64::NEG_INFINITY
        });
    }
    let (a, b) = ((lo - mean) / sd, (hi - mean) / sd);
    let direct = phi_diff(a, b);
    if direct > 1e-300 {
        return Ok(direct.ln());
    }
    match truncated_std(a, b) {
        Ok(t) => Ok(t.ln_mass),
        Err(_) => Ok(f64::NEG_INFINITY),
    }
}

/// `ln p(y | z)` for noise variance `noise_var` (complex, per sample).
pub fn log_likelihood(
    y: &Observation,
    z: Complex64,
    noise_var: f64,
    spec: &QuantizerSpec,
) -> Result<f64> {
    spec.validate()?;
    if !(noise_var >= 0.0) {
        return Err(domain("noise variance must be non-negative"));
    }
    match (spec, y) {
        (QuantizerSpec::None, Observation::Analog(v)) => Ok(ln_cn(*v, z, noise_var)),
        (QuantizerSpec::Uniform { bits, step }, Observation::Code(c)) => {
            let sd = (0.5 * noise_var).sqrt();
            Ok(axis_log_prob(c.k1, z.re, sd, *bits, *step)?
                + axis_log_prob(c.k2, z.im, sd, *bits, *step)?)
        }
        (QuantizerSpec::Pdq { step, rho, .. }, obs) => {
            let v = spec.effective_noise(noise_var);
            Ok(ln_cn(obs.value(*step), z * (1.0 - rho), v))
        }
        _ => Err(Error::Domain(format!(
            "observation {y:?} does not match quantizer mode {spec:?}"
        ))),
    }
}

/// `p(y | z)`.
pub fn likelihood(y: &Observation, z: Complex64, noise_var: f64, spec: &QuantizerSpec) -> Result<f64> {
    log_likelihood(y, z, noise_var, spec).map(f64::exp)
}

fn ln_cn(y: Complex64, mean: Complex64, var: f64) -> f64 {
    if var == 0.0 {
        return if y == mean { f64::INFINITY } else { f64::NEG_INFINITY };
    }
    -(y - mean).norm_sqr() / var - (std::f64::consts::PI * var).ln()
}

/// Loading factor (in per-axis standard deviations) used by [`loading_step`].
pub const LOADING_FACTOR: f64 = 3.0;

/// Step size spreading `2^bits` cells over `+-3` per-axis standard deviations
/// of a complex input with power `input_power`.
pub fn loading_step(bits: u32, input_power: f64) -> Result<f64> {
    if !(input_power > 0.0) {
        return Err(domain("input power must be positive"));
    }
    let sigma_axis = (0.5 * input_power).sqrt();
    Ok(2.0 * LOADING_FACTOR * sigma_axis / (1u64 << bits) as f64)
}

/// Distortion factors per bit depth.
///
/// The defaults are the Bussgang distortion factors of MSE-optimal scalar
/// quantizers for a Gaussian input (Max 1960 for 1..=5 bits, the
/// high-resolution approximation `pi sqrt(3) / 2 * 2^(-2b)` beyond).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoTable {
    pub values: BTreeMap<u32, f64>,
}

impl Default for RhoTable {
    fn default() -> Self {
        let values = [
            (1, 0.3634),
            (2, 0.1175),
            (3, 0.03454),
            (4, 0.009497),
            (5, 0.002499),
            (6, 0.000_664_2),
        ]
        .into_iter()
        .collect();
        Self { values }
    }
}

impl RhoTable {
    pub fn with_override(mut self, bits: u32, rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(domain(format!("distortion factor {rho} outside [0, 1)")));
        }
        self.values.insert(bits, rho);
        Ok(self)
    }

    pub fn get(&self, bits: u32) -> Result<f64> {
        self.values
            .get(&bits)
            .copied()
            .ok_or_else(|| domain(format!("no distortion factor configured for {bits} bits")))
    }
}

/// Distortion factor from the default table.
pub fn default_rho(bits: u32) -> Result<f64> {
    RhoTable::default().get(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::seeded;

    fn code(k1: i32, k2: i32) -> Observation {
        Observation::Code(QuantCode { k1, k2 })
    }

    const U2: QuantizerSpec = QuantizerSpec::Uniform { bits: 2, step: 1.0 };

    #[test]
    fn quantize_examples() {
        let mut rng = seeded(0);
        let x = Complex64::new(0.3, 0.7);
        assert_eq!(quantize(x, &QuantizerSpec::None, &mut rng).unwrap(), Observation::Analog(x));
        assert_eq!(quantize(x, &U2, &mut rng).unwrap(), code(0, 1));
        assert_eq!(quantize(Complex64::new(100.0, -100.0), &U2, &mut rng).unwrap(), code(2, -1));
        assert!(quantize(Complex64::new(f64::NAN, 0.0), &U2, &mut rng).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(thresholds(0, 2, 1.0).unwrap(), (-0.5, 0.5));
        assert_eq!(thresholds(2, 2, 1.0).unwrap(), (1.5, f64::INFINITY));
        assert_eq!(thresholds(-1, 2, 1.0).unwrap(), (f64::NEG_INFINITY, -0.5));
        assert!(thresholds(3, 2, 1.0).is_err());
        assert!(thresholds(-2, 2, 1.0).is_err());
        for bits in 1..=5 {
            let (lo, hi) = code_range(bits);
            for k in lo..hi {
                assert_eq!(thresholds(k, bits, 0.3).unwrap().1, thresholds(k + 1, bits, 0.3).unwrap().0);
            }
        }
    }

    #[test]
    fn center_cell_probability() {
        let p = likelihood(&code(0, 0), Complex64::new(0.0, 0.0), 1.0, &U2).unwrap();
        // dblquad of the N(0, 1/2) x N(0, 1/2) density over the unit cell.
        assert!((p - 0.270_920_122_803_396_33).abs() < 1e-12);
    }

    #[test]
    fn wide_cell_is_certain() {
        let spec = QuantizerSpec::Uniform { bits: 3, step: 1e9 };
        let p = likelihood(&code(0, 0), Complex64::new(0.2, -0.1), 1.0, &spec).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pdq_without_distortion_is_gaussian() {
        let none = QuantizerSpec::None;
        let pdq = QuantizerSpec::Pdq {
            bits: 3,
            step: 0.5,
            rho: 0.0,
            input_power: 2.0,
        };
        let y = Complex64::new(0.4, -1.1);
        let z = Complex64::new(0.1, 0.3);
        let a = log_likelihood(&Observation::Analog(y), z, 0.7, &none).unwrap();
        let b = log_likelihood(&Observation::Analog(y), z, 0.7, &pdq).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn pdq_sample_mean() {
        let spec = QuantizerSpec::Pdq {
            bits: 2,
            step: 1.0,
            rho: 0.1175,
            input_power: 1.0,
        };
        let x = Complex64::new(0.8, -0.4);
        let mut rng = seeded(3);
        let n = 100_000;
        let mut acc = Complex64::new(0.0, 0.0);
        for _ in 0..n {
            acc += quantize(x, &spec, &mut rng).unwrap().value(1.0);
        }
        let mean = acc / n as f64;
        let se = (0.1175 * (1.0 - 0.1175) / 2.0 / n as f64).sqrt();
        assert!((mean.re - 0.8 * (1.0 - 0.1175)).abs() < 3.0 * se);
        assert!((mean.im + 0.4 * (1.0 - 0.1175)).abs() < 3.0 * se);
    }

    #[test]
    fn mismatched_observation_errors() {
        let y = Observation::Analog(Complex64::new(0.0, 0.0));
        assert!(likelihood(&y, Complex64::new(0.0, 0.0), 1.0, &U2).is_err());
        assert!(likelihood(&code(0, 0), Complex64::new(0.0, 0.0), 1.0, &QuantizerSpec::None).is_err());
    }

    #[test]
    fn rho_table() {
        let t = RhoTable::default();
        let v: Vec<f64> = (1..=6).map(|b| t.get(b).unwrap()).collect();
        assert!(v.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(default_rho(4).unwrap(), 0.009497);
        assert!(default_rho(7).is_err());
        let t = t.with_override(7, 0.0).unwrap();
        assert_eq!(t.get(7).unwrap(), 0.0);
    }

    #[test]
    fn loading_step_covers_three_sigma() {
        let s = loading_step(2, 2.0).unwrap();
        assert!((s * 4.0 - 6.0).abs() < 1e-15);
    }

    #[test]
    fn deep_tail_log_likelihood_is_finite() {
        let spec = QuantizerSpec::Uniform { bits: 4, step: 0.1 };
        let ll = log_likelihood(&code(8, 8), Complex64::new(-20.0, -20.0), 0.01, &spec).unwrap();
        assert!(ll.is_finite() && ll < -1e4);
    }
}
