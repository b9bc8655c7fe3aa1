//! Damped GAMP for one coherence block.
//!
//! Variables follow the precision-scaled convention used throughout the
//! crate: `nu_p` is a precision (`1 / (S nu_x)`), `p` is the precision-scaled
//! mean `s + nu_p . (B x)`, and `s` carries the opposite sign of the usual
//! GAMP dual variable. `nu_r` and `nu_x` are ordinary variances.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{dimension, domain, numerical, Result};
use crate::quantizer::{thresholds, Observation, QuantizerSpec};
use crate::special::truncated_std;

/// Gaussian prior `CN(mean, var)` on one coefficient; `var` may be `+inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarPrior {
    pub mean: Complex64,
    pub var: f64,
}

impl ScalarPrior {
    pub fn new(mean: Complex64, var: f64) -> Result<Self> {
        if !(var >= 0.0) {
            return Err(domain(format!("prior variance must be non-negative, got {var}")));
        }
        Ok(Self { mean, var })
    }

    pub fn uninformative() -> Self {
        Self {
            mean: Complex64::new(0.0, 0.0),
            var: f64::INFINITY,
        }
    }

    pub fn precision(&self) -> f64 {
        if self.var.is_infinite() {
            0.0
        } else {
            1.0 / self.var
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampingConfig {
    pub theta_s: f64,
    pub theta_x: f64,
    pub max_iters: usize,
    /// Early exit when `||x_new - x_old|| / ||x_new||` drops below this.
    pub tol: f64,
}

impl Default for DampingConfig {
    fn default() -> Self {
        Self {
            theta_s: 0.7,
            theta_x: 0.7,
            max_iters: 25,
            tol: 1e-8,
        }
    }
}

impl DampingConfig {
    pub fn undamped(max_iters: usize) -> Self {
        Self {
            theta_s: 1.0,
            theta_x: 1.0,
            max_iters,
            tol: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| t > 0.0 && t <= 1.0;
        if !ok(self.theta_s) || !ok(self.theta_x) {
            return Err(domain("damping factors must lie in (0, 1]"));
        }
        if self.max_iters == 0 {
            return Err(domain("need at least one GAMP iteration"));
        }
        Ok(())
    }
}

/// Measurement matrix with its elementwise squared magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub b: DMatrix<Complex64>,
    pub s: DMatrix<f64>,
}

impl Measurement {
    pub fn new(b: DMatrix<Complex64>) -> Self {
        let s = b.map(|v| v.norm_sqr());
        Self { b, s }
    }

    pub fn num_obs(&self) -> usize {
        self.b.nrows()
    }

    pub fn num_vars(&self) -> usize {
        self.b.ncols()
    }
}

/// Iterate of one GAMP instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GampState {
    pub x_hat: DVector<Complex64>,
    pub nu_x: DVector<f64>,
    pub s: DVector<Complex64>,
    pub nu_s: DVector<f64>,
    pub p: DVector<Complex64>,
    pub nu_p: DVector<f64>,
    pub r: DVector<Complex64>,
    pub nu_r: DVector<f64>,
    /// Scalar multiply-accumulates spent in matrix products so far.
    pub mults: u64,
}

impl GampState {
    /// Fresh state with `s = 0`.
    pub fn new(x_hat: DVector<Complex64>, nu_x: DVector<f64>, num_obs: usize) -> Self {
        let d = x_hat.len();
        Self {
            r: x_hat.clone(),
            nu_r: DVector::from_element(d, f64::INFINITY),
            x_hat,
            nu_x,
            s: DVector::zeros(num_obs),
            nu_s: DVector::zeros(num_obs),
            p: DVector::zeros(num_obs),
            nu_p: DVector::zeros(num_obs),
            mults: 0,
        }
    }

    /// Starts at the prior means and variances.
    pub fn from_priors(priors: &[ScalarPrior], num_obs: usize) -> Self {
        let x = DVector::from_iterator(priors.len(), priors.iter().map(|p| p.mean));
        let v = DVector::from_iterator(
            priors.len(),
            priors.iter().map(|p| if p.var.is_finite() { p.var } else { 1.0 }),
        );
        Self::new(x, v, num_obs)
    }
}

/// Posterior mean of `x ~ prior` observed as `r = x + CN(0, nu_r)`, and its
/// derivative with respect to `r`.
pub fn g_in(r: Complex64, nu_r: f64, prior: &ScalarPrior) -> Result<(Complex64, f64)> {
    if !(nu_r >= 0.0) {
        return Err(domain(format!("nu_r must be non-negative, got {nu_r}")));
    }
    let nu0 = prior.var;
    if nu0 == 0.0 && nu_r == 0.0 {
        return Err(numerical("g_in with both variances zero"));
    }
    if nu0.is_infinite() && nu_r.is_infinite() {
        return Err(numerical("g_in with both variances infinite"));
    }
    if nu0.is_infinite() {
        return Ok((r, 1.0));
    }
    if nu_r.is_infinite() {
        return Ok((prior.mean, 0.0));
    }
    let denom = nu0 + nu_r;
    Ok(((prior.mean * nu_r + r * nu0) / denom, nu0 / denom))
}

/// Posterior variance paired with [`g_in`], i.e. `nu_r * g_in'`.
pub fn g_in_var(nu_r: f64, prior: &ScalarPrior) -> f64 {
    harmonic(prior.var, nu_r)
}

/// `a b / (a + b)` with `+inf` treated as an absent term.
pub fn harmonic(a: f64, b: f64) -> f64 {
    match (a.is_infinite(), b.is_infinite()) {
        (true, true) => f64::INFINITY,
        (true, false) => b,
        (false, true) => a,
        _ if a + b == 0.0 => 0.0,
        _ => a * b / (a + b),
    }
}

/// Output function for one measurement and its derivative with respect to `p`.
///
/// `nu_p` is the precision of the pseudo-prior `z ~ CN(p / nu_p, 1 / nu_p)`.
/// For the uniform quantizer the returned derivative is the average of the
/// real-axis and imaginary-axis derivatives.
pub fn g_out(
    p: Complex64,
    nu_p: f64,
    y: &Observation,
    noise_var: f64,
    spec: &QuantizerSpec,
) -> Result<(Complex64, f64)> {
    if !(nu_p >= 0.0) || !nu_p.is_finite() {
        return Err(domain(format!("nu_p must be finite and non-negative, got {nu_p}")));
    }
    match (spec, y) {
        (QuantizerSpec::None, Observation::Analog(y)) => {
            let d = 1.0 + nu_p * noise_var;
            Ok(((p - y * nu_p) / d, 1.0 / d))
        }
        (QuantizerSpec::Pdq {
            step,
            rho,
            input_power,
            ..
        }, obs) => {
            let g = 1.0 - rho;
            let y = obs.value(*step);
            let d = g + nu_p * (g * noise_var + rho * input_power);
            if !(d > 0.0) {
                return Err(numerical("PDQ output function has a vanishing denominator"));
            }
            Ok(((p * g - y * nu_p) / d, g / d))
        }
        (QuantizerSpec::Uniform { bits, step }, Observation::Code(c)) => {
            if nu_p == 0.0 {
                return Ok((Complex64::new(0.0, 0.0), 0.0));
            }
            let total = noise_var + 1.0 / nu_p;
            let sd = (0.5 * total).sqrt();
            let (gr, dr) = uniform_axis(p.re / nu_p, sd, c.k1, *bits, *step, nu_p, noise_var)?;
            let (gi, di) = uniform_axis(p.im / nu_p, sd, c.k2, *bits, *step, nu_p, noise_var)?;
            Ok((Complex64::new(gr, gi), 0.5 * (dr + di)))
        }
        _ => Err(domain(format!(
            "observation {y:?} does not match quantizer mode {spec:?}"
        ))),
    }
}

fn uniform_axis(
    mean: f64,
    sd: f64,
    k: i32,
    bits: u32,
    step: f64,
    nu_p: f64,
    noise_var: f64,
) -> Result<(f64, f64)> {
    let (lo, hi) = thresholds(k, bits, step)?;
    let t = truncated_std((lo - mean) / sd, (hi - mean) / sd).map_err(|e| {
        numerical(format!(
            "uniform output function at code {k}: mean {mean}, sd {sd}, cell [{lo}, {hi}): {e}"
        ))
    })?;
    let value = -t.r1 / (2.0 * sd);
    let deriv = (1.0 - t.variance()) / (1.0 + nu_p * noise_var);
    Ok((value, deriv))
}

fn check_finite_c(v: &DVector<Complex64>, what: &str) -> Result<()> {
    if v.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(numerical(format!("non-finite entry in {what}")))
    }
}

/// One damped GAMP iteration. Returns the next state.
#[allow(clippy::too_many_arguments)]
pub fn gamp_block_update(
    meas: &Measurement,
    y: &[Observation],
    priors: &[ScalarPrior],
    spec: &QuantizerSpec,
    noise_var: f64,
    state: &GampState,
    damping: &DampingConfig,
) -> Result<GampState> {
    let (np, nd) = (meas.num_obs(), meas.num_vars());
    if y.len() != np || priors.len() != nd || state.x_hat.len() != nd || state.s.len() != np {
        return Err(dimension(format!(
            "GAMP block: B is {np}x{nd}, y has {}, priors {}, state x {} / s {}",
            y.len(),
            priors.len(),
            state.x_hat.len(),
            state.s.len()
        )));
    }
    let mut next = state.clone();

    let tau_p = &meas.s * &state.nu_x;
    let nu_p = tau_p.map(|t| 1.0 / t.max(1e-300));
    let bx = &meas.b * &state.x_hat;
    let p = DVector::from_fn(np, |j, _| state.s[j] + bx[j] * nu_p[j]);

    let mut s = DVector::zeros(np);
    let mut nu_s = DVector::zeros(np);
    for j in 0..np {
        let (g, dg) = g_out(p[j], nu_p[j], &y[j], noise_var, spec)?;
        nu_s[j] = nu_p[j] * dg;
        s[j] = state.s[j] * (1.0 - damping.theta_s) + g * damping.theta_s;
    }
    check_finite_c(&s, "s")?;

    let prec_r = meas.s.tr_mul(&nu_s);
    let bs = meas.b.ad_mul(&s);
    let mut r = DVector::zeros(nd);
    let mut nu_r = DVector::zeros(nd);
    for i in 0..nd {
        if prec_r[i] > 0.0 {
            nu_r[i] = 1.0 / prec_r[i];
            r[i] = state.x_hat[i] - bs[i] * nu_r[i];
        } else {
            nu_r[i] = f64::INFINITY;
            r[i] = state.x_hat[i];
        }
    }
    check_finite_c(&r, "r")?;

    for i in 0..nd {
        let (g, _) = g_in(r[i], nu_r[i], &priors[i])?;
        next.nu_x[i] = g_in_var(nu_r[i], &priors[i]);
        next.x_hat[i] = state.x_hat[i] * (1.0 - damping.theta_x) + g * damping.theta_x;
    }
    check_finite_c(&next.x_hat, "x_hat")?;
    if next.nu_x.iter().any(|v| !v.is_finite()) {
        return Err(numerical("non-finite posterior variance"));
    }

    next.p = p;
    next.nu_p = nu_p;
    next.s = s;
    next.nu_s = nu_s;
    next.r = r;
    next.nu_r = nu_r;
    next.mults += 4 * (np * nd) as u64;
    Ok(next)
}

/// Runs [`gamp_block_update`] until `damping.max_iters` or the early-exit tolerance.
pub fn gamp_solve(
    meas: &Measurement,
    y: &[Observation],
    priors: &[ScalarPrior],
    spec: &QuantizerSpec,
    noise_var: f64,
    init: GampState,
    damping: &DampingConfig,
) -> Result<GampState> {
    damping.validate()?;
    let mut state = init;
    for it in 0..damping.max_iters {
        let next = gamp_block_update(meas, y, priors, spec, noise_var, &state, damping)
            .map_err(|e| numerical(format!("GAMP iteration {it}: {e}")))?;
        let change = (&next.x_hat - &state.x_hat).norm();
        let scale = next.x_hat.norm();
        state = next;
        if change <= damping.tol * scale {
            break;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::QuantCode;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn g_in_examples() {
        let (v, d) = g_in(c(0.3, -1.0), 0.5, &ScalarPrior::uninformative()).unwrap();
        assert_eq!((v, d), (c(0.3, -1.0), 1.0));
        let point = ScalarPrior::new(c(2.0, 1.0), 0.0).unwrap();
        assert_eq!(g_in(c(0.3, 0.0), 0.5, &point).unwrap(), (c(2.0, 1.0), 0.0));
        let pr = ScalarPrior::new(c(1.0, 0.0), 2.0).unwrap();
        let (v, d) = g_in(c(3.0, 0.0), 1.0, &pr).unwrap();
        assert!((v - c(7.0 / 3.0, 0.0)).norm() < 1e-15);
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
        assert!(g_in(c(0.0, 0.0), 0.0, &point).is_err());
    }

    #[test]
    fn g_out_none_without_information() {
        let (v, d) = g_out(c(0.4, 0.2), 0.0, &Observation::Analog(c(5.0, 5.0)), 1.0, &QuantizerSpec::None).unwrap();
        assert_eq!((v, d), (c(0.4, 0.2), 1.0));
    }

    #[test]
    fn pdq_without_distortion_matches_none() {
        let pdq = QuantizerSpec::Pdq {
            bits: 3,
            step: 0.25,
            rho: 0.0,
            input_power: 1.7,
        };
        let y = Observation::Analog(c(0.9, -0.3));
        let a = g_out(c(0.2, 0.1), 3.0, &y, 0.4, &QuantizerSpec::None).unwrap();
        let b = g_out(c(0.2, 0.1), 3.0, &y, 0.4, &pdq).unwrap();
        assert!((a.0 - b.0).norm() < 1e-15 && (a.1 - b.1).abs() < 1e-15);
    }

    #[test]
    fn uniform_wide_cell_carries_no_information() {
        let spec = QuantizerSpec::Uniform { bits: 1, step: 1.0 };
        // With one bit each axis only reveals its sign; far from zero the cell
        // is effectively the whole half-line.
        let y = Observation::Code(QuantCode { k1: 1, k2: 1 });
        let (v, d) = g_out(c(40.0, 40.0), 4.0, &y, 0.1, &spec).unwrap();
        assert!(v.norm() < 1e-12 && d.abs() < 1e-12);
    }

    #[test]
    fn lmmse_fixed_point_on_small_instance() {
        // Two measurements of two coefficients, Gaussian everything.
        let b = DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.5, 0.2), c(-0.3, 0.1), c(0.8, -0.4)]);
        let meas = Measurement::new(b.clone());
        let y = [Observation::Analog(c(0.7, 0.1)), Observation::Analog(c(-0.2, 0.4))];
        let priors = [
            ScalarPrior::new(c(0.0, 0.0), 1.0).unwrap(),
            ScalarPrior::new(c(0.1, 0.0), 2.0).unwrap(),
        ];
        let noise = 0.3;
        let out = gamp_solve(
            &meas,
            &y,
            &priors,
            &QuantizerSpec::None,
            noise,
            GampState::from_priors(&priors, 2),
            &DampingConfig::undamped(200),
        )
        .unwrap();

        let lam = DMatrix::from_diagonal(&DVector::from_vec(vec![c(1.0, 0.0), c(2.0, 0.0)]));
        let mu = DVector::from_vec(vec![c(0.0, 0.0), c(0.1, 0.0)]);
        let yv = DVector::from_vec(vec![c(0.7, 0.1), c(-0.2, 0.4)]);
        let cov_y = &b * &lam * b.adjoint() + DMatrix::identity(2, 2) * c(noise, 0.0);
        let gain = &lam * b.adjoint() * cov_y.try_inverse().unwrap();
        let exact = &mu + gain * (yv - &b * &mu);
        assert!((out.x_hat - exact).norm() < 1e-8);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let meas = Measurement::new(DMatrix::identity(2, 3));
        let priors = [ScalarPrior::uninformative(); 3];
        let st = GampState::from_priors(&priors, 2);
        let y = [Observation::Analog(c(0.0, 0.0))];
        assert!(gamp_block_update(&meas, &y, &priors, &QuantizerSpec::None, 1.0, &st, &DampingConfig::default()).is_err());
    }
}
