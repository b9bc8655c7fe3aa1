//! Online tracking of the virtual channel restricted to its support.
//!
//! Each block runs one forward prediction through the learned AR(1) model
//! followed by a damped GAMP solve against the reduced training matrix. No
//! smoothing is done: the estimate of block `m` depends on observations up to
//! `m` only.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::channel::ModelParams;
use crate::em::{forward_pass, initial_forward, GaussianMessage};
use crate::error::{dimension, domain, numerical, Result};
use crate::gamp::{gamp_block_update, DampingConfig, GampState, Measurement, ScalarPrior};
use crate::quantizer::{quantize, Observation, QuantizerSpec};
use crate::random::complex_gaussian;

/// Pilot rows for the `|O|` beams, `|O| x P_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedTraining {
    pub d: DMatrix<Complex64>,
    pub pilot_power: f64,
}

impl ReducedTraining {
    /// `|| D D^H - (pilot_power / P_T) I ||_F`.
    pub fn gram_residual(&self) -> f64 {
        let pt = self.d.ncols() as f64;
        let mut g = &self.d * self.d.adjoint();
        for i in 0..g.nrows() {
            g[(i, i)] -= Complex64::new(self.pilot_power / pt, 0.0);
        }
        g.norm()
    }

    /// Measurement matrix `D^H` (P_T x |O|).
    pub fn measurement(&self) -> Measurement {
        Measurement::new(self.d.adjoint())
    }
}

/// First `support_len` rows of a randomly phase-rotated `P_T`-point DFT,
/// scaled so that `T T^H = (pilot_power / P_T) I`.
pub fn build_reduced_training<R: Rng + ?Sized>(
    support_len: usize,
    p_t: usize,
    pilot_power: f64,
    rng: &mut R,
) -> Result<ReducedTraining> {
    if support_len == 0 || support_len > p_t {
        return Err(domain(format!("need 1 <= |O| <= P_T, got |O| = {support_len}, P_T = {p_t}")));
    }
    if !(pilot_power > 0.0) {
        return Err(domain("pilot power must be positive"));
    }
    let row_phase: Vec<f64> = (0..p_t).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let col_phase: Vec<f64> = (0..p_t).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let scale = (pilot_power / p_t as f64).sqrt() / (p_t as f64).sqrt();
    let d = DMatrix::from_fn(support_len, p_t, |i, j| {
        let angle = -2.0 * PI * ((i * j) % p_t) as f64 / p_t as f64 + row_phase[i] + col_phase[j];
        Complex64::from_polar(scale, angle)
    });
    Ok(ReducedTraining { d, pilot_power })
}

/// `Q(D^H w + n)` with `n ~ CN(0, noise_var I)`. PDQ specs are simulated
/// with their underlying uniform converter.
pub fn simulate_tracking_observation<R: Rng + ?Sized>(
    w: &DVector<Complex64>,
    training: &ReducedTraining,
    noise_var: f64,
    spec: &QuantizerSpec,
    rng: &mut R,
) -> Result<Vec<Observation>> {
    if w.len() != training.d.nrows() {
        return Err(dimension(format!(
            "reduced channel has {} entries, training has {} rows",
            w.len(),
            training.d.nrows()
        )));
    }
    let adc = spec.adc();
    let q = training.d.ad_mul(w);
    q.iter()
        .map(|&v| quantize(v + complex_gaussian(rng, noise_var), &adc, rng))
        .collect()
}

/// Learned model restricted to `support`.
pub fn restrict_params(params: &ModelParams, support: &[usize]) -> Result<ModelParams> {
    let lambda = support
        .iter()
        .map(|&i| {
            params
                .lambda
                .get(i)
                .copied()
                .ok_or_else(|| dimension(format!("support index {i} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::new(params.alpha, lambda)
}

/// Tracker state carried between blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    /// Forward messages into the most recent block.
    pub fwd: Vec<GaussianMessage>,
    /// Measurement messages of the most recent block.
    pub meas: Vec<GaussianMessage>,
    /// Number of blocks processed.
    pub block: usize,
    /// Multiply-accumulates spent in GAMP so far.
    pub mults: u64,
}

impl TrackState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            fwd: initial_forward(params),
            meas: vec![GaussianMessage::uninformative(); params.len()],
            block: 0,
            mults: 0,
        }
    }

    /// Forward messages for the next block.
    pub fn predict(&self, params: &ModelParams) -> Result<Vec<GaussianMessage>> {
        if self.block == 0 {
            Ok(initial_forward(params))
        } else {
            forward_pass(&self.fwd, &self.meas, params)
        }
    }
}

/// Estimate of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    pub w_hat: DVector<Complex64>,
    /// Diagonal posterior variances.
    pub sigma: DVector<f64>,
    /// Forward (predictive) messages used as the GAMP prior.
    pub predicted: Vec<GaussianMessage>,
}

/// Advances the tracker by one block.
#[allow(clippy::too_many_arguments)]
pub fn track_step(
    y: &[Observation],
    meas: &Measurement,
    params: &ModelParams,
    state: &TrackState,
    spec: &QuantizerSpec,
    noise_var: f64,
    damping: &DampingConfig,
) -> Result<(TrackOutput, TrackState)> {
    damping.validate()?;
    let n = params.len();
    if meas.num_vars() != n || y.len() != meas.num_obs() || state.fwd.len() != n {
        return Err(dimension("tracker inputs do not match the support size"));
    }
    let fwd = state.predict(params)?;
    let priors: Vec<ScalarPrior> = fwd.iter().map(|f| ScalarPrior { mean: f.mean, var: f.var }).collect();
    let x0 = DVector::from_iterator(n, fwd.iter().map(|f| f.mean));
    let v0 = DVector::from_iterator(n, fwd.iter().map(|f| f.var.max(1e-300)));
    let mut g = GampState::new(x0, v0, meas.num_obs());
    for it in 0..damping.max_iters {
        let next = gamp_block_update(meas, y, &priors, spec, noise_var, &g, damping)
            .map_err(|e| numerical(format!("tracking block {}, iteration {it}: {e}", state.block)))?;
        let change = (&next.x_hat - &g.x_hat).norm();
        let scale = next.x_hat.norm();
        g = next;
        if change <= damping.tol * scale {
            break;
        }
    }
    let meas_msgs = (0..n).map(|i| GaussianMessage::new(g.r[i], g.nu_r[i])).collect();
    let out = TrackOutput {
        w_hat: g.x_hat.clone(),
        sigma: g.nu_x.clone(),
        predicted: fwd.clone(),
    };
    let next = TrackState {
        fwd,
        meas: meas_msgs,
        block: state.block + 1,
        mults: state.mults + g.mults,
    };
    Ok((out, next))
}

/// Default damping for tracking: 15 GAMP iterations per block.
pub fn tracking_damping() -> DampingConfig {
    DampingConfig {
        max_iters: 15,
        ..DampingConfig::default()
    }
}

/// Ratio of the observed innovation energy `||y - E[y]||^2` to its expected
/// value under the predictive distribution of the learned model.
pub fn normalized_innovation(
    y: &[Observation],
    meas: &Measurement,
    predicted: &[GaussianMessage],
    spec: &QuantizerSpec,
    noise_var: f64,
) -> Result<f64> {
    if y.len() != meas.num_obs() || predicted.len() != meas.num_vars() {
        return Err(dimension("innovation inputs do not match"));
    }
    let (gain, step, extra) = match *spec {
        QuantizerSpec::None => (1.0, 1.0, 0.0),
        QuantizerSpec::Uniform { step, .. } => (1.0, step, step * step / 6.0),
        QuantizerSpec::Pdq { step, rho, .. } => (1.0 - rho, step, 0.0),
    };
    let mu = DVector::from_iterator(predicted.len(), predicted.iter().map(|m| m.mean));
    let var = DVector::from_iterator(predicted.len(), predicted.iter().map(|m| m.var));
    let pred = &meas.b * mu * Complex64::new(gain, 0.0);
    let spread = &meas.s * var;
    let noise = spec.effective_noise(noise_var) + extra;
    let mut observed = 0.0;
    let mut expected = 0.0;
    for j in 0..y.len() {
        observed += (y[j].value(step) - pred[j]).norm_sqr();
        expected += gain * gain * spread[j] + noise;
    }
    if !(expected > 0.0) || !expected.is_finite() {
        return Err(numerical(format!("expected innovation energy {expected}")));
    }
    Ok(observed / expected)
}

/// Default detector window. A support change is absorbed by the tracker within
/// one or two blocks, so the innovation spike is short-lived.
pub const DETECTOR_WINDOW: usize = 1;

/// Default detector threshold. With `|O| = 4` the on-model statistic is
/// `chi^2_8 / 8`, whose tail above 4 is about `1e-4`.
pub const DETECTOR_THRESHOLD: f64 = 4.0;

/// Fires when the normalized innovation exceeds `threshold` for `window`
/// consecutive blocks, then starts counting afresh.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchDetector {
    pub window: usize,
    pub threshold: f64,
    run: usize,
    pub history: Vec<f64>,
}

impl MismatchDetector {
    pub fn new(window: usize, threshold: f64) -> Result<Self> {
        if window == 0 {
            return Err(domain("detector window must be at least one block"));
        }
        if !(threshold > 1.0) {
            return Err(domain(format!("detector threshold must exceed 1, got {threshold}")));
        }
        Ok(Self {
            window,
            threshold,
            run: 0,
            history: Vec::new(),
        })
    }

    /// Feeds one block's statistic; returns whether the detector fires.
    pub fn update(&mut self, stat: f64) -> bool {
        self.history.push(stat);
        if stat > self.threshold {
            self.run += 1;
        } else {
            self.run = 0;
        }
        if self.run >= self.window {
            self.run = 0;
            true
        } else {
            false
        }
    }

    /// Computes the statistic for `y` and feeds it.
    pub fn observe(
        &mut self,
        y: &[Observation],
        meas: &Measurement,
        predicted: &[GaussianMessage],
        spec: &QuantizerSpec,
        noise_var: f64,
    ) -> Result<bool> {
        let stat = normalized_innovation(y, meas, predicted, spec, noise_var)?;
        Ok(self.update(stat))
    }
}
