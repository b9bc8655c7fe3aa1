//! EM learning of the AR(1) coefficient and per-coefficient variances.
//!
//! The E-step runs Gaussian message passing along the block chain of every
//! virtual coefficient (forward and backward sweeps) interleaved with one
//! GAMP iteration per block. The M-step alternates the closed-form variance
//! update with the cubic stationarity condition for `alpha`.

use std::time::Instant;

use nalgebra::DVector;
use num_complex::Complex64;

use crate::channel::{ModelParams, ALPHA_MAX};
use crate::error::{dimension, domain, numerical, Result};
use crate::gamp::{gamp_block_update, harmonic, DampingConfig, GampState, Measurement, ScalarPrior};
use crate::quantizer::{Observation, QuantizerSpec};

/// Gaussian belief `CN(mean, var)`; `var = +inf` is the flat message.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMessage {
    pub mean: Complex64,
    pub var: f64,
}

impl GaussianMessage {
    pub fn new(mean: Complex64, var: f64) -> Self {
        Self { mean, var }
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

    pub fn is_flat(&self) -> bool {
        self.var.is_infinite()
    }
}

/// Normalized product of two Gaussian messages.
pub fn combine(a: &GaussianMessage, b: &GaussianMessage) -> Result<GaussianMessage> {
    if !(a.var >= 0.0) || !(b.var >= 0.0) {
        return Err(domain("message variances must be non-negative"));
    }
    if a.var == 0.0 && b.var == 0.0 {
        return Err(numerical("product of two point-mass messages"));
    }
    if a.is_flat() {
        return Ok(*b);
    }
    if b.is_flat() {
        return Ok(*a);
    }
    if a.var == 0.0 {
        return Ok(*a);
    }
    if b.var == 0.0 {
        return Ok(*b);
    }
    let var = harmonic(a.var, b.var);
    let mean = (a.mean / a.var + b.mean / b.var) * var;
    Ok(GaussianMessage { mean, var })
}

/// Product of the forward and backward messages of one coefficient, used as
/// the GAMP prior.
pub fn combine_time_prior(fwd: &GaussianMessage, bwd: &GaussianMessage) -> Result<ScalarPrior> {
    let c = combine(fwd, bwd)?;
    Ok(ScalarPrior {
        mean: c.mean,
        var: c.var,
    })
}

/// Forward messages into the first block: the stationary prior.
pub fn initial_forward(params: &ModelParams) -> Vec<GaussianMessage> {
    params
        .lambda
        .iter()
        .map(|&l| GaussianMessage::new(Complex64::new(0.0, 0.0), l))
        .collect()
}

/// Forward messages into block `m` from block `m - 1`'s forward and
/// measurement messages.
pub fn forward_pass(
    prev_fwd: &[GaussianMessage],
    prev_meas: &[GaussianMessage],
    params: &ModelParams,
) -> Result<Vec<GaussianMessage>> {
    check_lens(prev_fwd.len(), prev_meas.len(), params.len())?;
    let a = params.alpha;
    prev_fwd
        .iter()
        .zip(prev_meas)
        .zip(&params.lambda)
        .map(|((f, q), &l)| {
            let c = combine(f, q)?;
            let var = a * a * c.var + (1.0 - a * a) * l;
            if var.is_nan() || var < 0.0 {
                return Err(numerical(format!("forward variance {var}")));
            }
            Ok(GaussianMessage::new(c.mean * a, var))
        })
        .collect()
}

/// Backward messages into block `m` from block `m + 1`'s backward and
/// measurement messages. Undefined for `alpha = 0`.
pub fn backward_pass(
    next_bwd: &[GaussianMessage],
    next_meas: &[GaussianMessage],
    params: &ModelParams,
) -> Result<Vec<GaussianMessage>> {
    check_lens(next_bwd.len(), next_meas.len(), params.len())?;
    let a = params.alpha;
    if a == 0.0 {
        return Err(domain("backward message is undefined for alpha = 0"));
    }
    next_bwd
        .iter()
        .zip(next_meas)
        .zip(&params.lambda)
        .map(|((b, q), &l)| {
            let c = combine(b, q)?;
            if c.is_flat() {
                return Ok(GaussianMessage::uninformative());
            }
            let var = (c.var + (1.0 - a * a) * l) / (a * a);
            Ok(GaussianMessage::new(c.mean / a, var))
        })
        .collect()
}

fn check_lens(a: usize, b: usize, n: usize) -> Result<()> {
    if a != n || b != n {
        return Err(dimension(format!("messages of length {a} and {b}, model of length {n}")));
    }
    Ok(())
}

/// Observations and measurement matrix of one training block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockData {
    pub meas: Measurement,
    pub y: Vec<Observation>,
}

/// Posterior summaries of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    /// Posterior means, one vector per block.
    pub h_hat: Vec<DVector<Complex64>>,
    /// Posterior variances, one vector per block.
    pub tau: Vec<DVector<f64>>,
    /// Diagonal of `Pi_{m-1,m}` for `m = 1..M-1` (0-based index of the later block).
    pub pi: Vec<DVector<Complex64>>,
}

impl PosteriorStats {
    pub fn num_blocks(&self) -> usize {
        self.h_hat.len()
    }

    /// Diagonal of the second moment `Theta_m = Diag(tau) + h h^H`.
    pub fn theta_diag(&self, m: usize) -> DVector<f64> {
        DVector::from_fn(self.tau[m].len(), |i, _| self.tau[m][i] + self.h_hat[m][i].norm_sqr())
    }

    /// Builds the statistics from means and variances, filling `pi` with [`compute_pi`].
    pub fn assemble(h_hat: Vec<DVector<Complex64>>, tau: Vec<DVector<f64>>, alpha: f64) -> Self {
        let pi = (1..h_hat.len())
            .map(|m| compute_pi(&h_hat[m - 1], &h_hat[m], &tau[m - 1], alpha))
            .collect();
        Self { h_hat, tau, pi }
    }
}

/// Diagonal of `h_{m-1} h_m^H + alpha (Theta_{m-1} - h_{m-1} h_{m-1}^H)`.
pub fn compute_pi(
    h_prev: &DVector<Complex64>,
    h_cur: &DVector<Complex64>,
    tau_prev: &DVector<f64>,
    alpha: f64,
) -> DVector<Complex64> {
    DVector::from_fn(h_prev.len(), |i, _| h_prev[i] * h_cur[i].conj() + alpha * tau_prev[i])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub max_em_iters: usize,
    /// Damping, and the number of message-passing rounds per E-step in `max_iters`.
    pub damping: DampingConfig,
    pub fixed_point_iters: usize,
    pub tol_param: f64,
    pub lambda_floor: f64,
    pub alpha_max: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_em_iters: 10,
            damping: DampingConfig::default(),
            fixed_point_iters: 20,
            tol_param: 1e-4,
            lambda_floor: 1e-12,
            alpha_max: ALPHA_MAX,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        self.damping.validate()?;
        if self.max_em_iters == 0 || self.fixed_point_iters == 0 {
            return Err(domain("iteration counts must be positive"));
        }
        if !(self.alpha_max > 0.0 && self.alpha_max < 1.0) {
            return Err(domain("alpha_max must lie in (0, 1)"));
        }
        if !(self.lambda_floor >= 0.0) {
            return Err(domain("lambda floor must be non-negative"));
        }
        Ok(())
    }
}

/// Everything the E-step carries from one EM iteration to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepState {
    pub gamp: Vec<GampState>,
    pub meas: Vec<Vec<GaussianMessage>>,
}

impl EStepState {
    /// Iteration-zero state: `x = 0`, `s = 0`, `nu_x = lambda`, flat measurement messages.
    pub fn cold(blocks: &[BlockData], params: &ModelParams) -> Self {
        let n = params.len();
        let gamp = blocks
            .iter()
            .map(|b| {
                let nu = DVector::from_iterator(n, params.lambda.iter().map(|&l| l.max(1e-12)));
                GampState::new(DVector::zeros(n), nu, b.meas.num_obs())
            })
            .collect();
        let meas = vec![vec![GaussianMessage::uninformative(); n]; blocks.len()];
        Self { gamp, meas }
    }
}

/// Approximate posterior of every block under `params`.
pub fn e_step(
    blocks: &[BlockData],
    params: &ModelParams,
    spec: &QuantizerSpec,
    noise_var: f64,
    damping: &DampingConfig,
    warm: Option<EStepState>,
) -> Result<(PosteriorStats, EStepState)> {
    damping.validate()?;
    params.validate()?;
    let n = params.len();
    let m_blocks = blocks.len();
    if m_blocks == 0 {
        return Err(domain("E-step needs at least one block"));
    }
    for b in blocks {
        if b.meas.num_vars() != n || b.y.len() != b.meas.num_obs() {
            return Err(dimension("block data does not match the model dimension"));
        }
    }
    let mut st = warm.unwrap_or_else(|| EStepState::cold(blocks, params));
    if st.gamp.len() != m_blocks || st.meas.len() != m_blocks {
        return Err(dimension("warm-start state has the wrong number of blocks"));
    }
    let flat = vec![GaussianMessage::uninformative(); n];
    let mut bwd = vec![flat.clone(); m_blocks];

    for round in 0..damping.max_iters {
        let mut fwd = Vec::with_capacity(m_blocks);
        fwd.push(initial_forward(params));
        for m in 1..m_blocks {
            let next = forward_pass(&fwd[m - 1], &st.meas[m - 1], params)?;
            fwd.push(next);
        }

        let mut change = 0.0;
        let mut scale = 0.0;
        for m in 0..m_blocks {
            let priors = fwd[m]
                .iter()
                .zip(&bwd[m])
                .map(|(f, b)| combine_time_prior(f, b))
                .collect::<Result<Vec<_>>>()?;
            let next = gamp_block_update(
                &blocks[m].meas,
                &blocks[m].y,
                &priors,
                spec,
                noise_var,
                &st.gamp[m],
                damping,
            )
            .map_err(|e| numerical(format!("E-step round {round}, block {m}: {e}")))?;
            change += (&next.x_hat - &st.gamp[m].x_hat).norm_squared();
            scale += next.x_hat.norm_squared();
            for i in 0..n {
                st.meas[m][i] = GaussianMessage::new(next.r[i], next.nu_r[i]);
            }
            st.gamp[m] = next;
        }

        bwd[m_blocks - 1] = flat.clone();
        for m in (0..m_blocks - 1).rev() {
            bwd[m] = if params.alpha == 0.0 {
                flat.clone()
            } else {
                backward_pass(&bwd[m + 1], &st.meas[m + 1], params)?
            };
        }

        if change.sqrt() <= damping.tol * scale.sqrt() {
            break;
        }
    }

    let h_hat = st.gamp.iter().map(|g| g.x_hat.clone()).collect();
    let tau = st.gamp.iter().map(|g| g.nu_x.clone()).collect();
    Ok((PosteriorStats::assemble(h_hat, tau, params.alpha), st))
}

/// Per-coefficient sufficient statistics used by both M-step updates.
struct Sums {
    theta_first: DVector<f64>,
    /// `sum_{m>=2} Theta_m`
    theta_late: DVector<f64>,
    /// `sum_{m>=2} Theta_{m-1}`
    theta_early: DVector<f64>,
    /// `sum_{m>=2} Re Pi_{m-1,m}`
    re_pi: DVector<f64>,
}

fn sums(stats: &PosteriorStats) -> Result<Sums> {
    let m_blocks = stats.num_blocks();
    if m_blocks == 0 {
        return Err(domain("M-step needs at least one block"));
    }
    if stats.pi.len() + 1 != m_blocks || stats.tau.len() != m_blocks {
        return Err(dimension("posterior statistics are inconsistent"));
    }
    let n = stats.h_hat[0].len();
    let thetas: Vec<DVector<f64>> = (0..m_blocks).map(|m| stats.theta_diag(m)).collect();
    let mut s = Sums {
        theta_first: thetas[0].clone(),
        theta_late: DVector::zeros(n),
        theta_early: DVector::zeros(n),
        re_pi: DVector::zeros(n),
    };
    for m in 1..m_blocks {
        s.theta_late += &thetas[m];
        s.theta_early += &thetas[m - 1];
        s.re_pi += stats.pi[m - 1].map(|v| v.re);
    }
    Ok(s)
}

/// Closed-form variance update for fixed `alpha`, floored at `floor`.
pub fn m_step_lambda(stats: &PosteriorStats, alpha: f64, floor: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(domain(format!("alpha {alpha} outside [0, 1)")));
    }
    let s = sums(stats)?;
    let m = stats.num_blocks() as f64;
    let one_m_a2 = 1.0 - alpha * alpha;
    Ok((0..s.theta_first.len())
        .map(|i| {
            let chain = (s.theta_late[i] - 2.0 * alpha * s.re_pi[i] + alpha * alpha * s.theta_early[i]) / one_m_a2;
            ((s.theta_first[i] + chain) / m).max(floor)
        })
        .collect())
}

/// Coefficients `(K, A, T)` of the alpha stationarity cubic
/// `K a^3 - A a^2 + (T - K) a - A = 0`, where `K = (M - 1) N_eff`,
/// `A = sum Re tr(Lambda^-1 Pi)` and `T = sum tr(Lambda^-1 (Theta_m + Theta_{m-1}))`.
/// Coefficients with `lambda <= floor` are excluded.
pub fn alpha_cubic(stats: &PosteriorStats, lambda: &[f64], floor: f64) -> Result<(f64, f64, f64)> {
    let s = sums(stats)?;
    if lambda.len() != s.theta_first.len() {
        return Err(dimension("lambda length does not match the statistics"));
    }
    let mut n_eff = 0usize;
    let (mut a, mut t) = (0.0, 0.0);
    for (i, &l) in lambda.iter().enumerate() {
        if l <= floor {
            continue;
        }
        n_eff += 1;
        a += s.re_pi[i] / l;
        t += (s.theta_late[i] + s.theta_early[i]) / l;
    }
    let k = ((stats.num_blocks() - 1) * n_eff) as f64;
    Ok((k, a, t))
}

/// Value of the cubic at `alpha`.
pub fn cubic_value(coeffs: (f64, f64, f64), alpha: f64) -> f64 {
    let (k, a, t) = coeffs;
    ((k * alpha - a) * alpha + (t - k)) * alpha - a
}

/// `|cubic(alpha)|` divided by the largest coefficient magnitude.
pub fn cubic_residual(coeffs: (f64, f64, f64), alpha: f64) -> f64 {
    let (k, a, t) = coeffs;
    let scale = k.abs().max(a.abs()).max((t - k).abs()).max(f64::MIN_POSITIVE);
    cubic_value(coeffs, alpha).abs() / scale
}

/// The alpha-dependent part of the expected complete-data log-likelihood.
pub fn q_alpha(coeffs: (f64, f64, f64), lambda_sums: (f64, f64), alpha: f64) -> f64 {
    let (k, a, _) = coeffs;
    let (late, early) = lambda_sums;
    let one_m_a2 = 1.0 - alpha * alpha;
    -k * one_m_a2.ln() - (late - 2.0 * alpha * a + alpha * alpha * early) / one_m_a2
}

/// Real roots of the cubic inside `[lo, hi]`.
fn cubic_roots_in(coeffs: (f64, f64, f64), lo: f64, hi: f64) -> Vec<f64> {
    let (k, a, t) = coeffs;
    let f = |x: f64| cubic_value(coeffs, x);
    let df = |x: f64| (3.0 * k * x - 2.0 * a) * x + (t - k);
    // Split [lo, hi] at the critical points so each piece is monotone.
    let mut knots = vec![lo, hi];
    if k != 0.0 {
        let disc = 4.0 * a * a - 12.0 * k * (t - k);
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for c in [(2.0 * a - sq) / (6.0 * k), (2.0 * a + sq) / (6.0 * k)] {
                if c > lo && c < hi {
                    knots.push(c);
                }
            }
        }
    } else if a != 0.0 {
        let c = (t - k) / (2.0 * a);
        if c > lo && c < hi {
            knots.push(c);
        }
    }
    knots.sort_by(|x, y| x.total_cmp(y));
    let mut roots = Vec::new();
    for w in knots.windows(2) {
        let (mut x0, mut x1) = (w[0], w[1]);
        let (f0, f1) = (f(x0), f(x1));
        if f0 == 0.0 {
            roots.push(x0);
            continue;
        }
        if f0.signum() == f1.signum() {
            continue;
        }
        for _ in 0..200 {
            let mid = 0.5 * (x0 + x1);
            if f(mid).signum() == f0.signum() {
                x0 = mid;
            } else {
                x1 = mid;
            }
            if x1 - x0 < 1e-15 {
                break;
            }
        }
        let mut x = 0.5 * (x0 + x1);
        for _ in 0..3 {
            let d = df(x);
            if d == 0.0 {
                break;
            }
            let step = f(x) / d;
            let cand = x - step;
            if cand >= w[0] && cand <= w[1] && f(cand).abs() <= f(x).abs() {
                x = cand;
            } else {
                break;
            }
        }
        roots.push(x);
    }
    if f(hi) == 0.0 {
        roots.push(hi);
    }
    roots.dedup();
    roots
}

/// Maximizes the alpha-dependent objective over `[0, alpha_max]` for fixed
/// `lambda`: the candidates are the roots of the stationarity cubic in that
/// range plus the two end points.
pub fn m_step_alpha(stats: &PosteriorStats, lambda: &[f64], floor: f64, alpha_max: f64) -> Result<f64> {
    let coeffs = alpha_cubic(stats, lambda, floor)?;
    let (k, a, t) = coeffs;
    if !(k.is_finite() && a.is_finite() && t.is_finite()) {
        return Err(numerical(format!(
            "alpha cubic has non-finite coefficients K={k}, A={a}, T={t}"
        )));
    }
    if k == 0.0 {
        // Nothing to learn from (single block or empty support).
        return Ok(alpha_max);
    }
    let s = sums(stats)?;
    let (mut late, mut early) = (0.0, 0.0);
    for (i, &l) in lambda.iter().enumerate() {
        if l > floor {
            late += s.theta_late[i] / l;
            early += s.theta_early[i] / l;
        }
    }
    let mut candidates = cubic_roots_in(coeffs, 0.0, alpha_max);
    candidates.push(0.0);
    candidates.push(alpha_max);
    let best = candidates
        .into_iter()
        .map(|x| (x, q_alpha(coeffs, (late, early), x)))
        .filter(|(_, q)| q.is_finite())
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .ok_or_else(|| {
            numerical(format!(
                "no admissible alpha for cubic K={k}, A={a}, T={t}"
            ))
        })?;
    Ok(best.0)
}

/// Fixed-point alternation of the two M-step updates starting from `alpha0`.
pub fn m_step(stats: &PosteriorStats, alpha0: f64, config: &EmConfig) -> Result<ModelParams> {
    let mut alpha = alpha0.clamp(0.0, config.alpha_max);
    for _ in 0..config.fixed_point_iters {
        let lambda = m_step_lambda(stats, alpha, config.lambda_floor)?;
        let next = m_step_alpha(stats, &lambda, config.lambda_floor, config.alpha_max)?;
        let done = (next - alpha).abs() <= 1e-10 * alpha.abs().max(1e-300);
        alpha = next;
        if done {
            break;
        }
    }
    let lambda = m_step_lambda(stats, alpha, config.lambda_floor)?;
    ModelParams::new(alpha, lambda)
}

/// Expected complete-data log-likelihood (up to constants), with the
/// variance hyperprior dropped. Coefficients with `lambda <= floor` are skipped.
pub fn q_function(stats: &PosteriorStats, params: &ModelParams, floor: f64) -> Result<f64> {
    let s = sums(stats)?;
    let m = stats.num_blocks() as f64;
    let a = params.alpha;
    let one_m_a2 = 1.0 - a * a;
    let mut q = 0.0;
    for (i, &l) in params.lambda.iter().enumerate() {
        if l <= floor {
            continue;
        }
        q -= m * l.ln() + s.theta_first[i] / l;
        if m > 1.0 {
            q -= (m - 1.0) * one_m_a2.ln();
            q -= (s.theta_late[i] - 2.0 * a * s.re_pi[i] + a * a * s.theta_early[i]) / (one_m_a2 * l);
        }
    }
    Ok(q)
}

/// One row of the EM iteration trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmTraceRow {
    pub iter: usize,
    pub alpha: f64,
    pub mse_alpha: Option<f64>,
    pub mse_lambda: Option<f64>,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub params: ModelParams,
    pub stats: PosteriorStats,
    pub trace: Vec<EmTraceRow>,
    pub estep: EStepState,
}

/// Normalized squared error of `alpha`.
pub fn alpha_error(est: f64, truth: f64) -> f64 {
    (est - truth).powi(2) / (truth * truth)
}

/// Normalized squared error of the variance vector.
pub fn lambda_error(est: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = est.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = truth.iter().map(|b| b * b).sum();
    num / den
}

/// Runs EM from `init` until `max_em_iters` or the parameter tolerance.
pub fn em_fit(
    blocks: &[BlockData],
    spec: &QuantizerSpec,
    noise_var: f64,
    config: &EmConfig,
    init: &ModelParams,
    truth: Option<&ModelParams>,
) -> Result<EmFit> {
    config.validate()?;
    init.validate()?;
    let start = Instant::now();
    let mut params = init.clone();
    params.alpha = params.alpha.min(config.alpha_max);
    let mut warm: Option<EStepState> = None;
    let mut trace = Vec::new();
    let mut last = None;
    for iter in 1..=config.max_em_iters {
        let (stats, st) = e_step(blocks, &params, spec, noise_var, &config.damping, warm.take())?;
        let next = m_step(&stats, params.alpha, config)?;
        let lam_change = lambda_error(&next.lambda, &params.lambda).sqrt();
        let alpha_change = (next.alpha - params.alpha).abs() / params.alpha.abs().max(1e-12);
        params = next;
        trace.push(EmTraceRow {
            iter,
            alpha: params.alpha,
            mse_alpha: truth.map(|t| alpha_error(params.alpha, t.alpha)),
            mse_lambda: truth.map(|t| lambda_error(&params.lambda, &t.lambda)),
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
        log::debug!("EM iteration {iter}: alpha = {}", params.alpha);
        warm = Some(st);
        last = Some(stats);
        if lam_change < config.tol_param && alpha_change < config.tol_param {
            break;
        }
    }
    Ok(EmFit {
        params,
        stats: last.expect("at least one EM iteration"),
        trace,
        estep: warm.expect("at least one EM iteration"),
    })
}
