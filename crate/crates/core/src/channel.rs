//! Ground-truth channel generation.
//!
//! Two generators are provided. The model-matched generator draws a sparse
//! first-order Gauss-Markov path directly in the virtual (DFT) domain, which
//! makes learned parameters verifiable against the generating ones. The
//! ray-based generator synthesizes a physical antenna-domain channel from a
//! handful of scatterers with Doppler, for runs with model mismatch.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{dimension, domain, Result};
use crate::random::complex_gaussian;

/// Largest AR coefficient ever produced or learned; keeps `1/(1 - alpha^2)` finite.
pub const ALPHA_MAX: f64 = 1.0 - 1e-4;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Block duration (seconds) for which a 200 km/h user at a 2 GHz carrier has
/// `J0(2 pi f_D T) = 0.9899`.
pub const CALIBRATED_BLOCK_DURATION: f64 = 8.642_189_610_928_952e-5;

/// Uniform linear array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayGeometry {
    pub num_antennas: usize,
    /// Element spacing in wavelengths.
    pub spacing: f64,
}

impl ArrayGeometry {
    pub fn new(num_antennas: usize, spacing: f64) -> Result<Self> {
        if num_antennas == 0 {
            return Err(domain("array needs at least one antenna"));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(domain(format!("antenna spacing must be positive, got {spacing}")));
        }
        Ok(Self {
            num_antennas,
            spacing,
        })
    }

    pub fn half_wavelength(num_antennas: usize) -> Result<Self> {
        Self::new(num_antennas, 0.5)
    }
}

/// Array response `a(theta)` with element `n` equal to `exp(j 2 pi n d sin(theta))`.
pub fn steering_vector(theta: f64, geom: &ArrayGeometry) -> Result<DVector<Complex64>> {
    if !(theta.abs() <= PI / 2.0) {
        return Err(domain(format!("emergence angle {theta} outside [-pi/2, pi/2]")));
    }
    let k = 2.0 * PI * geom.spacing * theta.sin();
    Ok(DVector::from_fn(geom.num_antennas, |n, _| {
        Complex64::from_polar(1.0, k * n as f64)
    }))
}

/// Scattering environment for the ray-based generator.
#[derive(Debug, Clone, PartialEq)]
pub struct RayChannelSpec {
    pub theta_min: f64,
    pub theta_max: f64,
    pub num_rays: usize,
    /// Maximum Doppler shift in Hz.
    pub doppler_max: f64,
    /// Duration of one coherence block in seconds.
    pub block_duration: f64,
    pub num_blocks: usize,
}

impl RayChannelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_min < self.theta_max) {
            return Err(domain("theta_min must be below theta_max"));
        }
        if self.theta_min < -PI / 2.0 || self.theta_max > PI / 2.0 {
            return Err(domain("angle window must lie within [-pi/2, pi/2]"));
        }
        if self.num_rays == 0 || self.num_blocks == 0 {
            return Err(domain("need at least one ray and one block"));
        }
        if !(self.doppler_max >= 0.0) || !(self.block_duration >= 0.0) {
            return Err(domain("Doppler and block duration must be non-negative"));
        }
        Ok(())
    }
}

/// One discrete scatterer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub theta: f64,
    pub gain: Complex64,
    pub doppler: f64,
}

/// Superimposes `rays` over `num_blocks` blocks; column `m` carries the phase
/// rotation `exp(j 2 pi nu m T)` so that column 0 is the un-rotated sum.
pub fn channel_from_rays(
    rays: &[Ray],
    geom: &ArrayGeometry,
    num_blocks: usize,
    block_duration: f64,
) -> Result<DMatrix<Complex64>> {
    let mut h = DMatrix::zeros(geom.num_antennas, num_blocks);
    for ray in rays {
        let a = steering_vector(ray.theta, geom)?;
        for m in 0..num_blocks {
            let rot = Complex64::from_polar(1.0, 2.0 * PI * ray.doppler * m as f64 * block_duration);
            let coeff = ray.gain * rot;
            h.column_mut(m).axpy(coeff, &a, Complex64::new(1.0, 0.0));
        }
    }
    Ok(h)
}

/// Draws rays for `spec` and returns the antenna-domain channel (N x M).
pub fn gen_ray_channel<R: Rng + ?Sized>(
    spec: &RayChannelSpec,
    geom: &ArrayGeometry,
    rng: &mut R,
) -> Result<DMatrix<Complex64>> {
    spec.validate()?;
    let gain_var = 1.0 / spec.num_rays as f64;
    let rays: Vec<Ray> = (0..spec.num_rays)
        .map(|_| {
            let theta = rng.random_range(spec.theta_min..=spec.theta_max);
            let gain = complex_gaussian(rng, gain_var);
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            Ray {
                theta,
                gain,
                doppler: spec.doppler_max * phase.cos(),
            }
        })
        .collect();
    channel_from_rays(&rays, geom, spec.num_blocks, spec.block_duration)
}

/// Normalized DFT matrix, `[F]_{i,j} = exp(-j 2 pi i j / N) / sqrt(N)`.
pub fn dft_matrix(n: usize) -> DMatrix<Complex64> {
    let scale = 1.0 / (n as f64).sqrt();
    DMatrix::from_fn(n, n, |i, j| {
        let angle = -2.0 * PI * ((i * j) % n) as f64 / n as f64;
        Complex64::from_polar(scale, angle)
    })
}

/// Antenna domain to virtual domain, `F h`.
pub fn to_virtual(h: &DVector<Complex64>) -> DVector<Complex64> {
    dft_matrix(h.len()) * h
}

/// Virtual domain to antenna domain, `F^H h`.
pub fn from_virtual(h: &DVector<Complex64>) -> DVector<Complex64> {
    dft_matrix(h.len()).adjoint() * h
}

/// The learnable model: AR coefficient and per-coefficient variances.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub alpha: f64,
    pub lambda: Vec<f64>,
}

impl ModelParams {
    pub fn new(alpha: f64, lambda: Vec<f64>) -> Result<Self> {
        let p = Self { alpha, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(domain(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if let Some(bad) = self.lambda.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
            return Err(domain(format!("lambda entries must be finite and non-negative, got {bad}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    /// Indices with non-zero variance.
    pub fn support(&self) -> Vec<usize> {
        self.lambda
            .iter()
            .enumerate()
            .filter(|(_, l)| **l > 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// `alpha h_prev + sqrt(1 - alpha^2) v` with `v ~ CN(0, diag(lambda))`.
pub fn ar_evolve<R: Rng + ?Sized>(
    h_prev: &DVector<Complex64>,
    params: &ModelParams,
    rng: &mut R,
) -> Result<DVector<Complex64>> {
    params.validate()?;
    if h_prev.len() != params.len() {
        return Err(dimension(format!(
            "state has {} entries but lambda has {}",
            h_prev.len(),
            params.len()
        )));
    }
    let innov = (1.0 - params.alpha * params.alpha).sqrt();
    Ok(DVector::from_fn(h_prev.len(), |i, _| {
        let v = complex_gaussian(rng, params.lambda[i]);
        h_prev[i] * params.alpha + v * innov
    }))
}

/// One draw from the stationary marginal `CN(0, diag(lambda))`.
pub fn draw_initial<R: Rng + ?Sized>(params: &ModelParams, rng: &mut R) -> DVector<Complex64> {
    DVector::from_fn(params.len(), |i, _| complex_gaussian(rng, params.lambda[i]))
}

/// Support width (in DFT bins) covering an angular spread of `as_deg` degrees.
pub fn default_support_width(n: usize, as_deg: f64) -> usize {
    ((n as f64 * as_deg / 180.0).ceil() as usize).clamp(1, n.max(1))
}

/// A ground-truth virtual channel path.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualChannelPath {
    /// N x M, one column per block.
    pub values: DMatrix<Complex64>,
    pub true_support: Vec<usize>,
}

impl VirtualChannelPath {
    pub fn num_blocks(&self) -> usize {
        self.values.ncols()
    }

    pub fn block(&self, m: usize) -> DVector<Complex64> {
        self.values.column(m).into_owned()
    }
}

/// Sparse model parameters: a contiguous window of `width` bins at a uniformly
/// random offset, with variances uniform in `[0.5, 1.5]` on the window.
pub fn sample_sparse_params<R: Rng + ?Sized>(
    n: usize,
    width: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<ModelParams> {
    if width == 0 || width > n {
        return Err(domain(format!("support width {width} invalid for N = {n}")));
    }
    let offset = rng.random_range(0..=n - width);
    let mut lambda = vec![0.0; n];
    for l in &mut lambda[offset..offset + width] {
        *l = rng.random_range(0.5..=1.5);
    }
    ModelParams::new(alpha, lambda)
}

/// Model-matched path of `num_blocks` blocks started from the stationary marginal.
pub fn gen_ar_path<R: Rng + ?Sized>(
    params: &ModelParams,
    num_blocks: usize,
    rng: &mut R,
) -> Result<VirtualChannelPath> {
    params.validate()?;
    let n = params.len();
    let mut values = DMatrix::zeros(n, num_blocks);
    if num_blocks > 0 {
        let mut h = draw_initial(params, rng);
        values.set_column(0, &h);
        for m in 1..num_blocks {
            h = ar_evolve(&h, params, rng)?;
            values.set_column(m, &h);
        }
    }
    Ok(VirtualChannelPath {
        values,
        true_support: params.support(),
    })
}

/// Pilot matrix `X_m` (N x P) with `X^H X = (pilot_power / P) I`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMatrix {
    pub x: DMatrix<Complex64>,
    pub pilot_power: f64,
}

impl TrainingMatrix {
    pub fn num_pilots(&self) -> usize {
        self.x.ncols()
    }

    /// `|| X^H X - (pilot_power / P) I ||_F`.
    pub fn gram_residual(&self) -> f64 {
        let p = self.num_pilots();
        let mut g = self.x.adjoint() * &self.x;
        let target = self.pilot_power / p as f64;
        for i in 0..p {
            g[(i, i)] -= Complex64::new(target, 0.0);
        }
        g.norm()
    }

    /// `B = X^T F^H`, mapping the virtual channel to the received pilots.
    pub fn measurement_matrix(&self) -> DMatrix<Complex64> {
        self.x.transpose() * dft_matrix(self.x.nrows()).adjoint()
    }
}

/// P randomly chosen columns of a randomly phase-rotated DFT, scaled by
/// `sqrt(pilot_power / P)`.
pub fn make_training_matrix<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    pilot_power: f64,
    rng: &mut R,
) -> Result<TrainingMatrix> {
    if p == 0 || p > n {
        return Err(domain(format!("need 1 <= P <= N, got P = {p}, N = {n}")));
    }
    if !(pilot_power > 0.0) {
        return Err(domain("pilot power must be positive"));
    }
    let phases: Vec<Complex64> = (0..n)
        .map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI)))
        .collect();
    let cols = sample(rng, n, p).into_vec();
    let f = dft_matrix(n);
    let scale = (pilot_power / p as f64).sqrt();
    let x = DMatrix::from_fn(n, p, |i, c| phases[i] * f[(i, cols[c])] * scale);
    Ok(TrainingMatrix { x, pilot_power })
}

/// Pre-ADC received pilots of one block together with the matrix that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockObservation {
    pub q: DVector<Complex64>,
    pub b: DMatrix<Complex64>,
}

/// `q = X^T F^H h_virt + n`, `n ~ CN(0, noise_var I)`.
pub fn observe_block<R: Rng + ?Sized>(
    h_virt: &DVector<Complex64>,
    training: &TrainingMatrix,
    noise_var: f64,
    rng: &mut R,
) -> Result<BlockObservation> {
    if h_virt.len() != training.x.nrows() {
        return Err(dimension(format!(
            "channel has {} entries, training matrix has {} rows",
            h_virt.len(),
            training.x.nrows()
        )));
    }
    if !(noise_var >= 0.0) {
        return Err(domain("noise variance must be non-negative"));
    }
    let b = training.measurement_matrix();
    let mut q = &b * h_virt;
    for v in q.iter_mut() {
        *v += complex_gaussian(rng, noise_var);
    }
    Ok(BlockObservation { q, b })
}

/// Jakes autocorrelation `J0(2 pi f_D T)` between consecutive blocks for a
/// user moving at `speed` m/s, clamped to `[0, ALPHA_MAX]`.
pub fn velocity_to_alpha(speed: f64, carrier_hz: f64, block_duration: f64) -> Result<f64> {
    if !(speed >= 0.0) || !speed.is_finite() {
        return Err(domain(format!("speed must be non-negative, got {speed}")));
    }
    if !(carrier_hz > 0.0) || !(block_duration >= 0.0) {
        return Err(domain("carrier must be positive and block duration non-negative"));
    }
    let doppler = speed * carrier_hz / SPEED_OF_LIGHT;
    let rho = libm::j0(2.0 * PI * doppler * block_duration);
    Ok(rho.clamp(0.0, ALPHA_MAX))
}

pub fn kmh_to_mps(kmh: f64) -> f64 {
    kmh / 3.6
}
