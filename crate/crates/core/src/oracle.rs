//! Brute-force reference computations for the test suites.
//!
//! Everything here favours obviousness over speed: dense joint Gaussian
//! posteriors, Kalman/RTS recursions with full covariance matrices, adaptive
//! quadrature and inverse-CDF Monte Carlo.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::channel::ModelParams;
use crate::error::{dimension, domain, numerical, Result};
use crate::quantizer::thresholds;
use crate::special::phi;

type CMat = DMatrix<Complex64>;
type CVec = DVector<Complex64>;

fn re(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

fn hermitian_solve(a: CMat, b: &CMat) -> Result<CMat> {
    let chol = a
        .cholesky()
        .ok_or_else(|| numerical("matrix is not positive definite"))?;
    Ok(chol.solve(b))
}

/// Joint posterior of all blocks stacked into one `N M` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGaussianPosterior {
    pub n: usize,
    pub mean: CVec,
    pub cov: CMat,
}

impl DenseGaussianPosterior {
    pub fn num_blocks(&self) -> usize {
        self.mean.len() / self.n
    }

    pub fn block_mean(&self, m: usize) -> CVec {
        self.mean.rows(m * self.n, self.n).into_owned()
    }

    pub fn block_cov(&self, m: usize, k: usize) -> CMat {
        self.cov.view((m * self.n, k * self.n), (self.n, self.n)).into_owned()
    }

    /// `E[h_m h_m^H]`.
    pub fn theta(&self, m: usize) -> CMat {
        let mu = self.block_mean(m);
        self.block_cov(m, m) + &mu * mu.adjoint()
    }

    /// `E[h_{m-1} h_m^H]`.
    pub fn pi(&self, m: usize) -> CMat {
        let a = self.block_mean(m - 1);
        let b = self.block_mean(m);
        self.block_cov(m - 1, m) + a * b.adjoint()
    }
}

/// Exact posterior of the AR(1) block chain observed through `y_m = B_m h_m + n_m`.
pub fn exact_gaussian_posterior(
    ys: &[CVec],
    bs: &[CMat],
    params: &ModelParams,
    noise_var: f64,
) -> Result<DenseGaussianPosterior> {
    let m_blocks = ys.len();
    if m_blocks == 0 || bs.len() != m_blocks {
        return Err(dimension("need one matrix per observation block"));
    }
    let n = params.len();
    let rows: Vec<usize> = bs.iter().map(|b| b.nrows()).collect();
    let total_rows: usize = rows.iter().sum();
    let nm = n * m_blocks;

    let mut prior = CMat::zeros(nm, nm);
    for m in 0..m_blocks {
        for k in 0..m_blocks {
            let c = params.alpha.powi((m as i32 - k as i32).abs());
            for i in 0..n {
                prior[(m * n + i, k * n + i)] = re(c * params.lambda[i]);
            }
        }
    }
    let mut big_b = CMat::zeros(total_rows, nm);
    let mut y = CVec::zeros(total_rows);
    let mut off = 0;
    for m in 0..m_blocks {
        if bs[m].ncols() != n || ys[m].len() != rows[m] {
            return Err(dimension(format!("block {m} has inconsistent dimensions")));
        }
        big_b.view_mut((off, m * n), (rows[m], n)).copy_from(&bs[m]);
        y.rows_mut(off, rows[m]).copy_from(&ys[m]);
        off += rows[m];
    }
    let cb = &prior * big_b.adjoint();
    let s = &big_b * &cb + CMat::identity(total_rows, total_rows) * re(noise_var);
    // gain^H = S^{-1} B C
    let gain_h = hermitian_solve(s, &cb.adjoint())?;
    let mean = gain_h.adjoint() * y;
    let cov = &prior - gain_h.adjoint() * cb.adjoint();
    Ok(DenseGaussianPosterior { n, mean, cov })
}

/// Filtered or smoothed moments of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMoments {
    pub mean: CVec,
    pub cov: CMat,
}

/// Kalman filter with full covariances for the AR(1) chain.
pub fn kalman_filter(
    ys: &[CVec],
    hs: &[CMat],
    params: &ModelParams,
    noise_var: f64,
) -> Result<Vec<BlockMoments>> {
    let n = params.len();
    let lam = CMat::from_diagonal(&CVec::from_iterator(n, params.lambda.iter().map(|&l| re(l))));
    let a = params.alpha;
    let mut out: Vec<BlockMoments> = Vec::with_capacity(ys.len());
    for (m, (y, h)) in ys.iter().zip(hs).enumerate() {
        let (mu_p, p_p) = match out.last() {
            None => (CVec::zeros(n), lam.clone()),
            Some(prev) => (
                &prev.mean * re(a),
                &prev.cov * re(a * a) + &lam * re(1.0 - a * a),
            ),
        };
        if h.ncols() != n || h.nrows() != y.len() {
            return Err(dimension(format!("block {m} has inconsistent dimensions")));
        }
        let ph = &p_p * h.adjoint();
        let s = h * &ph + CMat::identity(y.len(), y.len()) * re(noise_var);
        let k_h = hermitian_solve(s, &ph.adjoint())?;
        let innov = y - h * &mu_p;
        let mean = &mu_p + k_h.adjoint() * innov;
        let cov = &p_p - k_h.adjoint() * ph.adjoint();
        out.push(BlockMoments { mean, cov });
    }
    Ok(out)
}

/// Smoothed moments plus lag-one cross covariances `Cov(h_{m-1}, h_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub blocks: Vec<BlockMoments>,
    pub cross: Vec<CMat>,
}

/// Rauch-Tung-Striebel smoother on top of [`kalman_filter`].
pub fn rts_smoother(ys: &[CVec], hs: &[CMat], params: &ModelParams, noise_var: f64) -> Result<Smoothed> {
    let filt = kalman_filter(ys, hs, params, noise_var)?;
    let n = params.len();
    let lam = CMat::from_diagonal(&CVec::from_iterator(n, params.lambda.iter().map(|&l| re(l))));
    let a = params.alpha;
    let m_blocks = filt.len();
    let mut sm = filt.clone();
    let mut cross = vec![CMat::zeros(n, n); m_blocks.saturating_sub(1)];
    for m in (0..m_blocks.saturating_sub(1)).rev() {
        let p_pred = &filt[m].cov * re(a * a) + &lam * re(1.0 - a * a);
        // J = P_f a P_pred^{-1}
        let j = hermitian_solve(p_pred.clone(), &(&filt[m].cov * re(a)).adjoint())?.adjoint();
        let mean = &filt[m].mean + &j * (&sm[m + 1].mean - &filt[m].mean * re(a));
        let cov = &filt[m].cov + &j * (&sm[m + 1].cov - &p_pred) * j.adjoint();
        cross[m] = &j * &sm[m + 1].cov;
        sm[m] = BlockMoments { mean, cov };
    }
    Ok(Smoothed { blocks: sm, cross })
}

/// Single-block posterior mean under `x ~ CN(mu, diag(var))`, `y = B x + CN(0, noise_var I)`.
pub fn lmmse(b: &CMat, y: &CVec, mu: &CVec, var: &[f64], noise_var: f64) -> Result<CVec> {
    let n = mu.len();
    if b.ncols() != n || var.len() != n || b.nrows() != y.len() {
        return Err(dimension("LMMSE inputs are inconsistent"));
    }
    let c = CMat::from_diagonal(&CVec::from_iterator(n, var.iter().map(|&v| re(v))));
    let cb = &c * b.adjoint();
    let s = b * &cb + CMat::identity(y.len(), y.len()) * re(noise_var);
    let k_h = hermitian_solve(s, &cb.adjoint())?;
    Ok(mu + k_h.adjoint() * (y - b * mu))
}

/// Adaptive Gauss-Kronrod (7/15) integration with a relative tolerance.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, rel_tol: f64) -> f64 {
    const XK: [f64; 8] = [
        0.991_455_371_120_812_6,
        0.949_107_912_342_758_5,
        0.864_864_423_359_769_1,
        0.741_531_185_599_394_4,
        0.586_087_235_467_691_1,
        0.405_845_151_377_397_2,
        0.207_784_955_007_898_5,
        0.0,
    ];
    const WK: [f64; 8] = [
        0.022_935_322_010_529_22,
        0.063_092_092_629_978_55,
        0.104_790_010_322_250_2,
        0.140_653_259_715_525_9,
        0.169_004_726_639_267_9,
        0.190_350_578_064_785_4,
        0.204_432_940_075_298_9,
        0.209_482_141_084_728_,
    ];
    const WG: [f64; 4] = [
        0.129_484_966_168_869_7,
        0.279_705_391_489_276_7,
        0.381_830_050_505_118_9,
        0.417_959_183_673_469_4,
    ];
    fn gk<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let fc = f(c);
        let mut k = WK[7] * fc;
        let mut g = WG[3] * fc;
        for j in 0..7 {
            let x = h * XK[j];
            let s = f(c - x) + f(c + x);
            k += WK[j] * s;
            if j % 2 == 1 {
                g += WG[j / 2] * s;
            }
        }
        (k * h, (k - g).abs() * h)
    }
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, err) = gk(f, a, b);
        if err <= tol || depth == 0 {
            return v;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, 0.5 * tol, depth - 1) + rec(f, m, b, 0.5 * tol, depth - 1)
    }
    // Rough magnitude first so the absolute tolerance tracks the answer.
    let pieces = 32;
    let w = (b - a) / pieces as f64;
    let rough: f64 = (0..pieces)
        .map(|i| gk(f, a + i as f64 * w, a + (i + 1) as f64 * w).0.abs())
        .sum();
    let tol = rel_tol * rough.max(f64::MIN_POSITIVE) / pieces as f64;
    (0..pieces)
        .map(|i| rec(f, a + i as f64 * w, a + (i + 1) as f64 * w, tol, 40))
        .sum()
}

/// Reference for the uniform-quantizer output function by quadrature over the
/// pseudo-prior of each axis.
pub fn quadrature_gout(
    p: Complex64,
    nu_p: f64,
    k: (i32, i32),
    noise_var: f64,
    bits: u32,
    step: f64,
) -> Result<Complex64> {
    if !(nu_p > 0.0) {
        return Err(domain("quadrature needs a positive precision"));
    }
    let sd_z = (0.5 / nu_p).sqrt();
    let sd_n = (0.5 * noise_var).sqrt();
    let axis = |mean: f64, code: i32| -> Result<f64> {
        let (lo, hi) = thresholds(code, bits, step)?;
        let cell = |z: f64| -> f64 {
            if sd_n == 0.0 {
                if lo <= z && z < hi {
                    1.0
                } else {
                    0.0
                }
            } else {
                let a = (lo - z) / sd_n;
                let b = (hi - z) / sd_n;
                if a > 0.0 {
                    phi(-a) - phi(-b)
                } else {
                    phi(b) - phi(a)
                }
            }
        };
        let dens = |t: f64| (-0.5 * t * t).exp();
        let num = integrate(&|t: f64| t * dens(t) * cell(mean + sd_z * t), -40.0, 40.0, 1e-12);
        let den = integrate(&|t: f64| dens(t) * cell(mean + sd_z * t), -40.0, 40.0, 1e-12);
        if !(den > 0.0) {
            return Err(numerical("cell mass vanished in quadrature"));
        }
        // g = p - nu_p E[z|y] = -nu_p (E[z|y] - p / nu_p)
        Ok(-nu_p * sd_z * num / den)
    };
    Ok(Complex64::new(axis(p.re / nu_p, k.0)?, axis(p.im / nu_p, k.1)?))
}

/// Inverse-CDF Monte-Carlo estimate of the truncated-normal mean and its
/// standard error.
pub fn mc_trunc_moments<R: Rng + ?Sized>(
    mu: f64,
    sd: f64,
    a: f64,
    b: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if !(a < b) || !(sd > 0.0) || n_samples < 2 {
        return Err(domain("need a < b, sd > 0 and at least two samples"));
    }
    let std = Normal::standard();
    let (lo, hi) = ((a - mu) / sd, (b - mu) / sd);
    // Sample the tail nearer to zero mass on the side where the CDF keeps precision.
    let reflect = lo > 0.0;
    let (l, h) = if reflect { (-hi, -lo) } else { (lo, hi) };
    let (pl, ph) = (std.cdf(l), std.cdf(h));
    if !(ph > pl) {
        return Err(numerical("interval mass below double precision"));
    }
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..n_samples {
        let u: f64 = rng.random_range(pl..ph);
        let mut t = std.inverse_cdf(u).clamp(l, h);
        if reflect {
            t = -t;
        }
        let x = mu + sd * t;
        sum += x;
        sum2 += x * x;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Index set with the larger mean among all SSE-optimal 2-partitions, found
/// by enumerating every subset.
pub fn exhaustive_two_means(lambda: &[f64]) -> Result<Vec<usize>> {
    let n = lambda.len();
    if !(2..=20).contains(&n) {
        return Err(domain("exhaustive 2-means supports 2..=20 points"));
    }
    let sse = |mask: u32, member: bool| -> (f64, f64) {
        let pts: Vec<f64> = (0..n)
            .filter(|&i| ((mask >> i) & 1 == 1) == member)
            .map(|i| lambda[i])
            .collect();
        let mean = pts.iter().sum::<f64>() / pts.len() as f64;
        (pts.iter().map(|x| (x - mean).powi(2)).sum(), mean)
    };
    let mut best: Option<(f64, u32)> = None;
    for mask in 1..(1u32 << n) - 1 {
        let (s1, m1) = sse(mask, true);
        let (s0, m0) = sse(mask, false);
        if m1 < m0 {
            continue;
        }
        let total = s1 + s0;
        if best.is_none_or(|(b, _)| total < b - 1e-15 * b.abs()) {
            best = Some((total, mask));
        }
    }
    let (_, mask) = best.ok_or_else(|| numerical("no proper partition"))?;
    Ok((0..n).filter(|&i| (mask >> i) & 1 == 1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{complex_gaussian, seeded};

    fn random_instance(n: usize, m_blocks: usize, p: usize, seed: u64) -> (Vec<CVec>, Vec<CMat>, ModelParams) {
        let mut rng = seeded(seed);
        let params = ModelParams::new(0.8, (0..n).map(|i| 0.5 + i as f64 * 0.2).collect()).unwrap();
        let bs: Vec<CMat> = (0..m_blocks)
            .map(|_| CMat::from_fn(p, n, |_, _| complex_gaussian(&mut rng, 1.0)))
            .collect();
        let ys: Vec<CVec> = (0..m_blocks)
            .map(|_| CVec::from_fn(p, |_, _| complex_gaussian(&mut rng, 2.0)))
            .collect();
        (ys, bs, params)
    }

    #[test]
    fn dense_and_recursive_routes_agree() {
        let (ys, bs, params) = random_instance(3, 4, 2, 1);
        let dense = exact_gaussian_posterior(&ys, &bs, &params, 0.3).unwrap();
        let sm = rts_smoother(&ys, &bs, &params, 0.3).unwrap();
        for m in 0..4 {
            assert!((dense.block_mean(m) - &sm.blocks[m].mean).norm() < 1e-10);
            assert!((dense.block_cov(m, m) - &sm.blocks[m].cov).norm() < 1e-10);
        }
        for m in 1..4 {
            assert!((dense.block_cov(m - 1, m) - &sm.cross[m - 1]).norm() < 1e-10);
        }
    }

    #[test]
    fn single_block_is_lmmse() {
        let (ys, bs, params) = random_instance(3, 1, 3, 2);
        let dense = exact_gaussian_posterior(&ys, &bs, &params, 0.5).unwrap();
        let direct = lmmse(&bs[0], &ys[0], &CVec::zeros(3), &params.lambda, 0.5).unwrap();
        assert!((dense.block_mean(0) - direct).norm() < 1e-12);
    }

    #[test]
    fn independent_blocks_without_correlation() {
        let (ys, bs, mut params) = random_instance(2, 3, 2, 3);
        params.alpha = 0.0;
        let dense = exact_gaussian_posterior(&ys, &bs, &params, 0.5).unwrap();
        assert!(dense.block_cov(0, 1).norm() < 1e-12);
        assert!(dense.block_cov(0, 2).norm() < 1e-12);
    }

    #[test]
    fn quadrature_against_gaussian_moments() {
        let v = integrate(&|x: f64| (-0.5 * x * x).exp(), -40.0, 40.0, 1e-12);
        assert!((v - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mc_half_normal() {
        let mut rng = seeded(4);
        let (m, se) = mc_trunc_moments(0.0, 1.0, 0.0, f64::INFINITY, 200_000, &mut rng).unwrap();
        assert!((m - (2.0 / std::f64::consts::PI).sqrt()).abs() < 4.0 * se);
        let (m, se) = mc_trunc_moments(0.0, 1.0, f64::NEG_INFINITY, f64::INFINITY, 100_000, &mut rng).unwrap();
        assert!(m.abs() < 4.0 * se);
    }

    #[test]
    fn exhaustive_example() {
        assert_eq!(exhaustive_two_means(&[0.01, 0.02, 5.0, 5.1]).unwrap(), vec![2, 3]);
    }
}
