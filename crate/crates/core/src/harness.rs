//! Monte-Carlo experiment runner.
//!
//! Every trial draws one model-matched channel path, learns the model from
//! the first `m` blocks, extracts the support and tracks the following
//! `track_blocks` blocks on it. Within a trial the same random streams are
//! replayed for every SNR and quantizer, so curves differ only through the
//! quantity being swept.
//!
//! Seeds: trial `t` uses `stream_seed(seed, t)`, split again by purpose with
//! the tags in [`tags`].
//!
//! # CSV schema
//!
//! ```text
//! # chantrack <version> generated_at=<unix seconds>
//! scenario,snr_db,quantizer,x_name,x,metric,statistic,num_trials,value,value_db
//! ```
//!
//! `quantizer` is `none`, `uniform-<bits>` or `pdq-<bits>`. `statistic` is
//! `median` or `mean` across trials for MSE metrics, `rate` for
//! `support_recovery`, and `trial0` for the per-block traces of
//! `tracking_example` (whose `value_db` is `20 log10 |value|`). Floats are
//! written with 17 significant digits. Only the first line depends on the
//! wall clock.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    default_support_width, gen_ar_path, kmh_to_mps, make_training_matrix, observe_block,
    sample_sparse_params, velocity_to_alpha, ModelParams, ALPHA_MAX, CALIBRATED_BLOCK_DURATION,
};
use crate::em::{em_fit, BlockData, EmConfig};
use crate::error::{Error, Result};
use crate::gamp::{DampingConfig, Measurement};
use crate::metrics::{mean, median, to_db};
use crate::quantizer::{loading_step, quantize, QuantizerSpec, RhoTable};
use crate::random::{seeded, stream_seed};
use crate::support::kmeans_support;
use crate::tracker::{
    build_reduced_training, restrict_params, simulate_tracking_observation, track_step,
    tracking_damping, MismatchDetector, TrackState, DETECTOR_THRESHOLD, DETECTOR_WINDOW,
};

/// Purpose tags for per-trial random streams.
pub mod tags {
    pub const CHANNEL: u64 = 1;
    pub const PILOTS: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const TRACK_PILOTS: u64 = 4;
    pub const TRACK_NOISE: u64 = 5;
}

/// Noise variance of every experiment; the SNR sets the pilot power.
pub const NOISE_VAR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    EmConvergence,
    MseVsSnr,
    MseVsBits,
    TrackingExample,
    MseVsBlock,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::EmConvergence,
        Scenario::MseVsSnr,
        Scenario::MseVsBits,
        Scenario::TrackingExample,
        Scenario::MseVsBlock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::EmConvergence => "em_convergence",
            Scenario::MseVsSnr => "mse_vs_snr",
            Scenario::MseVsBits => "mse_vs_bits",
            Scenario::TrackingExample => "tracking_example",
            Scenario::MseVsBlock => "mse_vs_block",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Scenario::EmConvergence => "MSE of alpha and Lambda per EM iteration",
            Scenario::MseVsSnr => "learning and tracking MSE versus SNR for several bit depths",
            Scenario::MseVsBits => "learning and tracking MSE versus quantizer bits",
            Scenario::TrackingExample => "true and tracked coefficient of one trial, block by block",
            Scenario::MseVsBlock => "tracking MSE versus tracked block index",
        }
    }

    fn x_name(self) -> &'static str {
        match self {
            Scenario::EmConvergence => "iteration",
            Scenario::MseVsSnr => "snr_db",
            Scenario::MseVsBits => "bits",
            Scenario::TrackingExample | Scenario::MseVsBlock => "block",
        }
    }

    fn needs_tracking(self) -> bool {
        self != Scenario::EmConvergence
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
                Error::Config(format!("unknown scenario {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Likelihood used for inference on quantized data. Simulation always uses
/// the uniform converter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    #[default]
    Exact,
    Pdq,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerOverrides {
    #[serde(default)]
    pub inference: Inference,
    /// Fixed step size; otherwise chosen by [`loading_step`] from the analytic
    /// input power.
    #[serde(default)]
    pub step: Option<f64>,
    /// Distortion factor per bit depth for PDQ inference.
    #[serde(default)]
    pub rho: BTreeMap<u32, f64>,
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Antennas.
    pub n: usize,
    /// Learning blocks.
    pub m: usize,
    /// Pilots per learning block.
    pub p: usize,
    /// Tracking pilots; the support size when unset or smaller.
    pub p_t: Option<usize>,
    pub snr_db: Vec<f64>,
    /// Bit depths; 0 means no quantization.
    pub bits: Vec<u32>,
    pub velocity_kmh: f64,
    pub carrier_hz: f64,
    pub angle_spread_deg: f64,
    /// Support width; derived from the angle spread when unset.
    pub support_width: Option<usize>,
    pub num_trials: usize,
    pub seed: u64,
    pub track_blocks: usize,
    pub em_iters: usize,
    /// Message-passing rounds per E-step.
    pub estep_rounds: usize,
    /// GAMP iterations per tracked block.
    pub track_iters: usize,
    pub quantizer: QuantizerOverrides,
    pub out: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `scenario`.
    pub fn defaults(scenario: Scenario) -> Self {
        let (snr_db, bits, num_trials) = match scenario {
            Scenario::EmConvergence => (vec![15.0, 30.0], vec![0], 50),
            Scenario::MseVsSnr => (vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0], vec![2, 4, 6, 0], 50),
            Scenario::MseVsBits => (vec![15.0, 30.0], vec![1, 2, 3, 4, 5, 6, 7, 8, 0], 50),
            Scenario::TrackingExample => (vec![15.0], vec![0, 6], 20),
            Scenario::MseVsBlock => (vec![15.0, 30.0], vec![0], 50),
        };
        Self {
            scenario,
            n: 32,
            m: 16,
            p: 8,
            p_t: None,
            snr_db,
            bits,
            velocity_kmh: 100.0,
            carrier_hz: 2e9,
            angle_spread_deg: 4.0,
            support_width: None,
            num_trials,
            seed: 1,
            track_blocks: 50,
            em_iters: 10,
            estep_rounds: 25,
            track_iters: 15,
            quantizer: QuantizerOverrides::default(),
            out: PathBuf::from("results"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n < 2 || self.m == 0 || self.p == 0 {
            return bad(format!("need N >= 2, M >= 1, P >= 1 (got {}, {}, {})", self.n, self.m, self.p));
        }
        if self.p > self.n {
            return bad(format!("P = {} exceeds N = {}", self.p, self.n));
        }
        if self.p_t == Some(0) {
            return bad("P_T must be positive".into());
        }
        if self.snr_db.is_empty() {
            return bad("snr_db must not be empty".into());
        }
        if let Some(s) = self.snr_db.iter().find(|s| !s.is_finite()) {
            return bad(format!("SNR {s} is not finite"));
        }
        if self.bits.is_empty() {
            return bad("bits must not be empty".into());
        }
        if let Some(b) = self.bits.iter().find(|&&b| b > 16) {
            return bad(format!("{b} bits is outside 0..=16"));
        }
        if !(self.velocity_kmh >= 0.0) || !(self.carrier_hz > 0.0) || !(self.angle_spread_deg > 0.0) {
            return bad("velocity must be non-negative; carrier and angle spread positive".into());
        }
        if let Some(w) = self.support_width {
            if w == 0 || w > self.n {
                return bad(format!("support width {w} outside 1..={}", self.n));
            }
        }
        if self.scenario.needs_tracking() && self.track_blocks == 0 {
            return bad("track_blocks must be positive".into());
        }
        if self.em_iters == 0 || self.estep_rounds == 0 || self.track_iters == 0 {
            return bad("iteration counts must be positive".into());
        }
        if let Some(step) = self.quantizer.step {
            if !(step > 0.0) || !step.is_finite() {
                return bad(format!("quantizer step {step} must be positive"));
            }
        }
        self.rho_table()?;
        Ok(())
    }

    pub fn alpha(&self) -> Result<f64> {
        velocity_to_alpha(kmh_to_mps(self.velocity_kmh), self.carrier_hz, CALIBRATED_BLOCK_DURATION)
    }

    pub fn width(&self) -> usize {
        self.support_width
            .unwrap_or_else(|| default_support_width(self.n, self.angle_spread_deg))
    }

    fn rho_table(&self) -> Result<RhoTable> {
        self.quantizer
            .rho
            .iter()
            .try_fold(RhoTable::default(), |t, (&b, &r)| t.with_override(b, r))
            .map_err(|e| Error::Config(e.to_string()))
    }
}

/// Partial configuration, as read from a file or the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub scenario: Option<Scenario>,
    /// Switches the size defaults to N = 128, M = 32.
    pub paper_scale: Option<bool>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub p: Option<usize>,
    pub p_t: Option<usize>,
    pub snr_db: Option<Vec<f64>>,
    pub bits: Option<Vec<u32>>,
    pub velocity_kmh: Option<f64>,
    pub carrier_hz: Option<f64>,
    pub angle_spread_deg: Option<f64>,
    pub support_width: Option<usize>,
    pub num_trials: Option<usize>,
    pub seed: Option<u64>,
    pub track_blocks: Option<usize>,
    pub em_iters: Option<usize>,
    pub estep_rounds: Option<usize>,
    pub track_iters: Option<usize>,
    pub quantizer: Option<QuantizerOverrides>,
    pub out: Option<PathBuf>,
}

impl ConfigPatch {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fields set in `over` win.
    pub fn merged(self, over: ConfigPatch) -> ConfigPatch {
        macro_rules! pick {
            ($($f:ident),*) => { ConfigPatch { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(
            scenario, paper_scale, n, m, p, p_t, snr_db, bits, velocity_kmh, carrier_hz,
            angle_spread_deg, support_width, num_trials, seed, track_blocks, em_iters,
            estep_rounds, track_iters, quantizer, out
        )
    }

    /// Applies the patch over the scenario defaults and validates the result.
    pub fn resolve(self) -> Result<ExperimentConfig> {
        let scenario = self
            .scenario
            .ok_or_else(|| Error::Config("no scenario given".into()))?;
        let mut c = ExperimentConfig::defaults(scenario);
        if self.paper_scale == Some(true) {
            c.n = 128;
            c.m = 32;
            c.p = 32;
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            n, m, snr_db, bits, velocity_kmh, carrier_hz, angle_spread_deg, num_trials, seed,
            track_blocks, em_iters, estep_rounds, track_iters, quantizer, out
        );
        c.p = self.p.unwrap_or(if self.n.is_some() { (c.n / 4).max(1) } else { c.p });
        c.p_t = self.p_t.or(c.p_t);
        c.support_width = self.support_width.or(c.support_width);
        c.validate()?;
        Ok(c)
    }
}

/// One aggregated output value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub snr_db: f64,
    pub quantizer: String,
    pub x_name: String,
    pub x: f64,
    pub metric: String,
    pub statistic: String,
    pub num_trials: usize,
    pub value: f64,
    pub value_db: f64,
}

pub const CSV_HEADER: [&str; 10] = [
    "scenario", "snr_db", "quantizer", "x_name", "x", "metric", "statistic", "num_trials", "value",
    "value_db",
];

/// Per-block record of the tracking example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackLogRow {
    pub snr_db: f64,
    pub quantizer: String,
    pub block: usize,
    /// Virtual-channel index of the logged coefficient.
    pub index: usize,
    pub w_true: Complex64,
    pub w_hat: Complex64,
    pub sigma: f64,
    pub trigger: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<MetricRow>,
    pub track_log: Vec<TrackLogRow>,
    /// Failed (trial, SNR, quantizer) cells, already logged.
    pub failures: usize,
}

/// Result of one trial for one SNR and quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    /// `(MSE_alpha, MSE_Lambda)` after each EM iteration.
    pub em_trace: Vec<(f64, f64)>,
    pub mse_alpha: f64,
    pub mse_lambda: f64,
    pub alpha_hat: f64,
    pub lambda_hat: Vec<f64>,
    /// Detected support, 0-based.
    pub support: Vec<usize>,
    pub support_exact: bool,
    pub support_size: usize,
    /// Normalized tracking error per tracked block.
    pub mse_w_blocks: Vec<f64>,
    pub track_log: Vec<TrackLogRow>,
}

impl TrialOutcome {
    pub fn mse_w(&self) -> f64 {
        mean(&self.mse_w_blocks).unwrap_or(f64::NAN)
    }
}

pub fn quantizer_label(bits: u32, inference: Inference) -> String {
    match (bits, inference) {
        (0, _) => "none".to_string(),
        (b, Inference::Exact) => format!("uniform-{b}"),
        (b, Inference::Pdq) => format!("pdq-{b}"),
    }
}

/// Inference-side description of a converter with `bits` bits fed with
/// samples of power `input_power`.
pub fn inference_spec(config: &ExperimentConfig, bits: u32, input_power: f64) -> Result<QuantizerSpec> {
    if bits == 0 {
        return Ok(QuantizerSpec::None);
    }
    let step = match config.quantizer.step {
        Some(s) => s,
        None => loading_step(bits, input_power)?,
    };
    Ok(match config.quantizer.inference {
        Inference::Exact => QuantizerSpec::Uniform { bits, step },
        Inference::Pdq => QuantizerSpec::Pdq {
            bits,
            step,
            rho: config.rho_table()?.get(bits)?,
            input_power,
        },
    })
}

/// Runs one trial of `config` at one SNR and bit depth.
pub fn run_trial(config: &ExperimentConfig, trial: usize, snr_db: f64, bits: u32) -> Result<TrialOutcome> {
    let trial_seed = stream_seed(config.seed, trial as u64);
    let mut ch_rng = seeded(stream_seed(trial_seed, tags::CHANNEL));
    let mut pilot_rng = seeded(stream_seed(trial_seed, tags::PILOTS));
    let mut noise_rng = seeded(stream_seed(trial_seed, tags::NOISE));
    let pilot_power = 10f64.powf(snr_db / 10.0);
    let (n, m) = (config.n, config.m);

    let truth = sample_sparse_params(n, config.width(), config.alpha()?, &mut ch_rng)?;
    let tracked = if config.scenario.needs_tracking() {
        config.track_blocks
    } else {
        0
    };
    let path = gen_ar_path(&truth, m + tracked, &mut ch_rng)?;
    let energy: f64 = truth.lambda.iter().sum();

    // Learning phase.
    let learn_power = pilot_power * energy / (config.p * n) as f64 + NOISE_VAR;
    let spec = inference_spec(config, bits, learn_power)?;
    let adc = spec.adc();
    let mut blocks = Vec::with_capacity(m);
    for k in 0..m {
        let training = make_training_matrix(n, config.p, pilot_power, &mut pilot_rng)?;
        let obs = observe_block(&path.block(k), &training, NOISE_VAR, &mut noise_rng)?;
        let y = obs
            .q
            .iter()
            .map(|&v| quantize(v, &adc, &mut noise_rng))
            .collect::<Result<Vec<_>>>()?;
        blocks.push(BlockData {
            meas: Measurement::new(obs.b),
            y,
        });
    }
    let em_config = EmConfig {
        max_em_iters: config.em_iters,
        damping: DampingConfig {
            max_iters: config.estep_rounds,
            ..DampingConfig::default()
        },
        tol_param: 0.0,
        ..EmConfig::default()
    };
    let init = ModelParams::new(ALPHA_MAX, vec![1.0; n])?;
    let fit = em_fit(&blocks, &spec, NOISE_VAR, &em_config, &init, Some(&truth))?;
    let em_trace: Vec<(f64, f64)> = fit
        .trace
        .iter()
        .map(|r| (r.mse_alpha.unwrap_or(f64::NAN), r.mse_lambda.unwrap_or(f64::NAN)))
        .collect();
    let (mse_alpha, mse_lambda) = *em_trace.last().expect("EM ran at least once");
    let support = kmeans_support(&fit.params.lambda)?;
    let mut outcome = TrialOutcome {
        em_trace,
        mse_alpha,
        mse_lambda,
        alpha_hat: fit.params.alpha,
        lambda_hat: fit.params.lambda.clone(),
        support: support.indices.clone(),
        support_exact: support.indices == path.true_support,
        support_size: support.len(),
        mse_w_blocks: Vec::new(),
        track_log: Vec::new(),
    };
    if tracked == 0 {
        return Ok(outcome);
    }

    // Tracking phase.
    let o = &support.indices;
    let p_t = config.p_t.unwrap_or(o.len()).max(o.len());
    let mut tp_rng = seeded(stream_seed(trial_seed, tags::TRACK_PILOTS));
    let mut tn_rng = seeded(stream_seed(trial_seed, tags::TRACK_NOISE));
    let training = build_reduced_training(o.len(), p_t, pilot_power, &mut tp_rng)?;
    let meas = training.measurement();
    let on_support: f64 = o.iter().map(|&i| truth.lambda[i]).sum();
    let track_power = pilot_power * on_support / (p_t * p_t) as f64 + NOISE_VAR;
    let track_spec = inference_spec(config, bits, track_power)?;
    let reduced = restrict_params(&fit.params, o)?;
    let damping = DampingConfig {
        max_iters: config.track_iters,
        ..tracking_damping()
    };
    let logged = (0..o.len())
        .max_by(|&a, &b| reduced.lambda[a].total_cmp(&reduced.lambda[b]))
        .expect("support is non-empty");
    let mut detector = MismatchDetector::new(DETECTOR_WINDOW, DETECTOR_THRESHOLD)?;
    let mut state = TrackState::new(&reduced);
    let label = quantizer_label(bits, config.quantizer.inference);
    for k in m..m + tracked {
        let h = path.block(k);
        let w = DVector::from_iterator(o.len(), o.iter().map(|&i| h[i]));
        let y = simulate_tracking_observation(&w, &training, NOISE_VAR, &track_spec, &mut tn_rng)?;
        let (out, next) = track_step(&y, &meas, &reduced, &state, &track_spec, NOISE_VAR, &damping)?;
        state = next;
        let mut full = DVector::zeros(n);
        for (j, &i) in o.iter().enumerate() {
            full[i] = out.w_hat[j];
        }
        let den = h.norm_squared();
        outcome.mse_w_blocks.push(if den > 0.0 {
            (&full - &h).norm_squared() / den
        } else {
            f64::NAN
        });
        if config.scenario == Scenario::TrackingExample {
            let trigger = detector.observe(&y, &meas, &out.predicted, &track_spec, NOISE_VAR)?;
            outcome.track_log.push(TrackLogRow {
                snr_db,
                quantizer: label.clone(),
                block: k - m + 1,
                index: o[logged],
                w_true: w[logged],
                w_hat: out.w_hat[logged],
                sigma: out.sigma[logged],
                trigger,
            });
        }
    }
    Ok(outcome)
}

/// Runs all trials of every (SNR, bit depth) cell in parallel and aggregates
/// them. Failed cells are logged and left out of the aggregates.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let cells: Vec<(f64, u32)> = config
        .snr_db
        .iter()
        .flat_map(|&s| config.bits.iter().map(move |&b| (s, b)))
        .collect();
    let per_trial: Vec<Vec<Result<TrialOutcome>>> = (0..config.num_trials)
        .into_par_iter()
        .map(|t| cells.iter().map(|&(s, b)| run_trial(config, t, s, b)).collect())
        .collect();

    let mut output = ExperimentOutput::default();
    for (c, &(snr, bits)) in cells.iter().enumerate() {
        let mut ok = Vec::new();
        for (t, results) in per_trial.iter().enumerate() {
            match &results[c] {
                Ok(o) => ok.push(o),
                Err(e) => {
                    log::warn!("trial {t} at {snr} dB, {bits} bits failed: {e}");
                    output.failures += 1;
                }
            }
        }
        if ok.is_empty() {
            continue;
        }
        let label = quantizer_label(bits, config.quantizer.inference);
        aggregate(config, snr, bits, &label, &ok, &mut output);
    }
    Ok(output)
}

fn aggregate(
    config: &ExperimentConfig,
    snr: f64,
    bits: u32,
    label: &str,
    trials: &[&TrialOutcome],
    output: &mut ExperimentOutput,
) {
    let scenario = config.scenario;
    let mut push = |x: f64, metric: &str, statistic: &str, num: usize, value: f64, value_db: f64| {
        output.rows.push(MetricRow {
            scenario: scenario.name().to_string(),
            snr_db: snr,
            quantizer: label.to_string(),
            x_name: scenario.x_name().to_string(),
            x,
            metric: metric.to_string(),
            statistic: statistic.to_string(),
            num_trials: num,
            value,
            value_db,
        });
    };
    let mut stats = |x: f64, metric: &str, values: Vec<f64>| {
        let values: Vec<f64> = values.into_iter().filter(|v| v.is_finite()).collect();
        if let (Some(md), Some(mn)) = (median(&values), mean(&values)) {
            push(x, metric, "median", values.len(), md, to_db(md));
            push(x, metric, "mean", values.len(), mn, to_db(mn));
        }
    };
    let n = trials.len();
    match scenario {
        Scenario::EmConvergence => {
            let iters = trials.iter().map(|t| t.em_trace.len()).min().unwrap_or(0);
            for k in 0..iters {
                stats((k + 1) as f64, "mse_alpha", trials.iter().map(|t| t.em_trace[k].0).collect());
                stats((k + 1) as f64, "mse_lambda", trials.iter().map(|t| t.em_trace[k].1).collect());
            }
        }
        Scenario::MseVsSnr | Scenario::MseVsBits => {
            let x = if scenario == Scenario::MseVsSnr { snr } else { bits as f64 };
            stats(x, "mse_alpha", trials.iter().map(|t| t.mse_alpha).collect());
            stats(x, "mse_lambda", trials.iter().map(|t| t.mse_lambda).collect());
            stats(x, "mse_w", trials.iter().map(|t| t.mse_w()).collect());
            let rate = trials.iter().filter(|t| t.support_exact).count() as f64 / n as f64;
            push(x, "support_recovery", "rate", n, rate, to_db(rate));
        }
        Scenario::TrackingExample | Scenario::MseVsBlock => {
            let blocks = trials.iter().map(|t| t.mse_w_blocks.len()).min().unwrap_or(0);
            for k in 0..blocks {
                stats((k + 1) as f64, "mse_w", trials.iter().map(|t| t.mse_w_blocks[k]).collect());
            }
            if scenario == Scenario::TrackingExample {
                let log = &trials[0].track_log;
                let mag_db = |v: f64| if v == 0.0 { -120.0 } else { (20.0 * v.abs().log10()).max(-120.0) };
                for r in log {
                    let x = r.block as f64;
                    push(x, "w_true_re", "trial0", 1, r.w_true.re, mag_db(r.w_true.re));
                    push(x, "w_hat_re", "trial0", 1, r.w_hat.re, mag_db(r.w_hat.re));
                    push(x, "w_true_im", "trial0", 1, r.w_true.im, mag_db(r.w_true.im));
                    push(x, "w_hat_im", "trial0", 1, r.w_hat.im, mag_db(r.w_hat.im));
                }
                output.track_log.extend(log.iter().cloned());
            }
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the metric CSV, preceded by the version and timestamp comment.
pub fn write_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    writeln!(file, "# chantrack {} generated_at={stamp}", env!("CARGO_PKG_VERSION")).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            fmt_f64(r.snr_db),
            r.quantizer.clone(),
            r.x_name.clone(),
            fmt_f64(r.x),
            r.metric.clone(),
            r.statistic.clone(),
            r.num_trials.to_string(),
            fmt_f64(r.value),
            fmt_f64(r.value_db),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_metric_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn series_key(r: &MetricRow) -> String {
    format!("{}@{}dB:{}:{}", r.quantizer, r.snr_db, r.metric, r.statistic)
}

/// Plot-data table: one row per x, one column per series. MSE series hold
/// medians in dB; tracking traces hold raw values.
pub fn plot_table(rows: &[MetricRow]) -> String {
    let keep = |r: &&MetricRow| r.statistic == "median" || r.statistic == "trial0" || r.statistic == "rate";
    let mut series: Vec<String> = Vec::new();
    let mut table: BTreeMap<u64, BTreeMap<String, f64>> = BTreeMap::new();
    let mut xs: Vec<f64> = Vec::new();
    for r in rows.iter().filter(keep) {
        let key = series_key(r);
        if !series.contains(&key) {
            series.push(key.clone());
        }
        if !xs.contains(&r.x) {
            xs.push(r.x);
        }
        let v = if r.statistic == "median" { r.value_db } else { r.value };
        table.entry(r.x.to_bits()).or_default().insert(key, v);
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let x_name = rows.first().map_or("x", |r| r.x_name.as_str());
    let mut out = String::new();
    if let Some(r) = rows.first() {
        out.push_str(&format!("# {} ({})\n", r.scenario, x_name));
    }
    out.push_str(x_name);
    for s in &series {
        out.push(' ');
        out.push_str(s);
    }
    out.push('\n');
    for x in xs {
        out.push_str(&format!("{x}"));
        let cells = &table[&x.to_bits()];
        for s in &series {
            match cells.get(s) {
                Some(v) => out.push_str(&format!(" {v:.6e}")),
                None => out.push_str(" nan"),
            }
        }
        out.push('\n');
    }
    out
}

/// Per-block tracking log CSV.
pub fn write_track_log(path: &Path, log: &[TrackLogRow]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "snr_db", "quantizer", "block", "index", "w_true_re", "w_true_im", "w_hat_re", "w_hat_im",
        "sigma", "trigger",
    ])
    .map_err(csv_err)?;
    for r in log {
        w.write_record([
            fmt_f64(r.snr_db),
            r.quantizer.clone(),
            r.block.to_string(),
            r.index.to_string(),
            fmt_f64(r.w_true.re),
            fmt_f64(r.w_true.im),
            fmt_f64(r.w_hat.re),
            fmt_f64(r.w_hat.im),
            fmt_f64(r.sigma),
            (r.trigger as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `<scenario>.csv`, `<scenario>.dat` and, when present,
/// `<scenario>_log.csv` into `dir`. Returns the written paths.
pub fn emit_outputs(scenario: Scenario, output: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_path = dir.join(format!("{}.csv", scenario.name()));
    write_metric_csv(&csv_path, &output.rows)?;
    let dat_path = dir.join(format!("{}.dat", scenario.name()));
    fs::write(&dat_path, plot_table(&output.rows)).map_err(io_err(&dat_path))?;
    let mut paths = vec![csv_path, dat_path];
    if !output.track_log.is_empty() {
        let log_path = dir.join(format!("{}_log.csv", scenario.name()));
        write_track_log(&log_path, &output.track_log)?;
        paths.push(log_path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(scenario: Scenario) -> ExperimentConfig {
        ExperimentConfig {
            n: 8,
            m: 4,
            p: 4,
            num_trials: 3,
            track_blocks: 5,
            em_iters: 3,
            estep_rounds: 5,
            track_iters: 5,
            snr_db: vec![15.0],
            bits: vec![0, 3],
            ..ExperimentConfig::defaults(scenario)
        }
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("fig5".parse::<Scenario>().is_err());
    }

    #[test]
    fn patch_precedence() {
        let file = ConfigPatch::from_json(r#"{"scenario": "mse_vs_snr", "seed": 3, "n": 16}"#).unwrap();
        let cli = ConfigPatch {
            seed: Some(9),
            ..ConfigPatch::default()
        };
        let c = file.merged(cli).resolve().unwrap();
        assert_eq!((c.seed, c.n, c.p, c.m), (9, 16, 4, 16));
        assert!(ConfigPatch::from_json(r#"{"scenario": "mse_vs_snr", "bogus": 1}"#).is_err());
        assert!(ConfigPatch::default().resolve().is_err());
        let bad = ConfigPatch::from_json(r#"{"scenario": "mse_vs_snr", "snr_db": []}"#).unwrap();
        assert!(matches!(bad.resolve(), Err(Error::Config(_))));
        let paper = ConfigPatch::from_json(r#"{"scenario": "em_convergence", "paper_scale": true}"#).unwrap();
        assert_eq!(paper.resolve().unwrap().n, 128);
    }

    #[test]
    fn zero_trials_give_no_rows() {
        let c = ExperimentConfig {
            num_trials: 0,
            ..tiny(Scenario::MseVsSnr)
        };
        let out = run_experiment(&c).unwrap();
        assert!(out.rows.is_empty() && out.failures == 0);
    }

    #[test]
    fn every_scenario_runs() {
        for s in Scenario::ALL {
            let out = run_experiment(&tiny(s)).unwrap();
            assert_eq!(out.failures, 0, "{s}");
            assert!(!out.rows.is_empty(), "{s}");
            assert!(out.rows.iter().all(|r| r.value_db.is_finite() && r.scenario == s.name()));
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let out = run_experiment(&tiny(Scenario::MseVsBits)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_outputs(Scenario::MseVsBits, &out, dir.path()).unwrap();
        assert_eq!(read_metric_csv(&paths[0]).unwrap(), out.rows);
        let text = fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), CSV_HEADER.join(","));
    }

    #[test]
    fn empty_rows_give_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        write_metric_csv(&p, &[]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 2);
        assert!(read_metric_csv(&p).unwrap().is_empty());
    }
}
