//! Fixtures shared by the benchmarks in `benches/`.

use chantrack_core::channel::{gen_ar_path, make_training_matrix, observe_block, sample_sparse_params};
use chantrack_core::em::BlockData;
use chantrack_core::quantizer::quantize;
use chantrack_core::random::seeded;
use chantrack_core::tracker::{build_reduced_training, simulate_tracking_observation, ReducedTraining};
use chantrack_core::{Measurement, ModelParams, Observation, QuantizerSpec, Result};

pub const ALPHA: f64 = 0.997_470_200_761_883_2;
pub const NOISE_VAR: f64 = 1.0;

/// Learning-phase data: `m` blocks of `p` pilots on `n` antennas.
pub fn learning_fixture(n: usize, m: usize, p: usize, snr_db: f64, spec: &QuantizerSpec) -> Result<(Vec<BlockData>, ModelParams)> {
    let mut rng = seeded(42);
    let truth = sample_sparse_params(n, 1, ALPHA, &mut rng)?;
    let path = gen_ar_path(&truth, m, &mut rng)?;
    let pilot_power = 10f64.powf(snr_db / 10.0);
    let adc = spec.adc();
    let mut blocks = Vec::with_capacity(m);
    for k in 0..m {
        let t = make_training_matrix(n, p, pilot_power, &mut rng)?;
        let obs = observe_block(&path.block(k), &t, NOISE_VAR, &mut rng)?;
        let y = obs
            .q
            .iter()
            .map(|&v| quantize(v, &adc, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        blocks.push(BlockData {
            meas: Measurement::new(obs.b),
            y,
        });
    }
    Ok((blocks, truth))
}

/// One tracking observation on an `o`-coefficient support with `o` pilots.
pub fn tracking_fixture(o: usize, snr_db: f64) -> Result<(ModelParams, ReducedTraining, Vec<Observation>)> {
    let mut rng = seeded(43);
    let params = ModelParams::new(ALPHA, vec![1.0; o])?;
    let path = gen_ar_path(&params, 1, &mut rng)?;
    let tr = build_reduced_training(o, o, 10f64.powf(snr_db / 10.0), &mut rng)?;
    let y = simulate_tracking_observation(&path.block(0), &tr, NOISE_VAR, &QuantizerSpec::None, &mut rng)?;
    Ok((params, tr, y))
}
