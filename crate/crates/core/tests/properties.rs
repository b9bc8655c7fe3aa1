use chantrack_core::channel::{gen_ar_path, make_training_matrix, observe_block};
use chantrack_core::em::{e_step, BlockData};
use chantrack_core::oracle::{exhaustive_two_means, rts_smoother};
use chantrack_core::quantizer::{code_range, quantize_axis, thresholds};
use chantrack_core::random::seeded;
use chantrack_core::special::trunc_normal_mean;
use chantrack_core::support::kmeans_support;
use chantrack_core::{DampingConfig, Measurement, ModelParams, Observation, QuantizerSpec};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kmeans_finds_the_optimal_split(
        low in prop::collection::vec(0.0f64..0.5, 1..8),
        high in prop::collection::vec(0.0f64..5.0, 1..5),
    ) {
        let lambda: Vec<f64> = low.into_iter().chain(high).collect();
        prop_assume!(lambda.iter().any(|&l| l != lambda[0]));
        prop_assert_eq!(kmeans_support(&lambda).unwrap().indices, exhaustive_two_means(&lambda).unwrap());
    }

    #[test]
    fn codes_land_in_their_cells(x in -20.0f64..20.0, bits in 1u32..9, step in 0.05f64..2.0) {
        let k = quantize_axis(x, bits, step);
        let (lo, hi) = code_range(bits);
        prop_assert!(lo <= k && k <= hi);
        let (a, b) = thresholds(k, bits, step).unwrap();
        prop_assert!(a <= x && x < b);
    }

    #[test]
    fn truncated_mean_is_inside_and_monotone(
        mu in -10.0f64..10.0,
        sd in 0.1f64..3.0,
        a in -8.0f64..8.0,
        width in 1e-3f64..6.0,
    ) {
        let b = a + width;
        let m = trunc_normal_mean(mu, sd, a, b).unwrap();
        prop_assert!(a <= m && m <= b);
        let shifted = trunc_normal_mean(mu + 0.1, sd, a, b).unwrap();
        prop_assert!(shifted >= m - 1e-12 * (1.0 + m.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estep_matches_smoother_on_dense_models(
        seed in 0u64..10_000,
        alpha in 0.3f64..0.95,
        lambda in prop::collection::vec(0.3f64..2.0, 4),
        snr_db in 5.0f64..20.0,
    ) {
        let (n, blocks_n, p) = (4, 5, 4);
        let mut rng = seeded(seed);
        let params = ModelParams::new(alpha, lambda).unwrap();
        let path = gen_ar_path(&params, blocks_n, &mut rng).unwrap();
        let (mut blocks, mut ys, mut bs) = (vec![], vec![], vec![]);
        for m in 0..blocks_n {
            let t = make_training_matrix(n, p, 10f64.powf(snr_db / 10.0), &mut rng).unwrap();
            let obs = observe_block(&path.block(m), &t, 1.0, &mut rng).unwrap();
            blocks.push(BlockData {
                meas: Measurement::new(obs.b.clone()),
                y: obs.q.iter().map(|v| Observation::Analog(*v)).collect(),
            });
            ys.push(obs.q);
            bs.push(obs.b);
        }
        let damping = DampingConfig { max_iters: 200, ..DampingConfig::default() };
        let (stats, _) = e_step(&blocks, &params, &QuantizerSpec::None, 1.0, &damping, None).unwrap();
        let smooth = rts_smoother(&ys, &bs, &params, 1.0).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for m in 0..blocks_n {
            num += (&stats.h_hat[m] - &smooth.blocks[m].mean).norm_squared();
            den += smooth.blocks[m].mean.norm_squared();
        }
        prop_assert!((num / den).sqrt() < 1e-3, "relative RMSE {}", (num / den).sqrt());
    }
}
