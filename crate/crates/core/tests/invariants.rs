//! Property tests over the tokenizers, sequence layout, file formats and
//! metric formulas.

mod support;

use drivewm::backbone::{Frontend, SequenceConfig, CHUNK_LEN, CONTINUATION_LEN};
use drivewm::config::{Config, DEFAULTS};
use drivewm::eval::{ade, pdms, swept_min_distance, SubScoresV1};
use drivewm::gridworld::{decode_dataset, encode_dataset, Trajectory, HORIZON, WORKSPACE_BOUND};
use drivewm::tensor::{decode_checkpoint, encode_checkpoint, CheckpointEntry};
use drivewm::tokenizers::{ActionTokenizer, ACTION_BASE, ACTION_TOKENS, COEFFS};
use proptest::prelude::*;
use support::*;

fn trajectory(bound: f64) -> impl Strategy<Value = Trajectory> {
    proptest::array::uniform6(proptest::array::uniform2(-bound..bound)).prop_map(Trajectory)
}

fn in_range_case() -> impl Strategy<Value = (f64, Trajectory)> {
    (1.0f64..20.0).prop_flat_map(|gamma| {
        let b = ActionTokenizer::new(gamma)
            .unwrap()
            .unclamped_bound()
            .min(WORKSPACE_BOUND);
        (Just(gamma), trajectory(b))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn round_trip_ade_within_rms_bound((gamma, t) in in_range_case()) {
        let tok = ActionTokenizer::new(gamma).unwrap();
        let ids = tok.tokenize(&t).unwrap();
        prop_assert!(ids.iter().all(|&i| (ACTION_BASE..ACTION_BASE + ACTION_TOKENS).contains(&i)));
        let back = tok.detokenize(&ids).unwrap();
        let e = ade(&back.0, &t.0).unwrap();
        prop_assert!(e <= tok.error_bound() + 1e-12, "ade {e} over {}", tok.error_bound());
    }

    #[test]
    fn requantising_a_reconstruction_is_a_fixed_point((gamma, t) in in_range_case()) {
        let tok = ActionTokenizer::new(gamma).unwrap();
        let ids = tok.tokenize(&t).unwrap();
        let back = tok.detokenize(&ids).unwrap();
        if back.in_bounds(WORKSPACE_BOUND) {
            prop_assert_eq!(tok.tokenize(&back).unwrap(), ids);
        }
    }

    #[test]
    fn out_of_workspace_trajectories_are_rejected(i in 0..HORIZON, excess in 1e-6f64..50.0) {
        let mut t = Trajectory::zeros();
        t.0[i][1] = WORKSPACE_BOUND + excess;
        prop_assert!(ActionTokenizer::new(3.5).unwrap().tokenize(&t).is_err());
    }

    #[test]
    fn pdms_stays_in_unit_interval_and_rises_with_progress(
        nc in prop::sample::select(vec![0.0, 0.5, 1.0]),
        dac in prop::sample::select(vec![0.0, 1.0]),
        ttc in prop::sample::select(vec![0.0, 1.0]),
        comfort in 0.0f64..=1.0,
        ep in 0.0f64..0.9,
    ) {
        let s = SubScoresV1 { nc, dac, ttc, comfort, ep };
        let p = pdms(&s).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        let better = pdms(&SubScoresV1 { ep: ep + 0.1, ..s }).unwrap();
        prop_assert!(better >= p);
    }

    #[test]
    fn swept_distance_is_symmetric_and_below_sampled_gaps(
        a in proptest::array::uniform7(proptest::array::uniform2(-30.0f64..30.0)),
        b in proptest::array::uniform7(proptest::array::uniform2(-30.0f64..30.0)),
    ) {
        let d = swept_min_distance(&a, &b);
        prop_assert!((d - swept_min_distance(&b, &a)).abs() < 1e-9);
        for (p, q) in a.iter().zip(&b) {
            prop_assert!(d <= ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() + 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trips_at_f64(
        tensors in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 1..20), 1..5),
    ) {
        let entries: Vec<CheckpointEntry> = tensors
            .into_iter()
            .enumerate()
            .map(|(i, values)| CheckpointEntry { name: format!("t.{i}"), shape: vec![values.len()], values })
            .collect();
        let back = decode_checkpoint(&encode_checkpoint::<f64>(&entries).unwrap()).unwrap();
        prop_assert_eq!(back, entries);
    }

    #[test]
    fn config_echo_round_trips(picks in prop::collection::vec((0..DEFAULTS.len(), 0u32..1000), 0..6)) {
        let mut c = Config::default();
        for (k, v) in picks {
            let (key, default) = DEFAULTS[k];
            // Only numeric keys take an arbitrary integer.
            if default.parse::<f64>().is_ok() {
                c.set(key, &v.to_string()).unwrap();
            }
        }
        let again = Config::from_text(&c.echo()).unwrap();
        prop_assert_eq!(again.echo(), c.echo());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dataset_round_trips(n in 16usize..40, seed in 0u64..1000) {
        let recs = records(n, seed);
        let back = decode_dataset(&encode_dataset(&recs).unwrap()).unwrap();
        prop_assert_eq!(back, recs);
    }

    #[test]
    fn sequence_layout_matches_chunk_arithmetic(history in 1usize..=3, interval in prop::sample::select(vec![0.0, 0.5, 1.0]), pick in 0usize..1000) {
        prop_assume!(history == 1 || interval > 0.0);
        let fx = fixture(Frontend::Discrete);
        let cfg = SequenceConfig::new(history, interval, Frontend::Discrete).unwrap();
        let targets = fx.corpus.targets(&cfg, false);
        prop_assume!(!targets.is_empty());
        let t = targets[pick % targets.len()];
        let ctx = fx.corpus.sequence(t, &cfg, false).unwrap();
        let full = fx.corpus.sequence(t, &cfg, true).unwrap();
        prop_assert_eq!(ctx.len(), 1 + history * CHUNK_LEN);
        prop_assert_eq!(full.len(), ctx.len() + CONTINUATION_LEN);
        prop_assert_eq!(&full.ids[..ctx.len()], &ctx.ids[..]);
        prop_assert_eq!(full.action_targets().len(), COEFFS);
    }
}
