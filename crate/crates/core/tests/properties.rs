use mrn_topology::estimator::{
    ols_estimate, rowwise_estimate, search_range, truth_block, DriftCompensation, FilteredObservations, PatternInput,
    RangeProbe, RowwiseInput, SearchParams, SteadyGeometry,
};
use mrn_topology::experiment::{EpsilonRule, Summary};
use mrn_topology::linalg::{median, quantile};
use mrn_topology::netfile;
use mrn_topology::network::{build_perron, check_stability, random_network, steady_offsets, NetworkSpec};
use mrn_topology::sim::{run_scenario, ScenarioConfig, SimulationTrace};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn network(seed: u64, n: usize) -> NetworkSpec {
    random_network(&mut ChaCha8Rng::seed_from_u64(seed), n, 0.3)
}

fn open_view(sigma: f64, horizon: usize, spread: f64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig {
        noise_std: sigma,
        observation_range: 1e9,
        horizon,
        ..ScenarioConfig::default()
    };
    cfg.initial.spread = spread;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perron_rows_sum_to_one(seed in any::<u64>(), n in 2usize..14) {
        let w = build_perron(&network(seed, n)).unwrap();
        for s in w.row_sums() {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert!(w.matrix().iter().all(|&x| x >= -1e-15));
    }

    #[test]
    fn generated_networks_reach_consensus(seed in any::<u64>(), n in 2usize..14) {
        let report = check_stability(&build_perron(&network(seed, n)).unwrap());
        prop_assert_eq!(report.unit_multiplicity, 1);
        prop_assert!(report.second_modulus < 1.0);
    }

    #[test]
    fn steady_offsets_translate_rigidly(seed in any::<u64>(), n in 2usize..10) {
        let spec = network(seed, n);
        let w = build_perron(&spec).unwrap();
        let s = steady_offsets(&spec, &w).unwrap();
        let mut cfg = open_view(0.0, 3, 0.0);
        cfg.initial.lag = 0.0;
        let trace = run_scenario(&spec, &cfg, seed).unwrap();
        let c = spec.velocity_per_step();
        for (k, state) in trace.true_states.iter().enumerate() {
            for (p, q) in state.iter().zip(&s) {
                prop_assert!((p[0] - q[0] - c[0] * k as f64).abs() < 1e-9);
                prop_assert!((p[1] - q[1] - c[1] * k as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn epsilon_rule_is_monotone_and_floored(
        factor in 0.01f64..4.0, floor in 1e-6f64..1e-1, a in 0.0f64..1.0, b in 0.0f64..1.0,
    ) {
        let rule = EpsilonRule { factor, floor };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rule.epsilon(lo) <= rule.epsilon(hi));
        prop_assert!(rule.epsilon(lo) >= floor);
        prop_assert!(rule.epsilon(hi) >= factor * hi - 1e-15);
    }

    #[test]
    fn summary_quartiles_are_ordered(values in prop::collection::vec(-1e3f64..1e3, 1..60)) {
        let s = Summary::of(&values);
        prop_assert!(s.q1 <= s.median && s.median <= s.q3);
        let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| (a.0.min(v), a.1.max(v)));
        prop_assert!(lo <= s.q1 && s.q3 <= hi);
        let mut v = values.clone();
        prop_assert_eq!(median(&mut v), quantile(&mut values.clone(), 0.5));
    }

    #[test]
    fn binary_trace_round_trips(seed in any::<u64>(), sigma in 0.0f64..0.3, horizon in 1usize..60) {
        let net = netfile::fig3();
        let mut cfg = net.scenario.clone();
        cfg.noise_std = sigma;
        cfg.horizon = horizon;
        let trace = run_scenario(&net.spec, &cfg, seed).unwrap();
        let mut bytes = Vec::new();
        trace.write_binary(&mut bytes).unwrap();
        prop_assert_eq!(SimulationTrace::read_binary(bytes.as_slice()).unwrap(), trace);
    }

    #[test]
    fn simulation_is_a_function_of_the_seed(seed in any::<u64>()) {
        let net = netfile::fig3();
        let mut cfg = net.scenario.clone();
        cfg.horizon = 30;
        prop_assert_eq!(run_scenario(&net.spec, &cfg, seed).unwrap(), run_scenario(&net.spec, &cfg, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noiseless_ols_recovers_every_generated_network(seed in any::<u64>(), n in 2usize..10) {
        let spec = network(seed, n);
        prop_assume!(check_stability(&build_perron(&spec).unwrap()).passes);
        let trace = run_scenario(&spec, &open_view(0.0, n + 2, 3.0), seed).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let pin = PatternInput::exact(&spec, &all).unwrap();
        let obs = FilteredObservations::build(&trace.frames, &all, &all, &pin, 0, n + 1, DriftCompensation::AllRows).unwrap();
        let Ok(est) = ols_estimate(&obs) else {
            // A trajectory confined to a subspace leaves the regression rank deficient.
            return Ok(());
        };
        prop_assert!(est.error(&truth_block(&spec, &all, &all).unwrap()).spectral < 1e-7);
    }

    #[test]
    fn rowwise_reduces_to_ols_with_full_visibility(seed in any::<u64>(), n in 2usize..10, sigma in 0.01f64..0.2) {
        let spec = network(seed, n);
        let trace = run_scenario(&spec, &open_view(sigma, 80, 5.0), seed).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let pin = PatternInput::exact(&spec, &all).unwrap();
        let obs = FilteredObservations::build(&trace.frames, &all, &all, &pin, 0, 70, DriftCompensation::AllRows).unwrap();
        let ols = ols_estimate(&obs).unwrap();
        let geometry = SteadyGeometry::measure(&trace.frames, &trace.observer, &all, trace.final_step(), 10).unwrap();
        let first = vec![0; n];
        let input = RowwiseInput {
            frames: &trace.frames,
            cols: &all,
            first_visible: &first,
            rows: &all,
            pattern: &pin,
            geometry: &geometry,
            end: 70,
            compensation: DriftCompensation::AllRows,
        };
        let rw = rowwise_estimate(&input, f64::INFINITY).unwrap();
        let scale = ols.matrix.abs().max().max(1.0);
        prop_assert!((&rw.matrix - &ols.matrix).abs().max() / scale < 1e-9);
    }

    #[test]
    fn range_search_stays_in_its_bracket(seed in 0u64..1000, lower in 0.0f64..4.0, sigma in 0.02f64..0.15) {
        let net = netfile::fig3();
        let mut cfg = net.scenario.clone();
        cfg.noise_std = sigma;
        cfg.horizon = 900;
        let trace = run_scenario(&net.spec, &cfg, seed).unwrap();
        let cols: Vec<usize> = (3..11).collect();
        let start = mrn_topology::steady::constant_subset(&trace.frames).unwrap().common_start();
        let count = (trace.final_step() - start).min(200);
        let pin = PatternInput::exact(&net.spec, &cols).unwrap();
        let obs = FilteredObservations::build(&trace.frames, &cols, &cols, &pin, start, count, DriftCompensation::AllRows).unwrap();
        let geometry = SteadyGeometry::measure(&trace.frames, &trace.observer, &cols, trace.final_step(), 100).unwrap();
        let probe = RangeProbe::new(&obs, &geometry, cfg.observation_range, 5.0).unwrap();
        let params = SearchParams { resamples: 20, ..SearchParams::default() };
        let r = search_range(&probe, lower, cfg.observation_range, &params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(r.rc_lower, lower);
        prop_assert!(r.resolution >= 0.0);
        prop_assert!(lower <= r.rc_hat - r.resolution && r.rc_hat <= cfg.observation_range);
        // Probes above the threshold only ever raise the bottom of the bracket.
        for &(rc, f) in &r.history {
            if f > r.threshold {
                prop_assert!(rc <= r.rc_hat - r.resolution + 1e-12);
            } else {
                prop_assert!(rc >= r.rc_hat - 1e-12);
            }
        }
        prop_assert!(r.history.iter().all(|&(rc, _)| lower <= rc && rc <= cfg.observation_range));
    }
}
