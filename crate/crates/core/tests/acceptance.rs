//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p mrn-topology --test acceptance`

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mrn_topology::estimator::{
    ols_estimate, rowwise_estimate, search_range, truth_block, DriftCompensation, FilteredObservations, Method,
    PatternInput, RangeProbe, RowwiseInput, SteadyGeometry,
};
use mrn_topology::excitation::detection_probability;
use mrn_topology::experiment::{
    estimation_stage, excitation_stage, pattern_input, steady_stage, RangeOptions, StageOptions,
};
use mrn_topology::linalg::median;
use mrn_topology::netfile::{self, NetworkFile};
use mrn_topology::network::{build_perron, check_stability, random_network, NetworkSpec};
use mrn_topology::sim::{run_scenario, ScenarioConfig};
use mrn_topology::steady::{constant_subset, speed_confidence_probability, window_speed, SteadyParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Verdict {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, Duration, fn() -> Verdict);

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn fig3_scenario(sigma: f64, horizon: usize) -> (NetworkFile, ScenarioConfig) {
    let net = netfile::fig3();
    let mut cfg = net.scenario.clone();
    cfg.noise_std = sigma;
    cfg.horizon = horizon;
    (net, cfg)
}

fn stages(sigma: f64) -> StageOptions {
    StageOptions {
        sigma: Some(sigma),
        ..StageOptions::default()
    }
}

fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn stable_random_network(seed: u64, n: usize) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let spec = random_network(&mut rng, n, 0.3);
        if check_stability(&build_perron(&spec).unwrap()).passes {
            return spec;
        }
    }
}

fn open_view(spec: &NetworkSpec, sigma: f64, horizon: usize) -> ScenarioConfig {
    let _ = spec;
    ScenarioConfig {
        noise_std: sigma,
        observation_range: 1e9,
        horizon,
        ..ScenarioConfig::default()
    }
}

/// Criterion 1: Noiseless data, exact pattern and a range at least the true one
/// recover the weights from `n_f + 1` observations.
fn exact_recovery() -> Verdict {
    let mut worst = 0.0_f64;
    for seed in 0..20 {
        let n = 5 + (seed as usize % 7);
        let spec = stable_random_network(seed, n);
        let trace = run_scenario(&spec, &open_view(&spec, 0.0, n + 2), seed).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let pin = PatternInput::exact(&spec, &all).unwrap();
        let obs =
            FilteredObservations::build(&trace.frames, &all, &all, &pin, 0, n + 1, DriftCompensation::AllRows).unwrap();
        let err = ols_estimate(&obs)
            .unwrap()
            .error(&truth_block(&spec, &all, &all).unwrap());
        worst = worst.max(err.spectral);
    }
    // Partial view: rows within R_f - R_c of the observer, columns all visible.
    let (net, cfg) = fig3_scenario(0.0, 40);
    let trace = run_scenario(&net.spec, &cfg, 1).unwrap();
    let cols: Vec<usize> = (3..11).collect();
    let rows = vec![6, 7, 8];
    let pin = PatternInput::exact(&net.spec, &cols).unwrap();
    let obs = FilteredObservations::build(
        &trace.frames,
        &cols,
        &rows,
        &pin,
        0,
        cols.len() + 1,
        DriftCompensation::AllRows,
    )
    .unwrap();
    let partial = ols_estimate(&obs)
        .unwrap()
        .error(&truth_block(&net.spec, &rows, &cols).unwrap())
        .spectral;
    worst = worst.max(partial);
    verdict(
        worst < 1e-9,
        format!("max spectral error {worst:.2e} over 20 generated networks and the partial-view reference network"),
    )
}

/// Criterion 2: Error decays with the number of observations at a rate in
/// `[-1.5, -0.5]` on a log-log scale.
fn convergence_rate() -> Verdict {
    let mut spec = netfile::fig3().spec;
    spec.control_period = 0.05;
    let rows = vec![6, 7, 8];
    let cols: Vec<usize> = (3..11).collect();
    let ks = [40usize, 80, 160, 260];
    let truth = truth_block(&spec, &rows, &cols).unwrap();
    let per_trial: Vec<Vec<f64>> = (0..120u64)
        .into_par_iter()
        .map(|seed| {
            let mut cfg = open_view(&spec, 0.1, 6600);
            cfg.initial.spread = 100.0;
            let trace = run_scenario(&spec, &cfg, seed).unwrap();
            let pattern = steady_stage(
                &trace,
                &SteadyParams {
                    window: 500,
                    epsilon: 0.08,
                },
            )
            .unwrap();
            let pin = PatternInput {
                speed: pattern.speed,
                shape: cols.iter().map(|&c| pattern.shape_of(c).unwrap()).collect(),
                leader: None,
            };
            ks.iter()
                .map(|&k| {
                    let obs = FilteredObservations::build(
                        &trace.frames,
                        &cols,
                        &rows,
                        &pin,
                        0,
                        k,
                        DriftCompensation::AllRows,
                    )
                    .unwrap();
                    ols_estimate(&obs).unwrap().error(&truth).spectral
                })
                .collect()
        })
        .collect();
    let medians: Vec<f64> = (0..ks.len())
        .map(|g| median(&mut per_trial.iter().map(|t| t[g]).collect::<Vec<_>>()))
        .collect();
    let xs: Vec<f64> = ks.iter().map(|&k| (k as f64).ln()).collect();
    let ys: Vec<f64> = medians.iter().map(|m| m.ln()).collect();
    let slope = fit_slope(&xs, &ys);
    verdict(
        (-1.5..=-0.5).contains(&slope),
        format!("slope {slope:.3}, medians {medians:.4?} over 120 trials"),
    )
}

/// Excitation lower bound on a noiseless run of the reference network.
fn noiseless_lower_bound(seed: u64) -> f64 {
    let (_, trace, pattern) = noiseless_run(seed);
    let st = stages(0.0);
    let (outcome, _) = excitation_stage(&trace, &pattern, &st.excitation_params(0.0)).unwrap();
    outcome.bound().unwrap()
}

fn noiseless_run(
    seed: u64,
) -> (
    NetworkFile,
    mrn_topology::sim::SimulationTrace,
    mrn_topology::steady::SteadyPattern,
) {
    let (net, cfg) = fig3_scenario(0.0, 7000);
    let trace = run_scenario(&net.spec, &cfg, seed).unwrap();
    let pattern = steady_stage(&trace, &stages(0.0).steady_params(0.0)).unwrap();
    (net, trace, pattern)
}

/// Observation window for the bias probes. Without noise the steady tail
/// carries no information, so the window starts in the approach transient.
fn probe_window(frames: &[mrn_topology::sim::ObservationFrame], sigma: f64) -> (usize, usize) {
    if sigma == 0.0 {
        (0, 100)
    } else {
        (constant_subset(frames).unwrap().common_start(), 200)
    }
}

/// Criterion 3: Median asymptotic bias does not grow with the assumed range and is
/// zero without noise once the assumed range covers the true one.
fn range_monotonicity() -> Verdict {
    let r_f = netfile::fig3().scenario.observation_range;
    let lb = noiseless_lower_bound(0);
    let grid: Vec<f64> = (0..=16).map(|i| lb + (r_f - lb) * i as f64 / 16.0).collect();
    let bias_curve = |sigma: f64, trials: u64| -> Vec<Vec<f64>> {
        (0..trials)
            .into_par_iter()
            .map(|seed| {
                let (net, cfg) = fig3_scenario(sigma, 1200);
                let trace = run_scenario(&net.spec, &cfg, seed).unwrap();
                let cols: Vec<usize> = (3..11).collect();
                let geometry =
                    SteadyGeometry::measure(&trace.frames, &trace.observer, &cols, trace.final_step(), 500).unwrap();
                let pin = PatternInput::exact(&net.spec, &cols).unwrap();
                let (start, count) = probe_window(&trace.frames, sigma);
                let obs = FilteredObservations::build(
                    &trace.frames,
                    &cols,
                    &cols,
                    &pin,
                    start,
                    count,
                    DriftCompensation::AllRows,
                )
                .unwrap();
                let probe =
                    RangeProbe::new(&obs, &geometry, cfg.observation_range, net.hints.rc_upper.unwrap()).unwrap();
                let truth = truth_block(&net.spec, probe.aux_rows(), &cols).unwrap();
                grid.iter()
                    .map(|&rc| probe.asymptotic_bias(rc, &truth).unwrap())
                    .collect()
            })
            .collect()
    };
    let mut detail = vec![format!("grid {lb:.2}..{r_f} in 17 points")];
    let mut pass = true;
    for sigma in [0.05, 0.1] {
        let curves = bias_curve(sigma, 60);
        let med: Vec<f64> = (0..grid.len())
            .map(|g| median(&mut curves.iter().map(|c| c[g]).collect::<Vec<_>>()))
            .collect();
        let violations = med.windows(2).filter(|w| w[1] > w[0]).count();
        pass &= violations <= 1;
        detail.push(format!(
            "sigma {sigma}: {violations} increase(s), f_w {:.3} -> {:.3}",
            med[0],
            med[med.len() - 1]
        ));
    }
    let rc = netfile::fig3().spec.interaction_range;
    let noiseless = bias_curve(0.0, 5);
    let worst = noiseless
        .iter()
        .flat_map(|c| grid.iter().zip(c).filter(|(&g, _)| g >= rc).map(|(_, &v)| v))
        .fold(0.0_f64, f64::max);
    pass &= worst < 1e-9;
    detail.push(format!("sigma 0: max f_w beyond R_c {worst:.1e}"));
    verdict(pass, detail.join("; "))
}

/// Criterion 4: At steady state the speed estimate lands within `4 eps / sqrt(L_c)`
/// at least as often as the concentration bound promises.
fn speed_concentration() -> Verdict {
    let mut pass = true;
    let mut detail = Vec::new();
    let window = 500;
    for sigma in [0.05, 0.1] {
        let params = SteadyParams {
            window,
            epsilon: 0.8 * sigma,
        };
        let tol = params.speed_confidence();
        let results: Vec<(f64, usize)> = (0..1000u64)
            .into_par_iter()
            .map(|seed| {
                let (net, cfg) = fig3_scenario(sigma, 4000);
                let trace = run_scenario(&net.spec, &cfg, seed).unwrap();
                let subset = constant_subset(&trace.frames).unwrap();
                let end = trace.frames.len() - 1;
                let speed = window_speed(&trace.frames, &subset.robots, end - window, window).unwrap();
                let c = net.spec.velocity_per_step();
                (
                    (speed[0] - c[0]).abs().max((speed[1] - c[1]).abs()),
                    subset.robots.len(),
                )
            })
            .collect();
        let hits = results.iter().filter(|r| r.0 <= tol).count();
        let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
        let frac = hits as f64 / results.len() as f64;
        let bound = speed_confidence_probability(results[0].1, window, params.epsilon, sigma);
        pass &= frac >= bound;
        detail.push(format!(
            "sigma {sigma}: {hits}/1000 within {tol:.4} (worst {worst:.1e}), bound {bound:.6}"
        ));
    }
    verdict(pass, detail.join("; "))
}

/// Detected indicators split into true and false out-neighbours.
fn excitation_counts(sigma: f64, horizon: usize, seeds: std::ops::Range<u64>) -> (usize, usize, usize, usize) {
    let counts: Vec<(usize, usize, usize, usize)> = seeds
        .into_par_iter()
        .map(|seed| {
            let (net, cfg) = fig3_scenario(sigma, horizon);
            let trace = run_scenario(&net.spec, &cfg, seed).unwrap();
            let st = stages(sigma);
            let pattern = steady_stage(&trace, &st.steady_params(sigma)).unwrap();
            let Ok((outcome, _)) = excitation_stage(&trace, &pattern, &st.excitation_params(sigma)) else {
                return (0, 0, 0, 0);
            };
            let (mut tp, mut fp, mut positives) = (0, 0, 0);
            for s in &outcome.sessions {
                for t in &s.tests {
                    let truly = net.spec.adjacency[(t.robot, s.target)] > 0.0;
                    positives += usize::from(truly);
                    match (t.detected, truly) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        _ => {}
                    }
                }
            }
            (outcome.sessions.len(), tp, fp, positives)
        })
        .collect();
    counts
        .iter()
        .fold((0, 0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2, a.3 + c.3))
}

/// Criterion 5: Detected out-neighbours are real at least as often as the bound
/// promises, and never wrong without noise.
fn out_neighbor_detection() -> Verdict {
    let sigma = 0.05;
    let (sessions, tp, fp, positives) = excitation_counts(sigma, 2500, 0..500);
    let eps = 0.8 * sigma;
    let p1 = speed_confidence_probability(8, 500, eps, sigma);
    let p2 = detection_probability(200, eps, sigma);
    let freq = tp as f64 / (tp + fp).max(1) as f64;
    let (s0, tp0, fp0, _) = excitation_counts(0.0, 7000, 0..40);
    let pass = sessions >= 500 && tp + fp > 0 && freq >= p1 * p2 && fp0 == 0 && tp0 > 0;
    verdict(
        pass,
        format!(
            "sigma {sigma}: {sessions} sessions, {tp} true / {fp} false detections ({positives} true out-neighbours), frequency {freq:.4} vs bound {:.4}; sigma 0: {s0} sessions, {fp0} false positives",
            p1 * p2
        ),
    )
}

/// Criterion 6: The excitation bound never exceeds the true range and the search,
/// with its default noise-floor rule, returns at least the true range less
/// its resolution.
fn range_bound_soundness() -> Verdict {
    let results: Vec<(f64, f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let (net, trace, pattern) = noiseless_run(seed);
            let st = stages(0.0);
            let (outcome, _) = excitation_stage(&trace, &pattern, &st.excitation_params(0.0)).unwrap();
            let lb = outcome.bound().unwrap();
            let frames = trace.passive_frames();
            let cols = pattern.subset.robots.clone();
            let geometry = SteadyGeometry::measure(frames, &trace.observer, &cols, pattern.k_end, st.window).unwrap();
            let (start, count) = probe_window(frames, 0.0);
            let obs = FilteredObservations::build(
                frames,
                &cols,
                &cols,
                &pattern_input(&pattern),
                start,
                count,
                st.compensation,
            )
            .unwrap();
            let r_f = trace.config.observation_range;
            let probe = RangeProbe::new(&obs, &geometry, r_f, net.hints.rc_upper.unwrap()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = search_range(&probe, lb, r_f, &st.search, &mut rng).unwrap();
            (lb, r.rc_hat, r.resolution)
        })
        .collect();
    let rc = netfile::fig3().spec.interaction_range;
    let lb_ok = results.iter().all(|r| r.0 <= rc);
    let hat_ok = results.iter().all(|r| r.1 >= rc - r.2);
    let (min_lb, max_lb) = results
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |a, r| (a.0.min(r.0), a.1.max(r.0)));
    let min_margin = results.iter().map(|r| r.1 + r.2 - rc).fold(f64::INFINITY, f64::min);
    verdict(
        lb_ok && hat_ok,
        format!(
            "20 noiseless trials: lower bound {min_lb:.3}..{max_lb:.3} (R_c {rc}); min (rc_hat + resolution - R_c) {min_margin:.3}"
        ),
    )
}

/// Criterion 7: The range-constrained estimator is no worse than plain OLS in median.
fn constrained_dominance() -> Verdict {
    let pairs: Vec<(f64, f64)> = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let (net, mut cfg) = fig3_scenario(0.1, 7000);
            cfg.initial.spread = 2.0;
            let trace = run_scenario(&net.spec, &cfg, seed).unwrap();
            let st = stages(0.1);
            let pattern = steady_stage(&trace, &st.steady_params(0.1)).unwrap();
            let range = RangeOptions {
                rc_hat: Some(4.5),
                ..RangeOptions::default()
            };
            let r = estimation_stage(&trace, &pattern, None, &range, None, &st, Some(200)).unwrap();
            (
                r.estimate(Method::Constrained).unwrap().1.spectral,
                r.estimate(Method::Ols).unwrap().1.spectral,
            )
        })
        .collect();
    let c = median(&mut pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let o = median(&mut pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let wins = pairs.iter().filter(|p| p.0 <= p.1).count();
    verdict(
        c <= o,
        format!("median constrained {c:.4} vs OLS {o:.4}; constrained no worse in {wins}/100 pairs"),
    )
}

/// Criterion 8: With unobserved in-neighbours the truncated estimator is far off while
/// range-shrink OLS is not.
fn truncated_bias() -> Verdict {
    let (net, cfg) = fig3_scenario(0.0, 800);
    let trace = run_scenario(&net.spec, &cfg, 2).unwrap();
    let cols: Vec<usize> = (3..11).collect();
    let pin = PatternInput::exact(&net.spec, &cols).unwrap();
    let full =
        FilteredObservations::build(&trace.frames, &cols, &cols, &pin, 0, 100, DriftCompensation::AllRows).unwrap();
    let geometry = SteadyGeometry::measure(&trace.frames, &trace.observer, &cols, trace.final_step(), 100).unwrap();
    let rows = geometry.within(cfg.observation_range - net.spec.interaction_range);
    let hidden_inputs = cols
        .iter()
        .any(|&i| net.spec.in_neighbors(i).iter().any(|j| !cols.contains(j)));
    let shrink = ols_estimate(&full.with_rows(&rows).unwrap()).unwrap();
    let shrink_err = shrink.error(&truth_block(&net.spec, &rows, &cols).unwrap()).spectral;
    let trunc = mrn_topology::estimator::truncated_estimate(&full).unwrap();
    let trunc_err = trunc.error(&truth_block(&net.spec, &cols, &cols).unwrap()).spectral;
    let ratio = trunc_err / shrink_err.max(f64::MIN_POSITIVE);
    verdict(
        hidden_inputs && trunc_err > shrink_err && ratio >= 10.0,
        format!(
            "truncated {trunc_err:.3e} vs range-shrink {shrink_err:.3e} (rows {:?}), ratio {ratio:.2e}",
            ids(&rows)
        ),
    )
}

fn ids(r: &[usize]) -> Vec<usize> {
    r.iter().map(|i| i + 1).collect()
}

/// Criterion 9: Row-wise estimation with everything visible from the start and an
/// unbounded range reduces to OLS.
fn rowwise_equivalence() -> Verdict {
    let mut worst = 0.0_f64;
    for seed in 0..20u64 {
        let n = 4 + (seed as usize % 8);
        let spec = stable_random_network(100 + seed, n);
        let mut cfg = open_view(&spec, 0.1, 120);
        cfg.initial.spread = 5.0;
        let trace = run_scenario(&spec, &cfg, seed).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let rows: Vec<usize> = (1..n).collect();
        let pin = PatternInput::exact(&spec, &all).unwrap();
        let geometry = SteadyGeometry::measure(&trace.frames, &trace.observer, &all, trace.final_step(), 50).unwrap();
        let count = 100;
        let obs = FilteredObservations::build(&trace.frames, &all, &rows, &pin, 0, count, DriftCompensation::AllRows)
            .unwrap();
        let ols = ols_estimate(&obs).unwrap();
        let first = vec![0; n];
        let input = RowwiseInput {
            frames: &trace.frames,
            cols: &all,
            first_visible: &first,
            rows: &rows,
            pattern: &pin,
            geometry: &geometry,
            end: count,
            compensation: DriftCompensation::AllRows,
        };
        let rw = rowwise_estimate(&input, f64::INFINITY).unwrap();
        let diff = (&rw.matrix - &ols.matrix).abs().max();
        worst = worst.max(diff / ols.matrix.abs().max().max(1.0));
    }
    verdict(
        worst < 1e-10,
        format!("max relative difference {worst:.2e} over 20 generated networks"),
    )
}

fn run_cli(args: &[&str], out: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_mrn-topo"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn same_dirs(a: &Path, b: &Path) -> Result<usize, String> {
    let mut n = 0;
    for entry in std::fs::read_dir(a).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let x = std::fs::read(a.join(&name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(&name)).map_err(|e| format!("{}: {e}", name.to_string_lossy()))?;
        if x != y {
            return Err(format!("{} differs", name.to_string_lossy()));
        }
        n += 1;
    }
    Ok(n)
}

/// Criterion 10: Every command rerun with the same seed writes identical bytes.
fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let d = |s: &str| tmp.path().join(s);
    let config = d("sweep.toml");
    std::fs::write(
        &config,
        "sigmas = [0.1]\nobservations = [40, 200]\ntrials = 3\nseed = 7\nhorizon = 1500\nspread = 2.0\n",
    )
    .unwrap();
    let trace = d("sim-a").join("trace.bin");
    let trace = trace.to_str().unwrap();
    let cfg = config.to_str().unwrap();
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("sim", vec!["simulate", "--seed", "5", "--horizon", "2500"]),
        ("excite", vec!["excite", trace]),
        ("infer", vec!["infer", trace, "--excite"]),
        ("sweep", vec!["sweep", "--config", cfg]),
    ];
    let mut detail = Vec::new();
    let mut pass = true;
    for (name, args) in &runs {
        let (a, b) = (d(&format!("{name}-a")), d(&format!("{name}-b")));
        if !run_cli(args, &a) || !run_cli(args, &b) {
            pass = false;
            detail.push(format!("{name}: command failed"));
            continue;
        }
        match same_dirs(&a, &b) {
            Ok(n) => detail.push(format!("{name}: {n} files identical")),
            Err(e) => {
                pass = false;
                detail.push(format!("{name}: {e}"));
            }
        }
    }
    let replay = Command::new(env!("CARGO_BIN_EXE_mrn-topo"))
        .arg("replay")
        .arg(d("infer-a"))
        .arg("--out")
        .arg(d("infer-replay"))
        .status()
        .map(|s| s.success())
        .unwrap_or(false);
    pass &= replay;
    detail.push(format!("replay {}", if replay { "identical" } else { "differs" }));
    verdict(pass, detail.join("; "))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("exact recovery", Duration::from_secs(1), exact_recovery),
        ("convergence rate", Duration::from_secs(120), convergence_rate),
        ("range monotonicity", Duration::from_secs(120), range_monotonicity),
        (
            "steady-speed concentration",
            Duration::from_secs(60),
            speed_concentration,
        ),
        (
            "out-neighbour detection",
            Duration::from_secs(300),
            out_neighbor_detection,
        ),
        (
            "range lower bound soundness",
            Duration::from_secs(120),
            range_bound_soundness,
        ),
        (
            "constrained refinement dominance",
            Duration::from_secs(120),
            constrained_dominance,
        ),
        ("truncated-estimator bias", Duration::from_secs(1), truncated_bias),
        ("row-wise equivalence", Duration::from_secs(10), rowwise_equivalence),
        ("determinism", Duration::from_secs(120), determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let v = run();
        let took = t.elapsed();
        let on_time = took <= *budget;
        let pass = v.pass && on_time;
        failed += usize::from(!pass);
        let timing = if on_time {
            format!("{:.2} s", took.as_secs_f64())
        } else {
            format!("{:.2} s, over the {} s budget", took.as_secs_f64(), budget.as_secs())
        };
        println!(
            "{} {:>2} {name}: {} [{timing}]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
