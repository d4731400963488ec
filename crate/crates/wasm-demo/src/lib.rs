//! Browser bindings for the topology-inference pipeline. Every export takes
//! plain numbers plus an optional network file text and returns JSON.

use std::path::Path;

use mrn_topology::estimator::{truth_block, FilteredObservations, Method, RangeProbe, SteadyGeometry};
use mrn_topology::experiment::{estimation_stage, pattern_input, steady_stage, RangeOptions, StageOptions};
use mrn_topology::netfile::{self, NetworkFile};
use mrn_topology::sim::{run_scenario, SimulationTrace};
use nalgebra::DMatrix;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const TRAIL_STRIDE: usize = 10;

fn network(text: &str) -> Result<NetworkFile, JsError> {
    if text.trim().is_empty() {
        return Ok(netfile::fig3());
    }
    netfile::parse_network(text, Path::new(".")).map_err(|e| JsError::new(&e.to_string()))
}

fn simulate(net: &NetworkFile, sigma: f64, seed: u64, horizon: usize, spread: f64) -> Result<SimulationTrace, JsError> {
    let mut cfg = net.scenario.clone();
    cfg.noise_std = sigma;
    if horizon > 0 {
        cfg.horizon = horizon;
    }
    if spread >= 0.0 {
        cfg.initial.spread = spread;
    }
    run_scenario(&net.spec, &cfg, seed).map_err(|e| JsError::new(&e.to_string()))
}

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn ids(v: &[usize]) -> Vec<usize> {
    v.iter().map(|i| i + 1).collect()
}

/// The bundled reference network file.
#[wasm_bindgen]
pub fn bundled_network() -> String {
    netfile::FIG3_NET.to_string()
}

/// Runs a passive scenario and returns true trails, observer trail, the
/// final observed frame and the observation range.
#[wasm_bindgen]
pub fn simulate_formation(
    network_text: &str,
    sigma: f64,
    seed: u64,
    horizon: usize,
    spread: f64,
) -> Result<String, JsError> {
    let net = network(network_text)?;
    let trace = simulate(&net, sigma, seed, horizon, spread)?;
    let picks: Vec<usize> = (0..trace.true_states.len()).step_by(TRAIL_STRIDE).collect();
    let trails: Vec<Vec<[f64; 2]>> = (0..trace.n())
        .map(|i| picks.iter().map(|&k| trace.true_states[k][i]).collect())
        .collect();
    let last = trace.frames.last().ok_or_else(|| err("empty trace"))?;
    let out = json!({
        "robots": trace.n(),
        "leader": trace.spec.leader + 1,
        "range": trace.config.observation_range,
        "trails": trails,
        "observer": picks.iter().map(|&k| trace.observer[k]).collect::<Vec<_>>(),
        "visible": ids(&last.visible()),
        "observed": last.positions,
    });
    Ok(out.to_string())
}

/// Steady pattern plus the four topology estimates. A non-positive
/// `rc_hat` runs the range search instead of fixing the range.
#[wasm_bindgen]
pub fn infer_topology(
    network_text: &str,
    sigma: f64,
    seed: u64,
    observations: usize,
    rc_hat: f64,
    spread: f64,
) -> Result<String, JsError> {
    let net = network(network_text)?;
    let trace = simulate(&net, sigma, seed, 0, spread)?;
    let stages = StageOptions {
        sigma: Some(sigma),
        ..StageOptions::default()
    };
    let pattern = steady_stage(&trace, &stages.steady_params(sigma)).map_err(err)?;
    let range = RangeOptions {
        rc_hat: (rc_hat > 0.0).then_some(rc_hat),
        ..RangeOptions::default()
    };
    let count = (observations > 0).then_some(observations);
    let report = estimation_stage(&trace, &pattern, None, &range, net.hints.rc_upper, &stages, count).map_err(err)?;
    let truth = truth_block(&trace.spec, &report.inferable, &report.observed).map_err(err)?;
    let methods: Vec<Value> = [Method::Ols, Method::Constrained, Method::Rowwise, Method::Truncated]
        .iter()
        .filter_map(|&m| report.estimate(m))
        .map(|(e, error)| {
            json!({
                "method": e.method.name(),
                "rows": ids(&e.rows),
                "matrix": rows(&e.matrix),
                "spectral_error": error.spectral,
                "average_error": error.average,
            })
        })
        .collect();
    let out = json!({
        "k_steady": pattern.k_steady,
        "speed": pattern.speed,
        "observed": ids(&report.observed),
        "inferable": ids(&report.inferable),
        "rc_hat": report.rc_hat,
        "resolution": report.range.as_ref().map(|r| r.resolution),
        "observations": report.observations,
        "truth": rows(&truth),
        "estimates": methods,
    });
    Ok(out.to_string())
}

/// Empirical and asymptotic inference bias over a grid of candidate ranges.
#[wasm_bindgen]
pub fn bias_curve(
    network_text: &str,
    sigma: f64,
    seed: u64,
    observations: usize,
    points: usize,
) -> Result<String, JsError> {
    let net = network(network_text)?;
    let trace = simulate(&net, sigma, seed, 0, -1.0)?;
    let stages = StageOptions {
        sigma: Some(sigma),
        ..StageOptions::default()
    };
    let pattern = steady_stage(&trace, &stages.steady_params(sigma)).map_err(err)?;
    let frames = trace.passive_frames();
    let cols = pattern.subset.robots.clone();
    let geometry =
        SteadyGeometry::measure(frames, &trace.observer, &cols, pattern.k_end, stages.window).map_err(err)?;
    let start = pattern.subset.common_start();
    let available = pattern.k_end.saturating_sub(start);
    let count = if observations > 0 {
        observations.min(available)
    } else {
        available
    };
    let obs = FilteredObservations::build(
        frames,
        &cols,
        &cols,
        &pattern_input(&pattern),
        start,
        count,
        stages.compensation,
    )
    .map_err(err)?;
    let r_f = trace.config.observation_range;
    let bound = net.hints.rc_upper.unwrap_or(r_f);
    let probe = RangeProbe::new(&obs, &geometry, r_f, bound).map_err(err)?;
    let truth = truth_block(&trace.spec, probe.aux_rows(), &cols).map_err(err)?;
    let reference = probe.estimate(r_f).map_err(err)?;
    let points = points.max(2);
    let grid: Vec<f64> = (0..points).map(|i| r_f * (i + 1) as f64 / points as f64).collect();
    let curve: Vec<Value> = grid
        .iter()
        .map(|&rc| {
            json!({
                "rc": rc,
                "fe": probe.empirical_bias(rc, &reference).ok(),
                "fw": probe.asymptotic_bias(rc, &truth).ok(),
                "columns": probe.columns_for(rc).len(),
            })
        })
        .collect();
    Ok(json!({
        "aux_rows": ids(probe.aux_rows()),
        "true_range": trace.spec.interaction_range,
        "curve": curve,
    })
    .to_string())
}
