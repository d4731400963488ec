//! Experiment configuration, end-to-end pipeline runs, sweeps and the
//! manifest/replay plumbing behind the command-line tool.
//!
//! Every command writes into one output directory and finishes with a
//! `manifest.json` that records the invocation, every threshold used and the
//! list of files written, so [`replay`] can rerun it and compare bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage, StageContext, StageError};
use crate::estimator::{
    constrained_estimate, ols_estimate, rowwise_estimate, search_range, truncated_estimate, truth_block,
    DriftCompensation, EstimateError, FilteredObservations, Method, PatternInput, RangeEstimate, RangeProbe,
    RowwiseInput, SearchParams, SteadyGeometry, TopologyEstimate,
};
use crate::excitation::{run_excitation, write_session_csv, ExcitationOutcome, ExcitationParams};
use crate::linalg::{median, quantile};
use crate::netfile::{self, NetworkFile};
use crate::network::{NetworkSpec, Vec2};
use crate::sim::{stream_rng, ScenarioConfig, SimulationTrace, Simulator, STREAM_BOOTSTRAP};
use crate::steady::{infer_steady_pattern, speed_series, write_speed_csv, SteadyParams, SteadyPattern};

/// Environment variable naming the default output directory.
pub const OUTPUT_ENV: &str = "MRN_TOPO_OUT";
pub const DEFAULT_OUTPUT: &str = "mrn-topo-out";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Output directory from an explicit choice, else the environment, else
/// [`DEFAULT_OUTPUT`].
pub fn resolve_output(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUTPUT),
    }
}

/// Threshold parameter as a multiple of the noise level, with a floor so a
/// noiseless run still has a usable tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonRule {
    pub factor: f64,
    pub floor: f64,
}

impl Default for EpsilonRule {
    fn default() -> Self {
        Self {
            factor: 0.8,
            floor: 1e-3,
        }
    }
}

impl EpsilonRule {
    pub fn epsilon(&self, sigma: f64) -> f64 {
        (self.factor * sigma).max(self.floor)
    }
}

/// Parameters shared by every stage after simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOptions {
    /// Known observation noise; `None` takes the trace's own value.
    pub sigma: Option<f64>,
    pub epsilon: EpsilonRule,
    /// Steady window `L_c`.
    pub window: usize,
    /// Consecutive excitations `m`.
    pub excitations: usize,
    /// Approach and settling tuning; noise, threshold, window and count are
    /// overwritten from the fields above.
    pub excitation: ExcitationParams,
    pub search: SearchParams,
    pub compensation: DriftCompensation,
}

impl Default for StageOptions {
    fn default() -> Self {
        Self {
            sigma: None,
            epsilon: EpsilonRule::default(),
            window: 500,
            excitations: 200,
            excitation: ExcitationParams::default(),
            search: SearchParams::default(),
            compensation: DriftCompensation::AllRows,
        }
    }
}

impl StageOptions {
    pub fn steady_params(&self, sigma: f64) -> SteadyParams {
        SteadyParams {
            window: self.window,
            epsilon: self.epsilon.epsilon(sigma),
        }
    }

    pub fn excitation_params(&self, sigma: f64) -> ExcitationParams {
        ExcitationParams {
            count: self.excitations,
            noise_std: sigma,
            epsilon: self.epsilon.epsilon(sigma),
            window: self.window,
            ..self.excitation
        }
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.excitations == 0 {
            return Err(Error::InvalidParameter(
                "window and excitation count must be at least 1".into(),
            ));
        }
        if !(self.epsilon.factor >= 0.0) || !(self.epsilon.floor >= 0.0) {
            return Err(Error::InvalidParameter("epsilon rule must be non-negative".into()));
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter(format!("noise level {s} is invalid")));
            }
        }
        Ok(())
    }
}

/// How the interaction range used for estimation is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangeOptions {
    /// Use this range and skip the search.
    pub rc_hat: Option<f64>,
    /// Bottom of the search bracket when no excitation bound is available.
    pub rc_lower: Option<f64>,
    /// Upper bound that sizes the auxiliary rows; defaults to the network
    /// file's hint.
    pub rc_upper: Option<f64>,
}

/// Sweep configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Network file; the bundled reference network when absent.
    pub network: Option<PathBuf>,
    pub sigmas: Vec<f64>,
    /// Observation counts for the estimation tables.
    pub observations: Vec<usize>,
    pub trials: usize,
    /// Trial `t` uses seed `seed + t` at every noise level.
    pub seed: u64,
    /// Candidate ranges for the bias table; `0.5` m steps from `1` to `R_f`
    /// when absent.
    pub rc_grid: Option<Vec<f64>>,
    /// Run the excitation stage for the search's lower bound.
    pub excite: bool,
    /// Initial perturbation half-width override.
    pub spread: Option<f64>,
    /// Passive horizon override.
    pub horizon: Option<usize>,
    /// Step stride of the speed table.
    pub speed_stride: usize,
    pub range: RangeOptions,
    pub stages: StageOptions,
    /// Output directory; `MRN_TOPO_OUT` or the default when absent.
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            network: None,
            sigmas: vec![0.05, 0.1],
            observations: vec![20, 40, 80, 160, 200, 260],
            trials: 20,
            seed: 0,
            rc_grid: None,
            excite: false,
            spread: None,
            horizon: None,
            speed_stride: 25,
            range: RangeOptions::default(),
            stages: StageOptions::default(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        if let (Some(net), Some(dir)) = (&cfg.network, origin.parent()) {
            if net.is_relative() {
                cfg.network = Some(dir.join(net));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.observations.is_empty() {
            return Err(Error::InvalidParameter(
                "noise and observation grids must be nonempty".into(),
            ));
        }
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trial count must be at least 1".into()));
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(
                "noise levels must be finite and non-negative".into(),
            ));
        }
        if self.observations.contains(&0) {
            return Err(Error::InvalidParameter("observation counts must be at least 1".into()));
        }
        if self.speed_stride == 0 {
            return Err(Error::InvalidParameter("speed stride must be at least 1".into()));
        }
        if let Some(g) = &self.rc_grid {
            if g.is_empty() || g.iter().any(|r| !(*r >= 0.0)) {
                return Err(Error::InvalidParameter(
                    "range grid must be nonempty and non-negative".into(),
                ));
            }
        }
        self.stages.validate()
    }

    fn rc_grid_for(&self, observation_range: f64) -> Vec<f64> {
        self.rc_grid.clone().unwrap_or_else(|| {
            let steps = ((observation_range - 1.0) / 0.5).floor().max(0.0) as usize;
            (0..=steps).map(|i| 1.0 + 0.5 * i as f64).collect()
        })
    }
}

/// Bundled reference network or the file at `path`.
pub fn load_network_or_default(path: Option<&Path>) -> Result<NetworkFile, StageError> {
    match path {
        Some(p) => netfile::load_network(p).stage(Stage::Network),
        None => Ok(netfile::fig3()),
    }
}

fn scenario_for(net: &NetworkFile, sigma: f64, spread: Option<f64>, horizon: Option<usize>) -> ScenarioConfig {
    let mut cfg = net.scenario.clone();
    cfg.noise_std = sigma;
    if let Some(s) = spread {
        cfg.initial.spread = s;
    }
    if let Some(h) = horizon {
        cfg.horizon = h;
    }
    cfg
}

/// Steady pattern from the passive part of a trace.
pub fn steady_stage(trace: &SimulationTrace, params: &SteadyParams) -> Result<SteadyPattern, StageError> {
    infer_steady_pattern(trace.passive_frames(), params).stage(Stage::Steady)
}

pub fn pattern_input(pattern: &SteadyPattern) -> PatternInput {
    PatternInput {
        speed: pattern.speed,
        shape: pattern.shape.clone(),
        leader: pattern.leader.leader,
    }
}

/// Rebuilds the simulator behind a passive trace and runs the excitation
/// stage on it. Returns the outcome and the extended trace.
pub fn excitation_stage(
    trace: &SimulationTrace,
    pattern: &SteadyPattern,
    params: &ExcitationParams,
) -> Result<(ExcitationOutcome, SimulationTrace), StageError> {
    let mut sim = Simulator::new(&trace.spec, &trace.config, trace.seed).stage(Stage::Simulation)?;
    sim.run_passive(trace.passive_steps);
    if sim.trace().frames.as_slice() != trace.passive_frames() {
        return Err(Error::CorruptTrace(
            "passive frames do not replay from the recorded network, scenario and seed".into(),
        ))
        .stage(Stage::Simulation);
    }
    let outcome = run_excitation(&mut sim, pattern, params, trace.seed).stage(Stage::Excitation)?;
    Ok((outcome, sim.into_trace()))
}

/// Everything the estimation stage produced.
#[derive(Debug, Clone)]
pub struct EstimationReport {
    pub geometry: SteadyGeometry,
    /// Observed robots, the estimate columns.
    pub observed: Vec<usize>,
    /// Rows actually estimated: robots within `R_f - rc_hat`.
    pub inferable: Vec<usize>,
    pub rc_hat: f64,
    pub range: Option<RangeEstimate>,
    pub start: usize,
    pub observations: usize,
    pub estimates: Vec<TopologyEstimate>,
    /// Error of each estimate against the true weights, same order.
    pub errors: Vec<EstimateError>,
}

impl EstimationReport {
    pub fn estimate(&self, method: Method) -> Option<(&TopologyEstimate, &EstimateError)> {
        self.estimates
            .iter()
            .zip(&self.errors)
            .find(|(e, _)| e.method == method)
    }
}

/// Observations from the first common visible step. `None` uses every
/// passive transition.
fn observation_window(pattern: &SteadyPattern, observations: Option<usize>) -> Result<(usize, usize)> {
    let start = pattern.subset.common_start();
    let available = pattern.k_end.saturating_sub(start);
    let count = observations.unwrap_or(available);
    if count == 0 || count > available {
        return Err(Error::InsufficientFrames {
            needed: start + count + 1,
            available: pattern.k_end + 1,
        });
    }
    Ok((start, count))
}

/// Range choice, rows and all four estimates.
pub fn estimation_stage(
    trace: &SimulationTrace,
    pattern: &SteadyPattern,
    rc_lower: Option<f64>,
    range: &RangeOptions,
    rc_upper_hint: Option<f64>,
    options: &StageOptions,
    observations: Option<usize>,
) -> Result<EstimationReport, StageError> {
    let est = Stage::Estimation;
    let frames = trace.passive_frames();
    let observed = pattern.subset.robots.clone();
    let geometry =
        SteadyGeometry::measure(frames, &trace.observer, &observed, pattern.k_end, options.window).stage(est)?;
    let input = pattern_input(pattern);
    let (start, count) = observation_window(pattern, observations).stage(est)?;
    let full = FilteredObservations::build(frames, &observed, &observed, &input, start, count, options.compensation)
        .stage(est)?;
    let r_f = trace.config.observation_range;

    let (rc_hat, range_estimate) = match range.rc_hat {
        Some(rc) => (rc, None),
        None => {
            let bound = range.rc_upper.or(rc_upper_hint).unwrap_or(r_f);
            let probe = RangeProbe::new(&full, &geometry, r_f, bound).stage(est)?;
            let lower = rc_lower.or(range.rc_lower).unwrap_or(0.0).min(r_f);
            let mut rng = stream_rng(trace.seed, STREAM_BOOTSTRAP);
            let r = search_range(&probe, lower, r_f, &options.search, &mut rng).stage(est)?;
            (r.rc_hat, Some(r))
        }
    };

    let inferable = geometry.within(r_f - rc_hat);
    if inferable.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no observed robot within R_f - rc = {:.3} m of the inference robot",
            r_f - rc_hat
        )))
        .stage(est);
    }
    let rows = full.with_rows(&inferable).stage(est)?;
    let rowwise_input = RowwiseInput {
        frames,
        cols: &observed,
        first_visible: &pattern.subset.first_visible,
        rows: &inferable,
        pattern: &input,
        geometry: &geometry,
        end: start + count,
        compensation: options.compensation,
    };
    let estimates = vec![
        ols_estimate(&rows).stage(est)?,
        constrained_estimate(&rows, &geometry, rc_hat).stage(est)?,
        rowwise_estimate(&rowwise_input, rc_hat).stage(est)?,
        truncated_estimate(&full).stage(est)?,
    ];
    let errors = estimates
        .iter()
        .map(|e| Ok(e.error(&truth_block(&trace.spec, &e.rows, &e.cols)?)))
        .collect::<Result<Vec<_>>>()
        .stage(est)?;
    Ok(EstimationReport {
        geometry,
        observed,
        inferable,
        rc_hat,
        range: range_estimate,
        start,
        observations: count,
        estimates,
        errors,
    })
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceFormat {
    Csv,
    Binary,
    #[default]
    Both,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOptions {
    pub network: Option<PathBuf>,
    pub seed: u64,
    pub sigma: Option<f64>,
    pub horizon: Option<usize>,
    pub spread: Option<f64>,
    pub format: TraceFormat,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferOptions {
    pub trace: PathBuf,
    /// Run the excitation stage for the range search's lower bound.
    pub excite: bool,
    /// Observations used by the estimators; every passive transition when
    /// absent.
    pub observations: Option<usize>,
    pub range: RangeOptions,
    pub stages: StageOptions,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExciteOptions {
    pub trace: PathBuf,
    pub stages: StageOptions,
}

/// A command as recorded in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    Simulate(SimulateOptions),
    Infer(InferOptions),
    Excite(ExciteOptions),
    Sweep(ExperimentConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub invocation: Invocation,
    pub thresholds: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, serde_json::Value>,
    /// Files written, relative to the output directory, in write order.
    pub outputs: Vec<String>,
}

impl Manifest {
    fn new(invocation: Invocation) -> Self {
        Self {
            tool: "mrn-topo".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            invocation,
            thresholds: BTreeMap::new(),
            metrics: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn metric(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.metrics.insert(key.into(), v);
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Output directory plus the bookkeeping for the manifest.
struct OutDir {
    dir: PathBuf,
    manifest: Manifest,
}

impl OutDir {
    fn create(dir: &Path, invocation: Invocation) -> Result<Self, StageError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(dir, e))
            .stage(Stage::Output)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest::new(invocation),
        })
    }

    fn write<F>(&mut self, name: &str, body: F) -> Result<(), StageError>
    where
        F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    {
        let path = self.dir.join(name);
        let run = || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(&path)?);
            body(&mut w)?;
            w.flush()
        };
        run().map_err(|e| Error::io(&path, e)).stage(Stage::Output)?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }

    fn save_trace(&mut self, name: &str, trace: &SimulationTrace) -> Result<(), StageError> {
        trace.save(&self.dir.join(name)).stage(Stage::Output)?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }

    fn finish(mut self) -> Result<Manifest, StageError> {
        self.manifest.outputs.push(MANIFEST_FILE.into());
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n")
            .map_err(|e| Error::io(&path, e))
            .stage(Stage::Output)?;
        Ok(self.manifest)
    }
}

fn absolute(path: &Path) -> PathBuf {
    std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

/// Passive simulation: `trace.csv` and/or `trace.bin`.
pub fn cmd_simulate(options: &SimulateOptions, out: &Path) -> Result<Manifest, StageError> {
    let mut recorded = options.clone();
    recorded.network = options.network.as_deref().map(absolute);
    let net = load_network_or_default(options.network.as_deref())?;
    let sigma = options.sigma.unwrap_or(net.scenario.noise_std);
    let scenario = scenario_for(&net, sigma, options.spread, options.horizon);
    scenario.validate().stage(Stage::Config)?;
    let mut sim = Simulator::new(&net.spec, &scenario, options.seed).stage(Stage::Simulation)?;
    sim.run_passive(scenario.horizon);
    let trace = sim.into_trace();

    let mut dir = OutDir::create(out, Invocation::Simulate(recorded))?;
    if matches!(options.format, TraceFormat::Csv | TraceFormat::Both) {
        dir.write("trace.csv", |w| trace.write_csv(w))?;
    }
    if matches!(options.format, TraceFormat::Binary | TraceFormat::Both) {
        dir.save_trace("trace.bin", &trace)?;
    }
    let m = &mut dir.manifest;
    m.thresholds.insert("noise_std".into(), sigma);
    m.thresholds
        .insert("observation_range".into(), scenario.observation_range);
    m.metric("robots", trace.n());
    m.metric("frames", trace.len());
    m.metric("max_edge_distance", trace.max_edge_distance());
    dir.finish()
}

fn load_trace(path: &Path) -> Result<SimulationTrace, StageError> {
    SimulationTrace::load(path).stage(Stage::Config)
}

fn speed_table(dir: &mut OutDir, trace: &SimulationTrace, pattern: &SteadyPattern) -> Result<(), StageError> {
    let series = speed_series(trace.passive_frames(), &pattern.subset, pattern.params.window).stage(Stage::Steady)?;
    let threshold = pattern.params.steady_threshold();
    dir.write("speed.csv", |w| {
        write_speed_csv(w, &series, pattern.benchmark, threshold)
    })
}

fn record_pattern(m: &mut Manifest, pattern: &SteadyPattern, spec: &NetworkSpec) {
    m.thresholds.insert("epsilon".into(), pattern.params.epsilon);
    m.thresholds.insert("window".into(), pattern.params.window as f64);
    m.thresholds
        .insert("steady_threshold".into(), pattern.params.steady_threshold());
    m.thresholds
        .insert("speed_confidence".into(), pattern.params.speed_confidence());
    let truth = spec.velocity_per_step();
    m.metric("k_steady", pattern.k_steady);
    m.metric("speed", pattern.speed);
    m.metric("speed_error", max_abs_diff(pattern.speed, truth));
    m.metric("observed", ids(&pattern.subset.robots));
    m.metric("leader_guess", pattern.leader.leader.map(|l| l + 1));
}

fn record_excitation(m: &mut Manifest, outcome: &ExcitationOutcome) {
    m.thresholds
        .insert("reaction_threshold".into(), outcome.reaction_threshold);
    m.thresholds
        .insert("neighbor_threshold".into(), outcome.neighbor_threshold);
    m.metric("sessions", outcome.sessions.len());
    m.metric("unreactive", ids(&outcome.unreactive));
    if let Some(s) = outcome.detecting_session() {
        m.metric("target", s.target + 1);
        m.metric("r_o_hat", s.r_o_hat);
        m.metric("out_neighbors", ids(&s.detected()));
    }
    m.metric("rc_lower", outcome.rc_lower);
}

fn ids(robots: &[usize]) -> Vec<usize> {
    robots.iter().map(|r| r + 1).collect()
}

fn max_abs_diff(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
}

fn write_excitation(
    dir: &mut OutDir,
    extended: &SimulationTrace,
    outcome: &ExcitationOutcome,
    pattern: &SteadyPattern,
) -> Result<(), StageError> {
    dir.write("sessions.csv", |w| {
        write_session_csv(w, &extended.frames, outcome, &pattern.subset.robots, pattern.speed)
    })?;
    record_excitation(&mut dir.manifest, outcome);
    Ok(())
}

/// Steady pattern and excitation only: `speed.csv`, `sessions.csv` and the
/// extended `trace.bin`.
pub fn cmd_excite(options: &ExciteOptions, out: &Path) -> Result<Manifest, StageError> {
    options.stages.validate().stage(Stage::Config)?;
    let mut recorded = options.clone();
    recorded.trace = absolute(&options.trace);
    let trace = load_trace(&options.trace)?;
    let sigma = options.stages.sigma.unwrap_or(trace.config.noise_std);
    let pattern = steady_stage(&trace, &options.stages.steady_params(sigma))?;

    let mut dir = OutDir::create(out, Invocation::Excite(recorded))?;
    record_pattern(&mut dir.manifest, &pattern, &trace.spec);
    speed_table(&mut dir, &trace, &pattern)?;
    let (outcome, extended) = excitation_stage(&trace, &pattern, &options.stages.excitation_params(sigma))?;
    write_excitation(&mut dir, &extended, &outcome, &pattern)?;
    dir.save_trace("trace.bin", &extended)?;
    outcome.bound().stage(Stage::Excitation)?;
    dir.finish()
}

pub const METRICS_CSV_HEADER: &str =
    "method,rows,columns,rc_hat,observations,spectral_error,average_error,condition,unresolved";

/// Full pipeline on a recorded trace: speed series, optional excitation,
/// one estimate CSV per method and a metrics table.
pub fn cmd_infer(options: &InferOptions, out: &Path) -> Result<Manifest, StageError> {
    options.stages.validate().stage(Stage::Config)?;
    let mut recorded = options.clone();
    recorded.trace = absolute(&options.trace);
    let trace = load_trace(&options.trace)?;
    let stages = &options.stages;
    let sigma = stages.sigma.unwrap_or(trace.config.noise_std);
    let pattern = steady_stage(&trace, &stages.steady_params(sigma))?;

    let mut dir = OutDir::create(out, Invocation::Infer(recorded))?;
    record_pattern(&mut dir.manifest, &pattern, &trace.spec);
    speed_table(&mut dir, &trace, &pattern)?;

    let mut rc_lower = None;
    if options.excite {
        let (outcome, extended) = excitation_stage(&trace, &pattern, &stages.excitation_params(sigma))?;
        write_excitation(&mut dir, &extended, &outcome, &pattern)?;
        rc_lower = Some(outcome.bound().stage(Stage::Excitation)?);
    }
    let hint = hint_for(&trace);
    let report = estimation_stage(
        &trace,
        &pattern,
        rc_lower,
        &options.range,
        hint,
        stages,
        options.observations,
    )?;
    write_estimates(&mut dir, &report)?;
    dir.finish()
}

/// The bundled network's range hint applies to traces it produced.
fn hint_for(trace: &SimulationTrace) -> Option<f64> {
    let bundled = netfile::fig3();
    (bundled.spec == trace.spec).then_some(bundled.hints.rc_upper).flatten()
}

fn write_estimates(dir: &mut OutDir, report: &EstimationReport) -> Result<(), StageError> {
    for e in &report.estimates {
        dir.write(&format!("estimate_{}.csv", e.method.name()), |w| e.write_csv(w))?;
    }
    dir.write("metrics.csv", |w| {
        writeln!(w, "{METRICS_CSV_HEADER}")?;
        for (e, err) in report.estimates.iter().zip(&report.errors) {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                e.method.name(),
                e.rows.len(),
                e.cols.len(),
                report.rc_hat,
                report.observations,
                err.spectral,
                err.average,
                e.condition,
                e.unresolved().len()
            )?;
        }
        Ok(())
    })?;
    let m = &mut dir.manifest;
    m.metric("rc_hat", report.rc_hat);
    m.metric("inferable", ids(&report.inferable));
    m.metric("observation_start", report.start);
    m.metric("observations", report.observations);
    if let Some(r) = &report.range {
        m.thresholds.insert("range_threshold".into(), r.threshold);
        m.metric("range_bracket", [r.rc_lower, r.rc_upper]);
        m.metric("range_resolution", r.resolution);
        m.metric("range_history", &r.history);
    }
    for (e, err) in report.estimates.iter().zip(&report.errors) {
        m.metric(&format!("error_{}", e.method.name()), err.spectral);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweep

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Finite values summarised.
    pub count: usize,
}

impl Summary {
    /// Median and quartiles of the finite values; NaN when there are none.
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Self {
                median: f64::NAN,
                q1: f64::NAN,
                q3: f64::NAN,
                count: 0,
            };
        }
        Self {
            median: median(&mut v),
            q1: quantile(&mut v, 0.25),
            q3: quantile(&mut v, 0.75),
            count: v.len(),
        }
    }
}

/// Everything one sweep trial contributes.
#[derive(Debug, Clone)]
struct TrialRecord {
    /// `(k, |c_hat(k) - c|)` at the sampled steps.
    speed: Vec<(usize, f64)>,
    /// `[observation index][range index] -> (f_w, f_e)`.
    bias: Vec<Vec<(f64, f64)>>,
    /// `[observation index] -> spectral error per method`.
    errors: Vec<BTreeMap<Method, f64>>,
    rc_hat: f64,
}

const SWEEP_METHODS: [Method; 3] = [Method::Ols, Method::Constrained, Method::Truncated];

fn sweep_trial(net: &NetworkFile, cfg: &ExperimentConfig, sigma: f64, seed: u64) -> Result<TrialRecord, StageError> {
    let scenario = scenario_for(net, sigma, cfg.spread, cfg.horizon);
    scenario.validate().stage(Stage::Config)?;
    let trace = crate::sim::run_scenario(&net.spec, &scenario, seed).stage(Stage::Simulation)?;
    let stages = &cfg.stages;
    let pattern = steady_stage(&trace, &stages.steady_params(sigma))?;

    let truth_speed = net.spec.velocity_per_step();
    let series = speed_series(trace.passive_frames(), &pattern.subset, stages.window).stage(Stage::Steady)?;
    let speed = series
        .iter()
        .filter(|p| p.k % cfg.speed_stride == 0)
        .map(|p| (p.k, max_abs_diff(p.speed, truth_speed)))
        .collect();

    let rc_lower = if cfg.excite {
        let (outcome, _) = excitation_stage(&trace, &pattern, &stages.excitation_params(sigma))?;
        Some(outcome.bound().stage(Stage::Excitation)?)
    } else {
        None
    };
    let max_k = *cfg.observations.iter().max().expect("validated nonempty");
    let report = estimation_stage(
        &trace,
        &pattern,
        rc_lower,
        &cfg.range,
        net.hints.rc_upper,
        stages,
        Some(max_k),
    )?;
    let rc_hat = report.rc_hat;

    let frames = trace.passive_frames();
    let input = pattern_input(&pattern);
    let observed = &report.observed;
    let r_f = scenario.observation_range;
    let grid = cfg.rc_grid_for(r_f);
    let bound = cfg.range.rc_upper.or(net.hints.rc_upper).unwrap_or(r_f);
    let mut bias = Vec::with_capacity(cfg.observations.len());
    let mut errors = Vec::with_capacity(cfg.observations.len());
    for &k in &cfg.observations {
        let Ok(full) =
            FilteredObservations::build(frames, observed, observed, &input, report.start, k, stages.compensation)
        else {
            bias.push(vec![(f64::NAN, f64::NAN); grid.len()]);
            errors.push(BTreeMap::new());
            continue;
        };
        bias.push(bias_row(&full, &report.geometry, &net.spec, r_f, bound, &grid));

        let mut row = BTreeMap::new();
        let mut put = |m: Method, est: Result<TopologyEstimate>| {
            let err = est
                .and_then(|e| Ok(e.error(&truth_block(&net.spec, &e.rows, &e.cols)?).spectral))
                .unwrap_or(f64::NAN);
            row.insert(m, err);
        };
        match full.with_rows(&report.inferable) {
            Ok(rows) => {
                put(Method::Ols, ols_estimate(&rows));
                put(
                    Method::Constrained,
                    constrained_estimate(&rows, &report.geometry, rc_hat),
                );
            }
            Err(e) => {
                let msg = e.to_string();
                put(Method::Ols, Err(Error::InvalidParameter(msg.clone())));
                put(Method::Constrained, Err(Error::InvalidParameter(msg)));
            }
        }
        put(Method::Truncated, truncated_estimate(&full));
        errors.push(row);
    }
    Ok(TrialRecord {
        speed,
        bias,
        errors,
        rc_hat,
    })
}

fn bias_row(
    full: &FilteredObservations,
    geometry: &SteadyGeometry,
    spec: &NetworkSpec,
    r_f: f64,
    bound: f64,
    grid: &[f64],
) -> Vec<(f64, f64)> {
    let nan = vec![(f64::NAN, f64::NAN); grid.len()];
    let Ok(probe) = RangeProbe::new(full, geometry, r_f, bound) else {
        return nan;
    };
    let (Ok(truth), Ok(reference)) = (truth_block(spec, probe.aux_rows(), &full.cols), probe.estimate(r_f)) else {
        return nan;
    };
    grid.iter()
        .map(|&rc| {
            (
                probe.asymptotic_bias(rc, &truth).unwrap_or(f64::NAN),
                probe.empirical_bias(rc, &reference).unwrap_or(f64::NAN),
            )
        })
        .collect()
}

#[cfg(feature = "parallel")]
fn map_trials<T, F>(seeds: Vec<u64>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    use rayon::prelude::*;
    seeds.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_trials<T, F>(seeds: Vec<u64>, f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    seeds.into_iter().map(f).collect()
}

pub const FIG4_HEADER: &str =
    "sigma,epsilon,window,k,trials,ok,seed_base,error_median,error_q1,error_q3,steady_threshold,speed_confidence,within_fraction";
pub const FIG5_HEADER: &str =
    "sigma,observations,rc_hat,trials,ok,seed_base,fw_median,fw_q1,fw_q3,fe_median,fe_q1,fe_q3";
pub const FIG67_HEADER: &str =
    "sigma,observations,method,rc_hat_median,trials,ok,seed_base,epsilon,window,error_median,error_q1,error_q3";

/// Runs every trial at every noise level and writes `fig4.csv` to
/// `fig7.csv`. Rows are written as each noise level completes.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, StageError> {
    cfg.validate().stage(Stage::Config)?;
    let mut recorded = cfg.clone();
    recorded.network = cfg.network.as_deref().map(absolute);
    recorded.output = None;
    let net = load_network_or_default(cfg.network.as_deref())?;
    let r_f = net.scenario.observation_range;
    let grid = cfg.rc_grid_for(r_f);

    let mut dir = OutDir::create(out, Invocation::Sweep(recorded))?;
    let open = |name: &str| -> Result<BufWriter<File>, StageError> {
        let path = dir.dir.join(name);
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| Error::io(&path, e))
            .stage(Stage::Output)
    };
    let mut writers = [
        open("fig4.csv")?,
        open("fig5.csv")?,
        open("fig6.csv")?,
        open("fig7.csv")?,
    ];
    let headers = [FIG4_HEADER, FIG5_HEADER, FIG67_HEADER, FIG67_HEADER];
    let io = |path: &str, e: std::io::Error| Error::io(dir.dir.join(path), e);
    for (w, h) in writers.iter_mut().zip(headers) {
        writeln!(w, "{h}").map_err(|e| io("fig*.csv", e)).stage(Stage::Output)?;
    }

    let mut failures = BTreeMap::new();
    for &sigma in &cfg.sigmas {
        let seeds: Vec<u64> = (0..cfg.trials as u64).map(|t| cfg.seed + t).collect();
        let results = map_trials(seeds, |seed| sweep_trial(&net, cfg, sigma, seed));
        let mut records = Vec::new();
        let mut first_error = None;
        for r in results {
            match r {
                Ok(rec) => records.push(rec),
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        failures.insert(sigma.to_string(), cfg.trials - records.len());
        if records.is_empty() {
            for w in &mut writers {
                let _ = w.flush();
            }
            return Err(first_error.expect("at least one trial"));
        }
        let rows = SweepRows {
            cfg,
            sigma,
            grid: &grid,
            records: &records,
        };
        rows.write(&mut writers)
            .map_err(|e| io("fig*.csv", e))
            .stage(Stage::Output)?;
    }
    for w in &mut writers {
        w.flush().map_err(|e| io("fig*.csv", e)).stage(Stage::Output)?;
    }
    drop(writers);
    dir.manifest
        .outputs
        .extend(["fig4.csv", "fig5.csv", "fig6.csv", "fig7.csv"].map(String::from));
    let m = &mut dir.manifest;
    m.thresholds.insert("epsilon_factor".into(), cfg.stages.epsilon.factor);
    m.thresholds.insert("epsilon_floor".into(), cfg.stages.epsilon.floor);
    m.thresholds.insert("window".into(), cfg.stages.window as f64);
    m.thresholds.insert("excitations".into(), cfg.stages.excitations as f64);
    m.thresholds.insert("observation_range".into(), r_f);
    m.metric("failed_trials", failures);
    dir.finish()
}

struct SweepRows<'a> {
    cfg: &'a ExperimentConfig,
    sigma: f64,
    grid: &'a [f64],
    records: &'a [TrialRecord],
}

impl SweepRows<'_> {
    fn write(&self, w: &mut [BufWriter<File>; 4]) -> std::io::Result<()> {
        let cfg = self.cfg;
        let (sigma, trials, seed) = (self.sigma, cfg.trials, cfg.seed);
        let params = cfg.stages.steady_params(sigma);
        let eps = params.epsilon;

        let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in self.records {
            for &(k, e) in &r.speed {
                by_k.entry(k).or_default().push(e);
            }
        }
        let conf = params.speed_confidence();
        for (k, errs) in &by_k {
            let s = Summary::of(errs);
            let within = errs.iter().filter(|&&e| e <= conf).count() as f64 / errs.len() as f64;
            writeln!(
                w[0],
                "{sigma},{eps},{},{k},{trials},{},{seed},{},{},{},{},{conf},{within}",
                params.window,
                s.count,
                s.median,
                s.q1,
                s.q3,
                params.steady_threshold()
            )?;
        }
        w[0].flush()?;

        for (ki, &k) in cfg.observations.iter().enumerate() {
            for (ri, &rc) in self.grid.iter().enumerate() {
                let fw: Vec<f64> = self.records.iter().map(|r| r.bias[ki][ri].0).collect();
                let fe: Vec<f64> = self.records.iter().map(|r| r.bias[ki][ri].1).collect();
                let (a, b) = (Summary::of(&fw), Summary::of(&fe));
                writeln!(
                    w[1],
                    "{sigma},{k},{rc},{trials},{},{seed},{},{},{},{},{},{}",
                    a.count, a.median, a.q1, a.q3, b.median, b.q1, b.q3
                )?;
            }
        }
        w[1].flush()?;

        let rc_med = Summary::of(&self.records.iter().map(|r| r.rc_hat).collect::<Vec<_>>()).median;
        for (ki, &k) in cfg.observations.iter().enumerate() {
            for m in SWEEP_METHODS {
                let errs: Vec<f64> = self
                    .records
                    .iter()
                    .map(|r| r.errors[ki].get(&m).copied().unwrap_or(f64::NAN))
                    .collect();
                let s = Summary::of(&errs);
                let line = format!(
                    "{sigma},{k},{},{rc_med},{trials},{},{seed},{eps},{},{},{},{}",
                    m.name(),
                    s.count,
                    params.window,
                    s.median,
                    s.q1,
                    s.q3
                );
                if m != Method::Truncated {
                    writeln!(w[2], "{line}")?;
                }
                writeln!(w[3], "{line}")?;
            }
        }
        w[2].flush()?;
        w[3].flush()
    }
}

// ---------------------------------------------------------------------------
// Replay

/// Per-file comparison of a replayed run against the recorded one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayReport {
    pub files: Vec<(String, bool)>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.files.iter().all(|(_, same)| *same)
    }
}

pub fn run_invocation(invocation: &Invocation, out: &Path) -> Result<Manifest, StageError> {
    match invocation {
        Invocation::Simulate(o) => cmd_simulate(o, out),
        Invocation::Infer(o) => cmd_infer(o, out),
        Invocation::Excite(o) => cmd_excite(o, out),
        Invocation::Sweep(c) => cmd_sweep(c, out),
    }
}

/// Reruns the command recorded in `recorded/manifest.json` into `out` and
/// compares every output byte for byte.
pub fn replay(recorded: &Path, out: &Path) -> Result<ReplayReport, StageError> {
    let manifest = Manifest::load(&recorded.join(MANIFEST_FILE)).stage(Stage::Config)?;
    if absolute(recorded) == absolute(out) {
        return Err(Error::InvalidParameter(
            "replay output directory must differ from the recorded one".into(),
        ))
        .stage(Stage::Config);
    }
    let fresh = run_invocation(&manifest.invocation, out)?;
    let mut files = Vec::new();
    for name in manifest
        .outputs
        .iter()
        .chain(fresh.outputs.iter().filter(|n| !manifest.outputs.contains(n)))
    {
        let a = std::fs::read(recorded.join(name)).ok();
        let b = std::fs::read(out.join(name)).ok();
        files.push((name.clone(), a.is_some() && a == b));
    }
    Ok(ReplayReport { files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_rule_floor() {
        let r = EpsilonRule::default();
        assert_eq!(r.epsilon(0.0), 1e-3);
        assert!((r.epsilon(0.1) - 0.08).abs() < 1e-15);
    }

    #[test]
    fn summary_skips_non_finite() {
        let s = Summary::of(&[f64::NAN, 3.0, 1.0, 2.0, f64::INFINITY]);
        assert_eq!(s.count, 3);
        assert_eq!(s.median, 2.0);
        assert!(Summary::of(&[f64::NAN]).median.is_nan());
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = ExperimentConfig::from_toml("trials = 3\nsigmas = [0.1]\n", Path::new("x.toml")).unwrap();
        assert_eq!(cfg.trials, 3);
        assert_eq!(cfg.stages.window, 500);
        cfg.validate().unwrap();
        let bad = ExperimentConfig {
            observations: vec![],
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1\n", Path::new("x.toml")).is_err());
    }

    #[test]
    fn relative_network_path_follows_config() {
        let cfg = ExperimentConfig::from_toml("network = \"n.net\"\n", Path::new("/a/b/c.toml")).unwrap();
        assert_eq!(cfg.network.unwrap(), PathBuf::from("/a/b/n.net"));
    }

    #[test]
    fn default_range_grid_spans_to_observation_range() {
        let g = ExperimentConfig::default().rc_grid_for(9.0);
        assert_eq!(g.first(), Some(&1.0));
        assert_eq!(g.last(), Some(&9.0));
        assert_eq!(g.len(), 17);
    }

    #[test]
    fn invocation_round_trips_through_json() {
        let inv = Invocation::Simulate(SimulateOptions {
            seed: 4,
            sigma: Some(0.1),
            ..Default::default()
        });
        let text = serde_json::to_string(&inv).unwrap();
        assert!(text.contains("\"command\":\"simulate\""));
        assert_eq!(serde_json::from_str::<Invocation>(&text).unwrap(), inv);
    }
}
