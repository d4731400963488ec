//! Formation simulator: noise-free ground truth, the inference robot's
//! motion, range-limited noisy observations and obstacle responses.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    build_perron, check_stability, formation_input, positions_matrix, steady_offsets, NetworkSpec, Vec2,
};

/// Independent random streams derived from one seed.
pub(crate) const STREAM_INITIAL: u64 = 0;
pub(crate) const STREAM_NOISE: u64 = 1;
pub(crate) const STREAM_STRATEGY: u64 = 2;
pub(crate) const STREAM_BOOTSTRAP: u64 = 3;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn distance(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Radial obstacle-avoidance law of a formation robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObstacleModel {
    /// Gain `kappa` in metres.
    pub gain: f64,
    /// Per-step magnitude cap in metres.
    pub max_step: f64,
}

impl Default for ObstacleModel {
    fn default() -> Self {
        Self {
            gain: 0.1,
            max_step: 0.2,
        }
    }
}

/// Input triggered in a robot at `target` by an obstacle at `obstacle`.
///
/// Zero outside `range`; inside, magnitude `gain * (range / d - 1)` capped at
/// `max_step`, pointing from the obstacle to the robot. A coincident
/// obstacle pushes along +x.
pub fn obstacle_response(model: &ObstacleModel, range: f64, target: Vec2, obstacle: Vec2) -> Vec2 {
    let d = distance(target, obstacle);
    if d > range {
        return [0.0, 0.0];
    }
    if d == 0.0 {
        return [model.max_step, 0.0];
    }
    let magnitude = (model.gain * (range / d - 1.0)).min(model.max_step);
    [
        magnitude * (target[0] - obstacle[0]) / d,
        magnitude * (target[1] - obstacle[1]) / d,
    ]
}

/// Passive tracking behaviour of the inference robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingModel {
    /// Gain of the inverse-distance repulsion from nearby robots.
    pub repulsion_gain: f64,
    /// Repulsion acts on robots closer than this multiple of `R_o`.
    pub repulsion_radius_factor: f64,
}

impl Default for TrackingModel {
    fn default() -> Self {
        Self {
            repulsion_gain: 0.05,
            repulsion_radius_factor: 1.5,
        }
    }
}

/// Repulsion `g_a`: sum over robots within the repulsion radius of
/// `gain / d` along the unit vector from the robot to the observer.
pub fn repulsion(model: &TrackingModel, obstacle_range: f64, observer: Vec2, robots: &[Vec2]) -> Vec2 {
    let radius = model.repulsion_radius_factor * obstacle_range;
    let mut g = [0.0, 0.0];
    for &p in robots {
        let d = distance(observer, p);
        if d >= radius {
            continue;
        }
        let (ux, uy) = if d > 0.0 {
            ((observer[0] - p[0]) / d, (observer[1] - p[1]) / d)
        } else {
            (1.0, 0.0)
        };
        let m = model.repulsion_gain / d.max(1e-3);
        g[0] += m * ux;
        g[1] += m * uy;
    }
    g
}

/// Adjusting input of the tracking observer: mean observed one-step
/// displacement of robots seen in both frames plus the repulsion term.
/// Falls back to `last_velocity` when no robot is seen twice.
pub fn tracking_input(
    model: &TrackingModel,
    obstacle_range: f64,
    previous: &ObservationFrame,
    current: &ObservationFrame,
    observer: Vec2,
    last_velocity: Vec2,
) -> Vec2 {
    let mut sum = [0.0, 0.0];
    let mut count = 0usize;
    for (a, b) in previous.positions.iter().zip(&current.positions) {
        if let (Some(a), Some(b)) = (a, b) {
            sum[0] += b[0] - a[0];
            sum[1] += b[1] - a[1];
            count += 1;
        }
    }
    let base = if count == 0 {
        last_velocity
    } else {
        [sum[0] / count as f64, sum[1] / count as f64]
    };
    let visible: Vec<Vec2> = current.positions.iter().flatten().copied().collect();
    let g = repulsion(model, obstacle_range, observer, &visible);
    [base[0] + g[0], base[1] + g[1]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    pub step: usize,
    /// Noisy position per robot, `None` when outside the observation range.
    pub positions: Vec<Option<Vec2>>,
}

impl ObservationFrame {
    pub fn visible(&self) -> Vec<usize> {
        (0..self.positions.len())
            .filter(|&i| self.positions[i].is_some())
            .collect()
    }

    pub fn is_visible(&self, robot: usize) -> bool {
        self.positions.get(robot).is_some_and(Option::is_some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcitationEvent {
    /// Step at which the input is applied; it shows up in the state at `step + 1`.
    pub step: usize,
    pub target: usize,
    pub input: Vec2,
}

/// Where the formation starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialCondition {
    /// Followers start this far behind their steady slots, measured against
    /// the leader's heading.
    pub lag: f64,
    /// Uniform per-robot, per-dimension perturbation half-width.
    pub spread: f64,
    /// Observer start in the same frame as the steady geometry (before the
    /// lag shift), moved by the mean perturbation of the robots within
    /// sensing range of it so that it keeps this offset once they settle.
    /// Defaults to `0.8 R_f` behind the formation centroid.
    pub observer_start: Option<Vec2>,
}

impl Default for InitialCondition {
    fn default() -> Self {
        Self {
            lag: 0.0,
            spread: 3.0,
            observer_start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub noise_std: f64,
    /// Observation range `R_f`.
    pub observation_range: f64,
    /// Number of passive steps simulated after the initial frame.
    pub horizon: usize,
    pub initial: InitialCondition,
    /// Let the tracking observer excite robots it passes close to.
    pub passive_excitation: bool,
    pub obstacle: ObstacleModel,
    pub tracking: TrackingModel,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.05,
            observation_range: 9.0,
            horizon: 2500,
            initial: InitialCondition::default(),
            passive_excitation: false,
            obstacle: ObstacleModel::default(),
            tracking: TrackingModel::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise standard deviation {} must be finite and non-negative",
                self.noise_std
            )));
        }
        if !(self.observation_range > 0.0) {
            return Err(Error::InvalidParameter("observation range must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        if !(self.initial.spread >= 0.0) || !self.initial.lag.is_finite() {
            return Err(Error::InvalidParameter(
                "initial spread must be non-negative and lag finite".into(),
            ));
        }
        Ok(())
    }
}

/// How the inference robot moves on the next step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObserverMove {
    /// Passive formation tracking.
    Track,
    /// Jump to the given position.
    To(Vec2),
}

/// Closed-loop simulator state.
#[derive(Debug, Clone)]
pub struct Simulator {
    spec: NetworkSpec,
    config: ScenarioConfig,
    w: DMatrix<f64>,
    input: DMatrix<f64>,
    state: DMatrix<f64>,
    observer: Vec2,
    observer_velocity: Vec2,
    noise_rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    excitation_active: bool,
    trace: SimulationTrace,
}

impl Simulator {
    pub fn new(spec: &NetworkSpec, config: &ScenarioConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let perron = build_perron(spec)?;
        let report = check_stability(&perron);
        if !report.passes {
            return Err(Error::InvalidNetwork(format!(
                "stability assumption fails: eigenvalue 1 multiplicity {}, second modulus {:.12}",
                report.unit_multiplicity, report.second_modulus
            )));
        }
        let input = formation_input(spec, &perron);
        let steady = steady_offsets(spec, &perron)?;
        let (initial, observer) = initial_state(spec, config, &steady, seed);
        let noise = if config.noise_std > 0.0 {
            Some(Normal::new(0.0, config.noise_std).expect("valid std"))
        } else {
            None
        };
        let mut sim = Self {
            spec: spec.clone(),
            config: config.clone(),
            w: perron.matrix().clone(),
            input,
            state: positions_matrix(&initial),
            observer,
            observer_velocity: [0.0, 0.0],
            noise_rng: stream_rng(seed, STREAM_NOISE),
            noise,
            excitation_active: config.passive_excitation,
            trace: SimulationTrace {
                spec: spec.clone(),
                config: config.clone(),
                seed,
                passive_steps: 0,
                true_states: Vec::new(),
                observer: Vec::new(),
                frames: Vec::new(),
                excitations: Vec::new(),
            },
        };
        sim.record();
        Ok(sim)
    }

    pub fn step_index(&self) -> usize {
        self.trace.frames.len() - 1
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn observer(&self) -> Vec2 {
        self.observer
    }

    pub fn trace(&self) -> &SimulationTrace {
        &self.trace
    }

    pub fn latest_frame(&self) -> &ObservationFrame {
        self.trace.frames.last().expect("initial frame recorded")
    }

    /// Enables obstacle responses to the inference robot from now on.
    pub fn set_excitation_active(&mut self, active: bool) {
        self.excitation_active = active || self.config.passive_excitation;
    }

    /// Advances the world by one step.
    pub fn step(&mut self, movement: ObserverMove) {
        let k = self.step_index();
        let mut next = &self.w * &self.state + &self.input;
        if self.excitation_active {
            for j in 0..self.spec.n() {
                let pos = [self.state[(j, 0)], self.state[(j, 1)]];
                let e = obstacle_response(&self.config.obstacle, self.spec.obstacle_range, pos, self.observer);
                if e != [0.0, 0.0] {
                    next[(j, 0)] += e[0];
                    next[(j, 1)] += e[1];
                    self.trace.excitations.push(ExcitationEvent {
                        step: k,
                        target: j,
                        input: e,
                    });
                }
            }
        }
        let next_observer = match movement {
            ObserverMove::Track => {
                let frames = &self.trace.frames;
                let current = &frames[k];
                let previous = if k == 0 { current } else { &frames[k - 1] };
                let v = tracking_input(
                    &self.config.tracking,
                    self.spec.obstacle_range,
                    previous,
                    current,
                    self.observer,
                    self.observer_velocity,
                );
                [self.observer[0] + v[0], self.observer[1] + v[1]]
            }
            ObserverMove::To(p) => p,
        };
        self.observer_velocity = [next_observer[0] - self.observer[0], next_observer[1] - self.observer[1]];
        self.observer = next_observer;
        self.state = next;
        self.record();
    }

    /// Runs `steps` passive tracking steps and marks them as the passive stage.
    pub fn run_passive(&mut self, steps: usize) {
        for _ in 0..steps {
            self.step(ObserverMove::Track);
        }
        self.trace.passive_steps = self.step_index();
    }

    pub fn into_trace(self) -> SimulationTrace {
        self.trace
    }

    fn record(&mut self) {
        let n = self.spec.n();
        let step = self.trace.frames.len();
        let truth: Vec<Vec2> = (0..n).map(|i| [self.state[(i, 0)], self.state[(i, 1)]]).collect();
        let mut positions = Vec::with_capacity(n);
        for p in &truth {
            // Noise is drawn for every robot so the stream does not depend
            // on visibility.
            let w = match &self.noise {
                Some(d) => [d.sample(&mut self.noise_rng), d.sample(&mut self.noise_rng)],
                None => [0.0, 0.0],
            };
            let visible = distance(*p, self.observer) < self.config.observation_range;
            positions.push(visible.then(|| [p[0] + w[0], p[1] + w[1]]));
        }
        self.trace.frames.push(ObservationFrame { step, positions });
        self.trace.true_states.push(truth);
        self.trace.observer.push(self.observer);
    }
}

fn initial_state(spec: &NetworkSpec, config: &ScenarioConfig, steady: &[Vec2], seed: u64) -> (Vec<Vec2>, Vec2) {
    let mut rng = stream_rng(seed, STREAM_INITIAL);
    let heading = unit(spec.leader_velocity).unwrap_or([1.0, 0.0]);
    let back = [-heading[0] * config.initial.lag, -heading[1] * config.initial.lag];
    let s = config.initial.spread;
    let mut positions = Vec::with_capacity(spec.n());
    let mut perturbation = Vec::with_capacity(spec.n());
    for (i, p) in steady.iter().enumerate() {
        let (dx, dy) = if s > 0.0 {
            (rng.gen_range(-s..=s), rng.gen_range(-s..=s))
        } else {
            (0.0, 0.0)
        };
        let shift = if i == spec.leader { [0.0, 0.0] } else { back };
        positions.push([p[0] + shift[0] + dx, p[1] + shift[1] + dy]);
        perturbation.push([dx, dy]);
    }
    let observer = match config.initial.observer_start {
        Some(p) => {
            let seen: Vec<usize> = (0..steady.len())
                .filter(|&i| i != spec.leader && distance(steady[i], p) < config.observation_range)
                .collect();
            let mut mean = [0.0, 0.0];
            for &i in &seen {
                mean[0] += perturbation[i][0] / seen.len() as f64;
                mean[1] += perturbation[i][1] / seen.len() as f64;
            }
            [p[0] + back[0] + mean[0], p[1] + back[1] + mean[1]]
        }
        None => {
            let n = positions.len() as f64;
            let cx = positions.iter().map(|p| p[0]).sum::<f64>() / n;
            let cy = positions.iter().map(|p| p[1]).sum::<f64>() / n;
            // Unlimited sensing has no natural standoff; keep clear of the
            // obstacle radius instead.
            let r = if config.observation_range.is_finite() {
                0.8 * config.observation_range
            } else {
                10.0 * spec.obstacle_range
            };
            [cx - heading[0] * r, cy - heading[1] * r]
        }
    };
    (positions, observer)
}

pub(crate) fn unit(v: Vec2) -> Option<Vec2> {
    let norm = v[0].hypot(v[1]);
    (norm > 0.0).then(|| [v[0] / norm, v[1] / norm])
}

/// Everything recorded during one run, self-describing enough to replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub spec: NetworkSpec,
    pub config: ScenarioConfig,
    pub seed: u64,
    /// Index of the last frame produced by passive tracking.
    pub passive_steps: usize,
    pub true_states: Vec<Vec<Vec2>>,
    pub observer: Vec<Vec2>,
    pub frames: Vec<ObservationFrame>,
    pub excitations: Vec<ExcitationEvent>,
}

const TRACE_MAGIC: &[u8; 8] = b"MRNTRACE";
const TRACE_VERSION: u32 = 1;

/// Header of the per-(step, robot) trace CSV. Robot ids are 1-based.
pub const TRACE_CSV_HEADER: &str = "step,robot,true_x,true_y,visible,obs_x,obs_y,excited,observer_x,observer_y";

impl SimulationTrace {
    pub fn n(&self) -> usize {
        self.spec.n()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn final_step(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    /// Frames of the passive stage only.
    pub fn passive_frames(&self) -> &[ObservationFrame] {
        let end = (self.passive_steps + 1).min(self.frames.len());
        &self.frames[..end]
    }

    /// Largest true distance between interacting robots over the run.
    pub fn max_edge_distance(&self) -> f64 {
        let mut max = 0.0_f64;
        for states in &self.true_states {
            for i in 0..self.n() {
                for j in self.spec.in_neighbors(i) {
                    max = max.max(distance(states[i], states[j]));
                }
            }
        }
        max
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TRACE_CSV_HEADER}")?;
        let mut excited = vec![Vec::<usize>::new(); self.frames.len()];
        for e in &self.excitations {
            if e.step < excited.len() {
                excited[e.step].push(e.target);
            }
        }
        for (k, frame) in self.frames.iter().enumerate() {
            let a = self.observer[k];
            for (i, truth) in self.true_states[k].iter().enumerate() {
                let (vis, ox, oy) = match frame.positions[i] {
                    Some(p) => (1, p[0].to_string(), p[1].to_string()),
                    None => (0, String::new(), String::new()),
                };
                let ex = u8::from(excited[k].contains(&i));
                writeln!(
                    out,
                    "{k},{},{},{},{vis},{ox},{oy},{ex},{},{}",
                    i + 1,
                    truth[0],
                    truth[1],
                    a[0],
                    a[1]
                )?;
            }
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("<trace>", e);
        out.write_all(TRACE_MAGIC).map_err(io)?;
        out.write_all(&TRACE_VERSION.to_le_bytes()).map_err(io)?;
        bincode::serialize_into(out, self).map_err(|e| Error::CorruptTrace(e.to_string()))
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| Error::CorruptTrace("truncated header".into()))?;
        if &magic != TRACE_MAGIC {
            return Err(Error::CorruptTrace("bad magic bytes".into()));
        }
        let mut version = [0u8; 4];
        input
            .read_exact(&mut version)
            .map_err(|_| Error::CorruptTrace("truncated header".into()))?;
        let version = u32::from_le_bytes(version);
        if version != TRACE_VERSION {
            return Err(Error::CorruptTrace(format!("unsupported version {version}")));
        }
        let trace: Self = bincode::deserialize_from(input).map_err(|e| Error::CorruptTrace(e.to_string()))?;
        if trace.frames.len() != trace.true_states.len() || trace.frames.len() != trace.observer.len() {
            return Err(Error::CorruptTrace("inconsistent record lengths".into()));
        }
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_binary(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_binary(std::io::BufReader::new(file))
    }
}

/// Runs a passive scenario: `config.horizon` tracking steps after the
/// initial frame.
pub fn run_scenario(spec: &NetworkSpec, config: &ScenarioConfig, seed: u64) -> Result<SimulationTrace> {
    let mut sim = Simulator::new(spec, config, seed)?;
    sim.run_passive(config.horizon);
    Ok(sim.into_trace())
}
