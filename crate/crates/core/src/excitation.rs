//! Active excitation: the inference robot pushes a target robot through its
//! obstacle response, watches which observed robots drift with it, and turns
//! the detected pairs into a lower bound on the interaction range.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Vec2;
use crate::sim::{distance, stream_rng, ObservationFrame, ObserverMove, Simulator, STREAM_STRATEGY};
use crate::steady::SteadyPattern;

/// `sqrt(3 eps^2 + 2 sigma^2)`: per-dimension bound on the one-step
/// prediction error of an unexcited robot.
pub fn reaction_threshold(epsilon: f64, sigma: f64) -> f64 {
    (3.0 * epsilon * epsilon + 2.0 * sigma * sigma).sqrt()
}

/// `(4 / sqrt(L_c) + 4 / sqrt(m)) eps`: per-step drift above which a robot
/// counts as an out-neighbour of the excited target.
pub fn neighbor_threshold(epsilon: f64, window: usize, count: usize) -> f64 {
    (4.0 / (window as f64).sqrt() + 4.0 / (count as f64).sqrt()) * epsilon
}

/// Lower bound on the probability that `m` excitation steps separate a
/// response from noise.
pub fn detection_probability(count: usize, epsilon: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    1.0 - 2.0 * (-(count as f64) * epsilon * epsilon / (sigma * sigma)).exp()
}

/// One-step velocity prediction error `z_k - z_{k-1} - c`.
pub fn prediction_error(current: Vec2, previous: Vec2, speed: Vec2) -> Vec2 {
    [current[0] - previous[0] - speed[0], current[1] - previous[1] - speed[1]]
}

fn exceeds(v: Vec2, threshold: f64) -> bool {
    v[0].abs() > threshold || v[1].abs() > threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExcitationParams {
    /// Consecutive excitation steps `m`.
    pub count: usize,
    /// Observation noise standard deviation, a known calibration input.
    pub noise_std: f64,
    pub epsilon: f64,
    /// Steady window `L_c`.
    pub window: usize,
    /// Approach speed in excess of the formation speed, m/step.
    pub approach_margin: f64,
    /// Closest the approach manoeuvre gets to the predicted target.
    pub standoff: f64,
    /// Approach steps allowed before giving up on a target.
    pub approach_budget: usize,
    /// Passive steps between sessions so the formation resettles.
    pub settle_steps: usize,
    /// Maximum number of targets tried; 0 means every observed robot.
    pub max_targets: usize,
}

impl Default for ExcitationParams {
    fn default() -> Self {
        Self {
            count: 200,
            noise_std: 0.05,
            epsilon: 0.04,
            window: 500,
            approach_margin: 2.5,
            standoff: 0.5,
            approach_budget: 50,
            settle_steps: 400,
            max_targets: 0,
        }
    }
}

impl ExcitationParams {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidParameter("excitation count must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(Error::InvalidParameter("window must be at least 1".into()));
        }
        if !(self.approach_margin > 0.0) || !(self.standoff >= 0.0) {
            return Err(Error::InvalidParameter(
                "approach margin must be positive and standoff non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn reaction_threshold(&self) -> f64 {
        reaction_threshold(self.epsilon, self.noise_std)
    }

    pub fn neighbor_threshold(&self) -> f64 {
        neighbor_threshold(self.epsilon, self.window, self.count)
    }
}

/// First step after `from` at which the target's prediction error crosses
/// the reaction threshold, and the observed target-to-observer distance then.
pub fn detect_reaction(
    frames: &[ObservationFrame],
    observer: &[Vec2],
    target: usize,
    from: usize,
    speed: Vec2,
    threshold: f64,
) -> Option<(usize, f64)> {
    for k in from.max(1)..frames.len() {
        let (Some(cur), Some(prev)) = (frames[k].positions[target], frames[k - 1].positions[target]) else {
            continue;
        };
        if exceeds(prediction_error(cur, prev, speed), threshold) {
            return Some((k, distance(cur, observer[k])));
        }
    }
    None
}

/// Next observer position: uniform in the disc of radius `radius` around
/// the predicted target, restricted to the quadrant of the previous offset
/// from the target. A zero offset component leaves that axis free.
pub fn excitation_move<R: Rng + ?Sized>(rng: &mut R, predicted: Vec2, radius: f64, previous_offset: Vec2) -> Vec2 {
    if radius <= 0.0 {
        return predicted;
    }
    let r = radius * rng.gen::<f64>().sqrt();
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut o = [r * theta.cos(), r * theta.sin()];
    for d in 0..2 {
        if previous_offset[d] != 0.0 && o[d] * previous_offset[d] < 0.0 {
            o[d] = -o[d];
        }
    }
    [predicted[0] + o[0], predicted[1] + o[1]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborTest {
    pub robot: usize,
    /// Accumulated prediction error over the excitation run.
    pub drift: Vec2,
    pub detected: bool,
}

/// Classifies every robot of `candidates` other than `target` by its
/// accumulated drift between `k_e` and `k_e + count`. Robots missing at
/// either end are returned separately as unclassifiable.
pub fn classify_out_neighbors(
    frames: &[ObservationFrame],
    candidates: &[usize],
    target: usize,
    k_e: usize,
    count: usize,
    speed: Vec2,
    threshold: f64,
) -> (Vec<NeighborTest>, Vec<usize>) {
    let mut tests = Vec::new();
    let mut missing = Vec::new();
    let end = k_e + count;
    for &i in candidates {
        if i == target {
            continue;
        }
        let a = frames.get(k_e).and_then(|f| f.positions[i]);
        let b = frames.get(end).and_then(|f| f.positions[i]);
        match (a, b) {
            (Some(a), Some(b)) => {
                let m = count as f64;
                let drift = [b[0] - a[0] - m * speed[0], b[1] - a[1] - m * speed[1]];
                let detected = exceeds([drift[0] / m, drift[1] / m], threshold);
                tests.push(NeighborTest {
                    robot: i,
                    drift,
                    detected,
                });
            }
            _ => missing.push(i),
        }
    }
    (tests, missing)
}

/// Largest observed distance between the target and a detected
/// out-neighbour over frames `0..=until`.
pub fn range_lower_bound(frames: &[ObservationFrame], target: usize, neighbors: &[usize], until: usize) -> Option<f64> {
    let mut best: Option<f64> = None;
    for frame in frames.iter().take(until + 1) {
        let Some(pj) = frame.positions[target] else {
            continue;
        };
        for &i in neighbors {
            if let Some(pi) = frame.positions[i] {
                let d = distance(pi, pj);
                best = Some(best.map_or(d, |b: f64| b.max(d)));
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSession {
    pub target: usize,
    /// Step at which the approach started.
    pub k_start: usize,
    /// Step at which the target's reaction was detected.
    pub k_excite: usize,
    /// Estimated obstacle-detection radius.
    pub r_o_hat: f64,
    pub count: usize,
    pub tests: Vec<NeighborTest>,
    pub unclassifiable: Vec<usize>,
}

impl ExcitationSession {
    pub fn detected(&self) -> Vec<usize> {
        self.tests.iter().filter(|t| t.detected).map(|t| t.robot).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationOutcome {
    pub sessions: Vec<ExcitationSession>,
    /// Targets abandoned because no reaction was seen within the budget.
    pub unreactive: Vec<usize>,
    /// Number of targets tried.
    pub tried: usize,
    pub approach_budget: usize,
    /// Interaction-range lower bound; `None` when no target revealed an
    /// out-neighbour.
    pub rc_lower: Option<f64>,
    pub reaction_threshold: f64,
    pub neighbor_threshold: f64,
}

impl ExcitationOutcome {
    /// The lower bound, or the reason none was found.
    pub fn bound(&self) -> Result<f64> {
        if let Some(b) = self.rc_lower {
            return Ok(b);
        }
        match (self.sessions.is_empty(), self.unreactive.first()) {
            (true, Some(&target)) => Err(Error::ReactionNotDetected {
                target: target + 1,
                budget: self.approach_budget,
            }),
            _ => Err(Error::NoOutNeighbors { tried: self.tried }),
        }
    }

    /// The session that produced the bound, if any.
    pub fn detecting_session(&self) -> Option<&ExcitationSession> {
        self.rc_lower.and(self.sessions.last())
    }
}

/// Targets in order of observed distance to the observer, then index.
pub fn target_order(frame: &ObservationFrame, robots: &[usize], observer: Vec2) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = robots
        .iter()
        .filter_map(|&i| frame.positions[i].map(|p| (distance(p, observer), i)))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, i)| i).collect()
}

/// Runs the excitation stage on a live simulation that has finished its
/// passive stage. Tries targets nearest first until one reveals at least one
/// out-neighbour, then bounds the interaction range from the detected pairs.
/// Every session run is returned, including those that found nothing.
pub fn run_excitation(
    sim: &mut Simulator,
    pattern: &SteadyPattern,
    params: &ExcitationParams,
    seed: u64,
) -> Result<ExcitationOutcome> {
    params.validate()?;
    let mut rng = stream_rng(seed, STREAM_STRATEGY);
    let robots = pattern.subset.robots.clone();
    let order = target_order(sim.latest_frame(), &robots, sim.observer());
    let limit = if params.max_targets == 0 {
        order.len()
    } else {
        params.max_targets.min(order.len())
    };
    let reaction = params.reaction_threshold();
    let neighbor = params.neighbor_threshold();
    let mut sessions = Vec::new();
    let mut unreactive = Vec::new();
    let mut rc_lower = None;
    sim.set_excitation_active(true);
    for (tried, &target) in order.iter().take(limit).enumerate() {
        if tried > 0 {
            for _ in 0..params.settle_steps {
                sim.step(ObserverMove::Track);
            }
        }
        let Some(session) = excite_target(
            sim,
            &mut rng,
            &robots,
            target,
            pattern.speed,
            params,
            reaction,
            neighbor,
        ) else {
            unreactive.push(target);
            continue;
        };
        let found = session.detected();
        let k_last = session.k_excite + session.count;
        sessions.push(session);
        if !found.is_empty() {
            rc_lower = range_lower_bound(&sim.trace().frames, target, &found, k_last);
            break;
        }
    }
    Ok(ExcitationOutcome {
        sessions,
        unreactive,
        tried: limit,
        approach_budget: params.approach_budget,
        rc_lower,
        reaction_threshold: reaction,
        neighbor_threshold: neighbor,
    })
}

#[allow(clippy::too_many_arguments)]
fn excite_target(
    sim: &mut Simulator,
    rng: &mut ChaCha8Rng,
    robots: &[usize],
    target: usize,
    speed: Vec2,
    params: &ExcitationParams,
    reaction: f64,
    neighbor: f64,
) -> Option<ExcitationSession> {
    let k_start = sim.step_index();
    let approach_speed = speed[0].hypot(speed[1]) + params.approach_margin;
    let mut detection = None;
    for _ in 0..params.approach_budget {
        let last = sim.latest_frame().positions[target]?;
        let predicted = [last[0] + speed[0], last[1] + speed[1]];
        let here = sim.observer();
        let gap = distance(here, predicted);
        let travel = (gap - params.standoff).clamp(0.0, approach_speed);
        let next = if gap > 0.0 {
            [
                here[0] + travel * (predicted[0] - here[0]) / gap,
                here[1] + travel * (predicted[1] - here[1]) / gap,
            ]
        } else {
            here
        };
        sim.step(ObserverMove::To(next));
        let trace = sim.trace();
        let k = sim.step_index();
        detection = detect_reaction(
            &trace.frames[k - 1..=k],
            &trace.observer[k - 1..=k],
            target,
            1,
            speed,
            reaction,
        )
        .map(|(_, r)| (k, r));
        if detection.is_some() {
            break;
        }
    }
    let (k_excite, r_o_hat) = detection?;
    let mut offset = {
        let frame = sim.latest_frame();
        let p = frame.positions[target]?;
        let a = sim.observer();
        [a[0] - p[0], a[1] - p[1]]
    };
    for _ in 0..params.count {
        let Some(last) = sim.latest_frame().positions[target] else {
            // Lost sight of the target: keep the last offset from the
            // formation-speed prediction.
            let a = sim.observer();
            sim.step(ObserverMove::To([a[0] + speed[0], a[1] + speed[1]]));
            continue;
        };
        let predicted = [last[0] + speed[0], last[1] + speed[1]];
        let next = excitation_move(rng, predicted, r_o_hat, offset);
        offset = [next[0] - predicted[0], next[1] - predicted[1]];
        sim.step(ObserverMove::To(next));
    }
    let frames = &sim.trace().frames;
    let (tests, unclassifiable) =
        classify_out_neighbors(frames, robots, target, k_excite, params.count, speed, neighbor);
    Some(ExcitationSession {
        target,
        k_start,
        k_excite,
        r_o_hat,
        count: params.count,
        tests,
        unclassifiable,
    })
}

pub const SESSION_CSV_HEADER: &str =
    "session,target,phase,step,robot,delta_x,delta_y,drift_x,drift_y,reaction_threshold,neighbor_threshold,indicator";

/// Per-step prediction errors of every observed robot during each session,
/// with the running drift since the excitation start and the final
/// indicator. Robot ids are 1-based; `indicator` is empty for the target
/// and for unclassifiable robots.
pub fn write_session_csv<W: Write>(
    mut out: W,
    frames: &[ObservationFrame],
    outcome: &ExcitationOutcome,
    robots: &[usize],
    speed: Vec2,
) -> std::io::Result<()> {
    writeln!(out, "{SESSION_CSV_HEADER}")?;
    for (s, session) in outcome.sessions.iter().enumerate() {
        let end = (session.k_excite + session.count).min(frames.len() - 1);
        for &i in robots {
            let indicator = session
                .tests
                .iter()
                .find(|t| t.robot == i)
                .map(|t| u8::from(t.detected).to_string())
                .unwrap_or_default();
            let base = frames[session.k_excite].positions[i];
            for k in session.k_start + 1..=end {
                let (Some(cur), Some(prev)) = (frames[k].positions[i], frames[k - 1].positions[i]) else {
                    continue;
                };
                let delta = prediction_error(cur, prev, speed);
                let phase = if k <= session.k_excite { "approach" } else { "excite" };
                let drift = match base {
                    Some(b) if k >= session.k_excite => {
                        let m = (k - session.k_excite) as f64;
                        [
                            (cur[0] - b[0] - m * speed[0]).to_string(),
                            (cur[1] - b[1] - m * speed[1]).to_string(),
                        ]
                    }
                    _ => [String::new(), String::new()],
                };
                writeln!(
                    out,
                    "{},{},{phase},{k},{},{},{},{},{},{},{},{}",
                    s + 1,
                    session.target + 1,
                    i + 1,
                    delta[0],
                    delta[1],
                    drift[0],
                    drift[1],
                    outcome.reaction_threshold,
                    outcome.neighbor_threshold,
                    indicator
                )?;
            }
        }
    }
    Ok(())
}
