//! Steady-pattern inference from a passive trace: the constant observable
//! subset, formation velocity, steady offsets, the steady time and the
//! leader guess.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Vec2;
use crate::sim::ObservationFrame;

/// Robots visible in the last frame, with the step from which each has been
/// continuously visible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantSubset {
    /// Sorted robot indices.
    pub robots: Vec<usize>,
    /// `first_visible[r]` belongs to `robots[r]`.
    pub first_visible: Vec<usize>,
}

impl ConstantSubset {
    /// First step at which every robot of the subset is visible for good.
    pub fn common_start(&self) -> usize {
        self.first_visible.iter().copied().max().unwrap_or(0)
    }

    pub fn position(&self, robot: usize) -> Option<usize> {
        self.robots.binary_search(&robot).ok()
    }
}

pub fn constant_subset(frames: &[ObservationFrame]) -> Result<ConstantSubset> {
    let last = frames.last().ok_or(Error::EmptyTrace)?;
    let robots = last.visible();
    if robots.is_empty() {
        return Err(Error::EmptyObservableSet);
    }
    let first_visible = robots
        .iter()
        .map(|&i| {
            let mut k = frames.len() - 1;
            while k > 0 && frames[k - 1].is_visible(i) {
                k -= 1;
            }
            k
        })
        .collect();
    Ok(ConstantSubset { robots, first_visible })
}

fn observed(frames: &[ObservationFrame], robot: usize, k: usize) -> Result<Vec2> {
    frames
        .get(k)
        .and_then(|f| f.positions.get(robot).copied().flatten())
        .ok_or(Error::MissingObservation { robot, step: k })
}

/// Velocity estimate over steps `k..=k+len`: the mean one-step increment of
/// all robots, which telescopes to the mean end-to-end displacement.
pub fn window_speed(frames: &[ObservationFrame], robots: &[usize], k: usize, len: usize) -> Result<Vec2> {
    if len == 0 {
        return Err(Error::InvalidParameter("window length must be at least 1".into()));
    }
    if k + len >= frames.len() {
        return Err(Error::InsufficientFrames {
            needed: k + len + 1,
            available: frames.len(),
        });
    }
    let mut c = [0.0, 0.0];
    for &i in robots {
        let a = observed(frames, i, k)?;
        let b = observed(frames, i, k + len)?;
        c[0] += b[0] - a[0];
        c[1] += b[1] - a[1];
    }
    let scale = (robots.len() * len) as f64;
    Ok([c[0] / scale, c[1] / scale])
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowEstimate {
    pub speed: Vec2,
    /// Steady offsets, one per robot of the queried list.
    pub offsets: Vec<Vec2>,
}

/// Speed and steady offsets over the window `k..=k+len`. Every robot must be
/// visible on every frame of the window.
pub fn window_estimate(frames: &[ObservationFrame], robots: &[usize], k: usize, len: usize) -> Result<WindowEstimate> {
    let speed = window_speed(frames, robots, k, len)?;
    let mut offsets = Vec::with_capacity(robots.len());
    for &i in robots {
        let mut sum = [0.0, 0.0];
        for t in k + 1..=k + len {
            let z = observed(frames, i, t)?;
            sum[0] += z[0] - speed[0] * t as f64;
            sum[1] += z[1] - speed[1] * t as f64;
        }
        offsets.push([sum[0] / len as f64, sum[1] / len as f64]);
    }
    Ok(WindowEstimate { speed, offsets })
}

/// Thresholds of the steady-pattern stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyParams {
    /// Window length `L_c`.
    pub window: usize,
    /// Threshold constant `epsilon`.
    pub epsilon: f64,
}

impl SteadyParams {
    /// Half-width of the steady-time test, `8 eps / sqrt(L_c)`.
    pub fn steady_threshold(&self) -> f64 {
        8.0 * self.epsilon / (self.window as f64).sqrt()
    }

    /// Confidence half-width of the speed estimate, `4 eps / sqrt(L_c)`.
    pub fn speed_confidence(&self) -> f64 {
        4.0 * self.epsilon / (self.window as f64).sqrt()
    }
}

/// Lower bound on the probability that the speed estimate lies within
/// [`SteadyParams::speed_confidence`] of the truth.
pub fn speed_confidence_probability(n_observed: usize, window: usize, epsilon: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    1.0 - 2.0 * (-(n_observed as f64) * window as f64 * epsilon * epsilon / (sigma * sigma)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedPoint {
    pub k: usize,
    pub speed: Vec2,
}

/// Sliding-window speed estimates for every complete window start.
pub fn speed_series(frames: &[ObservationFrame], subset: &ConstantSubset, window: usize) -> Result<Vec<SpeedPoint>> {
    let start = subset.common_start();
    let k_end = frames.len().saturating_sub(1);
    if window == 0 || k_end < start + window {
        return Err(Error::InsufficientFrames {
            needed: start + window + 1,
            available: frames.len(),
        });
    }
    (start..=k_end - window)
        .map(|k| {
            Ok(SpeedPoint {
                k,
                speed: window_speed(frames, &subset.robots, k, window)?,
            })
        })
        .collect()
}

/// Steady time: first window start whose speed estimate is within the
/// threshold of the final window's, in every dimension. Returns
/// `(k_s, benchmark)`.
pub fn detect_steady_time(
    frames: &[ObservationFrame],
    subset: &ConstantSubset,
    params: &SteadyParams,
) -> Result<(usize, Vec2)> {
    let k_end = frames.len().saturating_sub(1);
    if params.window == 0 || frames.len() < 2 * params.window {
        return Err(Error::InsufficientFrames {
            needed: 2 * params.window.max(1),
            available: frames.len(),
        });
    }
    let start = subset.common_start();
    if k_end < start + params.window {
        return Err(Error::InsufficientFrames {
            needed: start + params.window + 1,
            available: frames.len(),
        });
    }
    let benchmark = window_speed(frames, &subset.robots, k_end - params.window, params.window)?;
    let threshold = params.steady_threshold();
    for k in start..=k_end - params.window {
        let c = window_speed(frames, &subset.robots, k, params.window)?;
        if (c[0] - benchmark[0]).abs() <= threshold && (c[1] - benchmark[1]).abs() <= threshold {
            return Ok((k, benchmark));
        }
    }
    Err(Error::NeverSteady)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderGuess {
    /// Per-robot drift score over the pre-steady window, aligned with the
    /// constant subset.
    pub scores: Vec<f64>,
    /// Indicator aligned with the constant subset.
    pub indicator: Vec<bool>,
    pub leader: Option<usize>,
}

/// Flags the robot whose pre-steady motion already matches the steady
/// velocity. Ties go to the smaller score, then the lower index.
pub fn identify_leader(
    frames: &[ObservationFrame],
    subset: &ConstantSubset,
    k_s: usize,
    benchmark: Vec2,
    params: &SteadyParams,
) -> Result<LeaderGuess> {
    let n = subset.robots.len();
    let k0 = subset.common_start();
    if k_s <= k0 {
        return Ok(LeaderGuess {
            scores: vec![f64::NAN; n],
            indicator: vec![false; n],
            leader: None,
        });
    }
    let span = (k_s - k0) as f64;
    let threshold = params.steady_threshold();
    let mut scores = Vec::with_capacity(n);
    for &i in &subset.robots {
        let a = observed(frames, i, k0)?;
        let b = observed(frames, i, k_s)?;
        let fx = (b[0] - a[0] - span * benchmark[0]).abs() / span;
        let fy = (b[1] - a[1] - span * benchmark[1]).abs() / span;
        scores.push(fx.max(fy));
    }
    let leader_pos = (0..n)
        .filter(|&r| scores[r] <= threshold)
        .min_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut indicator = vec![false; n];
    if let Some(r) = leader_pos {
        indicator[r] = true;
    }
    Ok(LeaderGuess {
        scores,
        indicator,
        leader: leader_pos.map(|r| subset.robots[r]),
    })
}

/// Result of the steady-pattern stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyPattern {
    pub subset: ConstantSubset,
    pub params: SteadyParams,
    pub k_steady: usize,
    pub k_end: usize,
    pub benchmark: Vec2,
    pub speed: Vec2,
    /// Steady offsets aligned with `subset.robots`.
    pub offsets: Vec<Vec2>,
    /// Offsets relative to the reference robot (the lowest observed index).
    pub shape: Vec<Vec2>,
    pub reference: usize,
    pub leader: LeaderGuess,
}

impl SteadyPattern {
    pub fn shape_of(&self, robot: usize) -> Option<Vec2> {
        self.subset.position(robot).map(|r| self.shape[r])
    }
}

/// Final speed and shape over `k_s..=k_end` with the lowest-index robot as
/// reference.
pub fn finalize_pattern(
    frames: &[ObservationFrame],
    subset: &ConstantSubset,
    k_s: usize,
) -> Result<(Vec2, Vec<Vec2>, Vec<Vec2>)> {
    let k_end = frames.len().saturating_sub(1);
    if k_end <= k_s {
        return Err(Error::InsufficientFrames {
            needed: k_s + 2,
            available: frames.len(),
        });
    }
    let est = window_estimate(frames, &subset.robots, k_s, k_end - k_s)?;
    let reference = est.offsets[0];
    let shape = est
        .offsets
        .iter()
        .map(|s| [s[0] - reference[0], s[1] - reference[1]])
        .collect();
    Ok((est.speed, est.offsets, shape))
}

/// Full steady-pattern stage over a passive trace.
pub fn infer_steady_pattern(frames: &[ObservationFrame], params: &SteadyParams) -> Result<SteadyPattern> {
    if !(params.epsilon >= 0.0) {
        return Err(Error::InvalidParameter("epsilon must be non-negative".into()));
    }
    let subset = constant_subset(frames)?;
    let (k_steady, benchmark) = detect_steady_time(frames, &subset, params)?;
    let (speed, offsets, shape) = finalize_pattern(frames, &subset, k_steady)?;
    let leader = identify_leader(frames, &subset, k_steady, benchmark, params)?;
    Ok(SteadyPattern {
        reference: subset.robots[0],
        k_end: frames.len() - 1,
        subset,
        params: *params,
        k_steady,
        benchmark,
        speed,
        offsets,
        shape,
        leader,
    })
}

pub const SPEED_CSV_HEADER: &str = "k,speed_x,speed_y,benchmark_x,benchmark_y,threshold,within";

/// Writes the sliding-window speed series with the steady-time threshold.
pub fn write_speed_csv<W: Write>(
    mut out: W,
    series: &[SpeedPoint],
    benchmark: Vec2,
    threshold: f64,
) -> std::io::Result<()> {
    writeln!(out, "{SPEED_CSV_HEADER}")?;
    for p in series {
        let within = (p.speed[0] - benchmark[0]).abs() <= threshold && (p.speed[1] - benchmark[1]).abs() <= threshold;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.k,
            p.speed[0],
            p.speed[1],
            benchmark[0],
            benchmark[1],
            threshold,
            u8::from(within)
        )?;
    }
    Ok(())
}
