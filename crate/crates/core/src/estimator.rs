//! Local topology estimation from filtered observations.
//!
//! Rows are the robots whose in-neighbours are all observed (the range-shrink
//! set `V_H`), columns the whole observed set `V_F`. Each spatial dimension
//! contributes its own block of columns.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{least_squares, median, spectral_norm};
use crate::network::{build_perron, steady_offsets, NetworkSpec, Vec2};
use crate::sim::{distance, ObservationFrame};

/// Which rows have the formation drift removed from their response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftCompensation {
    /// Subtract `c` from every row. Exact when the shape estimate is built
    /// from steady offsets, since those already absorb the leader drive.
    #[default]
    AllRows,
    /// Subtract `c` from the leader row only.
    LeaderOnly,
}

/// Speed and shape the filter subtracts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternInput {
    pub speed: Vec2,
    /// Shape per observed robot, aligned with the column set.
    pub shape: Vec<Vec2>,
    pub leader: Option<usize>,
}

impl PatternInput {
    /// Ground-truth speed and steady shape, for diagnostics.
    pub fn exact(spec: &NetworkSpec, robots: &[usize]) -> Result<Self> {
        let w = build_perron(spec)?;
        let s = steady_offsets(spec, &w)?;
        Ok(Self {
            speed: spec.velocity_per_step(),
            shape: robots.iter().map(|&i| s[i]).collect(),
            leader: robots.contains(&spec.leader).then_some(spec.leader),
        })
    }
}

/// Regressors `X` (observed set) and responses `Y` (estimated rows) over
/// `count` transitions starting at `start`, x columns then y columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredObservations {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub cols: Vec<usize>,
    pub rows: Vec<usize>,
    pub start: usize,
    pub count: usize,
}

impl FilteredObservations {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        frames: &[ObservationFrame],
        cols: &[usize],
        rows: &[usize],
        pattern: &PatternInput,
        start: usize,
        count: usize,
        compensation: DriftCompensation,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidParameter("observation count must be at least 1".into()));
        }
        if pattern.shape.len() != cols.len() {
            return Err(Error::InvalidParameter("shape length differs from observed set".into()));
        }
        if start + count >= frames.len() {
            return Err(Error::InsufficientFrames {
                needed: start + count + 1,
                available: frames.len(),
            });
        }
        let col_of = |robot: usize| cols.iter().position(|&c| c == robot);
        let row_shape: Vec<Vec2> = rows
            .iter()
            .map(|&r| {
                col_of(r)
                    .map(|c| pattern.shape[c])
                    .ok_or_else(|| Error::InvalidParameter(format!("row robot {} is not in the observed set", r + 1)))
            })
            .collect::<Result<_>>()?;
        let get = |robot: usize, k: usize| {
            frames[k].positions[robot].ok_or(Error::MissingObservation {
                robot: robot + 1,
                step: k,
            })
        };
        let mut x = DMatrix::zeros(cols.len(), 2 * count);
        let mut y = DMatrix::zeros(rows.len(), 2 * count);
        for t in 0..count {
            let k = start + t;
            for (c, &robot) in cols.iter().enumerate() {
                let p = get(robot, k)?;
                for d in 0..2 {
                    x[(c, d * count + t)] = p[d] - pattern.shape[c][d];
                }
            }
            for (r, &robot) in rows.iter().enumerate() {
                let p = get(robot, k + 1)?;
                let drift = match compensation {
                    DriftCompensation::AllRows => true,
                    DriftCompensation::LeaderOnly => pattern.leader == Some(robot),
                };
                for d in 0..2 {
                    let c = if drift { pattern.speed[d] } else { 0.0 };
                    y[(r, d * count + t)] = p[d] - row_shape[r][d] - c;
                }
            }
        }
        Ok(Self {
            x,
            y,
            cols: cols.to_vec(),
            rows: rows.to_vec(),
            start,
            count,
        })
    }

    /// Same regressors with the response rows replaced by `rows`.
    pub fn with_rows(&self, rows: &[usize]) -> Result<Self> {
        let picks: Vec<usize> = rows
            .iter()
            .map(|r| {
                self.rows
                    .iter()
                    .position(|x| x == r)
                    .ok_or_else(|| Error::InvalidParameter(format!("robot {} has no response row", r + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            y: self.y.select_rows(picks.iter()),
            rows: rows.to_vec(),
            ..self.clone()
        })
    }

    /// Keeps the columns listed in `picks` (positions into `self.x`'s columns).
    fn resample(&self, picks: &[usize]) -> Self {
        Self {
            x: self.x.select_columns(picks.iter()),
            y: self.y.select_columns(picks.iter()),
            ..self.clone()
        }
    }
}

/// Steady-stage distances, averaged over the window ending at the last
/// passive frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyGeometry {
    pub robots: Vec<usize>,
    /// Distance of each robot to the inference robot.
    pub to_observer: Vec<f64>,
    /// Pairwise distances aligned with `robots`.
    pub pairwise: DMatrix<f64>,
}

impl SteadyGeometry {
    pub fn measure(
        frames: &[ObservationFrame],
        observer: &[Vec2],
        robots: &[usize],
        k_end: usize,
        window: usize,
    ) -> Result<Self> {
        if k_end >= frames.len() || k_end >= observer.len() {
            return Err(Error::InsufficientFrames {
                needed: k_end + 1,
                available: frames.len().min(observer.len()),
            });
        }
        let first = (k_end + 1).saturating_sub(window.max(1));
        let n = robots.len();
        let mut to_observer = vec![(0.0, 0usize); n];
        let mut pairwise = vec![(0.0, 0usize); n * n];
        for k in first..=k_end {
            let pos: Vec<Option<Vec2>> = robots.iter().map(|&i| frames[k].positions[i]).collect();
            for a in 0..n {
                let Some(pa) = pos[a] else { continue };
                let e = &mut to_observer[a];
                e.0 += distance(pa, observer[k]);
                e.1 += 1;
                for b in a + 1..n {
                    if let Some(pb) = pos[b] {
                        let e = &mut pairwise[a * n + b];
                        e.0 += distance(pa, pb);
                        e.1 += 1;
                    }
                }
            }
        }
        let mean = |(s, c): (f64, usize)| if c == 0 { f64::INFINITY } else { s / c as f64 };
        let pairwise = DMatrix::from_fn(n, n, |a, b| match a.cmp(&b) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Less => mean(pairwise[a * n + b]),
            std::cmp::Ordering::Greater => mean(pairwise[b * n + a]),
        });
        Ok(Self {
            robots: robots.to_vec(),
            to_observer: to_observer.into_iter().map(mean).collect(),
            pairwise,
        })
    }

    /// Robots no farther than `radius` from the inference robot.
    pub fn within(&self, radius: f64) -> Vec<usize> {
        self.robots
            .iter()
            .zip(&self.to_observer)
            .filter(|(_, &d)| d <= radius)
            .map(|(&r, _)| r)
            .collect()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let pa = self.robots.iter().position(|&r| r == a).expect("robot in geometry");
        let pb = self.robots.iter().position(|&r| r == b).expect("robot in geometry");
        self.pairwise[(pa, pb)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Truncated,
    Ols,
    Constrained,
    Rowwise,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Truncated => "truncated",
            Method::Ols => "ols",
            Method::Constrained => "constrained",
            Method::Rowwise => "rowwise",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyEstimate {
    pub method: Method,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// Unresolved rows hold NaN.
    pub matrix: DMatrix<f64>,
    pub resolved: Vec<bool>,
    pub rc_used: Option<f64>,
    /// Worst condition number among the solves.
    pub condition: f64,
}

impl TopologyEstimate {
    pub fn unresolved(&self) -> Vec<usize> {
        self.rows
            .iter()
            .zip(&self.resolved)
            .filter(|(_, &ok)| !ok)
            .map(|(&r, _)| r)
            .collect()
    }

    /// Spectral and per-entry average error over the resolved rows.
    pub fn error(&self, truth: &DMatrix<f64>) -> EstimateError {
        assert_eq!(truth.shape(), self.matrix.shape(), "truth block shape mismatch");
        let keep: Vec<usize> = (0..self.rows.len()).filter(|&r| self.resolved[r]).collect();
        let diff = self.matrix.select_rows(keep.iter()) - truth.select_rows(keep.iter());
        let spectral = spectral_norm(&diff);
        let cells = (self.rows.len() * self.cols.len()).max(1) as f64;
        EstimateError {
            spectral,
            average: spectral / cells,
        }
    }

    /// Rows restricted to `rows`, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let picks: Vec<usize> = rows
            .iter()
            .map(|r| self.rows.iter().position(|x| x == r).expect("row present"))
            .collect();
        Self {
            rows: rows.to_vec(),
            matrix: self.matrix.select_rows(picks.iter()),
            resolved: picks.iter().map(|&p| self.resolved[p]).collect(),
            ..self.clone()
        }
    }

    /// Matrix with robot-id headers; unresolved rows are left blank.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "robot")?;
        for c in &self.cols {
            write!(out, ",{}", c + 1)?;
        }
        writeln!(out)?;
        for (r, robot) in self.rows.iter().enumerate() {
            write!(out, "{}", robot + 1)?;
            for c in 0..self.cols.len() {
                if self.resolved[r] {
                    write!(out, ",{}", self.matrix[(r, c)])?;
                } else {
                    write!(out, ",")?;
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateError {
    pub spectral: f64,
    pub average: f64,
}

/// Ground-truth `W` block for the given rows and columns.
pub fn truth_block(spec: &NetworkSpec, rows: &[usize], cols: &[usize]) -> Result<DMatrix<f64>> {
    Ok(build_perron(spec)?.block(rows, cols))
}

fn solve_rows(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let fit = least_squares(&x.transpose(), &y.transpose())?;
    Ok((fit.coef.transpose(), fit.condition))
}

/// Plain least squares of every response row on every observed column.
pub fn ols_estimate(obs: &FilteredObservations) -> Result<TopologyEstimate> {
    let (matrix, condition) = solve_rows(&obs.x, &obs.y)?;
    Ok(TopologyEstimate {
        method: Method::Ols,
        rows: obs.rows.clone(),
        cols: obs.cols.clone(),
        resolved: vec![true; obs.rows.len()],
        matrix,
        rc_used: None,
        condition,
    })
}

/// Least squares over every observed robot as a response, ignoring that
/// some of them have unobserved in-neighbours.
pub fn truncated_estimate(obs: &FilteredObservations) -> Result<TopologyEstimate> {
    let full = obs.with_rows(&obs.cols.clone())?;
    let mut est = ols_estimate(&full)?;
    est.method = Method::Truncated;
    Ok(est)
}

/// Least squares with only the columns in `allowed` free; the rest of each
/// row is zero.
pub fn restricted_estimate(obs: &FilteredObservations, allowed: &[usize]) -> Result<(DMatrix<f64>, f64)> {
    let picks: Vec<usize> = (0..obs.cols.len())
        .filter(|&c| allowed.contains(&obs.cols[c]))
        .collect();
    let mut full = DMatrix::zeros(obs.rows.len(), obs.cols.len());
    if picks.is_empty() {
        return Ok((full, 1.0));
    }
    let (part, condition) = solve_rows(&obs.x.select_rows(picks.iter()), &obs.y)?;
    for (k, &c) in picks.iter().enumerate() {
        full.set_column(c, &part.column(k));
    }
    Ok((full, condition))
}

/// Row-by-row least squares with `w_ij` forced to zero whenever robots `i`
/// and `j` are farther apart than `rc`.
pub fn constrained_estimate(
    obs: &FilteredObservations,
    geometry: &SteadyGeometry,
    rc: f64,
) -> Result<TopologyEstimate> {
    let mut matrix = DMatrix::zeros(obs.rows.len(), obs.cols.len());
    let mut condition: f64 = 1.0;
    for (r, &i) in obs.rows.iter().enumerate() {
        let support: Vec<usize> = (0..obs.cols.len())
            .filter(|&c| geometry.distance(i, obs.cols[c]) <= rc)
            .collect();
        if support.is_empty() {
            continue;
        }
        let x = obs.x.select_rows(support.iter());
        let y = obs.y.rows(r, 1).into_owned();
        let (row, cond) = solve_rows(&x, &y)?;
        condition = condition.max(cond);
        for (k, &c) in support.iter().enumerate() {
            matrix[(r, c)] = row[(0, k)];
        }
    }
    Ok(TopologyEstimate {
        method: Method::Constrained,
        rows: obs.rows.clone(),
        cols: obs.cols.clone(),
        resolved: vec![true; obs.rows.len()],
        matrix,
        rc_used: Some(rc),
        condition,
    })
}

/// Inputs for row-by-row estimation when robots entered view at different
/// steps.
#[derive(Debug, Clone)]
pub struct RowwiseInput<'a> {
    pub frames: &'a [ObservationFrame],
    pub cols: &'a [usize],
    /// First continuously visible step per column robot.
    pub first_visible: &'a [usize],
    pub rows: &'a [usize],
    pub pattern: &'a PatternInput,
    pub geometry: &'a SteadyGeometry,
    /// Last transition used is `end - 1 -> end`.
    pub end: usize,
    pub compensation: DriftCompensation,
}

/// Each row uses the robots within `rc` of it and every step from which all
/// of them are visible. Rows with fewer transitions than unknowns are left
/// unresolved.
pub fn rowwise_estimate(input: &RowwiseInput<'_>, rc: f64) -> Result<TopologyEstimate> {
    let n_f = input.cols.len();
    let mut matrix = DMatrix::from_element(input.rows.len(), n_f, f64::NAN);
    let mut resolved = vec![false; input.rows.len()];
    let mut condition: f64 = 1.0;
    let col_of = |robot: usize| input.cols.iter().position(|&c| c == robot);
    for (r, &i) in input.rows.iter().enumerate() {
        let ci = col_of(i)
            .ok_or_else(|| Error::InvalidParameter(format!("row robot {} is not in the observed set", i + 1)))?;
        let support: Vec<usize> = (0..n_f)
            .filter(|&c| c == ci || input.geometry.distance(i, input.cols[c]) <= rc)
            .collect();
        let start = support.iter().map(|&c| input.first_visible[c]).max().unwrap_or(0);
        if input.end <= start || input.end - start < support.len() {
            continue;
        }
        let cols: Vec<usize> = support.iter().map(|&c| input.cols[c]).collect();
        let pattern = PatternInput {
            speed: input.pattern.speed,
            shape: support.iter().map(|&c| input.pattern.shape[c]).collect(),
            leader: input.pattern.leader,
        };
        let obs = FilteredObservations::build(
            input.frames,
            &cols,
            &[i],
            &pattern,
            start,
            input.end - start,
            input.compensation,
        )?;
        let Ok((row, cond)) = solve_rows(&obs.x, &obs.y) else {
            continue;
        };
        condition = condition.max(cond);
        for c in 0..n_f {
            matrix[(r, c)] = 0.0;
        }
        for (k, &c) in support.iter().enumerate() {
            matrix[(r, c)] = row[(0, k)];
        }
        resolved[r] = true;
    }
    Ok(TopologyEstimate {
        method: Method::Rowwise,
        rows: input.rows.to_vec(),
        cols: input.cols.to_vec(),
        matrix,
        resolved,
        rc_used: Some(rc),
        condition,
    })
}

/// Auxiliary rows and column distances for judging a candidate range.
#[derive(Debug, Clone)]
pub struct RangeProbe {
    /// Responses restricted to the auxiliary rows.
    pub obs: FilteredObservations,
    /// Observer distance per column.
    pub col_distance: Vec<f64>,
    /// Radius of the auxiliary set.
    pub aux_radius: f64,
}

impl RangeProbe {
    /// Auxiliary rows are the robots within `observation_range - rc_bound`.
    pub fn new(
        obs: &FilteredObservations,
        geometry: &SteadyGeometry,
        observation_range: f64,
        rc_bound: f64,
    ) -> Result<Self> {
        let aux_radius = observation_range - rc_bound;
        let aux: Vec<usize> = geometry
            .within(aux_radius)
            .into_iter()
            .filter(|r| obs.cols.contains(r))
            .collect();
        if aux.is_empty() {
            return Err(Error::EmptyAuxiliarySet { radius: aux_radius });
        }
        let col_distance = obs
            .cols
            .iter()
            .map(|&c| {
                let p = geometry
                    .robots
                    .iter()
                    .position(|&r| r == c)
                    .expect("column in geometry");
                geometry.to_observer[p]
            })
            .collect();
        Ok(Self {
            obs: obs.with_rows(&aux)?,
            col_distance,
            aux_radius,
        })
    }

    pub fn aux_rows(&self) -> &[usize] {
        &self.obs.rows
    }

    /// Columns considered reachable under a candidate range.
    pub fn columns_for(&self, rc: f64) -> Vec<usize> {
        self.obs
            .cols
            .iter()
            .zip(&self.col_distance)
            .filter(|(_, &d)| d <= self.aux_radius + rc)
            .map(|(&c, _)| c)
            .collect()
    }

    /// Auxiliary-row estimate under a candidate range.
    pub fn estimate(&self, rc: f64) -> Result<DMatrix<f64>> {
        Ok(restricted_estimate(&self.obs, &self.columns_for(rc))?.0)
    }

    /// Distance of the candidate-range estimate from the one at `reference`.
    pub fn empirical_bias(&self, rc: f64, reference: &DMatrix<f64>) -> Result<f64> {
        Ok(spectral_norm(&(self.estimate(rc)? - reference)))
    }

    /// Distance of the candidate-range estimate from the true block.
    pub fn asymptotic_bias(&self, rc: f64, truth: &DMatrix<f64>) -> Result<f64> {
        Ok(spectral_norm(&(self.estimate(rc)? - truth)))
    }

    /// Median spread of the reference estimate under column resampling.
    pub fn noise_floor<R: Rng + ?Sized>(&self, rc_upper: f64, resamples: usize, rng: &mut R) -> Result<f64> {
        let cols = self.columns_for(rc_upper);
        let reference = restricted_estimate(&self.obs, &cols)?.0;
        let total = self.obs.x.ncols();
        let mut spreads = Vec::with_capacity(resamples);
        for _ in 0..resamples {
            let picks: Vec<usize> = (0..total).map(|_| rng.gen_range(0..total)).collect();
            let sample = self.obs.resample(&picks);
            let Ok((w, _)) = restricted_estimate(&sample, &cols) else {
                continue;
            };
            spreads.push(spectral_norm(&(w - &reference)));
        }
        if spreads.is_empty() {
            return Err(Error::RankDeficient {
                condition: f64::INFINITY,
            });
        }
        Ok(median(&mut spreads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchParams {
    /// Consecutive non-exceeding probes that end the search.
    pub n_w: usize,
    /// The search stops once the bracket is narrower than this.
    pub min_width: f64,
    /// Decision threshold as a multiple of the noise floor.
    pub floor_factor: f64,
    /// Threshold used when the noise floor is (numerically) zero.
    pub min_threshold: f64,
    pub resamples: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            n_w: 3,
            min_width: 0.05,
            floor_factor: 2.0,
            min_threshold: 1e-9,
            resamples: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeEstimate {
    pub rc_lower: f64,
    pub rc_upper: f64,
    pub rc_hat: f64,
    /// Bracket width when the search stopped.
    pub resolution: f64,
    pub threshold: f64,
    /// Probed `(range, bias)` pairs in order.
    pub history: Vec<(f64, f64)>,
}

/// Bisection on `[lower, upper]`: a probe whose bias exceeds `threshold`
/// raises the lower end and resets the counter, otherwise the upper end
/// drops and the counter grows; the upper end is returned once the counter
/// reaches `n_w` or the bracket is narrower than `min_width`.
pub fn search_rc<F>(
    lower: f64,
    upper: f64,
    threshold: f64,
    n_w: usize,
    min_width: f64,
    mut bias: F,
) -> Result<RangeEstimate>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(lower <= upper) || n_w == 0 {
        return Err(Error::InvalidParameter(format!(
            "range search needs lower <= upper and n_w >= 1 (got [{lower}, {upper}], n_w = {n_w})"
        )));
    }
    let (mut lo, mut hi, mut count) = (lower, upper, 0usize);
    let mut history = Vec::new();
    while hi - lo >= min_width {
        let mid = 0.5 * (lo + hi);
        let f = bias(mid)?;
        history.push((mid, f));
        if f > threshold {
            lo = mid;
            count = 1;
        } else {
            hi = mid;
            count += 1;
            if count >= n_w {
                break;
            }
        }
    }
    Ok(RangeEstimate {
        rc_lower: lower,
        rc_upper: upper,
        rc_hat: hi,
        resolution: hi - lo,
        threshold,
        history,
    })
}

/// Range search with the decision threshold set from the bootstrap noise
/// floor of the reference estimate.
pub fn search_range<R: Rng + ?Sized>(
    probe: &RangeProbe,
    lower: f64,
    upper: f64,
    params: &SearchParams,
    rng: &mut R,
) -> Result<RangeEstimate> {
    let floor = probe.noise_floor(upper, params.resamples, rng)?;
    let threshold = (params.floor_factor * floor).max(params.min_threshold);
    let reference = probe.estimate(upper)?;
    search_rc(lower, upper, threshold, params.n_w, params.min_width, |rc| {
        probe.empirical_bias(rc, &reference)
    })
}
