//! Ground-truth network model: weighted digraph, Laplacian, Perron matrix
//! and the constant formation input.
//!
//! Positions are planar. Every matrix quantity acts on each spatial
//! dimension independently, so states are stored as `n x 2` matrices with
//! one column per dimension.

use nalgebra::{Complex, DMatrix};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar vector (metres, or metres per step for velocities).
pub type Vec2 = [f64; 2];

/// Row sums of a valid Perron matrix must equal one within this tolerance.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// Second-largest eigenvalue modulus must stay below `1 - STABILITY_MARGIN`.
pub const STABILITY_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `a_ij > 0` means robot `i` uses information from robot `j`.
    pub adjacency: DMatrix<f64>,
    /// Desired offsets `h0` per robot.
    pub shape: Vec<Vec2>,
    pub leader: usize,
    /// Leader velocity `c0` in m/s.
    pub leader_velocity: Vec2,
    /// Control period `eps_T` in seconds.
    pub control_period: f64,
    pub interaction_range: f64,
    pub obstacle_range: f64,
}

impl NetworkSpec {
    pub fn n(&self) -> usize {
        self.adjacency.nrows()
    }

    /// Weighted in-degrees `d_i = sum_j a_ij`.
    pub fn degrees(&self) -> Vec<f64> {
        self.adjacency.row_iter().map(|r| r.sum()).collect()
    }

    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut l = -self.adjacency.clone();
        for (i, d) in self.degrees().into_iter().enumerate() {
            l[(i, i)] += d;
        }
        l
    }

    /// In-neighbours of robot `i`.
    pub fn in_neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n()).filter(|&j| self.adjacency[(i, j)] > 0.0).collect()
    }

    /// Out-neighbours of robot `j` (robots that listen to `j`).
    pub fn out_neighbors(&self, j: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.adjacency[(i, j)] > 0.0).collect()
    }

    /// Formation velocity per control step, `c = eps_T * c0`.
    pub fn velocity_per_step(&self) -> Vec2 {
        [
            self.control_period * self.leader_velocity[0],
            self.control_period * self.leader_velocity[1],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::InvalidNetwork("network has no robots".into()));
        }
        if self.adjacency.ncols() != n {
            return Err(Error::InvalidNetwork(format!(
                "adjacency is {}x{}, expected square",
                n,
                self.adjacency.ncols()
            )));
        }
        if self.shape.len() != n {
            return Err(Error::InvalidNetwork(format!(
                "shape has {} entries for {} robots",
                self.shape.len(),
                n
            )));
        }
        if self.leader >= n {
            return Err(Error::InvalidNetwork(format!(
                "leader index {} out of range",
                self.leader
            )));
        }
        for i in 0..n {
            if self.adjacency[(i, i)] != 0.0 {
                return Err(Error::InvalidNetwork(format!("self-loop weight on robot {i}")));
            }
            for j in 0..n {
                let a = self.adjacency[(i, j)];
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::InvalidNetwork(format!(
                        "weight a[{i}][{j}] = {a} must be finite and non-negative"
                    )));
                }
            }
        }
        if !(self.control_period > 0.0) {
            return Err(Error::InvalidNetwork("control period must be positive".into()));
        }
        let max_degree = self.degrees().into_iter().fold(0.0, f64::max);
        let product = self.control_period * max_degree;
        if product > 1.0 + 1e-12 {
            return Err(Error::ControlPeriodTooLarge {
                period: self.control_period,
                product,
            });
        }
        if !(self.obstacle_range < self.interaction_range && self.interaction_range.is_finite()) {
            return Err(Error::InvalidNetwork(format!(
                "ranges must satisfy R_o < R_c < inf (R_o = {}, R_c = {})",
                self.obstacle_range, self.interaction_range
            )));
        }
        Ok(())
    }
}

/// `W = I - eps_T * L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerronMatrix {
    w: DMatrix<f64>,
}

impl PerronMatrix {
    /// Wraps an arbitrary square matrix; used for stability checks on
    /// matrices that did not come from a [`NetworkSpec`].
    pub fn from_matrix(w: DMatrix<f64>) -> Self {
        assert!(w.is_square(), "Perron matrix must be square");
        Self { w }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.w.row_iter().map(|r| r.sum()).collect()
    }

    /// Sub-block `W[rows, cols]`.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| self.w[(rows[r], cols[c])])
    }
}

pub fn build_perron(spec: &NetworkSpec) -> Result<PerronMatrix> {
    spec.validate()?;
    let n = spec.n();
    let w = DMatrix::identity(n, n) - spec.laplacian() * spec.control_period;
    Ok(PerronMatrix { w })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    /// Algebraic multiplicity of the eigenvalue 1.
    pub unit_multiplicity: usize,
    /// Largest modulus among the remaining eigenvalues (0 when n = 1).
    pub second_modulus: f64,
    pub eigenvalues: Vec<Complex<f64>>,
    pub passes: bool,
}

/// Checks that eigenvalue 1 is simple and every other eigenvalue lies
/// strictly inside the unit circle.
///
/// For a stochastic matrix the eigenvalue 1 is semisimple, so its algebraic
/// multiplicity equals `n - rank(I - W)`; the rank is taken from the SVD,
/// which is far better conditioned than counting Schur eigenvalues near 1.
pub fn check_stability(w: &PerronMatrix) -> StabilityReport {
    let n = w.n();
    let m = w.matrix();
    let eigenvalues: Vec<Complex<f64>> = m.complex_eigenvalues().iter().copied().collect();

    let defect = DMatrix::identity(n, n) - m;
    let sv = defect.singular_values();
    let scale = sv.iter().copied().fold(1.0, f64::max);
    let rank = sv.iter().filter(|&&s| s > 1e-10 * scale).count();
    let unit_multiplicity = n - rank;

    let mut by_distance: Vec<Complex<f64>> = eigenvalues.clone();
    by_distance.sort_by(|a, b| {
        (a - Complex::new(1.0, 0.0))
            .norm()
            .total_cmp(&(b - Complex::new(1.0, 0.0)).norm())
    });
    let second_modulus = by_distance
        .iter()
        .skip(unit_multiplicity.max(1))
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    let passes = unit_multiplicity == 1 && second_modulus < 1.0 - STABILITY_MARGIN;
    StabilityReport {
        unit_multiplicity,
        second_modulus,
        eigenvalues,
        passes,
    }
}

/// Constant input `u = eps_T (L h0 + e_leader c0)` as an `n x 2` matrix.
///
/// Computed as `(I - W) h0 + eps_T e_leader c0` so that it is consistent
/// with the supplied Perron matrix.
pub fn formation_input(spec: &NetworkSpec, w: &PerronMatrix) -> DMatrix<f64> {
    let n = spec.n();
    let h0 = positions_matrix(&spec.shape);
    let mut u = (DMatrix::identity(n, n) - w.matrix()) * h0;
    let c = spec.velocity_per_step();
    u[(spec.leader, 0)] += c[0];
    u[(spec.leader, 1)] += c[1];
    u
}

/// Steady offsets `s` (relative to the leader's start) reached from
/// `z_0 = s`: the solution of `(I - W)(s - h0) = c (e_leader - 1)` with the
/// leader entry pinned to its shape entry.
///
/// Followers of a moving formation settle behind their nominal shape slot
/// by a tracking lag; this returns the lagged geometry.
pub fn steady_offsets(spec: &NetworkSpec, w: &PerronMatrix) -> Result<Vec<Vec2>> {
    let lag = tracking_lag(spec, w)?;
    Ok(spec
        .shape
        .iter()
        .zip(&lag)
        .map(|(h, d)| [h[0] + d[0], h[1] + d[1]])
        .collect())
}

/// Shape vector `h0` whose steady geometry equals `desired`.
pub fn shape_for_steady_offsets(spec: &NetworkSpec, desired: &[Vec2]) -> Result<Vec<Vec2>> {
    let w = build_perron(spec)?;
    let lag = tracking_lag(spec, &w)?;
    Ok(desired
        .iter()
        .zip(&lag)
        .map(|(s, d)| [s[0] - d[0], s[1] - d[1]])
        .collect())
}

fn tracking_lag(spec: &NetworkSpec, w: &PerronMatrix) -> Result<Vec<Vec2>> {
    let n = spec.n();
    let c = spec.velocity_per_step();
    let followers: Vec<usize> = (0..n).filter(|&i| i != spec.leader).collect();
    let mut lag = vec![[0.0; 2]; n];
    if followers.is_empty() {
        return Ok(lag);
    }
    let m = DMatrix::identity(n, n) - w.matrix();
    let sub = DMatrix::from_fn(followers.len(), followers.len(), |r, col| {
        m[(followers[r], followers[col])]
    });
    let lu = sub.lu();
    for dim in 0..2 {
        let rhs = nalgebra::DVector::from_element(followers.len(), -c[dim]);
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidNetwork("leader does not reach every follower".into()))?;
        for (k, &i) in followers.iter().enumerate() {
            lag[i][dim] = sol[k];
        }
    }
    Ok(lag)
}

/// `n x 2` matrix from a list of planar points.
pub fn positions_matrix(points: &[Vec2]) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), 2, |i, d| points[i][d])
}

pub fn matrix_positions(m: &DMatrix<f64>) -> Vec<Vec2> {
    (0..m.nrows()).map(|i| [m[(i, 0)], m[(i, 1)]]).collect()
}

/// Random directed network with a spanning tree rooted at the leader
/// (robot 0). Weights are uniform in `[0.1, 1.0]` and the control period is
/// `0.9 / max_i d_i`, so the stability assumption holds generically.
///
/// Shape offsets are uniform in a `10 x 10` m box; ranges are set loosely
/// because generated networks are not geometric.
pub fn random_network<R: Rng + ?Sized>(rng: &mut R, n: usize, extra_edge_prob: f64) -> NetworkSpec {
    assert!(n >= 1);
    let mut adjacency = DMatrix::zeros(n, n);
    let mut order: Vec<usize> = (1..n).collect();
    for k in (1..order.len()).rev() {
        let j = rng.gen_range(0..=k);
        order.swap(k, j);
    }
    let mut attached = vec![0usize];
    for &i in &order {
        let parent = attached[rng.gen_range(0..attached.len())];
        adjacency[(i, parent)] = rng.gen_range(0.1..=1.0);
        attached.push(i);
    }
    for i in 1..n {
        for j in 0..n {
            if i != j && adjacency[(i, j)] == 0.0 && rng.gen_bool(extra_edge_prob) {
                adjacency[(i, j)] = rng.gen_range(0.1..=1.0);
            }
        }
    }
    let max_degree = (0..n).map(|i| adjacency.row(i).sum()).fold(0.0_f64, f64::max);
    let control_period = if max_degree > 0.0 { 0.9 / max_degree } else { 1.0 };
    let shape = (0..n)
        .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
        .collect();
    NetworkSpec {
        adjacency,
        shape,
        leader: 0,
        leader_velocity: [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
        control_period,
        interaction_range: 1.0e3,
        obstacle_range: 0.5,
    }
}
