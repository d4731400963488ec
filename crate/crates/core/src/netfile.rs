//! Network description files.
//!
//! A network file is TOML with a mandatory `[network]` table and optional
//! `[scenario]` and `[inference]` tables. Robot ids are 1-based.
//!
//! ```toml
//! [network]
//! robots = 3
//! leader = 1
//! leader_velocity = [0.3, 0.0]
//! control_period = 1.0
//! interaction_range = 5.0
//! obstacle_range = 1.5
//! edges = [
//!   { to = 2, from = 1, weight = 0.5 },
//!   { to = 3, from = 2, weight = 0.5 },
//! ]
//! shape = [[0.0, 0.0], [-2.0, 0.0], [-4.0, 0.0]]
//! ```
//!
//! Weights may instead be given as a dense `adjacency` matrix, row `i`
//! holding the weights robot `i` puts on every other robot. The geometry is
//! given either as `shape` (the desired offsets fed to the controller) or as
//! `steady` (the geometry the moving formation should settle into, from
//! which the controller offsets are derived).

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{shape_for_steady_offsets, NetworkSpec, Vec2};
use crate::sim::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub to: usize,
    pub from: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    robots: usize,
    leader: usize,
    leader_velocity: Vec2,
    control_period: f64,
    interaction_range: f64,
    obstacle_range: f64,
    #[serde(default)]
    adjacency: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    edges: Option<Vec<Edge>>,
    #[serde(default)]
    shape: Option<Vec<Vec2>>,
    #[serde(default)]
    steady: Option<Vec<Vec2>>,
}

/// Per-network defaults for the inference stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceHints {
    /// Upper bound on the interaction range used to pick the auxiliary rows.
    pub rc_upper: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    network: RawNetwork,
    #[serde(default)]
    scenario: Option<ScenarioConfig>,
    #[serde(default)]
    inference: Option<InferenceHints>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkFile {
    pub spec: NetworkSpec,
    pub scenario: ScenarioConfig,
    pub hints: InferenceHints,
}

pub fn parse_network(text: &str, origin: &Path) -> Result<NetworkFile> {
    let parse_err = |message: String| Error::Parse {
        path: origin.to_path_buf(),
        message,
    };
    let raw: RawFile = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    let net = raw.network;
    let n = net.robots;
    if n == 0 {
        return Err(parse_err("robots must be at least 1".into()));
    }
    let robot = |id: usize, what: &str| -> Result<usize> {
        if id == 0 || id > n {
            Err(parse_err(format!("{what} id {id} outside 1..={n}")))
        } else {
            Ok(id - 1)
        }
    };
    let adjacency = match (net.adjacency, net.edges) {
        (Some(rows), None) => {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(parse_err(format!("adjacency must be {n}x{n}")));
            }
            DMatrix::from_fn(n, n, |i, j| rows[i][j])
        }
        (None, Some(edges)) => {
            let mut a = DMatrix::zeros(n, n);
            for e in edges {
                let (i, j) = (robot(e.to, "edge target")?, robot(e.from, "edge source")?);
                if a[(i, j)] != 0.0 {
                    return Err(parse_err(format!("duplicate edge {} <- {}", e.to, e.from)));
                }
                a[(i, j)] = e.weight;
            }
            a
        }
        (Some(_), Some(_)) => return Err(parse_err("give either adjacency or edges, not both".into())),
        (None, None) => return Err(parse_err("missing adjacency or edges".into())),
    };
    let mut spec = NetworkSpec {
        adjacency,
        shape: vec![[0.0; 2]; n],
        leader: robot(net.leader, "leader")?,
        leader_velocity: net.leader_velocity,
        control_period: net.control_period,
        interaction_range: net.interaction_range,
        obstacle_range: net.obstacle_range,
    };
    match (net.shape, net.steady) {
        (Some(shape), None) => {
            if shape.len() != n {
                return Err(parse_err(format!("shape needs {n} entries")));
            }
            spec.shape = shape;
        }
        (None, Some(steady)) => {
            if steady.len() != n {
                return Err(parse_err(format!("steady needs {n} entries")));
            }
            spec.validate()?;
            spec.shape = shape_for_steady_offsets(&spec, &steady)?;
        }
        _ => return Err(parse_err("give exactly one of shape or steady".into())),
    }
    spec.validate()?;
    let scenario = raw.scenario.unwrap_or_default();
    scenario.validate()?;
    Ok(NetworkFile {
        spec,
        scenario,
        hints: raw.inference.unwrap_or_default(),
    })
}

pub fn load_network(path: &Path) -> Result<NetworkFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_network(&text, path)
}

/// The bundled 11-robot example network.
pub const FIG3_NET: &str = include_str!("../data/fig3.net");

pub fn fig3() -> NetworkFile {
    parse_network(FIG3_NET, Path::new("fig3.net")).expect("bundled network file is valid")
}
