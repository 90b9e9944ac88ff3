use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::graph::{LinkNoise, NetworkGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Line,
    Ring,
    /// Breadth-first binary tree rooted at agent 1.
    Tree,
    /// Ring plus "diameter" chords, 3-regular for even `L`.
    Degree3,
    /// Edge list given in the scenario file.
    Explicit,
}

impl TopologyKind {
    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::Line => "line",
            TopologyKind::Ring => "ring",
            TopologyKind::Tree => "tree",
            TopologyKind::Degree3 => "degree3",
            TopologyKind::Explicit => "explicit",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TopologyKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "line" => Ok(TopologyKind::Line),
            "ring" => Ok(TopologyKind::Ring),
            "tree" => Ok(TopologyKind::Tree),
            "degree3" | "degree-3" => Ok(TopologyKind::Degree3),
            "explicit" => Ok(TopologyKind::Explicit),
            _ => Err(ExperimentError::Config(format!("unknown topology `{s}`"))),
        }
    }
}

/// 1-based edge pairs of a generated topology.
pub fn topology_pairs(kind: TopologyKind, agents: usize) -> Result<Vec<(usize, usize)>, ExperimentError> {
    if agents < 2 {
        return Err(ExperimentError::Config(format!("topologies need at least 2 agents, got {agents}")));
    }
    let l = agents;
    let mut pairs: Vec<(usize, usize)> = match kind {
        TopologyKind::Line => (1..l).map(|i| (i, i + 1)).collect(),
        TopologyKind::Ring | TopologyKind::Degree3 if l == 2 => vec![(1, 2)],
        TopologyKind::Ring | TopologyKind::Degree3 => (1..=l).map(|i| (i, i % l + 1)).collect(),
        TopologyKind::Tree => (2..=l).map(|i| (i / 2, i)).collect(),
        TopologyKind::Explicit => {
            return Err(ExperimentError::Config("explicit topology needs an edge list".into()))
        }
    };
    if kind == TopologyKind::Degree3 && l > 3 {
        // Chords at half the ring length. For odd L the chord length is
        // ⌊L/2⌋ and agent L keeps degree 2.
        let half = l / 2;
        let chords = if l % 2 == 0 { half } else { (l - 1) / 2 };
        for i in 1..=chords {
            let j = i + half;
            let edge = (i.min(j), i.max(j));
            if !pairs.iter().any(|&(a, b)| (a.min(b), a.max(b)) == edge) {
                pairs.push(edge);
            }
        }
    }
    Ok(pairs)
}

pub fn make_topology(kind: TopologyKind, agents: usize) -> Result<NetworkGraph, ExperimentError> {
    Ok(NetworkGraph::from_pairs(agents, topology_pairs(kind, agents)?)?)
}

/// Independent `μ, σ² ~ U[low, high]` per link, shared by both directions.
pub fn sample_link_noise<R: Rng + ?Sized>(
    graph: &NetworkGraph,
    low: f64,
    high: f64,
    rng: &mut R,
) -> Result<NetworkGraph, ExperimentError> {
    if !(0.0 <= low && low <= high && high.is_finite()) {
        return Err(ExperimentError::Config(format!("noise range [{low}, {high}] is invalid")));
    }
    let mut draw = || if high > low { rng.gen_range(low..=high) } else { low };
    let draws: Vec<(f64, f64)> = graph.edges().iter().map(|_| (draw(), draw())).collect();
    let mut i = 0;
    Ok(graph.map_noise(|_| {
        let (mu, sigma2) = draws[i];
        i += 1;
        LinkNoise { mu, sigma2 }
    }))
}
