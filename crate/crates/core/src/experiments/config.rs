use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::topology::{make_topology, TopologyKind};
use super::ExperimentError;
use crate::dst::DstConfig;
use crate::dynamics::MasModel;
use crate::graph::{LinkNoise, NetworkGraph};
use crate::learner::{InitialState, TrainConfig};
use crate::messaging::Estimation;

/// A scenario file. Top-level keys come before the `[model]`, `[network]`,
/// `[train]` and `[method]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_id")]
    pub scenario_id: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Steps of the in-network evaluation rollout.
    #[serde(default = "default_horizon")]
    pub eval_horizon: usize,
    /// Noise realizations averaged by the evaluation.
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_eval_initial")]
    pub eval_initial_state: InitialState,
    pub model: ModelSpec,
    pub network: NetworkSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub method: MethodSpec,
}

fn default_id() -> String {
    "scenario".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}
fn default_horizon() -> usize {
    20
}
fn default_eval_episodes() -> usize {
    20
}
fn default_eval_initial() -> InitialState {
    InitialState::Ones
}

/// Either a named preset or inline matrices given as lists of rows.
/// Omitted `b`, `s`, `r` default to identities.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub preset: Option<String>,
    pub agents: Option<usize>,
    #[serde(default = "one")]
    pub state_dim: usize,
    #[serde(default = "one")]
    pub input_dim: usize,
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
    pub s: Option<Vec<Vec<f64>>>,
    pub r: Option<Vec<Vec<f64>>>,
}

fn one() -> usize {
    1
}

fn matrix(name: &str, rows: &[Vec<f64>], expect: (usize, usize)) -> Result<DMatrix<f64>, ExperimentError> {
    if rows.len() != expect.0 || rows.iter().any(|r| r.len() != expect.1) {
        return Err(ExperimentError::Config(format!(
            "model.{name} must be {}x{}",
            expect.0, expect.1
        )));
    }
    Ok(DMatrix::from_fn(expect.0, expect.1, |i, j| rows[i][j]))
}

impl ModelSpec {
    pub fn build(&self) -> Result<MasModel, ExperimentError> {
        match (&self.preset, &self.a) {
            (Some(name), None) => Ok(MasModel::preset(name)?),
            (None, Some(a)) => {
                let agents = self
                    .agents
                    .ok_or_else(|| ExperimentError::Config("model.agents is required with inline matrices".into()))?;
                let nx = agents * self.state_dim;
                let nu = agents * self.input_dim;
                let or_eye = |name: &str, m: &Option<Vec<Vec<f64>>>, rows: usize, cols: usize| match m {
                    Some(m) => matrix(name, m, (rows, cols)),
                    None if rows == cols => Ok(DMatrix::identity(rows, cols)),
                    None => Err(ExperimentError::Config(format!("model.{name} is required"))),
                };
                Ok(MasModel::new(
                    agents,
                    self.state_dim,
                    self.input_dim,
                    matrix("a", a, (nx, nx))?,
                    or_eye("b", &self.b, nx, nu)?,
                    or_eye("s", &self.s, nx, nx)?,
                    or_eye("r", &self.r, nu, nu)?,
                )?)
            }
            _ => Err(ExperimentError::Config(
                "model needs exactly one of `preset` or `a`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum NoiseSpec {
    None,
    /// The same moments on every link.
    Fixed { mu: f64, sigma2: f64 },
    /// `μ, σ² ~ U[low, high]` per link, drawn from the seed.
    Sampled {
        #[serde(default)]
        low: f64,
        #[serde(default = "default_high")]
        high: f64,
    },
}

fn default_high() -> f64 {
    0.1
}

/// A link of an explicit topology, optionally with its own noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub a: usize,
    pub b: usize,
    pub mu: Option<f64>,
    pub sigma2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub topology: TopologyKind,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
    pub lambda: f64,
    #[serde(default = "default_noise")]
    pub noise: NoiseSpec,
    #[serde(default = "yes")]
    pub delays: bool,
    /// Estimation used by CDNet; DST and OPT always read raw values.
    #[serde(default = "default_estimation")]
    pub estimation: Estimation,
}

fn default_noise() -> NoiseSpec {
    NoiseSpec::None
}
fn yes() -> bool {
    true
}
fn default_estimation() -> Estimation {
    Estimation::Refined
}

impl NetworkSpec {
    /// Topology with the noise of explicit edges applied; generated and
    /// sampled noise is layered on by the runner.
    pub fn base_graph(&self, agents: usize) -> Result<NetworkGraph, ExperimentError> {
        if self.topology != TopologyKind::Explicit {
            if !self.edges.is_empty() {
                return Err(ExperimentError::Config(
                    "network.edges is only allowed with topology = \"explicit\"".into(),
                ));
            }
            return make_topology(self.topology, agents);
        }
        let edges = self
            .edges
            .iter()
            .map(|e| {
                let noise = LinkNoise::new(e.mu.unwrap_or(0.0), e.sigma2.unwrap_or(0.0))?;
                Ok((e.a, e.b, noise))
            })
            .collect::<Result<Vec<_>, ExperimentError>>()?;
        Ok(NetworkGraph::new(agents, edges)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cdnet,
    Dst,
    Opt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cdnet => "cdnet",
            Method::Dst => "dst",
            Method::Opt => "opt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: Method,
    #[serde(default)]
    pub dst: DstConfig,
}

impl Default for MethodSpec {
    fn default() -> Self {
        Self {
            name: Method::Cdnet,
            dst: DstConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            ExperimentError::Config(msg) => ExperimentError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds must not be empty".into()));
        }
        if self.eval_horizon == 0 || self.eval_episodes == 0 {
            return Err(ExperimentError::Config("eval_horizon and eval_episodes must be positive".into()));
        }
        if self.scenario_id.is_empty() || self.scenario_id.contains(['/', '\\']) {
            return Err(ExperimentError::Config("scenario_id must be a plain file name".into()));
        }
        let model = self.model.build()?;
        self.network.base_graph(model.agents())?;
        self.train.validate()?;
        self.method.dst.validate()?;
        Ok(())
    }
}
