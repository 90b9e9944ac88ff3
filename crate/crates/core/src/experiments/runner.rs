use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Method, NoiseSpec, ScenarioConfig};
use super::metrics::{build_records, mean_std, steady_window, tail_mean, write_csv, MetricsRecord};
use super::topology::{sample_link_noise, TopologyKind};
use super::ExperimentError;
use crate::dst::run_dst;
use crate::dynamics::{solve_dare, spectral_radius, GainMatrix, MasModel};
use crate::graph::{compute_routes, LinkNoise, NetworkGraph, RoutingTable};
use crate::learner::{train, CdnetParams, CommSettings};
use crate::messaging::{Estimation, MessagePassing};

/// Random streams derived from one seed.
const NOISE_STREAM: u64 = 11;
const EVAL_STREAM: u64 = 12;

/// How each agent turns its global estimate into its input.
pub enum Policy<'a> {
    Linear(&'a GainMatrix),
    /// Deterministic CDNet actor: the gain depends on the estimate itself.
    Cdnet(&'a CdnetParams),
}

impl Policy<'_> {
    fn input(&self, agent: usize, z: &[f64], input_dim: usize) -> Result<DVector<f64>, ExperimentError> {
        let zv = DVector::from_column_slice(z);
        Ok(match self {
            Policy::Linear(g) => -(g.agent_block(agent) * zv),
            Policy::Cdnet(params) => {
                let psi = params.forward_features(z, agent)?;
                let k = params.deterministic_gain(&psi, agent)?;
                -(DMatrix::from_row_slice(input_dim, z.len(), &k) * zv)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean rollout cost over the episodes that did not blow up.
    pub mean_cost: f64,
    pub blowups: usize,
    pub episodes: usize,
}

/// Rolls `policy` out through the network: every agent acts on its own
/// estimate of the global state.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_in_network(
    model: &MasModel,
    table: &RoutingTable,
    comm: &CommSettings,
    policy: &Policy<'_>,
    x0: &[f64],
    horizon: usize,
    episodes: usize,
    blowup_threshold: f64,
    seed: u64,
) -> Result<Evaluation, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    let mut network = MessagePassing::new(table, model.state_dim(), comm.ema, comm.with_delays, comm.estimation)?;
    let m = model.input_dim();
    let mut total = 0.0;
    let mut blowups = 0;
    for _ in 0..episodes {
        network.reset();
        let mut history = vec![x0.to_vec()];
        let mut x = DVector::from_column_slice(x0);
        let mut cost = 0.0;
        let mut blown = false;
        for _ in 0..horizon {
            let views = network.observe(&history, &mut rng);
            let mut u = DVector::zeros(model.input_len());
            for (a, view) in views.iter().enumerate() {
                u.rows_mut(a * m, m).copy_from(&policy.input(a, &view.values, m)?);
            }
            cost += model.stage_cost(&x, &u)?;
            x = model.step(&x, &u)?;
            if x.iter().any(|v| !v.is_finite() || v.abs() > blowup_threshold) {
                blown = true;
                break;
            }
            history.push(x.as_slice().to_vec());
        }
        if blown {
            blowups += 1;
        } else {
            total += cost;
        }
    }
    let kept = episodes - blowups;
    Ok(Evaluation {
        mean_cost: if kept > 0 { total / kept as f64 } else { f64::INFINITY },
        blowups,
        episodes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    /// Infinite-horizon cost `X0ᵀ P X0` from the evaluation initial state.
    pub dare_cost: f64,
    pub spectral_radius: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Steady-state training cost for CDNet, the evaluation cost otherwise.
    pub final_cost: f64,
    pub evaluation: Evaluation,
    pub spectral_radius: f64,
    pub episodes: usize,
    pub blowups: usize,
    pub final_regret: f64,
    /// Rows of the stacked gain `K`.
    pub gains: Vec<Vec<f64>>,
    pub links: Vec<LinkNoise>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario_id: String,
    pub method: Method,
    pub agents: usize,
    pub topology: TopologyKind,
    pub lambda: f64,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub mean_eval_cost: f64,
    pub std_eval_cost: f64,
    pub mean_spectral_radius: f64,
    pub oracle: Option<OracleSummary>,
    pub seeds: Vec<SeedReport>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub verbose: bool,
    /// Skip writing files; used by sweeps and tests that only need numbers.
    pub dry_run: bool,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutput {
    pub summary: ScenarioSummary,
    pub records: Vec<MetricsRecord>,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
}

fn rows(g: &GainMatrix) -> Vec<Vec<f64>> {
    let k = g.matrix();
    (0..k.nrows()).map(|i| k.row(i).iter().copied().collect()).collect()
}

/// The scenario's graph for one seed, with noise applied.
pub fn scenario_graph(cfg: &ScenarioConfig, agents: usize, seed: u64) -> Result<NetworkGraph, ExperimentError> {
    let base = cfg.network.base_graph(agents)?;
    Ok(match cfg.network.noise {
        NoiseSpec::None => base,
        NoiseSpec::Fixed { mu, sigma2 } => {
            let noise = LinkNoise::new(mu, sigma2)?;
            base.map_noise(|_| noise)
        }
        NoiseSpec::Sampled { low, high } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(NOISE_STREAM);
            sample_link_noise(&base, low, high, &mut rng)?
        }
    })
}

/// Trains or solves one seed; returns its report and per-episode rows.
pub fn run_seed(cfg: &ScenarioConfig, seed: u64) -> Result<(SeedReport, Vec<MetricsRecord>), ExperimentError> {
    let model = cfg.model.build()?;
    let graph = scenario_graph(cfg, model.agents(), seed)?;
    let table = compute_routes(&graph, cfg.network.lambda)?;
    let comm = CommSettings {
        with_delays: cfg.network.delays,
        estimation: cfg.network.estimation,
        ..CommSettings::default()
    };
    let raw = CommSettings {
        estimation: Estimation::Raw,
        ..comm
    };
    let mut x0_rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = cfg.eval_initial_state.sample(model.state_len(), &mut x0_rng);
    let threshold = cfg.train.blowup_threshold;
    let evaluate = |comm: &CommSettings, policy: Policy<'_>| {
        evaluate_in_network(&model, &table, comm, &policy, &x0, cfg.eval_horizon, cfg.eval_episodes, threshold, seed)
    };
    let links = graph.edges().iter().map(|e| e.noise).collect();
    let id = cfg.scenario_id.as_str();

    match cfg.method.name {
        Method::Cdnet => {
            let train_cfg = crate::learner::TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let out = train(&model, &table, &comm, &train_cfg)?;
            let costs: Vec<f64> = out.metrics.iter().map(|m| m.cost).collect();
            let blown: Vec<bool> = out.metrics.iter().map(|m| m.blown_up).collect();
            let radii: Vec<f64> = out.metrics.iter().map(|m| m.spectral_radius).collect();
            let records = build_records(id, seed, &costs, &blown, &radii);
            let evaluation = evaluate(&comm, Policy::Cdnet(&out.params))?;
            let final_cost = tail_mean(&records, steady_window(records.len())).unwrap_or(f64::NAN);
            let report = SeedReport {
                seed,
                final_cost,
                evaluation,
                spectral_radius: spectral_radius(&model.closed_loop(&out.gains)?)?,
                episodes: records.len(),
                blowups: blown.iter().filter(|&&b| b).count(),
                final_regret: records.last().map_or(0.0, |r| r.regret),
                gains: rows(&out.gains),
                links,
            };
            Ok((report, records))
        }
        Method::Dst => {
            let dst_cfg = crate::dst::DstConfig {
                seed,
                ..cfg.method.dst.clone()
            };
            let out = run_dst(&model, &table, &raw, &dst_cfg)?;
            let mut costs = Vec::with_capacity(out.gain_history.len());
            let mut blown = Vec::with_capacity(out.gain_history.len());
            let mut radii = Vec::with_capacity(out.gain_history.len());
            for g in &out.gain_history {
                let e = evaluate(&raw, Policy::Linear(g))?;
                costs.push(e.mean_cost);
                blown.push(e.blowups == e.episodes);
                radii.push(spectral_radius(&model.closed_loop(g)?)?);
            }
            let records = build_records(id, seed, &costs, &blown, &radii);
            let evaluation = evaluate(&raw, Policy::Linear(&out.gains))?;
            let report = SeedReport {
                seed,
                final_cost: evaluation.mean_cost,
                evaluation,
                spectral_radius: spectral_radius(&model.closed_loop(&out.gains)?)?,
                episodes: records.len(),
                blowups: blown.iter().filter(|&&b| b).count(),
                final_regret: records.last().map_or(0.0, |r| r.regret),
                gains: rows(&out.gains),
                links,
            };
            Ok((report, records))
        }
        Method::Opt => {
            let sol = solve_dare(&model, 1e-12, 100_000)?;
            let evaluation = evaluate(&raw, Policy::Linear(&sol.gain))?;
            let report = SeedReport {
                seed,
                final_cost: evaluation.mean_cost,
                evaluation,
                spectral_radius: spectral_radius(&model.closed_loop(&sol.gain)?)?,
                episodes: 0,
                blowups: 0,
                final_regret: 0.0,
                gains: rows(&sol.gain),
                links,
            };
            Ok((report, Vec::new()))
        }
    }
}

fn oracle(cfg: &ScenarioConfig, model: &MasModel) -> Result<OracleSummary, ExperimentError> {
    let sol = solve_dare(model, 1e-12, 100_000)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0]);
    let x0 = DVector::from_vec(cfg.eval_initial_state.sample(model.state_len(), &mut rng));
    Ok(OracleSummary {
        dare_cost: x0.dot(&(&sol.p * &x0)),
        spectral_radius: spectral_radius(&model.closed_loop(&sol.gain)?)?,
        residual: sol.residual,
    })
}

/// Runs every seed, then writes `<out_dir>/<scenario_id>.csv` and
/// `<out_dir>/<scenario_id>.summary.json`.
pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<ScenarioOutput, ExperimentError> {
    cfg.validate()?;
    let model = cfg.model.build()?;
    let mut reports = Vec::with_capacity(cfg.seeds.len());
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let (report, rows) = run_seed(cfg, seed).map_err(|e| ExperimentError::Seed {
            seed,
            source: Box::new(e),
        })?;
        if opts.verbose {
            eprintln!(
                "[{}] seed {seed}: cost {:.4}, eval {:.4}, spectral radius {:.4}, blow-ups {}/{}",
                cfg.scenario_id,
                report.final_cost,
                report.evaluation.mean_cost,
                report.spectral_radius,
                report.blowups,
                report.episodes
            );
        }
        reports.push(report);
        records.extend(rows);
    }
    let finals: Vec<f64> = reports.iter().map(|r| r.final_cost).collect();
    let evals: Vec<f64> = reports.iter().map(|r| r.evaluation.mean_cost).collect();
    let radii: Vec<f64> = reports.iter().map(|r| r.spectral_radius).collect();
    let (mean_cost, std_cost) = mean_std(&finals);
    let (mean_eval_cost, std_eval_cost) = mean_std(&evals);
    let summary = ScenarioSummary {
        scenario_id: cfg.scenario_id.clone(),
        method: cfg.method.name,
        agents: model.agents(),
        topology: cfg.network.topology,
        lambda: cfg.network.lambda,
        mean_cost,
        std_cost,
        mean_eval_cost,
        std_eval_cost,
        mean_spectral_radius: mean_std(&radii).0,
        oracle: (cfg.method.name == Method::Opt).then(|| oracle(cfg, &model)).transpose()?,
        seeds: reports,
    };
    let csv_path = cfg.out_dir.join(format!("{}.csv", cfg.scenario_id));
    let summary_path = cfg.out_dir.join(format!("{}.summary.json", cfg.scenario_id));
    if !opts.dry_run {
        std::fs::create_dir_all(&cfg.out_dir)?;
        write_csv(&csv_path, &records)?;
        std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    }
    Ok(ScenarioOutput {
        summary,
        records,
        csv_path,
        summary_path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    Size,
    Topology,
}

impl std::str::FromStr for SweepAxis {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "size" => Ok(SweepAxis::Size),
            "topology" => Ok(SweepAxis::Topology),
            _ => Err(ExperimentError::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub scenario_id: String,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub mean_eval_cost: f64,
    pub std_eval_cost: f64,
    pub mean_spectral_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub scenario_id: String,
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

/// The scenario with one axis set to `value`.
pub fn apply_axis(cfg: &ScenarioConfig, axis: SweepAxis, value: &str) -> Result<ScenarioConfig, ExperimentError> {
    let mut out = cfg.clone();
    let bad = |what: &str| ExperimentError::Config(format!("invalid {what} value `{value}`"));
    match axis {
        SweepAxis::Lambda => out.network.lambda = value.parse().map_err(|_| bad("lambda"))?,
        SweepAxis::Size => {
            let l: usize = value.parse().map_err(|_| bad("size"))?;
            if cfg.model.preset.is_none() || cfg.network.topology == TopologyKind::Explicit {
                return Err(ExperimentError::Config(
                    "size sweeps need a preset model and a generated topology".into(),
                ));
            }
            out.model.preset = Some(format!("A{l}"));
        }
        SweepAxis::Topology => {
            out.network.topology = value.parse()?;
            if out.network.topology == TopologyKind::Explicit {
                return Err(bad("topology"));
            }
        }
    }
    out.scenario_id = format!("{}-{}", cfg.scenario_id, value);
    out.validate()?;
    Ok(out)
}

/// Runs the scenario once per axis value and writes
/// `<out_dir>/<scenario_id>.sweep.json`.
pub fn sweep(
    cfg: &ScenarioConfig,
    axis: SweepAxis,
    values: &[String],
    opts: &RunOptions,
) -> Result<SweepSummary, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::Config("sweep needs at least one value".into()));
    }
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let point_cfg = apply_axis(cfg, axis, v)?;
        let s = run_scenario(&point_cfg, opts)?.summary;
        points.push(SweepPoint {
            value: v.clone(),
            scenario_id: s.scenario_id,
            mean_cost: s.mean_cost,
            std_cost: s.std_cost,
            mean_eval_cost: s.mean_eval_cost,
            std_eval_cost: s.std_eval_cost,
            mean_spectral_radius: s.mean_spectral_radius,
        });
    }
    let summary = SweepSummary {
        scenario_id: cfg.scenario_id.clone(),
        axis,
        points,
    };
    if !opts.dry_run {
        std::fs::create_dir_all(&cfg.out_dir)?;
        let path = cfg.out_dir.join(format!("{}.sweep.json", cfg.scenario_id));
        std::fs::write(path, serde_json::to_string_pretty(&summary)? + "\n")?;
    }
    Ok(summary)
}
