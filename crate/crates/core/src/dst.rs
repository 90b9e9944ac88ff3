//! Distributed state tracking baseline: each agent fits a quadratic
//! Q-function over its global estimate and own input, then reads its gain off
//! the fitted matrix.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{GainMatrix, MasModel};
use crate::graph::RoutingTable;
use crate::learner::{CommSettings, InitialState};
use crate::messaging::MessagePassing;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DstError {
    #[error("fit diverged: residual grew for {steps} consecutive passes (last {residual})")]
    Diverged { steps: usize, residual: f64 },
    #[error("input block of H is singular or not positive definite")]
    SingularInputBlock,
    #[error("{0} samples with feature width {1} and {2} targets")]
    Shape(usize, usize, usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("least-squares solve failed: {0}")]
    Solve(String),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
    #[error(transparent)]
    Messaging(#[from] crate::messaging::MessagingError),
}

/// Length of the quadratic basis over `dim` variables.
pub fn basis_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// All products `vᵢvⱼ`, `i ≤ j`, of `v = [z; u]`, in lexicographic order.
pub fn quadratic_basis(z: &[f64], u: &[f64]) -> Vec<f64> {
    let v: Vec<f64> = z.iter().chain(u).copied().collect();
    let mut out = Vec::with_capacity(basis_len(v.len()));
    for i in 0..v.len() {
        for j in i..v.len() {
            out.push(v[i] * v[j]);
        }
    }
    out
}

/// How `fit_theta` solves its least-squares problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FitMethod {
    /// Direct solve below `DIRECT_SOLVE_LIMIT` samples, gradient descent above.
    Auto,
    /// SVD least squares (minimum-norm solution of the normal equations).
    Direct,
    GradientDescent { step: f64, passes: usize },
}

pub const DIRECT_SOLVE_LIMIT: usize = 5000;
const GD_STEP: f64 = 1e-3;
const GD_PASSES: usize = 10_000;
const DIVERGENCE_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaFit {
    pub theta: Vec<f64>,
    /// Mean squared residual `‖Φθ − c‖²/N` at the solution.
    pub residual: f64,
    /// Residual after each gradient-descent pass (empty for direct solves).
    pub history: Vec<f64>,
}

/// Minimizes `Σₜ ((y(t) − y(t+1))·θ − c(t))²`. `features[t]` must already
/// hold the difference `y(t) − y(t+1)`.
pub fn fit_theta(features: &[Vec<f64>], costs: &[f64], method: FitMethod) -> Result<ThetaFit, DstError> {
    let n = features.len();
    let width = features.first().map_or(0, Vec::len);
    if n != costs.len() || n == 0 || features.iter().any(|f| f.len() != width) {
        return Err(DstError::Shape(n, width, costs.len()));
    }
    let phi = DMatrix::from_fn(n, width, |i, j| features[i][j]);
    let c = DVector::from_column_slice(costs);
    let mean_sq = |theta: &DVector<f64>| (&phi * theta - &c).norm_squared() / n as f64;
    let method = match method {
        FitMethod::Auto if n < DIRECT_SOLVE_LIMIT => FitMethod::Direct,
        FitMethod::Auto => FitMethod::GradientDescent {
            step: GD_STEP,
            passes: GD_PASSES,
        },
        m => m,
    };
    match method {
        FitMethod::Direct | FitMethod::Auto => {
            let svd = phi.clone().svd(true, true);
            let theta = svd.solve(&c, 1e-12).map_err(|e| DstError::Solve(e.to_string()))?;
            Ok(ThetaFit {
                residual: mean_sq(&theta),
                theta: theta.as_slice().to_vec(),
                history: Vec::new(),
            })
        }
        FitMethod::GradientDescent { step, passes } => {
            if !(step > 0.0) {
                return Err(DstError::Config("gradient step must be positive".into()));
            }
            let mut theta = DVector::zeros(width);
            let mut history = Vec::with_capacity(passes);
            let mut growth = 0;
            let mut last = mean_sq(&theta);
            for _ in 0..passes {
                let grad = phi.tr_mul(&(&phi * &theta - &c)) * (2.0 / n as f64);
                theta -= grad * step;
                let r = mean_sq(&theta);
                growth = if r > last || !r.is_finite() { growth + 1 } else { 0 };
                if growth >= DIVERGENCE_WINDOW || !r.is_finite() {
                    return Err(DstError::Diverged {
                        steps: growth,
                        residual: r,
                    });
                }
                history.push(r);
                last = r;
            }
            Ok(ThetaFit {
                residual: last,
                theta: theta.as_slice().to_vec(),
                history,
            })
        }
    }
}

/// Symmetric `H` with `vᵀHv = quadratic_basis(v)·θ`.
pub fn theta_to_h(theta: &[f64], dim: usize) -> Result<DMatrix<f64>, DstError> {
    if theta.len() != basis_len(dim) {
        return Err(DstError::Shape(theta.len(), basis_len(dim), dim));
    }
    let mut h = DMatrix::zeros(dim, dim);
    let mut k = 0;
    for i in 0..dim {
        for j in i..dim {
            if i == j {
                h[(i, i)] = theta[k];
            } else {
                h[(i, j)] = theta[k] / 2.0;
                h[(j, i)] = theta[k] / 2.0;
            }
            k += 1;
        }
    }
    Ok(h)
}

/// Inverse of [`theta_to_h`] for a symmetric `H`.
pub fn h_to_theta(h: &DMatrix<f64>) -> Vec<f64> {
    let dim = h.nrows();
    let mut out = Vec::with_capacity(basis_len(dim));
    for i in 0..dim {
        for j in i..dim {
            out.push(if i == j { h[(i, i)] } else { h[(i, j)] + h[(j, i)] });
        }
    }
    out
}

/// `K = −H₂₂⁻¹H₂₁`, where the input block starts at `state_len`. The sign
/// follows `u = K z`; [`dst_feedback_gain`] returns the `u = −K z` form.
pub fn dst_gain(h: &DMatrix<f64>, state_len: usize) -> Result<DMatrix<f64>, DstError> {
    let dim = h.nrows();
    if h.ncols() != dim || state_len >= dim {
        return Err(DstError::Shape(dim, h.ncols(), state_len));
    }
    let m = dim - state_len;
    let h22 = h.view((state_len, state_len), (m, m)).into_owned();
    let h21 = h.view((state_len, 0), (m, state_len)).into_owned();
    let lu = h22.lu();
    if !lu.is_invertible() {
        return Err(DstError::SingularInputBlock);
    }
    let k = lu.solve(&h21).ok_or(DstError::SingularInputBlock)?;
    if k.iter().any(|v| !v.is_finite()) {
        return Err(DstError::SingularInputBlock);
    }
    Ok(-k)
}

/// Feedback gain `K` of `u = −K z`, requiring `H₂₂ ≻ 0` so that the
/// extracted input minimizes the fitted cost.
pub fn dst_feedback_gain(h: &DMatrix<f64>, state_len: usize) -> Result<DMatrix<f64>, DstError> {
    let m = h.nrows().saturating_sub(state_len);
    let h22 = h.view((state_len, state_len), (m, m)).into_owned();
    if h22.cholesky().is_none() {
        return Err(DstError::SingularInputBlock);
    }
    Ok(-dst_gain(h, state_len)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DstConfig {
    /// Policy-iteration sweeps; each sweep refits every agent once.
    pub sweeps: usize,
    pub episodes_per_fit: usize,
    pub steps_per_episode: usize,
    /// Std of the probing noise added to the exploring agent's input.
    pub probe_std: f64,
    pub initial_state: InitialState,
    pub seed: u64,
    pub fit: FitMethod,
    pub blowup_threshold: f64,
}

impl Default for DstConfig {
    fn default() -> Self {
        Self {
            sweeps: 6,
            episodes_per_fit: 40,
            steps_per_episode: 10,
            probe_std: 0.5,
            initial_state: InitialState::Uniform { half_width: 1.0 },
            seed: 0,
            fit: FitMethod::Auto,
            blowup_threshold: crate::dynamics::DEFAULT_BLOWUP_THRESHOLD,
        }
    }
}

impl DstConfig {
    pub fn validate(&self) -> Result<(), DstError> {
        if self.episodes_per_fit == 0 || self.steps_per_episode == 0 {
            return Err(DstError::Config("episodes and steps per fit must be positive".into()));
        }
        if !(self.probe_std >= 0.0) || !(self.blowup_threshold > 0.0) {
            return Err(DstError::Config("probe std and blow-up threshold out of range".into()));
        }
        Ok(())
    }
}

/// One agent's refit during policy iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DstUpdate {
    pub sweep: usize,
    pub agent: usize,
    pub samples: usize,
    pub residual: f64,
    /// False when the fitted input block was unusable and the previous gain
    /// was kept.
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct DstOutcome {
    pub gains: GainMatrix,
    pub updates: Vec<DstUpdate>,
    /// Gains after every update, aligned with `updates`.
    pub gain_history: Vec<GainMatrix>,
}

/// Policy iteration where one agent at a time probes, fits its Q-function on
/// its own (unrefined) global estimate and switches to the extracted gain.
/// The per-step cost is the agent's `X̃ᵀSX̃ + u_ℓᵀR_ℓu_ℓ`.
pub fn run_dst(
    model: &MasModel,
    table: &RoutingTable,
    comm: &CommSettings,
    config: &DstConfig,
) -> Result<DstOutcome, DstError> {
    config.validate()?;
    let agents = model.agents();
    let n = model.state_dim();
    let m = model.input_dim();
    let nl = model.state_len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut network = MessagePassing::new(table, n, comm.ema, comm.with_delays, comm.estimation)?;
    let probe = Normal::new(0.0, config.probe_std.max(f64::MIN_POSITIVE)).map_err(|e| DstError::Config(e.to_string()))?;
    let mut gains: Vec<DMatrix<f64>> = vec![DMatrix::zeros(m, nl); agents];
    let r_blocks: Vec<DMatrix<f64>> = (0..agents).map(|a| model.input_weight_block(a)).collect();
    let mut updates = Vec::new();
    let mut gain_history = Vec::new();

    for sweep in 0..config.sweeps {
        for learner in 0..agents {
            let mut features = Vec::new();
            let mut costs = Vec::new();
            for _ in 0..config.episodes_per_fit {
                network.reset();
                let x0 = config.initial_state.sample(nl, &mut rng);
                let mut x = DVector::from_vec(x0.clone());
                let mut history = vec![x0];
                let mut views = network.observe(&history, &mut rng);
                let mut prev: Option<(Vec<f64>, Vec<f64>, f64)> = None;
                for _ in 0..=config.steps_per_episode {
                    let z = &views[learner].values;
                    if let Some((z_prev, u_prev, c_prev)) = prev.take() {
                        let u_next: Vec<f64> = (-(&gains[learner] * DVector::from_column_slice(z)))
                            .as_slice()
                            .to_vec();
                        let y0 = quadratic_basis(&z_prev, &u_prev);
                        let y1 = quadratic_basis(z, &u_next);
                        features.push(y0.iter().zip(&y1).map(|(a, b)| a - b).collect());
                        costs.push(c_prev);
                    }
                    if history.len() > config.steps_per_episode {
                        break;
                    }
                    let mut u = DVector::zeros(model.input_len());
                    let mut own = Vec::new();
                    for a in 0..agents {
                        let za = DVector::from_column_slice(&views[a].values);
                        let mut ua = -(&gains[a] * za);
                        if a == learner && config.probe_std > 0.0 {
                            ua.iter_mut().for_each(|v| *v += probe.sample(&mut rng));
                        }
                        if a == learner {
                            own = ua.as_slice().to_vec();
                        }
                        u.rows_mut(a * m, m).copy_from(&ua);
                    }
                    let zv = DVector::from_column_slice(z);
                    let uv = DVector::from_column_slice(&own);
                    let cost = zv.dot(&(model.s() * &zv)) + uv.dot(&(&r_blocks[learner] * &uv));
                    prev = Some((z.clone(), own, cost));
                    x = model.step(&x, &u)?;
                    if x.iter().any(|v| !v.is_finite() || v.abs() > config.blowup_threshold) {
                        break;
                    }
                    history.push(x.as_slice().to_vec());
                    views = network.observe(&history, &mut rng);
                }
            }
            let fit = fit_theta(&features, &costs, config.fit)?;
            let h = theta_to_h(&fit.theta, nl + m)?;
            let accepted = match dst_feedback_gain(&h, nl) {
                Ok(k) => {
                    gains[learner] = k;
                    true
                }
                Err(_) => false,
            };
            updates.push(DstUpdate {
                sweep,
                agent: learner,
                samples: features.len(),
                residual: fit.residual,
                accepted,
            });
            gain_history.push(GainMatrix::from_agent_rows(&gains)?);
        }
    }
    Ok(DstOutcome {
        gains: GainMatrix::from_agent_rows(&gains)?,
        updates,
        gain_history,
    })
}
