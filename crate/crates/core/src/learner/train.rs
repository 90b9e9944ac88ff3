//! The CDNet training loop.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{
    immediate_reward, select_gain, AgentBatch, CdnetGrads, CdnetOptimizer, CdnetParams, NetworkShape,
};
use super::replay::{CorrectedSample, HistoryBuffer, JointTransition, ReplayBuffer};
use super::LearnerError;
use crate::dynamics::{spectral_radius, GainMatrix, MasModel};
use crate::graph::{AgentId, RoutingTable};
use crate::messaging::{default_capacity, EmaConfig, Estimation, MessagePassing, TimeShiftBuffer};

/// How each episode's initial state is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialState {
    /// Every component equal to 1.
    Ones,
    /// Components i.i.d. uniform on `[−half_width, half_width]`.
    Uniform { half_width: f64 },
}

impl InitialState {
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<f64> {
        match *self {
            InitialState::Ones => vec![1.0; len],
            InitialState::Uniform { half_width } => {
                (0..len).map(|_| rng.gen_range(-half_width..=half_width)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Actor learning rate.
    pub learning_rate: f64,
    /// Critic learning rate as a multiple of `learning_rate`.
    pub critic_lr_factor: f64,
    /// Global steps with critic-only updates before the actor starts.
    pub actor_warmup_steps: usize,
    /// Weight `c` of the `c·‖K_ℓ‖²` term in the actor objective.
    pub gain_penalty: f64,
    /// TD errors beyond `±huber_delta` contribute a linear, not quadratic,
    /// critic loss. `inf` restores the plain squared error.
    pub huber_delta: f64,
    pub gamma: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub explore_std_initial: f64,
    pub explore_std_final: f64,
    /// Per-episode multiplicative decay of the exploration std.
    pub explore_decay: f64,
    pub tau: f64,
    pub corrective_lr_factor: f64,
    pub gain_bound: f64,
    pub hidden: usize,
    pub seed: u64,
    pub initial_state: InitialState,
    pub blowup_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            critic_lr_factor: 10.0,
            actor_warmup_steps: 1000,
            gain_penalty: 1.0,
            huber_delta: 10.0,
            gamma: 0.95,
            replay_capacity: 1000,
            batch_size: 32,
            episodes: 5000,
            steps_per_episode: 10,
            explore_std_initial: 0.3,
            explore_std_final: 0.02,
            explore_decay: 0.998,
            tau: 0.005,
            corrective_lr_factor: 0.1,
            gain_bound: 2.0,
            hidden: 64,
            seed: 0,
            initial_state: InitialState::Ones,
            blowup_threshold: crate::dynamics::DEFAULT_BLOWUP_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(self.critic_lr_factor > 0.0) || !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("learning rate and tau must be positive (tau ≤ 1)");
        }
        if self.batch_size == 0 || self.batch_size > self.replay_capacity {
            return bad("batch size must be in 1..=replay capacity");
        }
        if self.steps_per_episode == 0 || self.hidden == 0 {
            return bad("steps per episode and hidden width must be positive");
        }
        if !(self.huber_delta > 0.0) {
            return bad("huber_delta must be positive");
        }
        if !(self.gain_bound > 0.0) || !(self.corrective_lr_factor >= 0.0) || !(self.gain_penalty >= 0.0) {
            return bad("gain bound must be positive and corrective factor non-negative");
        }
        if self.explore_std_initial < 0.0
            || self.explore_std_final < 0.0
            || !(self.explore_decay > 0.0 && self.explore_decay <= 1.0)
        {
            return bad("exploration schedule out of range");
        }
        if let InitialState::Uniform { half_width } = self.initial_state {
            if !(half_width > 0.0) {
                return bad("initial-state half width must be positive");
            }
        }
        if !(self.blowup_threshold > 0.0) {
            return bad("blow-up threshold must be positive");
        }
        Ok(())
    }

    /// Exploration std used during `episode`.
    pub fn explore_std(&self, episode: usize) -> f64 {
        let decayed = self.explore_std_initial * self.explore_decay.powi(episode.min(i32::MAX as usize) as i32);
        decayed.max(self.explore_std_final.min(self.explore_std_initial))
    }
}

/// Communication imperfections seen by the learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommSettings {
    pub with_delays: bool,
    pub estimation: Estimation,
    pub ema: EmaConfig,
}

impl Default for CommSettings {
    fn default() -> Self {
        Self {
            with_delays: true,
            estimation: Estimation::Refined,
            ema: EmaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    /// Realized cost `Σ XᵀSX + UᵀRU` of the (exploring) episode.
    pub cost: f64,
    pub blown_up: bool,
    /// Spectral radius of `A − BK` for the deterministic gains at the
    /// reference state, after the episode's updates.
    pub spectral_radius: f64,
    pub explore_std: f64,
    pub steps: usize,
    pub corrective_updates: usize,
    pub skipped_pops: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub gains: GainMatrix,
    pub metrics: Vec<EpisodeMetrics>,
    pub params: CdnetParams,
}

/// Parameters together with optimizer state and gradient scratch space.
#[derive(Debug, Clone)]
pub struct Learner {
    pub params: CdnetParams,
    optimizer: CdnetOptimizer,
    grads: CdnetGrads,
    pub gamma: f64,
    pub tau: f64,
    pub gain_penalty: f64,
    pub huber_delta: f64,
}

impl Learner {
    pub fn new(params: CdnetParams, gamma: f64, tau: f64) -> Self {
        Self {
            optimizer: CdnetOptimizer::new(&params),
            grads: CdnetGrads::zeros_like(&params),
            params,
            gamma,
            tau,
            gain_penalty: 0.0,
            huber_delta: f64::INFINITY,
        }
    }

    /// One TD step on both critics of every listed agent; targets follow
    /// with a Polyak step when `soft_update` is set.
    pub fn critic_update(
        &mut self,
        batches: &[(usize, &AgentBatch)],
        lr: f64,
        soft_update: bool,
    ) -> Result<Vec<(f64, f64)>, LearnerError> {
        self.grads.clear();
        let losses = self.params.critic_gradients(batches, self.gamma, self.huber_delta, &mut self.grads)?;
        let agents: Vec<usize> = batches.iter().map(|(a, _)| *a).collect();
        self.optimizer
            .apply_critic_step(&mut self.params, &self.grads, &agents, lr);
        if soft_update {
            for &a in &agents {
                self.params.soft_update(a, self.tau);
            }
        }
        self.check_finite("critic update")?;
        Ok(losses)
    }

    /// One ascent step on `mean Q̂(ψ, κ(ψ))` for every listed agent.
    pub fn actor_update(&mut self, batches: &[(usize, &AgentBatch)], lr: f64) -> Result<Vec<f64>, LearnerError> {
        self.grads.clear();
        let losses = self.params.actor_gradients(batches, self.gain_penalty, &mut self.grads)?;
        let agents: Vec<usize> = batches.iter().map(|(a, _)| *a).collect();
        self.optimizer.apply_actor_step(&mut self.params, &self.grads, &agents, lr);
        self.check_finite("actor update")?;
        Ok(losses)
    }

    fn check_finite(&self, what: &str) -> Result<(), LearnerError> {
        if self.params.all_finite() {
            Ok(())
        } else {
            Err(LearnerError::NonFinite(format!("parameters after {what}")))
        }
    }
}

/// Deterministic gains of every agent when it observes `state` exactly.
pub fn gains_at(params: &CdnetParams, state: &[f64], input_dim: usize) -> Result<GainMatrix, LearnerError> {
    let rows = (0..params.shape.agents)
        .map(|a| {
            let psi = params.forward_features(state, a)?;
            let k = params.deterministic_gain(&psi, a)?;
            Ok(DMatrix::from_row_slice(input_dim, state.len(), &k))
        })
        .collect::<Result<Vec<_>, LearnerError>>()?;
    Ok(GainMatrix::from_agent_rows(&rows)?)
}

/// `u = −K x` for a row-major `m × len(x)` gain.
fn apply_gain(gain: &[f64], x: &[f64], m: usize) -> Vec<f64> {
    let n = x.len();
    (0..m)
        .map(|i| -gain[i * n..(i + 1) * n].iter().zip(x).map(|(k, v)| k * v).sum::<f64>())
        .collect()
}

/// Per-agent time-shift bookkeeping for the corrective phase.
struct Corrector {
    buffer: TimeShiftBuffer,
    history: HistoryBuffer,
    retired: usize,
    pending: Option<(usize, Vec<f64>)>,
}

struct EpisodeLog<'a> {
    /// `(K_ℓ(t), u_ℓ(t))` per agent per step.
    actions: &'a [Vec<(Vec<f64>, Vec<f64>)>],
    steps: usize,
    blown: bool,
}

impl Corrector {
    fn new(buffer: TimeShiftBuffer, capacity: usize) -> Self {
        Self {
            buffer,
            history: HistoryBuffer::new(capacity),
            retired: 0,
            pending: None,
        }
    }

    fn reset(&mut self) {
        self.buffer.reset();
        self.history.clear();
        self.retired = 0;
        self.pending = None;
    }

    /// Pops every retired slot, turning consecutive fully-filled pairs into
    /// corrected samples. Returns the number of skipped pops.
    fn collect(
        &mut self,
        agent: usize,
        log: &EpisodeLog<'_>,
        s: &DMatrix<f64>,
        r: &DMatrix<f64>,
    ) -> Result<usize, LearnerError> {
        let lag = self.buffer.capacity() - 1;
        let mut skipped = 0;
        while self.buffer.ready() > 0 {
            let (values, full) = self.buffer.pop_reconstructed()?;
            let index = self.retired;
            self.retired += 1;
            if index < lag || !full {
                skipped += usize::from(!full);
                self.pending = None;
                continue;
            }
            let time = index - lag;
            if let Some((prev_time, prev)) = self.pending.take() {
                if prev_time + 1 == time && prev_time < log.steps {
                    let (gain, input) = &log.actions[prev_time][agent];
                    self.history.push(CorrectedSample {
                        time: prev_time,
                        reward: immediate_reward(&prev, input, s, r),
                        state: prev,
                        gain: gain.clone(),
                        input: input.clone(),
                        next_state: values.clone(),
                        terminal: log.blown && time == log.steps,
                    });
                }
            }
            self.pending = Some((time, values));
        }
        Ok(skipped)
    }
}

/// Runs CDNet training on `model` over the routes in `table`.
pub fn train(
    model: &MasModel,
    table: &RoutingTable,
    comm: &CommSettings,
    config: &TrainConfig,
) -> Result<TrainOutcome, LearnerError> {
    config.validate()?;
    let agents = model.agents();
    if table.agents() != agents {
        return Err(LearnerError::Config(format!(
            "routing table has {} agents, model has {agents}",
            table.agents()
        )));
    }
    let n = model.state_dim();
    let m = model.input_dim();
    let nl = model.state_len();
    let shape = NetworkShape {
        agents,
        state_len: nl,
        gain_dim: m * nl,
        hidden: config.hidden,
        gain_bound: config.gain_bound,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut learner = Learner::new(CdnetParams::new(shape, &mut init_rng), config.gamma, config.tau);
    learner.gain_penalty = config.gain_penalty;
    learner.huber_delta = config.huber_delta;
    let mut replay = ReplayBuffer::new(config.replay_capacity);
    let mut network = MessagePassing::new(table, n, comm.ema, comm.with_delays, comm.estimation)?;
    let r_blocks: Vec<DMatrix<f64>> = (0..agents).map(|a| model.input_weight_block(a)).collect();
    let mut correctors = (0..agents)
        .map(|a| {
            let owner = AgentId::from_index(a);
            let delays = network.delays(owner).to_vec();
            let capacity = default_capacity(delays.iter().copied().max().unwrap_or(0));
            Ok(Corrector::new(
                TimeShiftBuffer::new(owner, delays, n, capacity)?,
                config.replay_capacity,
            ))
        })
        .collect::<Result<Vec<_>, LearnerError>>()?;

    let reference = vec![1.0; nl];
    let mut metrics = Vec::with_capacity(config.episodes);
    let mut global_steps = 0usize;
    let critic_lr = config.learning_rate * config.critic_lr_factor;
    let corrective = Rates {
        actor: config.learning_rate * config.corrective_lr_factor,
        critic: critic_lr * config.corrective_lr_factor,
        actor_enabled: false,
    };

    for episode in 0..config.episodes {
        let explore = config.explore_std(episode);
        let x0 = config.initial_state.sample(nl, &mut rng);
        network.reset();
        correctors.iter_mut().for_each(Corrector::reset);
        let mut history = vec![x0.clone()];
        let mut views = network.observe(&history, &mut rng);
        for (c, v) in correctors.iter_mut().zip(&views) {
            c.buffer.push(v)?;
        }
        let mut x = DVector::from_vec(x0);
        let mut actions: Vec<Vec<(Vec<f64>, Vec<f64>)>> = Vec::with_capacity(config.steps_per_episode);
        let mut cost = 0.0;
        let mut blown = false;
        let mut corrective_updates = 0;
        let mut skipped_pops = 0;

        for _ in 0..config.steps_per_episode {
            let mut step_actions = Vec::with_capacity(agents);
            let mut u = DVector::zeros(model.input_len());
            for a in 0..agents {
                let psi = learner.params.forward_features(&views[a].values, a)?;
                let gain = select_gain(&learner.params, &psi, a, Some(explore), &mut rng)?;
                let ua = apply_gain(&gain, &views[a].values, m);
                u.rows_mut(a * m, m).copy_from_slice(&ua);
                step_actions.push((gain, ua));
            }
            cost += model.stage_cost(&x, &u)?;
            x = model.step(&x, &u)?;
            blown = x.iter().any(|v| !v.is_finite() || v.abs() > config.blowup_threshold);
            history.push(x.as_slice().to_vec());
            let next_views = network.observe(&history, &mut rng);

            let rewards = (0..agents)
                .map(|a| immediate_reward(&views[a].values, &step_actions[a].1, model.s(), &r_blocks[a]))
                .collect();
            replay.push(JointTransition {
                states: views.iter().map(|v| v.values.clone()).collect(),
                gains: step_actions.iter().map(|(k, _)| k.clone()).collect(),
                inputs: u.as_slice().to_vec(),
                rewards,
                next_states: next_views.iter().map(|v| v.values.clone()).collect(),
                terminal: blown,
            });
            actions.push(step_actions);
            global_steps += 1;

            if replay.len() >= config.batch_size {
                let indices = replay.sample_indices(config.batch_size, &mut rng);
                let batches = replay.agent_batches(&indices, &shape);
                let refs: Vec<(usize, &AgentBatch)> = batches.iter().enumerate().collect();
                learner.critic_update(&refs, critic_lr, true)?;
                if global_steps > config.actor_warmup_steps {
                    learner.actor_update(&refs, config.learning_rate)?;
                }
            }

            for (c, v) in correctors.iter_mut().zip(&next_views) {
                c.buffer.push(v)?;
            }
            let log = EpisodeLog {
                actions: &actions,
                steps: actions.len(),
                blown,
            };
            let rates = Rates {
                actor_enabled: global_steps > config.actor_warmup_steps,
                ..corrective
            };
            let (u_count, s_count) =
                corrective_phase(&mut learner, &mut correctors, &log, model, &r_blocks, global_steps, rates, &shape)?;
            corrective_updates += u_count;
            skipped_pops += s_count;
            views = next_views;
            if blown {
                break;
            }
        }

        for c in &mut correctors {
            c.buffer.flush();
        }
        let log = EpisodeLog {
            actions: &actions,
            steps: actions.len(),
            blown,
        };
        let rates = Rates {
            actor_enabled: global_steps > config.actor_warmup_steps,
            ..corrective
        };
        let (u_count, s_count) =
            corrective_phase(&mut learner, &mut correctors, &log, model, &r_blocks, global_steps, rates, &shape)?;
        corrective_updates += u_count;
        skipped_pops += s_count;

        let gains = gains_at(&learner.params, &reference, m)?;
        metrics.push(EpisodeMetrics {
            episode,
            cost,
            blown_up: blown,
            spectral_radius: spectral_radius(&model.closed_loop(&gains)?)?,
            explore_std: explore,
            steps: actions.len(),
            corrective_updates,
            skipped_pops,
        });
    }

    Ok(TrainOutcome {
        gains: gains_at(&learner.params, &reference, m)?,
        metrics,
        params: learner.params,
    })
}

#[derive(Debug, Clone, Copy)]
struct Rates {
    actor: f64,
    critic: f64,
    actor_enabled: bool,
}

/// Collects corrected samples for every agent whose readiness count has
/// passed and replays them at the reduced rate. Returns `(updates, skipped)`.
#[allow(clippy::too_many_arguments)]
fn corrective_phase(
    learner: &mut Learner,
    correctors: &mut [Corrector],
    log: &EpisodeLog<'_>,
    model: &MasModel,
    r_blocks: &[DMatrix<f64>],
    global_steps: usize,
    rates: Rates,
    shape: &NetworkShape,
) -> Result<(usize, usize), LearnerError> {
    let mut updates = 0;
    let mut skipped = 0;
    for (a, c) in correctors.iter_mut().enumerate() {
        if global_steps < c.buffer.readiness_steps() {
            continue;
        }
        skipped += c.collect(a, log, model.s(), &r_blocks[a])?;
        if c.history.is_empty() {
            continue;
        }
        let batch = c.history.drain_batch(shape);
        if rates.critic > 0.0 {
            learner.critic_update(&[(a, &batch)], rates.critic, false)?;
            if rates.actor_enabled {
                learner.actor_update(&[(a, &batch)], rates.actor)?;
            }
            updates += 1;
        }
    }
    Ok((updates, skipped))
}
