//! Network parameter sets: one shared trunk, and per agent a head, an actor,
//! two critics and their target copies.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::nn::{Activation, Adam, DenseNet, ForwardCache, Gradients};
use super::LearnerError;

/// Scale of the uniform initialization of actor and critic output layers,
/// so that initial gains and Q-values start near zero.
const OUTPUT_INIT_SCALE: f64 = 3e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkShape {
    pub agents: usize,
    /// Length of the stacked global state `nL`.
    pub state_len: usize,
    /// Entries of one agent's gain `K_ℓ` (`m × nL`, row-major).
    pub gain_dim: usize,
    pub hidden: usize,
    pub gain_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentNets {
    pub head: DenseNet,
    pub actor: DenseNet,
    pub critics: [DenseNet; 2],
    pub targets: [DenseNet; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdnetParams {
    pub shape: NetworkShape,
    pub trunk: DenseNet,
    pub agents: Vec<AgentNets>,
}

/// Per-agent minibatch; every field is row-major over the batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentBatch {
    pub len: usize,
    pub states: Vec<f64>,
    pub gains: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl AgentBatch {
    pub fn with_capacity(len: usize, shape: &NetworkShape) -> Self {
        Self {
            len: 0,
            states: Vec::with_capacity(len * shape.state_len),
            gains: Vec::with_capacity(len * shape.gain_dim),
            rewards: Vec::with_capacity(len),
            next_states: Vec::with_capacity(len * shape.state_len),
            terminal: Vec::with_capacity(len),
        }
    }

    pub fn push(&mut self, state: &[f64], gain: &[f64], reward: f64, next_state: &[f64], terminal: bool) {
        self.states.extend_from_slice(state);
        self.gains.extend_from_slice(gain);
        self.rewards.push(reward);
        self.next_states.extend_from_slice(next_state);
        self.terminal.push(terminal);
        self.len += 1;
    }
}

struct Encoded {
    trunk: ForwardCache,
    head: ForwardCache,
}

impl Encoded {
    fn psi(&self) -> &[f64] {
        self.head.output()
    }
}

fn concat_rows(a: &[f64], a_width: usize, b: &[f64], b_width: usize, batch: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * (a_width + b_width));
    for i in 0..batch {
        out.extend_from_slice(&a[i * a_width..(i + 1) * a_width]);
        out.extend_from_slice(&b[i * b_width..(i + 1) * b_width]);
    }
    out
}

impl CdnetParams {
    pub fn new<R: Rng + ?Sized>(shape: NetworkShape, rng: &mut R) -> Self {
        let h = shape.hidden;
        let trunk = DenseNet::new(
            &[shape.state_len, h, h],
            &[Activation::Relu, Activation::Relu],
            None,
            rng,
        );
        let agents = (0..shape.agents)
            .map(|_| {
                let head = DenseNet::new(&[h, h], &[Activation::Relu], None, rng);
                let actor = DenseNet::new(
                    &[h, h, shape.gain_dim],
                    &[Activation::Relu, Activation::Tanh],
                    Some(OUTPUT_INIT_SCALE),
                    rng,
                );
                let mut critic = || {
                    DenseNet::new(
                        &[h + shape.gain_dim, h, 1],
                        &[Activation::Relu, Activation::Linear],
                        Some(OUTPUT_INIT_SCALE),
                        rng,
                    )
                };
                let critics = [critic(), critic()];
                AgentNets {
                    head,
                    actor,
                    targets: critics.clone(),
                    critics,
                }
            })
            .collect();
        Self { shape, trunk, agents }
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
            + self
                .agents
                .iter()
                .map(|a| {
                    a.head.param_count()
                        + a.actor.param_count()
                        + a.critics.iter().chain(&a.targets).map(DenseNet::param_count).sum::<usize>()
                })
                .sum::<usize>()
    }

    pub fn all_finite(&self) -> bool {
        self.trunk.all_finite()
            && self.agents.iter().all(|a| {
                a.head.all_finite()
                    && a.actor.all_finite()
                    && a.critics.iter().chain(&a.targets).all(DenseNet::all_finite)
            })
    }

    fn encode(&self, agent: usize, states: &[f64], batch: usize) -> Result<Encoded, LearnerError> {
        let trunk = self.trunk.forward(states, batch)?;
        let head = self.agents[agent].head.forward(trunk.output(), batch)?;
        Ok(Encoded { trunk, head })
    }

    fn backprop_features(&self, agent: usize, enc: &Encoded, grad_psi: &[f64], grads: &mut CdnetGrads) {
        let g_trunk_out = self.agents[agent]
            .head
            .backward(&enc.head, grad_psi, Some(&mut grads.agents[agent].head));
        self.trunk.backward(&enc.trunk, &g_trunk_out, Some(&mut grads.trunk));
    }

    /// `ψ_ℓ = Ψ_ℓ(Φ(X̃))`.
    pub fn forward_features(&self, state: &[f64], agent: usize) -> Result<Vec<f64>, LearnerError> {
        self.check_agent(agent)?;
        Ok(self.encode(agent, state, 1)?.head.values.pop().unwrap_or_default())
    }

    /// Deterministic actor output `gain_bound · tanh(κ_ℓ(ψ))` for a batch.
    fn actor_gains(&self, agent: usize, psi: &[f64], batch: usize) -> Result<(ForwardCache, Vec<f64>), LearnerError> {
        let cache = self.agents[agent].actor.forward(psi, batch)?;
        let gains = cache.output().iter().map(|z| self.shape.gain_bound * z).collect();
        Ok((cache, gains))
    }

    pub fn deterministic_gain(&self, psi: &[f64], agent: usize) -> Result<Vec<f64>, LearnerError> {
        self.check_agent(agent)?;
        Ok(self.actor_gains(agent, psi, 1)?.1)
    }

    /// Online critic values `(Q_ℓ, Q′_ℓ)` at `(ψ, K)`.
    pub fn q_values(&self, psi: &[f64], gain: &[f64], agent: usize) -> Result<(f64, f64), LearnerError> {
        self.check_agent(agent)?;
        let input = concat_rows(psi, self.shape.hidden, gain, self.shape.gain_dim, 1);
        let a = &self.agents[agent];
        Ok((a.critics[0].predict(&input)?[0], a.critics[1].predict(&input)?[0]))
    }

    /// `ρ = r + γ·min(Q̄(ψ⁺, K⁺), Q̄′(ψ⁺, K⁺))`, with `ρ = r` on terminal rows.
    pub fn td_targets(&self, agent: usize, batch: &AgentBatch, gamma: f64) -> Result<Vec<f64>, LearnerError> {
        self.check_agent(agent)?;
        let n = batch.len;
        let enc = self.encode(agent, &batch.next_states, n)?;
        let (_, gains) = self.actor_gains(agent, enc.psi(), n)?;
        let input = concat_rows(enc.psi(), self.shape.hidden, &gains, self.shape.gain_dim, n);
        let a = &self.agents[agent];
        let q1 = a.targets[0].forward(&input, n)?;
        let q2 = a.targets[1].forward(&input, n)?;
        Ok((0..n)
            .map(|i| {
                if batch.terminal[i] || gamma == 0.0 {
                    batch.rewards[i]
                } else {
                    batch.rewards[i] + gamma * pessimistic_q(q1.output()[i], q2.output()[i])
                }
            })
            .collect())
    }

    /// Accumulates the gradient of `Σ_ℓ (L_ℓ + L′_ℓ)` into `grads`, where each
    /// loss is the batch mean of `huber(Q − ρ)`: `e²` for `|e| ≤ δ`, linear
    /// beyond. `δ = ∞` gives the squared error. Returns the per-agent losses.
    pub fn critic_gradients(
        &self,
        batches: &[(usize, &AgentBatch)],
        gamma: f64,
        huber_delta: f64,
        grads: &mut CdnetGrads,
    ) -> Result<Vec<(f64, f64)>, LearnerError> {
        let h = self.shape.hidden;
        let g = self.shape.gain_dim;
        let mut losses = Vec::with_capacity(batches.len());
        for &(agent, batch) in batches {
            self.check_agent(agent)?;
            let n = batch.len;
            let rho = self.td_targets(agent, batch, gamma)?;
            let enc = self.encode(agent, &batch.states, n)?;
            let input = concat_rows(enc.psi(), h, &batch.gains, g, n);
            let mut grad_psi = vec![0.0; n * h];
            let mut pair = [0.0; 2];
            for (c, loss) in pair.iter_mut().enumerate() {
                let net = &self.agents[agent].critics[c];
                let cache = net.forward(&input, n)?;
                let err: Vec<f64> = cache.output().iter().zip(&rho).map(|(q, r)| q - r).collect();
                *loss = err.iter().map(|&e| huber(e, huber_delta)).sum::<f64>() / n as f64;
                if !loss.is_finite() {
                    return Err(LearnerError::NonFinite(format!("critic {c} loss of agent {}", agent + 1)));
                }
                let grad_q: Vec<f64> = err
                    .iter()
                    .map(|e| 2.0 * e.clamp(-huber_delta, huber_delta) / n as f64)
                    .collect();
                let grad_in = net.backward(&cache, &grad_q, Some(&mut grads.agents[agent].critics[c]));
                for i in 0..n {
                    for j in 0..h {
                        grad_psi[i * h + j] += grad_in[i * (h + g) + j];
                    }
                }
            }
            self.backprop_features(agent, &enc, &grad_psi, grads);
            losses.push((pair[0], pair[1]));
        }
        Ok(losses)
    }

    /// Accumulates the gradient of `−mean Q̂(ψ_ℓ, κ_ℓ(ψ_ℓ)) + c·mean ‖K‖²`
    /// with respect to actor, head and trunk, where `c = gain_penalty`.
    /// Critic parameters receive no gradient.
    pub fn actor_gradients(
        &self,
        batches: &[(usize, &AgentBatch)],
        gain_penalty: f64,
        grads: &mut CdnetGrads,
    ) -> Result<Vec<f64>, LearnerError> {
        let h = self.shape.hidden;
        let g = self.shape.gain_dim;
        let bound = self.shape.gain_bound;
        let mut losses = Vec::with_capacity(batches.len());
        for &(agent, batch) in batches {
            self.check_agent(agent)?;
            let n = batch.len;
            let a = &self.agents[agent];
            let enc = self.encode(agent, &batch.states, n)?;
            let (actor_cache, gains) = self.actor_gains(agent, enc.psi(), n)?;
            let input = concat_rows(enc.psi(), h, &gains, g, n);
            let c1 = a.critics[0].forward(&input, n)?;
            let c2 = a.critics[1].forward(&input, n)?;
            let mut g1 = vec![0.0; n];
            let mut g2 = vec![0.0; n];
            let mut loss = 0.0;
            for i in 0..n {
                let (q1, q2) = (c1.output()[i], c2.output()[i]);
                if q1 <= q2 {
                    g1[i] = -1.0 / n as f64;
                } else {
                    g2[i] = -1.0 / n as f64;
                }
                loss -= pessimistic_q(q1, q2) / n as f64;
            }
            loss += gain_penalty * gains.iter().map(|k| k * k).sum::<f64>() / n as f64;
            if !loss.is_finite() {
                return Err(LearnerError::NonFinite(format!("actor loss of agent {}", agent + 1)));
            }
            let in1 = a.critics[0].backward(&c1, &g1, None);
            let in2 = a.critics[1].backward(&c2, &g2, None);
            let grad_z: Vec<f64> = (0..n)
                .flat_map(|i| (0..g).map(move |j| (i, j)))
                .map(|(i, j)| {
                    let penalty = 2.0 * gain_penalty * gains[i * g + j] / n as f64;
                    bound * (in1[i * (h + g) + h + j] + in2[i * (h + g) + h + j] + penalty)
                })
                .collect();
            let grad_psi = a.actor.backward(&actor_cache, &grad_z, Some(&mut grads.agents[agent].actor));
            self.backprop_features(agent, &enc, &grad_psi, grads);
            losses.push(loss);
        }
        Ok(losses)
    }

    /// Polyak step `θ′ ← (1 − τ)θ′ + τθ` on both target critics of `agent`.
    pub fn soft_update(&mut self, agent: usize, tau: f64) {
        let a = &mut self.agents[agent];
        for (target, online) in a.targets.iter_mut().zip(&a.critics) {
            target.polyak_update(online, tau);
        }
    }

    fn check_agent(&self, agent: usize) -> Result<(), LearnerError> {
        if agent < self.agents.len() {
            Ok(())
        } else {
            Err(LearnerError::Shape(format!(
                "agent index {agent} out of range for {} agents",
                self.agents.len()
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentGrads {
    pub head: Gradients,
    pub actor: Gradients,
    pub critics: [Gradients; 2],
}

/// Gradient buffers laid out like [`CdnetParams`] (targets excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct CdnetGrads {
    pub trunk: Gradients,
    pub agents: Vec<AgentGrads>,
}

impl CdnetGrads {
    pub fn zeros_like(params: &CdnetParams) -> Self {
        Self {
            trunk: Gradients::zeros_like(&params.trunk),
            agents: params
                .agents
                .iter()
                .map(|a| AgentGrads {
                    head: Gradients::zeros_like(&a.head),
                    actor: Gradients::zeros_like(&a.actor),
                    critics: [Gradients::zeros_like(&a.critics[0]), Gradients::zeros_like(&a.critics[1])],
                })
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        self.trunk.clear();
        for a in &mut self.agents {
            a.head.clear();
            a.actor.clear();
            a.critics.iter_mut().for_each(Gradients::clear);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AgentAdam {
    head: Adam,
    actor: Adam,
    critics: [Adam; 2],
}

/// Adam state for every trainable network.
#[derive(Debug, Clone, PartialEq)]
pub struct CdnetOptimizer {
    trunk: Adam,
    agents: Vec<AgentAdam>,
}

impl CdnetOptimizer {
    pub fn new(params: &CdnetParams) -> Self {
        Self {
            trunk: Adam::new(&params.trunk),
            agents: params
                .agents
                .iter()
                .map(|a| AgentAdam {
                    head: Adam::new(&a.head),
                    actor: Adam::new(&a.actor),
                    critics: [Adam::new(&a.critics[0]), Adam::new(&a.critics[1])],
                })
                .collect(),
        }
    }

    /// Steps the trunk, and the heads and critics of `agents`.
    pub fn apply_critic_step(&mut self, params: &mut CdnetParams, grads: &CdnetGrads, agents: &[usize], lr: f64) {
        self.trunk.step(&mut params.trunk, &grads.trunk, lr);
        for &i in agents {
            let (opt, net, g) = (&mut self.agents[i], &mut params.agents[i], &grads.agents[i]);
            opt.head.step(&mut net.head, &g.head, lr);
            for c in 0..2 {
                opt.critics[c].step(&mut net.critics[c], &g.critics[c], lr);
            }
        }
    }

    /// Steps the trunk, and the heads and actors of `agents`.
    pub fn apply_actor_step(&mut self, params: &mut CdnetParams, grads: &CdnetGrads, agents: &[usize], lr: f64) {
        self.trunk.step(&mut params.trunk, &grads.trunk, lr);
        for &i in agents {
            let (opt, net, g) = (&mut self.agents[i], &mut params.agents[i], &grads.agents[i]);
            opt.head.step(&mut net.head, &g.head, lr);
            opt.actor.step(&mut net.actor, &g.actor, lr);
        }
    }
}

/// Squared error inside `±delta`, continued linearly with matching slope.
fn huber(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e * e
    } else {
        delta * (2.0 * e.abs() - delta)
    }
}

pub fn pessimistic_q(q1: f64, q2: f64) -> f64 {
    q1.min(q2)
}

/// Agent gain: deterministic actor output, plus clipped Gaussian exploration
/// when `explore_std` is given.
pub fn select_gain<R: Rng + ?Sized>(
    params: &CdnetParams,
    psi: &[f64],
    agent: usize,
    explore_std: Option<f64>,
    rng: &mut R,
) -> Result<Vec<f64>, LearnerError> {
    let mut gain = params.deterministic_gain(psi, agent)?;
    if let Some(std) = explore_std.filter(|s| *s > 0.0) {
        let bound = params.shape.gain_bound;
        let normal = Normal::new(0.0, std).map_err(|e| LearnerError::Config(e.to_string()))?;
        for k in &mut gain {
            *k = (*k + normal.sample(rng)).clamp(-bound, bound);
        }
    }
    Ok(gain)
}

/// `r_ℓ = −X̃ᵀ S_ℓ X̃ − U_ℓᵀ R_ℓ U_ℓ`.
pub fn immediate_reward(state: &[f64], input: &[f64], s: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    -(quadratic_form(state, s) + quadratic_form(input, r))
}

fn quadratic_form(v: &[f64], m: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for (j, vj) in v.iter().enumerate() {
        if *vj == 0.0 {
            continue;
        }
        let col = m.column(j);
        let mut acc = 0.0;
        for (i, vi) in v.iter().enumerate() {
            acc += vi * col[i];
        }
        total += acc * vj;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MasModel;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(agents: usize) -> NetworkShape {
        NetworkShape {
            agents,
            state_len: agents,
            gain_dim: agents,
            hidden: 8,
            gain_bound: 2.0,
        }
    }

    fn random_batch(shape: &NetworkShape, n: usize, rng: &mut ChaCha8Rng) -> AgentBatch {
        let mut b = AgentBatch::with_capacity(n, shape);
        for i in 0..n {
            let s: Vec<f64> = (0..shape.state_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..shape.gain_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s2: Vec<f64> = (0..shape.state_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            b.push(&s, &k, -rng.gen_range(0.0..3.0), &s2, i % 4 == 3);
        }
        b
    }

    /// Randomizes every parameter so that ReLU kinks and output layers are
    /// exercised away from their small initial scale.
    fn randomized(shape: NetworkShape, rng: &mut ChaCha8Rng) -> CdnetParams {
        let mut p = CdnetParams::new(shape, rng);
        let mut shake = |net: &mut DenseNet| {
            let v: Vec<f64> = net.flat_params().iter().map(|_| rng.gen_range(-0.6..0.6)).collect();
            net.set_flat_params(&v).unwrap();
        };
        shake(&mut p.trunk);
        for a in &mut p.agents {
            shake(&mut a.head);
            shake(&mut a.actor);
            for n in a.critics.iter_mut().chain(a.targets.iter_mut()) {
                shake(n);
            }
        }
        p
    }

    /// Visits every trainable network in the same order as `flat_grads`.
    fn for_each_net(p: &mut CdnetParams, mut f: impl FnMut(&mut DenseNet)) {
        f(&mut p.trunk);
        for a in &mut p.agents {
            f(&mut a.head);
            f(&mut a.actor);
            f(&mut a.critics[0]);
            f(&mut a.critics[1]);
        }
    }

    fn flat_grads(g: &CdnetGrads) -> Vec<Vec<f64>> {
        let mut out = vec![g.trunk.flat()];
        for a in &g.agents {
            out.push(a.head.flat());
            out.push(a.actor.flat());
            out.push(a.critics[0].flat());
            out.push(a.critics[1].flat());
        }
        out
    }

    fn check_fd(
        params: &CdnetParams,
        analytic: &[Vec<f64>],
        loss: impl Fn(&CdnetParams) -> f64,
        probe: impl Fn(usize) -> bool,
    ) -> usize {
        let h = 1e-5;
        let mut checked = 0;
        let mut p = params.clone();
        let mut net_idx = 0;
        let mut work = Vec::new();
        for_each_net(&mut p, |n| {
            work.push(n.flat_params());
        });
        for (k, base) in work.iter().enumerate() {
            net_idx += 1;
            if !probe(k) {
                continue;
            }
            // Probe a strided subset to keep the test fast.
            for i in (0..base.len()).step_by(3) {
                let eval = |delta: f64| {
                    let mut q = params.clone();
                    let mut idx = 0;
                    for_each_net(&mut q, |n| {
                        if idx == k {
                            let mut v = base.clone();
                            v[i] += delta;
                            n.set_flat_params(&v).unwrap();
                        }
                        idx += 1;
                    });
                    loss(&q)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic[k][i];
                let scale = fd.abs().max(an.abs());
                assert!(
                    (fd - an).abs() <= 1e-4 * scale || (fd - an).abs() < 1e-8,
                    "net {k} param {i}: fd {fd} analytic {an}"
                );
                checked += 1;
            }
        }
        assert_eq!(net_idx, analytic.len());
        checked
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        critic_fd_case(f64::INFINITY);
    }

    #[test]
    fn huber_critic_gradients_match_finite_differences() {
        critic_fd_case(0.05);
    }

    #[test]
    fn huber_is_continuous_with_matching_slope() {
        let d = 0.7;
        assert_eq!(huber(0.3, d), 0.09);
        assert!((huber(d + 1e-9, d) - huber(d - 1e-9, d)).abs() < 1e-8);
        assert!((huber(-3.0, d) - d * (6.0 - d)).abs() < 1e-15);
        assert_eq!(huber(5.0, f64::INFINITY), 25.0);
    }

    fn critic_fd_case(delta: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sh = shape(2);
        let params = randomized(sh, &mut rng);
        let b0 = random_batch(&sh, 4, &mut rng);
        let b1 = random_batch(&sh, 4, &mut rng);
        let batches = [(0, &b0), (1, &b1)];
        let mut grads = CdnetGrads::zeros_like(&params);
        params.critic_gradients(&batches, 0.9, delta, &mut grads).unwrap();
        // ρ is a fixed target: hold it constant while probing.
        let rho: Vec<Vec<f64>> = batches
            .iter()
            .map(|(a, b)| params.td_targets(*a, b, 0.9).unwrap())
            .collect();
        let loss = |q: &CdnetParams| {
            let mut total = 0.0;
            for ((agent, batch), rho) in batches.iter().zip(&rho) {
                let enc = q.encode(*agent, &batch.states, batch.len).unwrap();
                let input = concat_rows(enc.psi(), sh.hidden, &batch.gains, sh.gain_dim, batch.len);
                for c in 0..2 {
                    let out = q.agents[*agent].critics[c].forward(&input, batch.len).unwrap();
                    total += out.output().iter().zip(rho).map(|(v, r)| huber(v - r, delta)).sum::<f64>()
                        / batch.len as f64;
                }
            }
            total
        };
        assert!(check_fd(&params, &flat_grads(&grads), loss, |_| true) > 100);
        assert!(grads.agents.iter().all(|a| a.actor.flat().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn actor_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sh = shape(2);
        let params = randomized(sh, &mut rng);
        let b0 = random_batch(&sh, 5, &mut rng);
        let b1 = random_batch(&sh, 5, &mut rng);
        let batches = [(0, &b0), (1, &b1)];
        let mut grads = CdnetGrads::zeros_like(&params);
        params.actor_gradients(&batches, 0.3, &mut grads).unwrap();
        // The actor objective reaches ψ only through κ; the critic's own ψ
        // input is treated as a constant.
        let fixed_psi: Vec<Vec<f64>> = batches
            .iter()
            .map(|(a, b)| params.encode(*a, &b.states, b.len).unwrap().psi().to_vec())
            .collect();
        let loss = |q: &CdnetParams| {
            let mut total = 0.0;
            for ((agent, batch), psi_c) in batches.iter().zip(&fixed_psi) {
                let n = batch.len;
                let enc = q.encode(*agent, &batch.states, n).unwrap();
                let (_, gains) = q.actor_gains(*agent, enc.psi(), n).unwrap();
                let input = concat_rows(psi_c, sh.hidden, &gains, sh.gain_dim, n);
                let q1 = q.agents[*agent].critics[0].forward(&input, n).unwrap();
                let q2 = q.agents[*agent].critics[1].forward(&input, n).unwrap();
                for i in 0..n {
                    total -= pessimistic_q(q1.output()[i], q2.output()[i]) / n as f64;
                }
                total += 0.3 * gains.iter().map(|k| k * k).sum::<f64>() / n as f64;
            }
            total
        };
        // Critic parameters are excluded: the actor step never touches them.
        let is_critic = |k: usize| k > 0 && (k - 1) % 4 >= 2;
        assert!(check_fd(&params, &flat_grads(&grads), loss, |k| !is_critic(k)) > 100);
        for a in &grads.agents {
            assert!(a.critics.iter().all(|c| c.flat().iter().all(|v| *v == 0.0)));
        }
    }

    #[test]
    fn features_are_deterministic_and_agent_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = randomized(shape(3), &mut rng);
        p.agents[1].head = p.agents[0].head.clone();
        let x = [0.3, -0.2, 0.9];
        assert_eq!(p.forward_features(&x, 0).unwrap(), p.forward_features(&x, 1).unwrap());

        let before: Vec<_> = (0..3).map(|i| p.forward_features(&x, i).unwrap()).collect();
        let mut v = p.agents[2].head.flat_params();
        v.iter_mut().for_each(|w| *w += 0.1);
        p.agents[2].head.set_flat_params(&v).unwrap();
        assert_eq!(before[0], p.forward_features(&x, 0).unwrap());
        assert_eq!(before[1], p.forward_features(&x, 1).unwrap());
        assert_ne!(before[2], p.forward_features(&x, 2).unwrap());

        let mut t = p.trunk.flat_params();
        t.iter_mut().for_each(|w| *w *= 1.1);
        p.trunk.set_flat_params(&t).unwrap();
        for (i, old) in before.iter().take(2).enumerate() {
            assert_ne!(*old, p.forward_features(&x, i).unwrap());
        }
    }

    #[test]
    fn select_gain_zero_actor_and_exploration_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let sh = shape(2);
        let mut p = CdnetParams::new(sh, &mut rng);
        let zero: Vec<f64> = vec![0.0; p.agents[0].actor.param_count()];
        p.agents[0].actor.set_flat_params(&zero).unwrap();
        let psi = vec![0.5; sh.hidden];
        assert_eq!(select_gain(&p, &psi, 0, None, &mut rng).unwrap(), vec![0.0, 0.0]);
        let k1 = select_gain(&p, &psi, 1, None, &mut rng).unwrap();
        assert_eq!(k1, select_gain(&p, &psi, 1, None, &mut rng).unwrap());

        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| select_gain(&p, &psi, 0, Some(0.3), &mut rng).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let std = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((std - 0.3).abs() < 0.015, "std {std}");
        assert!(draws.iter().all(|d| d.abs() <= 2.0));
    }

    #[test]
    fn reward_values() {
        let s = DMatrix::identity(3, 3);
        let r = DMatrix::identity(1, 1);
        assert_eq!(immediate_reward(&[0.0; 3], &[0.0], &s, &r), 0.0);
        assert_eq!(immediate_reward(&[1.0, 0.0, 0.0], &[0.0], &s, &r), -1.0);

        let model = MasModel::preset("A5").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let u: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let c = model
                .stage_cost(&DVector::from_vec(x.clone()), &DVector::from_vec(u.clone()))
                .unwrap();
            let r = immediate_reward(&x, &u, model.s(), model.r());
            assert!((r + c).abs() < 1e-12);
            assert!(r <= 0.0);
        }
    }

    #[test]
    fn pessimistic_q_is_minimum() {
        assert_eq!(pessimistic_q(3.0, 5.0), 3.0);
        assert_eq!(pessimistic_q(-1.5, -1.5), -1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..1000 {
            let (a, b) = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
            let m = pessimistic_q(a, b);
            assert!(m <= a && m <= b);
        }
    }

    fn constant_critic(net: &mut DenseNet, c: f64) {
        let mut v = vec![0.0; net.param_count()];
        *v.last_mut().unwrap() = c;
        net.set_flat_params(&v).unwrap();
    }

    #[test]
    fn td_target_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let sh = shape(2);
        let mut p = CdnetParams::new(sh, &mut rng);
        for t in &mut p.agents[0].targets {
            constant_critic(t, -4.0);
        }
        let mut batch = random_batch(&sh, 8, &mut rng);
        let rho = p.td_targets(0, &batch, 0.0).unwrap();
        assert_eq!(rho, batch.rewards);
        let rho = p.td_targets(0, &batch, 0.95).unwrap();
        for i in 0..batch.len {
            let expect = if batch.terminal[i] {
                batch.rewards[i]
            } else {
                batch.rewards[i] + 0.95 * -4.0
            };
            assert!((rho[i] - expect).abs() < 1e-12);
        }
        batch.terminal.iter_mut().for_each(|t| *t = true);
        assert_eq!(p.td_targets(0, &batch, 0.95).unwrap(), batch.rewards);
    }

    #[test]
    fn critic_step_at_fixed_point_leaves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let sh = shape(2);
        let mut p = randomized(sh, &mut rng);
        // Make both critics identical so one reward vector zeroes both errors.
        p.agents[0].critics[1] = p.agents[0].critics[0].clone();
        let mut batch = random_batch(&sh, 6, &mut rng);
        for i in 0..batch.len {
            let s = &batch.states[i * sh.state_len..(i + 1) * sh.state_len];
            let k = &batch.gains[i * sh.gain_dim..(i + 1) * sh.gain_dim];
            let psi = p.forward_features(s, 0).unwrap();
            batch.rewards[i] = p.q_values(&psi, k, 0).unwrap().0;
        }
        let before = p.clone();
        let mut opt = CdnetOptimizer::new(&p);
        let mut grads = CdnetGrads::zeros_like(&p);
        let losses = p.critic_gradients(&[(0, &batch)], 0.0, f64::INFINITY, &mut grads).unwrap();
        assert!(losses[0].0 < 1e-24 && losses[0].1 < 1e-24);
        opt.apply_critic_step(&mut p, &grads, &[0], 1e-3);
        let diff = |a: &DenseNet, b: &DenseNet| {
            a.flat_params()
                .iter()
                .zip(b.flat_params())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        assert!(diff(&p.trunk, &before.trunk) < 1e-12);
        assert!(diff(&p.agents[0].critics[0], &before.agents[0].critics[0]) < 1e-12);
        assert!(diff(&p.agents[0].head, &before.agents[0].head) < 1e-12);
    }

    #[test]
    fn single_sample_critic_loss_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let sh = shape(2);
        let mut p = randomized(sh, &mut rng);
        let batch = random_batch(&sh, 1, &mut rng);
        let mut opt = CdnetOptimizer::new(&p);
        let mut grads = CdnetGrads::zeros_like(&p);
        let before = p.critic_gradients(&[(0, &batch)], 0.0, f64::INFINITY, &mut grads).unwrap()[0];
        opt.apply_critic_step(&mut p, &grads, &[0], 1e-4);
        grads.clear();
        let after = p.critic_gradients(&[(0, &batch)], 0.0, f64::INFINITY, &mut grads).unwrap()[0];
        assert!(after.0 < before.0 && after.1 < before.1);
    }

    #[test]
    fn action_independent_critic_gives_zero_actor_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let sh = shape(2);
        let mut p = randomized(sh, &mut rng);
        for c in &mut p.agents[0].critics {
            let first = &mut c.layers[0];
            for o in 0..first.outputs {
                for j in sh.hidden..first.inputs {
                    first.weights[o * first.inputs + j] = 0.0;
                }
            }
        }
        let batch = random_batch(&sh, 6, &mut rng);
        let mut grads = CdnetGrads::zeros_like(&p);
        p.actor_gradients(&[(0, &batch)], 0.0, &mut grads).unwrap();
        assert!(grads.agents[0].actor.flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn actor_climbs_quadratic_critic() {
        // Hidden ReLU units with knots every 0.25 on both sides of k* give
        // the piecewise-linear interpolant of −(K − k*)².
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sh = NetworkShape {
            agents: 1,
            state_len: 1,
            gain_dim: 1,
            hidden: 16,
            gain_bound: 2.0,
        };
        let mut p = CdnetParams::new(sh, &mut rng);
        let target = 0.8;
        let k_col = sh.hidden;
        for c in &mut p.agents[0].critics {
            let l0 = &mut c.layers[0];
            l0.weights.iter_mut().for_each(|w| *w = 0.0);
            let l1_weights: Vec<f64> = (0..16)
                .map(|u| {
                    let (sign, k) = if u < 8 { (1.0, u) } else { (-1.0, u - 8) };
                    let knot = 0.25 * k as f64;
                    l0.weights[u * l0.inputs + k_col] = sign;
                    l0.bias[u] = -sign * target - knot;
                    if k == 0 {
                        -0.25
                    } else {
                        -0.5
                    }
                })
                .collect();
            let l1 = &mut c.layers[1];
            l1.weights.copy_from_slice(&l1_weights);
            l1.bias[0] = 0.0;
        }
        let q_at = |p: &CdnetParams, k: f64| p.q_values(&vec![0.0; 16], &[k], 0).unwrap().0;
        for k in [0.8, 1.05, 0.3, -0.2] {
            assert!((q_at(&p, k) + (k - target) * (k - target)).abs() < 1e-12);
        }
        let mut opt = CdnetOptimizer::new(&p);
        let mut grads = CdnetGrads::zeros_like(&p);
        let mut batch = AgentBatch::with_capacity(1, &sh);
        batch.push(&[1.0], &[0.0], 0.0, &[1.0], false);
        let gap = |p: &CdnetParams| {
            let psi = p.forward_features(&[1.0], 0).unwrap();
            (p.deterministic_gain(&psi, 0).unwrap()[0] - target).abs()
        };
        let mut last = gap(&p);
        let start = last;
        for step in 0..200 {
            grads.clear();
            p.actor_gradients(&[(0, &batch)], 0.0, &mut grads).unwrap();
            opt.apply_actor_step(&mut p, &grads, &[0], 1e-3);
            let now = gap(&p);
            if step % 20 == 19 {
                // Adam may oscillate once it is at the optimum.
                assert!(now < last || now < 0.01, "step {step}: {last} -> {now}");
                last = now;
            }
        }
        assert!(last < 0.5 * start, "{start} -> {last}");
    }
}
