//! Noisy multi-hop transmission, bias removal, adaptive EMA refinement and
//! the time-shift buffer that re-aligns delayed components.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{AgentId, Route, RoutingTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MessagingError {
    #[error("missing refined value from agent {0}")]
    MissingSender(AgentId),
    #[error("agent {0} reported twice")]
    DuplicateSender(AgentId),
    #[error("delay {delay} of agent {sender} does not fit buffer capacity {capacity}")]
    DelayTooLarge {
        sender: AgentId,
        delay: usize,
        capacity: usize,
    },
    #[error("sub-state of agent {sender} has length {actual}, expected {expected}")]
    Dimension {
        sender: AgentId,
        expected: usize,
        actual: usize,
    },
    #[error("no reconstructed state is ready")]
    Empty,
    #[error("invalid beta bounds [{0}, {1}]")]
    BadBetaBounds(f64, f64),
}

/// A sub-state as received (before refinement).
#[derive(Debug, Clone, PartialEq)]
pub struct RawObservation {
    pub sender: AgentId,
    pub receiver: AgentId,
    pub value: Vec<f64>,
    /// Receiver local time of reception.
    pub time: usize,
}

/// Sends `x` along `route`, adding one fresh Gaussian draw per link and
/// per component.
pub fn transmit<R: Rng + ?Sized>(x: &[f64], route: &Route, time: usize, rng: &mut R) -> RawObservation {
    let mut value = x.to_vec();
    for link in &route.links {
        if link.sigma2 == 0.0 {
            value.iter_mut().for_each(|v| *v += link.mu);
            continue;
        }
        let normal = Normal::new(link.mu, link.sigma2.sqrt()).expect("validated link noise");
        for v in &mut value {
            *v += normal.sample(rng);
        }
    }
    RawObservation {
        sender: route.sender,
        receiver: route.receiver,
        value,
        time,
    }
}

/// Removes the accumulated route bias: `ȳ = y − μ_total`.
pub fn debias(y: &[f64], mu_total: f64) -> Vec<f64> {
    y.iter().map(|v| v - mu_total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaConfig {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Number of recent refined-value differences kept for the variance.
    pub window: usize,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            beta_min: 0.05,
            beta_max: 0.95,
            window: 10,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<(), MessagingError> {
        let ok = self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(MessagingError::BadBetaBounds(self.beta_min, self.beta_max))
        }
    }
}

/// Filter state of one (receiver, sender) channel.
///
/// All components of a vector sub-state share one smoothing coefficient,
/// computed from the component-averaged difference variance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaChannel {
    config: EmaConfig,
    sigma2_total: f64,
    previous: Option<Vec<f64>>,
    diffs: VecDeque<Vec<f64>>,
}

impl EmaChannel {
    pub fn new(config: EmaConfig, sigma2_total: f64) -> Self {
        Self {
            config,
            sigma2_total,
            previous: None,
            diffs: VecDeque::with_capacity(config.window),
        }
    }

    /// Starts from a known previous refined value (no window history).
    pub fn with_previous(config: EmaConfig, sigma2_total: f64, previous: Vec<f64>) -> Self {
        let mut ch = Self::new(config, sigma2_total);
        ch.previous = Some(previous);
        ch
    }

    pub fn previous(&self) -> Option<&[f64]> {
        self.previous.as_deref()
    }

    pub fn window_len(&self) -> usize {
        self.diffs.len()
    }

    /// Forgets history; the next refinement passes its input through.
    pub fn reset(&mut self) {
        self.previous = None;
        self.diffs.clear();
    }

    /// Unbiased sample variance of the windowed differences, averaged over
    /// components. Zero for fewer than two samples.
    pub fn difference_variance(&self) -> f64 {
        let k = self.diffs.len();
        if k < 2 {
            return 0.0;
        }
        let dim = self.diffs[0].len();
        if dim == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for c in 0..dim {
            let mean = self.diffs.iter().map(|d| d[c]).sum::<f64>() / k as f64;
            let ss: f64 = self.diffs.iter().map(|d| (d[c] - mean).powi(2)).sum();
            total += ss / (k - 1) as f64;
        }
        total / dim as f64
    }

    /// Steady-state Kalman-style gain `σ²_x / (σ²_x + σ²_total)`, clamped to
    /// `[β_min, β_max]`; `β_max` until two differences are available.
    pub fn adapt_beta(&self) -> f64 {
        let (lo, hi) = (self.config.beta_min, self.config.beta_max);
        if self.diffs.len() < 2 {
            return hi;
        }
        let var_x = self.difference_variance();
        let denom = var_x + self.sigma2_total;
        let beta = if denom > 0.0 { var_x / denom } else { hi };
        beta.clamp(lo, hi)
    }

    /// `x̃ = β ȳ + (1 − β) x̃_prev`; records the new difference.
    pub fn ema_refine(&mut self, y_bar: &[f64], beta: f64) -> Vec<f64> {
        let refined = match &self.previous {
            None => y_bar.to_vec(),
            Some(prev) => y_bar
                .iter()
                .zip(prev)
                .map(|(y, p)| beta * y + (1.0 - beta) * p)
                .collect(),
        };
        if let Some(prev) = &self.previous {
            if self.diffs.len() == self.config.window {
                self.diffs.pop_front();
            }
            if self.config.window > 0 {
                self.diffs
                    .push_back(refined.iter().zip(prev).map(|(a, b)| a - b).collect());
            }
        }
        self.previous = Some(refined.clone());
        refined
    }

    /// Debiased input → refined output using the adaptive coefficient.
    /// Noise-free channels pass the value through unfiltered.
    pub fn refine(&mut self, y_bar: &[f64]) -> Vec<f64> {
        if self.sigma2_total == 0.0 {
            return self.ema_refine(y_bar, 1.0);
        }
        let beta = self.adapt_beta();
        self.ema_refine(y_bar, beta)
    }
}

/// An agent's refined estimate of the global state at its local time.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedGlobalState {
    pub owner: AgentId,
    pub time: usize,
    /// Stacked sub-states ordered by agent index.
    pub values: Vec<f64>,
}

/// Assembles the global estimate with the owner's exact state in its slot.
/// `refined` must hold one entry for every other agent, in any order.
pub fn build_refined_state(
    owner: AgentId,
    time: usize,
    own_state: &[f64],
    refined: &[(AgentId, Vec<f64>)],
    agents: usize,
) -> Result<RefinedGlobalState, MessagingError> {
    let dim = own_state.len();
    let mut slots: Vec<Option<&[f64]>> = vec![None; agents];
    slots[owner.index()] = Some(own_state);
    for (sender, value) in refined {
        if *sender == owner {
            continue;
        }
        if value.len() != dim {
            return Err(MessagingError::Dimension {
                sender: *sender,
                expected: dim,
                actual: value.len(),
            });
        }
        let slot = slots
            .get_mut(sender.index())
            .ok_or(MessagingError::MissingSender(*sender))?;
        if slot.is_some() {
            return Err(MessagingError::DuplicateSender(*sender));
        }
        *slot = Some(value);
    }
    let mut values = Vec::with_capacity(agents * dim);
    for (i, slot) in slots.into_iter().enumerate() {
        values.extend_from_slice(slot.ok_or(MessagingError::MissingSender(AgentId::from_index(i)))?);
    }
    Ok(RefinedGlobalState {
        owner,
        time,
        values,
    })
}

/// One reconstructed global state plus which agents have been written.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSlot {
    pub values: Vec<f64>,
    pub filled: Vec<bool>,
}

impl ShiftSlot {
    fn zeros(agents: usize, dim: usize) -> Self {
        Self {
            values: vec![0.0; agents * dim],
            filled: vec![false; agents],
        }
    }

    pub fn fully_filled(&self) -> bool {
        self.filled.iter().all(|&f| f)
    }
}

/// FIFO of `capacity` slots; depth 0 is the newest. A component that arrives
/// with delay `d` is written to the slot at depth `d`, i.e. the slot of the
/// time step at which it was sampled.
#[derive(Debug, Clone)]
pub struct TimeShiftBuffer {
    owner: AgentId,
    dim: usize,
    delays: Vec<usize>,
    /// Front = oldest, back = newest.
    slots: VecDeque<ShiftSlot>,
    completed: VecDeque<ShiftSlot>,
    capacity: usize,
    pushes: usize,
}

impl TimeShiftBuffer {
    pub fn new(
        owner: AgentId,
        delays: Vec<usize>,
        state_dim: usize,
        capacity: usize,
    ) -> Result<Self, MessagingError> {
        if let Some((i, &delay)) = delays.iter().enumerate().find(|(_, &d)| d >= capacity) {
            return Err(MessagingError::DelayTooLarge {
                sender: AgentId::from_index(i),
                delay,
                capacity,
            });
        }
        let agents = delays.len();
        Ok(Self {
            owner,
            dim: state_dim,
            slots: (0..capacity).map(|_| ShiftSlot::zeros(agents, state_dim)).collect(),
            delays,
            completed: VecDeque::new(),
            capacity,
            pushes: 0,
        })
    }

    /// Buffer for `owner` with delays from `table` and capacity `D_ℓ + 4`.
    pub fn from_routes(owner: AgentId, table: &RoutingTable, state_dim: usize) -> Result<Self, MessagingError> {
        let delays = table.delays(owner);
        let capacity = default_capacity(delays.iter().copied().max().unwrap_or(0));
        Self::new(owner, delays, state_dim, capacity)
    }

    pub fn owner(&self) -> AgentId {
        self.owner
    }
    pub fn capacity(&self) -> usize {
        self.capacity
    }
    pub fn delays(&self) -> &[usize] {
        &self.delays
    }
    pub fn max_delay(&self) -> usize {
        self.delays.iter().copied().max().unwrap_or(0)
    }
    pub fn pushes(&self) -> usize {
        self.pushes
    }

    /// Readiness count `D_ℓ × P_ℓ`.
    pub fn readiness_steps(&self) -> usize {
        self.max_delay() * self.capacity()
    }

    /// Slot at `depth` (0 = newest).
    pub fn slot(&self, depth: usize) -> Option<&ShiftSlot> {
        let n = self.slots.len();
        (depth < n).then(|| &self.slots[n - 1 - depth])
    }

    /// Writes each component into its delay slot, then retires the oldest
    /// slot and opens a zeroed one.
    pub fn push(&mut self, state: &RefinedGlobalState) -> Result<(), MessagingError> {
        let agents = self.delays.len();
        if state.values.len() != agents * self.dim {
            return Err(MessagingError::Dimension {
                sender: state.owner,
                expected: agents * self.dim,
                actual: state.values.len(),
            });
        }
        let n = self.slots.len();
        for (m, &d) in self.delays.iter().enumerate() {
            let slot = &mut self.slots[n - 1 - d];
            let range = m * self.dim..(m + 1) * self.dim;
            slot.values[range.clone()].copy_from_slice(&state.values[range]);
            slot.filled[m] = true;
        }
        let oldest = self.slots.pop_front().expect("capacity > 0");
        self.completed.push_back(oldest);
        self.slots.push_back(ShiftSlot::zeros(agents, self.dim));
        self.pushes += 1;
        Ok(())
    }

    /// Retires every slot still held (oldest first), e.g. at episode end.
    pub fn flush(&mut self) {
        self.completed.extend(self.slots.drain(..));
        self.refill();
    }

    /// Drops all slots and retired states, keeping delays and capacity.
    pub fn reset(&mut self) {
        self.slots.clear();
        self.completed.clear();
        self.refill();
    }

    fn refill(&mut self) {
        let agents = self.delays.len();
        while self.slots.len() < self.capacity {
            self.slots.push_back(ShiftSlot::zeros(agents, self.dim));
        }
    }

    /// Oldest retired slot and whether every component was written.
    pub fn pop_reconstructed(&mut self) -> Result<(Vec<f64>, bool), MessagingError> {
        let slot = self.completed.pop_front().ok_or(MessagingError::Empty)?;
        let full = slot.fully_filled();
        Ok((slot.values, full))
    }

    pub fn ready(&self) -> usize {
        self.completed.len()
    }
}

/// Default buffer capacity `P = D + 4`.
pub fn default_capacity(max_delay: usize) -> usize {
    max_delay + 4
}

/// How received sub-states are turned into an agent's global estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimation {
    /// Debias, then adaptive EMA per channel.
    Refined,
    /// Use raw received values as-is.
    Raw,
}

#[derive(Debug, Clone)]
struct Receiver {
    owner: AgentId,
    routes: Vec<Route>,
    delays: Vec<usize>,
    channels: Vec<EmaChannel>,
}

/// Simulates every agent's reception over a static routing table.
///
/// Agent ℓ at time `t` receives sender m's state sampled at `t − d_{ℓ,m}`
/// (clamped to the episode start) plus the accumulated link noise.
#[derive(Debug, Clone)]
pub struct MessagePassing {
    receivers: Vec<Receiver>,
    state_dim: usize,
    estimation: Estimation,
}

impl MessagePassing {
    pub fn new(
        table: &RoutingTable,
        state_dim: usize,
        ema: EmaConfig,
        with_delays: bool,
        estimation: Estimation,
    ) -> Result<Self, MessagingError> {
        ema.validate()?;
        let receivers = (0..table.agents())
            .map(|i| {
                let owner = AgentId::from_index(i);
                let routes = table.routes_to(owner).to_vec();
                let delays = if with_delays {
                    routes.iter().map(Route::delay).collect()
                } else {
                    vec![0; routes.len()]
                };
                let channels = routes
                    .iter()
                    .map(|r| EmaChannel::new(ema, r.sigma2_total))
                    .collect();
                Receiver {
                    owner,
                    routes,
                    delays,
                    channels,
                }
            })
            .collect();
        Ok(Self {
            receivers,
            state_dim,
            estimation,
        })
    }

    pub fn agents(&self) -> usize {
        self.receivers.len()
    }

    /// Effective delays seen by `receiver` (all zero when delays are off).
    pub fn delays(&self, receiver: AgentId) -> &[usize] {
        &self.receivers[receiver.index()].delays
    }

    pub fn reset(&mut self) {
        for r in &mut self.receivers {
            r.channels.iter_mut().for_each(EmaChannel::reset);
        }
    }

    /// Every agent's global estimate at time `t = history.len() − 1`, where
    /// `history[τ]` is the true stacked state at time τ.
    pub fn observe<R: Rng + ?Sized>(
        &mut self,
        history: &[Vec<f64>],
        rng: &mut R,
    ) -> Vec<RefinedGlobalState> {
        let t = history.len() - 1;
        let dim = self.state_dim;
        let estimation = self.estimation;
        self.receivers
            .iter_mut()
            .map(|rx| {
                let own = rx.owner.index();
                let mut values = Vec::with_capacity(rx.routes.len() * dim);
                for (m, route) in rx.routes.iter().enumerate() {
                    let sampled = &history[t.saturating_sub(rx.delays[m])][m * dim..(m + 1) * dim];
                    if m == own {
                        values.extend_from_slice(&history[t][m * dim..(m + 1) * dim]);
                        continue;
                    }
                    let y = transmit(sampled, route, t, rng).value;
                    match estimation {
                        Estimation::Raw => values.extend_from_slice(&y),
                        Estimation::Refined => {
                            let y_bar = debias(&y, route.mu_total);
                            values.extend(rx.channels[m].refine(&y_bar));
                        }
                    }
                }
                RefinedGlobalState {
                    owner: rx.owner,
                    time: t,
                    values,
                }
            })
            .collect()
    }
}
