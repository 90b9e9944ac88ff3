//! Experience replay and the per-agent history of corrected samples.

use std::collections::VecDeque;

use rand::Rng;

use super::params::{AgentBatch, NetworkShape};

/// One joint environment step; per-agent fields are indexed by agent.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTransition {
    pub states: Vec<Vec<f64>>,
    pub gains: Vec<Vec<f64>>,
    /// Stacked applied input `U(t)`.
    pub inputs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<Vec<f64>>,
    pub terminal: bool,
}

/// Fixed-capacity ring buffer with uniform sampling with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<JointTransition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Inserts, overwriting the oldest entry once full.
    pub fn push(&mut self, t: JointTransition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, index: usize) -> Option<&JointTransition> {
        self.items.get(index)
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| rng.gen_range(0..self.items.len())).collect()
    }

    /// Per-agent batches sharing one set of sampled indices.
    pub fn agent_batches(&self, indices: &[usize], shape: &NetworkShape) -> Vec<AgentBatch> {
        (0..shape.agents)
            .map(|a| {
                let mut b = AgentBatch::with_capacity(indices.len(), shape);
                for &i in indices {
                    let t = &self.items[i];
                    b.push(&t.states[a], &t.gains[a], t.rewards[a], &t.next_states[a], t.terminal);
                }
                b
            })
            .collect()
    }
}

/// A transition rebuilt from time-aligned states, with the reward recomputed
/// on the reconstruction and the action that was actually taken.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedSample {
    pub time: usize,
    pub state: Vec<f64>,
    pub gain: Vec<f64>,
    pub input: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Bounded FIFO of corrected samples for one agent.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    capacity: usize,
    items: VecDeque<CorrectedSample>,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, sample: CorrectedSample) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(sample);
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    /// Empties the buffer into a single batch.
    pub fn drain_batch(&mut self, shape: &NetworkShape) -> AgentBatch {
        let mut b = AgentBatch::with_capacity(self.items.len(), shape);
        for s in self.items.drain(..) {
            b.push(&s.state, &s.gain, s.reward, &s.next_state, s.terminal);
        }
        b
    }
}
