//! Encoded corrective double-critic actor-critic learner.

pub mod checkpoint;
pub mod nn;
pub mod params;
pub mod replay;
pub mod train;

use thiserror::Error;

pub use params::{
    immediate_reward, pessimistic_q, select_gain, AgentBatch, CdnetGrads, CdnetOptimizer, CdnetParams, NetworkShape,
};
pub use replay::{CorrectedSample, HistoryBuffer, JointTransition, ReplayBuffer};
pub use train::{train, CommSettings, EpisodeMetrics, InitialState, Learner, TrainConfig, TrainOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
    #[error(transparent)]
    Messaging(#[from] crate::messaging::MessagingError),
}
