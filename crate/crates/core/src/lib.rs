//! Distributed control of networked multi-agent LTI systems over noisy,
//! delayed links.

pub mod dst;
pub mod dynamics;
pub mod experiments;
pub mod graph;
pub mod learner;
pub mod messaging;
