//! Deep Q-learning from environment reward, binary evaluative feedback and
//! human saliency boxes, with context-aware augmentation of the regions the
//! trainer marked irrelevant.

pub mod agent;
pub mod augment;
pub mod baselines;
pub mod dqn;
pub mod env;
pub mod error;
pub mod feedback;
pub mod nn;
pub mod oracle;
pub mod service;
pub mod orchestrator;
pub mod state;

pub use error::{Error, Result};
