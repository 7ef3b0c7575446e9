//! Environments with pixel observations.

pub mod taxi;

use crate::error::Result;
use crate::state::RawFrame;

pub use taxi::{Action, Cell, PassengerColor, PixelTaxi, TaxiConfig, TaxiState};

/// Outcome of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStepResult {
    pub frame: RawFrame,
    pub reward: f64,
    pub terminal: bool,
}

/// Episodic environment rendering RGB frames.
pub trait Environment {
    fn action_count(&self) -> usize;

    fn reset(&mut self, seed: u64) -> Result<RawFrame>;

    fn step(&mut self, action: usize) -> Result<EnvStepResult>;
}
