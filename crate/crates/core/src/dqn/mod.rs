//! Efficient DQN: multi-step returns over clipped rewards, prioritized
//! replay, soft target updates.

mod checkpoint;
mod learner;
mod replay;

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::StackedState;

pub use checkpoint::{Checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_VERSION};
pub use learner::{batch_inputs, dqn_loss_and_grad, dqn_update, DqnUpdate, QFunction};
pub use replay::{PrioritizedReplay, SampledBatch};

pub const EPSILON_FLOOR: f64 = 0.01;

/// Episodic multiplicative epsilon decay with a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub epsilon: f64,
    pub floor: f64,
    pub decay: f64,
}

impl EpsilonSchedule {
    pub fn new(decay: f64) -> Self {
        Self {
            epsilon: 1.0,
            floor: EPSILON_FLOOR,
            decay,
        }
    }

    /// `epsilon <- max(floor, decay * epsilon)`
    pub fn decayed(self) -> Self {
        Self {
            epsilon: (self.epsilon * self.decay).max(self.floor),
            ..self
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy choice over `q_values`.
pub fn act<R: Rng + ?Sized>(q_values: &[f32], schedule: &EpsilonSchedule, rng: &mut R) -> usize {
    assert!(!q_values.is_empty(), "no actions to choose from");
    if rng.random::<f64>() < schedule.epsilon {
        rng.random_range(0..q_values.len())
    } else {
        argmax(q_values)
    }
}

pub fn clip_reward(r: f64) -> f64 {
    r.clamp(-1.0, 1.0)
}

/// `sum_i gamma^i r_i`, plus `gamma^len * bootstrap_q` when the bootstrap
/// state is not terminal.
pub fn n_step_return(rewards: &[f64], bootstrap_q: f64, bootstrap_valid: bool, gamma: f64) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::EmptyRewards);
    }
    let discounted: f64 = rewards
        .iter()
        .enumerate()
        .map(|(i, r)| gamma.powi(i as i32) * r)
        .sum();
    Ok(if bootstrap_valid {
        discounted + gamma.powi(rewards.len() as i32) * bootstrap_q
    } else {
        discounted
    })
}

/// An n-step transition as stored in replay.
#[derive(Debug, Clone, PartialEq)]
pub struct PrioritizedTransition {
    pub state: StackedState,
    pub action: usize,
    /// Discounted sum of the (clipped) rewards, without the bootstrap term.
    pub n_step_return: f64,
    /// Number of rewards summed; the bootstrap term is discounted by `gamma^steps`.
    pub steps: usize,
    pub bootstrap_state: StackedState,
    pub bootstrap_valid: bool,
    pub priority: f64,
}

/// Turns a stream of one-step transitions into n-step transitions.
#[derive(Debug, Clone)]
pub struct NStepAccumulator {
    n: usize,
    gamma: f64,
    window: VecDeque<(StackedState, usize, f64)>,
}

impl NStepAccumulator {
    pub fn new(n: usize, gamma: f64) -> Self {
        assert!(n >= 1);
        Self {
            n,
            gamma,
            window: VecDeque::with_capacity(n),
        }
    }

    fn emit(&self, next_state: &StackedState, valid: bool) -> PrioritizedTransition {
        let rewards: Vec<f64> = self.window.iter().map(|(_, _, r)| *r).collect();
        let (state, action, _) = self.window.front().expect("non-empty window").clone();
        PrioritizedTransition {
            state,
            action,
            n_step_return: n_step_return(&rewards, 0.0, false, self.gamma).expect("non-empty"),
            steps: rewards.len(),
            bootstrap_state: next_state.clone(),
            bootstrap_valid: valid,
            priority: 0.0,
        }
    }

    /// Record `(state, action, reward) -> next_state`; returns the
    /// transitions that became complete. A terminal step flushes the window.
    pub fn push(&mut self, state: StackedState, action: usize, reward: f64, next_state: &StackedState, terminal: bool) -> Vec<PrioritizedTransition> {
        self.window.push_back((state, action, clip_reward(reward)));
        let mut out = Vec::new();
        if terminal {
            while !self.window.is_empty() {
                out.push(self.emit(next_state, false));
                self.window.pop_front();
            }
        } else if self.window.len() == self.n {
            out.push(self.emit(next_state, true));
            self.window.pop_front();
        }
        out
    }

    pub fn clear(&mut self) {
        self.window.clear();
    }
}
