use ndarray::Array2;

use super::{argmax, PrioritizedReplay, PrioritizedTransition, SampledBatch};
use crate::error::{Error, Result};
use crate::nn::{cast, Adam, GatedQNetwork, GatedTrace, Maps, Parameters, QNetwork, QTrace, Scalar};
use crate::state::StackedState;

/// A network mapping a state batch to per-action values.
pub trait QFunction<T: Scalar>: Parameters<T> + Clone {
    type Trace;

    fn forward_q(&self, x: &Maps<T>) -> (Array2<T>, Self::Trace);

    /// Accumulate parameter gradients for `dq` into `grads`.
    fn backward_q(&self, trace: &Self::Trace, dq: &Array2<T>, grads: &mut Self);

    fn zeroed(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }
}

impl<T: Scalar> QFunction<T> for QNetwork<T> {
    type Trace = QTrace<T>;

    fn forward_q(&self, x: &Maps<T>) -> (Array2<T>, QTrace<T>) {
        self.forward(x)
    }

    fn backward_q(&self, trace: &QTrace<T>, dq: &Array2<T>, grads: &mut Self) {
        self.backward(trace, dq, grads)
    }
}

impl<T: Scalar> QFunction<T> for GatedQNetwork<T> {
    type Trace = GatedTrace<T>;

    fn forward_q(&self, x: &Maps<T>) -> (Array2<T>, GatedTrace<T>) {
        self.forward(x)
    }

    fn backward_q(&self, trace: &GatedTrace<T>, dq: &Array2<T>, grads: &mut Self) {
        self.backward(trace, dq, None, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqnUpdate {
    pub loss: f64,
    /// `target - Q(s, a)` per batch row.
    pub td_errors: Vec<f64>,
}

/// States and bootstrap states of a batch, packed for the network.
pub fn batch_inputs<T: Scalar>(batch: &[PrioritizedTransition]) -> (Maps<T>, Maps<T>) {
    let states: Vec<&StackedState> = batch.iter().map(|t| &t.state).collect();
    let boots: Vec<&StackedState> = batch.iter().map(|t| &t.bootstrap_state).collect();
    (Maps::from_states(&states), Maps::from_states(&boots))
}

/// Importance-weighted mean squared n-step TD error and its gradient,
/// accumulated into `grads`. The bootstrap uses `max_a Q_target`.
#[allow(clippy::too_many_arguments)]
pub fn dqn_loss_and_grad<T: Scalar, Q: QFunction<T>>(
    online: &Q,
    target: &Q,
    states: &Maps<T>,
    bootstraps: &Maps<T>,
    batch: &[PrioritizedTransition],
    weights: &[f64],
    gamma: f64,
    grads: &mut Q,
) -> Result<DqnUpdate> {
    let n = batch.len();
    if weights.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: weights.len(),
        });
    }
    let (q, trace) = online.forward_q(states);
    let needs_boot = batch.iter().any(|t| t.bootstrap_valid);
    let q_boot = needs_boot.then(|| target.forward_q(bootstraps).0);

    let mut dq = Array2::<T>::zeros(q.dim());
    let mut loss = 0.0;
    let mut td_errors = Vec::with_capacity(n);
    for (i, t) in batch.iter().enumerate() {
        let mut y = t.n_step_return;
        if t.bootstrap_valid {
            let row = q_boot.as_ref().expect("bootstrap values").row(i).to_vec();
            let best = row[argmax(&row)].to_f64().expect("finite");
            y += gamma.powi(t.steps as i32) * best;
        }
        let qa = q[[i, t.action]].to_f64().expect("finite");
        let td = y - qa;
        loss += weights[i] * td * td;
        dq[[i, t.action]] = cast(-2.0 * weights[i] * td / n as f64);
        td_errors.push(td);
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: "dqn",
            value: loss,
        });
    }
    online.backward_q(&trace, &dq, grads);
    Ok(DqnUpdate { loss, td_errors })
}

/// One learner step on a prioritized batch: loss, gradient, Adam step,
/// priority refresh.
pub fn dqn_update<Q: QFunction<f32>>(
    replay: &mut PrioritizedReplay,
    sampled: &SampledBatch,
    states: &Maps<f32>,
    bootstraps: &Maps<f32>,
    online: &mut Q,
    target: &Q,
    optimizer: &mut Adam<f32>,
    gamma: f64,
) -> Result<DqnUpdate> {
    let mut grads = online.zeroed();
    let update = dqn_loss_and_grad(
        online,
        target,
        states,
        bootstraps,
        &sampled.transitions,
        &sampled.weights,
        gamma,
        &mut grads,
    )?;
    optimizer.step(online, &grads)?;
    replay.update_priorities(&sampled.indices, &update.td_errors);
    Ok(update)
}
