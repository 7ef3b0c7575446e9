//! Scripted trainer for Pixel-Taxi: a shortest-path policy judges queried
//! actions and hand-coded rules box the taxi, the red passenger and the
//! destination.

use log::warn;

use crate::env::{Action, Cell, TaxiState};
use crate::error::Result;
use crate::feedback::{BoundingBox, FeedbackRecord, FeedbackSource, Label};
use crate::state::StackedState;

/// One move toward `to`, vertical first; `None` when already there.
fn toward(from: Cell, to: Cell) -> Option<Action> {
    if from.y > to.y {
        Some(Action::Up)
    } else if from.y < to.y {
        Some(Action::Down)
    } else if from.x > to.x {
        Some(Action::Left)
    } else if from.x < to.x {
        Some(Action::Right)
    } else {
        None
    }
}

/// Nearest cell without a passenger, ties to the smallest (row, column).
fn nearest_free(state: &TaxiState) -> Cell {
    let g = state.config.grid_size;
    (0..g)
        .flat_map(|y| (0..g).map(move |x| Cell::new(x, y)))
        .filter(|&c| state.passenger_at(c).is_none())
        .min_by_key(|&c| (state.taxi.manhattan(c), c.y, c.x))
        .expect("more cells than passengers")
}

/// The scripted action: go to the red passenger, pick it up, go to the
/// destination, drop it off. A wrong passenger in the cab is set down on the
/// nearest free cell first. `None` once the episode is over.
pub fn oracle_action(state: &TaxiState) -> Option<Action> {
    if state.done || state.delivered {
        return None;
    }
    match state.carried {
        Some(p) if p == state.target => Some(toward(state.taxi, state.destination).unwrap_or(Action::Dropoff)),
        Some(_) => {
            let free = nearest_free(state);
            Some(toward(state.taxi, free).unwrap_or(Action::Dropoff))
        }
        None => {
            let target = state.target_cell()?;
            Some(toward(state.taxi, target).unwrap_or(Action::Pickup))
        }
    }
}

/// Cell-aligned pixel boxes over the taxi, the red passenger (while on the
/// board) and the destination; cells shared by two entities appear once.
pub fn saliency_boxes(state: &TaxiState) -> Vec<BoundingBox> {
    let px = state.config.cell_px as i32;
    let mut cells = vec![state.taxi];
    if let Some(c) = state.target_cell() {
        cells.push(c);
    }
    cells.push(state.destination);
    let mut seen = Vec::new();
    for c in cells {
        if !seen.contains(&c) {
            seen.push(c);
        }
    }
    seen.into_iter()
        .map(|c| BoundingBox {
            x: c.x as i32 * px,
            y: c.y as i32 * px,
            w: px,
            h: px,
        })
        .collect()
}

/// Indices queried at a given density: every `round(1 / density)`-th step,
/// starting with the first.
pub fn queried_steps(len: usize, density: f64) -> Vec<usize> {
    if density <= 0.0 || len == 0 {
        return Vec::new();
    }
    let stride = (1.0 / density.min(1.0)).round().max(1.0) as usize;
    (0..len).step_by(stride).collect()
}

/// One record per queried step: +1 when the agent's action matches the
/// scripted action, -1 otherwise, with the rule-based boxes.
pub fn oracle_feedback(trajectory: &[(TaxiState, StackedState, usize)], density: f64) -> Result<Vec<FeedbackRecord>> {
    let mut out = Vec::new();
    for i in queried_steps(trajectory.len(), density) {
        let (taxi, state, action) = &trajectory[i];
        let Some(best) = oracle_action(taxi) else {
            warn!("oracle has no action for step {i}; skipped");
            continue;
        };
        let label = if best.index() == *action { Label::Good } else { Label::Bad };
        out.push(FeedbackRecord::new(
            i,
            saliency_boxes(taxi),
            label,
            *action,
            state.clone(),
            None,
            FeedbackSource::Oracle,
        )?);
    }
    Ok(out)
}
