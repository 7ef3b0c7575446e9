//! Human (or oracle) feedback: records, the feedback buffer, the advantage
//! loss and the credit window that maps timed signals onto displayed frames.

use std::collections::{BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_mask, SaliencyMask};
use crate::dqn::argmax;
use crate::error::{Error, Result};
use crate::state::{StackedState, FRAME_SIDE};

pub const ADVANTAGE_MARGIN: f64 = 0.05;
pub const CREDIT_WINDOW: (f64, f64) = (2.0, 0.2);

/// Axis-aligned box in 84x84 frame pixels; top-left corner plus extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl BoundingBox {
    pub fn new(x: i32, y: i32, w: i32, h: i32) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::InvalidBox {
                field: field.to_string(),
                reason,
            })
        };
        let side = FRAME_SIDE as i32;
        if self.x < 0 {
            return bad("x", format!("{} is negative", self.x));
        }
        if self.y < 0 {
            return bad("y", format!("{} is negative", self.y));
        }
        if self.w < 1 {
            return bad("w", format!("{} is below 1", self.w));
        }
        if self.h < 1 {
            return bad("h", format!("{} is below 1", self.h));
        }
        if self.x >= side {
            return bad("x", format!("{} lies right of the {side}-pixel frame", self.x));
        }
        if self.y >= side {
            return bad("y", format!("{} lies below the {side}-pixel frame", self.y));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Label {
    Good,
    Bad,
}

impl TryFrom<i64> for Label {
    type Error = Error;

    fn try_from(v: i64) -> Result<Self> {
        match v {
            1 => Ok(Label::Good),
            -1 => Ok(Label::Bad),
            other => Err(Error::InvalidLabel(other)),
        }
    }
}

impl From<Label> for i64 {
    fn from(l: Label) -> i64 {
        match l {
            Label::Good => 1,
            Label::Bad => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackSource {
    Oracle,
    Human,
}

/// A labeled state-action pair with the trainer's saliency boxes. The mask
/// is built once from the boxes and shared by all stacked frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackRecord {
    pub frame_index: usize,
    pub boxes: Vec<BoundingBox>,
    pub label: Label,
    pub action: usize,
    pub state: StackedState,
    pub timestamp: Option<f64>,
    pub source: FeedbackSource,
    mask: SaliencyMask,
}

impl FeedbackRecord {
    pub fn new(
        frame_index: usize,
        boxes: Vec<BoundingBox>,
        label: Label,
        action: usize,
        state: StackedState,
        timestamp: Option<f64>,
        source: FeedbackSource,
    ) -> Result<Self> {
        for b in &boxes {
            b.validate()?;
        }
        let mask = build_mask(&boxes);
        Ok(Self {
            frame_index,
            boxes,
            label,
            action,
            state,
            timestamp,
            source,
            mask,
        })
    }

    pub fn mask(&self) -> &SaliencyMask {
        &self.mask
    }

    pub fn to_wire(&self) -> WireRecord {
        WireRecord {
            frame_index: self.frame_index,
            label: self.label,
            boxes: self.boxes.clone(),
            action: self.action,
            timestamp: self.timestamp,
            source: self.source,
        }
    }
}

/// JSON form of a record as exchanged with the annotation UI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRecord {
    pub frame_index: usize,
    pub label: Label,
    pub boxes: Vec<BoundingBox>,
    pub action: usize,
    pub timestamp: Option<f64>,
    pub source: FeedbackSource,
}

/// Bounded FIFO of feedback records. Appends and batch sampling hold the
/// same lock, so a sample never observes a half-applied append.
#[derive(Debug)]
pub struct FeedbackBuffer {
    capacity: usize,
    records: Mutex<VecDeque<Arc<FeedbackRecord>>>,
}

impl FeedbackBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            records: Mutex::new(VecDeque::new()),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("feedback lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&self, record: FeedbackRecord) {
        self.extend(std::iter::once(record));
    }

    /// Append all records under one lock, evicting the oldest on overflow.
    pub fn extend<I: IntoIterator<Item = FeedbackRecord>>(&self, records: I) {
        let mut q = self.records.lock().expect("feedback lock");
        for r in records {
            if q.len() == self.capacity {
                q.pop_front();
            }
            q.push_back(Arc::new(r));
        }
    }

    /// Uniform draws with replacement; empty when the buffer is empty.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Arc<FeedbackRecord>> {
        let q = self.records.lock().expect("feedback lock");
        if q.is_empty() {
            return Vec::new();
        }
        (0..batch_size)
            .map(|_| Arc::clone(&q[rng.random_range(0..q.len())]))
            .collect()
    }

    pub fn snapshot(&self) -> Vec<Arc<FeedbackRecord>> {
        self.records.lock().expect("feedback lock").iter().cloned().collect()
    }
}

/// `Q(s, a) - max_a' Q(s, a')`.
pub fn advantage(q_values: &[f64], action: usize) -> f64 {
    q_values[action] - q_values[argmax(q_values)]
}

/// Loss for one record. "A = 0" means `action` is the argmax under
/// lowest-index tie-breaking.
pub fn advantage_loss(q_values: &[f64], action: usize, label: Label, margin: f64) -> Result<f64> {
    Ok(advantage_loss_grad(q_values, action, label, margin)?.0)
}

/// Loss and its gradient with respect to `q_values`.
pub fn advantage_loss_grad(q_values: &[f64], action: usize, label: Label, margin: f64) -> Result<(f64, Vec<f64>)> {
    let n = q_values.len();
    if action >= n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: action + 1,
        });
    }
    let best = argmax(q_values);
    let mut grad = vec![0.0; n];
    let loss = match label {
        Label::Good if best == action => 0.0,
        Label::Good => {
            grad[best] += 1.0;
            grad[action] -= 1.0;
            q_values[best] - q_values[action]
        }
        Label::Bad if best != action => 0.0,
        Label::Bad => {
            if n < 2 {
                return Err(Error::SecondBestUndefined(n));
            }
            let mut second = if action == 0 { 1 } else { 0 };
            for a in 0..n {
                if a != action && q_values[a] > q_values[second] {
                    second = a;
                }
            }
            grad[action] += 1.0;
            grad[second] -= 1.0;
            q_values[action] - (q_values[second] - margin)
        }
    };
    Ok((loss, grad))
}

/// A timed evaluative signal from the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanSignal {
    pub timestamp: f64,
    pub label: Label,
    pub boxes: Vec<BoundingBox>,
}

/// One frame presentation in the UI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplayEvent {
    pub frame_index: usize,
    pub shown_at: f64,
}

/// Attach each signal at time `T` to every frame displayed within the
/// closed interval `[T - 2.0, T - 0.2]`. `steps[i]` is the state and action
/// of frame `i`. Signals with an empty window are dropped with a warning.
pub fn apply_credit_window(
    signals: &[HumanSignal],
    display_log: &[DisplayEvent],
    steps: &[(StackedState, usize)],
) -> Result<Vec<FeedbackRecord>> {
    let mut out = Vec::new();
    for s in signals {
        let (lo, hi) = (s.timestamp - CREDIT_WINDOW.0, s.timestamp - CREDIT_WINDOW.1);
        let frames: BTreeSet<usize> = display_log
            .iter()
            .filter(|e| e.shown_at >= lo && e.shown_at <= hi && e.frame_index < steps.len())
            .map(|e| e.frame_index)
            .collect();
        if frames.is_empty() {
            warn!("signal at {:.3}s matched no displayed frame; dropped", s.timestamp);
            continue;
        }
        for i in frames {
            let (state, action) = &steps[i];
            out.push(FeedbackRecord::new(
                i,
                s.boxes.clone(),
                s.label,
                *action,
                state.clone(),
                Some(s.timestamp),
                FeedbackSource::Human,
            )?);
        }
    }
    Ok(out)
}
