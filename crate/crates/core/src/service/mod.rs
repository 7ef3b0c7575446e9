//! Annotation sessions for human feedback and their HTTP front end.

pub mod routes;
pub mod suggest;

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{Error, Result};
use crate::feedback::{apply_credit_window, BoundingBox, DisplayEvent, FeedbackBuffer, HumanSignal, Label};
use crate::orchestrator::{FeedbackProvider, TrajectoryStep};
use crate::state::{RawFrame, StackedState};

pub use routes::router;
pub use suggest::{suggest_boxes, BoxSuggestion, TaggedBox};

/// Environment variable holding the service port.
pub const PORT_ENV: &str = "EXPAND_SERVICE_PORT";
pub const DEFAULT_PORT: u16 = 8787;
pub const DEFAULT_BUDGET: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionStatus {
    Open,
    Finished,
    TimedOut,
}

/// Trainer keys: A good, S bad, D no feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeedbackKey {
    A,
    S,
    D,
}

impl FeedbackKey {
    pub fn label(self) -> Option<Label> {
        match self {
            FeedbackKey::A => Some(Label::Good),
            FeedbackKey::S => Some(Label::Bad),
            FeedbackKey::D => None,
        }
    }
}

/// Body of `POST /session/{id}/signal`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalBody {
    pub timestamp: f64,
    pub key: FeedbackKey,
    #[serde(default)]
    pub boxes: Vec<BoundingBox>,
    /// Frame presentations since the previous signal.
    #[serde(default)]
    pub displayed: Vec<DisplayEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalAck {
    pub accepted: bool,
    pub label: Option<Label>,
    pub signals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinishReport {
    pub status: SessionStatus,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: u64,
    pub status: SessionStatus,
    pub frames: usize,
    pub actions: Vec<usize>,
    pub action_names: Vec<String>,
    pub frame_urls: Vec<String>,
    pub budget_secs: f64,
    pub remaining_secs: f64,
    pub signals: usize,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServiceError {
    #[error("no session {0}")]
    NotFound(u64),
    #[error("frame {index} out of range for {frames} frame(s)")]
    NoFrame { index: usize, frames: usize },
    #[error("session {id} is {status:?}")]
    Closed { id: u64, status: SessionStatus },
    #[error("session {0} is still open")]
    Busy(u64),
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Debug, Clone)]
struct SessionStep {
    frame: RawFrame,
    state: StackedState,
    action: usize,
}

#[derive(Debug)]
struct Session {
    id: u64,
    steps: Vec<SessionStep>,
    frames: usize,
    actions: Vec<usize>,
    display_log: Vec<DisplayEvent>,
    signals: Vec<HumanSignal>,
    status: SessionStatus,
    opened: Instant,
    records: usize,
}

impl Session {
    fn remaining(&self, budget: Duration) -> Duration {
        budget.saturating_sub(self.opened.elapsed())
    }

    fn close(&mut self, status: SessionStatus) {
        self.status = status;
        self.steps = Vec::new();
    }
}

#[derive(Debug, Default)]
struct HubState {
    next_id: u64,
    sessions: BTreeMap<u64, Session>,
    current: Option<u64>,
}

/// One annotation session at a time. Finishing a session converts its
/// signals through the credit window and appends them to the feedback buffer.
#[derive(Debug)]
pub struct SessionHub {
    state: Mutex<HubState>,
    changed: Condvar,
    buffer: Arc<FeedbackBuffer>,
    budget: Duration,
    cell_px: usize,
}

impl SessionHub {
    pub fn new(buffer: Arc<FeedbackBuffer>, budget: Duration, cell_px: usize) -> Self {
        Self {
            state: Mutex::new(HubState {
                next_id: 1,
                ..Default::default()
            }),
            changed: Condvar::new(),
            buffer,
            budget,
            cell_px,
        }
    }

    pub fn buffer(&self) -> &Arc<FeedbackBuffer> {
        &self.buffer
    }

    fn lock(&self) -> MutexGuard<'_, HubState> {
        let mut st = self.state.lock().expect("session lock");
        if let Some(id) = st.current {
            let s = st.sessions.get_mut(&id).expect("current session");
            if s.status == SessionStatus::Open && s.remaining(self.budget).is_zero() {
                warn!("annotation session {id} timed out with {} signal(s) discarded", s.signals.len());
                s.close(SessionStatus::TimedOut);
                st.current = None;
                self.changed.notify_all();
            }
        }
        st
    }

    /// Expose a trajectory of `(frame, state, action)` for annotation.
    pub fn open(&self, steps: Vec<(RawFrame, StackedState, usize)>) -> std::result::Result<u64, ServiceError> {
        if steps.is_empty() {
            return Err(ServiceError::Invalid {
                field: "trajectory".into(),
                reason: "empty trajectory".into(),
            });
        }
        let mut st = self.lock();
        if let Some(id) = st.current {
            return Err(ServiceError::Busy(id));
        }
        let id = st.next_id;
        st.next_id += 1;
        let actions = steps.iter().map(|s| s.2).collect();
        st.sessions.insert(
            id,
            Session {
                id,
                frames: steps.len(),
                actions,
                steps: steps
                    .into_iter()
                    .map(|(frame, state, action)| SessionStep { frame, state, action })
                    .collect(),
                display_log: Vec::new(),
                signals: Vec::new(),
                status: SessionStatus::Open,
                opened: Instant::now(),
                records: 0,
            },
        );
        st.current = Some(id);
        Ok(id)
    }

    fn view_of(&self, s: &Session) -> SessionView {
        SessionView {
            id: s.id,
            status: s.status,
            frames: s.frames,
            actions: s.actions.clone(),
            action_names: s
                .actions
                .iter()
                .map(|&a| Action::from_index(a).map_or_else(|| a.to_string(), |a| format!("{a:?}").to_lowercase()))
                .collect(),
            frame_urls: (0..s.frames).map(|i| format!("/session/{}/frames/{i}", s.id)).collect(),
            budget_secs: self.budget.as_secs_f64(),
            remaining_secs: if s.status == SessionStatus::Open {
                s.remaining(self.budget).as_secs_f64()
            } else {
                0.0
            },
            signals: s.signals.len(),
            records: s.records,
        }
    }

    pub fn current(&self) -> Option<SessionView> {
        let st = self.lock();
        st.current.map(|id| self.view_of(&st.sessions[&id]))
    }

    pub fn view(&self, id: u64) -> std::result::Result<SessionView, ServiceError> {
        let st = self.lock();
        st.sessions.get(&id).map(|s| self.view_of(s)).ok_or(ServiceError::NotFound(id))
    }

    fn with_open<R>(&self, id: u64, f: impl FnOnce(&mut Session) -> std::result::Result<R, ServiceError>) -> std::result::Result<R, ServiceError> {
        let mut st = self.lock();
        let s = st.sessions.get_mut(&id).ok_or(ServiceError::NotFound(id))?;
        if s.status != SessionStatus::Open {
            return Err(ServiceError::Closed { id, status: s.status });
        }
        f(s)
    }

    pub fn frame_png(&self, id: u64, index: usize) -> std::result::Result<Vec<u8>, ServiceError> {
        let frame = self.with_open(id, |s| {
            s.steps.get(index).map(|st| st.frame.clone()).ok_or(ServiceError::NoFrame {
                index,
                frames: s.frames,
            })
        })?;
        frame.to_png().map_err(|e| ServiceError::Invalid {
            field: "frame".into(),
            reason: e.to_string(),
        })
    }

    pub fn suggestions(&self, id: u64) -> std::result::Result<Vec<BoxSuggestion>, ServiceError> {
        let px = self.cell_px;
        self.with_open(id, |s| {
            Ok(s.steps
                .iter()
                .enumerate()
                .map(|(i, st)| BoxSuggestion {
                    frame_index: i,
                    boxes: suggest_boxes(&st.frame, px),
                })
                .collect())
        })
    }

    pub fn ingest(&self, id: u64, body: SignalBody) -> std::result::Result<SignalAck, ServiceError> {
        for (i, b) in body.boxes.iter().enumerate() {
            if let Err(Error::InvalidBox { field, reason }) = b.validate() {
                return Err(ServiceError::Invalid {
                    field: format!("boxes[{i}].{field}"),
                    reason,
                });
            }
        }
        if !body.timestamp.is_finite() {
            return Err(ServiceError::Invalid {
                field: "timestamp".into(),
                reason: "must be finite epoch seconds".into(),
            });
        }
        self.with_open(id, |s| {
            if let Some((i, e)) = body.displayed.iter().enumerate().find(|(_, e)| e.frame_index >= s.frames || !e.shown_at.is_finite()) {
                return Err(ServiceError::Invalid {
                    field: format!("displayed[{i}]"),
                    reason: format!("frame {} / time {} outside the session", e.frame_index, e.shown_at),
                });
            }
            s.display_log.extend(body.displayed.iter().copied());
            let label = body.key.label();
            if let Some(label) = label {
                s.signals.push(HumanSignal {
                    timestamp: body.timestamp,
                    label,
                    boxes: body.boxes.clone(),
                });
            }
            Ok(SignalAck {
                accepted: label.is_some(),
                label,
                signals: s.signals.len(),
            })
        })
    }

    /// Close the session and append its records. Repeated calls report the
    /// first outcome without appending again.
    pub fn finish(&self, id: u64) -> std::result::Result<FinishReport, ServiceError> {
        let mut st = self.lock();
        let s = st.sessions.get_mut(&id).ok_or(ServiceError::NotFound(id))?;
        if s.status != SessionStatus::Open {
            return Ok(FinishReport {
                status: s.status,
                records: s.records,
            });
        }
        let steps: Vec<(StackedState, usize)> = s.steps.iter().map(|st| (st.state.clone(), st.action)).collect();
        let records = apply_credit_window(&s.signals, &s.display_log, &steps).map_err(|e| ServiceError::Invalid {
            field: "signals".into(),
            reason: e.to_string(),
        })?;
        s.records = records.len();
        s.close(SessionStatus::Finished);
        let report = FinishReport {
            status: s.status,
            records: s.records,
        };
        self.buffer.extend(records);
        st.current = None;
        self.changed.notify_all();
        info!("annotation session {id} finished with {} record(s)", report.records);
        Ok(report)
    }

    /// Block until the session leaves the open state.
    pub fn wait(&self, id: u64) -> std::result::Result<FinishReport, ServiceError> {
        let mut st = self.lock();
        loop {
            let s = st.sessions.get(&id).ok_or(ServiceError::NotFound(id))?;
            if s.status != SessionStatus::Open {
                return Ok(FinishReport {
                    status: s.status,
                    records: s.records,
                });
            }
            let remaining = s.remaining(self.budget) + Duration::from_millis(5);
            st = self.changed.wait_timeout(st, remaining).expect("session lock").0;
            drop(st);
            st = self.lock();
        }
    }
}

/// Human trainer reached through the HTTP service; training pauses while a
/// session is open.
pub struct HumanProvider {
    pub hub: Arc<SessionHub>,
}

impl FeedbackProvider for HumanProvider {
    fn collect(&mut self, episode: usize, trajectory: &[TrajectoryStep], buffer: &FeedbackBuffer) -> Result<usize> {
        if !std::ptr::eq(buffer, self.hub.buffer().as_ref()) {
            return Err(Error::Session("service and trainer use different feedback buffers".into()));
        }
        let steps = trajectory
            .iter()
            .map(|s| (s.frame.clone(), s.state.clone(), s.action))
            .collect();
        let id = self.hub.open(steps).map_err(|e| Error::Session(e.to_string()))?;
        info!("episode {episode}: annotation session {id} open with {} frame(s)", trajectory.len());
        let report = self.hub.wait(id).map_err(|e| Error::Session(e.to_string()))?;
        if report.status == SessionStatus::TimedOut {
            warn!("episode {episode}: session {id} timed out; continuing without new feedback");
        }
        Ok(report.records)
    }
}

/// Serve `hub` on `127.0.0.1:port` from a background thread.
pub fn spawn_server(hub: Arc<SessionHub>, port: u16) -> Result<std::thread::JoinHandle<()>> {
    let listener = std::net::TcpListener::bind(("127.0.0.1", port))?;
    listener.set_nonblocking(true)?;
    info!("feedback service listening on http://127.0.0.1:{port}");
    Ok(std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            if let Err(e) = axum::serve(listener, router(hub)).await {
                warn!("feedback service stopped: {e}");
            }
        });
    }))
}

/// Port from the environment, else the default.
pub fn port_from_env() -> Result<u16> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{PORT_ENV}={v} is not a port"))),
        Err(_) => Ok(DEFAULT_PORT),
    }
}
