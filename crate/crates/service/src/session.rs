//! Event-sourced review sessions.
//!
//! A session's value is a pure fold of its event log. Mutations are split
//! into `begin` (guard and `started` event, under the session lock), the
//! pipeline call (no lock held) and `complete` (outcome event).

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thematic_core::domain::{ground_clue, AnalysisRun, FeedbackRound, PromptPair, Span, TopicRecord, Transcript};
use thematic_core::gateway::{ChatModel, GatewayError, Secret};
use thematic_core::thematizer::{refine_with_feedback, thematize, ThematizeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Created,
    Processing,
    Review,
    Accepted,
    Failed,
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionState::Accepted | SessionState::Failed)
    }

    pub fn can_move_to(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Created, Processing) | (Processing, Review) | (Processing, Failed) | (Review, Processing) | (Review, Accepted)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Created => "created",
            SessionState::Processing => "processing",
            SessionState::Review => "review",
            SessionState::Accepted => "accepted",
            SessionState::Failed => "failed",
        }
    }
}

impl std::fmt::Display for SessionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Process,
    Retry,
    Feedback,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Process => "process",
            Action::Retry => "retry",
            Action::Feedback => "feedback",
        }
    }
}

/// Where a session's model credential comes from. The secret itself is never
/// part of the session value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CredentialRef {
    Service,
    Session,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventBody {
    Created {
        transcript: Transcript,
        credential_ref: CredentialRef,
    },
    Started {
        action: Action,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feedback_text: Option<String>,
        #[serde(default)]
        salt_base: u64,
    },
    Processed {
        run: AnalysisRun,
    },
    Retried {
        run: AnalysisRun,
        prior: Vec<TopicRecord>,
    },
    Feedback {
        text: String,
        prior: Vec<TopicRecord>,
        regenerated: Vec<TopicRecord>,
    },
    Accepted {
        export_path: String,
    },
    Error {
        message: String,
        state_after: SessionState,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Created { .. } => "created",
            EventBody::Started { .. } => "started",
            EventBody::Processed { .. } => "processed",
            EventBody::Retried { .. } => "retried",
            EventBody::Feedback { .. } => "feedback",
            EventBody::Accepted { .. } => "accepted",
            EventBody::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub timestamp: String,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("event {seq} ({kind}) is illegal in state {state}")]
pub struct IllegalTransition {
    pub seq: u64,
    pub kind: &'static str,
    pub state: SessionState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub transcript: Transcript,
    pub state: SessionState,
    pub current: Vec<TopicRecord>,
    pub run: Option<AnalysisRun>,
    pub in_flight: Option<Action>,
    pub credential_ref: CredentialRef,
    pub processing_starts: u64,
    pub last_error: Option<String>,
    pub history: Vec<Event>,
}

impl Session {
    /// Starts a session from its `created` event.
    pub fn from_created(id: &str, event: Event) -> Result<Session, IllegalTransition> {
        match &event.body {
            EventBody::Created { transcript, credential_ref } if event.seq == 0 => Ok(Session {
                id: id.to_owned(),
                transcript: transcript.clone(),
                state: SessionState::Created,
                current: Vec::new(),
                run: None,
                in_flight: None,
                credential_ref: *credential_ref,
                processing_starts: 0,
                last_error: None,
                history: vec![event],
            }),
            other => Err(IllegalTransition { seq: event.seq, kind: other.kind(), state: SessionState::Created }),
        }
    }

    /// Applies one event. On error the session is left unchanged.
    pub fn apply(&mut self, event: Event) -> Result<(), IllegalTransition> {
        let illegal = IllegalTransition { seq: event.seq, kind: event.body.kind(), state: self.state };
        if event.seq != self.history.len() as u64 {
            return Err(illegal);
        }
        let next = self.transition(&event.body).ok_or(illegal)?;
        match &event.body {
            EventBody::Created { .. } => unreachable!("rejected by transition"),
            EventBody::Started { action, .. } => {
                self.in_flight = Some(*action);
                if matches!(action, Action::Process | Action::Retry) {
                    self.processing_starts += 1;
                }
            }
            EventBody::Processed { run } | EventBody::Retried { run, .. } => {
                self.current = run.final_records().to_vec();
                self.run = Some(run.clone());
                self.in_flight = None;
                self.last_error = None;
            }
            EventBody::Feedback { text, regenerated, .. } => {
                if let Some(run) = self.run.as_mut() {
                    run.feedback_rounds.push(FeedbackRound {
                        feedback_text: text.clone(),
                        regenerated: regenerated.clone(),
                    });
                    run.grounding_rate = thematic_core::domain::grounding_rate(run.final_records());
                }
                self.current = regenerated.clone();
                self.in_flight = None;
                self.last_error = None;
            }
            EventBody::Accepted { .. } => {}
            EventBody::Error { message, .. } => {
                self.in_flight = None;
                self.last_error = Some(message.clone());
            }
        }
        self.state = next;
        self.history.push(event);
        Ok(())
    }

    /// The state `body` would lead to, or `None` if it is illegal here.
    fn transition(&self, body: &EventBody) -> Option<SessionState> {
        use SessionState::*;
        let next = match (self.state, body) {
            (_, EventBody::Created { .. }) => return None,
            (Created, EventBody::Started { action: Action::Process, .. }) => Processing,
            (Review, EventBody::Started { .. }) => Processing,
            (Processing, EventBody::Processed { run }) if self.in_flight == Some(Action::Process) && !run.final_records().is_empty() => Review,
            (Processing, EventBody::Retried { run, .. }) if self.in_flight == Some(Action::Retry) && !run.final_records().is_empty() => Review,
            (Processing, EventBody::Feedback { regenerated, .. }) if self.in_flight == Some(Action::Feedback) && !regenerated.is_empty() && self.run.is_some() => Review,
            (Review, EventBody::Accepted { .. }) => Accepted,
            (Processing, EventBody::Error { state_after: Review, .. }) if !self.current.is_empty() => Review,
            (Processing, EventBody::Error { state_after: Failed, .. }) => Failed,
            _ => return None,
        };
        debug_assert!(self.state.can_move_to(next));
        Some(next)
    }

    /// Folds a full event log.
    pub fn replay(id: &str, events: impl IntoIterator<Item = Event>) -> Result<Session, IllegalTransition> {
        let mut events = events.into_iter();
        let first = events.next().ok_or(IllegalTransition { seq: 0, kind: "none", state: SessionState::Created })?;
        let mut session = Session::from_created(id, first)?;
        for e in events {
            session.apply(e)?;
        }
        Ok(session)
    }

    /// Seed base for the next fresh thematization: `n_runs` times the number
    /// of earlier process/retry starts, so each attempt draws fresh seeds.
    pub fn next_salt(&self, n_runs: u32) -> u64 {
        u64::from(n_runs) * self.processing_starts
    }

    pub fn next_seq(&self) -> u64 {
        self.history.len() as u64
    }

    /// The exported form of an accepted session.
    pub fn export(&self) -> Option<&AnalysisRun> {
        self.run.as_ref()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown session `{0}`")]
    NotFound(String),
    #[error("cannot {action} a session in state {state}")]
    Conflict { action: &'static str, state: SessionState },
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Unauthorized(String),
    #[error("storage error at {path}: {message}")]
    Storage { path: String, message: String },
    #[error("corrupt session log for `{id}`: {source}")]
    Corrupt {
        id: String,
        #[source]
        source: IllegalTransition,
    },
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::NotFound(_) => 404,
            ServiceError::Conflict { .. } => 409,
            ServiceError::Unprocessable(_) => 422,
            ServiceError::BadRequest(_) => 400,
            ServiceError::Unauthorized(_) => 401,
            ServiceError::Storage { .. } | ServiceError::Corrupt { .. } => 500,
        }
    }

    fn storage(path: &Path, e: impl std::fmt::Display) -> ServiceError {
        ServiceError::Storage { path: path.display().to_string(), message: e.to_string() }
    }
}

/// Builds the chat model a session runs against. `Some` carries a
/// per-session credential.
pub type ModelFactory = Arc<dyn Fn(Option<&Secret>) -> Result<Arc<dyn ChatModel>, GatewayError> + Send + Sync>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub export_dir: PathBuf,
    pub n_runs: u32,
    pub prompt_version: u32,
    pub prompt_pair: PromptPair,
    pub ground_clues: bool,
    /// Rewrite `snapshot.json` after this many events.
    pub snapshot_every: usize,
    /// Whether a session may only be created with its own credential.
    pub require_session_credential: bool,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>, prompt_pair: PromptPair) -> Self {
        let data_dir = data_dir.into();
        ServiceConfig {
            export_dir: data_dir.join("exports"),
            data_dir,
            n_runs: 3,
            prompt_version: prompt_pair.version,
            prompt_pair,
            ground_clues: true,
            snapshot_every: 8,
            require_session_credential: false,
        }
    }
}

/// Work handed out by [`SessionManager::begin`].
#[derive(Clone)]
pub struct Job {
    pub session_id: String,
    pub action: Action,
    pub transcript: Transcript,
    pub current: Vec<TopicRecord>,
    pub feedback_text: Option<String>,
    pub salt_base: u64,
    model: Arc<dyn ChatModel>,
}

impl std::fmt::Debug for Job {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Job")
            .field("session_id", &self.session_id)
            .field("action", &self.action)
            .field("salt_base", &self.salt_base)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    session: Session,
}

struct Slot {
    session: Session,
    since_snapshot: usize,
}

/// Owns every session, its log on disk and its in-memory model handle.
pub struct SessionManager {
    cfg: ServiceConfig,
    factory: ModelFactory,
    sessions: Mutex<HashMap<String, Arc<Mutex<Slot>>>>,
    models: Mutex<HashMap<String, Arc<dyn ChatModel>>>,
}

impl SessionManager {
    /// Opens the store, replays every session log and settles sessions that
    /// were mid-job when the previous process stopped.
    pub fn open(cfg: ServiceConfig, factory: ModelFactory) -> Result<Self, ServiceError> {
        let root = cfg.data_dir.join("sessions");
        fs::create_dir_all(&root).map_err(|e| ServiceError::storage(&root, e))?;
        fs::create_dir_all(&cfg.export_dir).map_err(|e| ServiceError::storage(&cfg.export_dir, e))?;
        let manager = SessionManager {
            cfg,
            factory,
            sessions: Mutex::new(HashMap::new()),
            models: Mutex::new(HashMap::new()),
        };
        let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
            .map_err(|e| ServiceError::storage(&root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("events.jsonl").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let session = load_session(&root, &id)?;
            let interrupted = session.state == SessionState::Processing;
            let slot = Arc::new(Mutex::new(Slot { session, since_snapshot: 0 }));
            manager.sessions.lock().expect("session map poisoned").insert(id.clone(), slot.clone());
            if interrupted {
                let mut slot = slot.lock().expect("session lock poisoned");
                let state_after = settle_state(&slot.session);
                manager.append(
                    &mut slot,
                    EventBody::Error { message: "job interrupted by a service restart".into(), state_after },
                )?;
            }
        }
        Ok(manager)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.cfg.data_dir.join("sessions").join(id)
    }

    fn slot(&self, id: &str) -> Result<Arc<Mutex<Slot>>, ServiceError> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_owned()))
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.lock().expect("session map poisoned").keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn get(&self, id: &str) -> Result<Session, ServiceError> {
        let slot = self.slot(id)?;
        let slot = slot.lock().expect("session lock poisoned");
        Ok(slot.session.clone())
    }

    /// Creates a session. `credential` is kept in memory for this process only.
    pub fn create(&self, transcript: Transcript, credential: Option<Secret>) -> Result<Session, ServiceError> {
        let credential = credential.filter(|c| !c.expose().trim().is_empty());
        if self.cfg.require_session_credential && credential.is_none() {
            return Err(ServiceError::Unauthorized("an API credential is required".into()));
        }
        let model = (self.factory)(credential.as_ref()).map_err(|e| ServiceError::Unauthorized(e.to_string()))?;
        let credential_ref = if credential.is_some() { CredentialRef::Session } else { CredentialRef::Service };
        let id = uuid::Uuid::new_v4().simple().to_string();
        let event = Event {
            seq: 0,
            timestamp: now(),
            body: EventBody::Created { transcript, credential_ref },
        };
        let session = Session::from_created(&id, event.clone()).expect("created event is valid");
        let dir = self.session_dir(&id);
        fs::create_dir_all(&dir).map_err(|e| ServiceError::storage(&dir, e))?;
        append_line(&dir.join("events.jsonl"), &event)?;
        self.models.lock().expect("model map poisoned").insert(id.clone(), model);
        let slot = Slot { session: session.clone(), since_snapshot: 1 };
        self.sessions.lock().expect("session map poisoned").insert(id, Arc::new(Mutex::new(slot)));
        Ok(session)
    }

    fn model_for(&self, session: &Session) -> Result<Arc<dyn ChatModel>, ServiceError> {
        if let Some(m) = self.models.lock().expect("model map poisoned").get(&session.id) {
            return Ok(m.clone());
        }
        if session.credential_ref == CredentialRef::Session {
            return Err(ServiceError::Unauthorized(
                "the session credential is no longer available; create a new session".into(),
            ));
        }
        let model = (self.factory)(None).map_err(|e| ServiceError::Unauthorized(e.to_string()))?;
        self.models.lock().expect("model map poisoned").insert(session.id.clone(), model.clone());
        Ok(model)
    }

    /// Validates a request, records its `started` event and returns the job.
    pub fn begin(&self, id: &str, action: Action, feedback_text: Option<&str>) -> Result<(Session, Job), ServiceError> {
        let slot = self.slot(id)?;
        let mut slot = slot.lock().expect("session lock poisoned");
        let state = slot.session.state;
        let allowed = match action {
            Action::Process => matches!(state, SessionState::Created | SessionState::Review),
            Action::Retry | Action::Feedback => state == SessionState::Review,
        };
        if !allowed {
            return Err(ServiceError::Conflict { action: action.as_str(), state });
        }
        let feedback_text = match action {
            Action::Feedback => {
                let text = feedback_text.map(str::trim).unwrap_or_default();
                if text.is_empty() {
                    return Err(ServiceError::Unprocessable("feedback text is empty".into()));
                }
                Some(text.to_owned())
            }
            _ => None,
        };
        let model = self.model_for(&slot.session)?;
        let salt_base = match action {
            Action::Feedback => 0,
            _ => slot.session.next_salt(self.cfg.n_runs),
        };
        self.append(&mut slot, EventBody::Started { action, feedback_text: feedback_text.clone(), salt_base })?;
        let job = Job {
            session_id: id.to_owned(),
            action,
            transcript: slot.session.transcript.clone(),
            current: slot.session.current.clone(),
            feedback_text,
            salt_base,
            model,
        };
        Ok((slot.session.clone(), job))
    }

    /// Runs the pipeline for a job. Holds no lock.
    pub fn run(&self, job: &Job) -> EventBody {
        match job.action {
            Action::Process | Action::Retry => {
                let cfg = ThematizeConfig {
                    n_runs: self.cfg.n_runs,
                    prompt_pair: self.cfg.prompt_pair.clone(),
                    ground_clues: self.cfg.ground_clues,
                    salt_base: job.salt_base,
                };
                match thematize(job.model.as_ref(), &job.transcript, &cfg) {
                    Ok(run) if !run.final_records().is_empty() => {
                        if job.action == Action::Process {
                            EventBody::Processed { run }
                        } else {
                            EventBody::Retried { run, prior: job.current.clone() }
                        }
                    }
                    Ok(_) => self.failure(job, "thematization produced no topics".into()),
                    Err(e) => self.failure(job, e.to_string()),
                }
            }
            Action::Feedback => {
                let text = job.feedback_text.clone().unwrap_or_default();
                match refine_with_feedback(
                    job.model.as_ref(),
                    &job.transcript,
                    &job.current,
                    &text,
                    &self.cfg.prompt_pair,
                    self.cfg.ground_clues,
                ) {
                    Ok(r) if !r.fell_back => EventBody::Feedback {
                        text,
                        prior: job.current.clone(),
                        regenerated: r.records,
                    },
                    Ok(r) => self.failure(job, r.diagnostics.join("; ")),
                    Err(e) => self.failure(job, e.to_string()),
                }
            }
        }
    }

    fn failure(&self, job: &Job, message: String) -> EventBody {
        let state_after = if job.current.is_empty() { SessionState::Failed } else { SessionState::Review };
        EventBody::Error { message, state_after }
    }

    /// Records a job outcome.
    pub fn complete(&self, id: &str, outcome: EventBody) -> Result<Session, ServiceError> {
        let slot = self.slot(id)?;
        let mut slot = slot.lock().expect("session lock poisoned");
        self.append(&mut slot, outcome)?;
        Ok(slot.session.clone())
    }

    /// `begin`, `run` and `complete` on the calling thread.
    pub fn execute(&self, id: &str, action: Action, feedback_text: Option<&str>) -> Result<Session, ServiceError> {
        let (_, job) = self.begin(id, action, feedback_text)?;
        let outcome = self.run(&job);
        self.complete(id, outcome)
    }

    /// Writes the final analysis to the export directory and closes the session.
    pub fn accept(&self, id: &str) -> Result<Session, ServiceError> {
        let slot = self.slot(id)?;
        let mut slot = slot.lock().expect("session lock poisoned");
        let state = slot.session.state;
        if state != SessionState::Review {
            return Err(ServiceError::Conflict { action: "accept", state });
        }
        let run = slot.session.run.clone().ok_or_else(|| ServiceError::Conflict { action: "accept", state })?;
        let path = self.export_path(id);
        thematic_core::write_json(&path, &run).map_err(|e| ServiceError::storage(&path, e))?;
        self.append(&mut slot, EventBody::Accepted { export_path: path.display().to_string() })?;
        Ok(slot.session.clone())
    }

    pub fn export_path(&self, id: &str) -> PathBuf {
        self.cfg.export_dir.join(format!("{id}.json"))
    }

    /// The exported analysis of an accepted session.
    pub fn export(&self, id: &str) -> Result<AnalysisRun, ServiceError> {
        let session = self.get(id)?;
        if session.state != SessionState::Accepted {
            return Err(ServiceError::Conflict { action: "export", state: session.state });
        }
        let path = self.export_path(id);
        thematic_core::read_json(&path).map_err(|e| ServiceError::storage(&path, e))
    }

    pub fn locate(&self, id: &str, clue_text: &str) -> Result<Vec<Span>, ServiceError> {
        let session = self.get(id)?;
        Ok(ground_clue(&session.transcript, clue_text).spans)
    }

    fn append(&self, slot: &mut Slot, body: EventBody) -> Result<(), ServiceError> {
        let event = Event { seq: slot.session.next_seq(), timestamp: now(), body };
        let kind = event.body.kind();
        let mut next = slot.session.clone();
        next.apply(event.clone()).map_err(|e| ServiceError::Conflict { action: kind, state: e.state })?;
        let dir = self.session_dir(&next.id);
        append_line(&dir.join("events.jsonl"), &event)?;
        slot.session = next;
        slot.since_snapshot += 1;
        if slot.since_snapshot >= self.cfg.snapshot_every.max(1) {
            let path = dir.join("snapshot.json");
            let tmp = dir.join("snapshot.json.tmp");
            thematic_core::write_json(&tmp, &Snapshot { session: slot.session.clone() })
                .and_then(|_| fs::rename(&tmp, &path))
                .map_err(|e| ServiceError::storage(&path, e))?;
            slot.since_snapshot = 0;
        }
        tracing::info!(session = %slot.session.id, event = kind, state = %slot.session.state, "session event");
        Ok(())
    }
}

fn settle_state(session: &Session) -> SessionState {
    if session.current.is_empty() {
        SessionState::Failed
    } else {
        SessionState::Review
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn append_line(path: &Path, event: &Event) -> Result<(), ServiceError> {
    let mut line = serde_json::to_string(event).map_err(|e| ServiceError::storage(path, e))?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| ServiceError::storage(path, e))?;
    f.write_all(line.as_bytes()).and_then(|_| f.sync_data()).map_err(|e| ServiceError::storage(path, e))
}

/// Reads a session log. An unparseable final line (a torn write) is ignored;
/// anything unparseable earlier is an error.
pub fn read_events(path: &Path) -> Result<Vec<Event>, ServiceError> {
    let f = File::open(path).map_err(|e| ServiceError::storage(path, e))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| ServiceError::storage(path, e))?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut events = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Event>(line) {
            Ok(e) => events.push(e),
            Err(_) if Some(i) == last => tracing::warn!(path = %path.display(), "ignoring torn final log line"),
            Err(e) => return Err(ServiceError::storage(path, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(events)
}

/// Rebuilds one session from `root/{id}`: the snapshot (if any) plus every
/// later event.
pub fn load_session(root: &Path, id: &str) -> Result<Session, ServiceError> {
    let dir = root.join(id);
    let events = read_events(&dir.join("events.jsonl"))?;
    let corrupt = |source| ServiceError::Corrupt { id: id.to_owned(), source };
    let snapshot: Option<Snapshot> = thematic_core::read_json(&dir.join("snapshot.json")).ok();
    let mut session = match snapshot {
        Some(s) if s.session.history.len() <= events.len() && events[..s.session.history.len()] == s.session.history[..] => {
            s.session
        }
        _ => {
            let mut iter = events.clone().into_iter();
            let first = iter.next().ok_or_else(|| ServiceError::storage(&dir, "empty session log"))?;
            Session::from_created(id, first).map_err(corrupt)?
        }
    };
    for e in events.into_iter().skip(session.history.len()) {
        session.apply(e).map_err(corrupt)?;
    }
    Ok(session)
}
