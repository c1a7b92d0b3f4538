//! Helpers shared by the service integration tests and the acceptance target.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thematic_core::domain::{load_corpus, Transcript};
use thematic_core::gateway::{ChatModel, ChatRequest, Gateway, GatewayError, Mode};
use thematic_core::instructor::load_prompt;
use thematic_core::synthetic::scripted_gateway;
use thematic_service::session::{
    load_session, Action, EventBody, ServiceConfig, ServiceError, Session, SessionManager, SessionState,
};

pub fn data_dir() -> PathBuf {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data")).to_path_buf()
}

pub fn corpus() -> Vec<Transcript> {
    load_corpus(&data_dir().join("corpus")).expect("bundled corpus loads")
}

pub fn transcript(id: &str) -> Transcript {
    corpus().into_iter().find(|t| t.id == id).expect("bundled transcript")
}

/// Replay gateway over the bundled fixture pack; the scripted backend behind
/// it counts calls so tests can assert it was never reached.
pub fn replay_gateway() -> (Gateway, Arc<thematic_core::synthetic::ScriptedTransport>) {
    scripted_gateway(Mode::Replay, Some(data_dir().join("fixtures"))).expect("replay gateway")
}

pub fn optimized_prompts() -> thematic_core::domain::PromptPair {
    load_prompt(&data_dir().join("instruct"), 1).expect("bundled v1 prompts")
}

/// Session manager over `model` with the bundled v1 prompts.
pub fn manager(dir: &Path, model: Arc<dyn ChatModel>) -> SessionManager {
    let cfg = ServiceConfig::new(dir, optimized_prompts());
    SessionManager::open(cfg, Arc::new(move |_| Ok(model.clone()))).expect("manager opens")
}

/// Wraps a model and fails a seeded fraction of calls.
pub struct Flaky<M> {
    pub inner: M,
    pub fail_rate: f64,
    pub rng: Mutex<ChaCha8Rng>,
}

impl<M> Flaky<M> {
    pub fn new(inner: M, fail_rate: f64, seed: u64) -> Self {
        Flaky { inner, fail_rate, rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)) }
    }
}

impl<M: ChatModel> ChatModel for Flaky<M> {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let fail = self.rng.lock().unwrap().gen_bool(self.fail_rate);
        if fail {
            Err(GatewayError::Transport { attempts: 1, message: "injected failure".into() })
        } else {
            self.inner.chat(req)
        }
    }
}

const LEGAL: &[(SessionState, SessionState)] = &[
    (SessionState::Created, SessionState::Processing),
    (SessionState::Processing, SessionState::Review),
    (SessionState::Processing, SessionState::Failed),
    (SessionState::Review, SessionState::Processing),
    (SessionState::Review, SessionState::Accepted),
];

/// State an event leads to, read off the event alone.
fn state_after(body: &EventBody) -> SessionState {
    match body {
        EventBody::Created { .. } => SessionState::Created,
        EventBody::Started { .. } => SessionState::Processing,
        EventBody::Processed { .. } | EventBody::Retried { .. } | EventBody::Feedback { .. } => SessionState::Review,
        EventBody::Accepted { .. } => SessionState::Accepted,
        EventBody::Error { state_after, .. } => *state_after,
    }
}

#[derive(Debug, Default)]
pub struct FuzzSummary {
    pub steps: usize,
    pub accepted_mutations: usize,
    pub rejected: usize,
    pub illegal_transitions: usize,
    pub history_not_increasing: usize,
    pub rejected_but_changed: usize,
    pub empty_review: usize,
    pub replay_mismatches: usize,
    pub sessions: usize,
    pub failures: Vec<String>,
}

impl FuzzSummary {
    pub fn clean(&self) -> bool {
        self.illegal_transitions == 0
            && self.history_not_increasing == 0
            && self.rejected_but_changed == 0
            && self.empty_review == 0
            && self.replay_mismatches == 0
    }
}

/// Drives random requests against a manager backed by a flaky scripted
/// model. Jobs may be left in flight across steps so that guards against
/// concurrent requests are exercised. Every step checks the touched session
/// against the legal graph and against a fresh replay of its log.
pub fn fuzz_sessions(dir: &Path, steps: usize, seed: u64) -> FuzzSummary {
    let (gw, _) = scripted_gateway(Mode::Live, None).expect("scripted gateway");
    let model: Arc<dyn ChatModel> = Arc::new(Flaky::new(gw, 0.25, seed ^ 0x5eed));
    let mut cfg = ServiceConfig::new(dir, optimized_prompts());
    cfg.n_runs = 2;
    cfg.snapshot_every = 5;
    let mgr = SessionManager::open(cfg, Arc::new(move |_| Ok(model.clone()))).expect("manager");
    let transcripts = corpus();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<String> = Vec::new();
    let mut pending: Vec<thematic_service::session::Job> = Vec::new();
    let mut summary = FuzzSummary::default();
    let root = dir.join("sessions");

    for step in 0..steps {
        summary.steps += 1;
        if ids.is_empty() || rng.gen_bool(0.04) {
            let t = transcripts[rng.gen_range(0..transcripts.len())].clone();
            let s = mgr.create(t, None).expect("create");
            ids.push(s.id);
            summary.sessions += 1;
            continue;
        }
        let id = ids[rng.gen_range(0..ids.len())].clone();
        let before = mgr.get(&id).expect("known session");
        let op = rng.gen_range(0..10);
        let result: Result<Option<Session>, ServiceError> = match op {
            0 | 1 => mgr.execute(&id, Action::Process, None).map(Some),
            2 => mgr.execute(&id, Action::Retry, None).map(Some),
            3 => mgr.execute(&id, Action::Feedback, Some("Please tighten the theme names.")).map(Some),
            4 => mgr.execute(&id, Action::Feedback, Some(if rng.gen_bool(0.5) { "" } else { "   " })).map(Some),
            5 => mgr.accept(&id).map(Some),
            6 => {
                let action = [Action::Process, Action::Retry, Action::Feedback][rng.gen_range(0..3)];
                mgr.begin(&id, action, Some("More specific names, please.")).map(|(s, job)| {
                    pending.push(job);
                    Some(s)
                })
            }
            7 if !pending.is_empty() => {
                let job = pending.swap_remove(rng.gen_range(0..pending.len()));
                let outcome = mgr.run(&job);
                let touched = job.session_id.clone();
                let before_job = mgr.get(&touched).expect("known session");
                let r = mgr.complete(&touched, outcome);
                check_step(&mut summary, step, &before_job, r.as_ref().ok(), &root, &mgr);
                continue;
            }
            8 => mgr.locate(&id, "too many pills").map(|_| None),
            _ => mgr.get(&id).map(|_| None),
        };
        match result {
            Ok(Some(_)) => {
                let after = mgr.get(&id).expect("session");
                check_step(&mut summary, step, &before, Some(&after), &root, &mgr);
            }
            Ok(None) => {
                let after = mgr.get(&id).expect("session");
                if after != before {
                    summary.rejected_but_changed += 1;
                    summary.failures.push(format!("step {step}: read-only request changed {id}"));
                }
            }
            Err(e) => {
                summary.rejected += 1;
                let after = mgr.get(&id).expect("session");
                if after != before {
                    summary.rejected_but_changed += 1;
                    summary.failures.push(format!("step {step}: rejected request ({e}) changed {id}"));
                }
            }
        }
    }
    for job in pending.drain(..) {
        let before = mgr.get(&job.session_id).expect("session");
        let outcome = mgr.run(&job);
        let r = mgr.complete(&job.session_id, outcome);
        check_step(&mut summary, steps, &before, r.as_ref().ok(), &root, &mgr);
    }
    summary
}

fn check_step(
    summary: &mut FuzzSummary,
    step: usize,
    before: &Session,
    after: Option<&Session>,
    root: &Path,
    mgr: &SessionManager,
) {
    let Some(after) = after else {
        summary.rejected += 1;
        if mgr.get(&before.id).ok().as_ref() != Some(before) {
            summary.rejected_but_changed += 1;
        }
        return;
    };
    summary.accepted_mutations += 1;
    if after.history.len() <= before.history.len() || after.history[..before.history.len()] != before.history[..] {
        summary.history_not_increasing += 1;
        summary.failures.push(format!("step {step}: history not extended for {}", after.id));
    }
    let mut state = before.state;
    for e in &after.history[before.history.len()..] {
        let next = state_after(&e.body);
        if !LEGAL.contains(&(state, next)) {
            summary.illegal_transitions += 1;
            summary.failures.push(format!("step {step}: {state} -> {next} via {}", e.body.kind()));
        }
        state = next;
    }
    if state != after.state {
        summary.illegal_transitions += 1;
        summary.failures.push(format!("step {step}: derived state {state} but session says {}", after.state));
    }
    if after.state == SessionState::Review && after.current.is_empty() {
        summary.empty_review += 1;
    }
    match load_session(root, &after.id) {
        Ok(replayed) if &replayed == after => {}
        Ok(_) => {
            summary.replay_mismatches += 1;
            summary.failures.push(format!("step {step}: replay differs for {}", after.id));
        }
        Err(e) => {
            summary.replay_mismatches += 1;
            summary.failures.push(format!("step {step}: replay failed for {}: {e}", after.id));
        }
    }
}

/// Outcome of the create, process, feedback, retry, accept flow.
#[derive(Debug)]
pub struct FlowOutcome {
    pub processed: Session,
    pub after_feedback: Session,
    pub retried: Session,
    pub accepted: Session,
}

/// The review flow on the operation-costs interview, on the calling thread.
pub fn review_flow(mgr: &SessionManager) -> Result<FlowOutcome, String> {
    let t = transcript(thematic_service::scenario::SESSION_TRANSCRIPT);
    let id = mgr.create(t, None).map_err(|e| e.to_string())?.id;
    let step = |a, text| mgr.execute(&id, a, text).map_err(|e| e.to_string());
    let processed = step(Action::Process, None)?;
    let after_feedback = step(Action::Feedback, Some(thematic_service::scenario::OPERATION_COSTS_FEEDBACK))?;
    let retried = step(Action::Retry, None)?;
    let accepted = mgr.accept(&id).map_err(|e| e.to_string())?;
    Ok(FlowOutcome { processed, after_feedback, retried, accepted })
}
