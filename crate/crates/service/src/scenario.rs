//! The bundled scenario: every artifact under `data/` and the fixture pack
//! that replays it.
//!
//! Layout of a bundle directory:
//!
//! ```text
//! fixtures/              replay fixtures for everything below
//! instruct/              prompts/v0.json, prompts/v1.json, trace.json
//! runs/v{p}_n{n}/        one AnalysisRun per transcript, for p in {0,1}, n in {1,3}
//! codebook.json          built from runs/v1_n3
//! golden/                report.json and report.csv for runs/v1_n3
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thematic_core::codebook::{build_codebook, write_codebook};
use thematic_core::domain::{load_corpus, PromptPair, Transcript};
use thematic_core::eval::{evaluate_corpus, write_report, EvalOptions, ReferenceStandard};
use thematic_core::gateway::{ChatModel, Gateway, Mode};
use thematic_core::instructor::{run_refinement, RefinementConfig};
use thematic_core::pipeline::{thematize_corpus, variant_name, write_runs};
use thematic_core::synthetic::scripted_gateway;
use thematic_core::thematizer::ThematizeConfig;

use crate::cli::CliError;
use crate::session::{Action, ServiceConfig, SessionManager, SessionState};

/// Reviewer feedback on the operation-costs interview used by the session flow.
pub const OPERATION_COSTS_FEEDBACK: &str = "\"Medication Burden and Side Effects\" is not accurate since clues didn't mention any side effects. Try to get a better theme name.";
/// Topic the feedback above is expected to produce.
pub const REVISED_TOPIC: &str = "Medication Costs and Treatment Access";
/// Transcript the session flow runs on.
pub const SESSION_TRANSCRIPT: &str = "operation_costs";

/// Refinement settings of the bundle.
pub fn refinement_config() -> RefinementConfig {
    RefinementConfig { iterations: 1, ..RefinementConfig::default() }
}

/// The (prompt version, n_runs) grid, main configuration first.
pub const VARIANTS: [(u32, u32); 4] = [(1, 3), (0, 3), (1, 1), (0, 1)];

#[derive(Debug, Default)]
pub struct BundleSummary {
    pub fixtures: usize,
    pub pruned: usize,
    pub prompt_version: u32,
    pub session_topics: usize,
}

impl fmt::Display for BundleSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} fixtures recorded ({} stale removed); prompt version {}; session flow ended with {} topics",
            self.fixtures, self.pruned, self.prompt_version, self.session_topics
        )
    }
}

fn fail(e: impl fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

/// Runs every stage against `model`, writing artifacts under `out`.
pub fn produce_artifacts(
    model: &Gateway,
    corpus: &[Transcript],
    reference: &ReferenceStandard,
    out: &Path,
) -> Result<PromptPair, CliError> {
    let instruct_dir = out.join("instruct");
    let trace = run_refinement(model, corpus, &refinement_config(), Some(&instruct_dir)).map_err(fail)?;
    let optimized = trace.active().clone();
    let mut main_runs = Vec::new();
    for (version, n_runs) in VARIANTS {
        let pair = if version == 0 { trace.prompt_history[0].clone() } else { optimized.clone() };
        let runs = thematize_corpus(model, corpus, &ThematizeConfig::new(n_runs, pair)).map_err(fail)?;
        write_runs(&out.join("runs").join(variant_name(version, n_runs)), &runs).map_err(fail)?;
        if (version, n_runs) == VARIANTS[0] {
            main_runs = runs;
        }
    }
    let built = build_codebook(model, &main_runs).map_err(fail)?;
    write_codebook(&out.join("codebook.json"), &built).map_err(fail)?;
    let report = evaluate_corpus(&main_runs, reference, Some(&built.codebook), model, EvalOptions::default()).map_err(fail)?;
    write_report(&out.join("golden"), &report).map_err(fail)?;
    Ok(optimized)
}

/// Drives create, process, feedback, retry and accept for the
/// operation-costs transcript. Returns the final topic count.
pub fn session_flow(model: Arc<dyn ChatModel>, corpus: &[Transcript], pair: PromptPair, work_dir: &Path) -> Result<usize, CliError> {
    let transcript = corpus
        .iter()
        .find(|t| t.id == SESSION_TRANSCRIPT)
        .cloned()
        .ok_or_else(|| fail(format!("corpus has no `{SESSION_TRANSCRIPT}` transcript")))?;
    let cfg = ServiceConfig::new(work_dir, pair);
    let manager = SessionManager::open(cfg, Arc::new(move |_| Ok(model.clone()))).map_err(fail)?;
    let id = manager.create(transcript, None).map_err(fail)?.id;
    let steps = [(Action::Process, None), (Action::Feedback, Some(OPERATION_COSTS_FEEDBACK)), (Action::Retry, None)];
    for (action, text) in steps {
        let s = manager.execute(&id, action, text).map_err(fail)?;
        if s.state != SessionState::Review || s.last_error.is_some() {
            return Err(fail(format!("session flow {}: {:?}", action.as_str(), s.last_error)));
        }
    }
    let s = manager.accept(&id).map_err(fail)?;
    Ok(s.current.len())
}

/// Re-records the whole bundle from `corpus_dir` and `references_dir` into
/// `out` with the scripted backend, then deletes fixtures nothing used.
pub fn record_bundle(corpus_dir: &Path, references_dir: &Path, out: &Path) -> Result<BundleSummary, CliError> {
    let corpus = load_corpus(corpus_dir).map_err(|e| CliError::Usage(e.to_string()))?;
    let reference = ReferenceStandard::load(references_dir).map_err(|e| CliError::Usage(e.to_string()))?;
    let fixture_dir = out.join("fixtures");
    std::fs::create_dir_all(&fixture_dir).map_err(fail)?;
    let (gw, _) = scripted_gateway(Mode::Record, Some(fixture_dir.clone())).map_err(fail)?;
    let gw = Arc::new(gw);
    let pair = produce_artifacts(&gw, &corpus, &reference, out)?;
    let prompt_version = pair.version;
    let work = tempdir_in(out)?;
    let flow = session_flow(gw.clone(), &corpus, pair, &work);
    let _ = std::fs::remove_dir_all(&work);
    let session_topics = flow?;
    let used: BTreeSet<String> = gw.fixture_keys_used().into_iter().collect();
    let mut pruned = 0;
    for entry in std::fs::read_dir(&fixture_dir).map_err(fail)? {
        let path = entry.map_err(fail)?.path();
        let key = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if path.extension().is_some_and(|x| x == "json") && !used.contains(&key) {
            std::fs::remove_file(&path).map_err(fail)?;
            pruned += 1;
        }
    }
    Ok(BundleSummary { fixtures: used.len(), pruned, prompt_version, session_topics })
}

fn tempdir_in(out: &Path) -> Result<PathBuf, CliError> {
    let dir = out.join(format!(".session-flow-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(fail)?;
    Ok(dir)
}
