//! Instruction refinement: theme discovery on a sample, then repeated cycles of
//! clue generation, reasoning generation, batch evaluation and prompt rewriting.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{normalize_text, PromptPair, Transcript};
use crate::gateway::{ChatModel, ChatRole, GatewayError};
use crate::protocol::{
    extract_tagged, format_keyed_map, format_quote_list, parse_topic_blocks, parse_topic_keyed_map,
    render, split_quotes, template, ProtocolError, TemplateId, IMPROVED_CLUE_TAG,
    IMPROVED_REASONING_TAG,
};

#[derive(Debug, thiserror::Error)]
pub enum InstructorError {
    #[error("invalid input: {0}")]
    Precondition(String),
    #[error("model call failed{}: {source}", context(.transcript_id))]
    Gateway {
        transcript_id: Option<String>,
        #[source]
        source: GatewayError,
    },
    #[error("theme discovery failed for transcript `{transcript_id}`: {source}")]
    DiscoveryFailed {
        transcript_id: String,
        #[source]
        source: ProtocolError,
    },
    #[error("unparseable output for transcript `{transcript_id}`: {source}")]
    Parse {
        transcript_id: String,
        #[source]
        source: ProtocolError,
    },
    #[error("cannot persist {path}: {message}")]
    Persist { path: PathBuf, message: String },
    #[error("refinement aborted after {} prompt version(s): {source}", trace.prompt_history.len())]
    Aborted {
        trace: Box<RefinementTrace>,
        #[source]
        source: Box<InstructorError>,
    },
}

fn context(id: &Option<String>) -> String {
    id.as_ref().map(|i| format!(" for transcript `{i}`")).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub sample_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub tag_retry_limit: u32,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            sample_size: 2,
            iterations: 3,
            seed: 0,
            tag_retry_limit: 2,
        }
    }
}

/// Clues and reasoning generated for one transcript in one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptCycle {
    pub transcript_id: String,
    pub clues: IndexMap<String, Vec<String>>,
    pub reasoning: IndexMap<String, String>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub prompt_version: u32,
    pub transcripts: Vec<TranscriptCycle>,
    pub feedback: String,
    pub optimized: bool,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub sample: Vec<String>,
    pub discovered: IndexMap<String, Vec<String>>,
    pub prompt_history: Vec<PromptPair>,
    pub iterations: Vec<IterationRecord>,
}

impl RefinementTrace {
    pub fn active(&self) -> &PromptPair {
        self.prompt_history.last().expect("history starts at version 0")
    }
}

/// Map output plus notes about topics that were missing or unexpected.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated<T> {
    pub map: IndexMap<String, T>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub pair: PromptPair,
    pub optimized: bool,
    pub diagnostics: Vec<String>,
}

/// One clue-reasoning-topic triple for batch evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTriple {
    pub clues: Vec<String>,
    pub reasoning: String,
    pub topics: String,
}

const FORMAT_REMINDER: &str = "Your previous reply could not be used. Reply again with the improved clue prompt between <IMPROVED_CLUE_PROMPT> and </IMPROVED_CLUE_PROMPT> and the improved reasoning prompt between <IMPROVED_REASONING_PROMPT> and </IMPROVED_REASONING_PROMPT>.";

fn gw(id: Option<&str>) -> impl FnOnce(GatewayError) -> InstructorError + '_ {
    move |source| InstructorError::Gateway {
        transcript_id: id.map(str::to_owned),
        source,
    }
}

fn rendered(id: TemplateId, bindings: &[(&str, &str)]) -> Result<crate::protocol::RenderedPrompt, InstructorError> {
    render(template(id), bindings).map_err(|e| InstructorError::Precondition(e.to_string()))
}

/// Samples `sample_size` transcripts without replacement, deterministically from `seed`.
pub fn sample_transcripts<'a>(corpus: &'a [Transcript], cfg: &RefinementConfig) -> Result<Vec<&'a Transcript>, InstructorError> {
    if corpus.is_empty() {
        return Err(InstructorError::Precondition("corpus is empty".into()));
    }
    if cfg.sample_size == 0 || cfg.sample_size > corpus.len() {
        return Err(InstructorError::Precondition(format!(
            "sample_size {} must be between 1 and the corpus size {}",
            cfg.sample_size,
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(corpus.choose_multiple(&mut rng, cfg.sample_size).collect())
}

/// Discovers provisional topic names for one transcript; clues and reasoning are discarded.
pub fn discover_topics(model: &dyn ChatModel, t: &Transcript) -> Result<Vec<String>, InstructorError> {
    let prompt = rendered(TemplateId::Discovery, &[("dialogue", &t.dialogue())])?;
    let req = model.request(ChatRole::Reasoner, prompt.system, prompt.user);
    let raw = model.chat(&req).map_err(gw(Some(&t.id)))?;
    let (topics, _) = parse_topic_blocks(&raw).map_err(|source| InstructorError::DiscoveryFailed {
        transcript_id: t.id.clone(),
        source,
    })?;
    let mut names: Vec<String> = Vec::new();
    for topic in topics {
        if !names.iter().any(|n| normalize_text(n) == normalize_text(&topic.topic_name)) {
            names.push(topic.topic_name);
        }
    }
    Ok(names)
}

/// Runs discovery over the seeded sample, keyed by transcript id in sample order.
pub fn discover_initial_themes(
    model: &dyn ChatModel,
    corpus: &[Transcript],
    cfg: &RefinementConfig,
) -> Result<IndexMap<String, Vec<String>>, InstructorError> {
    let sample = sample_transcripts(corpus, cfg)?;
    let mut out = IndexMap::new();
    for t in sample {
        out.insert(t.id.clone(), discover_topics(model, t)?);
    }
    Ok(out)
}

fn topics_line(topics: &[String]) -> String {
    topics.join("; ")
}

pub fn generate_clues(
    model: &dyn ChatModel,
    pair: &PromptPair,
    t: &Transcript,
    topics: &[String],
) -> Result<Generated<Vec<String>>, InstructorError> {
    if topics.is_empty() {
        return Err(InstructorError::Precondition(format!("no topics for transcript `{}`", t.id)));
    }
    let prompt = rendered(
        TemplateId::ClueInstruction,
        &[
            ("clue_prompt", &pair.clue_prompt),
            ("dialogue", &t.dialogue()),
            ("topics", &topics_line(topics)),
        ],
    )?;
    let req = model.request(ChatRole::Reasoner, prompt.system, prompt.user);
    let raw = model.chat(&req).map_err(gw(Some(&t.id)))?;
    let parsed = parse_topic_keyed_map(&raw).map_err(|source| InstructorError::Parse {
        transcript_id: t.id.clone(),
        source,
    })?;
    let mut map = IndexMap::new();
    let mut diagnostics = Vec::new();
    for topic in topics {
        let quotes = parsed.get(&normalize_text(topic)).map(|b| split_quotes(b)).unwrap_or_default();
        if quotes.is_empty() {
            diagnostics.push(format!("{}: no clues returned for topic `{topic}`", t.id));
        }
        map.insert(topic.clone(), quotes);
    }
    Ok(Generated { map, diagnostics })
}

pub fn generate_reasoning(
    model: &dyn ChatModel,
    pair: &PromptPair,
    transcript_id: &str,
    clues: &IndexMap<String, Vec<String>>,
    topics: &[String],
) -> Result<Generated<String>, InstructorError> {
    if topics.is_empty() {
        return Err(InstructorError::Precondition("no topics to reason about".into()));
    }
    if let Some(missing) = topics.iter().find(|t| !clues.contains_key(*t)) {
        return Err(InstructorError::Precondition(format!("no clue entry for topic `{missing}`")));
    }
    let entries: Vec<(String, String)> = topics
        .iter()
        .map(|topic| {
            let quotes = &clues[topic];
            let body = if quotes.is_empty() {
                "(no clues)".to_owned()
            } else {
                quotes.iter().map(|q| format!("\"{q}\"")).collect::<Vec<_>>().join(" ")
            };
            (topic.clone(), body)
        })
        .collect();
    let prompt = rendered(
        TemplateId::ReasoningInstruction,
        &[
            ("reasoning_prompt", &pair.reasoning_prompt),
            ("clues", &format_keyed_map(&entries)),
            ("topics", &topics_line(topics)),
        ],
    )?;
    let req = model.request(ChatRole::Reasoner, prompt.system, prompt.user);
    let raw = model.chat(&req).map_err(gw(Some(transcript_id)))?;
    let parsed = parse_topic_keyed_map(&raw).map_err(|source| InstructorError::Parse {
        transcript_id: transcript_id.to_owned(),
        source,
    })?;
    let wanted: Vec<String> = topics.iter().map(|t| normalize_text(t)).collect();
    let mut diagnostics: Vec<String> = parsed
        .keys()
        .filter(|k| !wanted.contains(k))
        .map(|k| format!("{transcript_id}: dropped reasoning for unrequested topic `{k}`"))
        .collect();
    let mut map = IndexMap::new();
    for (topic, key) in topics.iter().zip(&wanted) {
        match parsed.get(key).filter(|b| !b.trim().is_empty()) {
            Some(body) => {
                map.insert(topic.clone(), body.clone());
            }
            None => diagnostics.push(format!("{transcript_id}: no reasoning returned for topic `{topic}`")),
        }
    }
    Ok(Generated { map, diagnostics })
}

/// Renders all triples into one evaluation prompt and returns the aggregate feedback.
pub fn evaluate_batch(model: &dyn ChatModel, triples: &[EvalTriple]) -> Result<String, InstructorError> {
    if triples.is_empty() {
        return Err(InstructorError::Precondition("no triples to evaluate".into()));
    }
    let mut blocks = Vec::with_capacity(triples.len());
    for (i, triple) in triples.iter().enumerate() {
        let clues = if triple.clues.is_empty() {
            "(no clues)".to_owned()
        } else {
            format_quote_list(&triple.clues)
        };
        let reasoning = if triple.reasoning.trim().is_empty() { "(no reasoning)" } else { &triple.reasoning };
        let index = (i + 1).to_string();
        let block = rendered(
            TemplateId::EvaluationPair,
            &[("pair_index", &index), ("clues", &clues), ("reasoning", reasoning), ("topics", &triple.topics)],
        )?;
        blocks.push(block.user);
    }
    let prompt = rendered(TemplateId::Evaluation, &[("pairs", &blocks.join("\n\n"))])?;
    let req = model.request(ChatRole::Reasoner, prompt.system, prompt.user);
    model.chat(&req).map_err(gw(None))
}

pub fn feedback_digest(feedback: &str) -> String {
    hex::encode(Sha256::digest(feedback.as_bytes()))
}

/// Rewrites both prompts from feedback. Tag failures are retried with a format
/// reminder; if they persist the input pair comes back unchanged.
pub fn optimize(
    model: &dyn ChatModel,
    pair: &PromptPair,
    feedback: &str,
    cfg: &RefinementConfig,
) -> Result<OptimizeOutcome, InstructorError> {
    if feedback.trim().is_empty() {
        return Err(InstructorError::Precondition("feedback is empty".into()));
    }
    let prompt = rendered(
        TemplateId::Optimization,
        &[("feedback", feedback), ("clue_prompt", &pair.clue_prompt), ("reasoning_prompt", &pair.reasoning_prompt)],
    )?;
    let mut diagnostics = Vec::new();
    for attempt in 0..=cfg.tag_retry_limit {
        let mut req = model.request(ChatRole::Reasoner, prompt.system.clone(), prompt.user.clone());
        if attempt > 0 {
            req.user = format!("{}\n\n{FORMAT_REMINDER}", prompt.user);
            req.params.seed = Some(u64::from(attempt));
        }
        let raw = model.chat(&req).map_err(gw(None))?;
        let extracted = extract_tagged(&raw, IMPROVED_CLUE_TAG)
            .and_then(|c| extract_tagged(&raw, IMPROVED_REASONING_TAG).map(|r| (c, r)));
        match extracted {
            Ok((clue, reasoning)) if !clue.is_empty() && !reasoning.is_empty() => {
                let next = PromptPair::new(clue, reasoning, pair.version + 1, feedback_digest(feedback))
                    .expect("prompts checked non-empty");
                return Ok(OptimizeOutcome {
                    pair: next,
                    optimized: true,
                    diagnostics,
                });
            }
            Ok(_) => diagnostics.push(format!("attempt {}: a tagged prompt was empty", attempt + 1)),
            Err(e) => diagnostics.push(format!("attempt {}: {e}", attempt + 1)),
        }
    }
    diagnostics.push(format!(
        "optimization failed after {} attempt(s); keeping prompt version {}",
        cfg.tag_retry_limit + 1,
        pair.version
    ));
    Ok(OptimizeOutcome {
        pair: pair.clone(),
        optimized: false,
        diagnostics,
    })
}

fn cycle_for(
    model: &dyn ChatModel,
    pair: &PromptPair,
    t: &Transcript,
    topics: &[String],
) -> Result<TranscriptCycle, InstructorError> {
    let clues = generate_clues(model, pair, t, topics)?;
    let reasoning = generate_reasoning(model, pair, &t.id, &clues.map, topics)?;
    let mut diagnostics = clues.diagnostics;
    diagnostics.extend(reasoning.diagnostics);
    Ok(TranscriptCycle {
        transcript_id: t.id.clone(),
        clues: clues.map,
        reasoning: reasoning.map,
        diagnostics,
    })
}

/// Runs the whole loop. Every prompt version and the trace are written under
/// `out_dir` when given; on abort the partial trace is persisted and returned
/// inside the error.
pub fn run_refinement(
    model: &dyn ChatModel,
    corpus: &[Transcript],
    cfg: &RefinementConfig,
    out_dir: Option<&Path>,
) -> Result<RefinementTrace, InstructorError> {
    let mut trace = RefinementTrace {
        prompt_history: vec![PromptPair::initial()],
        ..RefinementTrace::default()
    };
    if let Some(dir) = out_dir {
        persist_prompt(dir, &trace.prompt_history[0])?;
    }
    let result = refine_into(model, corpus, cfg, out_dir, &mut trace);
    if let Some(dir) = out_dir {
        persist_trace(dir, &trace)?;
    }
    match result {
        Ok(()) => Ok(trace),
        Err(source) => Err(InstructorError::Aborted {
            trace: Box::new(trace),
            source: Box::new(source),
        }),
    }
}

fn refine_into(
    model: &dyn ChatModel,
    corpus: &[Transcript],
    cfg: &RefinementConfig,
    out_dir: Option<&Path>,
    trace: &mut RefinementTrace,
) -> Result<(), InstructorError> {
    let sample = sample_transcripts(corpus, cfg)?;
    trace.sample = sample.iter().map(|t| t.id.clone()).collect();
    for t in &sample {
        trace.discovered.insert(t.id.clone(), discover_topics(model, t)?);
    }
    for iteration in 0..cfg.iterations {
        let pair = trace.active().clone();
        let cycles: Vec<Result<TranscriptCycle, InstructorError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = sample
                .iter()
                .map(|t| {
                    let topics = &trace.discovered[&t.id];
                    let pair = &pair;
                    scope.spawn(move || cycle_for(model, pair, t, topics))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("cycle thread panicked")).collect()
        });
        let cycles = cycles.into_iter().collect::<Result<Vec<_>, _>>()?;

        let triples: Vec<EvalTriple> = cycles
            .iter()
            .flat_map(|c| {
                c.clues.iter().map(|(topic, quotes)| EvalTriple {
                    clues: quotes.clone(),
                    reasoning: c.reasoning.get(topic).cloned().unwrap_or_default(),
                    topics: topic.clone(),
                })
            })
            .collect();
        let feedback = evaluate_batch(model, &triples)?;
        let outcome = optimize(model, &pair, &feedback, cfg)?;
        let mut diagnostics: Vec<String> = cycles.iter().flat_map(|c| c.diagnostics.iter().cloned()).collect();
        diagnostics.extend(outcome.diagnostics);
        trace.iterations.push(IterationRecord {
            iteration: iteration + 1,
            prompt_version: pair.version,
            transcripts: cycles,
            feedback,
            optimized: outcome.optimized,
            diagnostics,
        });
        if outcome.optimized {
            if let Some(dir) = out_dir {
                persist_prompt(dir, &outcome.pair)?;
            }
            trace.prompt_history.push(outcome.pair);
        }
    }
    Ok(())
}

fn persist_err(path: &Path) -> impl FnOnce(std::io::Error) -> InstructorError + '_ {
    move |e| InstructorError::Persist {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

pub fn prompt_path(dir: &Path, version: u32) -> PathBuf {
    dir.join("prompts").join(format!("v{version}.json"))
}

fn persist_prompt(dir: &Path, pair: &PromptPair) -> Result<(), InstructorError> {
    let path = prompt_path(dir, pair.version);
    if path.exists() {
        let existing: Result<PromptPair, _> = crate::read_json(&path);
        if existing.as_ref().ok() == Some(pair) {
            return Ok(());
        }
        if existing.is_ok() && pair.version == 0 {
            return Err(InstructorError::Persist {
                path,
                message: "refusing to overwrite a different version-0 prompt".into(),
            });
        }
    }
    crate::write_json(&path, pair).map_err(persist_err(&path))
}

fn persist_trace(dir: &Path, trace: &RefinementTrace) -> Result<(), InstructorError> {
    let path = dir.join("trace.json");
    crate::write_json(&path, trace).map_err(persist_err(&path))
}

/// Loads `prompts/v{version}.json` from a refinement directory.
pub fn load_prompt(dir: &Path, version: u32) -> Result<PromptPair, InstructorError> {
    let path = prompt_path(dir, version);
    let pair: PromptPair = crate::read_json(&path).map_err(persist_err(&path))?;
    PromptPair::new(pair.clue_prompt, pair.reasoning_prompt, pair.version, pair.feedback_digest)
        .map_err(|e| InstructorError::Precondition(e.to_string()))
}
