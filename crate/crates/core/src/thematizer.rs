//! Per-transcript theme identification, multi-run union and feedback regeneration.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::domain::{
    UNGROUNDED_PREFIX, grounding_rate, normalize_text, AnalysisRun, Clue, FeedbackRound, GroundingIndex, PromptPair,
    RunOutput, TopicRecord, Transcript,
};
use crate::gateway::{ChatModel, ChatRole, GatewayError};
use crate::protocol::{
    aggregation_template, format_topic_blocks, parse_topic_blocks, render, template, ProtocolError,
    RawTopic, TemplateId,
};

#[derive(Debug, thiserror::Error)]
pub enum ThematizeError {
    #[error("invalid input: {0}")]
    Precondition(String),
    #[error("model call failed for transcript `{transcript_id}`: {source}")]
    Gateway {
        transcript_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("no topics could be parsed for transcript `{transcript_id}`: {source}")]
    IdentificationFailed {
        transcript_id: String,
        #[source]
        source: ProtocolError,
    },
    #[error("every run failed for transcript `{transcript_id}`: {}", errors.join("; "))]
    AllRunsFailed {
        transcript_id: String,
        errors: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThematizeConfig {
    pub n_runs: u32,
    pub prompt_pair: PromptPair,
    pub ground_clues: bool,
    /// Run `i` is issued with seed `salt_base + i`.
    pub salt_base: u64,
}

impl Default for ThematizeConfig {
    fn default() -> Self {
        ThematizeConfig {
            n_runs: 3,
            prompt_pair: PromptPair::initial(),
            ground_clues: true,
            salt_base: 0,
        }
    }
}

impl ThematizeConfig {
    pub fn new(n_runs: u32, prompt_pair: PromptPair) -> Self {
        ThematizeConfig {
            n_runs,
            prompt_pair,
            ..ThematizeConfig::default()
        }
    }
}

/// One identification call and its parse.
#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub raw_text: String,
    pub records: Vec<TopicRecord>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub records: Vec<TopicRecord>,
    pub diagnostics: Vec<String>,
    pub used_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub records: Vec<TopicRecord>,
    pub raw_text: Option<String>,
    pub diagnostics: Vec<String>,
    pub fell_back: bool,
}

/// Turns parsed topics into records, grounding each quote when `index` is given.
pub fn to_records(raw: Vec<RawTopic>, index: Option<&GroundingIndex>) -> Vec<TopicRecord> {
    raw.into_iter()
        .filter_map(|t| {
            let clues: Vec<Clue> = t.clues.iter().map(|q| Clue::ungrounded(q.clone())).collect();
            let record = TopicRecord::new(t.topic_name, clues, t.reasoning).ok()?;
            Some(match index {
                Some(ix) => {
                    let grounded = record.clues.iter().map(|c| ix.ground(&c.quote)).collect();
                    record.with_clues(grounded)
                }
                None => record,
            })
        })
        .collect()
}

fn identification_prompt(t: &Transcript, pair: &PromptPair) -> Result<crate::protocol::RenderedPrompt, ThematizeError> {
    render(
        template(TemplateId::Identification),
        &[
            ("optimized_clue_prompt", &pair.clue_prompt),
            ("optimized_reasoning_prompt", &pair.reasoning_prompt),
            ("dialogue", &t.dialogue()),
        ],
    )
    .map_err(|e| ThematizeError::Precondition(e.to_string()))
}

fn gateway_err(t: &Transcript) -> impl FnOnce(GatewayError) -> ThematizeError + '_ {
    move |source| ThematizeError::Gateway {
        transcript_id: t.id.clone(),
        source,
    }
}

/// One identification run with the given prompt pair.
pub fn identify_topics(
    model: &dyn ChatModel,
    t: &Transcript,
    pair: &PromptPair,
    seed: Option<u64>,
    ground_clues: bool,
) -> Result<Identification, ThematizeError> {
    let prompt = identification_prompt(t, pair)?;
    let mut req = model.request(ChatRole::Worker, prompt.system, prompt.user);
    req.params.seed = seed;
    let raw_text = model.chat(&req).map_err(gateway_err(t))?;
    let (topics, diag) = parse_topic_blocks(&raw_text).map_err(|source| ThematizeError::IdentificationFailed {
        transcript_id: t.id.clone(),
        source,
    })?;
    let index = ground_clues.then(|| GroundingIndex::new(t));
    Ok(Identification {
        records: to_records(topics, index.as_ref()),
        raw_text,
        diagnostics: diag.messages,
    })
}

/// Merges records whose normalized names are equal: clues are unioned (first
/// occurrence wins) and reasonings concatenated. All strings are copied.
pub fn programmatic_union(runs: &[Vec<TopicRecord>]) -> Vec<TopicRecord> {
    let mut merged: Vec<TopicRecord> = Vec::new();
    for record in runs.iter().flatten() {
        let key = normalize_text(&record.topic_name);
        match merged.iter_mut().find(|m| normalize_text(&m.topic_name) == key) {
            Some(existing) => {
                let mut seen: HashSet<String> = existing.clues.iter().map(|c| normalize_text(&c.quote)).collect();
                for c in &record.clues {
                    if seen.insert(normalize_text(&c.quote)) {
                        existing.clues.push(c.clone());
                        let note = format!("{UNGROUNDED_PREFIX}{}", c.quote);
                        if record.warnings.contains(&note) {
                            existing.warnings.push(note);
                        }
                    }
                }
                if normalize_text(&existing.reasoning) != normalize_text(&record.reasoning) {
                    existing.reasoning = format!("{}\n{}", existing.reasoning, record.reasoning);
                }
                existing.refresh_limit_warnings();
            }
            None => merged.push(record.clone()),
        }
    }
    merged
}

/// Appends every topic present in some run but absent from `aggregate`, copied
/// from the first run containing it. Returns one diagnostic per restored topic.
pub fn repair_union(aggregate: &mut Vec<TopicRecord>, runs: &[Vec<TopicRecord>]) -> Vec<String> {
    let mut present: HashSet<String> = aggregate.iter().map(|r| normalize_text(&r.topic_name)).collect();
    let mut diagnostics = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        for record in run {
            if present.insert(normalize_text(&record.topic_name)) {
                diagnostics.push(format!(
                    "aggregate dropped topic `{}`; restored from run {}",
                    record.topic_name,
                    i + 1
                ));
                aggregate.push(record.clone());
            }
        }
    }
    diagnostics
}

/// Aggregates two or more runs with one model call, then enforces the union.
/// Falls back to [`programmatic_union`] if the call or its parse fails.
pub fn aggregate_runs(
    model: &dyn ChatModel,
    t: &Transcript,
    raw_outputs: &[String],
    parsed: &[Vec<TopicRecord>],
    ground_clues: bool,
) -> Result<Aggregation, ThematizeError> {
    if raw_outputs.len() < 2 || raw_outputs.len() != parsed.len() {
        return Err(ThematizeError::Precondition(
            "aggregation needs at least two runs with parsed records".into(),
        ));
    }
    let tpl = aggregation_template(raw_outputs.len());
    let names: Vec<String> = (1..=raw_outputs.len()).map(|i| format!("result_{i}")).collect();
    let bindings: Vec<(&str, &str)> = names.iter().map(String::as_str).zip(raw_outputs.iter().map(String::as_str)).collect();
    let prompt = render(&tpl, &bindings).map_err(|e| ThematizeError::Precondition(e.to_string()))?;
    let req = model.request(ChatRole::Worker, prompt.system, prompt.user);

    let mut diagnostics = Vec::new();
    let attempt = model
        .chat(&req)
        .map_err(|e| format!("aggregation call failed: {e}"))
        .and_then(|raw| {
            parse_topic_blocks(&raw)
                .map(|(topics, diag)| (topics, diag.messages))
                .map_err(|e| format!("aggregation output unparseable: {e}"))
        });
    let (mut records, used_fallback) = match attempt {
        Ok((topics, messages)) => {
            diagnostics.extend(messages);
            let index = ground_clues.then(|| GroundingIndex::new(t));
            (to_records(topics, index.as_ref()), false)
        }
        Err(message) => {
            tracing::warn!(transcript = %t.id, "{message}; using programmatic union");
            diagnostics.push(format!("{message}; used programmatic union"));
            (programmatic_union(parsed), true)
        }
    };
    diagnostics.extend(repair_union(&mut records, parsed));
    Ok(Aggregation {
        records,
        diagnostics,
        used_fallback,
    })
}

/// Runs identification `n_runs` times and aggregates the successful runs.
pub fn thematize(model: &dyn ChatModel, t: &Transcript, cfg: &ThematizeConfig) -> Result<AnalysisRun, ThematizeError> {
    if cfg.n_runs == 0 {
        return Err(ThematizeError::Precondition("n_runs must be at least 1".into()));
    }
    let results: Vec<Result<Identification, ThematizeError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.n_runs)
            .map(|i| {
                let seed = cfg.salt_base + u64::from(i);
                scope.spawn(move || identify_topics(model, t, &cfg.prompt_pair, Some(seed), cfg.ground_clues))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("identification thread panicked"))
            .collect()
    });

    let mut run_outputs = Vec::with_capacity(results.len());
    let mut diagnostics = Vec::new();
    let mut errors = Vec::new();
    for (i, result) in results.into_iter().enumerate() {
        let run_index = i as u32;
        let seed = cfg.salt_base + u64::from(run_index);
        match result {
            Ok(ident) => {
                diagnostics.extend(ident.diagnostics.iter().map(|m| format!("run {}: {m}", i + 1)));
                run_outputs.push(RunOutput {
                    run_index,
                    seed,
                    grounding_rate: grounding_rate(&ident.records),
                    raw_text: Some(ident.raw_text),
                    records: ident.records,
                    error: None,
                });
            }
            Err(e) => {
                let message = e.to_string();
                diagnostics.push(format!("run {} failed: {message}", i + 1));
                errors.push(message.clone());
                run_outputs.push(RunOutput {
                    run_index,
                    seed,
                    raw_text: None,
                    records: Vec::new(),
                    error: Some(message),
                    grounding_rate: None,
                });
            }
        }
    }

    let ok: Vec<&RunOutput> = run_outputs.iter().filter(|r| r.succeeded()).collect();
    let aggregated = match ok.len() {
        0 => {
            return Err(ThematizeError::AllRunsFailed {
                transcript_id: t.id.clone(),
                errors,
            })
        }
        1 => ok[0].records.clone(),
        _ => {
            let raw: Vec<String> = ok.iter().map(|r| r.raw_text.clone().unwrap_or_default()).collect();
            let parsed: Vec<Vec<TopicRecord>> = ok.iter().map(|r| r.records.clone()).collect();
            let agg = aggregate_runs(model, t, &raw, &parsed, cfg.ground_clues)?;
            diagnostics.extend(agg.diagnostics);
            agg.records
        }
    };
    let partial = ok.len() < run_outputs.len();
    Ok(AnalysisRun {
        transcript_id: t.id.clone(),
        prompt_version: cfg.prompt_pair.version,
        n_runs: cfg.n_runs,
        grounding_rate: grounding_rate(&aggregated),
        run_outputs,
        aggregated,
        feedback_rounds: Vec::new(),
        partial,
        diagnostics,
    })
}

/// Regenerates topics from reviewer feedback. On any failure the previous
/// records come back unchanged with a diagnostic.
pub fn refine_with_feedback(
    model: &dyn ChatModel,
    t: &Transcript,
    previous: &[TopicRecord],
    feedback_text: &str,
    pair: &PromptPair,
    ground_clues: bool,
) -> Result<Refinement, ThematizeError> {
    if previous.is_empty() {
        return Err(ThematizeError::Precondition("no previous topics to refine".into()));
    }
    if feedback_text.trim().is_empty() {
        return Err(ThematizeError::Precondition("feedback text is empty".into()));
    }
    let task = identification_prompt(t, pair)?;
    let previous_raw: Vec<RawTopic> = previous.iter().map(RawTopic::from).collect();
    let previous_output = format_topic_blocks(&previous_raw);
    let prompt = render(
        template(TemplateId::FeedbackRefinement),
        &[
            ("task", &task.user),
            ("previous_output", &previous_output),
            ("feedback", feedback_text.trim()),
        ],
    )
    .map_err(|e| ThematizeError::Precondition(e.to_string()))?;
    let req = model.request(ChatRole::Worker, prompt.system, prompt.user);
    let fallback = |message: String, raw_text: Option<String>| Refinement {
        records: previous.to_vec(),
        raw_text,
        diagnostics: vec![message],
        fell_back: true,
    };
    let raw = match model.chat(&req) {
        Ok(raw) => raw,
        Err(e) => return Ok(fallback(format!("regeneration call failed: {e}"), None)),
    };
    match parse_topic_blocks(&raw) {
        Ok((topics, diag)) => {
            let index = ground_clues.then(|| GroundingIndex::new(t));
            let records = to_records(topics, index.as_ref());
            if records.is_empty() {
                return Ok(fallback("regeneration produced no usable topics".into(), Some(raw)));
            }
            Ok(Refinement {
                records,
                raw_text: Some(raw),
                diagnostics: diag.messages,
                fell_back: false,
            })
        }
        Err(e) => Ok(fallback(format!("regeneration output unparseable: {e}"), Some(raw))),
    }
}

/// Applies a feedback round to an analysis run in place.
pub fn apply_feedback(run: &mut AnalysisRun, feedback_text: &str, refinement: &Refinement) {
    run.diagnostics.extend(refinement.diagnostics.iter().cloned());
    if !refinement.fell_back {
        run.feedback_rounds.push(FeedbackRound {
            feedback_text: feedback_text.to_owned(),
            regenerated: refinement.records.clone(),
        });
        run.grounding_rate = grounding_rate(run.final_records());
    }
}
