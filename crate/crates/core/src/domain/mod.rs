//! Core data model shared by every pipeline stage.

mod grounding;
mod text;
mod transcript;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use grounding::{ground_clue, quote_fragments, Clue, GroundingIndex, Span};
pub use text::{normalize_text, same_name, token_set, word_count};
pub use transcript::{
    ingest_transcript, load_corpus, parse_transcript, CorpusManifest, ManifestEntry, Speaker,
    Transcript, TranscriptFormat, Turn,
};

/// Prefix of the warning attached to a clue that is not in its transcript.
pub const UNGROUNDED_PREFIX: &str = "clue not found verbatim in transcript: ";

/// Soft limit stated in the clue prompts.
pub const CLUE_WORD_LIMIT: usize = 200;
/// Soft limit stated in the reasoning prompts.
pub const REASONING_WORD_LIMIT: usize = 150;

pub const INITIAL_CLUE_PROMPT: &str = "List clues (i.e. key phrases, contextual information, semantic and emotional tones, temporal information, symptom descriptions) in the following patient-doctor dialogue that support each given identified topic.";
pub const INITIAL_REASONING_PROMPT: &str =
    "Based on the given clues, generate the reasoning process that supports the identified topics.";

#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("transcript is empty")]
    EmptyTranscript,
    #[error("duplicate transcript id `{0}`")]
    DuplicateId(String),
    #[error("invalid record: {0}")]
    Invalid(String),
}

/// One theme with its supporting quotes and reasoning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicRecord {
    pub topic_name: String,
    pub clues: Vec<Clue>,
    pub reasoning: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl TopicRecord {
    /// Builds a record and attaches word-limit warnings.
    pub fn new(
        topic_name: impl Into<String>,
        clues: Vec<Clue>,
        reasoning: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let topic_name = topic_name.into();
        let reasoning = reasoning.into();
        if topic_name.trim().is_empty() {
            return Err(DomainError::Invalid("empty topic name".into()));
        }
        if clues.is_empty() || clues.iter().any(|c| c.quote.trim().is_empty()) {
            return Err(DomainError::Invalid(format!("topic `{topic_name}` has no clues")));
        }
        if reasoning.trim().is_empty() {
            return Err(DomainError::Invalid(format!(
                "topic `{topic_name}` has no reasoning"
            )));
        }
        let mut record = TopicRecord {
            topic_name,
            clues,
            reasoning,
            warnings: Vec::new(),
        };
        record.refresh_limit_warnings();
        Ok(record)
    }

    pub fn clue_word_count(&self) -> usize {
        self.clues.iter().map(|c| word_count(&c.quote)).sum()
    }

    pub(crate) fn refresh_limit_warnings(&mut self) {
        self.warnings.retain(|w| !w.starts_with("clue word count") && !w.starts_with("reasoning word count"));
        let clue_words = self.clue_word_count();
        if clue_words > CLUE_WORD_LIMIT {
            self.warnings.push(format!(
                "clue word count {clue_words} exceeds the {CLUE_WORD_LIMIT}-word limit"
            ));
        }
        let reasoning_words = word_count(&self.reasoning);
        if reasoning_words > REASONING_WORD_LIMIT {
            self.warnings.push(format!(
                "reasoning word count {reasoning_words} exceeds the {REASONING_WORD_LIMIT}-word limit"
            ));
        }
    }

    /// Replaces the clues (e.g. after grounding) and recomputes warnings.
    pub fn with_clues(mut self, clues: Vec<Clue>) -> Self {
        self.clues = clues;
        self.warnings.retain(|w| !w.starts_with(UNGROUNDED_PREFIX));
        for clue in self.clues.iter().filter(|c| !c.grounded) {
            self.warnings.push(format!("{UNGROUNDED_PREFIX}{}", clue.quote));
        }
        self.refresh_limit_warnings();
        self
    }

    pub fn quotes(&self) -> impl Iterator<Item = &str> {
        self.clues.iter().map(|c| c.quote.as_str())
    }
}

/// Fraction of grounded clues over every clue in `records`; `None` without clues.
pub fn grounding_rate<'a>(records: impl IntoIterator<Item = &'a TopicRecord>) -> Option<f64> {
    let (mut grounded, mut total) = (0usize, 0usize);
    for r in records {
        for c in &r.clues {
            total += 1;
            grounded += usize::from(c.grounded);
        }
    }
    (total > 0).then(|| grounded as f64 / total as f64)
}

/// A versioned pair of instruction prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub clue_prompt: String,
    pub reasoning_prompt: String,
    pub version: u32,
    pub feedback_digest: String,
}

impl PromptPair {
    pub fn initial() -> Self {
        PromptPair {
            clue_prompt: INITIAL_CLUE_PROMPT.to_owned(),
            reasoning_prompt: INITIAL_REASONING_PROMPT.to_owned(),
            version: 0,
            feedback_digest: String::new(),
        }
    }

    pub fn new(
        clue_prompt: impl Into<String>,
        reasoning_prompt: impl Into<String>,
        version: u32,
        feedback_digest: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let pair = PromptPair {
            clue_prompt: clue_prompt.into(),
            reasoning_prompt: reasoning_prompt.into(),
            version,
            feedback_digest: feedback_digest.into(),
        };
        if pair.clue_prompt.trim().is_empty() || pair.reasoning_prompt.trim().is_empty() {
            return Err(DomainError::Invalid("prompt pair has an empty prompt".into()));
        }
        Ok(pair)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub code_name: String,
    pub description: String,
    pub original_topics: Vec<String>,
    #[serde(default)]
    pub representative_clues: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    pub entries: Vec<CodebookEntry>,
    pub source_topic_names: Vec<String>,
}

/// A breach of codebook exclusivity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    MissingTopic { topic: String },
    DuplicatedTopic { topic: String, codes: Vec<String> },
    DuplicateCodeName { code_name: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::MissingTopic { topic } => {
                write!(f, "topic \"{topic}\" is missing from every code")
            }
            Violation::DuplicatedTopic { topic, codes } => write!(
                f,
                "topic \"{topic}\" is duplicated across codes {}",
                codes
                    .iter()
                    .map(|c| format!("\"{c}\""))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
            Violation::DuplicateCodeName { code_name } => {
                write!(f, "code name \"{code_name}\" is used more than once")
            }
        }
    }
}

/// Every way `entries` fails to place each source topic in exactly one
/// uniquely named code. Names compare by normalized equality.
pub fn codebook_violations(entries: &[CodebookEntry], source_topic_names: &[String]) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen_sources = std::collections::HashSet::new();
    for topic in source_topic_names {
        let key = normalize_text(topic);
        if !seen_sources.insert(key.clone()) {
            continue;
        }
        let codes: Vec<String> = entries
            .iter()
            .filter(|e| e.original_topics.iter().any(|t| normalize_text(t) == key))
            .map(|e| e.code_name.clone())
            .collect();
        match codes.len() {
            0 => violations.push(Violation::MissingTopic {
                topic: topic.clone(),
            }),
            1 => {}
            _ => violations.push(Violation::DuplicatedTopic {
                topic: topic.clone(),
                codes,
            }),
        }
    }
    let mut names = std::collections::HashSet::new();
    let mut reported = std::collections::HashSet::new();
    for e in entries {
        let key = normalize_text(&e.code_name);
        if !names.insert(key.clone()) && reported.insert(key) {
            violations.push(Violation::DuplicateCodeName {
                code_name: e.code_name.clone(),
            });
        }
    }
    violations
}

impl Codebook {
    pub fn violations(&self) -> Vec<Violation> {
        codebook_violations(&self.entries, &self.source_topic_names)
    }
}

/// One independent identification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub run_index: u32,
    pub seed: u64,
    pub raw_text: Option<String>,
    pub records: Vec<TopicRecord>,
    pub error: Option<String>,
    pub grounding_rate: Option<f64>,
}

impl RunOutput {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRound {
    pub feedback_text: String,
    pub regenerated: Vec<TopicRecord>,
}

/// Everything produced while analysing one transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRun {
    pub transcript_id: String,
    pub prompt_version: u32,
    pub n_runs: u32,
    #[serde(rename = "runs")]
    pub run_outputs: Vec<RunOutput>,
    pub aggregated: Vec<TopicRecord>,
    #[serde(default)]
    pub feedback_rounds: Vec<FeedbackRound>,
    #[serde(default)]
    pub partial: bool,
    #[serde(default)]
    pub grounding_rate: Option<f64>,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

impl AnalysisRun {
    /// The latest records: the last feedback regeneration, else the aggregate.
    pub fn final_records(&self) -> &[TopicRecord] {
        self.feedback_rounds
            .last()
            .map(|r| r.regenerated.as_slice())
            .unwrap_or(&self.aggregated)
    }
}
