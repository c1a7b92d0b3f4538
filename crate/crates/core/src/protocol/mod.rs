//! Prompt templates and the parsers for every structured model output.
//!
//! Templates are plain UTF-8 resources with `{placeholder}` syntax. Each file
//! has a `=== system ===` and/or `=== user ===` section.

mod format;
mod parse;

use std::collections::BTreeSet;
use std::sync::OnceLock;

pub use format::{
    format_codebook_json, format_keyed_map, format_quote_list, format_tagged, format_topic_blocks,
};
pub use parse::{
    extract_tagged, parse_codebook_json, parse_evaluation_feedback, parse_topic_blocks,
    parse_topic_keyed_map, split_quotes, EvaluationFeedback, ParseDiagnostics, RawTopic,
};

pub const IMPROVED_CLUE_TAG: &str = "IMPROVED_CLUE_PROMPT";
pub const IMPROVED_REASONING_TAG: &str = "IMPROVED_REASONING_PROMPT";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("no binding for placeholder `{0}`")]
    MissingBinding(String),
    #[error("binding `{0}` is not a placeholder of this template")]
    UnknownPlaceholder(String),
    #[error("binding `{0}` is empty")]
    EmptyBinding(String),
    #[error("no topic blocks found{}", join_messages(&.0.messages))]
    NoBlocksFound(ParseDiagnostics),
    #[error("no topic entries found")]
    NoEntriesFound,
    #[error("tag <{0}> not found")]
    TagMissing(String),
    #[error("tag <{0}> is never closed")]
    TagUnclosed(String),
    #[error("no JSON array or object found")]
    JsonNotFound,
    #[error("codebook entry {index}: field `{field}` {problem}")]
    SchemaError {
        index: usize,
        field: String,
        problem: String,
    },
}

fn join_messages(messages: &[String]) -> String {
    if messages.is_empty() {
        String::new()
    } else {
        format!(": {}", messages.join("; "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateId {
    Discovery,
    ClueInstruction,
    ReasoningInstruction,
    Evaluation,
    EvaluationPair,
    Optimization,
    Identification,
    Aggregation,
    Codebook,
    FeedbackRefinement,
}

impl TemplateId {
    pub const ALL: [TemplateId; 10] = [
        TemplateId::Discovery,
        TemplateId::ClueInstruction,
        TemplateId::ReasoningInstruction,
        TemplateId::Evaluation,
        TemplateId::EvaluationPair,
        TemplateId::Optimization,
        TemplateId::Identification,
        TemplateId::Aggregation,
        TemplateId::Codebook,
        TemplateId::FeedbackRefinement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::Discovery => "discovery",
            TemplateId::ClueInstruction => "clue_instruction",
            TemplateId::ReasoningInstruction => "reasoning_instruction",
            TemplateId::Evaluation => "evaluation",
            TemplateId::EvaluationPair => "evaluation_pair",
            TemplateId::Optimization => "optimization",
            TemplateId::Identification => "identification",
            TemplateId::Aggregation => "aggregation",
            TemplateId::Codebook => "codebook",
            TemplateId::FeedbackRefinement => "feedback_refinement",
        }
    }

    fn source(self) -> &'static str {
        match self {
            TemplateId::Discovery => include_str!("../../templates/discovery.txt"),
            TemplateId::ClueInstruction => include_str!("../../templates/clue_instruction.txt"),
            TemplateId::ReasoningInstruction => {
                include_str!("../../templates/reasoning_instruction.txt")
            }
            TemplateId::Evaluation => include_str!("../../templates/evaluation.txt"),
            TemplateId::EvaluationPair => include_str!("../../templates/evaluation_pair.txt"),
            TemplateId::Optimization => include_str!("../../templates/optimization.txt"),
            TemplateId::Identification => include_str!("../../templates/identification.txt"),
            TemplateId::Aggregation => include_str!("../../templates/aggregation.txt"),
            TemplateId::Codebook => include_str!("../../templates/codebook.txt"),
            TemplateId::FeedbackRefinement => {
                include_str!("../../templates/feedback_refinement.txt")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub system_text: String,
    pub user_text: String,
    pub placeholders: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    /// Parses a resource with `=== system ===` / `=== user ===` section markers.
    pub fn from_source(name: &str, source: &str) -> PromptTemplate {
        let mut system = Vec::new();
        let mut user = Vec::new();
        let mut current: Option<&mut Vec<&str>> = None;
        for line in source.lines() {
            match line.trim() {
                "=== system ===" => current = Some(&mut system),
                "=== user ===" => current = Some(&mut user),
                _ => {
                    if let Some(section) = current.as_mut() {
                        section.push(line);
                    }
                }
            }
        }
        PromptTemplate::new(name, system.join("\n").trim().to_owned(), user.join("\n").trim().to_owned())
    }

    pub fn new(name: &str, system_text: String, user_text: String) -> PromptTemplate {
        let mut placeholders = BTreeSet::new();
        for text in [&system_text, &user_text] {
            for (_, name) in placeholder_occurrences(text) {
                placeholders.insert(name.to_owned());
            }
        }
        PromptTemplate {
            name: name.to_owned(),
            system_text,
            user_text,
            placeholders,
        }
    }
}

fn is_ident_start(c: u8) -> bool {
    c.is_ascii_lowercase() || c == b'_'
}

fn is_ident(c: u8) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == b'_'
}

/// Byte ranges of `{ident}` occurrences, paired with the identifier.
fn placeholder_occurrences(text: &str) -> Vec<(std::ops::Range<usize>, &str)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' && i + 1 < bytes.len() && is_ident_start(bytes[i + 1]) {
            let mut j = i + 1;
            while j < bytes.len() && is_ident(bytes[j]) {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'}' {
                out.push((i..j + 1, &text[i + 1..j]));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

fn substitute(text: &str, bindings: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (range, name) in placeholder_occurrences(text) {
        if let Some((_, value)) = bindings.iter().find(|(k, _)| *k == name) {
            out.push_str(&text[last..range.start]);
            out.push_str(value);
            last = range.end;
        }
    }
    out.push_str(&text[last..]);
    out
}

/// Substitutes every declared placeholder in a single pass; values are never rescanned.
pub fn render(tpl: &PromptTemplate, bindings: &[(&str, &str)]) -> Result<RenderedPrompt, ProtocolError> {
    for (name, value) in bindings {
        if !tpl.placeholders.contains(*name) {
            return Err(ProtocolError::UnknownPlaceholder((*name).to_owned()));
        }
        if value.trim().is_empty() {
            return Err(ProtocolError::EmptyBinding((*name).to_owned()));
        }
    }
    if let Some(missing) = tpl
        .placeholders
        .iter()
        .find(|p| !bindings.iter().any(|(k, _)| k == p))
    {
        return Err(ProtocolError::MissingBinding(missing.clone()));
    }
    Ok(RenderedPrompt {
        system: substitute(&tpl.system_text, bindings),
        user: substitute(&tpl.user_text, bindings),
    })
}

/// The named template, loaded once from the bundled resources.
pub fn template(id: TemplateId) -> &'static PromptTemplate {
    static TEMPLATES: OnceLock<Vec<PromptTemplate>> = OnceLock::new();
    let all = TEMPLATES.get_or_init(|| {
        let identification_system = PromptTemplate::from_source("identification", TemplateId::Identification.source()).system_text;
        TemplateId::ALL
            .iter()
            .map(|&id| {
                let mut tpl = PromptTemplate::from_source(id.name(), id.source());
                if id == TemplateId::FeedbackRefinement {
                    tpl.system_text = identification_system.clone();
                }
                tpl
            })
            .collect()
    });
    let pos = TemplateId::ALL.iter().position(|&t| t == id).expect("listed");
    &all[pos]
}

/// The aggregation template with `Output i: {result_i}` lines for `n` runs.
pub fn aggregation_template(n: usize) -> PromptTemplate {
    let base = template(TemplateId::Aggregation);
    let outputs = (1..=n)
        .map(|i| format!("Output {i}: {{result_{i}}}"))
        .collect::<Vec<_>>()
        .join("\n\n");
    let user = base.user_text.replace("{outputs}", &outputs);
    PromptTemplate::new(base.name.as_str(), base.system_text.clone(), user)
}
