//! A deterministic scripted backend speaking the chat and embedding wire
//! protocol. It recognises each pipeline prompt, answers it from a small
//! keyword lexicon over the dialogue, and is what the bundled fixture pack is
//! recorded from.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::domain::{normalize_text, token_set};
use crate::gateway::{Gateway, GatewayConfig, GatewayError, Mode, Secret, Transport, TransportFailure};
use crate::protocol::{format_topic_blocks, parse_topic_blocks, RawTopic};

pub const EMBEDDING_DIM: usize = 64;

/// Clue prompt returned by the optimization step.
pub const OPTIMIZED_CLUE_PROMPT: &str = "Extract direct quotes from the dialogue that support each topic. Keep every quote verbatim and long enough to show what caused the experience, such as a cost figure, a pill count or a named symptom. Assign each quote to the single topic it supports most clearly.";
/// Reasoning prompt returned by the optimization step.
pub const OPTIMIZED_REASONING_PROMPT: &str = "For each topic, connect the clues to the topic in numbered steps (Step 1, Step 2, ...), each step naming the clue it uses and what it shows about the patient's experience. Use only the provided clues.";
const FOLLOW_UP: &str = " Drop quotes that repeat an earlier quote.";

struct Family {
    key: &'static str,
    keywords: &'static [&'static str],
    name: &'static str,
    revised_name: &'static str,
    code: &'static str,
    code_description: &'static str,
}

const FAMILIES: &[Family] = &[
    Family {
        key: "cost",
        keywords: &["expensive", "cost", "costs", "afford", "money", "pay", "paid", "price", "dollars", "copay", "insurance", "salary", "expenses", "bill", "le"],
        name: "Financial Strain from Medication Costs",
        revised_name: "Out-of-Pocket Medication Costs",
        code: "Financial Burden of Medications",
        code_description: "Money spent on drugs and treatment and the strain it causes.",
    },
    Family {
        key: "pills",
        keywords: &["pills", "pill", "medications", "fewer"],
        name: "Heavy Daily Pill Burden",
        revised_name: "Burden of Taking Many Pills",
        code: "Medication Burden",
        code_description: "The load of taking many medicines every day.",
    },
    Family {
        key: "side_effects",
        keywords: &["dizzy", "tired", "energy", "swell", "rashes", "drowsy", "bathroom", "sickness"],
        name: "Side Effects Disrupting Daily Life",
        revised_name: "Physical Side Effects of Medication",
        code: "Side Effects",
        code_description: "Physical effects of treatment that interfere with daily activities.",
    },
    Family {
        key: "efficacy",
        keywords: &["better", "helping", "breathe", "jump", "doubled"],
        name: "Uncertain Benefit of Dose Increase",
        revised_name: "Doubts About Treatment Efficacy",
        code: "Perceived Treatment Efficacy",
        code_description: "Whether the patient feels the treatment works.",
    },
    Family {
        key: "adherence",
        keywords: &["forget", "skip", "miss"],
        name: "Missed Doses Due to Forgetfulness",
        revised_name: "Difficulty Keeping to the Dosing Schedule",
        code: "Medication Adherence",
        code_description: "Taking doses as prescribed, and what gets in the way.",
    },
    Family {
        key: "faith",
        keywords: &["pray", "god", "church"],
        name: "Coping Through Religious Faith",
        revised_name: "Faith as Support Under Treatment Burden",
        code: "Religious Coping",
        code_description: "Faith and church support used to cope with illness and treatment.",
    },
    Family {
        key: "care",
        keywords: &["trust", "nurse", "nurses", "cared", "explains", "listens"],
        name: "Trust in a Supportive Care Team",
        revised_name: "Reliance on Doctors and Nurses",
        code: "Patient-Care Team Relationship",
        code_description: "How the patient relates to and relies on clinicians.",
    },
];

/// A transcript-specific script that overrides one family's output.
struct Profile {
    marker: &'static str,
    family: &'static str,
    name: &'static str,
    clues: &'static [&'static str],
    revised_name: &'static str,
    revised_clues: &'static [&'static str],
    revised_reasoning: &'static str,
}

const PROFILES: &[Profile] = &[Profile {
    marker: "this particular operation",
    family: "cost",
    name: "Medication Burden and Side Effects",
    clues: &[
        "the drugs are very expensive for this particular operation",
        "the doctor was really amazed he said this is very expensive",
        "certain drugs you need in the hospital, unless they refer you to another facility",
        "I went there for a major operation then I started to encounter another things... if you see behind my back so many rashes I went there and had encounter another sickness",
        "He said when I need you to take this it should be available, let it be available.",
    ],
    revised_name: "Medication Costs and Treatment Access",
    revised_clues: &[
        "the drugs are very expensive for this particular operation",
        "the doctor was really amazed he said this is very expensive",
        "certain drugs you need in the hospital, unless they refer you to another facility",
        "the time when I did this operation for my hernia in 2015 it costs le 500,000",
        "the woman gave me le 1,200,000 for the same operation",
    ],
    revised_reasoning: "Step 1: the patient says the drugs for the operation are very expensive and the doctor was amazed at the price. Step 2: some drugs are only available in the hospital unless the patient is referred elsewhere. Step 3: the price of the same operation rose from le 500,000 to le 1,200,000. Together these describe the cost of medication and access to treatment.",
}];

/// Scripted chat and embedding backend. Call counts are observable so tests
/// can assert that replay makes no backend calls.
#[derive(Debug, Default)]
pub struct ScriptedTransport {
    calls: AtomicUsize,
}

impl ScriptedTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for ScriptedTransport {
    fn post_json(&self, path: &str, body: &Value) -> Result<Value, TransportFailure> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match path {
            "chat/completions" => {
                let message = |role: &str| {
                    body.get("messages")
                        .and_then(Value::as_array)
                        .and_then(|m| m.iter().find(|x| x["role"] == role))
                        .and_then(|x| x["content"].as_str())
                        .unwrap_or_default()
                        .to_owned()
                };
                let seed = body.get("seed").and_then(Value::as_u64);
                let text = respond(&message("system"), &message("user"), seed);
                Ok(json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}))
            }
            "embeddings" => {
                let inputs = body
                    .get("input")
                    .and_then(Value::as_array)
                    .ok_or_else(|| TransportFailure::Status { code: 400, body: "missing input".into() })?;
                let data: Vec<Value> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| json!({"index": i, "embedding": hashed_embedding(t.as_str().unwrap_or_default())}))
                    .collect();
                Ok(json!({"data": data}))
            }
            other => Err(TransportFailure::Status { code: 404, body: format!("unknown path {other}") }),
        }
    }
}

/// Endpoint name under which the scripted backend is selected.
pub const SCRIPTED_ENDPOINT: &str = "scripted:";

/// A gateway over a fresh scripted backend. Replay mode never touches it.
pub fn scripted_gateway(mode: Mode, fixture_dir: Option<PathBuf>) -> Result<(Gateway, Arc<ScriptedTransport>), GatewayError> {
    let transport = Arc::new(ScriptedTransport::new());
    let cfg = GatewayConfig {
        endpoint_url: SCRIPTED_ENDPOINT.into(),
        credential: Some(Secret::new("scripted")),
        mode,
        fixture_dir,
        ..GatewayConfig::default()
    };
    let gateway = Gateway::with_transport(cfg, transport.clone())?;
    Ok((gateway, transport))
}

/// Hashed bag of words plus a constant bias axis, deliberately not unit length.
pub fn hashed_embedding(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; EMBEDDING_DIM];
    v[EMBEDDING_DIM - 1] = 0.25;
    for token in token_set(text) {
        let digest = Sha256::digest(token.as_bytes());
        let slot = usize::from(digest[0]) % (EMBEDDING_DIM - 1);
        let sign = if digest[1] & 1 == 0 { 1.0 } else { -1.0 };
        v[slot] += 2.0 * sign;
    }
    v
}

/// Answers one chat request by recognising which prompt it is.
pub fn respond(system: &str, user: &str, seed: Option<u64>) -> String {
    if user.contains("Your task is to identify important topics for the given interview.") {
        discovery(user)
    } else if user.contains("Previous output:") && user.contains("User feedback:") {
        feedback_refinement(user)
    } else if user.contains("identify ALL applicable topics") {
        identification(user, seed)
    } else if system.contains("extract key clues") {
        clue_map(user)
    } else if system.contains("clear and concise reasoning process") {
        reasoning_map(user)
    } else if system.contains("evaluation expert") {
        evaluation(user)
    } else if system.contains("part of an optimization system") {
        optimization(user)
    } else if system.contains("aggregate results effectively") {
        aggregation(user)
    } else if system.contains("developing a thematic codebook") {
        codebook(user)
    } else {
        "I can only help with the thematic analysis tasks I was set up for.".into()
    }
}

fn between<'a>(text: &'a str, start: &str, ends: &[&str]) -> &'a str {
    let Some(at) = text.rfind(start) else { return "" };
    let rest = &text[at + start.len()..];
    let end = ends.iter().filter_map(|e| rest.find(e)).min().unwrap_or(rest.len());
    &rest[..end]
}

fn dialogue_of(user: &str) -> &str {
    let Some(at) = user.find("Dialogue: ") else { return "" };
    let rest = &user[at + "Dialogue: ".len()..];
    let end = ["\n\nTopics:", "\n\nPrevious output:"].iter().filter_map(|e| rest.find(e)).min().unwrap_or(rest.len());
    &rest[..end]
}

/// Respondent sentences, verbatim, in order. Long sentences are cut to the
/// comma clause holding a keyword later on.
fn sentences(dialogue: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in dialogue.lines() {
        if line.starts_with("Interviewer:") {
            continue;
        }
        let text = line.strip_prefix("Respondent:").unwrap_or(line).trim();
        let mut start = 0;
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        for (i, &(pos, c)) in chars.iter().enumerate() {
            let at_end = i + 1 == chars.len();
            let boundary = matches!(c, '.' | '?' | '!') && (at_end || chars[i + 1].1 == ' ');
            if boundary || at_end {
                let end = if boundary { pos } else { pos + c.len_utf8() };
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s.to_owned());
                }
                start = pos + c.len_utf8();
            }
        }
    }
    out
}

fn mentions(text: &str, keywords: &[&str]) -> bool {
    let tokens = token_set(text);
    keywords.iter().any(|k| tokens.contains(*k))
}

fn clause_for(sentence: &str, keywords: &[&str]) -> String {
    if sentence.split_whitespace().count() <= 20 {
        return sentence.to_owned();
    }
    sentence
        .split(", ")
        .find(|c| mentions(c, keywords))
        .unwrap_or(sentence)
        .trim()
        .to_owned()
}

#[derive(Debug, Clone)]
struct Theme {
    name: String,
    clues: Vec<String>,
    pinned: bool,
}

fn profile_for(dialogue: &str) -> Option<&'static Profile> {
    PROFILES.iter().find(|p| dialogue.contains(p.marker))
}

fn themes(dialogue: &str) -> Vec<Theme> {
    let sents = sentences(dialogue);
    let profile = profile_for(dialogue);
    FAMILIES
        .iter()
        .filter_map(|family| {
            if let Some(p) = profile.filter(|p| p.family == family.key) {
                return Some(Theme {
                    name: p.name.into(),
                    clues: p.clues.iter().map(|c| c.to_string()).collect(),
                    pinned: true,
                });
            }
            let mut clues: Vec<String> = Vec::new();
            for s in sents.iter().filter(|s| mentions(s, family.keywords)) {
                let c = clause_for(s, family.keywords);
                if !clues.contains(&c) {
                    clues.push(c);
                }
            }
            (!clues.is_empty()).then(|| Theme {
                name: family.name.into(),
                clues,
                pinned: false,
            })
        })
        .collect()
}

fn family_of(name: &str, extra: &str) -> Option<&'static Family> {
    let key = normalize_text(name);
    for p in PROFILES {
        if key == normalize_text(p.name) || key == normalize_text(p.revised_name) {
            return FAMILIES.iter().find(|f| f.key == p.family);
        }
    }
    if let Some(f) = FAMILIES
        .iter()
        .find(|f| key == normalize_text(f.name) || key == normalize_text(f.revised_name) || key == normalize_text(f.code))
    {
        return Some(f);
    }
    let tokens = token_set(&format!("{name} {extra}"));
    FAMILIES
        .iter()
        .map(|f| (f.keywords.iter().filter(|k| tokens.contains(**k)).count(), f))
        .filter(|(n, _)| *n > 0)
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.key.cmp(a.1.key)))
        .map(|(_, f)| f)
}

fn plain_reasoning(theme: &Theme) -> String {
    format!("The patient's words point to {}.", theme.name.to_lowercase())
}

fn stepwise_reasoning(theme: &Theme) -> String {
    let steps: Vec<String> = theme
        .clues
        .iter()
        .take(3)
        .enumerate()
        .map(|(i, c)| format!("Step {}: the patient says \"{c}\"", i + 1))
        .collect();
    format!("{} → Step {}: together these show {}.", steps.join(" → "), steps.len() + 1, theme.name.to_lowercase())
}

fn discovery(user: &str) -> String {
    let blocks: Vec<RawTopic> = themes(dialogue_of(user))
        .into_iter()
        .map(|mut t| {
            t.clues.truncate(2);
            RawTopic {
                reasoning: plain_reasoning(&t),
                topic_name: t.name,
                clues: t.clues,
            }
        })
        .collect();
    if blocks.is_empty() {
        return "I could not find any topic in this dialogue.".into();
    }
    format_topic_blocks(&blocks)
}

fn improved_prompts(user: &str) -> bool {
    normalize_text(between(user, "Step 1 Extract CLUES:", &["\n\nStep 2"])).contains("direct quotes")
}

fn identification(user: &str, seed: Option<u64>) -> String {
    let improved = improved_prompts(user);
    let mut found = themes(dialogue_of(user));
    let s = seed.unwrap_or(0);
    if found.len() >= 3 && s % 3 != 0 {
        found.remove((s as usize) % found.len());
    }
    let cap = if improved { 4 } else { 2 } + (s % 3) as usize;
    let blocks: Vec<RawTopic> = found
        .into_iter()
        .map(|mut t| {
            if !t.pinned {
                t.clues.truncate(cap);
            }
            RawTopic {
                reasoning: if improved { stepwise_reasoning(&t) } else { plain_reasoning(&t) },
                topic_name: t.name,
                clues: t.clues,
            }
        })
        .collect();
    if blocks.is_empty() {
        return "No applicable topics were found in this dialogue.".into();
    }
    format!("<think>\nReading the dialogue for topics.\n</think>\n\n{}", format_topic_blocks(&blocks))
}

fn quoted_names(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (i, c) in text.char_indices() {
        match (c, open) {
            ('"' | '\u{201C}', None) => open = Some(i + c.len_utf8()),
            ('"' | '\u{201D}', Some(start)) => {
                out.push(text[start..i].to_owned());
                open = None;
            }
            _ => {}
        }
    }
    out
}

fn feedback_refinement(user: &str) -> String {
    let previous = between(user, "Previous output:\n\n", &["\n\nUser feedback: "]);
    let feedback = between(user, "User feedback: ", &["\n\nRevise the affected topics"]);
    let dialogue = dialogue_of(user);
    let Ok((topics, _)) = parse_topic_blocks(previous) else {
        return previous.to_owned();
    };
    let named: BTreeSet<String> = quoted_names(feedback).iter().map(|n| normalize_text(n)).collect();
    let fb = normalize_text(feedback);
    let revised: Vec<RawTopic> = topics
        .into_iter()
        .map(|t| {
            let key = normalize_text(&t.topic_name);
            let affected = named.contains(&key) || (named.is_empty() && fb.contains(&key));
            if !affected {
                return t;
            }
            if let Some(p) = PROFILES.iter().find(|p| normalize_text(p.name) == key && dialogue.contains(p.marker)) {
                return RawTopic {
                    topic_name: p.revised_name.into(),
                    clues: p.revised_clues.iter().map(|c| c.to_string()).collect(),
                    reasoning: p.revised_reasoning.into(),
                };
            }
            match family_of(&t.topic_name, &t.clues.join(" ")) {
                Some(f) => {
                    let theme = Theme { name: f.revised_name.into(), clues: t.clues.clone(), pinned: false };
                    RawTopic { reasoning: stepwise_reasoning(&theme), topic_name: theme.name, clues: t.clues }
                }
                None => t,
            }
        })
        .collect();
    format_topic_blocks(&revised)
}

fn clue_map(user: &str) -> String {
    let dialogue = dialogue_of(user);
    let improved = normalize_text(user.lines().next().unwrap_or_default()).contains("direct quotes");
    let found = themes(dialogue);
    let sents = sentences(dialogue);
    let topics = between(user, "Topics: ", &["\n\nOutput Format"]);
    topics
        .split(';')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|topic| {
            let mut clues: Vec<String> = match found.iter().find(|t| normalize_text(&t.name) == normalize_text(topic)) {
                Some(t) => t.clues.clone(),
                None => match family_of(topic, "") {
                    Some(f) => sents.iter().filter(|s| mentions(s, f.keywords)).map(|s| clause_for(s, f.keywords)).collect(),
                    None => Vec::new(),
                },
            };
            clues.truncate(if improved { 5 } else { 2 });
            let body = if clues.is_empty() {
                "(no supporting quote)".to_owned()
            } else {
                clues.iter().map(|c| format!("\"{c}\"")).collect::<Vec<_>>().join(" ")
            };
            format!("### {topic}: {body}")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn reasoning_map(user: &str) -> String {
    let improved = user.lines().next().is_some_and(|l| l.contains("Step"));
    let clues = between(user, "Clues: ", &["\nTopics: "]);
    let parsed = crate::protocol::parse_topic_keyed_map(clues).unwrap_or_default();
    let topics = between(user, "\nTopics: ", &["\nOutput Format"]);
    topics
        .split(';')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|topic| {
            let quotes = parsed.get(&normalize_text(topic)).map(|b| crate::protocol::split_quotes(b)).unwrap_or_default();
            let theme = Theme {
                name: topic.to_owned(),
                clues: quotes,
                pinned: false,
            };
            let text = if improved && !theme.clues.is_empty() { stepwise_reasoning(&theme) } else { plain_reasoning(&theme) };
            format!("### {topic}: {text}")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn evaluation(user: &str) -> String {
    let pairs = user.matches("Clues-Reasoning-Topic Pair ").count();
    let stepwise = user.matches("Step 1").count() >= pairs.max(1);
    let (clue_issue, reasoning_issue, clue_fix, reasoning_fix) = if stepwise {
        (
            "Some quotes repeat across topics.",
            "Steps are clear but sometimes restate the topic name.",
            "Ask for each quote to be used once.",
            "Ask each step to add new information.",
        )
    } else {
        (
            "Clues are short and often miss the cause, such as the amount paid or the number of pills.",
            "Reasoning restates the topic instead of linking each clue to it.",
            "Ask for verbatim quotes that include the cause and the effect.",
            "Ask for numbered steps that connect each clue to the topic.",
        )
    };
    format!(
        "<think>\nReviewing {pairs} pairs.\n</think>\n\nAggregate Feedback Task\n\n**Common Issues:**\n\n- **Clue Generation:** {clue_issue}\n- **Reasoning Generation:** {reasoning_issue}\n\n**Suggestions for Improvement:**\n\n- **Clue Prompt:** {clue_fix}\n- **Reasoning Prompt:** {reasoning_fix}"
    )
}

fn optimization(user: &str) -> String {
    let current = between(user, "****Current Clue Prompt:****", &["\n****Current Reasoning Prompt:****"]);
    let clue = if current.starts_with(OPTIMIZED_CLUE_PROMPT) {
        format!("{current}{FOLLOW_UP}")
    } else {
        OPTIMIZED_CLUE_PROMPT.to_owned()
    };
    format!(
        "<think>\nThe feedback asks for fuller quotes and stepwise reasoning.\n</think>\n\n<IMPROVED_CLUE_PROMPT>{clue}</IMPROVED_CLUE_PROMPT>\n\n<IMPROVED_REASONING_PROMPT>{OPTIMIZED_REASONING_PROMPT}</IMPROVED_REASONING_PROMPT>"
    )
}

fn aggregation(user: &str) -> String {
    let mut segments = Vec::new();
    let mut i = 1;
    let marker = |i: usize| format!("Output {i}: ");
    let Some(mut at) = user.find(&marker(1)) else { return String::new() };
    loop {
        let start = at + marker(i).len();
        match user[start..].find(&format!("\n\n{}", marker(i + 1))) {
            Some(rel) => {
                segments.push(&user[start..start + rel]);
                at = start + rel + 2;
                i += 1;
            }
            None => {
                segments.push(&user[start..]);
                break;
            }
        }
    }
    let mut merged: Vec<RawTopic> = Vec::new();
    for seg in segments {
        let Ok((topics, _)) = parse_topic_blocks(seg) else { continue };
        for t in topics {
            match merged.iter_mut().find(|m| normalize_text(&m.topic_name) == normalize_text(&t.topic_name)) {
                Some(m) => {
                    for c in t.clues {
                        if !m.clues.contains(&c) {
                            m.clues.push(c);
                        }
                    }
                }
                None => merged.push(t),
            }
        }
    }
    merged
        .iter()
        .map(|t| {
            let clues = t.clues.iter().map(|c| format!("- \"{c}\"")).collect::<Vec<_>>().join("\n");
            format!("Topic: {}\n\nClues (max 200 words):\n{clues}\n\nReasoning (max 150 words): {}\n", t.topic_name, t.reasoning)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn codebook(user: &str) -> String {
    let Some(at) = user.find("Input JSON: ") else { return "[]".into() };
    let mut stream = serde_json::Deserializer::from_str(&user[at + "Input JSON: ".len()..]).into_iter::<Value>();
    let Some(Ok(Value::Array(items))) = stream.next() else { return "[]".into() };
    let mut codes: Vec<(String, String, Vec<String>, Vec<String>)> = Vec::new();
    for item in &items {
        let topic = item["topic"].as_str().unwrap_or_default().to_owned();
        let clues: Vec<String> = item["clues"].as_array().into_iter().flatten().filter_map(|c| c.as_str().map(str::to_owned)).collect();
        let (code, description) = match family_of(&topic, &clues.join(" ")) {
            Some(f) => (f.code.to_owned(), f.code_description.to_owned()),
            None => (topic.clone(), item["reasoning"].as_str().unwrap_or_default().to_owned()),
        };
        match codes.iter_mut().find(|c| c.0 == code) {
            Some(entry) => {
                if !entry.2.iter().any(|t| normalize_text(t) == normalize_text(&topic)) {
                    entry.2.push(topic);
                }
                if entry.3.len() < 3 {
                    entry.3.extend(clues.into_iter().take(1));
                }
            }
            None => codes.push((code, description, vec![topic], clues.into_iter().take(2).collect())),
        }
    }
    let entries: Vec<Value> = codes
        .into_iter()
        .map(|(code_name, description, topics, clues)| {
            json!({"code_name": code_name, "description": description, "original_topics": topics, "representative_clues": clues})
        })
        .collect();
    format!("```json\n{}\n```", serde_json::to_string_pretty(&entries).expect("json values serialize"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ground_clue, Transcript};
    use crate::protocol::{render, template, TemplateId};

    fn operation_transcript() -> Transcript {
        let content = include_str!("../../../data/corpus/operation_costs.txt");
        crate::domain::parse_transcript(content, crate::domain::TranscriptFormat::SpeakerTaggedText, "operation_costs", "").unwrap()
    }

    #[test]
    fn every_scripted_quote_grounds() {
        let t = operation_transcript();
        for p in PROFILES {
            for q in p.clues.iter().chain(p.revised_clues) {
                assert!(ground_clue(&t, q).grounded, "{q}");
            }
        }
        for theme in themes(&t.dialogue()) {
            for q in &theme.clues {
                assert!(ground_clue(&t, q).grounded, "{q}");
            }
        }
    }

    #[test]
    fn identification_varies_with_seed_and_prompt() {
        let t = operation_transcript();
        let user = |clue: &str| {
            render(template(TemplateId::Identification), &[
                ("optimized_clue_prompt", clue),
                ("optimized_reasoning_prompt", "r"),
                ("dialogue", &t.dialogue()),
            ])
            .unwrap()
            .user
        };
        let v0 = user("List clues");
        let a = respond("", &v0, Some(0));
        let b = respond("", &v0, Some(1));
        assert_ne!(a, b);
        assert_ne!(a, respond("", &user(OPTIMIZED_CLUE_PROMPT), Some(0)));
        assert!(a.contains("Identify topic: Medication Burden and Side Effects"));
    }

    #[test]
    fn embeddings_are_deterministic_and_not_unit() {
        let v = hashed_embedding("cost of pills");
        assert_eq!(v, hashed_embedding("Cost of pills!"));
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() > 0.1);
    }

    #[test]
    fn unknown_prompt_gets_a_refusal() {
        assert!(respond("hello", "world", None).starts_with("I can only help"));
    }
}
