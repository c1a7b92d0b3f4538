//! Cross-transcript codebook generation with validation and repair.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{
    codebook_violations, normalize_text, token_set, AnalysisRun, Codebook, CodebookEntry, Violation,
};
use crate::gateway::{ChatModel, ChatRole, GatewayError};
use crate::protocol::{parse_codebook_json, render, template, ProtocolError, TemplateId};

const REPRESENTATIVE_CLUES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum CodebookError {
    #[error("invalid input: {0}")]
    Precondition(String),
    #[error("codebook model call failed: {0}")]
    Gateway(#[from] GatewayError),
    #[error("codebook response unusable after the repair round: {source}")]
    CodebookFailed {
        raw_response: String,
        #[source]
        source: ProtocolError,
    },
    #[error("cannot persist {path}: {message}")]
    Persist { path: String, message: String },
}

/// One distinct topic name across the corpus, with what the model saw for it.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTopic {
    pub name: String,
    pub reasoning: String,
    pub clues: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt_version: u32,
    pub transcript_ids: Vec<String>,
    pub repair_applied: bool,
}

/// The persisted form: the codebook plus its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookArtifact {
    #[serde(flatten)]
    pub codebook: Codebook,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltCodebook {
    pub codebook: Codebook,
    pub provenance: Provenance,
    pub raw_responses: Vec<String>,
    pub diagnostics: Vec<String>,
}

impl BuiltCodebook {
    pub fn artifact(&self) -> CodebookArtifact {
        CodebookArtifact {
            codebook: self.codebook.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Serialize)]
struct InputTriple<'a> {
    interview: &'a str,
    topic: &'a str,
    clues: Vec<&'a str>,
    reasoning: &'a str,
}

/// Serializes every final (topic, clues, reasoning) triple, sorted by
/// transcript id then topic name.
pub fn codebook_input_json(runs: &[AnalysisRun]) -> String {
    let mut triples: Vec<InputTriple> = runs
        .iter()
        .flat_map(|run| {
            run.final_records().iter().map(move |r| InputTriple {
                interview: &run.transcript_id,
                topic: &r.topic_name,
                clues: r.clues.iter().map(|c| c.quote.as_str()).collect(),
                reasoning: &r.reasoning,
            })
        })
        .collect();
    triples.sort_by(|a, b| (a.interview, a.topic).cmp(&(b.interview, b.topic)));
    serde_json::to_string_pretty(&triples).expect("triples serialize")
}

/// Distinct topics in input order. Topics sharing a normalized name merge,
/// keeping the first spelling and reasoning and pooling clues.
pub fn source_topics(runs: &[AnalysisRun]) -> Vec<SourceTopic> {
    let mut ordered: Vec<(&str, &crate::domain::TopicRecord)> = runs
        .iter()
        .flat_map(|run| run.final_records().iter().map(move |r| (run.transcript_id.as_str(), r)))
        .collect();
    ordered.sort_by(|a, b| (a.0, a.1.topic_name.as_str()).cmp(&(b.0, b.1.topic_name.as_str())));
    let mut out: Vec<SourceTopic> = Vec::new();
    for (_, record) in ordered {
        let key = normalize_text(&record.topic_name);
        let quotes = record.clues.iter().map(|c| c.quote.clone());
        match out.iter_mut().find(|s| normalize_text(&s.name) == key) {
            Some(existing) => {
                for q in quotes {
                    if !existing.clues.iter().any(|c| normalize_text(c) == normalize_text(&q)) {
                        existing.clues.push(q);
                    }
                }
            }
            None => out.push(SourceTopic {
                name: record.topic_name.clone(),
                reasoning: record.reasoning.clone(),
                clues: quotes.collect(),
            }),
        }
    }
    out
}

pub fn validate_codebook(cb: &Codebook) -> Vec<Violation> {
    cb.violations()
}

fn repair_message(original_user: &str, raw: &str, violations: &[Violation]) -> String {
    let listed = violations.iter().map(|v| format!("- {v}")).collect::<Vec<_>>().join("\n");
    format!(
        "{original_user}\n\nYour previous codebook:\n{raw}\n\nThese problems were found:\n{listed}\n\nThese topics are missing or duplicated; every original topic must belong to exactly one code. Return the corrected codebook as a JSON array of objects with the keys \"code_name\", \"description\", \"original_topics\" and \"representative_clues\", and nothing else."
    )
}

/// Runs the codebook prompt, one repair round if needed, then deterministic repair.
pub fn build_codebook(model: &dyn ChatModel, runs: &[AnalysisRun]) -> Result<BuiltCodebook, CodebookError> {
    if runs.is_empty() || runs.iter().all(|r| r.final_records().is_empty()) {
        return Err(CodebookError::Precondition("no topic records to cluster".into()));
    }
    let sources = source_topics(runs);
    let source_names: Vec<String> = sources.iter().map(|s| s.name.clone()).collect();
    let input = codebook_input_json(runs);
    let prompt = render(template(TemplateId::Codebook), &[("original_json", &input)])
        .map_err(|e| CodebookError::Precondition(e.to_string()))?;

    let mut transcript_ids: Vec<String> = runs.iter().map(|r| r.transcript_id.clone()).collect();
    transcript_ids.sort();
    transcript_ids.dedup();
    let mut provenance = Provenance {
        prompt_version: runs.iter().map(|r| r.prompt_version).max().unwrap_or(0),
        transcript_ids,
        repair_applied: false,
    };
    let mut diagnostics = Vec::new();

    let req = model.request(ChatRole::Worker, prompt.system.clone(), prompt.user.clone());
    let first_raw = model.chat(&req)?;
    let mut raw_responses = vec![first_raw.clone()];
    let first = parse_codebook_json(&first_raw);
    let first_violations = match &first {
        Ok(entries) => codebook_violations(entries, &source_names),
        Err(e) => {
            diagnostics.push(format!("first codebook response unusable: {e}"));
            Vec::new()
        }
    };

    let entries = if matches!(first, Ok(_)) && first_violations.is_empty() {
        first.expect("checked ok")
    } else {
        provenance.repair_applied = true;
        let reported: Vec<Violation> = match &first {
            Ok(_) => first_violations,
            Err(_) => Vec::new(),
        };
        let user = match &first {
            Ok(_) => repair_message(&prompt.user, &first_raw, &reported),
            Err(e) => format!(
                "{}\n\nYour previous reply could not be read as a codebook ({e}). Every original topic must belong to exactly one code. Return only the JSON array.",
                prompt.user
            ),
        };
        let req = model.request(ChatRole::Worker, prompt.system.clone(), user);
        let second_raw = model.chat(&req)?;
        raw_responses.push(second_raw.clone());
        match (parse_codebook_json(&second_raw), first) {
            (Ok(entries), _) => entries,
            (Err(e), Ok(entries)) => {
                diagnostics.push(format!("repair response unusable ({e}); repairing the first response"));
                entries
            }
            (Err(source), Err(_)) => {
                return Err(CodebookError::CodebookFailed {
                    raw_response: second_raw,
                    source,
                })
            }
        }
    };

    let (entries, repair_notes) = repair_codebook(entries, &sources);
    if repair_notes.iter().any(|n| !n.starts_with("representative clue")) {
        provenance.repair_applied = true;
    }
    diagnostics.extend(repair_notes);
    let codebook = Codebook {
        entries,
        source_topic_names: source_names,
    };
    debug_assert!(codebook.violations().is_empty());
    Ok(BuiltCodebook {
        codebook,
        provenance,
        raw_responses,
        diagnostics,
    })
}

fn overlap(code_name: &str, topic: &str) -> usize {
    token_set(code_name).intersection(&token_set(topic)).count()
}

/// Forces exclusivity: topics are mapped onto source names (unknown ones
/// dropped), same-named codes merged, duplicated topics kept in the code
/// whose name shares the most tokens with them (first code on ties), empty
/// codes dropped and missing topics given singleton codes. Representative
/// clues are restricted to clues of the member topics.
pub fn repair_codebook(entries: Vec<CodebookEntry>, sources: &[SourceTopic]) -> (Vec<CodebookEntry>, Vec<String>) {
    let mut notes = Vec::new();
    let by_key: BTreeMap<String, usize> = sources
        .iter()
        .enumerate()
        .rev()
        .map(|(i, s)| (normalize_text(&s.name), i))
        .collect();

    // Canonical topic indices per entry, then merge same-named entries.
    let mut merged: Vec<(CodebookEntry, Vec<usize>)> = Vec::new();
    for mut entry in entries {
        if normalize_text(&entry.code_name).is_empty() {
            entry.code_name = entry.original_topics.first().cloned().unwrap_or_default();
        }
        let mut members = Vec::new();
        for topic in &entry.original_topics {
            match by_key.get(&normalize_text(topic)) {
                Some(&i) if !members.contains(&i) => members.push(i),
                Some(_) => {}
                None => notes.push(format!("dropped unknown topic `{topic}` from code `{}`", entry.code_name)),
            }
        }
        let key = normalize_text(&entry.code_name);
        match merged.iter_mut().find(|(e, _)| normalize_text(&e.code_name) == key) {
            Some((existing, existing_members)) => {
                notes.push(format!("merged codes sharing the name `{}`", existing.code_name));
                for m in members {
                    if !existing_members.contains(&m) {
                        existing_members.push(m);
                    }
                }
                existing.representative_clues.extend(entry.representative_clues);
            }
            None => merged.push((entry, members)),
        }
    }

    for (i, source) in sources.iter().enumerate() {
        let holders: Vec<usize> = (0..merged.len()).filter(|&e| merged[e].1.contains(&i)).collect();
        if holders.len() > 1 {
            let keep = holders
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    overlap(&merged[a].0.code_name, &source.name)
                        .cmp(&overlap(&merged[b].0.code_name, &source.name))
                        .then(b.cmp(&a))
                })
                .expect("at least two holders");
            for &e in &holders {
                if e != keep {
                    merged[e].1.retain(|&m| m != i);
                }
            }
            notes.push(format!("kept duplicated topic `{}` only in code `{}`", source.name, merged[keep].0.code_name));
        }
    }

    let before = merged.len();
    merged.retain(|(_, members)| !members.is_empty());
    if merged.len() < before {
        notes.push(format!("dropped {} code(s) left without topics", before - merged.len()));
    }

    for (i, source) in sources.iter().enumerate() {
        if merged.iter().any(|(_, m)| m.contains(&i)) {
            continue;
        }
        let key = normalize_text(&source.name);
        if let Some((entry, members)) = merged.iter_mut().find(|(e, _)| normalize_text(&e.code_name) == key) {
            members.push(i);
            notes.push(format!("added missing topic `{}` to the code of the same name", entry.code_name));
        } else {
            notes.push(format!("added missing topic `{}` as its own code", source.name));
            merged.push((
                CodebookEntry {
                    code_name: source.name.clone(),
                    description: source.reasoning.clone(),
                    original_topics: Vec::new(),
                    representative_clues: source.clues.iter().take(REPRESENTATIVE_CLUES).cloned().collect(),
                },
                vec![i],
            ));
        }
    }

    let entries = merged
        .into_iter()
        .map(|(mut entry, members)| {
            entry.original_topics = members.iter().map(|&i| sources[i].name.clone()).collect();
            let pool: Vec<&String> = members.iter().flat_map(|&i| sources[i].clues.iter()).collect();
            let mut kept: Vec<String> = Vec::new();
            for clue in &entry.representative_clues {
                let key = normalize_text(clue);
                match pool.iter().find(|p| normalize_text(p) == key) {
                    Some(p) if !kept.contains(p) => kept.push((*p).clone()),
                    Some(_) => {}
                    None => notes.push(format!(
                        "representative clue dropped from `{}`: not a clue of its topics",
                        entry.code_name
                    )),
                }
            }
            if kept.is_empty() {
                kept = first_clues(&members, sources);
            }
            entry.representative_clues = kept;
            entry
        })
        .collect();
    (entries, notes)
}

/// Up to three clues, taking each member topic's clues in turn.
fn first_clues(members: &[usize], sources: &[SourceTopic]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let depth = members.iter().map(|&i| sources[i].clues.len()).max().unwrap_or(0);
    for d in 0..depth {
        for &i in members {
            if out.len() == REPRESENTATIVE_CLUES {
                return out;
            }
            if let Some(c) = sources[i].clues.get(d) {
                if !out.contains(c) {
                    out.push(c.clone());
                }
            }
        }
    }
    out
}

pub fn write_codebook(path: &Path, built: &BuiltCodebook) -> Result<(), CodebookError> {
    crate::write_json(path, &built.artifact()).map_err(|e| CodebookError::Persist {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_codebook(path: &Path) -> Result<CodebookArtifact, CodebookError> {
    crate::read_json(path).map_err(|e| CodebookError::Persist {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Clue, TopicRecord};
    use crate::gateway::ChatRequest;
    use proptest::prelude::*;
    use std::sync::Mutex;

    struct Replies(Mutex<Vec<String>>, Mutex<Vec<ChatRequest>>);

    impl Replies {
        fn new(r: &[&str]) -> Self {
            Replies(Mutex::new(r.iter().map(|s| s.to_string()).collect()), Mutex::new(Vec::new()))
        }
    }

    impl ChatModel for Replies {
        fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
            self.1.lock().unwrap().push(req.clone());
            let mut r = self.0.lock().unwrap();
            if r.is_empty() {
                Err(GatewayError::EmptyResponse)
            } else {
                Ok(r.remove(0))
            }
        }
    }

    fn run(id: &str, topics: &[(&str, &[&str])]) -> AnalysisRun {
        AnalysisRun {
            transcript_id: id.into(),
            prompt_version: 1,
            n_runs: 3,
            run_outputs: vec![],
            aggregated: topics
                .iter()
                .map(|(name, clues)| {
                    TopicRecord::new(*name, clues.iter().map(|c| Clue::ungrounded(*c)).collect(), format!("why {name}")).unwrap()
                })
                .collect(),
            feedback_rounds: vec![],
            partial: false,
            grounding_rate: None,
            diagnostics: vec![],
        }
    }

    fn burden_runs() -> Vec<AnalysisRun> {
        vec![
            run("11", &[("Medication Burden", &["so many pills"]), ("Cost Concerns", &["it is expensive"])]),
            run("12", &[("Perception of Medication Burden", &["too much medicine"])]),
            run("13", &[("Medication Burden and Complexity", &["hard to keep track"])]),
        ]
    }

    const MERGED: &str = r#"```json
[{"code_name": "Medication Burden", "description": "load of taking medicines",
  "original_topics": ["Medication Burden", "Perception of Medication Burden", "Medication Burden and Complexity"],
  "representative_clues": ["so many pills", "too much medicine"]},
 {"code_name": "Financial Impact", "description": "cost", "original_topics": ["Cost Concerns"], "representative_clues": ["it is expensive"]}]
```"#;

    #[test]
    fn merges_burden_topics_in_one_call() {
        let model = Replies::new(&[MERGED]);
        let built = build_codebook(&model, &burden_runs()).unwrap();
        assert_eq!(built.codebook.entries.len(), 2);
        assert_eq!(built.codebook.entries[0].code_name, "Medication Burden");
        assert_eq!(built.codebook.entries[0].original_topics.len(), 3);
        assert!(built.codebook.violations().is_empty());
        assert!(!built.provenance.repair_applied);
        assert_eq!(built.provenance.transcript_ids, ["11", "12", "13"]);
        let seen = model.1.lock().unwrap();
        assert_eq!(seen.len(), 1);
        assert_eq!(seen[0].role, ChatRole::Worker);
        assert!(seen[0].user.contains("\"interview\": \"11\""));
    }

    #[test]
    fn input_is_sorted() {
        let mut runs = burden_runs();
        runs.reverse();
        let json: serde_json::Value = serde_json::from_str(&codebook_input_json(&runs)).unwrap();
        let keys: Vec<(String, String)> = json
            .as_array()
            .unwrap()
            .iter()
            .map(|e| (e["interview"].as_str().unwrap().into(), e["topic"].as_str().unwrap().into()))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(keys[0], ("11".to_string(), "Cost Concerns".to_string()));
    }

    #[test]
    fn single_topic_gives_one_entry() {
        let model = Replies::new(&[r#"[{"code_name": "Cost", "description": "d", "original_topics": ["Cost Concerns"]}]"#]);
        let built = build_codebook(&model, &[run("1", &[("Cost Concerns", &["pricey"])])]).unwrap();
        assert_eq!(built.codebook.entries.len(), 1);
        assert_eq!(built.codebook.entries[0].representative_clues, ["pricey"]);
    }

    #[test]
    fn missing_topic_becomes_singleton_after_failed_repair() {
        let lossy = r#"[{"code_name": "Medication Burden", "description": "d", "original_topics": ["Medication Burden", "Perception of Medication Burden", "Medication Burden and Complexity"]}]"#;
        let model = Replies::new(&[lossy, lossy]);
        let built = build_codebook(&model, &burden_runs()).unwrap();
        assert!(built.provenance.repair_applied);
        let single = built.codebook.entries.iter().find(|e| e.code_name == "Cost Concerns").unwrap();
        assert_eq!(single.original_topics, ["Cost Concerns"]);
        assert_eq!(single.description, "why Cost Concerns");
        assert_eq!(single.representative_clues, ["it is expensive"]);
        assert!(built.codebook.violations().is_empty());
        let seen = model.1.lock().unwrap();
        assert!(seen[1].user.contains("topic \"Cost Concerns\" is missing from every code"));
        assert!(seen[1].user.contains("every original topic must belong to exactly one code"));
    }

    #[test]
    fn repair_round_can_fix_it() {
        let lossy = r#"[{"code_name": "Medication Burden", "description": "d", "original_topics": ["Medication Burden"]}]"#;
        let model = Replies::new(&[lossy, MERGED]);
        let built = build_codebook(&model, &burden_runs()).unwrap();
        assert_eq!(built.codebook.entries.len(), 2);
        assert_eq!(built.raw_responses.len(), 2);
    }

    #[test]
    fn duplicated_topic_goes_to_best_overlap() {
        let sources: Vec<SourceTopic> = ["Cost of drugs", "Fatigue"]
            .iter()
            .map(|n| SourceTopic { name: n.to_string(), reasoning: "r".into(), clues: vec![format!("{n} clue")] })
            .collect();
        let entry = |name: &str, topics: &[&str]| CodebookEntry {
            code_name: name.into(),
            description: "d".into(),
            original_topics: topics.iter().map(|s| s.to_string()).collect(),
            representative_clues: vec!["invented".into()],
        };
        let (entries, _) = repair_codebook(
            vec![entry("Tiredness", &["Fatigue", "cost of drugs"]), entry("Drug Cost", &["Cost of drugs"])],
            &sources,
        );
        assert_eq!(entries[0].original_topics, ["Fatigue"]);
        assert_eq!(entries[1].original_topics, ["Cost of drugs"]);
        assert_eq!(entries[1].representative_clues, ["Cost of drugs clue"]);

        let (tie, _) = repair_codebook(vec![entry("A", &["Fatigue"]), entry("B", &["Fatigue"])], &sources);
        assert_eq!(tie[0].original_topics, ["Fatigue"]);
        assert_eq!(tie.len(), 2);
        assert_eq!(tie[1].code_name, "Cost of drugs");
    }

    #[test]
    fn unusable_twice_fails_with_raw() {
        let model = Replies::new(&["no json here", "still nothing"]);
        match build_codebook(&model, &burden_runs()) {
            Err(CodebookError::CodebookFailed { raw_response, .. }) => assert_eq!(raw_response, "still nothing"),
            other => panic!("unexpected {other:?}"),
        }
        let model = Replies::new(&[lossy_dupes(), "garbage"]);
        assert!(build_codebook(&model, &burden_runs()).unwrap().codebook.violations().is_empty());
        assert!(build_codebook(&Replies::new(&[]), &[]).is_err());
    }

    fn lossy_dupes() -> &'static str {
        r#"[{"code_name": "X", "description": "d", "original_topics": ["Cost Concerns", "Medication Burden"]},
            {"code_name": "x", "description": "d", "original_topics": ["Cost Concerns", "Imaginary"]}]"#
    }

    #[test]
    fn artifact_round_trips() {
        let built = build_codebook(&Replies::new(&[MERGED]), &burden_runs()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codebook.json");
        write_codebook(&path, &built).unwrap();
        let back = read_codebook(&path).unwrap();
        assert_eq!(back, built.artifact());
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert!(raw["entries"].is_array());
        assert_eq!(raw["provenance"]["repair_applied"], false);
    }

    proptest! {
        #[test]
        fn repair_always_yields_exclusive_codebook(
            n_sources in 1usize..8,
            picks in prop::collection::vec((0usize..5, prop::collection::vec(0usize..10, 0..6)), 0..7),
        ) {
            let sources: Vec<SourceTopic> = (0..n_sources)
                .map(|i| SourceTopic { name: format!("Topic {i}"), reasoning: "r".into(), clues: vec![format!("clue {i}")] })
                .collect();
            let entries: Vec<CodebookEntry> = picks
                .iter()
                .map(|(name, topics)| CodebookEntry {
                    code_name: format!("Code {name}"),
                    description: "d".into(),
                    original_topics: topics.iter().map(|t| format!("topic {t}")).collect(),
                    representative_clues: topics.iter().map(|t| format!("clue {t}")).collect(),
                })
                .collect();
            let (repaired, _) = repair_codebook(entries, &sources);
            let names: Vec<String> = sources.iter().map(|s| s.name.clone()).collect();
            prop_assert!(codebook_violations(&repaired, &names).is_empty());
            prop_assert!(repaired.len() <= n_sources);
            for e in &repaired {
                let pool: Vec<String> = e.original_topics.iter()
                    .flat_map(|t| sources.iter().filter(move |s| &s.name == t).flat_map(|s| s.clues.clone()))
                    .collect();
                prop_assert!(e.representative_clues.iter().all(|c| pool.contains(c)));
            }
        }
    }
}
