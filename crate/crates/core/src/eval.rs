//! Comparison against a reference standard: clue matching and set metrics,
//! embedding similarity of theme sets and codebooks, and corpus reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{grounding_rate, normalize_text, token_set, AnalysisRun, Codebook, CodebookEntry};
use crate::gateway::{EmbeddingVector, Embedder, GatewayError};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Score given to a pair where one normalized quote contains the other.
pub const CONTAINMENT_SCORE: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("threshold {0} is outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("embedding failed: {0}")]
    Embedding(#[from] GatewayError),
    #[error("embedder returned {got} vectors for {expected} texts")]
    EmbeddingCount { expected: usize, got: usize },
    #[error("no reference for transcript `{0}`")]
    MissingReference(String),
    #[error("cannot read or write {path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |e| EvalError::Io {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub model_index: usize,
    pub ref_index: usize,
    pub token_jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClueMatching {
    pub pairs: Vec<MatchedPair>,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClueMetrics {
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    #[default]
    Bidirectional,
    ForwardOnly,
}

/// Token-set Jaccard of the normalized quotes, raised to
/// [`CONTAINMENT_SCORE`] when one normalized quote is a whole-word substring
/// of the other.
pub fn pair_score(a: &str, b: &str) -> f64 {
    let (na, nb) = (normalize_text(a), normalize_text(b));
    if na.is_empty() || nb.is_empty() {
        return 0.0;
    }
    let (ta, tb) = (token_set(&na), token_set(&nb));
    let inter = ta.intersection(&tb).count();
    let union = ta.len() + tb.len() - inter;
    let jaccard = inter as f64 / union as f64;
    let (pa, pb) = (format!(" {na} "), format!(" {nb} "));
    if pa.contains(&pb) || pb.contains(&pa) {
        jaccard.max(CONTAINMENT_SCORE)
    } else {
        jaccard
    }
}

fn check_threshold(threshold: f64) -> Result<(), EvalError> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(EvalError::InvalidThreshold(threshold))
    }
}

/// Greedy one-to-one matching in descending score order. Ties go to the
/// lexicographically smaller normalized model quote, then reference quote, so
/// the result does not depend on list order; only identical quotes fall back
/// to the lower index.
pub fn match_clues<S: AsRef<str>, R: AsRef<str>>(model: &[S], reference: &[R], threshold: f64) -> Result<ClueMatching, EvalError> {
    check_threshold(threshold)?;
    let norm_model: Vec<String> = model.iter().map(|m| normalize_text(m.as_ref())).collect();
    let norm_ref: Vec<String> = reference.iter().map(|r| normalize_text(r.as_ref())).collect();
    let mut candidates = Vec::new();
    for (mi, m) in model.iter().enumerate() {
        for (ri, r) in reference.iter().enumerate() {
            let score = pair_score(m.as_ref(), r.as_ref());
            if score >= threshold {
                candidates.push(MatchedPair {
                    model_index: mi,
                    ref_index: ri,
                    token_jaccard: score,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.token_jaccard
            .total_cmp(&a.token_jaccard)
            .then_with(|| norm_model[a.model_index].cmp(&norm_model[b.model_index]))
            .then_with(|| norm_ref[a.ref_index].cmp(&norm_ref[b.ref_index]))
            .then(a.model_index.cmp(&b.model_index))
            .then(a.ref_index.cmp(&b.ref_index))
    });
    let mut used_model = vec![false; model.len()];
    let mut used_ref = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !used_model[c.model_index] && !used_ref[c.ref_index] {
            used_model[c.model_index] = true;
            used_ref[c.ref_index] = true;
            pairs.push(c);
        }
    }
    Ok(ClueMatching { pairs, threshold })
}

pub fn clue_metrics(m: &ClueMatching, n_model: usize, n_ref: usize) -> ClueMetrics {
    metrics_from_counts(m.pairs.len(), n_model, n_ref)
}

pub fn metrics_from_counts(k: usize, n_model: usize, n_ref: usize) -> ClueMetrics {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(k, n_model);
    let recall = ratio(k, n_ref);
    let union = n_model + n_ref - k.min(n_model + n_ref);
    let jaccard = if n_model == 0 && n_ref == 0 { 1.0 } else { ratio(k, union) };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClueMetrics {
        jaccard,
        precision,
        recall,
        f1,
    }
}

fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let dot = a.cosine(b);
    let na = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn best_match_mean(from: &[EmbeddingVector], to: &[EmbeddingVector]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|f| to.iter().map(|t| cosine(f, t).max(0.0)).fold(0.0, f64::max))
        .sum();
    total / from.len() as f64
}

/// Best-match averaging over two embedded sets. The forward direction averages,
/// over reference items, the best cosine to any model item.
pub fn set_similarity(model: &[EmbeddingVector], reference: &[EmbeddingVector], mode: SimilarityMode) -> Result<f64, EvalError> {
    if model.is_empty() {
        return Err(EvalError::EmptyInput("model set"));
    }
    if reference.is_empty() {
        return Err(EvalError::EmptyInput("reference set"));
    }
    let forward = best_match_mean(reference, model);
    let score = match mode {
        SimilarityMode::ForwardOnly => forward,
        SimilarityMode::Bidirectional => (forward + best_match_mean(model, reference)) / 2.0,
    };
    Ok(score.clamp(0.0, 1.0))
}

fn embed_all(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<EmbeddingVector>, EvalError> {
    let vectors = embedder.embed(texts)?;
    if vectors.len() != texts.len() {
        return Err(EvalError::EmbeddingCount {
            expected: texts.len(),
            got: vectors.len(),
        });
    }
    Ok(vectors)
}

pub fn theme_set_similarity(
    model_themes: &[String],
    ref_themes: &[String],
    embedder: &dyn Embedder,
    mode: SimilarityMode,
) -> Result<f64, EvalError> {
    if model_themes.is_empty() {
        return Err(EvalError::EmptyInput("model themes"));
    }
    if ref_themes.is_empty() {
        return Err(EvalError::EmptyInput("reference themes"));
    }
    let mut texts = model_themes.to_vec();
    texts.extend_from_slice(ref_themes);
    let vectors = embed_all(embedder, &texts)?;
    let (m, r) = vectors.split_at(model_themes.len());
    set_similarity(m, r, mode)
}

/// A model-side codebook, or a bare keyword list from a baseline topic model.
#[derive(Debug, Clone, Copy)]
pub enum CodebookSide<'a> {
    Codebook(&'a [CodebookEntry]),
    Keywords(&'a [String]),
}

impl CodebookSide<'_> {
    fn texts(&self) -> Vec<String> {
        match self {
            CodebookSide::Codebook(entries) => entries.iter().map(entry_text).collect(),
            CodebookSide::Keywords(words) => words.to_vec(),
        }
    }
}

pub fn entry_text(e: &CodebookEntry) -> String {
    format!("{}: {}", e.code_name, e.description)
}

pub fn codebook_similarity(
    model: CodebookSide<'_>,
    reference: &[CodebookEntry],
    embedder: &dyn Embedder,
    mode: SimilarityMode,
) -> Result<f64, EvalError> {
    let model_texts = model.texts();
    let ref_texts: Vec<String> = reference.iter().map(entry_text).collect();
    theme_set_similarity(&model_texts, &ref_texts, embedder, mode)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceInterview {
    pub id: String,
    pub clues: Vec<String>,
    pub themes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReferenceStandard {
    pub interviews: BTreeMap<String, ReferenceInterview>,
    pub codebook: Vec<CodebookEntry>,
}

impl ReferenceStandard {
    /// Reads every `*.json` except `reference_codebook.json` as an interview,
    /// plus `reference_codebook.json` itself.
    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let mut interviews = BTreeMap::new();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let codebook_path = dir.join("reference_codebook.json");
        for path in files.iter().filter(|p| **p != codebook_path) {
            let interview: ReferenceInterview = crate::read_json(path).map_err(io_err(path))?;
            interviews.insert(interview.id.clone(), interview);
        }
        let codebook = if codebook_path.exists() {
            let value: serde_json::Value = crate::read_json(&codebook_path).map_err(io_err(&codebook_path))?;
            let entries = value.get("entries").cloned().unwrap_or(value);
            serde_json::from_value(entries).map_err(|e| EvalError::Io {
                path: codebook_path.clone(),
                message: e.to_string(),
            })?
        } else {
            Vec::new()
        };
        Ok(ReferenceStandard { interviews, codebook })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterviewScores {
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub theme_cosine: f64,
    pub n_model: usize,
    pub n_ref: usize,
    pub matched: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub theme_cosine: f64,
}

/// How the numbers in a report were computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMethod {
    pub clue_overlap: String,
    pub threshold: f64,
    pub containment_score: f64,
    pub theme_similarity: SimilarityMode,
    pub negative_cosine: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: ReportMethod,
    pub per_interview: BTreeMap<String, InterviewScores>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroScores,
    pub codebook_cosine: Option<f64>,
    pub grounding_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    pub mode: SimilarityMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: DEFAULT_THRESHOLD,
            mode: SimilarityMode::Bidirectional,
        }
    }
}

/// Distinct clue quotes of the final records, in order of first appearance.
pub fn pooled_clues(run: &AnalysisRun) -> Vec<String> {
    let mut seen = BTreeSet::new();
    run.final_records()
        .iter()
        .flat_map(|r| r.clues.iter())
        .filter(|c| seen.insert(normalize_text(&c.quote)))
        .map(|c| c.quote.clone())
        .collect()
}

pub fn evaluate_interview(
    run: &AnalysisRun,
    reference: &ReferenceInterview,
    embedder: &dyn Embedder,
    opts: EvalOptions,
) -> Result<InterviewScores, EvalError> {
    let model_clues = pooled_clues(run);
    let matching = match_clues(&model_clues, &reference.clues, opts.threshold)?;
    let m = clue_metrics(&matching, model_clues.len(), reference.clues.len());
    let themes: Vec<String> = run.final_records().iter().map(|r| r.topic_name.clone()).collect();
    let theme_cosine = if themes.is_empty() || reference.themes.is_empty() {
        0.0
    } else {
        theme_set_similarity(&themes, &reference.themes, embedder, opts.mode)?
    };
    Ok(InterviewScores {
        jaccard: m.jaccard,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        theme_cosine,
        n_model: model_clues.len(),
        n_ref: reference.clues.len(),
        matched: matching.pairs.len(),
    })
}

pub fn macro_average(rows: &BTreeMap<String, InterviewScores>) -> MacroScores {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&InterviewScores) -> f64| rows.values().map(f).sum::<f64>() / n;
    MacroScores {
        jaccard: mean(|r| r.jaccard),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        theme_cosine: mean(|r| r.theme_cosine),
    }
}

pub fn evaluate_corpus(
    runs: &[AnalysisRun],
    reference: &ReferenceStandard,
    model_codebook: Option<&Codebook>,
    embedder: &dyn Embedder,
    opts: EvalOptions,
) -> Result<EvalReport, EvalError> {
    check_threshold(opts.threshold)?;
    if runs.is_empty() {
        return Err(EvalError::EmptyInput("runs"));
    }
    if let Some(missing) = runs.iter().find(|r| !reference.interviews.contains_key(&r.transcript_id)) {
        return Err(EvalError::MissingReference(missing.transcript_id.clone()));
    }
    let rows: Vec<Result<(String, InterviewScores), EvalError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = runs
            .iter()
            .map(|run| {
                let reference = &reference.interviews[&run.transcript_id];
                scope.spawn(move || Ok((run.transcript_id.clone(), evaluate_interview(run, reference, embedder, opts)?)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let per_interview: BTreeMap<String, InterviewScores> = rows.into_iter().collect::<Result<_, _>>()?;
    let codebook_cosine = match model_codebook {
        Some(cb) if !cb.entries.is_empty() && !reference.codebook.is_empty() => Some(codebook_similarity(
            CodebookSide::Codebook(&cb.entries),
            &reference.codebook,
            embedder,
            opts.mode,
        )?),
        _ => None,
    };
    let grounding = grounding_rate(runs.iter().flat_map(|r| r.final_records().iter())).unwrap_or(0.0);
    Ok(EvalReport {
        method: ReportMethod {
            clue_overlap: "token-set Jaccard of normalized quotes, greedy one-to-one matching".into(),
            threshold: opts.threshold,
            containment_score: CONTAINMENT_SCORE,
            theme_similarity: opts.mode,
            negative_cosine: "clamped to 0".into(),
            note: "clue overlap level (token, clue or character) is a modelling choice; scores depend on it".into(),
        },
        macro_avg: macro_average(&per_interview),
        per_interview,
        codebook_cosine,
        grounding_rate: grounding,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    id: &'a str,
    jaccard: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    theme_cosine: f64,
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (id, r) in &report.per_interview {
        w.serialize(CsvRow {
            id,
            jaccard: r.jaccard,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            theme_cosine: r.theme_cosine,
        })
        .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let json = dir.join("report.json");
    crate::write_json(&json, report).map_err(io_err(&json))?;
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, report_csv(report)).map_err(io_err(&csv_path))
}
