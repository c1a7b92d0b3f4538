//! Corpus-level drivers and the on-disk layout of run artifacts.

use std::path::{Path, PathBuf};

use crate::domain::{AnalysisRun, Transcript};
use crate::gateway::ChatModel;
use crate::thematizer::{thematize, ThematizeConfig, ThematizeError};

/// Thematizes every transcript (transcripts in parallel), in corpus order.
pub fn thematize_corpus(
    model: &dyn ChatModel,
    corpus: &[Transcript],
    cfg: &ThematizeConfig,
) -> Result<Vec<AnalysisRun>, ThematizeError> {
    if corpus.is_empty() {
        return Err(ThematizeError::Precondition("corpus is empty".into()));
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = corpus.iter().map(|t| scope.spawn(move || thematize(model, t, cfg))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("thematize thread panicked"))
            .collect()
    })
}

/// Directory name for one configuration, e.g. `v1_n3`.
pub fn variant_name(prompt_version: u32, n_runs: u32) -> String {
    format!("v{prompt_version}_n{n_runs}")
}

pub fn run_path(dir: &Path, transcript_id: &str) -> PathBuf {
    dir.join(format!("{transcript_id}.json"))
}

pub fn write_runs(dir: &Path, runs: &[AnalysisRun]) -> std::io::Result<()> {
    for run in runs {
        crate::write_json(&run_path(dir, &run.transcript_id), run)?;
    }
    Ok(())
}

/// Reads every `*.json` in `dir` as an [`AnalysisRun`], sorted by file name.
pub fn read_runs(dir: &Path) -> std::io::Result<Vec<AnalysisRun>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| crate::read_json(p)).collect()
}
