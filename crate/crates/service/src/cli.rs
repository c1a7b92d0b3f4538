//! Command line: one subcommand per pipeline stage plus the HTTP service.
//!
//! Settings resolve in the order defaults, `--config` file, environment
//! (`THEMATIC_ENDPOINT`, `THEMATIC_API_KEY`), flags.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thematic_core::codebook::{build_codebook, read_codebook, write_codebook};
use thematic_core::domain::{ingest_transcript, load_corpus, PromptPair, Transcript, TranscriptFormat};
use thematic_core::eval::{evaluate_corpus, write_report, EvalOptions, ReferenceStandard, SimilarityMode, DEFAULT_THRESHOLD};
use thematic_core::gateway::{ChatModel, Gateway, GatewayConfig, GatewayError, Mode, Secret};
use thematic_core::instructor::{load_prompt, prompt_path, run_refinement, RefinementConfig};
use thematic_core::pipeline::{read_runs, thematize_corpus, variant_name, write_runs};
use thematic_core::synthetic::{ScriptedTransport, SCRIPTED_ENDPOINT};
use thematic_core::thematizer::ThematizeConfig;

use crate::http::{serve, AppState};
use crate::session::{ModelFactory, ServiceConfig, SessionManager};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

fn fail(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

fn config_error(e: GatewayError) -> CliError {
    match e {
        GatewayError::Config(m) => CliError::Usage(m),
        other => fail(other),
    }
}

#[derive(Debug, Parser)]
#[command(name = "thematic", version, about = "Multi-agent thematic analysis of interview transcripts")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON settings file; field names mirror the flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Gateway mode: live, record or replay.
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    #[arg(long, global = true)]
    pub fixture_dir: Option<PathBuf>,
    /// OpenAI-compatible base URL, or `scripted:` for the built-in scripted backend.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Iteratively optimize the clue and reasoning prompts.
    Instruct(InstructArgs),
    /// Identify themes for a corpus or a single transcript.
    Thematize(ThematizeArgs),
    /// Cluster thematized topics into a codebook.
    Codebook(CodebookArgs),
    /// Score runs against a reference standard.
    Evaluate(EvaluateArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
    /// Run another subcommand in record mode.
    RecordFixtures(RecordArgs),
    /// Regenerate the bundled fixture pack and artifacts with the scripted backend.
    RecordBundle(BundleArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InstructArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub sample_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ThematizeArgs {
    #[arg(long, conflicts_with = "transcript")]
    pub corpus: Option<PathBuf>,
    /// A single transcript file instead of a corpus.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<TranscriptFormat>,
    #[arg(long)]
    pub n_runs: Option<u32>,
    /// 0 selects the initial prompts; higher versions are read from --prompt-dir.
    #[arg(long)]
    pub prompt_version: Option<u32>,
    /// Output directory of `instruct`.
    #[arg(long)]
    pub prompt_dir: Option<PathBuf>,
    /// Defaults to `runs/v{version}_n{n_runs}`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CodebookArgs {
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Reference-to-model best matches only.
    #[arg(long)]
    pub forward_only: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long)]
    pub prompt_dir: Option<PathBuf>,
    #[arg(long)]
    pub prompt_version: Option<u32>,
    #[arg(long)]
    pub n_runs: Option<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct RecordArgs {
    /// The subcommand and its flags.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, required = true)]
    pub args: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct BundleArgs {
    #[arg(long, default_value = "data/corpus")]
    pub corpus: PathBuf,
    #[arg(long, default_value = "data/references")]
    pub references: PathBuf,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub gateway: Option<GatewayConfig>,
    pub mode: Option<Mode>,
    pub fixture_dir: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub api_key: Option<Secret>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub iterations: Option<usize>,
    pub sample_size: Option<usize>,
    pub seed: Option<u64>,
    pub n_runs: Option<u32>,
    pub prompt_version: Option<u32>,
    pub prompt_dir: Option<PathBuf>,
    pub runs: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub codebook: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub forward_only: Option<bool>,
    pub port: Option<u16>,
    pub host: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    init_tracing();
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("THEMATIC_LOG").unwrap_or_else(|_| "warn".into());
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.global.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let ctx = Context { global: cli.global, file };
    match cli.command {
        Command::Instruct(a) => instruct(&ctx, a),
        Command::Thematize(a) => thematize(&ctx, a),
        Command::Codebook(a) => codebook(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Serve(a) => serve_cmd(&ctx, a),
        Command::RecordFixtures(a) => record_fixtures(ctx, a),
        Command::RecordBundle(a) => {
            let summary = crate::scenario::record_bundle(&a.corpus, &a.references, &a.out)?;
            println!("{summary}");
            Ok(())
        }
    }
}

struct Context {
    global: GlobalArgs,
    file: FileConfig,
}

impl Context {
    fn gateway_config(&self) -> GatewayConfig {
        let mut cfg = self.file.gateway.clone().unwrap_or_default();
        if let Some(e) = &self.file.endpoint {
            cfg.endpoint_url = e.clone();
        }
        if let Some(k) = &self.file.api_key {
            cfg.credential = Some(k.clone());
        }
        if let Some(m) = self.file.mode {
            cfg.mode = m;
        }
        if let Some(d) = &self.file.fixture_dir {
            cfg.fixture_dir = Some(d.clone());
        }
        cfg.apply_env();
        if let Some(e) = &self.global.endpoint {
            cfg.endpoint_url = e.clone();
        }
        if let Some(m) = self.global.mode {
            cfg.mode = m;
        }
        if let Some(d) = &self.global.fixture_dir {
            cfg.fixture_dir = Some(d.clone());
        }
        cfg
    }

    fn gateway(&self) -> Result<Gateway, CliError> {
        build_gateway(self.gateway_config()).map_err(config_error)
    }
}

/// Builds a gateway, selecting the scripted backend for `scripted:`.
pub fn build_gateway(mut cfg: GatewayConfig) -> Result<Gateway, GatewayError> {
    if cfg.endpoint_url == SCRIPTED_ENDPOINT {
        if cfg.credential.is_none() {
            cfg.credential = Some(Secret::new("scripted"));
        }
        Gateway::with_transport(cfg, Arc::new(ScriptedTransport::new()))
    } else {
        Gateway::new(cfg)
    }
}

fn pick<T: Clone>(flag: Option<T>, file: &Option<T>, default: T) -> T {
    flag.or_else(|| file.clone()).unwrap_or(default)
}

fn load_corpus_at(path: &Path) -> Result<Vec<Transcript>, CliError> {
    load_corpus(path).map_err(|e| CliError::Usage(format!("cannot load corpus {}: {e}", path.display())))
}

/// Resolves the prompt pair for a version: 0 is the initial pair.
pub fn resolve_prompts(prompt_dir: Option<&Path>, version: u32) -> Result<PromptPair, CliError> {
    if version == 0 {
        return Ok(PromptPair::initial());
    }
    let dir = prompt_dir.ok_or_else(|| CliError::Usage(format!("--prompt-dir is required for prompt version {version}")))?;
    if !prompt_path(dir, version).is_file() {
        return Err(CliError::Usage(format!(
            "no prompt version {version} in {}",
            dir.display()
        )));
    }
    load_prompt(dir, version).map_err(fail)
}

/// Highest prompt version persisted under `dir`, or 0.
pub fn latest_prompt_version(dir: &Path) -> u32 {
    (1..).take_while(|v| prompt_path(dir, *v).is_file()).last().unwrap_or(0)
}

fn instruct(ctx: &Context, a: InstructArgs) -> Result<(), CliError> {
    let f = &ctx.file;
    let corpus = load_corpus_at(&pick(a.corpus, &f.corpus, PathBuf::from("data/corpus")))?;
    let out = pick(a.out, &f.out, PathBuf::from("instruct"));
    let defaults = RefinementConfig::default();
    let cfg = RefinementConfig {
        iterations: pick(a.iterations, &f.iterations, defaults.iterations),
        sample_size: pick(a.sample_size, &f.sample_size, defaults.sample_size),
        seed: pick(a.seed, &f.seed, defaults.seed),
        ..defaults
    };
    let gw = ctx.gateway()?;
    let trace = run_refinement(&gw, &corpus, &cfg, Some(&out)).map_err(fail)?;
    println!(
        "prompt version {} written to {}",
        trace.active().version,
        prompt_path(&out, trace.active().version).display()
    );
    Ok(())
}

fn thematize(ctx: &Context, a: ThematizeArgs) -> Result<(), CliError> {
    let f = &ctx.file;
    let n_runs = pick(a.n_runs, &f.n_runs, 3);
    if n_runs == 0 {
        return Err(CliError::Usage("--n-runs must be at least 1".into()));
    }
    let prompt_dir = a.prompt_dir.or_else(|| f.prompt_dir.clone());
    let version = a
        .prompt_version
        .or(f.prompt_version)
        .unwrap_or_else(|| prompt_dir.as_deref().map(latest_prompt_version).unwrap_or(0));
    let pair = resolve_prompts(prompt_dir.as_deref(), version)?;
    let corpus = match &a.transcript {
        Some(path) => {
            let format = a.format.unwrap_or_else(|| {
                TranscriptFormat::detect(Some(path), &std::fs::read_to_string(path).unwrap_or_default())
            });
            vec![ingest_transcript(path, format).map_err(|e| CliError::Usage(e.to_string()))?]
        }
        None => load_corpus_at(&pick(a.corpus, &f.corpus, PathBuf::from("data/corpus")))?,
    };
    let out = pick(a.out, &f.out, Path::new("runs").join(variant_name(version, n_runs)));
    let gw = ctx.gateway()?;
    let runs = thematize_corpus(&gw, &corpus, &ThematizeConfig::new(n_runs, pair)).map_err(fail)?;
    write_runs(&out, &runs).map_err(fail)?;
    for run in &runs {
        let rate = run.grounding_rate.map(|g| format!("{g:.3}")).unwrap_or_else(|| "n/a".into());
        println!("{}: {} topics, grounding {rate}", run.transcript_id, run.final_records().len());
    }
    Ok(())
}

fn codebook(ctx: &Context, a: CodebookArgs) -> Result<(), CliError> {
    let f = &ctx.file;
    let runs_dir = pick(a.runs, &f.runs, Path::new("runs").join(variant_name(1, 3)));
    let runs = read_runs(&runs_dir).map_err(|e| CliError::Usage(format!("cannot read runs in {}: {e}", runs_dir.display())))?;
    let out = pick(a.out, &f.codebook, PathBuf::from("codebook.json"));
    let gw = ctx.gateway()?;
    let built = build_codebook(&gw, &runs).map_err(fail)?;
    write_codebook(&out, &built).map_err(fail)?;
    println!("{} codes written to {}", built.codebook.entries.len(), out.display());
    Ok(())
}

fn evaluate(ctx: &Context, a: EvaluateArgs) -> Result<(), CliError> {
    let f = &ctx.file;
    let runs_dir = pick(a.runs, &f.runs, Path::new("runs").join(variant_name(1, 3)));
    let runs = read_runs(&runs_dir).map_err(|e| CliError::Usage(format!("cannot read runs in {}: {e}", runs_dir.display())))?;
    let reference_dir = pick(a.reference, &f.reference, PathBuf::from("data/references"));
    let reference = ReferenceStandard::load(&reference_dir).map_err(|e| CliError::Usage(e.to_string()))?;
    let codebook = match a.codebook.or_else(|| f.codebook.clone()) {
        Some(p) => Some(read_codebook(&p).map_err(|e| CliError::Usage(e.to_string()))?.codebook),
        None => None,
    };
    let threshold = pick(a.threshold, &f.threshold, DEFAULT_THRESHOLD);
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(CliError::Usage(format!("--threshold must be in (0, 1], got {threshold}")));
    }
    let forward = a.forward_only || f.forward_only.unwrap_or(false);
    let opts = EvalOptions {
        threshold,
        mode: if forward { SimilarityMode::ForwardOnly } else { SimilarityMode::Bidirectional },
    };
    let out = pick(a.out, &f.out, PathBuf::from("report"));
    let gw = ctx.gateway()?;
    let report = evaluate_corpus(&runs, &reference, codebook.as_ref(), &gw, opts).map_err(fail)?;
    write_report(&out, &report).map_err(fail)?;
    let m = &report.macro_avg;
    println!(
        "macro: jaccard {:.4} precision {:.4} recall {:.4} f1 {:.4} theme cosine {:.4}",
        m.jaccard, m.precision, m.recall, m.f1, m.theme_cosine
    );
    println!("report written to {}", out.join("report.json").display());
    Ok(())
}

fn serve_cmd(ctx: &Context, a: ServeArgs) -> Result<(), CliError> {
    let f = &ctx.file;
    let gw_cfg = ctx.gateway_config();
    let require_credential = gw_cfg.mode == Mode::Live && gw_cfg.credential.is_none() && gw_cfg.endpoint_url != SCRIPTED_ENDPOINT;
    let shared: Option<Arc<dyn ChatModel>> = if require_credential {
        None
    } else {
        Some(Arc::new(build_gateway(gw_cfg.clone()).map_err(config_error)?))
    };
    let factory: ModelFactory = {
        let gw_cfg = gw_cfg.clone();
        Arc::new(move |cred: Option<&Secret>| match (cred, &shared) {
            (Some(c), _) if gw_cfg.mode != Mode::Replay => {
                let cfg = GatewayConfig { credential: Some(c.clone()), ..gw_cfg.clone() };
                Ok(Arc::new(build_gateway(cfg)?) as Arc<dyn ChatModel>)
            }
            (_, Some(model)) => Ok(model.clone()),
            (_, None) => Err(GatewayError::Config("no service credential is configured".into())),
        })
    };
    let prompt_dir = a.prompt_dir.or_else(|| f.prompt_dir.clone());
    let version = a
        .prompt_version
        .or(f.prompt_version)
        .unwrap_or_else(|| prompt_dir.as_deref().map(latest_prompt_version).unwrap_or(0));
    let pair = resolve_prompts(prompt_dir.as_deref(), version)?;
    let data_dir = pick(a.data_dir, &f.data_dir, PathBuf::from("service-data"));
    let mut cfg = ServiceConfig::new(&data_dir, pair);
    cfg.n_runs = pick(a.n_runs, &f.n_runs, 3);
    cfg.require_session_credential = require_credential;
    let manager = SessionManager::open(cfg, factory).map_err(fail)?;
    let host = pick(a.host, &f.host, "127.0.0.1".into());
    let port = pick(a.port, &f.port, 8080);
    let addr: std::net::SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| CliError::Usage(format!("invalid address {host}:{port}: {e}")))?;
    let static_dir = a.static_dir.or_else(|| f.static_dir.clone());
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(fail)?;
    println!("serving on http://{addr}");
    runtime
        .block_on(serve(AppState { manager: Arc::new(manager) }, addr, static_dir))
        .map_err(fail)
}

fn record_fixtures(ctx: Context, a: RecordArgs) -> Result<(), CliError> {
    let argv = std::iter::once("thematic".to_owned()).chain(a.args);
    let inner = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
    if matches!(inner.command, Command::RecordFixtures(_) | Command::RecordBundle(_) | Command::Serve(_)) {
        return Err(CliError::Usage("record-fixtures wraps instruct, thematize, codebook or evaluate".into()));
    }
    let mut global = inner.global.clone();
    global.mode = Some(Mode::Record);
    global.fixture_dir = global.fixture_dir.or(ctx.global.fixture_dir.clone());
    global.endpoint = global.endpoint.or(ctx.global.endpoint.clone());
    global.config = global.config.or(ctx.global.config.clone());
    if global.fixture_dir.is_none() && ctx.file.fixture_dir.is_none() {
        return Err(CliError::Usage("record-fixtures needs --fixture-dir".into()));
    }
    execute(Cli { global, command: inner.command })
}
