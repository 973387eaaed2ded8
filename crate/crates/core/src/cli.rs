//! Command-line front end. `dispatch` returns the process exit code.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Config, ConfigError};
use crate::corpus::{ingest_markdown_dir, load_corpus, validate_manifest, Corpus, CorpusError};
use crate::evaluation::{
    render_run_table, render_score_table, run_ablation, run_exaggeration, summarize_run, AblationReport, EvalError,
    ExaggerationReport, RunReport,
};
use crate::pipeline::checkpoint::Journal;
use crate::pipeline::decision::{FinalDecision, DECISION_FILE};
use crate::pipeline::{plan_run, run_pipeline, Deps, PipelineError, RunManifest, RunOptions, RUN_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_RUN: i32 = 4;

pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const EXAGGERATION_FILE: &str = "exaggeration.json";

#[derive(Debug, Parser)]
#[command(name = "paper-review", version, about = "Batch LLM peer review over a paper corpus")]
struct Cli {
    /// Directory holding one sub-directory per run.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a directory of markdown papers into a corpus.
    Ingest {
        src: PathBuf,
        dest: PathBuf,
        #[arg(long)]
        corpus_id: Option<String>,
    },
    /// Review a corpus.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `corpus.root` from the config.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
        /// Print the batch plan and exit without contacting the backend.
        #[arg(long)]
        dry_run: bool,
    },
    /// Continue an interrupted run from its checkpoints.
    Resume {
        #[arg(long)]
        run_id: String,
    },
    /// Compare a run's decision with a reference accepted set.
    Eval {
        #[arg(long)]
        run_id: String,
        /// JSON array of accepted paper ids.
        #[arg(long)]
        reference: PathBuf,
        /// JSON array of paper ids for the first-round comparison.
        #[arg(long)]
        first_round_reference: Option<PathBuf>,
    },
    /// Ask the criterion questions against each content variant of a paper.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        paper_id: String,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Score a paper with and without an exaggerated sentence.
    Exaggerate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        paper_id: String,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Show what a run produced. Never writes.
    Report {
        #[arg(long)]
        run_id: String,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
}

/// A failure with its exit code and machine-readable kind.
#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    fn new(kind: &str, message: impl Into<String>, exit_code: i32) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
            exit_code,
        }
    }

    pub fn to_json(&self) -> Value {
        json!({ "error": self.kind, "message": self.message, "exit_code": self.exit_code })
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new("ConfigError", e.to_string(), EXIT_CONFIG)
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::new("CorpusError", e.to_string(), EXIT_CONFIG)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let kind = match &e {
            PipelineError::Config(c) => return CliError::from(ConfigError::Invalid(c.to_string())),
            PipelineError::Corpus(_) => "CorpusError",
            PipelineError::Retrieval(_) => "RetrievalError",
            PipelineError::Prompt(_) => "ReplyError",
            PipelineError::Io { .. } => "IoError",
            PipelineError::ResumeRunNotFound(_) => "ResumeRunNotFound",
            PipelineError::RunExists(_) => "RunExists",
            PipelineError::ConfigMismatch(_) => "ConfigMismatch",
            PipelineError::ChecksumMismatch { .. } => "ChecksumMismatch",
            PipelineError::CheckpointCorrupt(_) => "CheckpointCorrupt",
            PipelineError::AmbiguousReply(_) => "AmbiguousReply",
            PipelineError::MissingImage(_) => "MissingImage",
            PipelineError::UnknownPaper(_) => "UnknownPaper",
            PipelineError::Backend(_) => "BackendError",
            PipelineError::BatchFailed { .. } => "BatchFailed",
            PipelineError::Interrupted { .. } => "Interrupted",
        };
        CliError::new(kind, e.to_string(), EXIT_RUN)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Pipeline(p) => p.into(),
            EvalError::EmptyReference => CliError::new("EmptyReference", e.to_string(), EXIT_RUN),
            EvalError::MissingSection(_) => CliError::new("MissingSection", e.to_string(), EXIT_RUN),
            other => CliError::new("EvalError", other.to_string(), EXIT_RUN),
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError::new("UsageError", message, EXIT_USAGE)
}

/// Parses `argv` (including the program name) and runs the command.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    dispatch_to(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn dispatch_to<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return EXIT_OK;
            }
            let ce = usage(e.to_string().trim().to_string());
            let _ = writeln!(err, "{}", ce.to_json());
            return ce.exit_code;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(ce) => {
            let _ = writeln!(err, "{}", ce.to_json());
            ce.exit_code
        }
    }
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    writeln!(out, "{text}").map_err(|e| CliError::new("IoError", e.to_string(), EXIT_RUN))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::new("IoError", format!("{}: {e}", path.display()), EXIT_RUN))
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path, kind: &str, code: i32) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::new(kind, format!("{}: {e}", path.display()), code))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(kind, format!("{}: {e}", path.display()), code))
}

fn load_config(path: &Path) -> Result<Config, CliError> {
    let config = Config::load(path)?;
    config.validate()?;
    Ok(config)
}

fn corpus_root(flag: Option<PathBuf>, config: &Config) -> Result<PathBuf, CliError> {
    flag.or_else(|| config.corpus.root.clone())
        .ok_or_else(|| usage("--corpus is required when the config has no corpus.root"))
}

fn load(root: &Path) -> Result<Corpus, CliError> {
    Ok(load_corpus(root)?)
}

fn find_paper<'a>(corpus: &'a Corpus, id: &str) -> Result<&'a crate::corpus::PaperRecord, CliError> {
    corpus
        .get(id)
        .ok_or_else(|| CliError::new("UnknownPaper", format!("paper {id} is not in the corpus"), EXIT_RUN))
}

fn decision_summary(d: &FinalDecision) -> Value {
    json!({
        "run_id": d.run_id,
        "gate_passed": d.gate_passed_ids.len(),
        "first_round": d.first_round_ids,
        "accepted": d.accepted_ids,
        "reviewer_batches": d.batches.len(),
        "chair_batches": d.chair.len(),
        "usage": d.totals.usage,
        "cost_usd": d.totals.cost_usd.to_string(),
        "wall_time_ms": d.totals.wall_time_ms,
    })
}

fn read_id_set(path: &Path) -> Result<BTreeSet<String>, CliError> {
    read_json(path, "ReferenceError", EXIT_CONFIG)
}

fn probe_log(runs_dir: &Path, run_id: Option<&str>, file: &str, event: &str, report: &impl Serialize) -> Result<(), CliError> {
    let Some(id) = run_id else { return Ok(()) };
    let dir = runs_dir.join(id);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::new("IoError", e.to_string(), EXIT_RUN))?;
    write_json(&dir.join(file), report)?;
    let last = crate::pipeline::checkpoint::last_log_sequence(&dir.join(crate::pipeline::checkpoint::LOG_FILE))?;
    let mut journal = Journal::open(&dir, id, last)?;
    journal.log(event, json!({ "file": file }), 0)?;
    Ok(())
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let runs_dir = cli.runs_dir;
    match cli.command {
        Command::Ingest { src, dest, corpus_id } => {
            let id = corpus_id.unwrap_or_else(|| {
                dest.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "corpus".into())
            });
            let manifest = ingest_markdown_dir(&src, &dest, &id)?;
            let issues = validate_manifest(&dest);
            if !issues.is_empty() {
                return Err(CliError::new("CorpusError", format!("{issues:?}"), EXIT_CONFIG));
            }
            print_json(out, &json!({ "corpus_id": manifest.corpus_id, "papers": manifest.entries.len(), "dest": dest }))
        }
        Command::Run {
            config,
            corpus,
            run_id,
            dry_run,
        } => {
            let config = load_config(&config)?;
            let root = corpus_root(corpus, &config)?;
            let corpus = load(&root)?;
            if dry_run {
                let plan = plan_run(&corpus, &config)?;
                return print_json(
                    out,
                    &json!({
                        "corpus_size": plan.corpus_size,
                        "gate_applied": plan.gate_applied,
                        "excluded_ids": plan.excluded_ids,
                        "batch_count": plan.batches.len(),
                        "final_quota": plan.final_quota,
                        "chair_batch_size": plan.chair_batch_size,
                        "batches": plan.batches,
                    }),
                );
            }
            let run_id = run_id.ok_or_else(|| usage("--run-id is required unless --dry-run is given"))?;
            let deps = Deps::from_config(&config)?;
            let mut opts = RunOptions::new(run_id, &runs_dir);
            opts.corpus_root = Some(std::path::absolute(&root).unwrap_or(root));
            let decision = run_pipeline(&corpus, &config, &deps, &opts)?;
            print_json(out, &decision_summary(&decision))
        }
        Command::Resume { run_id } => {
            let run_dir = runs_dir.join(&run_id);
            if !run_dir.join(RUN_FILE).is_file() {
                return Err(PipelineError::ResumeRunNotFound(run_id).into());
            }
            let manifest = RunManifest::read(&run_dir)?;
            let config = manifest.config;
            config.validate()?;
            let root = manifest
                .corpus_root
                .or_else(|| config.corpus.root.clone())
                .ok_or_else(|| CliError::new("CorpusError", "run has no recorded corpus root", EXIT_CONFIG))?;
            let corpus = load(&root)?;
            let deps = Deps::from_config(&config)?;
            let mut opts = RunOptions::new(run_id, &runs_dir);
            opts.resume = true;
            opts.corpus_root = Some(root);
            let decision = run_pipeline(&corpus, &config, &deps, &opts)?;
            print_json(out, &decision_summary(&decision))
        }
        Command::Eval {
            run_id,
            reference,
            first_round_reference,
        } => {
            let run_dir = runs_dir.join(&run_id);
            let decision: FinalDecision = read_json(&run_dir.join(DECISION_FILE), "RunNotFound", EXIT_RUN)?;
            let manifest = RunManifest::read(&run_dir).ok();
            let config = manifest.map(|m| m.config).unwrap_or_default();
            let reference = read_id_set(&reference)?;
            let first = first_round_reference.as_deref().map(read_id_set).transpose()?;
            let report = summarize_run(&decision, first.as_ref(), &reference, &config.pricing, config.evaluation.similarity)?;
            write_json(&run_dir.join(REPORT_FILE), &report)?;
            print_json(
                out,
                &json!({
                    "report": report,
                    "final_similarity_pct": report.final_similarity.percent(),
                    "first_round_similarity_pct": report.first_round.map(|s| s.percent()),
                }),
            )
        }
        Command::Ablate {
            config,
            corpus,
            paper_id,
            run_id,
        } => {
            let config = load_config(&config)?;
            let corpus = load(&corpus_root(corpus, &config)?)?;
            let paper = find_paper(&corpus, &paper_id)?;
            let deps = Deps::from_config(&config)?;
            let report = run_ablation(paper, &deps, &config)?;
            probe_log(&runs_dir, run_id.as_deref(), ABLATION_FILE, "ablation_done", &report)?;
            print_json(out, &report)
        }
        Command::Exaggerate {
            config,
            corpus,
            paper_id,
            trials,
            run_id,
        } => {
            if trials == 0 {
                return Err(usage("--trials must be at least 1"));
            }
            let config = load_config(&config)?;
            let corpus = load(&corpus_root(corpus, &config)?)?;
            let paper = find_paper(&corpus, &paper_id)?;
            let deps = Deps::from_config(&config)?;
            let report = run_exaggeration(paper, trials, &deps, &config)?;
            probe_log(&runs_dir, run_id.as_deref(), EXAGGERATION_FILE, "exaggeration_done", &report)?;
            print_json(out, &report)
        }
        Command::Report { run_id, format } => report(&runs_dir.join(&run_id), &run_id, format, out),
    }
}

fn report(run_dir: &Path, run_id: &str, format: Format, out: &mut dyn Write) -> Result<(), CliError> {
    let opt = |file: &str| -> Result<Option<Value>, CliError> {
        let p = run_dir.join(file);
        if p.is_file() {
            read_json(&p, "CorruptReport", EXIT_RUN).map(Some)
        } else {
            Ok(None)
        }
    };
    let decision = opt(DECISION_FILE)?;
    let run_report = opt(REPORT_FILE)?;
    let ablation = opt(ABLATION_FILE)?;
    let exaggeration = opt(EXAGGERATION_FILE)?;
    if decision.is_none() && run_report.is_none() && ablation.is_none() && exaggeration.is_none() {
        return Err(CliError::new("RunNotFound", format!("nothing recorded for run {run_id}"), EXIT_RUN));
    }
    let io = |e: std::io::Error| CliError::new("IoError", e.to_string(), EXIT_RUN);
    match format {
        Format::Json => print_json(
            out,
            &json!({
                "run_id": run_id,
                "decision": decision
                    .map(serde_json::from_value::<FinalDecision>)
                    .transpose()
                    .map_err(|e| CliError::new("CorruptReport", e.to_string(), EXIT_RUN))?
                    .as_ref()
                    .map(decision_summary),
                "run_report": run_report,
                "ablation": ablation,
                "exaggeration": exaggeration,
            }),
        ),
        Format::Table => {
            if let Some(v) = decision {
                let d: FinalDecision =
                    serde_json::from_value(v).map_err(|e| CliError::new("CorruptReport", e.to_string(), EXIT_RUN))?;
                writeln!(
                    out,
                    "Run {}: {} passed the format check, {} advanced, {} accepted, cost {} USD",
                    d.run_id,
                    d.gate_passed_ids.len(),
                    d.first_round_ids.len(),
                    d.accepted_ids.len(),
                    d.totals.cost_usd
                )
                .map_err(io)?;
            }
            if let Some(v) = run_report {
                let r: RunReport =
                    serde_json::from_value(v).map_err(|e| CliError::new("CorruptReport", e.to_string(), EXIT_RUN))?;
                write!(out, "\n{}", render_run_table(&[r])).map_err(io)?;
            }
            if let Some(v) = exaggeration {
                let r: ExaggerationReport =
                    serde_json::from_value(v).map_err(|e| CliError::new("CorruptReport", e.to_string(), EXIT_RUN))?;
                write!(out, "\n{}", render_score_table(&r)).map_err(io)?;
            }
            if let Some(v) = ablation {
                let r: AblationReport =
                    serde_json::from_value(v).map_err(|e| CliError::new("CorruptReport", e.to_string(), EXIT_RUN))?;
                writeln!(out, "\nAnswer similarity for {}:", r.paper_id).map_err(io)?;
                for p in &r.pairwise {
                    writeln!(out, "  {:<22} {:<22} {:.2}", p.a.as_str(), p.b.as_str(), p.similarity).map_err(io)?;
                }
            }
            Ok(())
        }
    }
}
