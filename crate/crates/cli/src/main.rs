use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use relfuzz::driver::{fpr, run_campaign, synthesize_all, CampaignConfig, CampaignReport, Labels};
use relfuzz::fuzzer::MutationConfig;
use relfuzz::matcher::{DocEmbedder, Matcher, PrecomputedEmbeddings};
use relfuzz::protocol::{ExecutorFactory, MockFactory, MockScript, ProcessConfig, ProcessFactory, DEFAULT_TIMEOUT_MS};
use relfuzz::{load_corpus, CorpusDb, Tolerance};

/// Differential fuzzer for relational API pairs.
#[derive(Parser)]
#[command(name = "relfuzz", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank candidate API pairs.
    Match(StaticArgs),
    /// Build invocation plans for the candidate pairs.
    Synth(StaticArgs),
    /// Run one round of verification without fuzzing.
    Verify(DynamicArgs),
    /// Run one round of verification and fuzzing.
    Fuzz(DynamicArgs),
    /// Run the full campaign until a fixpoint or the iteration cap.
    Run(DynamicArgs),
}

#[derive(Args)]
struct StaticArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Precomputed document embeddings (JSON object of name -> vector).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DynamicArgs {
    #[command(flatten)]
    base: StaticArgs,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
    #[arg(long, default_value_t = 100)]
    verify_cap: usize,
    #[arg(long, default_value_t = 1000)]
    fuzz_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    rtol: f64,
    #[arg(long, default_value_t = 1e-6)]
    atol: f64,
    /// Per-request timeout in milliseconds.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT_MS)]
    timeout_ms: u64,
    /// Command line that starts an executor process.
    #[arg(long, conflicts_with = "mock_script")]
    executor_cmd: Option<String>,
    /// Replay a scripted executor in-process instead of launching one.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Let the fuzzer inject NaN and infinities.
    #[arg(long)]
    non_finite: bool,
    /// Include per-phase wall-clock times in the report.
    #[arg(long)]
    record_timings: bool,
    /// Write the corpus, including synthesized invocations, here.
    #[arg(long)]
    save_corpus: Option<PathBuf>,
}

fn load_embedder(path: Option<&Path>) -> Result<DocEmbedder> {
    Ok(match path {
        Some(p) => DocEmbedder::Precomputed(PrecomputedEmbeddings::load(p)?),
        None => DocEmbedder::TfIdf,
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(base: &StaticArgs) -> Result<(CorpusDb, DocEmbedder)> {
    if base.top_k == 0 {
        bail!("--top-k must be at least 1");
    }
    let db = load_corpus(&base.corpus).with_context(|| format!("loading {}", base.corpus.display()))?;
    Ok((db, load_embedder(base.embeddings.as_deref())?))
}

fn cmd_match(args: &StaticArgs) -> Result<bool> {
    let (db, embedder) = load(args)?;
    let matcher = Matcher::new(&db, embedder);
    let pairs = matcher.candidates_for(db.covered().iter().map(String::as_str), args.top_k);
    emit(args.out.as_deref(), &(serde_json::to_string_pretty(&pairs)? + "\n"))?;
    Ok(false)
}

fn cmd_synth(args: &StaticArgs) -> Result<bool> {
    let (db, embedder) = load(args)?;
    let candidates = Matcher::new(&db, embedder).candidates_for(db.covered().iter().map(String::as_str), args.top_k);
    let (plans, failures) = synthesize_all(&db, &candidates);
    let rendered: Vec<serde_json::Value> = plans
        .iter()
        .map(|p| {
            serde_json::json!({
                "source": p.source,
                "target": p.target,
                "plan": p.kind,
                "source_call": p.render_source(db.entry(&p.source).unwrap()),
                "target_call": p.render_target(db.entry(&p.target).unwrap()),
            })
        })
        .collect();
    let doc = serde_json::json!({ "plans": rendered, "synthesis_failures": failures });
    emit(args.out.as_deref(), &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    Ok(false)
}

fn factory(args: &DynamicArgs) -> Result<Box<dyn ExecutorFactory>> {
    match (&args.executor_cmd, &args.mock_script) {
        (Some(cmd), None) => Ok(Box::new(ProcessFactory::new(ProcessConfig::from_command_line(cmd)?))),
        (None, Some(path)) => Ok(Box::new(MockFactory::new(MockScript::load(path)?))),
        _ => bail!("one of --executor-cmd or --mock-script is required"),
    }
}

fn cmd_campaign(args: &DynamicArgs, iterations: usize, fuzz_count: usize) -> Result<bool> {
    let (db, embedder) = load(&args.base)?;
    let labels = args.labels.as_deref().map(Labels::load).transpose()?;
    let config = CampaignConfig {
        top_k: args.base.top_k,
        max_iterations: iterations,
        verify_cap: args.verify_cap,
        fuzz_count,
        seed: args.seed,
        tolerance: Tolerance {
            rtol: args.rtol,
            atol: args.atol,
        },
        timeout_ms: args.timeout_ms,
        workers: args.workers,
        mutation: MutationConfig {
            non_finite: args.non_finite,
        },
        record_timings: args.record_timings,
    };
    let factory = factory(args)?;
    let (mut report, db): (CampaignReport, CorpusDb) = run_campaign(db, config, embedder, factory.as_ref())?;
    if let Some(labels) = &labels {
        report.fpr = Some(fpr(&report, labels)?);
    }
    if let Some(path) = &args.save_corpus {
        std::fs::write(path, db.to_json_pretty()).with_context(|| format!("writing {}", path.display()))?;
    }
    emit(args.base.out.as_deref(), &report.to_json_pretty())?;
    log::info!(
        "{} verified pairs, {} inconsistencies, coverage {} -> {}",
        report.verified_pairs.len(),
        report.inconsistencies.len(),
        report.coverage.initial,
        report.coverage.final_
    );
    Ok(!report.inconsistencies.is_empty())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Match(a) => cmd_match(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Verify(a) => cmd_campaign(a, 1, 0),
        Command::Fuzz(a) => cmd_campaign(a, 1, a.fuzz_count),
        Command::Run(a) => cmd_campaign(a, a.iterations, a.fuzz_count),
    };
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
