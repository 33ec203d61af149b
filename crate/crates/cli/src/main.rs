use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use llmscreen::corpus::{
    assemble_dataset, load_candidates, load_seeds, load_topics, parse_qrels, read_clef_topic, synthetic_dataset,
    CorpusError, SyntheticCorpus, Topic,
};
use llmscreen::runner::{
    evaluate_decisions, run, write_evaluation, ExperimentConfig, RunError, RunOptions, Stage, DECISIONS_FILE,
};

#[derive(Parser)]
#[command(
    name = "llmscreen",
    version,
    about = "Screen systematic-review candidates with LLM yes/no probabilities"
)]
struct Cli {
    /// Experiment config (TOML, or a previous run's manifest.json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use cached scores only; never call a backend.
    #[arg(long, global = true)]
    offline: bool,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize raw dataset files into the canonical data directory.
    Ingest(IngestArgs),
    /// Fill the score cache.
    Score,
    /// Score and write per-topic thresholds.
    Calibrate,
    /// Score, calibrate and write decisions for every backend and ensemble.
    Screen,
    /// Like `screen`, for ensembles only.
    Ensemble,
    /// Evaluate a decisions file and write the report files.
    Evaluate(DecisionsArg),
    /// Print the report for a decisions file without writing anything.
    Report {
        #[command(flatten)]
        decisions: DecisionsArg,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
    /// Full leave-one-out pipeline: calibrate, decide, evaluate, test.
    Loo,
}

#[derive(Args)]
struct DecisionsArg {
    /// Decisions file; defaults to decisions.jsonl in the output directory.
    #[arg(long)]
    decisions: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Csv,
    Json,
}

#[derive(Args)]
struct IngestArgs {
    /// Canonical data directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Topics as JSON lines (`topic_id`, `title`).
    #[arg(long, conflicts_with_all = ["clef_topics", "synthetic"])]
    topics: Option<PathBuf>,
    /// Directory of CLEF topic files (`Topic:` / `Title:` headers).
    #[arg(long, conflicts_with = "synthetic")]
    clef_topics: Option<PathBuf>,
    /// Candidates as JSON lines (`topic_id`, `doc_id`, `title`, `abstract`).
    #[arg(long, conflicts_with = "synthetic")]
    candidates: Option<PathBuf>,
    /// TREC-style qrels (`topic iter doc label`).
    #[arg(long, conflicts_with = "synthetic")]
    qrels: Option<PathBuf>,
    /// Seed studies as JSON lines.
    #[arg(long, conflicts_with = "synthetic")]
    seeds: Option<PathBuf>,
    /// Generate a synthetic dataset instead of reading files.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 20, requires = "synthetic")]
    n_topics: usize,
    #[arg(long, default_value_t = 100, requires = "synthetic")]
    docs_per_topic: usize,
    #[arg(long, default_value_t = 0.2, requires = "synthetic")]
    prevalence: f64,
    #[arg(long, default_value_t = 0, requires = "synthetic")]
    seeds_per_topic: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), RunError> {
    let options = RunOptions {
        offline: cli.offline,
        seed: cli.seed,
    };
    let stage = match &cli.command {
        Command::Ingest(args) => return ingest(args, cli.seed.unwrap_or(0)),
        Command::Evaluate(d) => return evaluate(&load_config(cli)?, d, true, ReportFormat::Text),
        Command::Report { decisions, format } => return evaluate(&load_config(cli)?, decisions, false, *format),
        Command::Score => Stage::Score,
        Command::Calibrate => Stage::Calibrate,
        Command::Screen => Stage::Screen,
        Command::Ensemble => Stage::Ensemble,
        Command::Loo => Stage::Loo,
    };
    let config = load_config(cli)?;
    let out = config.output_dir.clone();
    let outcome = run(config, options, stage)?;
    let m = &outcome.manifest;
    println!(
        "{} topics, {} candidates, {} score records ({} from cache), {} decisions",
        m.counts.topics, m.counts.candidates, m.counts.score_records, m.counts.cache_hits, m.counts.decisions
    );
    if let Some(eval) = &outcome.evaluation {
        print!("{}", eval.to_text());
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, RunError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| RunError::Config("--config is required for this command".into()))?;
    ExperimentConfig::load(path)
}

fn evaluate(config: &ExperimentConfig, arg: &DecisionsArg, write: bool, format: ReportFormat) -> Result<(), RunError> {
    let path = arg
        .decisions
        .clone()
        .unwrap_or_else(|| config.output_dir.join(DECISIONS_FILE));
    let eval = evaluate_decisions(config, &path)?;
    if write {
        write_evaluation(&config.output_dir, &eval)?;
    }
    match format {
        ReportFormat::Text => print!("{}", eval.to_text()),
        ReportFormat::Csv => print!("{}", eval.to_csv()),
        ReportFormat::Json => println!(
            "{}",
            serde_json::to_string_pretty(&eval).expect("evaluation serializes")
        ),
    }
    Ok(())
}

fn ingest(args: &IngestArgs, seed: u64) -> Result<(), RunError> {
    let dataset = if args.synthetic {
        synthetic_dataset(&SyntheticCorpus {
            topics: args.n_topics,
            docs_per_topic: args.docs_per_topic,
            prevalence: args.prevalence,
            seeds_per_topic: args.seeds_per_topic,
            seed,
        })?
    } else {
        let topics = match (&args.topics, &args.clef_topics) {
            (Some(p), _) => load_topics(p)?,
            (None, Some(dir)) => clef_topics(dir)?,
            (None, None) => {
                return Err(RunError::Config(
                    "ingest needs --topics, --clef-topics or --synthetic".into(),
                ))
            }
        };
        let (Some(candidates), Some(qrels)) = (&args.candidates, &args.qrels) else {
            return Err(RunError::Config("ingest needs --candidates and --qrels".into()));
        };
        let seeds = args.seeds.as_ref().map(load_seeds).transpose()?;
        let (dataset, report) = assemble_dataset(topics, load_candidates(candidates)?, parse_qrels(qrels)?, seeds)?;
        eprintln!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        dataset
    };
    dataset.write_canonical(&args.out)?;
    println!(
        "wrote {} topics, {} candidates to {}",
        dataset.topics().len(),
        dataset.num_documents(),
        args.out.display()
    );
    Ok(())
}

fn clef_topics(dir: &Path) -> Result<Vec<Topic>, CorpusError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Io { path, source }
    };
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        if path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .iter()
        .map(|p| read_clef_topic(&fs::read_to_string(p).map_err(io(p))?))
        .collect()
}
