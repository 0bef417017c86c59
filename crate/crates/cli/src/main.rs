use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use paace::backends::BackendError;
use paace::config::{ConfigError, PaaceConfig};
use paace::evolution::{evolve, ArchiveSummary, EvolutionError, SystemClock};
use paace::executor::ExecError;
use paace::metrics::{build_report, MetricsError, ScoredRun, StrategyRuns};
use paace::model::{compression_ratio, ContextState, Plan};
use paace::pipeline::{run_strategy, strategy_handle, Services, Strategy, TeacherPrompt};
use paace::scoring::{label_trajectory, TrajectoryPair};
use paace::store::{
    read_jsonl, synth_corpus, to_jsonl, write_jsonl, CorpusRecord, JsonlAppender, LabelRecord, RunDir, StoreError,
    TrajectoryRecord, STORE_SCHEMA_VERSION,
};
use paace::supervision::{dedup_tuples, extract_tuples, write_dataset, DatasetError};
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "paace", version, about = "Plan-aware context compression for tool-using agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set run.k=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Log redacted HTTP request and response bodies under the run directory.
    #[arg(long, global = true)]
    trace: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic workflow corpus.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value = "corpus.jsonl")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Execute strategies over a corpus into a run directory.
    Run {
        #[arg(long)]
        corpus: PathBuf,
        /// Strategies to run; the uncompressed reference always runs too.
        #[arg(long = "strategy", value_delimiter = ',', default_value = "none")]
        strategies: Vec<Strategy>,
        #[arg(long)]
        run_dir: PathBuf,
        /// Teacher prompt text; defaults to the run's evolved best, then the seed prompt.
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evolve the teacher's compression prompt.
    Evolve {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Label compressed runs and build the supervision dataset.
    Extract {
        #[arg(long)]
        run_dir: PathBuf,
        /// Keep exact duplicate tuples.
        #[arg(long)]
        no_dedup: bool,
    },
    /// Build the metrics report of a run directory.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Compress one context file for the next k tasks.
    Compress {
        #[arg(long)]
        context: PathBuf,
        /// Plan as JSON.
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value = "paace-oracle")]
        strategy: Strategy,
        #[arg(long)]
        k: Option<usize>,
        /// Current step; defaults to one past the last tagged step in the context.
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Backend(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Data(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Backend(m) | CliError::Data(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::InvalidRequest(m) => CliError::Config(m),
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<ExecError> for CliError {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::Backend(b) => b.into(),
            ExecError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvolutionError> for CliError {
    fn from(e: EvolutionError) -> Self {
        match e {
            EvolutionError::Config(m) => CliError::Config(m),
            EvolutionError::Evaluation(m) => CliError::Backend(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_config(args: &ConfigArgs, extra: Vec<String>) -> Result<PaaceConfig, CliError> {
    let mut flags = args.overrides.clone();
    flags.extend(extra);
    Ok(PaaceConfig::load(args.config.as_deref(), std::env::vars(), &flags)?)
}

/// Resolves the configuration and pins it to the run directory's snapshot.
fn run_config(rd: &RunDir, args: &ConfigArgs, extra: Vec<String>) -> Result<PaaceConfig, CliError> {
    let fresh = load_config(args, extra)?;
    rd.init(&fresh)?;
    Ok(fresh)
}

fn teacher_prompt(rd: Option<&RunDir>, file: Option<&Path>) -> Result<TeacherPrompt, CliError> {
    if let Some(f) = file {
        let text = read(f)?.trim().to_string();
        if text.is_empty() {
            return Err(CliError::Config(format!("{} is empty", f.display())));
        }
        return Ok(TeacherPrompt { prompt_id: "file".into(), text });
    }
    if let Some(rd) = rd {
        let p = rd.archive_summary();
        if p.exists() {
            let s: ArchiveSummary =
                serde_json::from_str(&read(&p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            return Ok(TeacherPrompt { prompt_id: s.best_prompt_id, text: s.best_prompt });
        }
    }
    Ok(TeacherPrompt::default())
}

fn synth(seed: Option<u64>, count: usize, out: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = load_config(args, Vec::new())?;
    let seed = seed.unwrap_or(cfg.seed);
    let corpus = synth_corpus(&cfg.generator, seed, count)?;
    write_jsonl(out, &corpus)?;
    eprintln!(
        "wrote {} workflows ({}) to {}",
        corpus.len(),
        corpus.first().map_or("", |r| &r.corpus_id),
        out.display()
    );
    Ok(())
}

fn run(
    corpus_path: &Path,
    strategies: &[Strategy],
    run_dir: &Path,
    prompt_file: Option<&Path>,
    k: Option<usize>,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let rd = RunDir::new(run_dir);
    let cfg = run_config(&rd, args, k.map(|k| format!("run.k={k}")).into_iter().collect())?;
    let corpus: Vec<CorpusRecord> = read_jsonl(corpus_path)?;
    let ids: BTreeSet<&str> = corpus.iter().map(|r| r.corpus_id.as_str()).collect();
    if ids.len() > 1 {
        return Err(CliError::Data(format!("{} mixes corpora: {ids:?}", corpus_path.display())));
    }
    // keep a copy so the run directory is self-contained
    if corpus_path.canonicalize().ok() != rd.corpus().canonicalize().ok() {
        if rd.corpus().exists() && read(&rd.corpus())? != to_jsonl(&corpus) {
            return Err(CliError::Data(format!("{} already holds a different corpus", run_dir.display())));
        }
        write_jsonl(&rd.corpus(), &corpus)?;
    }
    let svc = Services::from_config(&cfg, args.trace.then_some(rd.root.as_path()))?;
    let prompt = teacher_prompt(Some(&rd), prompt_file)?;
    let mut todo: Vec<Strategy> = vec![Strategy::None];
    todo.extend(strategies.iter().copied().filter(|s| *s != Strategy::None));
    let (_, done) = rd.completed()?;
    let log = JsonlAppender::open(&rd.trajectories())?;
    let run_id = rd.run_id();
    let mut ran = 0;
    for s in todo {
        for rec in &corpus {
            if done.contains(&(s, rec.seed)) {
                continue;
            }
            let t = run_strategy(s, &rec.workflow, &rec.world, &cfg, &svc, &prompt)?;
            log.append(&TrajectoryRecord {
                schema_version: STORE_SCHEMA_VERSION,
                run_id: run_id.clone(),
                corpus_id: rec.corpus_id.clone(),
                strategy: s,
                seed: rec.seed,
                plan_len: rec.workflow.plan.len(),
                gold: rec.workflow.gold_answer.clone(),
                trajectory: t,
            })?;
            ran += 1;
        }
    }
    eprintln!("ran {ran} trajectories ({} already present)", done.len());
    Ok(())
}

fn evolve_cmd(
    run_dir: &Path,
    budget: Option<usize>,
    workers: Option<usize>,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let rd = RunDir::new(run_dir);
    let mut cfg = run_config(&rd, args, Vec::new())?;
    // search effort only; not part of the snapshot
    cfg.evolution.budget = budget.unwrap_or(cfg.evolution.budget);
    cfg.evolution.workers = workers.unwrap_or(cfg.evolution.workers);
    cfg.validate()?;
    let svc = Services::from_config(&cfg, args.trace.then_some(rd.root.as_path()))?;
    let evaluator = paace::evolution::PipelineEvaluator::new(
        cfg.generator.clone(),
        cfg.run,
        cfg.thresholds,
        svc.agent.clone(),
        svc.teacher.clone(),
        svc.embedder.clone(),
        svc.judge.clone(),
    );
    let archive = evolve(&cfg.evolution, &evaluator, svc.mutator.clone(), Arc::new(SystemClock::default()))?;
    archive.write(&rd.root)?;
    let best = archive.best();
    println!("best {} reward {:.4}: {}", best.variant.prompt_id, best.stats.reward, best.variant.text);
    Ok(())
}

fn extract(run_dir: &Path, no_dedup: bool) -> Result<(), CliError> {
    let rd = RunDir::new(run_dir);
    let cfg = rd.load_config()?;
    let svc = Services::from_config(&cfg, None)?;
    let corpus: Vec<CorpusRecord> = read_jsonl(&rd.corpus())?;
    let by_seed: BTreeMap<u64, &CorpusRecord> = corpus.iter().map(|r| (r.seed, r)).collect();
    let (recs, _) = rd.completed()?;
    let full: BTreeMap<u64, &TrajectoryRecord> =
        recs.iter().filter(|r| r.strategy == Strategy::None).map(|r| (r.seed, r)).collect();
    let mut labels = Vec::new();
    let mut tuples = Vec::new();
    for r in recs.iter().filter(|r| r.strategy.is_paace()) {
        let (Some(w), Some(f)) = (by_seed.get(&r.seed), full.get(&r.seed)) else {
            return Err(CliError::Data(format!("seed {} of {} has no reference run or workflow", r.seed, r.strategy)));
        };
        let pair = TrajectoryPair { full: f.trajectory.clone(), compressed: r.trajectory.clone() };
        let label = label_trajectory(&w.workflow, &pair, &cfg.thresholds, svc.embedder.as_ref(), svc.judge.as_ref())?;
        let ts = extract_tuples(&r.run_id, &pair, &label);
        labels.push(LabelRecord {
            schema_version: STORE_SCHEMA_VERSION,
            run_id: r.run_id.clone(),
            strategy: r.strategy,
            seed: r.seed,
            workflow_id: r.trajectory.workflow_id.clone(),
            label,
            tuples: ts.len(),
        });
        tuples.extend(ts);
    }
    write_jsonl(&rd.labels(), &labels)?;
    let before = tuples.len();
    if !no_dedup {
        tuples = dedup_tuples(tuples);
    }
    let manifest = write_dataset(&tuples, &rd.dataset())?;
    let ok = labels.iter().filter(|l| l.label.success).count();
    eprintln!("{ok}/{} compressed runs succeeded; {} tuples ({} before dedup)", labels.len(), manifest.count, before);
    Ok(())
}

fn eval(run_dir: &Path) -> Result<(), CliError> {
    let rd = RunDir::new(run_dir);
    let cfg = rd.load_config()?;
    let (recs, _) = rd.completed()?;
    let Some(first) = recs.first() else {
        return Err(CliError::Data(format!("{} has no trajectories", rd.trajectories().display())));
    };
    let corpus_id = first.corpus_id.clone();
    let mut sets: BTreeMap<Strategy, Vec<ScoredRun>> = BTreeMap::new();
    for r in recs {
        sets.entry(r.strategy).or_default().push(ScoredRun {
            corpus_id: r.corpus_id,
            plan_len: r.plan_len,
            gold: r.gold,
            trajectory: r.trajectory,
        });
    }
    let sets: Vec<StrategyRuns> =
        sets.into_iter().map(|(s, runs)| StrategyRuns { strategy: s.label().to_string(), runs }).collect();
    let report = build_report(&corpus_id, &cfg.digest(), &sets)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(rd.report_json(), json + "\n")?;
    let table = report.render_table();
    fs::write(rd.report_txt(), &table)?;
    print!("{table}");
    Ok(())
}

fn compress(
    context: &Path,
    plan: &Path,
    strategy: Strategy,
    k: Option<usize>,
    step: Option<usize>,
    prompt_file: Option<&Path>,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let cfg = load_config(args, k.map(|k| format!("run.k={k}")).into_iter().collect())?;
    let plan: Plan = serde_json::from_str(&read(plan)?).map_err(|e| CliError::Data(format!("plan: {e}")))?;
    let text = read(context)?;
    let provisional = ContextState::parse(&text, 1);
    let t = step.unwrap_or_else(|| provisional.last_tagged_step().map_or(1, |s| s + 1));
    if t < 1 || t > plan.len() {
        return Err(CliError::Config(format!("step {t} is outside the plan (1..={})", plan.len())));
    }
    let c = ContextState::parse(&text, t);
    let svc = Services::from_config(&cfg, None)?;
    let prompt = teacher_prompt(None, prompt_file)?;
    let handle = strategy_handle(strategy, &cfg, &svc, &prompt)
        .ok_or_else(|| CliError::Config("strategy `none` does not compress".into()))?;
    handle.validate()?;
    let out = handle.compress(&c, &plan, t)?;
    let ratio = compression_ratio(out.tokens(), c.tokens());
    print!("{}", out.render());
    if !out.render().ends_with('\n') {
        println!();
    }
    eprintln!("ratio {ratio:.4} ({} -> {} tokens)", c.tokens(), out.tokens());
    if !(ratio > 0.0 && ratio < 1.0) {
        eprintln!("warning: degenerate compression; a pipeline run would fall back to the original context");
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("PAACE_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { seed, count, out, cfg } => synth(*seed, *count, out, cfg),
        Command::Run { corpus, strategies, run_dir, prompt_file, k, cfg } => {
            run(corpus, strategies, run_dir, prompt_file.as_deref(), *k, cfg)
        }
        Command::Evolve { run_dir, budget, workers, cfg } => evolve_cmd(run_dir, *budget, *workers, cfg),
        Command::Extract { run_dir, no_dedup } => extract(run_dir, *no_dedup),
        Command::Eval { run_dir } => eval(run_dir),
        Command::Compress { context, plan, strategy, k, step, prompt_file, cfg } => {
            compress(context, plan, *strategy, *k, *step, prompt_file.as_deref(), cfg)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
