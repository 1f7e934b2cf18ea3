//! `sag`: debate runs, ablations, toy credit-assignment training,
//! perturbation generation, metric replay and report aggregation.
//!
//! Exit status: 0 on success, 1 on user error (bad flags, invalid config or
//! dataset), 2 when a run finished but some cells failed.

mod config;

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use sag_core::backends::{
    load_corpus, BackendDescriptor, BackendError, BackendSet, NoRetrieval, RetrievalBackend,
    TfIdfIndex,
};
use sag_core::bench::{
    load_dataset, perturb_adversarial, perturb_demographic, perturb_linguistic, replay,
    run_matrix, write_dataset, write_outputs, write_reports, BackendProvider, ConfigBindings,
    DemographicOutcome, MatrixOptions, MatrixOutput, MethodSpec, Regime, RunMatrix, SchemaTag,
    SwapTable,
};
use sag_core::credit::{train_toy, write_diagnostics_csv, EnvSpec, ToyAlgo, TrainConfig};
use sag_core::engine::PromptTemplates;
use sag_core::metrics::MetricReport;
use sag_core::model::{
    validate_group_config, AgentId, GroupConfig, InteractionMode, Role, ValidatedConfig,
};

use config::{apply_override, BackendChoice, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "sag", version, about = "Small-agent-group debate and evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute the run matrix described by a config file.
    Run(RunArgs),
    /// Run the five role/interaction ablations of one base config.
    Ablate(RunArgs),
    /// Train toy policies with GRPO or CTDE and write diagnostics.
    TrainToy(TrainArgs),
    /// Write a perturbed copy of a dataset.
    Perturb(PerturbArgs),
    /// Recompute reports from a saved trajectory archive.
    Metrics(MetricsArgs),
    /// Merge method reports from several output directories.
    Report(ReportArgs),
    /// Check a config and its datasets without running; prints the
    /// effective configuration with every default filled in.
    Validate(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set group.max_rounds=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Base seed; run r of a cell decodes with seed + r.
    #[arg(long)]
    seed: Option<i64>,
    /// Use the rule-based desk panel for every agent.
    #[arg(long, conflicts_with = "backend_endpoint")]
    scripted: bool,
    /// Send every agent to this chat-completion endpoint.
    #[arg(long)]
    backend_endpoint: Option<String>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    output: PathBuf,
    /// Worker budget; defaults to the number of logical processors.
    #[arg(long)]
    workers: Option<usize>,
    /// Discard an existing progress journal instead of resuming from it.
    #[arg(long)]
    fresh: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "grpo")]
    algo: ToyAlgo,
    /// `coordination`, `needle` or `random`.
    #[arg(long, default_value = "coordination")]
    env: EnvSpec,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Config file whose `grpo` and `ctde` sections supply hyperparameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a training value, e.g. `--set grpo.learning_rate=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct PerturbArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "mcq")]
    schema: SchemaTag,
    /// `clean`, `ling<intensity>` (e.g. `ling0.3`), `adv`, or `demo_<attribute>`.
    #[arg(long)]
    regime: Regime,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    swap_table: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Output directory of an earlier `run` or `ablate`.
    #[arg(long)]
    archive: PathBuf,
    /// Where to write reports; defaults to the archive directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Output directories of earlier runs.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

/// Why a command did not succeed.
#[derive(Debug)]
enum Failure {
    User(anyhow::Error),
    Partial(usize),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::User(e) => write!(f, "{e:#}"),
            Failure::Partial(n) => write!(f, "{n} unit(s) failed; see failures in the reports"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::User(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a, false),
        Command::Ablate(a) => cmd_run(&a, true),
        Command::TrainToy(a) => cmd_train(&a),
        Command::Perturb(a) => cmd_perturb(&a),
        Command::Metrics(a) => cmd_metrics(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Validate(a) => cmd_validate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, kind) = match f {
                Failure::User(_) => (1, "error"),
                Failure::Partial(_) => (2, "partial_failure"),
            };
            let body = serde_json::json!({ "status": kind, "message": f.to_string() });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config, &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed_base = seed;
    }
    if common.scripted {
        cfg.backend = BackendChoice::Desk;
    }
    if let Some(endpoint) = &common.backend_endpoint {
        let model_name = match &cfg.backend {
            BackendChoice::Http { model_name, .. } => model_name.clone(),
            _ => "default".to_string(),
        };
        cfg.backend = BackendChoice::Http {
            endpoint: endpoint.clone(),
            model_name,
        };
    }
    Ok(cfg)
}

/// The five ablations of `base`: one role removed at a time, then the
/// single-shot majority vote.
fn ablations(base: &GroupConfig) -> Vec<MethodSpec> {
    let mut out = Vec::new();
    for role in [Role::Reasoning, Role::Knowledge, Role::Safety, Role::Judge] {
        let mut cfg = base.clone();
        cfg.ablation.insert(role);
        out.push(MethodSpec {
            label: format!("w/o A_{}", role.prefix()),
            config: cfg,
        });
    }
    let mut mv = base.clone();
    mv.interaction_mode = InteractionMode::MajorityVote;
    out.push(MethodSpec {
        label: "majority-voting".into(),
        config: mv,
    });
    out
}

struct HttpProvider {
    endpoint: String,
    model_name: String,
}

impl BackendProvider for HttpProvider {
    fn backends(&self, _method: &str, cfg: &ValidatedConfig) -> Result<BackendSet, BackendError> {
        let descriptor = BackendDescriptor::http(&self.endpoint, &self.model_name);
        let backend = sag_core::backends::instantiate(&descriptor)?;
        Ok(BackendSet::for_each_agent(cfg, |_| Arc::clone(&backend)))
    }
}

fn provider(cfg: &RunConfig) -> Box<dyn BackendProvider> {
    match &cfg.backend {
        BackendChoice::Desk => Box::new(cfg.desk),
        BackendChoice::Bindings => Box::new(ConfigBindings),
        BackendChoice::Http {
            endpoint,
            model_name,
        } => Box::new(HttpProvider {
            endpoint: endpoint.clone(),
            model_name: model_name.clone(),
        }),
    }
}

fn matrix_options(cfg: &RunConfig, workers: usize, journal: Option<PathBuf>) -> Result<MatrixOptions> {
    let retrieval: Arc<dyn RetrievalBackend> = match &cfg.corpus {
        Some(path) => Arc::new(TfIdfIndex::new(
            load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))?,
        )),
        None => Arc::new(NoRetrieval),
    };
    let templates = match &cfg.prompts_dir {
        Some(dir) => PromptTemplates::load_dir(dir)
            .with_context(|| format!("loading prompt templates from {}", dir.display()))?,
        None => PromptTemplates::default(),
    };
    let swap_table = match &cfg.swap_table {
        Some(path) => SwapTable::load(path)?,
        None => SwapTable::default(),
    };
    Ok(MatrixOptions {
        workers,
        timing: cfg.timing,
        templates,
        retrieval,
        swap_table,
        journal,
    })
}

fn check_matrix(matrix: &RunMatrix) -> Result<()> {
    matrix.validate()?;
    for b in &matrix.benchmarks {
        load_dataset(&b.path, b.schema).with_context(|| format!("benchmark `{}`", b.name))?;
    }
    Ok(())
}

fn summarize(output: &MatrixOutput) {
    for r in &output.reports {
        let accs: Vec<String> = r
            .per_benchmark
            .iter()
            .filter_map(|(b, m)| m.get("accuracy").map(|a| format!("{b}={a:.1}")))
            .collect();
        println!(
            "{}: {} gap={:.1} latency={:.3}s/query tflops={:.3}/query",
            r.method,
            accs.join(" "),
            r.gap,
            r.cost.latency_s_per_query,
            r.cost.tflops_per_query
        );
    }
}

fn cmd_run(args: &RunArgs, ablate: bool) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    let matrix = if ablate {
        cfg.matrix(ablations(&cfg.group))
    } else {
        cfg.single_method()
    };
    check_matrix(&matrix)?;
    fs::create_dir_all(&args.output)
        .with_context(|| format!("creating {}", args.output.display()))?;
    let journal = args.output.join("journal.jsonl");
    if args.fresh && journal.exists() {
        fs::remove_file(&journal).context("removing old journal")?;
    }
    let workers = args.workers.unwrap_or_else(sag_core::par::default_workers).max(1);
    let opts = matrix_options(&cfg, workers, Some(journal))?;
    let output = run_matrix(&matrix, provider(&cfg).as_ref(), &opts).map_err(anyhow::Error::from)?;
    write_outputs(&args.output, &matrix, cfg.timing, &output).map_err(anyhow::Error::from)?;
    summarize(&output);
    if output.failures.is_empty() {
        Ok(())
    } else {
        for f in &output.failures {
            log::warn!("{f}");
        }
        Err(Failure::Partial(output.failures.len()))
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let mut train = TrainConfig {
        algo: args.algo,
        env: args.env.clone(),
        steps: args.steps,
        seed: args.seed,
        grpo: Default::default(),
        ctde: Default::default(),
    };
    if let Some(path) = &args.config {
        let cfg = RunConfig::load(path, &[])?;
        train.grpo = cfg.grpo;
        train.ctde = cfg.ctde;
    }
    if !args.overrides.is_empty() {
        let mut value = serde_json::to_value(&train).map_err(anyhow::Error::from)?;
        for o in &args.overrides {
            apply_override(&mut value, o)?;
        }
        train = serde_json::from_value(value).context("applying overrides")?;
    }
    let result = train_toy(&train).map_err(anyhow::Error::from)?;
    fs::create_dir_all(&args.output)
        .with_context(|| format!("creating {}", args.output.display()))?;
    let csv_path = args.output.join("diagnostics.csv");
    let file = fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    write_diagnostics_csv(&result.rows, BufWriter::new(file)).map_err(anyhow::Error::from)?;
    let summary = serde_json::json!({
        "config": train,
        "expected_reward": result.expected_reward,
        "optimum": result.optimum,
        "fraction_of_optimum": result.expected_reward / result.optimum,
        "policies": result.policies,
    });
    fs::write(
        args.output.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)? + "\n",
    )
    .context("writing summary")?;
    println!(
        "{} on {}: expected reward {:.4} of optimum {:.4}",
        train.algo, result.env.name, result.expected_reward, result.optimum
    );
    Ok(())
}

fn cmd_perturb(args: &PerturbArgs) -> Result<(), Failure> {
    let items = load_dataset(&args.input, args.schema)
        .with_context(|| format!("loading {}", args.input.display()))?;
    let swaps = match &args.swap_table {
        Some(p) => SwapTable::load(p).map_err(anyhow::Error::from)?,
        None => SwapTable::default(),
    };
    let mut out = Vec::with_capacity(items.len());
    let mut skipped = 0usize;
    for item in &items {
        match &args.regime {
            Regime::Clean => out.push(item.clone()),
            Regime::Linguistic { intensity } => {
                out.push(perturb_linguistic(item, args.seed, *intensity).map_err(anyhow::Error::from)?)
            }
            Regime::Adversarial => out.push(perturb_adversarial(item, args.seed)),
            Regime::Demographic { attribute } => {
                match perturb_demographic(item, attribute, &swaps).map_err(anyhow::Error::from)? {
                    DemographicOutcome::Perturbed(p) => out.push(p),
                    DemographicOutcome::Skipped { item_id, reason } => {
                        skipped += 1;
                        eprintln!("skipped {item_id}: {reason}");
                    }
                }
            }
        }
    }
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_dataset(&args.output, &out).with_context(|| format!("writing {}", args.output.display()))?;
    println!("wrote {} item(s), skipped {skipped}", out.len());
    Ok(())
}

fn cmd_metrics(args: &MetricsArgs) -> Result<(), Failure> {
    let (cells, reports) = replay(&args.archive).map_err(anyhow::Error::from)?;
    let out = args.output.as_deref().unwrap_or(&args.archive);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_reports(out, &cells, &reports).map_err(anyhow::Error::from)?;
    println!("recomputed {} cell report(s) for {} method(s)", cells.len(), reports.len());
    Ok(())
}

fn read_method_reports(dir: &Path) -> Result<Vec<MetricReport>> {
    let root = dir.join("reports");
    let mut paths: Vec<PathBuf> = fs::read_dir(&root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path().join("report.json")))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

fn markdown_table(reports: &[MetricReport]) -> String {
    let mut benchmarks: Vec<&String> = reports.iter().flat_map(|r| r.per_benchmark.keys()).collect();
    benchmarks.sort();
    benchmarks.dedup();
    let mut s = format!("| method | {} | gap |\n", benchmarks.iter().map(|b| b.as_str()).collect::<Vec<_>>().join(" | "));
    s.push_str(&format!("|---|{}---|\n", "---|".repeat(benchmarks.len())));
    for r in reports {
        let cells: Vec<String> = benchmarks
            .iter()
            .map(|b| {
                r.per_benchmark
                    .get(*b)
                    .and_then(|m| m.get("accuracy").or_else(|| m.get("hrr")))
                    .map_or("-".to_string(), |v| format!("{v:.1}"))
            })
            .collect();
        s.push_str(&format!("| {} | {} | {:.1} |\n", r.method, cells.join(" | "), r.gap));
    }
    s
}

fn cmd_report(args: &ReportArgs) -> Result<(), Failure> {
    let mut reports = Vec::new();
    for dir in &args.inputs {
        reports.extend(read_method_reports(dir)?);
    }
    if reports.is_empty() {
        return Err(anyhow!("no method reports found under the given inputs").into());
    }
    fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let file = fs::File::create(args.output.join("aggregate.csv")).context("creating aggregate.csv")?;
    MetricReport::write_csv(&reports, BufWriter::new(file)).map_err(anyhow::Error::from)?;
    let table = markdown_table(&reports);
    fs::write(args.output.join("summary.md"), &table).context("writing summary.md")?;
    print!("{table}");
    Ok(())
}

fn cmd_validate(args: &CommonArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let group: ValidatedConfig = validate_group_config(cfg.group.clone())
        .map_err(|e| anyhow!("group config: {e}"))?;
    check_matrix(&cfg.single_method())?;
    for m in ablations(&cfg.group) {
        validate_group_config(m.config).map_err(|e| anyhow!("ablation `{}`: {e}", m.label))?;
    }
    cfg.reward.validate().map_err(|e| anyhow!("reward: {e}"))?;
    cfg.grpo.validate().map_err(anyhow::Error::from)?;
    if cfg.ctde.batch_size == 0 {
        return Err(anyhow!("ctde.batch_size must be at least 1").into());
    }
    if let Some(path) = &cfg.corpus {
        load_corpus(path).with_context(|| format!("corpus {}", path.display()))?;
    }
    if let Some(path) = &cfg.swap_table {
        SwapTable::load(path).map_err(anyhow::Error::from)?;
    }
    let agents: Vec<String> = group.agents().iter().map(AgentId::to_string).collect();
    let effective = serde_json::to_string_pretty(&cfg).map_err(anyhow::Error::from)?;
    if let Err(e) = writeln!(std::io::stdout().lock(), "{effective}") {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            return Err(anyhow::Error::from(e).into());
        }
    }
    eprintln!("config ok: {} agent(s) [{}]", agents.len(), agents.join(", "));
    Ok(())
}
