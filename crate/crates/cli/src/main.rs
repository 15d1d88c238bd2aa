//! `advbench`: train targets, extract Q-functions, run benchmarks, compare reports.
//!
//! Exit codes: 0 success, 2 usage error, 3 training did not converge (outputs
//! still written), 4 I/O or schema error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advbench::adversarial::{CostModel, Mode, OverBudget};
use advbench::env::{CartPole, CartPoleParams};
use advbench::policy::{TargetKind, TrainConfig, TrainError, TrainerRegistry};
use advbench::qstar::{QError, QSource};
use advbench::report::{
    self, compare, comparison_csv, comparison_text, curve_csv, episodes_jsonl, extract_q, load, read_file, run_benchmark,
    run_benchmark_with_q, to_json, write_file, BenchError, BenchmarkReport, QArtifact, ReportError, RunConfig,
    TargetArtifact,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "advbench", version, about = "Adversarial resilience and robustness benchmarks for CartPole policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a DQN, A2C or PPO target and write its artifact and learning curve.
    TrainTarget(TrainTargetArgs),
    /// Extract a Q-function from a target artifact.
    ExtractQ(ExtractQArgs),
    /// Train an adversary against a target and evaluate it.
    Benchmark(BenchmarkArgs),
    /// Tabulate and rank benchmark reports.
    Compare(CompareArgs),
}

#[derive(Args)]
struct TrainTargetArgs {
    /// dqn, a2c or ppo (ppo2 is accepted).
    kind: String,
    /// Seed for network initialisation and exploration.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Seed for environment resets and validation episodes.
    #[arg(long, default_value_t = 1)]
    env_seed: u64,
    /// Override the training step budget.
    #[arg(long)]
    timesteps: Option<u64>,
    /// Override the competence threshold on the validation mean return.
    #[arg(long)]
    gate_threshold: Option<f64>,
    /// Validation mean return that ends training early.
    #[arg(long)]
    early_stop: Option<f64>,
    /// Training configuration as JSON (replaces the defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Direct,
    ValueLookahead,
    Imitation,
}

impl From<SourceArg> for QSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Direct => QSource::Direct,
            SourceArg::ValueLookahead => QSource::ValueLookahead,
            SourceArg::Imitation => QSource::Imitated,
        }
    }
}

#[derive(Args)]
struct ExtractQArgs {
    target: PathBuf,
    /// Defaults to direct for DQN targets and value-lookahead otherwise.
    #[arg(long, value_enum)]
    source: Option<SourceArg>,
    #[arg(long)]
    imitation_transitions: Option<usize>,
    #[arg(long)]
    imitation_seed: Option<u64>,
    /// Output path; defaults to `<target stem>.q.json` next to the target.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Resilience,
    Robustness,
}

#[derive(Clone, Copy, ValueEnum)]
enum OverBudgetArg {
    Penalize,
    Block,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(value_enum)]
    mode: ModeArg,
    target: PathBuf,
    /// Start from a run configuration, or from the config embedded in a report.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use a stored Q-function instead of extracting one.
    #[arg(long)]
    q_artifact: Option<PathBuf>,
    #[arg(long)]
    delta_max: Option<u32>,
    #[arg(long, value_enum)]
    over_budget: Option<OverBudgetArg>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    adversary_seed: Option<u64>,
    #[arg(long)]
    eval_seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    regret_window: Option<usize>,
    #[arg(long)]
    regret_tolerance: Option<f64>,
    #[arg(long)]
    stability_window: Option<usize>,
    #[arg(long)]
    perturb_avg_window: Option<usize>,
    #[arg(long)]
    perturb_std_tolerance: Option<f64>,
    /// Uniform perturbation cost.
    /// Number of distinct training-episode seeds the adversary cycles through.
    #[arg(long)]
    nominal_seed_pool: Option<usize>,
    #[arg(long)]
    cost: Option<f64>,
    #[arg(long, value_enum)]
    q_source: Option<SourceArg>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// File name prefix; defaults to `<kind>-<mode>[-d<delta>]`.
    #[arg(long)]
    prefix: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    NotConverged(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::NotConverged(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Q(QError::ImitationFailed { .. }) => CliError::NotConverged(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn train_target(args: TrainTargetArgs) -> Result<(), CliError> {
    let kind: TargetKind = args.kind.parse().map_err(CliError::Usage)?;
    let mut config = match &args.config {
        Some(path) => serde_json::from_str::<TrainConfig>(&read_file(path)?)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
        None => TrainConfig::default_for(kind),
    };
    if config.kind() != kind {
        return Err(CliError::Usage(format!("configuration is for {}, not {kind}", config.kind())));
    }
    if let Some(t) = args.timesteps {
        match &mut config {
            TrainConfig::Dqn(c) => c.timesteps = t,
            TrainConfig::A2c(c) => c.timesteps = t,
            TrainConfig::Ppo(c) => c.timesteps = t,
        }
    }
    if let Some(g) = args.gate_threshold {
        config.gate_mut().threshold = g;
    }
    if let Some(e) = args.early_stop {
        config.gate_mut().early_stop = e;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    ensure_dir(&args.out_dir)?;
    let registry = TrainerRegistry::with_builtins();
    let trainer = registry
        .for_kind(kind)
        .expect("every target kind has a trainer");
    let curve_path = args.out_dir.join(format!("{kind}.curve.csv"));
    let eval_path = args.out_dir.join(format!("{kind}.evaluations.csv"));
    match trainer.train(&config, CartPole::default(), args.env_seed, args.seed) {
        Ok(outcome) => {
            let artifact_path = args.out_dir.join(format!("{kind}.target.json"));
            write_file(&artifact_path, &to_json(&TargetArtifact::new(outcome.policy.clone())))?;
            write_file(&curve_path, &outcome.curve.to_csv())?;
            write_file(&eval_path, &outcome.curve.evaluations_csv())?;
            println!(
                "{kind}: validation mean return {:.2} over {} episodes; wrote {}",
                outcome.policy.final_eval_return,
                outcome.curve.episode_returns.len(),
                artifact_path.display()
            );
            Ok(())
        }
        Err(TrainError::NotConverged {
            best_eval,
            threshold,
            curve,
            ..
        }) => {
            write_file(&curve_path, &curve.to_csv())?;
            write_file(&eval_path, &curve.evaluations_csv())?;
            Err(CliError::NotConverged(format!(
                "{kind}: best validation mean {best_eval:.2} below {threshold}; learning curve in {}",
                curve_path.display()
            )))
        }
        Err(e) => Err(CliError::Usage(e.to_string())),
    }
}

fn load_target(path: &Path) -> Result<TargetArtifact, CliError> {
    let artifact: TargetArtifact = load(path)?;
    if artifact.fingerprint != artifact.policy.fingerprint() {
        return Err(CliError::Io(format!("{}: fingerprint does not match policy contents", path.display())));
    }
    Ok(artifact)
}

fn extract(args: ExtractQArgs) -> Result<(), CliError> {
    let target = load_target(&args.target)?.policy;
    let mut config = RunConfig::new(Mode::Resilience, target.kind);
    if let Some(s) = args.source {
        config.q_source = s.into();
    }
    if let Some(n) = args.imitation_transitions {
        config.imitation.transitions = n;
    }
    if let Some(s) = args.imitation_seed {
        config.imitation.seed = s;
    }
    let q = extract_q(&target, &config)?;
    let out = args.out.unwrap_or_else(|| {
        let stem = args.target.file_name().and_then(|s| s.to_str()).unwrap_or("target");
        let stem = stem.strip_suffix(".target.json").unwrap_or(stem);
        args.target.with_file_name(format!("{stem}.q.json"))
    });
    if let Some(r) = q.imitation_report() {
        println!("imitation held-out agreement {:.4} on {} transitions", r.holdout_agreement, r.transitions);
    }
    write_file(&out, &to_json(&QArtifact::new(q)))?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Accepts either a bare run configuration or a report embedding one.
fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = read_file(path)?;
    if let Ok(report) = report::from_json::<BenchmarkReport>(&text, &path.display().to_string()) {
        return Ok(report.config);
    }
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: not a run configuration or report: {e}", path.display())))
}

fn benchmark(args: BenchmarkArgs) -> Result<(), CliError> {
    let target = load_target(&args.target)?.policy;
    let mode = match args.mode {
        ModeArg::Resilience => Mode::Resilience,
        ModeArg::Robustness => Mode::Robustness,
    };
    let mut config = match &args.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::new(mode, target.kind),
    };
    config.mode = mode;
    if args.config.is_none() && mode == Mode::Robustness && args.delta_max.is_none() {
        return Err(CliError::Usage("robustness mode needs --delta-max".into()));
    }
    if let Some(d) = args.delta_max {
        config.budget.delta_max = Some(d);
    }
    if let Some(o) = args.over_budget {
        config.budget.over_budget = match o {
            OverBudgetArg::Penalize => OverBudget::Penalize,
            OverBudgetArg::Block => OverBudget::Block,
        };
    }
    if let Some(n) = args.episodes {
        config.episodes = n;
    }
    if let Some(s) = args.adversary_seed {
        config.seeds.adversary = s;
    }
    if let Some(s) = args.eval_seed {
        config.seeds.eval = s;
    }
    if let Some(v) = args.max_steps {
        config.criteria.max_steps = v;
        config.adversary.timesteps = v;
    }
    let c = &mut config.criteria;
    if let Some(v) = args.regret_window {
        c.regret_window = v;
    }
    if let Some(v) = args.regret_tolerance {
        c.regret_tolerance = v;
    }
    if let Some(v) = args.stability_window {
        c.stability_window = v;
    }
    if let Some(v) = args.perturb_avg_window {
        c.perturb_avg_window = v;
    }
    if let Some(v) = args.perturb_std_tolerance {
        c.perturb_std_tolerance = v;
    }
    if let Some(v) = args.nominal_seed_pool {
        config.nominal_seed_pool = v;
    }
    if let Some(v) = args.cost {
        config.cost = CostModel::Uniform { cost: v };
    }
    if let Some(s) = args.q_source {
        config.q_source = s.into();
    }
    config.seeds.env = target.env_seed;
    config.seeds.train = target.train_seed;
    if config.physics != CartPoleParams::default() {
        eprintln!("note: non-default cart-pole parameters in configuration");
    }
    config.validate()?;
    ensure_dir(&args.out_dir)?;

    let run = match &args.q_artifact {
        Some(path) => {
            let q: QArtifact = load(path)?;
            run_benchmark_with_q(&target, &config, q.q)?
        }
        None => run_benchmark(&target, &config)?,
    };
    let prefix = args.prefix.unwrap_or_else(|| match config.budget.delta_max {
        Some(d) if mode == Mode::Robustness => format!("{}-{mode}-d{d}", target.kind),
        _ => format!("{}-{mode}", target.kind),
    });
    let path = |suffix: &str| args.out_dir.join(format!("{prefix}.{suffix}"));
    write_file(&path("report.json"), &to_json(&run.report))?;
    write_file(&path("episodes.jsonl"), &episodes_jsonl(&run.records))?;
    write_file(&path("histogram.csv"), &run.report.histogram.to_csv())?;
    write_file(&path("curve.csv"), &curve_csv(&run.curve))?;
    write_file(&path("adversary.json"), &to_json(&run.adversary))?;

    let r = &run.report;
    println!(
        "{} {mode}: mean regret {:.2}, mean perturbations {:.2}, max regret {:.0}, converged {}",
        target.kind, r.test.mean_regret, r.test.mean_perturbations, r.epsilon_max, r.training.converged
    );
    println!("wrote {}", path("report.json").display());
    if r.training.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!(
            "adversary did not converge within {} steps; evaluated the {:?} checkpoint",
            r.training.steps, r.training.checkpoint
        )))
    }
}

fn compare_reports(args: CompareArgs) -> Result<(), CliError> {
    let reports = args
        .reports
        .iter()
        .map(|p| load::<BenchmarkReport>(p))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = compare(&reports)?;
    print!("{}", comparison_text(&rows));
    if let Some(path) = &args.csv {
        write_file(path, &comparison_csv(&rows))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::TrainTarget(a) => train_target(a),
        Command::ExtractQ(a) => extract(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Compare(a) => compare_reports(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
