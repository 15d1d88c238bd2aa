//! Run configuration, versioned artifacts and reports, and the comparison table.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversarial::{BudgetConfig, CostModel, Mode, OverBudget};
use crate::benchmark::{
    run_resilience, run_robustness, train_adversary, Adversary, BenchmarkSetup, Checkpoint, ConvergenceCriteria,
    CurvePoint, EpisodeRecord, PerturbationHistogram, TestResults, TestSummary, TRAINING_AVERAGE_WINDOW,
};
use crate::env::{CartPole, CartPoleParams};
use crate::policy::{DqnConfig, TargetKind, TargetPolicy};
use crate::qstar::{ExtractContext, ExtractedQ, ExtractorRegistry, ImitationConfig, ImitationReport, QError, QFunction, QProvenance, QSource};
use crate::rl::mean;

/// Bumped whenever a serialized field changes meaning or name.
pub const SCHEMA_VERSION: u32 = 1;
pub const SUITE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{context}: schema version {found}, expected {expected}")]
    Schema { context: String, found: u64, expected: u32 },
    #[error("cannot compare reports with schema versions {0:?}")]
    MixedSchemas(Vec<u32>),
    #[error("nothing to compare")]
    NoReports,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Q(#[from] QError),
}

/// All seeds of an experiment. Targets use `env` and `train`; the benchmark
/// uses `adversary` for training episodes and network initialisation and
/// `eval` for test episodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub env: u64,
    pub train: u64,
    pub adversary: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            env: 1,
            train: 7,
            adversary: 3,
            eval: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub budget: BudgetConfig,
    /// Test episodes (N).
    pub episodes: usize,
    pub seeds: Seeds,
    pub criteria: ConvergenceCriteria,
    pub cost: CostModel,
    pub r_max: f64,
    pub q_source: QSource,
    pub imitation: ImitationConfig,
    pub adversary: DqnConfig,
    /// Distinct training-episode seeds cycled through by the adversary.
    pub nominal_seed_pool: usize,
    pub physics: CartPoleParams,
}

impl RunConfig {
    /// Default run configuration for `mode` against a `kind` target.
    pub fn new(mode: Mode, kind: TargetKind) -> Self {
        Self {
            mode,
            budget: BudgetConfig::default(),
            episodes: 100,
            seeds: Seeds::default(),
            criteria: ConvergenceCriteria::default(),
            cost: CostModel::default(),
            r_max: 500.0,
            q_source: QSource::default_for(kind),
            imitation: ImitationConfig::default(),
            adversary: DqnConfig::default(),
            nominal_seed_pool: 1000,
            physics: CartPoleParams::default(),
        }
    }

    pub fn robustness(kind: TargetKind, delta_max: u32) -> Self {
        Self {
            budget: BudgetConfig::with_delta_max(delta_max),
            ..Self::new(Mode::Robustness, kind)
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let err = |m: String| Err(BenchError::Config(m));
        if self.episodes == 0 {
            return err("episodes must be at least 1".into());
        }
        if !(self.r_max.is_finite() && self.r_max > 0.0) {
            return err(format!("r_max must be positive, got {}", self.r_max));
        }
        if self.nominal_seed_pool == 0 {
            return err("nominal_seed_pool must be positive".into());
        }
        self.budget.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        self.cost.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        if let CostModel::PerAction { costs } = &self.cost {
            if costs.len() != 2 {
                return err(format!("per-action costs need 2 entries, got {}", costs.len()));
            }
        }
        self.criteria.validate().map_err(BenchError::Config)?;
        self.adversary.validate().map_err(BenchError::Config)?;
        if self.mode == Mode::Resilience && self.budget.delta_max.is_some() {
            return err("delta_max only applies to robustness mode".into());
        }
        Ok(())
    }
}

/// Choices the benchmark makes where the method leaves room.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignFlags {
    /// Adversary exploration; epsilon-greedy stands in for parameter-space noise.
    pub exploration: String,
    pub q_source: QSource,
    pub induced_action: String,
    pub terminal_check: String,
    pub over_budget: OverBudget,
    pub nominal_return: String,
    pub training_average_window: usize,
    pub convergence_after_exploration: bool,
    pub nonconverged_checkpoint: String,
}

impl DesignFlags {
    fn for_config(config: &RunConfig) -> Self {
        Self {
            exploration: "epsilon_greedy".into(),
            q_source: config.q_source,
            induced_action: "argmin_q_excluding_target_action_lowest_index".into(),
            terminal_check: "post_step".into(),
            over_budget: config.budget.over_budget,
            nominal_return: "measured_per_seed".into(),
            training_average_window: TRAINING_AVERAGE_WINDOW,
            convergence_after_exploration: true,
            nonconverged_checkpoint: "best_trailing_mean_adversary_return".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetDescriptor {
    pub kind: TargetKind,
    pub fingerprint: String,
    pub env_seed: u64,
    pub train_seed: u64,
    pub final_eval_return: f64,
}

impl TargetDescriptor {
    pub fn of(target: &TargetPolicy) -> Self {
        Self {
            kind: target.kind,
            fingerprint: target.fingerprint(),
            env_seed: target.env_seed,
            train_seed: target.train_seed,
            final_eval_return: target.final_eval_return,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub converged: bool,
    pub checkpoint: Checkpoint,
    pub checkpoint_episode: usize,
    pub steps: u64,
    pub episodes: usize,
    /// Best trailing mean adversary return (R*_perturbed).
    pub optimal_adversarial_return: f64,
    /// Largest single-episode regret seen in training (R*_adv).
    pub max_adversarial_regret: f64,
    /// Mean regret over the window ending at the checkpoint.
    pub avg_regret: f64,
    pub avg_perturbations: f64,
}

impl TrainingSummary {
    pub fn from_curve(curve: &[CurvePoint], converged: bool, checkpoint: Checkpoint, checkpoint_episode: usize, steps: u64) -> Self {
        let upto = &curve[..checkpoint_episode.min(curve.len())];
        let window = &upto[upto.len().saturating_sub(TRAINING_AVERAGE_WINDOW)..];
        let col = |f: fn(&CurvePoint) -> f64| window.iter().map(f).collect::<Vec<_>>();
        let returns: Vec<f64> = curve.iter().map(|p| p.adversary_return).collect();
        let window_len = TRAINING_AVERAGE_WINDOW.min(returns.len()).max(1);
        let best = returns
            .windows(window_len)
            .map(mean)
            .fold(f64::NEG_INFINITY, f64::max);
        Self {
            converged,
            checkpoint,
            checkpoint_episode,
            steps,
            episodes: curve.len(),
            optimal_adversarial_return: if best.is_finite() { best } else { 0.0 },
            max_adversarial_regret: curve.iter().map(|p| p.regret).fold(0.0, f64::max),
            avg_regret: mean(&col(|p| p.regret)),
            avg_perturbations: mean(&col(|p| f64::from(p.perturbations))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub suite_version: String,
    pub mode: Mode,
    pub target: TargetDescriptor,
    pub budget: BudgetConfig,
    pub config: RunConfig,
    pub design: DesignFlags,
    pub q: QProvenance,
    pub imitation: Option<ImitationReport>,
    pub training: TrainingSummary,
    pub test: TestSummary,
    /// Largest test-time regret (epsilon_max under a budget).
    pub epsilon_max: f64,
    pub histogram: PerturbationHistogram,
}

/// A report together with the data it summarises.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRun {
    pub report: BenchmarkReport,
    pub records: Vec<EpisodeRecord>,
    pub curve: Vec<CurvePoint>,
    pub adversary: Adversary,
}

/// Extracts the configured Q-function from `target`.
pub fn extract_q(target: &TargetPolicy, config: &RunConfig) -> Result<ExtractedQ, BenchError> {
    let ctx = ExtractContext {
        physics: CartPole::new(config.physics),
        imitation: config.imitation.clone(),
    };
    Ok(ExtractorRegistry::with_builtins().extract(config.q_source, target, &ctx)?)
}

/// Trains an adversary and evaluates it, everything derived from `config`.
pub fn run_benchmark(target: &TargetPolicy, config: &RunConfig) -> Result<BenchmarkRun, BenchError> {
    config.validate()?;
    let q = extract_q(target, config)?;
    run_benchmark_with_q(target, config, q)
}

/// As [`run_benchmark`] with a previously extracted Q-function, which must
/// come from `target` and match `config.q_source`.
pub fn run_benchmark_with_q(target: &TargetPolicy, config: &RunConfig, q: ExtractedQ) -> Result<BenchmarkRun, BenchError> {
    config.validate()?;
    let provenance = q.provenance().clone();
    if provenance.target_id != target.fingerprint() {
        return Err(BenchError::Config("Q-function was extracted from a different target".into()));
    }
    if provenance.source != config.q_source {
        return Err(BenchError::Config(format!(
            "Q-function source {:?} does not match configured {:?}",
            provenance.source, config.q_source
        )));
    }
    let imitation = q.imitation_report().cloned();
    let setup = BenchmarkSetup {
        physics: CartPole::new(config.physics),
        target: Arc::new(target.clone()),
        q: Arc::new(q),
        mode: config.mode,
        budget: config.budget,
        cost: config.cost.clone(),
        r_max: config.r_max,
    };
    let criteria = ConvergenceCriteria {
        max_steps: config.criteria.max_steps.min(config.adversary.timesteps),
        ..config.criteria
    };
    let training = train_adversary(&setup, &config.adversary, &criteria, config.seeds.adversary, config.nominal_seed_pool);
    let results: TestResults = match config.mode {
        Mode::Resilience => run_resilience(&setup, &training.adversary, config.episodes, config.seeds.eval),
        Mode::Robustness => run_robustness(&setup, &training.adversary, config.episodes, config.seeds.eval),
    };
    let report = BenchmarkReport {
        schema_version: SCHEMA_VERSION,
        suite_version: SUITE_VERSION.to_string(),
        mode: config.mode,
        target: TargetDescriptor::of(target),
        budget: config.budget,
        config: config.clone(),
        design: DesignFlags::for_config(config),
        q: provenance,
        imitation,
        training: TrainingSummary::from_curve(
            &training.curve,
            training.converged,
            training.checkpoint,
            training.checkpoint_episode,
            training.steps,
        ),
        epsilon_max: results.epsilon_max(),
        test: results.summary,
        histogram: results.histogram,
    };
    Ok(BenchmarkRun {
        report,
        records: results.records,
        curve: training.curve,
        adversary: training.adversary,
    })
}

/// A stored target policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetArtifact {
    pub schema_version: u32,
    pub suite_version: String,
    pub fingerprint: String,
    pub policy: TargetPolicy,
}

impl TargetArtifact {
    pub fn new(policy: TargetPolicy) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            suite_version: SUITE_VERSION.to_string(),
            fingerprint: policy.fingerprint(),
            policy,
        }
    }
}

/// A stored Q-function.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QArtifact {
    pub schema_version: u32,
    pub suite_version: String,
    pub q: ExtractedQ,
}

impl QArtifact {
    pub fn new(q: ExtractedQ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            suite_version: SUITE_VERSION.to_string(),
            q,
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifacts always serialize");
    s.push('\n');
    s
}

/// Parses a versioned document, checking `schema_version` before anything else.
pub fn from_json<T: DeserializeOwned>(text: &str, context: &str) -> Result<T, ReportError> {
    let json_err = |source| ReportError::Json {
        context: context.to_string(),
        source,
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(json_err)?;
    let found = value.get("schema_version").and_then(serde_json::Value::as_u64);
    match found {
        Some(v) if v == u64::from(SCHEMA_VERSION) => serde_json::from_value(value).map_err(json_err),
        other => Err(ReportError::Schema {
            context: context.to_string(),
            found: other.unwrap_or(0),
            expected: SCHEMA_VERSION,
        }),
    }
}

pub fn read_file(path: &Path) -> Result<String, ReportError> {
    std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    std::fs::write(path, contents).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, ReportError> {
    from_json(&read_file(path)?, &path.display().to_string())
}

/// One JSON object per line.
pub fn episodes_jsonl(records: &[EpisodeRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records always serialize") + "\n")
        .collect()
}

pub fn parse_episodes_jsonl(text: &str) -> Result<Vec<EpisodeRecord>, ReportError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|source| ReportError::Json {
                context: format!("episode log line {}", i + 1),
                source,
            })
        })
        .collect()
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("episode,total_steps,adversary_return,regret,perturbations,length\n");
    for (i, p) in curve.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{}",
            p.total_steps, p.adversary_return, p.regret, p.perturbations, p.length
        );
    }
    out
}

pub fn parse_histogram_csv(text: &str) -> Result<Vec<u64>, String> {
    let mut lines = text.lines();
    if lines.next() != Some("timestep,count") {
        return Err("missing `timestep,count` header".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let (t, c) = line.split_once(',').ok_or_else(|| format!("line {}: expected two columns", i + 2))?;
            if t.parse::<usize>().ok() != Some(i) {
                return Err(format!("line {}: timestep out of order", i + 2));
            }
            c.parse().map_err(|e| format!("line {}: {e}", i + 2))
        })
        .collect()
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// 1 is the least resilient (fewest perturbations needed).
    pub rank: usize,
    pub target: TargetKind,
    pub mode: Mode,
    pub delta_max: Option<u32>,
    pub max_regret: f64,
    pub avg_regret_training: f64,
    pub avg_perturbations_training: f64,
    pub avg_regret: f64,
    pub avg_perturbations: f64,
    pub converged: bool,
}

/// Ranks reports by mean test-time perturbation count, ties by target name.
pub fn compare(reports: &[BenchmarkReport]) -> Result<Vec<ComparisonRow>, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::NoReports);
    }
    let mut versions: Vec<u32> = reports.iter().map(|r| r.schema_version).collect();
    versions.sort_unstable();
    versions.dedup();
    if versions.len() > 1 {
        return Err(ReportError::MixedSchemas(versions));
    }
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            rank: 0,
            target: r.target.kind,
            mode: r.mode,
            delta_max: r.budget.delta_max,
            max_regret: r.training.max_adversarial_regret,
            avg_regret_training: r.training.avg_regret,
            avg_perturbations_training: r.training.avg_perturbations,
            avg_regret: r.test.mean_regret,
            avg_perturbations: r.test.mean_perturbations,
            converged: r.training.converged,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.avg_perturbations
            .total_cmp(&b.avg_perturbations)
            .then_with(|| a.target.name().cmp(b.target.name()))
    });
    for (i, row) in rows.iter_mut().enumerate() {
        row.rank = i + 1;
    }
    Ok(rows)
}

fn budget_label(delta: Option<u32>) -> String {
    delta.map_or_else(|| "-".to_string(), |d| d.to_string())
}

pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "{:<4} {:<6} {:<10} {:>5} {:>10} {:>14} {:>14} {:>10} {:>10} {:>9}\n",
        "rank",
        "target",
        "mode",
        "delta",
        "max_regret",
        "train_regret",
        "train_perturb",
        "regret",
        "perturb",
        "converged"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<4} {:<6} {:<10} {:>5} {:>10.2} {:>14.2} {:>14.2} {:>10.2} {:>10.2} {:>9}",
            r.rank,
            r.target.name(),
            r.mode.name(),
            budget_label(r.delta_max),
            r.max_regret,
            r.avg_regret_training,
            r.avg_perturbations_training,
            r.avg_regret,
            r.avg_perturbations,
            r.converged
        );
    }
    out
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(
        "rank,target,mode,delta_max,max_regret,avg_regret_training,avg_perturbations_training,avg_regret,avg_perturbations,converged\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.rank,
            r.target.name(),
            r.mode.name(),
            r.delta_max.map_or_else(String::new, |d| d.to_string()),
            r.max_regret,
            r.avg_regret_training,
            r.avg_perturbations_training,
            r.avg_regret,
            r.avg_perturbations,
            r.converged
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(regret: f64, perturbations: u32, adversary_return: f64) -> CurvePoint {
        CurvePoint {
            adversary_return,
            regret,
            perturbations,
            length: 9,
            total_steps: 0,
        }
    }

    #[test]
    fn training_summary_uses_window_ending_at_checkpoint() {
        let mut curve: Vec<_> = (0..150).map(|_| point(400.0, 10, 390.0)).collect();
        curve.extend((0..100).map(|_| point(490.0, 7, 483.0)));
        curve.extend((0..50).map(|_| point(100.0, 30, 70.0)));
        let s = TrainingSummary::from_curve(&curve, false, Checkpoint::Best, 250, 1000);
        assert_eq!(s.avg_regret, 490.0);
        assert_eq!(s.avg_perturbations, 7.0);
        assert_eq!(s.optimal_adversarial_return, 483.0);
        assert_eq!(s.max_adversarial_regret, 490.0);
        assert_eq!(s.episodes, 300);
    }

    #[test]
    fn short_curve_summary() {
        let curve = vec![point(10.0, 1, 9.0), point(20.0, 3, 17.0)];
        let s = TrainingSummary::from_curve(&curve, false, Checkpoint::Final, 2, 20);
        assert_eq!(s.avg_regret, 15.0);
        assert_eq!(s.optimal_adversarial_return, 13.0);
    }

    #[test]
    fn schema_is_checked_before_parsing() {
        let err = from_json::<TargetArtifact>(r#"{"schema_version": 99}"#, "x").unwrap_err();
        assert!(matches!(err, ReportError::Schema { found: 99, .. }));
        let err = from_json::<TargetArtifact>(r#"{"policy": 1}"#, "x").unwrap_err();
        assert!(matches!(err, ReportError::Schema { found: 0, .. }));
        assert!(matches!(from_json::<TargetArtifact>("not json", "x"), Err(ReportError::Json { .. })));
    }

    #[test]
    fn histogram_csv_round_trip() {
        let h = PerturbationHistogram {
            counts: vec![4, 0, 7],
            total: 11,
            mean_episode_length: 9.0,
            first_quartile_fraction: Some(4.0 / 11.0),
        };
        assert_eq!(parse_histogram_csv(&h.to_csv()).unwrap(), h.counts);
        assert!(parse_histogram_csv("t,c\n").is_err());
    }

    #[test]
    fn run_config_validation() {
        assert!(RunConfig::new(Mode::Resilience, TargetKind::Dqn).validate().is_ok());
        assert!(RunConfig::robustness(TargetKind::Ppo, 5).validate().is_ok());
        let mut bad = RunConfig::new(Mode::Resilience, TargetKind::Dqn);
        bad.episodes = 0;
        assert!(bad.validate().is_err());
        let mut bad = RunConfig::new(Mode::Resilience, TargetKind::Dqn);
        bad.budget.delta_max = Some(3);
        assert!(bad.validate().is_err());
        let mut bad = RunConfig::new(Mode::Resilience, TargetKind::Dqn);
        bad.cost = CostModel::PerAction { costs: vec![1.0] };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn wrong_q_source_defaults() {
        assert_eq!(RunConfig::new(Mode::Resilience, TargetKind::Dqn).q_source, QSource::Direct);
        assert_eq!(RunConfig::new(Mode::Resilience, TargetKind::A2c).q_source, QSource::ValueLookahead);
    }
}
