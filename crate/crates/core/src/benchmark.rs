//! Adversary training, convergence detection and test-time evaluation.

use std::ops::ControlFlow;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adversarial::{AdversarialEnv, BudgetConfig, CostModel, Mode, RuleRegistry};
use crate::env::CartPole;
use crate::nn::Mlp;
use crate::policy::dqn::{run_episodes, DqnLearner};
use crate::policy::{DqnConfig, TargetPolicy};
use crate::qstar::QFunction;
use crate::rl::{argmax, derive_seed, mean, streams, Environment};

/// One test-time (or training-time) adversarial episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_index: u64,
    pub seed: u64,
    pub nominal_return: f64,
    pub perturbed_return: f64,
    pub regret: f64,
    pub cost_total: f64,
    pub adversary_return: f64,
    pub perturbation_timesteps: Vec<u32>,
    pub over_budget: u32,
    pub episode_length: u32,
}

impl EpisodeRecord {
    pub fn perturbations(&self) -> usize {
        self.perturbation_timesteps.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCriteria {
    pub regret_window: usize,
    pub regret_tolerance: f64,
    pub stability_window: usize,
    pub perturb_avg_window: usize,
    pub perturb_std_tolerance: f64,
    pub max_steps: u64,
}

impl Default for ConvergenceCriteria {
    fn default() -> Self {
        Self {
            regret_window: 200,
            regret_tolerance: 2.0,
            stability_window: 200,
            perturb_avg_window: 100,
            perturb_std_tolerance: 0.5,
            max_steps: 100_000,
        }
    }
}

impl ConvergenceCriteria {
    pub fn validate(&self) -> Result<(), String> {
        if self.regret_window == 0 || self.stability_window == 0 || self.perturb_avg_window == 0 {
            return Err("convergence windows must be positive".into());
        }
        if !(self.regret_tolerance > 0.0) || !(self.perturb_std_tolerance > 0.0) {
            return Err("convergence tolerances must be positive".into());
        }
        if self.max_steps == 0 {
            return Err("max_steps must be positive".into());
        }
        Ok(())
    }
}

/// Per-episode training statistics of the adversary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub adversary_return: f64,
    pub regret: f64,
    pub perturbations: u32,
    pub length: u32,
    pub total_steps: u64,
}

/// Means of every length-`window` window whose last element lies in the
/// final `ends` positions of `values`.
fn sliding_means(values: &[f64], window: usize, ends: usize) -> Vec<f64> {
    let n = values.len();
    let start = n + 1 - ends - window;
    let mut sum: f64 = values[start..start + window].iter().sum();
    let mut out = Vec::with_capacity(ends);
    out.push(sum / window as f64);
    for j in start + window..n {
        sum += values[j] - values[j - window];
        out.push(sum / window as f64);
    }
    out
}

/// Mean regret over sliding `regret_window`s stays within `regret_tolerance`
/// across the last `stability_window` episodes, and the sliding
/// `perturb_avg_window` mean of the perturbation count has a standard
/// deviation below `perturb_std_tolerance` over the same span.
pub fn converged(curve: &[CurvePoint], criteria: &ConvergenceCriteria) -> bool {
    let need = criteria.regret_window.max(criteria.perturb_avg_window) + criteria.stability_window;
    if curve.len() < need {
        return false;
    }
    let tail = &curve[curve.len() - need..];
    let regrets: Vec<f64> = tail.iter().map(|p| p.regret).collect();
    let means = sliding_means(&regrets, criteria.regret_window, criteria.stability_window);
    let (lo, hi) = means
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| (lo.min(m), hi.max(m)));
    if hi - lo >= criteria.regret_tolerance {
        return false;
    }
    let counts: Vec<f64> = tail.iter().map(|p| f64::from(p.perturbations)).collect();
    let means = sliding_means(&counts, criteria.perturb_avg_window, criteria.stability_window);
    let m = mean(&means);
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / means.len() as f64;
    var.sqrt() < criteria.perturb_std_tolerance
}

/// Everything needed to build adversarial environments against one target.
#[derive(Clone)]
pub struct BenchmarkSetup {
    pub physics: CartPole,
    pub target: Arc<TargetPolicy>,
    pub q: Arc<dyn QFunction>,
    pub mode: Mode,
    pub budget: BudgetConfig,
    pub cost: CostModel,
    pub r_max: f64,
}

impl BenchmarkSetup {
    pub fn env(&self) -> AdversarialEnv {
        let rule = RuleRegistry::with_builtins()
            .build(self.mode.name(), &self.budget)
            .expect("builtin rules cover every mode");
        AdversarialEnv::new(
            self.physics,
            self.target.clone(),
            self.q.clone(),
            rule,
            Arc::new(self.cost.clone()),
            self.r_max,
        )
    }

    /// Undisturbed greedy return of the target from `seed`.
    pub fn nominal_return(&self, seed: u64) -> f64 {
        let mut state = self.physics.reset(seed);
        let mut total = 0.0;
        while !self.physics.is_terminal(&state) {
            let (next, step) = self.physics.step(&state, self.target.greedy_action(&state.observation()));
            total += step.reward;
            state = next;
        }
        total
    }
}

/// A trained adversary: a Q-network over encoded augmented states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adversary {
    pub mode: Mode,
    pub budget: BudgetConfig,
    pub q_network: Mlp,
}

impl Adversary {
    pub fn act(&self, encoded: &[f64]) -> usize {
        argmax(&self.q_network.eval(encoded))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoint {
    /// Network at the moment convergence was detected.
    Converged,
    /// Highest trailing mean adversary return seen after exploration.
    Best,
    /// Last network; no post-exploration episode finished.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryTraining {
    pub adversary: Adversary,
    pub curve: Vec<CurvePoint>,
    pub converged: bool,
    pub checkpoint: Checkpoint,
    pub steps: u64,
    /// Episode after which the evaluated network was taken.
    pub checkpoint_episode: usize,
}

/// Window over which training-time averages are reported.
pub const TRAINING_AVERAGE_WINDOW: usize = 100;

fn trailing<F: Fn(&CurvePoint) -> f64>(curve: &[CurvePoint], window: usize, f: F) -> f64 {
    let tail = &curve[curve.len().saturating_sub(window)..];
    mean(&tail.iter().map(f).collect::<Vec<_>>())
}

/// Seed of training episode `index`, drawn from a fixed pool so nominal
/// returns can be cached.
pub fn training_seed(adversary_seed: u64, index: u64, pool: usize) -> u64 {
    derive_seed(adversary_seed, streams::ADVERSARY_EPISODES, index % pool.max(1) as u64)
}

/// Trains a DQN adversary in the wrapped MDP until `criteria` are met or the
/// step budget runs out. Convergence is only tested once exploration has
/// annealed.
pub fn train_adversary(
    setup: &BenchmarkSetup,
    dqn: &DqnConfig,
    criteria: &ConvergenceCriteria,
    adversary_seed: u64,
    nominal_pool: usize,
) -> AdversaryTraining {
    let mut env = setup.env();
    let mut learner = DqnLearner::new(dqn, env.observation_dim(), env.action_count(), adversary_seed);
    let mut nominal: Vec<Option<f64>> = vec![None; nominal_pool.max(1)];
    let mut curve = Vec::new();
    let mut best: Option<(f64, Mlp, usize)> = None;
    let mut converged_net: Option<Mlp> = None;

    run_episodes(
        &mut learner,
        &mut env,
        |i| training_seed(adversary_seed, i, nominal_pool),
        |learner, env, end| {
            let slot = (end.index % nominal_pool.max(1) as u64) as usize;
            let nominal_return = *nominal[slot]
                .get_or_insert_with(|| setup.nominal_return(training_seed(adversary_seed, end.index, nominal_pool)));
            let tally = env.tally();
            curve.push(CurvePoint {
                adversary_return: end.episode_return,
                regret: nominal_return - tally.target_return,
                perturbations: tally.perturbation_timesteps.len() as u32,
                length: end.length,
                total_steps: end.total_steps,
            });
            if learner.exploration_done() {
                let score = trailing(&curve, TRAINING_AVERAGE_WINDOW, |p| p.adversary_return);
                if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                    best = Some((score, learner.network().clone(), curve.len()));
                }
                if converged(&curve, criteria) {
                    converged_net = Some(learner.network().clone());
                    return ControlFlow::Break(());
                }
            }
            if end.total_steps >= criteria.max_steps {
                return ControlFlow::Break(());
            }
            ControlFlow::Continue(())
        },
    );

    let (q_network, checkpoint, checkpoint_episode) = match (converged_net, best) {
        (Some(net), _) => (net, Checkpoint::Converged, curve.len()),
        (None, Some((_, net, episode))) => (net, Checkpoint::Best, episode),
        (None, None) => (learner.network().clone(), Checkpoint::Final, curve.len()),
    };
    AdversaryTraining {
        adversary: Adversary {
            mode: setup.mode,
            budget: setup.budget,
            q_network,
        },
        converged: checkpoint == Checkpoint::Converged,
        checkpoint,
        checkpoint_episode,
        steps: learner.steps(),
        curve,
    }
}

/// Runs `episodes` evaluation episodes with `policy` choosing adversarial
/// actions. Episode `i` starts from `derive_seed(eval_seed, EVALUATION, i)`.
pub fn evaluate_adversary(
    setup: &BenchmarkSetup,
    policy: impl Fn(&[f64]) -> usize,
    episodes: usize,
    eval_seed: u64,
) -> Vec<EpisodeRecord> {
    let mut env = setup.env();
    (0..episodes as u64)
        .map(|i| {
            let seed = derive_seed(eval_seed, streams::EVALUATION, i);
            let mut obs = env.reset(seed);
            loop {
                let step = env.step(policy(&obs));
                if step.terminal {
                    break;
                }
                obs = step.observation;
            }
            let tally = env.tally();
            let nominal_return = setup.nominal_return(seed);
            EpisodeRecord {
                episode_index: i,
                seed,
                nominal_return,
                perturbed_return: tally.target_return,
                regret: nominal_return - tally.target_return,
                cost_total: tally.cost_total,
                adversary_return: tally.adversary_return,
                perturbation_timesteps: tally.perturbation_timesteps.clone(),
                over_budget: tally.over_budget,
                episode_length: tally.length,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub episodes: usize,
    pub mean_regret: f64,
    pub max_regret: f64,
    pub min_regret: f64,
    pub mean_cost: f64,
    pub mean_perturbations: f64,
    pub mean_adversary_return: f64,
    pub mean_episode_length: f64,
    pub mean_nominal_return: f64,
}

impl TestSummary {
    pub fn from_records(records: &[EpisodeRecord]) -> Self {
        let col = |f: fn(&EpisodeRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
        let regrets = col(|r| r.regret);
        Self {
            episodes: records.len(),
            mean_regret: mean(&regrets),
            max_regret: regrets.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            min_regret: regrets.iter().cloned().fold(f64::INFINITY, f64::min),
            mean_cost: mean(&col(|r| r.cost_total)),
            mean_perturbations: mean(&col(|r| r.perturbations() as f64)),
            mean_adversary_return: mean(&col(|r| r.adversary_return)),
            mean_episode_length: mean(&col(|r| f64::from(r.episode_length))),
            mean_nominal_return: mean(&col(|r| r.nominal_return)),
        }
    }
}

/// Perturbation events per episodic timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationHistogram {
    pub counts: Vec<u64>,
    pub total: u64,
    pub mean_episode_length: f64,
    /// Share of perturbations at `t < mean_episode_length / 4`; `None` when
    /// nothing was perturbed.
    pub first_quartile_fraction: Option<f64>,
}

impl PerturbationHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestep,count\n");
        for (t, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{t},{c}\n"));
        }
        out
    }
}

/// Panics on an empty slice.
pub fn perturbation_histogram(records: &[EpisodeRecord]) -> PerturbationHistogram {
    assert!(!records.is_empty(), "histogram of zero episodes");
    let len = records
        .iter()
        .flat_map(|r| r.perturbation_timesteps.iter())
        .map(|&t| t as usize + 1)
        .max()
        .unwrap_or(0);
    let mut counts = vec![0u64; len];
    for &t in records.iter().flat_map(|r| r.perturbation_timesteps.iter()) {
        counts[t as usize] += 1;
    }
    let total: u64 = counts.iter().sum();
    let mean_episode_length = mean(&records.iter().map(|r| f64::from(r.episode_length)).collect::<Vec<_>>());
    let cutoff = mean_episode_length / 4.0;
    let early: u64 = counts.iter().enumerate().filter(|(t, _)| (*t as f64) < cutoff).map(|(_, c)| c).sum();
    PerturbationHistogram {
        first_quartile_fraction: (total > 0).then(|| early as f64 / total as f64),
        counts,
        total,
        mean_episode_length,
    }
}

/// Test-time results for one adversary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResults {
    pub records: Vec<EpisodeRecord>,
    pub summary: TestSummary,
    pub histogram: PerturbationHistogram,
}

impl TestResults {
    pub fn from_records(records: Vec<EpisodeRecord>) -> Self {
        Self {
            summary: TestSummary::from_records(&records),
            histogram: perturbation_histogram(&records),
            records,
        }
    }

    /// Maximum regret under the budget.
    pub fn epsilon_max(&self) -> f64 {
        self.summary.max_regret
    }
}

fn run(setup: &BenchmarkSetup, adversary: &Adversary, mode: Mode, episodes: usize, eval_seed: u64) -> TestResults {
    assert_eq!(adversary.mode, mode, "adversary trained for {} mode", adversary.mode);
    assert_eq!(setup.mode, mode, "setup configured for {} mode", setup.mode);
    TestResults::from_records(evaluate_adversary(setup, |obs| adversary.act(obs), episodes, eval_seed))
}

/// Greedy adversary against the target, resilience accounting.
pub fn run_resilience(setup: &BenchmarkSetup, adversary: &Adversary, episodes: usize, eval_seed: u64) -> TestResults {
    run(setup, adversary, Mode::Resilience, episodes, eval_seed)
}

/// Greedy adversary against the target, robustness accounting.
pub fn run_robustness(setup: &BenchmarkSetup, adversary: &Adversary, episodes: usize, eval_seed: u64) -> TestResults {
    run(setup, adversary, Mode::Robustness, episodes, eval_seed)
}
