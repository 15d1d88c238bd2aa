//! The adversary's MDP.
//!
//! States are `(observation, target action)` pairs. Each step the adversary
//! either lets the target act or perturbs the state so that the target takes
//! its worst action according to a [`QFunction`]. Reward rules assign the
//! adversary's reward: [`ResilienceRule`] (unbudgeted) and [`RobustnessRule`]
//! (per-episode perturbation budget).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{CartPole, CartPoleEnv, EnvState};
use crate::policy::TargetPolicy;
use crate::qstar::QFunction;
use crate::rl::{Environment, Step};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Resilience,
    Robustness,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Resilience => "resilience",
            Mode::Robustness => "robustness",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "resilience" => Ok(Mode::Resilience),
            "robustness" => Ok(Mode::Robustness),
            other => Err(format!("unknown mode `{other}` (expected resilience or robustness)")),
        }
    }
}

/// What the adversary sees: the target's observation and the action the
/// target is about to take.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub observation: [f64; 4],
    pub target_action: usize,
}

impl AugmentedState {
    pub fn new(observation: [f64; 4], target: &TargetPolicy) -> Self {
        Self {
            observation,
            target_action: target.greedy_action(&observation),
        }
    }

    /// Observation followed by a one-hot of the target action.
    pub fn encode(&self, action_count: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 + action_count);
        v.extend_from_slice(&self.observation);
        v.extend((0..action_count).map(|a| if a == self.target_action { 1.0 } else { 0.0 }));
        v
    }
}

/// What happens to a perturbation attempted after the budget is spent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverBudget {
    /// Penalise by `cost * delta_max` and still apply the perturbation.
    #[default]
    Penalize,
    /// Same penalty, but the target's own action is executed.
    Block,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// Perturbations per episode; `None` is unbounded.
    pub delta_max: Option<u32>,
    /// Perturbed observation features. Validated but not enforced.
    pub o_max: Option<u32>,
    /// Perturbed observations. Validated but not enforced.
    pub n_max: Option<u32>,
    /// Perturbation success probability. Only 1.0 is executed.
    pub p_perturb: f64,
    #[serde(default)]
    pub over_budget: OverBudget,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            delta_max: None,
            o_max: None,
            n_max: None,
            p_perturb: 1.0,
            over_budget: OverBudget::Penalize,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AdversarialError {
    #[error("p_perturb {0} outside [0, 1]")]
    Probability(f64),
    #[error("perturbation cost must be finite and nonnegative, got {0}")]
    Cost(f64),
    #[error("r_max must be finite and positive, got {0}")]
    MaxScore(f64),
    #[error("unknown reward rule `{0}`")]
    UnknownRule(String),
}

impl BudgetConfig {
    pub fn with_delta_max(delta_max: u32) -> Self {
        Self {
            delta_max: Some(delta_max),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AdversarialError> {
        if !(0.0..=1.0).contains(&self.p_perturb) {
            return Err(AdversarialError::Probability(self.p_perturb));
        }
        Ok(())
    }
}

/// Price of inducing `induced` at `state`.
pub trait CostFn: Send + Sync {
    fn cost(&self, state: &EnvState, induced: usize) -> f64;

    /// True when the cost never depends on the induced action, which reduces
    /// the adversarial action set to `{NoAction, Perturb}`.
    fn action_invariant(&self) -> bool;
}

/// Cost functions expressible in a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CostModel {
    Uniform { cost: f64 },
    PerAction { costs: Vec<f64> },
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel::Uniform { cost: 1.0 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), AdversarialError> {
        let values: &[f64] = match self {
            CostModel::Uniform { cost } => std::slice::from_ref(cost),
            CostModel::PerAction { costs } => costs,
        };
        match values.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            Some(&bad) => Err(AdversarialError::Cost(bad)),
            None => Ok(()),
        }
    }
}

impl CostFn for CostModel {
    fn cost(&self, _state: &EnvState, induced: usize) -> f64 {
        match self {
            CostModel::Uniform { cost } => *cost,
            CostModel::PerAction { costs } => costs[induced],
        }
    }

    fn action_invariant(&self) -> bool {
        match self {
            CostModel::Uniform { .. } => true,
            CostModel::PerAction { costs } => costs.windows(2).all(|w| w[0] == w[1]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvAction {
    NoAction,
    Induce(usize),
}

/// Lowest-valued action other than `target_action`; lowest index on ties.
pub fn worst_alternative(q_values: &[f64], target_action: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (a, &q) in q_values.iter().enumerate() {
        if a != target_action && best.is_none_or(|b| q < q_values[b]) {
            best = Some(a);
        }
    }
    best
}

/// NoAction plus the worst alternative when the cost ignores the induced
/// action, NoAction plus every alternative otherwise.
pub fn adv_action_set(q_values: &[f64], target_action: usize, cost_invariant: bool) -> Vec<AdvAction> {
    let mut set = vec![AdvAction::NoAction];
    if cost_invariant {
        set.extend(worst_alternative(q_values, target_action).map(AdvAction::Induce));
    } else {
        set.extend((0..q_values.len()).filter(|&a| a != target_action).map(AdvAction::Induce));
    }
    set
}

/// Per-episode bookkeeping shared by the reward rules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvStepContext {
    pub adv_count: u32,
    /// Target return so far, including the current step once it has run.
    pub score_t: f64,
    pub r_max: f64,
}

impl AdvStepContext {
    pub fn new(r_max: f64) -> Self {
        Self {
            adv_count: 0,
            score_t: 0.0,
            r_max,
        }
    }
}

/// Reward assigned for the adversary's choice, before the environment steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionCharge {
    pub reward: f64,
    /// Whether the induced action is executed.
    pub applied: bool,
    pub over_budget: bool,
}

pub trait RewardRule: Send + Sync {
    fn name(&self) -> &'static str;
    fn mode(&self) -> Mode;
    /// Charges a NoAction (`cost = None`) or a perturbation costing `cost`.
    fn charge(&self, cost: Option<f64>, ctx: &mut AdvStepContext) -> ActionCharge;
    /// Bonus added on the terminal step; `ctx.score_t` already includes that step.
    fn terminal_bonus(&self, ctx: &mut AdvStepContext) -> f64;
}

/// Resilience reward: pay the cost per perturbation, plus `r_max - R_T` at the end.
#[derive(Clone, Copy, Debug, Default)]
pub struct ResilienceRule;

impl RewardRule for ResilienceRule {
    fn name(&self) -> &'static str {
        "resilience"
    }

    fn mode(&self) -> Mode {
        Mode::Resilience
    }

    fn charge(&self, cost: Option<f64>, ctx: &mut AdvStepContext) -> ActionCharge {
        match cost {
            None => ActionCharge {
                reward: 0.0,
                applied: false,
                over_budget: false,
            },
            Some(c) => {
                ctx.adv_count += 1;
                ActionCharge {
                    reward: -c,
                    applied: true,
                    over_budget: false,
                }
            }
        }
    }

    fn terminal_bonus(&self, ctx: &mut AdvStepContext) -> f64 {
        ctx.r_max - ctx.score_t
    }
}

/// Robustness reward: as resilience, but perturbations past `delta_max` cost `c * delta_max`.
#[derive(Clone, Copy, Debug, Default)]
pub struct RobustnessRule {
    pub delta_max: Option<u32>,
    pub over_budget: OverBudget,
}

impl RewardRule for RobustnessRule {
    fn name(&self) -> &'static str {
        "robustness"
    }

    fn mode(&self) -> Mode {
        Mode::Robustness
    }

    fn charge(&self, cost: Option<f64>, ctx: &mut AdvStepContext) -> ActionCharge {
        let Some(c) = cost else {
            return ActionCharge {
                reward: 0.0,
                applied: false,
                over_budget: false,
            };
        };
        let over = self.delta_max.is_some_and(|d| ctx.adv_count >= d);
        ctx.adv_count += 1;
        if over {
            ActionCharge {
                reward: -c * f64::from(self.delta_max.unwrap_or(0)),
                applied: self.over_budget == OverBudget::Penalize,
                over_budget: true,
            }
        } else {
            ActionCharge {
                reward: -c,
                applied: true,
                over_budget: false,
            }
        }
    }

    fn terminal_bonus(&self, ctx: &mut AdvStepContext) -> f64 {
        ctx.adv_count = 0;
        ctx.r_max - ctx.score_t
    }
}

type RuleFactory = fn(&BudgetConfig) -> Arc<dyn RewardRule>;

/// Reward rules by mode name.
pub struct RuleRegistry {
    factories: BTreeMap<&'static str, RuleFactory>,
}

impl RuleRegistry {
    pub fn with_builtins() -> Self {
        let mut factories: BTreeMap<&'static str, RuleFactory> = BTreeMap::new();
        factories.insert("resilience", |_| Arc::new(ResilienceRule));
        factories.insert("robustness", |b| {
            Arc::new(RobustnessRule {
                delta_max: b.delta_max,
                over_budget: b.over_budget,
            })
        });
        Self { factories }
    }

    pub fn register(&mut self, name: &'static str, factory: RuleFactory) {
        self.factories.insert(name, factory);
    }

    pub fn build(&self, name: &str, budget: &BudgetConfig) -> Result<Arc<dyn RewardRule>, AdversarialError> {
        self.factories
            .get(name)
            .map(|f| f(budget))
            .ok_or_else(|| AdversarialError::UnknownRule(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }
}

impl Default for RuleRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

/// One adversarial step as written to the episode log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: u32,
    pub adv_action: AdvAction,
    /// Action the target actually executed.
    pub executed_action: usize,
    pub adversary_reward: f64,
    pub target_reward: f64,
    pub adv_count: u32,
    pub over_budget: bool,
}

/// Result of [`AdversarialEnv::step_adv`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdvStep {
    pub state: AugmentedState,
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
    pub trace: StepTrace,
    pub ctx: AdvStepContext,
}

/// Summary of the adversarial episode in progress.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTally {
    pub target_return: f64,
    pub adversary_return: f64,
    pub cost_total: f64,
    pub perturbation_timesteps: Vec<u32>,
    pub over_budget: u32,
    pub length: u32,
}

/// Cart-pole plus target plus Q-function, seen from the adversary.
/// Adversary action `k` indexes [`adv_action_set`] at the current state.
pub struct AdversarialEnv {
    env: CartPoleEnv,
    target: Arc<TargetPolicy>,
    q: Arc<dyn QFunction>,
    rule: Arc<dyn RewardRule>,
    cost: Arc<dyn CostFn>,
    ctx: AdvStepContext,
    current: Option<AugmentedState>,
    tally: EpisodeTally,
    record_trace: bool,
    trace: Vec<StepTrace>,
}

impl AdversarialEnv {
    pub fn new(
        physics: CartPole,
        target: Arc<TargetPolicy>,
        q: Arc<dyn QFunction>,
        rule: Arc<dyn RewardRule>,
        cost: Arc<dyn CostFn>,
        r_max: f64,
    ) -> Self {
        Self {
            env: CartPoleEnv::new(physics),
            target,
            q,
            rule,
            cost,
            ctx: AdvStepContext::new(r_max),
            current: None,
            tally: EpisodeTally::default(),
            record_trace: false,
            trace: Vec::new(),
        }
    }

    /// Keep a per-step trace of each episode (cleared on reset).
    pub fn with_trace(mut self) -> Self {
        self.record_trace = true;
        self
    }

    pub fn action_count(&self) -> usize {
        let n = self.env.physics().action_count();
        if n == 1 {
            1
        } else if self.cost.action_invariant() {
            2
        } else {
            n
        }
    }

    pub fn target(&self) -> &TargetPolicy {
        &self.target
    }

    pub fn context(&self) -> &AdvStepContext {
        &self.ctx
    }

    pub fn current(&self) -> Option<&AugmentedState> {
        self.current.as_ref()
    }

    pub fn tally(&self) -> &EpisodeTally {
        &self.tally
    }

    pub fn trace(&self) -> &[StepTrace] {
        &self.trace
    }

    pub fn env_state(&self) -> &EnvState {
        self.env.state()
    }

    pub fn reset_episode(&mut self, seed: u64) -> AugmentedState {
        let state = self.env.reset_state(seed);
        self.ctx.adv_count = 0;
        self.ctx.score_t = 0.0;
        self.tally = EpisodeTally::default();
        self.trace.clear();
        let aug = AugmentedState::new(state.observation(), &self.target);
        self.current = Some(aug);
        aug
    }

    /// The action set at the current state.
    pub fn action_set(&self) -> Vec<AdvAction> {
        let aug = self.current.expect("adversarial episode not active");
        if self.env.physics().action_count() == 1 {
            return vec![AdvAction::NoAction];
        }
        let q = self.q.q_values(self.env.state());
        adv_action_set(&q, aug.target_action, self.cost.action_invariant())
    }

    /// Steps with an explicit adversarial action. Panics once the episode is over.
    pub fn step_adv(&mut self, action: AdvAction) -> AdvStep {
        let aug = self.current.expect("step after terminal: reset the adversarial episode first");
        let state = *self.env.state();
        let cost = match action {
            AdvAction::NoAction => None,
            AdvAction::Induce(a) => {
                assert_ne!(a, aug.target_action, "induced action equals the target action");
                Some(self.cost.cost(&state, a))
            }
        };
        let charge = self.rule.charge(cost, &mut self.ctx);
        let executed = match action {
            AdvAction::Induce(a) if charge.applied => a,
            _ => aug.target_action,
        };
        let result = self.env.step_state(executed);
        self.ctx.score_t += result.reward;
        let mut reward = charge.reward;
        if result.terminal {
            reward += self.rule.terminal_bonus(&mut self.ctx);
        }

        let t = self.tally.length;
        if let Some(c) = cost {
            self.tally.cost_total += c;
            self.tally.perturbation_timesteps.push(t);
        }
        self.tally.over_budget += u32::from(charge.over_budget);
        self.tally.target_return += result.reward;
        self.tally.adversary_return += reward;
        self.tally.length += 1;

        let next = AugmentedState::new(result.observation, &self.target);
        self.current = (!result.terminal).then_some(next);
        let trace = StepTrace {
            t,
            adv_action: action,
            executed_action: executed,
            adversary_reward: reward,
            target_reward: result.reward,
            adv_count: self.ctx.adv_count,
            over_budget: charge.over_budget,
        };
        if self.record_trace {
            self.trace.push(trace);
        }
        AdvStep {
            state: next,
            reward,
            terminal: result.terminal,
            truncated: result.truncated,
            trace,
            ctx: self.ctx,
        }
    }
}

impl Environment for AdversarialEnv {
    fn observation_dim(&self) -> usize {
        4 + self.env.physics().action_count()
    }

    fn action_count(&self) -> usize {
        AdversarialEnv::action_count(self)
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let n = self.env.physics().action_count();
        self.reset_episode(seed).encode(n)
    }

    fn step(&mut self, action: usize) -> Step {
        let set = self.action_set();
        let chosen = set[action.min(set.len() - 1)];
        let step = self.step_adv(chosen);
        Step {
            observation: step.state.encode(self.env.physics().action_count()),
            reward: step.reward,
            terminal: step.terminal,
            truncated: false,
        }
    }
}

/// `nominal - perturbed`; negative when the adversary helped.
pub fn adversarial_regret(nominal_return: f64, perturbed_return: f64) -> f64 {
    nominal_return - perturbed_return
}
