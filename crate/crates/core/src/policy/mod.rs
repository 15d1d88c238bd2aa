//! Target policies: DQN, A2C and PPO trainers behind a common interface.

pub mod a2c;
pub mod actor_critic;
pub mod dqn;
pub mod ppo;
pub mod registry;
pub mod replay;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::CartPole;
use crate::nn::Mlp;
use crate::rl::{argmax, derive_seed, mean, softmax, streams};

pub use a2c::A2cConfig;
pub use dqn::DqnConfig;
pub use ppo::PpoConfig;
pub use registry::{TargetTrainer, TrainerRegistry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Dqn,
    A2c,
    Ppo,
}

impl TargetKind {
    pub const ALL: [TargetKind; 3] = [TargetKind::Dqn, TargetKind::A2c, TargetKind::Ppo];

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Dqn => "dqn",
            TargetKind::A2c => "a2c",
            TargetKind::Ppo => "ppo",
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dqn" => Ok(TargetKind::Dqn),
            "a2c" => Ok(TargetKind::A2c),
            "ppo" | "ppo2" => Ok(TargetKind::Ppo),
            other => Err(format!("unknown target kind `{other}` (expected dqn, a2c or ppo)")),
        }
    }
}

/// Periodic greedy validation. Training stops as soon as the validation mean
/// reaches `early_stop`; otherwise the best validated snapshot is returned at
/// the end of the budget provided it reached `threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompetenceGate {
    pub threshold: f64,
    pub early_stop: f64,
    pub episodes: usize,
    pub interval_steps: u64,
}

impl Default for CompetenceGate {
    fn default() -> Self {
        Self {
            threshold: 475.0,
            early_stop: 495.0,
            episodes: 100,
            interval_steps: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "lowercase")]
pub enum TrainConfig {
    Dqn(DqnConfig),
    A2c(A2cConfig),
    Ppo(PpoConfig),
}

impl TrainConfig {
    pub fn default_for(kind: TargetKind) -> Self {
        match kind {
            TargetKind::Dqn => TrainConfig::Dqn(DqnConfig::default()),
            TargetKind::A2c => TrainConfig::A2c(A2cConfig::default()),
            TargetKind::Ppo => TrainConfig::Ppo(PpoConfig::default()),
        }
    }

    pub fn kind(&self) -> TargetKind {
        match self {
            TrainConfig::Dqn(_) => TargetKind::Dqn,
            TrainConfig::A2c(_) => TargetKind::A2c,
            TrainConfig::Ppo(_) => TargetKind::Ppo,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            TrainConfig::Dqn(c) => c.gamma,
            TrainConfig::A2c(c) => c.gamma,
            TrainConfig::Ppo(c) => c.gamma,
        }
    }

    pub fn timesteps(&self) -> u64 {
        match self {
            TrainConfig::Dqn(c) => c.timesteps,
            TrainConfig::A2c(c) => c.timesteps,
            TrainConfig::Ppo(c) => c.timesteps,
        }
    }

    pub fn gate(&self) -> &CompetenceGate {
        match self {
            TrainConfig::Dqn(c) => &c.gate,
            TrainConfig::A2c(c) => &c.gate,
            TrainConfig::Ppo(c) => &c.gate,
        }
    }

    pub fn gate_mut(&mut self) -> &mut CompetenceGate {
        match self {
            TrainConfig::Dqn(c) => &mut c.gate,
            TrainConfig::A2c(c) => &mut c.gate,
            TrainConfig::Ppo(c) => &mut c.gate,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let result = match self {
            TrainConfig::Dqn(c) => c.validate(),
            TrainConfig::A2c(c) => c.validate(),
            TrainConfig::Ppo(c) => c.validate(),
        };
        result.map_err(TrainError::InvalidConfig)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PolicyNetworks {
    /// Action values; the greedy action is their argmax.
    QNetwork { q_network: Mlp },
    /// Softmax policy logits plus a state-value head.
    ActorCritic { actor: Mlp, critic: Mlp },
}

/// A trained policy together with everything needed to reproduce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetPolicy {
    pub kind: TargetKind,
    pub networks: PolicyNetworks,
    pub train_config: TrainConfig,
    pub env_seed: u64,
    pub train_seed: u64,
    pub final_eval_return: f64,
}

impl TargetPolicy {
    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("target policies always serialize");
        hex::encode(Sha256::digest(&json))
    }

    pub fn action_count(&self) -> usize {
        match &self.networks {
            PolicyNetworks::QNetwork { q_network } => q_network.output_dim(),
            PolicyNetworks::ActorCritic { actor, .. } => actor.output_dim(),
        }
    }

    pub fn gamma(&self) -> f64 {
        self.train_config.gamma()
    }

    pub fn q_values(&self, observation: &[f64]) -> Option<Vec<f64>> {
        match &self.networks {
            PolicyNetworks::QNetwork { q_network } => Some(q_network.eval(observation)),
            PolicyNetworks::ActorCritic { .. } => None,
        }
    }

    pub fn state_value(&self, observation: &[f64]) -> Option<f64> {
        match &self.networks {
            PolicyNetworks::QNetwork { .. } => None,
            PolicyNetworks::ActorCritic { critic, .. } => Some(critic.eval(observation)[0]),
        }
    }

    pub fn action_probabilities(&self, observation: &[f64]) -> Option<Vec<f64>> {
        match &self.networks {
            PolicyNetworks::QNetwork { .. } => None,
            PolicyNetworks::ActorCritic { actor, .. } => Some(softmax(&actor.eval(observation))),
        }
    }

    pub fn greedy_action(&self, observation: &[f64]) -> usize {
        match &self.networks {
            PolicyNetworks::QNetwork { q_network } => argmax(&q_network.eval(observation)),
            PolicyNetworks::ActorCritic { actor, .. } => argmax(&actor.eval(observation)),
        }
    }

    /// Greedy mode is deterministic. Otherwise actor-critic policies sample
    /// their softmax and Q policies act epsilon-greedily with the final
    /// exploration probability of their training schedule.
    pub fn act(&self, observation: &[f64], greedy: bool, rng: &mut impl Rng) -> usize {
        if greedy {
            return self.greedy_action(observation);
        }
        match &self.networks {
            PolicyNetworks::QNetwork { q_network } => {
                let epsilon = match &self.train_config {
                    TrainConfig::Dqn(c) => c.final_exploration_prob,
                    _ => 0.0,
                };
                if rng.gen::<f64>() < epsilon {
                    rng.gen_range(0..q_network.output_dim())
                } else {
                    argmax(&q_network.eval(observation))
                }
            }
            PolicyNetworks::ActorCritic { actor, .. } => sample_categorical(&softmax(&actor.eval(observation)), rng),
        }
    }
}

pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub returns: Vec<f64>,
    pub mean: f64,
}

/// Greedy rollouts of an arbitrary actor; episode `i` resets from
/// `derive_seed(env_seed, EVALUATION, i)`.
pub fn evaluate_actor(actor: impl Fn(&[f64]) -> usize, physics: &CartPole, env_seed: u64, episodes: usize) -> Evaluation {
    let returns: Vec<f64> = (0..episodes)
        .map(|i| {
            let mut state = physics.reset(derive_seed(env_seed, streams::EVALUATION, i as u64));
            let mut total = 0.0;
            while !physics.is_terminal(&state) {
                let (next, result) = physics.step(&state, actor(&state.observation()));
                total += result.reward;
                state = next;
            }
            total
        })
        .collect();
    Evaluation {
        mean: mean(&returns),
        returns,
    }
}

pub fn evaluate(policy: &TargetPolicy, physics: &CartPole, env_seed: u64, episodes: usize) -> Evaluation {
    evaluate_actor(|obs| policy.greedy_action(obs), physics, env_seed, episodes)
}

/// Training progress: per-episode returns plus periodic greedy evaluations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub episode_returns: Vec<f64>,
    pub evaluations: Vec<EvalPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub mean_return: f64,
}

impl LearningCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,return\n");
        for (i, r) in self.episode_returns.iter().enumerate() {
            out.push_str(&format!("{i},{r}\n"));
        }
        out
    }

    pub fn evaluations_csv(&self) -> String {
        let mut out = String::from("step,mean_return\n");
        for p in &self.evaluations {
            out.push_str(&format!("{},{}\n", p.step, p.mean_return));
        }
        out
    }

    /// Mean of the last `window` training-episode returns.
    pub fn trailing_mean(&self, window: usize) -> f64 {
        let n = self.episode_returns.len();
        mean(&self.episode_returns[n.saturating_sub(window)..])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub policy: TargetPolicy,
    pub curve: LearningCurve,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{kind} training did not converge: best greedy evaluation {best_eval:.1} below {threshold}")]
    NotConverged {
        kind: TargetKind,
        best_eval: f64,
        threshold: f64,
        curve: Box<LearningCurve>,
    },
}

/// Seed for the validation rollouts used by the competence gate. Disjoint from
/// the evaluation stream used by [`evaluate`] with the same `env_seed`.
pub(crate) fn validation_seed(env_seed: u64) -> u64 {
    derive_seed(env_seed, streams::VALIDATION, 0)
}

/// Schedules competence-gate evaluations during training and keeps the best
/// snapshot that cleared the threshold.
pub(crate) struct GateTracker<T> {
    gate: CompetenceGate,
    physics: CartPole,
    seed: u64,
    next_at: u64,
    best_mean: f64,
    best: Option<(f64, T)>,
}

impl<T> GateTracker<T> {
    pub fn new(gate: CompetenceGate, physics: CartPole, env_seed: u64) -> Self {
        Self {
            gate,
            physics,
            seed: validation_seed(env_seed),
            next_at: gate.interval_steps,
            best_mean: f64::NEG_INFINITY,
            best: None,
        }
    }

    pub fn due(&self, steps: u64) -> bool {
        steps >= self.next_at
    }

    /// Evaluates `actor` and records the point. Returns true when training
    /// should stop.
    pub fn check(
        &mut self,
        steps: u64,
        actor: impl Fn(&[f64]) -> usize,
        curve: &mut LearningCurve,
        snapshot: impl FnOnce() -> T,
    ) -> bool {
        while self.next_at <= steps {
            self.next_at += self.gate.interval_steps.max(1);
        }
        let eval = evaluate_actor(actor, &self.physics, self.seed, self.gate.episodes);
        curve.evaluations.push(EvalPoint {
            step: steps,
            mean_return: eval.mean,
        });
        if eval.mean > self.best_mean {
            self.best_mean = eval.mean;
            if eval.mean >= self.gate.threshold {
                self.best = Some((eval.mean, snapshot()));
            }
        }
        eval.mean >= self.gate.early_stop
    }

    /// The best snapshot and its validation mean, or the non-convergence error.
    pub fn finish(self, kind: TargetKind, curve: LearningCurve) -> Result<(T, f64, LearningCurve), TrainError> {
        match self.best {
            Some((mean, snapshot)) => Ok((snapshot, mean, curve)),
            None => Err(TrainError::NotConverged {
                kind,
                best_eval: self.best_mean,
                threshold: self.gate.threshold,
                curve: Box::new(curve),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_output(values: &[f64]) -> Mlp {
        let n = values.len();
        let layers = vec![LayerShape { inputs: 4, outputs: n, activation: Activation::Identity }];
        let mut params = vec![0.0; 4 * n];
        params.extend_from_slice(values);
        Mlp::from_parts(layers, params).unwrap()
    }

    fn q_policy(values: &[f64]) -> TargetPolicy {
        TargetPolicy {
            kind: TargetKind::Dqn,
            networks: PolicyNetworks::QNetwork { q_network: constant_output(values) },
            train_config: TrainConfig::default_for(TargetKind::Dqn),
            env_seed: 0,
            train_seed: 0,
            final_eval_return: 500.0,
        }
    }

    #[test]
    fn dqn_greedy_is_argmax() {
        let p = q_policy(&[1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(p.act(&[0.0; 4], true, &mut rng), 1);
        assert_eq!(p.act(&[0.3, 0.1, 0.0, 0.0], true, &mut rng), p.act(&[0.3, 0.1, 0.0, 0.0], true, &mut rng));
    }

    #[test]
    fn symmetric_logits_sample_evenly() {
        let p = TargetPolicy {
            kind: TargetKind::A2c,
            networks: PolicyNetworks::ActorCritic {
                actor: constant_output(&[0.0, 0.0]),
                critic: constant_output(&[0.0]),
            },
            train_config: TrainConfig::default_for(TargetKind::A2c),
            env_seed: 0,
            train_seed: 0,
            final_eval_return: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ones: usize = (0..10_000).map(|_| p.act(&[0.0; 4], false, &mut rng)).sum();
        assert!((ones as f64 / 10_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn random_policy_scores_low() {
        let physics = CartPole::default();
        let rng = std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(1));
        let eval = evaluate_actor(|_| rng.borrow_mut().gen_range(0..2), &physics, 3, 200);
        assert!(eval.mean < 100.0, "random mean {}", eval.mean);
        assert!(eval.returns.iter().all(|&r| (1.0..=500.0).contains(&r)));
    }

    #[test]
    fn single_episode_mean_is_the_return() {
        let physics = CartPole::default();
        let eval = evaluate_actor(|_| 0, &physics, 3, 1);
        assert_eq!(eval.returns.len(), 1);
        assert_eq!(eval.mean, eval.returns[0]);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("PPO".parse::<TargetKind>(), Ok(TargetKind::Ppo));
        assert!("sac".parse::<TargetKind>().is_err());
    }

    #[test]
    fn config_round_trips_with_algorithm_tag() {
        for kind in TargetKind::ALL {
            let c = TrainConfig::default_for(kind);
            let text = serde_json::to_string(&c).unwrap();
            assert!(text.contains(&format!("\"algorithm\":\"{}\"", kind.name())));
            assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), c);
        }
    }
}
