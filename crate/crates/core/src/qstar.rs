//! State-action value functions used to choose the worst action to induce.
//!
//! Three extraction strategies are registered by name:
//!
//! * `direct` reads the target's own Q-network (DQN targets).
//! * `value-lookahead` combines a one-step simulator lookahead with the
//!   target's state-value head: `Q(s, a) = r(s, a) + gamma * V(s')`, with
//!   `V = 0` when `s'` ends the episode.
//! * `imitation` treats the target as a black box: it clones the target's
//!   greedy actions into a classifier, then evaluates the clone with TD
//!   learning. The result is the clone's action-value function, not an
//!   optimal one, and is labelled as such.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{CartPole, CartPoleEnv, EnvState};
use crate::nn::{clip_grad_norm, Activation, Adam, AdamConfig, Mlp, Trace};
use crate::policy::{PolicyNetworks, TargetKind, TargetPolicy};
use crate::rl::{argmax, derive_seed, softmax, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QSource {
    Direct,
    ValueLookahead,
    Imitated,
}

impl QSource {
    /// White-box default: the Q-network for DQN, value lookahead otherwise.
    pub fn default_for(kind: TargetKind) -> Self {
        match kind {
            TargetKind::Dqn => QSource::Direct,
            TargetKind::A2c | TargetKind::Ppo => QSource::ValueLookahead,
        }
    }

    pub fn extractor_name(self) -> &'static str {
        match self {
            QSource::Direct => "direct",
            QSource::ValueLookahead => "value-lookahead",
            QSource::Imitated => "imitation",
        }
    }
}

impl std::str::FromStr for QSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(QSource::Direct),
            "value-lookahead" | "value_lookahead" => Ok(QSource::ValueLookahead),
            "imitation" | "imitated" => Ok(QSource::Imitated),
            other => Err(format!("unknown Q source `{other}` (expected direct, value-lookahead or imitation)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QProvenance {
    pub source: QSource,
    pub target_id: String,
    pub target_kind: TargetKind,
    pub imitation: Option<ImitationConfig>,
}

pub trait QFunction: Send + Sync {
    fn provenance(&self) -> &QProvenance;

    /// Values for every action at `state`. `state` must not be terminal.
    fn q_values(&self, state: &EnvState) -> Vec<f64>;

    fn source(&self) -> QSource {
        self.provenance().source
    }
}

#[derive(Debug, Error)]
pub enum QError {
    #[error("extractor `{extractor}` does not support {kind} targets")]
    WrongKind { extractor: &'static str, kind: TargetKind },
    #[error("imitation needs at least one transition")]
    EmptyData,
    #[error("imitation failed: held-out agreement {agreement:.3} below {required:.3}")]
    ImitationFailed {
        agreement: f64,
        required: f64,
        curve: Vec<f64>,
    },
    #[error("unknown Q extractor `{0}`")]
    UnknownExtractor(String),
}

/// The target's own Q-network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectQ {
    q_network: Mlp,
    provenance: QProvenance,
}

impl DirectQ {
    pub fn new(target: &TargetPolicy) -> Result<Self, QError> {
        match &target.networks {
            PolicyNetworks::QNetwork { q_network } => Ok(Self {
                q_network: q_network.clone(),
                provenance: QProvenance {
                    source: QSource::Direct,
                    target_id: target.fingerprint(),
                    target_kind: target.kind,
                    imitation: None,
                },
            }),
            PolicyNetworks::ActorCritic { .. } => Err(QError::WrongKind {
                extractor: "direct",
                kind: target.kind,
            }),
        }
    }
}

impl QFunction for DirectQ {
    fn provenance(&self) -> &QProvenance {
        &self.provenance
    }

    fn q_values(&self, state: &EnvState) -> Vec<f64> {
        self.q_network.eval(&state.observation())
    }
}

/// One-step lookahead through the simulator into a state-value head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValueLookaheadQ {
    critic: Mlp,
    physics: CartPole,
    gamma: f64,
    provenance: QProvenance,
}

impl ValueLookaheadQ {
    pub fn new(target: &TargetPolicy, physics: CartPole) -> Result<Self, QError> {
        match &target.networks {
            PolicyNetworks::ActorCritic { critic, .. } => Ok(Self {
                critic: critic.clone(),
                physics,
                gamma: target.gamma(),
                provenance: QProvenance {
                    source: QSource::ValueLookahead,
                    target_id: target.fingerprint(),
                    target_kind: target.kind,
                    imitation: None,
                },
            }),
            PolicyNetworks::QNetwork { .. } => Err(QError::WrongKind {
                extractor: "value-lookahead",
                kind: target.kind,
            }),
        }
    }

    /// Lookahead from an explicit value function; used for hand-built cases.
    pub fn from_value_network(critic: Mlp, physics: CartPole, gamma: f64, provenance: QProvenance) -> Self {
        Self {
            critic,
            physics,
            gamma,
            provenance,
        }
    }
}

impl QFunction for ValueLookaheadQ {
    fn provenance(&self) -> &QProvenance {
        &self.provenance
    }

    fn q_values(&self, state: &EnvState) -> Vec<f64> {
        (0..self.physics.action_count())
            .map(|a| {
                let (next, step) = self.physics.step(state, a);
                let value = if step.terminal { 0.0 } else { self.critic.eval(&next.observation())[0] };
                step.reward + self.gamma * value
            })
            .collect()
    }
}

/// `Q(s, a) = r + gamma * V(s')` for every action, evaluated on a live
/// environment through snapshot/restore. The environment is left exactly as
/// it was found. Panics if the current state is terminal.
pub fn q_from_value(value: impl Fn(&[f64]) -> f64, gamma: f64, env: &mut CartPoleEnv) -> Vec<f64> {
    assert!(!env.is_terminal(), "value lookahead from a terminal state");
    let snapshot = env.snapshot();
    let q = (0..env.physics().action_count())
        .map(|a| {
            let step = env.step_state(a);
            let v = if step.terminal { 0.0 } else { value(&step.observation) };
            env.restore(snapshot);
            step.reward + gamma * v
        })
        .collect();
    q
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImitationConfig {
    /// Number of transitions collected from the target.
    pub transitions: usize,
    /// Probability of replacing the target's action while collecting, so that
    /// both actions appear in the data. Labels are always the target's action.
    pub behaviour_noise: f64,
    pub holdout_fraction: f64,
    pub min_agreement: f64,
    pub clone_epochs: usize,
    pub clone_learning_rate: f64,
    pub td_steps: usize,
    pub td_learning_rate: f64,
    pub td_target_sync: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        Self {
            transitions: 20_000,
            behaviour_noise: 0.2,
            holdout_fraction: 0.2,
            min_agreement: 0.95,
            clone_epochs: 20,
            clone_learning_rate: 1e-3,
            td_steps: 20_000,
            td_learning_rate: 1e-3,
            td_target_sync: 200,
            batch_size: 64,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImitationReport {
    pub transitions: usize,
    /// Held-out action agreement after each cloning epoch.
    pub agreement_curve: Vec<f64>,
    pub holdout_agreement: f64,
}

/// Action values of a behaviour-cloned surrogate of the target.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImitatedQ {
    pub q_network: Mlp,
    pub cloned_policy: Mlp,
    pub report: ImitationReport,
    pub provenance: QProvenance,
}

impl ImitatedQ {
    pub fn cloned_action(&self, observation: &[f64]) -> usize {
        argmax(&self.cloned_policy.eval(observation))
    }
}

impl QFunction for ImitatedQ {
    fn provenance(&self) -> &QProvenance {
        &self.provenance
    }

    fn q_values(&self, state: &EnvState) -> Vec<f64> {
        self.q_network.eval(&state.observation())
    }
}

struct Labelled {
    obs: [f64; 4],
    label: usize,
    action: usize,
    reward: f64,
    next_obs: [f64; 4],
    /// Failure ends the return; time-limit truncation bootstraps.
    failed: bool,
}

fn collect(target: &TargetPolicy, physics: &CartPole, config: &ImitationConfig, rng: &mut ChaCha8Rng) -> Vec<Labelled> {
    let mut data = Vec::with_capacity(config.transitions);
    let mut episode = 0;
    while data.len() < config.transitions {
        let mut state = physics.reset(derive_seed(config.seed, streams::IMITATION, episode));
        episode += 1;
        while !physics.is_terminal(&state) && data.len() < config.transitions {
            let obs = state.observation();
            let label = target.greedy_action(&obs);
            let action = if rng.gen::<f64>() < config.behaviour_noise {
                rng.gen_range(0..physics.action_count())
            } else {
                label
            };
            let (next, step) = physics.step(&state, action);
            data.push(Labelled {
                obs,
                label,
                action,
                reward: step.reward,
                next_obs: next.observation(),
                failed: step.terminal && !step.truncated,
            });
            state = next;
        }
    }
    data
}

/// Black-box Q approximation: behaviour cloning followed by TD evaluation of the clone.
pub fn imitate_q(target: &TargetPolicy, physics: &CartPole, config: &ImitationConfig) -> Result<ImitatedQ, QError> {
    if config.transitions == 0 {
        return Err(QError::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, streams::IMITATION, u64::MAX));
    let data = collect(target, physics, config, &mut rng);
    let n_actions = physics.action_count();

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_holdout = ((data.len() as f64 * config.holdout_fraction).round() as usize).min(data.len().saturating_sub(1));
    let (holdout, train) = order.split_at(n_holdout);
    let holdout = if holdout.is_empty() { train } else { holdout };

    // Stage 1: cross-entropy classifier against the target's greedy labels.
    let mut sizes = vec![4];
    sizes.extend(&config.hidden);
    sizes.push(n_actions);
    let mut clone = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, &mut rng);
    let mut opt = Adam::new(clone.param_count(), AdamConfig::with_learning_rate(config.clone_learning_rate));
    let mut trace = Trace::default();
    let mut grad = clone.zero_grad();
    let mut agreement_curve = Vec::with_capacity(config.clone_epochs);
    let agreement = |net: &Mlp| {
        holdout.iter().filter(|&&i| argmax(&net.eval(&data[i].obs)) == data[i].label).count() as f64 / holdout.len() as f64
    };
    let mut shuffled = train.to_vec();
    for _ in 0..config.clone_epochs {
        shuffled.shuffle(&mut rng);
        for chunk in shuffled.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                clone.forward_trace(&data[i].obs, &mut trace);
                let mut g = softmax(trace.output());
                g[data[i].label] -= 1.0;
                g.iter_mut().for_each(|x| *x /= chunk.len() as f64);
                clone.backward(&mut trace, &g, &mut grad);
            }
            opt.step(clone.params_mut(), &grad);
        }
        agreement_curve.push(agreement(&clone));
    }
    let holdout_agreement = agreement_curve.last().copied().unwrap_or(0.0);
    if holdout_agreement < config.min_agreement {
        return Err(QError::ImitationFailed {
            agreement: holdout_agreement,
            required: config.min_agreement,
            curve: agreement_curve,
        });
    }

    // Stage 2: TD(0) evaluation of the clone. Rewards are scaled by (1 - gamma)
    // during fitting so values stay O(1), then unscaled on output.
    let gamma = target.gamma();
    let scale = if gamma < 1.0 { 1.0 - gamma } else { 1.0 / physics.params().max_steps as f64 };
    let next_actions: Vec<usize> = data.iter().map(|d| argmax(&clone.eval(&d.next_obs))).collect();
    let mut q = Mlp::new(&sizes, Activation::Relu, Activation::Identity, &mut rng);
    let mut q_target = q.clone();
    let mut q_opt = Adam::new(q.param_count(), AdamConfig::with_learning_rate(config.td_learning_rate));
    let mut q_grad = q.zero_grad();
    for step in 0..config.td_steps {
        q_grad.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..config.batch_size {
            let i = rng.gen_range(0..data.len());
            let d = &data[i];
            let bootstrap = if d.failed { 0.0 } else { q_target.eval(&d.next_obs)[next_actions[i]] };
            let y = scale * d.reward + gamma * bootstrap;
            q.forward_trace(&d.obs, &mut trace);
            let mut g = vec![0.0; n_actions];
            g[d.action] = (trace.output()[d.action] - y) / config.batch_size as f64;
            q.backward(&mut trace, &g, &mut q_grad);
        }
        clip_grad_norm(&mut [&mut q_grad], 10.0);
        q_opt.step(q.params_mut(), &q_grad);
        if (step + 1) % config.td_target_sync == 0 {
            q_target = q.clone();
        }
    }
    q.scale_output_layer(1.0 / scale);

    Ok(ImitatedQ {
        q_network: q,
        cloned_policy: clone,
        report: ImitationReport {
            transitions: data.len(),
            agreement_curve,
            holdout_agreement,
        },
        provenance: QProvenance {
            source: QSource::Imitated,
            target_id: target.fingerprint(),
            target_kind: target.kind,
            imitation: Some(config.clone()),
        },
    })
}

/// Any extracted Q-function, in serializable form.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ExtractedQ {
    Direct(DirectQ),
    ValueLookahead(ValueLookaheadQ),
    Imitated(ImitatedQ),
}

impl ExtractedQ {
    pub fn imitation_report(&self) -> Option<&ImitationReport> {
        match self {
            ExtractedQ::Imitated(q) => Some(&q.report),
            _ => None,
        }
    }

    fn inner(&self) -> &dyn QFunction {
        match self {
            ExtractedQ::Direct(q) => q,
            ExtractedQ::ValueLookahead(q) => q,
            ExtractedQ::Imitated(q) => q,
        }
    }
}

impl QFunction for ExtractedQ {
    fn provenance(&self) -> &QProvenance {
        self.inner().provenance()
    }

    fn q_values(&self, state: &EnvState) -> Vec<f64> {
        self.inner().q_values(state)
    }
}

/// Inputs every extractor may draw on.
#[derive(Clone, Debug, Default)]
pub struct ExtractContext {
    pub physics: CartPole,
    pub imitation: ImitationConfig,
}

pub trait QExtractor: Send + Sync {
    fn name(&self) -> &'static str;
    fn source(&self) -> QSource;
    fn extract(&self, target: &TargetPolicy, ctx: &ExtractContext) -> Result<ExtractedQ, QError>;
}

pub struct DirectExtractor;
pub struct ValueLookaheadExtractor;
pub struct ImitationExtractor;

impl QExtractor for DirectExtractor {
    fn name(&self) -> &'static str {
        "direct"
    }
    fn source(&self) -> QSource {
        QSource::Direct
    }
    fn extract(&self, target: &TargetPolicy, _ctx: &ExtractContext) -> Result<ExtractedQ, QError> {
        Ok(ExtractedQ::Direct(DirectQ::new(target)?))
    }
}

impl QExtractor for ValueLookaheadExtractor {
    fn name(&self) -> &'static str {
        "value-lookahead"
    }
    fn source(&self) -> QSource {
        QSource::ValueLookahead
    }
    fn extract(&self, target: &TargetPolicy, ctx: &ExtractContext) -> Result<ExtractedQ, QError> {
        Ok(ExtractedQ::ValueLookahead(ValueLookaheadQ::new(target, ctx.physics)?))
    }
}

impl QExtractor for ImitationExtractor {
    fn name(&self) -> &'static str {
        "imitation"
    }
    fn source(&self) -> QSource {
        QSource::Imitated
    }
    fn extract(&self, target: &TargetPolicy, ctx: &ExtractContext) -> Result<ExtractedQ, QError> {
        Ok(ExtractedQ::Imitated(imitate_q(target, &ctx.physics, &ctx.imitation)?))
    }
}

pub struct ExtractorRegistry {
    extractors: BTreeMap<&'static str, Box<dyn QExtractor>>,
}

impl ExtractorRegistry {
    pub fn with_builtins() -> Self {
        let mut registry = Self {
            extractors: BTreeMap::new(),
        };
        registry.register(Box::new(DirectExtractor));
        registry.register(Box::new(ValueLookaheadExtractor));
        registry.register(Box::new(ImitationExtractor));
        registry
    }

    pub fn register(&mut self, extractor: Box<dyn QExtractor>) {
        self.extractors.insert(extractor.name(), extractor);
    }

    pub fn get(&self, name: &str) -> Option<&dyn QExtractor> {
        self.extractors.get(name).map(Box::as_ref)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.extractors.keys().copied()
    }

    pub fn extract(&self, source: QSource, target: &TargetPolicy, ctx: &ExtractContext) -> Result<ExtractedQ, QError> {
        let name = source.extractor_name();
        self.get(name)
            .ok_or_else(|| QError::UnknownExtractor(name.to_string()))?
            .extract(target, ctx)
    }
}

impl Default for ExtractorRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}
