//! Double DQN with proportional prioritized replay and a periodically synced
//! target network. Generic over [`Environment`] so the same learner trains
//! both the cart-pole target and the adversary in its augmented MDP.

use std::ops::ControlFlow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{clip_grad_norm, Activation, Adam, AdamConfig, Mlp, Trace};
use crate::policy::replay::{ReplayBuffer, Transition};
use crate::env::{CartPole, CartPoleEnv};
use crate::policy::{
    CompetenceGate, GateTracker, LearningCurve, PolicyNetworks, TargetKind, TargetPolicy, TrainConfig, TrainError,
    TrainOutcome,
};
use crate::rl::{argmax, derive_seed, streams, Environment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DqnConfig {
    pub timesteps: u64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub replay_size: usize,
    pub learn_start: u64,
    pub target_update_freq: u64,
    pub prioritized: bool,
    pub exploration_fraction: f64,
    pub final_exploration_prob: f64,
    pub batch_size: usize,
    pub train_freq: u64,
    pub prioritized_alpha: f64,
    pub prioritized_beta0: f64,
    pub prioritized_eps: f64,
    pub hidden: Vec<usize>,
    pub double_q: bool,
    pub huber_delta: f64,
    pub max_grad_norm: f64,
    pub gate: CompetenceGate,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            timesteps: 100_000,
            gamma: 0.99,
            learning_rate: 1e-3,
            replay_size: 50_000,
            learn_start: 1_000,
            target_update_freq: 500,
            prioritized: true,
            exploration_fraction: 0.1,
            final_exploration_prob: 0.02,
            batch_size: 32,
            train_freq: 1,
            prioritized_alpha: 0.6,
            prioritized_beta0: 0.4,
            prioritized_eps: 1e-6,
            hidden: vec![64, 64],
            double_q: true,
            huber_delta: 1.0,
            max_grad_norm: 10.0,
            gate: CompetenceGate {
                interval_steps: 2_000,
                ..CompetenceGate::default()
            },
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if self.timesteps == 0 || self.replay_size == 0 || self.batch_size == 0 {
            return Err("timesteps, replay_size and batch_size must be positive".into());
        }
        if self.train_freq == 0 || self.target_update_freq == 0 {
            return Err("train_freq and target_update_freq must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err("learning_rate must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.exploration_fraction)
            || !(0.0..=1.0).contains(&self.final_exploration_prob)
        {
            return Err("exploration parameters must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Summary handed to the episode callback.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeEnd {
    pub index: u64,
    pub episode_return: f64,
    pub length: u32,
    pub total_steps: u64,
}

pub struct DqnLearner {
    config: DqnConfig,
    online: Mlp,
    target: Mlp,
    adam: Adam,
    replay: ReplayBuffer,
    rng: ChaCha8Rng,
    steps: u64,
    trace: Trace,
    grad: Vec<f64>,
}

impl DqnLearner {
    pub fn new(config: &DqnConfig, observation_dim: usize, action_count: usize, seed: u64) -> Self {
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::NETWORK_INIT, 0));
        let mut sizes = vec![observation_dim];
        sizes.extend(&config.hidden);
        sizes.push(action_count);
        let online = Mlp::new(&sizes, Activation::Relu, Activation::Identity, &mut init_rng);
        let replay = if config.prioritized {
            ReplayBuffer::prioritized(config.replay_size, config.prioritized_alpha)
        } else {
            ReplayBuffer::uniform(config.replay_size)
        };
        Self {
            adam: Adam::new(online.param_count(), AdamConfig::with_learning_rate(config.learning_rate)),
            grad: online.zero_grad(),
            target: online.clone(),
            online,
            replay,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::EXPLORATION, 0)),
            steps: 0,
            trace: Trace::default(),
            config: config.clone(),
        }
    }

    pub fn config(&self) -> &DqnConfig {
        &self.config
    }

    pub fn network(&self) -> &Mlp {
        &self.online
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn finished(&self) -> bool {
        self.steps >= self.config.timesteps
    }

    /// Linear exploration schedule from 1 to `final_exploration_prob`.
    pub fn epsilon(&self) -> f64 {
        let horizon = self.config.exploration_fraction * self.config.timesteps as f64;
        let frac = if horizon > 0.0 {
            (self.steps as f64 / horizon).min(1.0)
        } else {
            1.0
        };
        1.0 + frac * (self.config.final_exploration_prob - 1.0)
    }

    pub fn exploration_done(&self) -> bool {
        self.steps as f64 >= self.config.exploration_fraction * self.config.timesteps as f64
    }

    /// Importance-sampling exponent, annealed linearly to 1 over training.
    pub fn beta(&self) -> f64 {
        let frac = (self.steps as f64 / self.config.timesteps as f64).min(1.0);
        self.config.prioritized_beta0 + frac * (1.0 - self.config.prioritized_beta0)
    }

    pub fn greedy_action(&self, observation: &[f64]) -> usize {
        argmax(&self.online.eval(observation))
    }

    pub fn select_action(&mut self, observation: &[f64]) -> usize {
        if self.rng.gen::<f64>() < self.epsilon() {
            self.rng.gen_range(0..self.online.output_dim())
        } else {
            self.greedy_action(observation)
        }
    }

    /// Stores a transition, then trains and syncs the target on schedule.
    pub fn record(&mut self, transition: Transition) {
        self.replay.push(transition);
        self.steps += 1;
        if self.steps > self.config.learn_start && self.steps.is_multiple_of(self.config.train_freq) {
            self.learn();
        }
        if self.steps.is_multiple_of(self.config.target_update_freq) {
            self.target = self.online.clone();
        }
    }

    fn learn(&mut self) {
        let beta = self.beta();
        let batch = self.config.batch_size;
        let sample = self.replay.sample(batch, beta, &mut self.rng);
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        let mut priorities = Vec::with_capacity(batch);
        let n_actions = self.online.output_dim();
        let mut out_grad = vec![0.0; n_actions];
        for (tr, &w) in sample.transitions.iter().zip(&sample.weights) {
            let target_value = if tr.done {
                tr.reward
            } else {
                let next_target = self.target.eval(&tr.next_state);
                let bootstrap = if self.config.double_q {
                    next_target[argmax(&self.online.eval(&tr.next_state))]
                } else {
                    next_target.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                };
                tr.reward + self.config.gamma * bootstrap
            };
            self.online.forward_trace(&tr.state, &mut self.trace);
            let td = self.trace.output()[tr.action] - target_value;
            priorities.push(td.abs() + self.config.prioritized_eps);
            let huber_grad = td.clamp(-self.config.huber_delta, self.config.huber_delta);
            out_grad.iter_mut().for_each(|g| *g = 0.0);
            out_grad[tr.action] = w * huber_grad / batch as f64;
            self.online.backward(&mut self.trace, &out_grad, &mut self.grad);
        }
        let indices = sample.indices;
        self.replay.update_priorities(&indices, &priorities);
        clip_grad_norm(&mut [&mut self.grad], self.config.max_grad_norm);
        self.adam.step(self.online.params_mut(), &self.grad);
    }
}

/// Runs epsilon-greedy episodes until the step budget is spent or the callback
/// breaks. Episode `i` resets with `episode_seed(i)`. An episode cut off by the
/// step budget is not reported.
pub fn run_episodes<E, S, F>(learner: &mut DqnLearner, env: &mut E, episode_seed: S, mut on_episode_end: F)
where
    E: Environment,
    S: Fn(u64) -> u64,
    F: FnMut(&DqnLearner, &mut E, &EpisodeEnd) -> ControlFlow<()>,
{
    let mut index = 0;
    while !learner.finished() {
        let mut obs = env.reset(episode_seed(index));
        let mut episode_return = 0.0;
        let mut length = 0;
        loop {
            let action = learner.select_action(&obs);
            let step = env.step(action);
            episode_return += step.reward;
            length += 1;
            learner.record(Transition {
                state: obs,
                action,
                reward: step.reward,
                next_state: step.observation.clone(),
                done: step.terminal && !step.truncated,
            });
            obs = step.observation;
            if step.terminal {
                break;
            }
            if learner.finished() {
                return;
            }
        }
        let end = EpisodeEnd {
            index,
            episode_return,
            length,
            total_steps: learner.steps(),
        };
        index += 1;
        if on_episode_end(learner, env, &end).is_break() {
            return;
        }
    }
}

/// Trains a cart-pole DQN target until the competence gate passes.
pub fn train_dqn(config: &DqnConfig, physics: CartPole, env_seed: u64, train_seed: u64) -> Result<TrainOutcome, TrainError> {
    config.validate().map_err(TrainError::InvalidConfig)?;
    let mut env = CartPoleEnv::new(physics);
    let mut learner = DqnLearner::new(config, env.observation_dim(), env.action_count(), train_seed);
    let mut gate = GateTracker::new(config.gate, physics, env_seed);
    let mut curve = LearningCurve::default();
    run_episodes(
        &mut learner,
        &mut env,
        |i| derive_seed(env_seed, streams::TRAIN_EPISODES, i),
        |learner, _, end| {
            curve.episode_returns.push(end.episode_return);
            if end.total_steps > config.learn_start && gate.due(end.total_steps) {
                let net = learner.network();
                if gate.check(end.total_steps, |obs| argmax(&net.eval(obs)), &mut curve, || net.clone()) {
                    return ControlFlow::Break(());
                }
            }
            ControlFlow::Continue(())
        },
    );
    let (q_network, final_eval_return, curve) = gate.finish(TargetKind::Dqn, curve)?;
    Ok(TrainOutcome {
        policy: TargetPolicy {
            kind: TargetKind::Dqn,
            networks: PolicyNetworks::QNetwork { q_network },
            train_config: TrainConfig::Dqn(config.clone()),
            env_seed,
            train_seed,
            final_eval_return,
        },
        curve,
    })
}
