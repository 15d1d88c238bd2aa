//! Clipped-surrogate PPO with generalized advantage estimation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::CartPole;
use crate::nn::{clip_grad_norm, Adam, AdamConfig, Trace};
use crate::policy::actor_critic::{build_networks, entropy, VecCartPole};
use crate::policy::{
    sample_categorical, CompetenceGate, GateTracker, LearningCurve, PolicyNetworks, TargetKind, TargetPolicy,
    TrainConfig, TrainError, TrainOutcome,
};
use crate::rl::{argmax, derive_seed, softmax, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub timesteps: u64,
    pub n_envs: usize,
    pub rollout_len: usize,
    pub minibatches: usize,
    pub surrogate_epochs: usize,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub clip_range: f64,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub gate: CompetenceGate,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            timesteps: 1_000_000,
            n_envs: 8,
            rollout_len: 2048,
            minibatches: 32,
            surrogate_epochs: 10,
            gae_lambda: 0.95,
            gamma: 0.99,
            learning_rate: 3e-4,
            entropy_coef: 0.0,
            value_coef: 0.5,
            clip_range: 0.2,
            max_grad_norm: 0.5,
            hidden: vec![64, 64],
            gate: CompetenceGate::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err("gamma and gae_lambda must lie in [0, 1]".into());
        }
        if self.timesteps == 0 || self.n_envs == 0 || self.rollout_len == 0 {
            return Err("timesteps, n_envs and rollout_len must be positive".into());
        }
        if self.minibatches == 0 || self.surrogate_epochs == 0 {
            return Err("minibatches and surrogate_epochs must be positive".into());
        }
        if (self.n_envs * self.rollout_len) < self.minibatches {
            return Err("fewer samples per update than minibatches".into());
        }
        if !(self.learning_rate > 0.0) || !(self.clip_range > 0.0) {
            return Err("learning_rate and clip_range must be positive".into());
        }
        Ok(())
    }
}

/// Generalized advantage estimates for one environment's rollout.
/// `dones[t]` marks that no bootstrap crosses from step `t` to `t + 1`;
/// `last_value` is `V` of the observation after the final step.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    adv
}

/// Per-sample clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)` and its
/// derivative with respect to the ratio `r`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

struct Rollout {
    obs: Vec<[f64; 4]>,
    actions: Vec<usize>,
    log_probs: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

pub fn train_ppo(config: &PpoConfig, physics: CartPole, env_seed: u64, train_seed: u64) -> Result<TrainOutcome, TrainError> {
    config.validate().map_err(TrainError::InvalidConfig)?;
    let (mut actor, mut critic) = build_networks(&config.hidden, train_seed);
    let adam_config = AdamConfig::with_learning_rate(config.learning_rate);
    let mut actor_opt = Adam::new(actor.param_count(), adam_config);
    let mut critic_opt = Adam::new(critic.param_count(), adam_config);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train_seed, streams::EXPLORATION, 0));
    let mut bank = VecCartPole::new(config.n_envs, physics, env_seed);
    let mut gate = GateTracker::new(config.gate, physics, env_seed);
    let mut curve = LearningCurve::default();

    let total = config.n_envs * config.rollout_len;
    let minibatch = total / config.minibatches;
    let mut actor_trace = Trace::default();
    let mut critic_trace = Trace::default();
    let mut actor_grad = actor.zero_grad();
    let mut critic_grad = critic.zero_grad();
    let mut steps = 0u64;

    while steps < config.timesteps {
        // Collect per-environment trajectories, then flatten.
        let mut rollout = Rollout {
            obs: Vec::with_capacity(total),
            actions: Vec::with_capacity(total),
            log_probs: Vec::with_capacity(total),
            advantages: Vec::with_capacity(total),
            returns: Vec::with_capacity(total),
        };
        let n = config.n_envs;
        let mut per_env: Vec<(Vec<[f64; 4]>, Vec<usize>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<bool>)> = (0..n)
            .map(|_| Default::default())
            .collect();
        for _ in 0..config.rollout_len {
            for (e, buf) in per_env.iter_mut().enumerate() {
                let obs = bank.observation(e);
                let probs = softmax(&actor.eval(&obs));
                let action = sample_categorical(&probs, &mut rng);
                let value = critic.eval(&obs)[0];
                let step = bank.step(e, action);
                let mut reward = step.reward;
                if step.truncated {
                    reward += config.gamma * critic.eval(&step.final_observation)[0];
                }
                if let Some(r) = step.finished_return {
                    curve.episode_returns.push(r);
                }
                buf.0.push(obs);
                buf.1.push(action);
                buf.2.push(probs[action].ln());
                buf.3.push(value);
                buf.4.push(reward);
                buf.5.push(step.failed || step.truncated);
            }
        }
        steps += total as u64;
        for (e, (obs, actions, log_probs, values, rewards, dones)) in per_env.into_iter().enumerate() {
            let last_value = critic.eval(&bank.observation(e))[0];
            let adv = gae(&rewards, &values, &dones, last_value, config.gamma, config.gae_lambda);
            rollout.returns.extend(adv.iter().zip(&values).map(|(a, v)| a + v));
            rollout.advantages.extend(adv);
            rollout.obs.extend(obs);
            rollout.actions.extend(actions);
            rollout.log_probs.extend(log_probs);
        }

        let mut order: Vec<usize> = (0..total).collect();
        for _ in 0..config.surrogate_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks_exact(minibatch) {
                let adv: Vec<f64> = chunk.iter().map(|&i| rollout.advantages[i]).collect();
                let mean = adv.iter().sum::<f64>() / adv.len() as f64;
                let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / adv.len() as f64;
                let std = var.sqrt() + 1e-8;
                actor_grad.iter_mut().for_each(|g| *g = 0.0);
                critic_grad.iter_mut().for_each(|g| *g = 0.0);
                let scale = 1.0 / chunk.len() as f64;
                for (&i, a) in chunk.iter().zip(&adv) {
                    let a = (a - mean) / std;
                    let obs = &rollout.obs[i];
                    actor.forward_trace(obs, &mut actor_trace);
                    let probs = softmax(actor_trace.output());
                    let action = rollout.actions[i];
                    let ratio = (probs[action].ln() - rollout.log_probs[i]).exp();
                    let (_, d_ratio) = clipped_surrogate(ratio, a, config.clip_range);
                    // Loss = -surrogate - c_ent * H; d ratio / d z_k = ratio (1[k = a] - p_k).
                    let h = entropy(&probs);
                    let g: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(k, &p)| {
                            let indicator = if k == action { 1.0 } else { 0.0 };
                            let pg = -d_ratio * ratio * (indicator - p);
                            let ent = if p > 0.0 { config.entropy_coef * p * (p.ln() + h) } else { 0.0 };
                            (pg + ent) * scale
                        })
                        .collect();
                    actor.backward(&mut actor_trace, &g, &mut actor_grad);

                    critic.forward_trace(obs, &mut critic_trace);
                    let v = critic_trace.output()[0];
                    let dv = config.value_coef * (v - rollout.returns[i]) * scale;
                    critic.backward(&mut critic_trace, &[dv], &mut critic_grad);
                }
                clip_grad_norm(&mut [&mut actor_grad, &mut critic_grad], config.max_grad_norm);
                actor_opt.step(actor.params_mut(), &actor_grad);
                critic_opt.step(critic.params_mut(), &critic_grad);
            }
        }

        if gate.due(steps) && gate.check(steps, |obs| argmax(&actor.eval(obs)), &mut curve, || (actor.clone(), critic.clone())) {
            break;
        }
    }
    let ((actor, critic), final_eval_return, curve) = gate.finish(TargetKind::Ppo, curve)?;
    Ok(TrainOutcome {
        policy: TargetPolicy {
            kind: TargetKind::Ppo,
            networks: PolicyNetworks::ActorCritic { actor, critic },
            train_config: TrainConfig::Ppo(config.clone()),
            env_seed,
            train_seed,
            final_eval_return,
        },
        curve,
    })
}
