//! Synchronous advantage actor-critic with n-step returns.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::CartPole;
use crate::nn::{clip_grad_norm, Adam, AdamConfig, Trace};
use crate::policy::actor_critic::{build_networks, policy_logit_grad, VecCartPole};
use crate::policy::{
    sample_categorical, CompetenceGate, GateTracker, LearningCurve, PolicyNetworks, TargetKind, TargetPolicy,
    TrainConfig, TrainError, TrainOutcome,
};
use crate::rl::{argmax, derive_seed, softmax, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct A2cConfig {
    pub timesteps: u64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub n_steps: usize,
    pub n_envs: usize,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub gate: CompetenceGate,
}

impl Default for A2cConfig {
    fn default() -> Self {
        Self {
            timesteps: 500_000,
            gamma: 0.99,
            learning_rate: 7e-4,
            entropy_coef: 0.0,
            value_coef: 0.25,
            n_steps: 5,
            n_envs: 8,
            max_grad_norm: 0.5,
            hidden: vec![64, 64],
            gate: CompetenceGate::default(),
        }
    }
}

impl A2cConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if self.timesteps == 0 || self.n_steps == 0 || self.n_envs == 0 {
            return Err("timesteps, n_steps and n_envs must be positive".into());
        }
        if !(self.learning_rate > 0.0) || self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return Err("learning_rate must be positive and coefficients nonnegative".into());
        }
        Ok(())
    }
}

/// Discounted n-step returns for one environment's rollout segment.
/// `dones[t]` cuts the bootstrap after step `t`; `bootstrap` is `V(s_T)`.
pub fn nstep_returns(rewards: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut running = bootstrap;
    for t in (0..rewards.len()).rev() {
        if dones[t] {
            running = 0.0;
        }
        running = rewards[t] + gamma * running;
        out[t] = running;
    }
    out
}

struct Sample {
    obs: [f64; 4],
    action: usize,
    reward: f64,
    done: bool,
}

pub fn train_a2c(config: &A2cConfig, physics: CartPole, env_seed: u64, train_seed: u64) -> Result<TrainOutcome, TrainError> {
    config.validate().map_err(TrainError::InvalidConfig)?;
    let (mut actor, mut critic) = build_networks(&config.hidden, train_seed);
    let adam_config = AdamConfig::with_learning_rate(config.learning_rate);
    let mut actor_opt = Adam::new(actor.param_count(), adam_config);
    let mut critic_opt = Adam::new(critic.param_count(), adam_config);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train_seed, streams::EXPLORATION, 0));
    let mut bank = VecCartPole::new(config.n_envs, physics, env_seed);
    let mut gate = GateTracker::new(config.gate, physics, env_seed);
    let mut curve = LearningCurve::default();

    let batch = config.n_envs * config.n_steps;
    let mut segments: Vec<Vec<Sample>> = (0..config.n_envs).map(|_| Vec::with_capacity(config.n_steps)).collect();
    let mut actor_traces = vec![Trace::default(); batch];
    let mut critic_traces = vec![Trace::default(); batch];
    let mut actor_grad = actor.zero_grad();
    let mut critic_grad = critic.zero_grad();
    let mut steps = 0u64;

    while steps < config.timesteps {
        segments.iter_mut().for_each(Vec::clear);
        for _ in 0..config.n_steps {
            for (e, segment) in segments.iter_mut().enumerate() {
                let obs = bank.observation(e);
                let action = sample_categorical(&softmax(&actor.eval(&obs)), &mut rng);
                let step = bank.step(e, action);
                let mut reward = step.reward;
                if step.truncated {
                    reward += config.gamma * critic.eval(&step.final_observation)[0];
                }
                if let Some(r) = step.finished_return {
                    curve.episode_returns.push(r);
                }
                segment.push(Sample {
                    obs,
                    action,
                    reward,
                    done: step.failed || step.truncated,
                });
            }
        }
        steps += batch as u64;

        actor_grad.iter_mut().for_each(|g| *g = 0.0);
        critic_grad.iter_mut().for_each(|g| *g = 0.0);
        let mut k = 0;
        for (e, segment) in segments.iter().enumerate() {
            let bootstrap = critic.eval(&bank.observation(e))[0];
            let rewards: Vec<f64> = segment.iter().map(|s| s.reward).collect();
            let dones: Vec<bool> = segment.iter().map(|s| s.done).collect();
            let returns = nstep_returns(&rewards, &dones, bootstrap, config.gamma);
            for (sample, ret) in segment.iter().zip(returns) {
                let (ct, at) = (&mut critic_traces[k], &mut actor_traces[k]);
                critic.forward_trace(&sample.obs, ct);
                let value = ct.output()[0];
                let advantage = ret - value;
                critic.backward(ct, &[config.value_coef * 2.0 * (value - ret) / batch as f64], &mut critic_grad);
                actor.forward_trace(&sample.obs, at);
                let probs = softmax(at.output());
                let g: Vec<f64> = policy_logit_grad(&probs, sample.action, advantage, config.entropy_coef)
                    .into_iter()
                    .map(|x| x / batch as f64)
                    .collect();
                actor.backward(at, &g, &mut actor_grad);
                k += 1;
            }
        }
        clip_grad_norm(&mut [&mut actor_grad, &mut critic_grad], config.max_grad_norm);
        actor_opt.step(actor.params_mut(), &actor_grad);
        critic_opt.step(critic.params_mut(), &critic_grad);

        if gate.due(steps) && gate.check(steps, |obs| argmax(&actor.eval(obs)), &mut curve, || (actor.clone(), critic.clone())) {
            break;
        }
    }
    let ((actor, critic), final_eval_return, curve) = gate.finish(TargetKind::A2c, curve)?;
    Ok(TrainOutcome {
        policy: TargetPolicy {
            kind: TargetKind::A2c,
            networks: PolicyNetworks::ActorCritic { actor, critic },
            train_config: TrainConfig::A2c(config.clone()),
            env_seed,
            train_seed,
            final_eval_return,
        },
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn returns_bootstrap_and_cut_at_done() {
        let r = nstep_returns(&[1.0, 1.0, 1.0], &[false, true, false], 10.0, 0.5);
        assert_eq!(r, vec![1.5, 1.0, 6.0]);
    }

    #[test]
    fn exact_values_give_zero_advantage_and_zero_policy_gradient() {
        // Hand-built two-state chain A -> B -> end, reward 1 per step regardless
        // of action, gamma 0.9: V(B) = 1, V(A) = 1.9.
        let gamma = 0.9;
        let values = [1.9, 1.0];
        let returns = nstep_returns(&[1.0, 1.0], &[false, true], 0.0, gamma);
        for (ret, v) in returns.iter().zip(values) {
            let advantage = ret - v;
            assert!(advantage.abs() < 1e-12);
            let probs = softmax(&[0.2, -0.4]);
            for action in 0..2 {
                let g = policy_logit_grad(&probs, action, advantage, 0.0);
                assert!(g.iter().all(|x| x.abs() < 1e-12));
            }
        }
    }
}
