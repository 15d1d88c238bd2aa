//! Pieces shared by the on-policy trainers: separate actor/critic networks,
//! a sequentially stepped bank of cart-poles, and logit-space gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{CartPole, CartPoleEnv};
use crate::nn::{Activation, Mlp};
use crate::rl::{derive_seed, streams};

pub(crate) fn build_networks(hidden: &[usize], seed: u64) -> (Mlp, Mlp) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::NETWORK_INIT, 0));
    let sizes = |out: usize| {
        let mut s = vec![4];
        s.extend(hidden);
        s.push(out);
        s
    };
    let mut actor = Mlp::new(&sizes(2), Activation::Tanh, Activation::Identity, &mut rng);
    actor.scale_output_layer(0.01);
    let critic = Mlp::new(&sizes(1), Activation::Tanh, Activation::Identity, &mut rng);
    (actor, critic)
}

/// Outcome of stepping one member of a [`VecCartPole`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct BankStep {
    pub reward: f64,
    /// Pole fell or cart left the track.
    pub failed: bool,
    pub truncated: bool,
    /// Observation reached by the step, before any automatic reset.
    pub final_observation: [f64; 4],
    pub finished_return: Option<f64>,
}

/// `n` independent cart-poles stepped one after another. Finished episodes
/// reset immediately from the next seed in the training stream.
pub(crate) struct VecCartPole {
    envs: Vec<CartPoleEnv>,
    returns: Vec<f64>,
    env_seed: u64,
    episodes_started: u64,
}

impl VecCartPole {
    pub fn new(n: usize, physics: CartPole, env_seed: u64) -> Self {
        let mut bank = Self {
            envs: vec![CartPoleEnv::new(physics); n],
            returns: vec![0.0; n],
            env_seed,
            episodes_started: 0,
        };
        for i in 0..n {
            bank.reset(i);
        }
        bank
    }

    fn reset(&mut self, i: usize) {
        let seed = derive_seed(self.env_seed, streams::TRAIN_EPISODES, self.episodes_started);
        self.episodes_started += 1;
        self.envs[i].reset_state(seed);
        self.returns[i] = 0.0;
    }

    pub fn observation(&self, i: usize) -> [f64; 4] {
        self.envs[i].state().observation()
    }

    pub fn step(&mut self, i: usize, action: usize) -> BankStep {
        let result = self.envs[i].step_state(action);
        self.returns[i] += result.reward;
        let finished_return = result.terminal.then_some(self.returns[i]);
        if result.terminal {
            self.reset(i);
        }
        BankStep {
            reward: result.reward,
            failed: result.terminal && !result.truncated,
            truncated: result.truncated,
            final_observation: result.observation,
            finished_return,
        }
    }
}

/// Gradient with respect to the logits of `-advantage * log pi(action) - entropy_coef * H(pi)`.
pub fn policy_logit_grad(probs: &[f64], action: usize, advantage: f64, entropy_coef: f64) -> Vec<f64> {
    let mut grad: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(k, &p)| advantage * (p - if k == action { 1.0 } else { 0.0 }))
        .collect();
    if entropy_coef != 0.0 {
        let h = entropy(probs);
        for (g, &p) in grad.iter_mut().zip(probs) {
            if p > 0.0 {
                *g += entropy_coef * p * (p.ln() + h);
            }
        }
    }
    grad
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}
