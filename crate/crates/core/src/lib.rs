//! Adversarial resilience and robustness benchmarking of deep-RL policies.
//!
//! An adversary is trained with DQN inside an augmented MDP whose states are
//! `(observation, target action)` pairs. Each adversarial action either lets
//! the target act or forces the target's worst action according to its
//! state-action values. The resulting metrics quantify how many perturbations a
//! policy tolerates (resilience) and how much return it loses under a
//! perturbation budget (robustness).

pub mod adversarial;
pub mod benchmark;
pub mod env;
pub mod nn;
pub mod policy;
pub mod qstar;
pub mod report;
pub mod rl;
