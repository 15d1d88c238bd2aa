//! Name-keyed registry of target trainers.

use std::collections::BTreeMap;

use crate::env::CartPole;
use crate::policy::{a2c, dqn, ppo, TargetKind, TrainConfig, TrainError, TrainOutcome};

pub trait TargetTrainer: Send + Sync {
    fn name(&self) -> &'static str;
    fn kind(&self) -> TargetKind;
    fn default_config(&self) -> TrainConfig;
    fn train(&self, config: &TrainConfig, physics: CartPole, env_seed: u64, train_seed: u64) -> Result<TrainOutcome, TrainError>;
}

fn mismatched(expected: TargetKind, config: &TrainConfig) -> TrainError {
    TrainError::InvalidConfig(format!("{expected} trainer received a {} configuration", config.kind()))
}

pub struct DqnTrainer;
pub struct A2cTrainer;
pub struct PpoTrainer;

impl TargetTrainer for DqnTrainer {
    fn name(&self) -> &'static str {
        "dqn"
    }
    fn kind(&self) -> TargetKind {
        TargetKind::Dqn
    }
    fn default_config(&self) -> TrainConfig {
        TrainConfig::default_for(TargetKind::Dqn)
    }
    fn train(&self, config: &TrainConfig, physics: CartPole, env_seed: u64, train_seed: u64) -> Result<TrainOutcome, TrainError> {
        match config {
            TrainConfig::Dqn(c) => dqn::train_dqn(c, physics, env_seed, train_seed),
            other => Err(mismatched(TargetKind::Dqn, other)),
        }
    }
}

impl TargetTrainer for A2cTrainer {
    fn name(&self) -> &'static str {
        "a2c"
    }
    fn kind(&self) -> TargetKind {
        TargetKind::A2c
    }
    fn default_config(&self) -> TrainConfig {
        TrainConfig::default_for(TargetKind::A2c)
    }
    fn train(&self, config: &TrainConfig, physics: CartPole, env_seed: u64, train_seed: u64) -> Result<TrainOutcome, TrainError> {
        match config {
            TrainConfig::A2c(c) => a2c::train_a2c(c, physics, env_seed, train_seed),
            other => Err(mismatched(TargetKind::A2c, other)),
        }
    }
}

impl TargetTrainer for PpoTrainer {
    fn name(&self) -> &'static str {
        "ppo"
    }
    fn kind(&self) -> TargetKind {
        TargetKind::Ppo
    }
    fn default_config(&self) -> TrainConfig {
        TrainConfig::default_for(TargetKind::Ppo)
    }
    fn train(&self, config: &TrainConfig, physics: CartPole, env_seed: u64, train_seed: u64) -> Result<TrainOutcome, TrainError> {
        match config {
            TrainConfig::Ppo(c) => ppo::train_ppo(c, physics, env_seed, train_seed),
            other => Err(mismatched(TargetKind::Ppo, other)),
        }
    }
}

pub struct TrainerRegistry {
    trainers: BTreeMap<&'static str, Box<dyn TargetTrainer>>,
}

impl TrainerRegistry {
    pub fn empty() -> Self {
        Self { trainers: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut registry = Self::empty();
        registry.register(Box::new(DqnTrainer));
        registry.register(Box::new(A2cTrainer));
        registry.register(Box::new(PpoTrainer));
        registry
    }

    /// Registers `trainer`, replacing any previous entry with the same name.
    pub fn register(&mut self, trainer: Box<dyn TargetTrainer>) {
        self.trainers.insert(trainer.name(), trainer);
    }

    pub fn get(&self, name: &str) -> Option<&dyn TargetTrainer> {
        self.trainers.get(name).map(Box::as_ref)
    }

    pub fn for_kind(&self, kind: TargetKind) -> Option<&dyn TargetTrainer> {
        self.trainers.values().find(|t| t.kind() == kind).map(Box::as_ref)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.trainers.keys().copied()
    }
}

impl Default for TrainerRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_registered_by_name() {
        let registry = TrainerRegistry::with_builtins();
        assert_eq!(registry.names().collect::<Vec<_>>(), vec!["a2c", "dqn", "ppo"]);
        for kind in TargetKind::ALL {
            let trainer = registry.get(kind.name()).unwrap();
            assert_eq!(trainer.kind(), kind);
            assert_eq!(trainer.default_config().kind(), kind);
        }
        assert!(registry.get("sac").is_none());
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let registry = TrainerRegistry::with_builtins();
        let err = registry
            .get("dqn")
            .unwrap()
            .train(&TrainConfig::default_for(TargetKind::Ppo), CartPole::default(), 0, 0)
            .unwrap_err();
        assert!(matches!(err, TrainError::InvalidConfig(_)));
    }
}
