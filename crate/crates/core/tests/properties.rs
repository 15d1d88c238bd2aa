use advbench::adversarial::{
    adv_action_set, adversarial_regret, worst_alternative, AdvAction, AdvStepContext, AugmentedState, OverBudget,
    ResilienceRule, RewardRule, RobustnessRule,
};
use advbench::benchmark::{perturbation_histogram, EpisodeRecord};
use advbench::env::{CartPole, EnvState};
use advbench::rl::derive_seed;
use proptest::prelude::*;

fn record(timesteps: Vec<u32>, length: u32) -> EpisodeRecord {
    EpisodeRecord {
        episode_index: 0,
        seed: 0,
        nominal_return: 500.0,
        perturbed_return: f64::from(length),
        regret: 500.0 - f64::from(length),
        cost_total: timesteps.len() as f64,
        adversary_return: 0.0,
        perturbation_timesteps: timesteps,
        over_budget: 0,
        episode_length: length,
    }
}

fn episode() -> impl Strategy<Value = EpisodeRecord> {
    (1u32..60).prop_flat_map(|len| {
        proptest::collection::btree_set(0..len, 0..len as usize)
            .prop_map(move |set| record(set.into_iter().collect(), len))
    })
}

proptest! {
    #[test]
    fn encoding_is_injective(
        a in proptest::array::uniform4(-3.0f64..3.0),
        b in proptest::array::uniform4(-3.0f64..3.0),
        ta in 0usize..2,
        tb in 0usize..2,
    ) {
        let x = AugmentedState { observation: a, target_action: ta };
        let y = AugmentedState { observation: b, target_action: tb };
        prop_assert_eq!(x == y, x.encode(2) == y.encode(2));
        let e = x.encode(2);
        prop_assert_eq!(&e[..4], &a[..]);
        prop_assert_eq!(e[4 + ta], 1.0);
        prop_assert_eq!(e.iter().skip(4).sum::<f64>(), 1.0);
    }

    #[test]
    fn induced_action_is_never_the_target_action(
        q in proptest::collection::vec(-10.0f64..10.0, 2..6),
        pick in 0usize..6,
        invariant in any::<bool>(),
    ) {
        let target = pick % q.len();
        let worst = worst_alternative(&q, target).unwrap();
        prop_assert_ne!(worst, target);
        prop_assert!(q.iter().enumerate().all(|(a, &v)| a == target || q[worst] <= v));
        let set = adv_action_set(&q, target, invariant);
        prop_assert_eq!(set[0], AdvAction::NoAction);
        prop_assert!(set.iter().all(|a| *a != AdvAction::Induce(target)));
        let expected = if invariant { 2 } else { q.len() };
        prop_assert_eq!(set.len(), expected);
    }

    #[test]
    fn histogram_conserves_mass(episodes in proptest::collection::vec(episode(), 1..20)) {
        let h = perturbation_histogram(&episodes);
        let total: usize = episodes.iter().map(|r| r.perturbations()).sum();
        prop_assert_eq!(h.total as usize, total);
        prop_assert_eq!(h.counts.iter().sum::<u64>(), h.total);
        match h.first_quartile_fraction {
            None => prop_assert_eq!(total, 0),
            Some(f) => prop_assert!((0.0..=1.0).contains(&f)),
        }
    }

    /// Summing the rules over a whole episode gives the episode identity.
    #[test]
    fn rules_satisfy_episode_identity(
        perturb in proptest::collection::vec(any::<bool>(), 8..60),
        delta in 0u32..12,
    ) {
        let length = perturb.len();
        let n = perturb.iter().filter(|p| **p).count() as f64;
        let excess = (n - f64::from(delta)).max(0.0);
        let regret = adversarial_regret(500.0, length as f64);
        let robust = RobustnessRule { delta_max: Some(delta), over_budget: OverBudget::Penalize };
        for (rule, expected) in [
            (&ResilienceRule as &dyn RewardRule, regret - n),
            (&robust, regret - n - excess * (f64::from(delta) - 1.0)),
        ] {
            let mut ctx = AdvStepContext::new(500.0);
            let mut total = 0.0;
            for (t, &p) in perturb.iter().enumerate() {
                total += rule.charge(p.then_some(1.0), &mut ctx).reward;
                ctx.score_t += 1.0;
                if t + 1 == length {
                    total += rule.terminal_bonus(&mut ctx);
                }
            }
            prop_assert_eq!(total, expected);
        }
    }

    #[test]
    fn state_json_round_trips_exactly(s in proptest::array::uniform4(-5.0f64..5.0)) {
        let state = EnvState::new(s);
        let back: EnvState = serde_json::from_str(&serde_json::to_string(&state).unwrap()).unwrap();
        prop_assert_eq!(back, state);
    }

    #[test]
    fn physics_is_a_pure_function(s in proptest::array::uniform4(-0.2f64..0.2), action in 0usize..2) {
        let physics = CartPole::default();
        let state = EnvState::new(s);
        prop_assert_eq!(physics.step(&state, action), physics.step(&state, action));
    }

    #[test]
    fn derived_seeds_differ_across_indices(base in any::<u64>(), stream in 0u64..8, i in 0u64..10_000) {
        prop_assert_ne!(derive_seed(base, stream, i), derive_seed(base, stream, i + 1));
    }
}
