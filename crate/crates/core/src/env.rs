//! Seedable cart-pole environment.
//!
//! The physics are a pure function of `(EnvState, action)`, so a state value
//! doubles as a snapshot: copying it and stepping again reproduces the
//! trajectory exactly. [`CartPoleEnv`] wraps the physics with a live state for
//! the episodic [`Environment`] interface.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rl::{Environment, Step};

/// Number of steps after which an episode is truncated. Also the maximum return.
pub const MAX_EPISODE_STEPS: u32 = 500;

/// Half-width of the uniform reset distribution for every state component.
pub const RESET_HALF_WIDTH: f64 = 0.05;

pub const ACTION_LEFT: usize = 0;
pub const ACTION_RIGHT: usize = 1;

/// Physical state of the cart-pole plus the episode step counter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub cart_position: f64,
    pub cart_velocity: f64,
    pub pole_angle: f64,
    pub pole_tip_velocity: f64,
    pub step_count: u32,
}

impl EnvState {
    pub fn new(physical: [f64; 4]) -> Self {
        Self {
            cart_position: physical[0],
            cart_velocity: physical[1],
            pole_angle: physical[2],
            pole_tip_velocity: physical[3],
            step_count: 0,
        }
    }

    pub fn observation(&self) -> [f64; 4] {
        [
            self.cart_position,
            self.cart_velocity,
            self.pole_angle,
            self.pole_tip_velocity,
        ]
    }
}

/// Outcome of a single tick.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: [f64; 4],
    pub reward: f64,
    /// The episode is over, either by failure or by reaching the step limit.
    pub terminal: bool,
    /// The episode ended only because of the step limit.
    pub truncated: bool,
}

/// Physical constants and termination thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub half_pole_length: f64,
    pub force_mag: f64,
    pub tau: f64,
    pub x_threshold: f64,
    pub theta_threshold_radians: f64,
    pub max_steps: u32,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_pole_length: 0.5,
            force_mag: 10.0,
            tau: 0.02,
            x_threshold: 2.4,
            theta_threshold_radians: 12.0_f64.to_radians(),
            max_steps: MAX_EPISODE_STEPS,
        }
    }
}

/// Cart-pole dynamics: classic equations, semi-implicit Euler integration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CartPole {
    params: CartPoleParams,
}

impl CartPole {
    pub fn new(params: CartPoleParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &CartPoleParams {
        &self.params
    }

    pub fn action_count(&self) -> usize {
        2
    }

    /// Initial state with every physical component uniform in `[-0.05, 0.05)`.
    pub fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || rng.gen_range(-RESET_HALF_WIDTH..RESET_HALF_WIDTH);
        EnvState::new([draw(), draw(), draw(), draw()])
    }

    /// Pole angle or cart position out of bounds.
    pub fn is_failure(&self, state: &EnvState) -> bool {
        state.cart_position.abs() > self.params.x_threshold
            || state.pole_angle.abs() > self.params.theta_threshold_radians
    }

    pub fn is_terminal(&self, state: &EnvState) -> bool {
        self.is_failure(state) || state.step_count >= self.params.max_steps
    }

    /// Cart and pole accelerations `(x_acc, theta_acc)` under a horizontal force.
    pub fn accelerations(&self, state: &EnvState, force: f64) -> (f64, f64) {
        let p = &self.params;
        let total_mass = p.cart_mass + p.pole_mass;
        let pole_mass_length = p.pole_mass * p.half_pole_length;
        let (sin, cos) = state.pole_angle.sin_cos();
        let temp = (force + pole_mass_length * state.pole_tip_velocity.powi(2) * sin) / total_mass;
        let theta_acc = (p.gravity * sin - cos * temp)
            / (p.half_pole_length * (4.0 / 3.0 - p.pole_mass * cos * cos / total_mass));
        let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;
        (x_acc, theta_acc)
    }

    pub fn force_for(&self, action: usize) -> f64 {
        match action {
            ACTION_LEFT => -self.params.force_mag,
            ACTION_RIGHT => self.params.force_mag,
            other => panic!("cart-pole action must be 0 or 1, got {other}"),
        }
    }

    /// Advance one tick.
    ///
    /// Panics when `state` is already terminal; callers must reset first.
    pub fn step(&self, state: &EnvState, action: usize) -> (EnvState, StepResult) {
        assert!(
            !self.is_terminal(state),
            "stepping a terminal cart-pole state (step {})",
            state.step_count
        );
        let force = self.force_for(action);
        let (x_acc, theta_acc) = self.accelerations(state, force);
        let tau = self.params.tau;

        let cart_velocity = state.cart_velocity + tau * x_acc;
        let cart_position = state.cart_position + tau * cart_velocity;
        let pole_tip_velocity = state.pole_tip_velocity + tau * theta_acc;
        let pole_angle = state.pole_angle + tau * pole_tip_velocity;
        let next = EnvState {
            cart_position,
            cart_velocity,
            pole_angle,
            pole_tip_velocity,
            step_count: state.step_count + 1,
        };
        let failure = self.is_failure(&next);
        let terminal = failure || next.step_count >= self.params.max_steps;
        let result = StepResult {
            observation: next.observation(),
            reward: 1.0,
            terminal,
            truncated: terminal && !failure,
        };
        (next, result)
    }
}

/// Stateful cart-pole with snapshot/restore.
#[derive(Clone, Debug)]
pub struct CartPoleEnv {
    physics: CartPole,
    state: EnvState,
}

impl CartPoleEnv {
    pub fn new(physics: CartPole) -> Self {
        Self {
            physics,
            state: physics.reset(0),
        }
    }

    pub fn physics(&self) -> &CartPole {
        &self.physics
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn reset_state(&mut self, seed: u64) -> EnvState {
        self.state = self.physics.reset(seed);
        self.state
    }

    pub fn step_state(&mut self, action: usize) -> StepResult {
        let (next, result) = self.physics.step(&self.state, action);
        self.state = next;
        result
    }

    pub fn is_terminal(&self) -> bool {
        self.physics.is_terminal(&self.state)
    }

    pub fn snapshot(&self) -> EnvState {
        self.state
    }

    pub fn restore(&mut self, snapshot: EnvState) -> EnvState {
        self.state = snapshot;
        self.state
    }
}

impl Default for CartPoleEnv {
    fn default() -> Self {
        Self::new(CartPole::default())
    }
}

impl Environment for CartPoleEnv {
    fn observation_dim(&self) -> usize {
        4
    }

    fn action_count(&self) -> usize {
        2
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.reset_state(seed).observation().to_vec()
    }

    fn step(&mut self, action: usize) -> Step {
        let result = self.step_state(action);
        Step {
            observation: result.observation.to_vec(),
            reward: result.reward,
            terminal: result.terminal,
            truncated: result.truncated,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Accelerations from the Lagrangian equations of motion written as a
    /// 2x2 linear system `M [x_acc, theta_acc]^T = f` and solved by Cramer's rule.
    fn mass_matrix_accelerations(p: &CartPoleParams, s: &EnvState, force: f64) -> (f64, f64) {
        let (m, mc, l, g) = (p.pole_mass, p.cart_mass, p.half_pole_length, p.gravity);
        let (sin, cos) = s.pole_angle.sin_cos();
        let a11 = mc + m;
        let a12 = m * l * cos;
        let a21 = m * l * cos;
        let a22 = 4.0 / 3.0 * m * l * l;
        let b1 = force + m * l * s.pole_tip_velocity.powi(2) * sin;
        let b2 = m * g * l * sin;
        let det = a11 * a22 - a12 * a21;
        ((b1 * a22 - a12 * b2) / det, (a11 * b2 - a21 * b1) / det)
    }

    fn rk4_continuous(p: &CartPoleParams, s: &EnvState, force: f64, duration: f64, substeps: usize) -> [f64; 4] {
        let deriv = |y: [f64; 4]| {
            let st = EnvState::new(y);
            let (xa, ta) = mass_matrix_accelerations(p, &st, force);
            [y[1], xa, y[3], ta]
        };
        let mut y = s.observation();
        let h = duration / substeps as f64;
        for _ in 0..substeps {
            let k1 = deriv(y);
            let k2 = deriv(std::array::from_fn(|i| y[i] + 0.5 * h * k1[i]));
            let k3 = deriv(std::array::from_fn(|i| y[i] + 0.5 * h * k2[i]));
            let k4 = deriv(std::array::from_fn(|i| y[i] + h * k3[i]));
            y = std::array::from_fn(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        }
        y
    }

    #[test]
    fn reset_is_deterministic() {
        let env = CartPole::default();
        assert_eq!(env.reset(42), env.reset(42));
        assert_ne!(env.reset(0), env.reset(1));
    }

    #[test]
    fn reset_components_within_range() {
        let env = CartPole::default();
        for seed in 0..10_000 {
            let s = env.reset(seed);
            assert_eq!(s.step_count, 0);
            assert!(s.observation().iter().all(|c| c.abs() <= RESET_HALF_WIDTH), "seed {seed}");
        }
    }

    #[test]
    fn angle_past_twelve_degrees_terminates() {
        let env = CartPole::default();
        let mut s = EnvState::new([0.0, 0.0, 11.9_f64.to_radians(), 1.0]);
        s.step_count = 3;
        let (next, result) = env.step(&s, ACTION_RIGHT);
        assert!(next.pole_angle > 12.0_f64.to_radians());
        assert!(result.terminal);
        assert!(!result.truncated);
        assert_eq!(result.reward, 1.0);
    }

    #[test]
    fn zero_gravity_pole_runs_to_truncation() {
        // Without gravity the push pattern L R R L returns the cart and pole to
        // rest every four ticks, so the episode must end exactly at 500.
        let mut params = CartPoleParams::default();
        params.gravity = 0.0;
        let env = CartPole::new(params);
        let mut s = EnvState::new([0.0; 4]);
        let mut ret = 0.0;
        let mut last = None;
        for t in 0..MAX_EPISODE_STEPS {
            let (next, r) = env.step(&s, [0, 1, 1, 0][(t % 4) as usize]);
            ret += r.reward;
            s = next;
            last = Some(r);
            if r.terminal {
                break;
            }
        }
        let last = last.unwrap();
        assert!(last.terminal && last.truncated);
        assert_eq!(s.step_count, MAX_EPISODE_STEPS);
        assert_eq!(ret, 500.0);
    }

    #[test]
    fn euler_update_matches_mass_matrix_solution() {
        let env = CartPole::default();
        let p = *env.params();
        let s = EnvState::new([0.0; 4]);
        let (next, _) = env.step(&s, ACTION_RIGHT);
        let (xa, ta) = mass_matrix_accelerations(&p, &s, p.force_mag);
        let vx = s.cart_velocity + p.tau * xa;
        let vt = s.pole_tip_velocity + p.tau * ta;
        assert!(next.cart_velocity > 0.0);
        assert!((next.cart_velocity - vx).abs() < 1e-9);
        assert!((next.cart_position - (s.cart_position + p.tau * vx)).abs() < 1e-9);
        assert!((next.pole_tip_velocity - vt).abs() < 1e-9);
        assert!((next.pole_angle - (s.pole_angle + p.tau * vt)).abs() < 1e-9);

        for seed in 0..200 {
            let s = env.reset(seed);
            for action in [ACTION_LEFT, ACTION_RIGHT] {
                let (x, t) = env.accelerations(&s, env.force_for(action));
                let (xo, to) = mass_matrix_accelerations(&p, &s, env.force_for(action));
                assert!((x - xo).abs() < 1e-9 && (t - to).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn one_tick_tracks_continuous_dynamics() {
        // Semi-implicit Euler is first order; over a single tick velocities
        // agree with a fine RK4 solution of the ODE to O(tau^2).
        let env = CartPole::default();
        let p = *env.params();
        let s = EnvState::new([0.01, -0.02, 0.03, 0.04]);
        let (next, _) = env.step(&s, ACTION_LEFT);
        let exact = rk4_continuous(&p, &s, -p.force_mag, p.tau, 1000);
        assert!((next.cart_velocity - exact[1]).abs() < 1e-3);
        assert!((next.pole_tip_velocity - exact[3]).abs() < 1e-3);
        assert!((next.cart_position - exact[0]).abs() < 5e-3);
        assert!((next.pole_angle - exact[2]).abs() < 5e-3);
    }

    #[test]
    #[should_panic(expected = "terminal")]
    fn stepping_terminal_state_panics() {
        let env = CartPole::default();
        let s = EnvState::new([3.0, 0.0, 0.0, 0.0]);
        env.step(&s, 0);
    }

    #[test]
    fn snapshot_restore_replays_exactly() {
        let mut env = CartPoleEnv::default();
        env.reset_state(5);
        let snap = env.snapshot();
        let first = env.step_state(1);
        env.restore(snap);
        assert_eq!(env.step_state(1), first);

        env.reset_state(9);
        let snap = env.snapshot();
        let actions: Vec<usize> = (0..100).map(|t| (t * 7 % 3 == 0) as usize).collect();
        let rollout = |env: &mut CartPoleEnv| {
            let mut ret = 0.0;
            let mut states = Vec::new();
            for &a in &actions {
                if env.is_terminal() {
                    break;
                }
                ret += env.step_state(a).reward;
                states.push(*env.state());
            }
            (ret, states)
        };
        let a = rollout(&mut env);
        env.restore(snap);
        let b = rollout(&mut env);
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn snapshot_of_terminal_state_stays_terminal() {
        let mut env = CartPoleEnv::default();
        env.restore(EnvState::new([0.0, 0.0, 0.5, 0.0]));
        let snap = env.snapshot();
        env.reset_state(1);
        env.restore(snap);
        assert!(env.is_terminal());
    }
}
