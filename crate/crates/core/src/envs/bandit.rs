use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::{Env, Outcome, State, StepResult};
use crate::error::Result;

/// One-step bandit over `a in [-1, 1]`. The mean reward is a two-bump
/// function of the action (tall bump at `+0.6`, short bump at `-0.6`);
/// observed rewards add Gaussian noise and are clipped to the reward bounds.
#[derive(Clone, Debug)]
pub struct ContinuousBandit {
    noise_std: f64,
    gamma: f64,
}

impl Default for ContinuousBandit {
    fn default() -> Self {
        Self { noise_std: 0.1, gamma: 0.9 }
    }
}

const WIDTH: f64 = 0.15;
const BOUNDS: (f64, f64) = (-0.5, 1.5);

impl ContinuousBandit {
    pub fn new(noise_std: f64, gamma: f64) -> Self {
        Self { noise_std, gamma }
    }

    pub fn mean_reward(a: f64) -> f64 {
        let bump = |c: f64| (-(a - c) * (a - c) / (2.0 * WIDTH * WIDTH)).exp();
        bump(0.6) + 0.5 * bump(-0.6)
    }

    /// Mean reward of an action drawn uniformly from `[-1, 1]`, by
    /// composite Simpson quadrature.
    pub fn uniform_mean_reward() -> f64 {
        let n = 2000;
        let h = 2.0 / n as f64;
        let mut s = Self::mean_reward(-1.0) + Self::mean_reward(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * Self::mean_reward(-1.0 + i as f64 * h);
        }
        s * h / 3.0 / 2.0
    }
}

impl Env for ContinuousBandit {
    fn id(&self) -> &str {
        "continuous-bandit"
    }

    fn n_states(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn reward_bounds(&self) -> (f64, f64) {
        BOUNDS
    }

    fn start_state(&self) -> State {
        0
    }

    fn terminal_state(&self) -> State {
        1
    }

    fn discrete_actions(&self) -> Option<Vec<Vec<f64>>> {
        None
    }

    fn outcomes(&self, _s: State, _a: &[f64]) -> Option<Vec<Outcome>> {
        None
    }

    fn step(&self, s: State, a: &[f64], rng: &mut dyn RngCore) -> Result<StepResult> {
        self.check_action(a)?;
        if s == self.terminal_state() {
            return Ok(StepResult { next: s, reward: 0.0, terminal: true });
        }
        let noise: f64 = rng.sample(StandardNormal);
        let reward = (Self::mean_reward(a[0]) + self.noise_std * noise).clamp(BOUNDS.0, BOUNDS.1);
        Ok(StepResult { next: self.terminal_state(), reward, terminal: true })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tall_bump_beats_short_bump() {
        assert!((ContinuousBandit::mean_reward(0.6) - 1.0).abs() < 1e-3);
        assert!((ContinuousBandit::mean_reward(-0.6) - 0.5).abs() < 1e-3);
        assert!(ContinuousBandit::mean_reward(0.0) < 0.01);
    }

    #[test]
    fn uniform_mean_matches_gaussian_integral() {
        // both bumps sit well inside [-1, 1]: integral ~ 1.5 * w * sqrt(2 pi)
        let approx = 1.5 * WIDTH * (2.0 * std::f64::consts::PI).sqrt() / 2.0;
        assert!((ContinuousBandit::uniform_mean_reward() - approx).abs() < 2e-3);
    }

    #[test]
    fn reward_noise_has_declared_scale() {
        let env = ContinuousBandit::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..20_000).map(|_| env.step(0, &[0.0], &mut rng).unwrap().reward).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.005);
    }
}
