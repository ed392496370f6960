use super::{Env, Outcome, State};

/// A corridor of `length` cells. Action `a >= 0` steps forward, `a < 0`
/// stays put; both pay `step_reward`. Stepping off the last cell pays a
/// reward drawn from `terminal_rewards` and ends the episode, unless the
/// chain loops, in which case it wraps to cell 0 and pays `step_reward`.
#[derive(Clone, Debug)]
pub struct StochasticChain {
    id: String,
    length: usize,
    step_reward: f64,
    terminal_rewards: Vec<(f64, f64)>,
    gamma: f64,
    looping: bool,
}

impl Default for StochasticChain {
    fn default() -> Self {
        Self::new("stochastic-chain", 4, 0.0, vec![(1.0, 0.5), (-1.0, 0.5)], 0.9)
    }
}

impl StochasticChain {
    /// `terminal_rewards` holds `(reward, probability)` pairs summing to 1.
    pub fn new(id: &str, length: usize, step_reward: f64, terminal_rewards: Vec<(f64, f64)>, gamma: f64) -> Self {
        assert!(length >= 1, "chain needs at least one cell");
        Self { id: id.into(), length, step_reward, terminal_rewards, gamma, looping: false }
    }

    /// One step, terminal reward +1 or -1 with probability 1/2.
    pub fn coin() -> Self {
        Self::new("coin", 1, 0.0, vec![(1.0, 0.5), (-1.0, 0.5)], 0.9)
    }

    /// Single cell that pays `reward` forever; the return is
    /// `reward / (1 - gamma)` under every policy.
    pub fn looping(reward: f64, gamma: f64) -> Self {
        let mut c = Self::new("loop-chain", 1, reward, vec![(reward, 1.0)], gamma);
        c.looping = true;
        c
    }
}

impl Env for StochasticChain {
    fn id(&self) -> &str {
        &self.id
    }

    fn n_states(&self) -> usize {
        self.length + 1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn reward_bounds(&self) -> (f64, f64) {
        let rs = self.terminal_rewards.iter().map(|r| r.0).chain([self.step_reward, 0.0]);
        let lo = rs.clone().fold(f64::INFINITY, f64::min);
        let hi = rs.fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    fn start_state(&self) -> State {
        0
    }

    fn terminal_state(&self) -> State {
        self.length
    }

    fn discrete_actions(&self) -> Option<Vec<Vec<f64>>> {
        Some(vec![vec![-1.0], vec![1.0]])
    }

    fn outcomes(&self, s: State, a: &[f64]) -> Option<Vec<Outcome>> {
        if s == self.length {
            return Some(vec![Outcome { prob: 1.0, reward: 0.0, next: s, terminal: true }]);
        }
        let forward = a[0] >= 0.0;
        if !forward {
            return Some(vec![Outcome { prob: 1.0, reward: self.step_reward, next: s, terminal: false }]);
        }
        if s + 1 < self.length {
            return Some(vec![Outcome { prob: 1.0, reward: self.step_reward, next: s + 1, terminal: false }]);
        }
        if self.looping {
            return Some(vec![Outcome { prob: 1.0, reward: self.step_reward, next: 0, terminal: false }]);
        }
        Some(
            self.terminal_rewards
                .iter()
                .map(|&(reward, prob)| Outcome { prob, reward, next: self.length, terminal: true })
                .collect(),
        )
    }
}
