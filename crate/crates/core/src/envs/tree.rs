use super::{Env, Outcome, State};

/// Binary tree of stochastic branches. At depth `h` the agent picks
/// `a >= 0` ("lean up", up-branch probability `p_lean`) or `a < 0`
/// ("lean down", up-branch probability `1 - p_lean`); the up branch pays
/// `+level_rewards[h]`, the down branch `-level_rewards[h]`. Leaves are
/// terminal. A dominant first-level reward makes the return bimodal.
#[derive(Clone, Debug)]
pub struct BranchingTree {
    depth: usize,
    level_rewards: Vec<f64>,
    p_lean: f64,
    gamma: f64,
}

impl Default for BranchingTree {
    fn default() -> Self {
        Self::new(vec![1.0, 0.4, 0.15], 0.7, 0.9)
    }
}

impl BranchingTree {
    pub fn new(level_rewards: Vec<f64>, p_lean: f64, gamma: f64) -> Self {
        assert!(!level_rewards.is_empty());
        Self { depth: level_rewards.len(), level_rewards, p_lean, gamma }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Heap-indexed decision nodes; the last level leads straight to the
    /// terminal state.
    fn n_nodes(&self) -> usize {
        (1 << self.depth) - 1
    }

    fn level(&self, node: State) -> usize {
        (usize::BITS - (node + 1).leading_zeros() - 1) as usize
    }

    pub fn up_probability(&self, a: &[f64]) -> f64 {
        if a[0] >= 0.0 {
            self.p_lean
        } else {
            1.0 - self.p_lean
        }
    }
}

impl Env for BranchingTree {
    fn id(&self) -> &str {
        "branching-tree"
    }

    /// Decision nodes plus one absorbing terminal state.
    fn n_states(&self) -> usize {
        self.n_nodes() + 1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn reward_bounds(&self) -> (f64, f64) {
        let m = self.level_rewards.iter().fold(0.0f64, |acc, r| acc.max(r.abs()));
        (-m, m)
    }

    fn start_state(&self) -> State {
        0
    }

    fn terminal_state(&self) -> State {
        self.n_nodes()
    }

    fn discrete_actions(&self) -> Option<Vec<Vec<f64>>> {
        Some(vec![vec![-1.0], vec![1.0]])
    }

    fn outcomes(&self, s: State, a: &[f64]) -> Option<Vec<Outcome>> {
        let level = if s < self.n_nodes() { self.level(s) } else { self.depth };
        if level >= self.depth {
            return Some(vec![Outcome { prob: 1.0, reward: 0.0, next: self.terminal_state(), terminal: true }]);
        }
        let p = self.up_probability(a);
        let r = self.level_rewards[level];
        let last = level + 1 == self.depth;
        let (up, down) = if last { (self.terminal_state(), self.terminal_state()) } else { (2 * s + 1, 2 * s + 2) };
        Some(vec![
            Outcome { prob: p, reward: r, next: up, terminal: last },
            Outcome { prob: 1.0 - p, reward: -r, next: down, terminal: last },
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn levels_follow_heap_layout() {
        let t = BranchingTree::default();
        assert_eq!(t.level(0), 0);
        assert_eq!(t.level(1), 1);
        assert_eq!(t.level(2), 1);
        assert_eq!(t.level(6), 2);
        assert_eq!(t.n_states(), 8);
    }

    #[test]
    fn branch_frequency_matches_probability() {
        let t = BranchingTree::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let ups = (0..n).filter(|_| t.step(0, &[-1.0], &mut rng).unwrap().reward > 0.0).count();
        let p = 0.3;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(((ups as f64 / n as f64) - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn depth_three_ends_after_three_steps() {
        let t = BranchingTree::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = 0;
        for step in 0..3 {
            let r = t.step(s, &[1.0], &mut rng).unwrap();
            assert_eq!(r.terminal, step == 2);
            s = r.next;
        }
        assert_eq!(s, t.terminal_state());
    }
}
