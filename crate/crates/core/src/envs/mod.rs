//! Toy MDPs with enumerable dynamics, exact return oracles and offline
//! dataset generation.
//!
//! States are indices, encoded one-hot for the networks. Every env has an
//! absorbing terminal state that self-loops with reward 0. Discrete-action
//! envs embed their moves as points of the action box `[-1, 1]^d` and snap
//! arbitrary box actions to the nearest legal one.

mod bandit;
pub mod bellman;
mod chain;
mod dataset;
mod grid;
mod oracle;
mod tree;

use rand::{Rng, RngCore};

pub use bandit::ContinuousBandit;
pub use chain::StochasticChain;
pub use dataset::{generate_dataset, Dataset, DatasetMeta, Transition};
pub use grid::WindyGrid;
pub use oracle::{enumerate_return_distribution, monte_carlo_returns, ReturnAtomSet, MAX_FRONTIER};
pub use tree::BranchingTree;

use crate::error::{Error, Result};

pub type State = usize;

/// One possible result of taking an action.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub prob: f64,
    pub reward: f64,
    pub next: State,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next: State,
    pub reward: f64,
    pub terminal: bool,
}

/// A toy MDP.
pub trait Env: Send + Sync {
    fn id(&self) -> &str;

    fn n_states(&self) -> usize;

    fn action_dim(&self) -> usize;

    fn gamma(&self) -> f64;

    /// `(r_min, r_max)`.
    fn reward_bounds(&self) -> (f64, f64);

    fn start_state(&self) -> State;

    fn terminal_state(&self) -> State;

    /// Legal embedded actions for finite-action envs; `None` for continuous.
    fn discrete_actions(&self) -> Option<Vec<Vec<f64>>>;

    /// Exact outcome distribution of a legal action, when the env is finite.
    fn outcomes(&self, s: State, a: &[f64]) -> Option<Vec<Outcome>>;

    /// Samples a transition. The default samples from [`Env::outcomes`].
    fn step(&self, s: State, a: &[f64], rng: &mut dyn RngCore) -> Result<StepResult> {
        self.check_action(a)?;
        if s == self.terminal_state() {
            return Ok(StepResult { next: s, reward: 0.0, terminal: true });
        }
        let outs = self
            .outcomes(s, &self.snap_action(a))
            .ok_or_else(|| Error::Contract(format!("{} has no outcome table", self.id())))?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for o in &outs {
            acc += o.prob;
            if u < acc {
                return Ok(StepResult { next: o.next, reward: o.reward, terminal: o.terminal });
            }
        }
        let o = outs.last().expect("non-empty outcome table");
        Ok(StepResult { next: o.next, reward: o.reward, terminal: o.terminal })
    }

    fn state_dim(&self) -> usize {
        self.n_states()
    }

    fn encode(&self, s: State) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states()];
        v[s] = 1.0;
        v
    }

    /// Inverse of [`Env::encode`] (argmax of the one-hot vector).
    fn decode(&self, v: &[f64]) -> State {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
            .0
    }

    /// `[r_min / (1 - gamma), r_max / (1 - gamma)]`.
    fn return_range(&self) -> (f64, f64) {
        let (lo, hi) = self.reward_bounds();
        let g = self.gamma();
        (lo / (1.0 - g), hi / (1.0 - g))
    }

    /// Nearest legal action. Continuous envs clip to the box.
    fn snap_action(&self, a: &[f64]) -> Vec<f64> {
        match self.discrete_actions() {
            Some(actions) => nearest(&actions, a).clone(),
            None => a.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        }
    }

    fn check_action(&self, a: &[f64]) -> Result<()> {
        if a.len() != self.action_dim() || a.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-9) {
            return Err(Error::Contract(format!(
                "action {a:?} is outside the {}-dimensional box [-1, 1]",
                self.action_dim()
            )));
        }
        Ok(())
    }
}

fn nearest<'a>(actions: &'a [Vec<f64>], a: &[f64]) -> &'a Vec<f64> {
    let dist = |b: &Vec<f64>| b.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut best = &actions[0];
    let mut best_d = dist(best);
    for b in &actions[1..] {
        let d = dist(b);
        if d < best_d {
            best = b;
            best_d = d;
        }
    }
    best
}

/// Index of a legal action in `discrete_actions`.
pub fn action_index(env: &dyn Env, a: &[f64]) -> Option<usize> {
    let actions = env.discrete_actions()?;
    let snapped = nearest(&actions, a);
    actions.iter().position(|b| b == snapped)
}

/// Something that picks actions in an env.
pub trait ActionPolicy: Send + Sync {
    fn id(&self) -> String;

    fn act(&self, s: State, rng: &mut dyn RngCore) -> Vec<f64>;
}

/// A stochastic policy over a finite action set, with known probabilities.
pub trait DiscretePolicy: ActionPolicy {
    /// Probabilities over `env.discrete_actions()` at `s`.
    fn probs(&self, s: State) -> Vec<f64>;
}

/// Uniform over legal actions, or over the box for continuous envs.
#[derive(Clone, Debug)]
pub struct UniformPolicy {
    action_dim: usize,
    actions: Option<Vec<Vec<f64>>>,
}

impl UniformPolicy {
    pub fn new(env: &dyn Env) -> Self {
        Self { action_dim: env.action_dim(), actions: env.discrete_actions() }
    }
}

impl ActionPolicy for UniformPolicy {
    fn id(&self) -> String {
        "uniform".into()
    }

    fn act(&self, _s: State, rng: &mut dyn RngCore) -> Vec<f64> {
        match &self.actions {
            Some(actions) => actions[rng.random_range(0..actions.len())].clone(),
            None => (0..self.action_dim).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        }
    }
}

impl DiscretePolicy for UniformPolicy {
    fn probs(&self, _s: State) -> Vec<f64> {
        let n = self.actions.as_ref().map(Vec::len).unwrap_or(1);
        vec![1.0 / n as f64; n]
    }
}

/// Always the same action.
#[derive(Clone, Debug)]
pub struct FixedPolicy {
    action: Vec<f64>,
    index: usize,
    n_actions: usize,
}

impl FixedPolicy {
    pub fn new(env: &dyn Env, action: Vec<f64>) -> Self {
        let n_actions = env.discrete_actions().map(|a| a.len()).unwrap_or(1);
        let index = action_index(env, &action).unwrap_or(0);
        Self { action, index, n_actions }
    }
}

impl ActionPolicy for FixedPolicy {
    fn id(&self) -> String {
        format!("fixed{:?}", self.action)
    }

    fn act(&self, _s: State, _rng: &mut dyn RngCore) -> Vec<f64> {
        self.action.clone()
    }
}

impl DiscretePolicy for FixedPolicy {
    fn probs(&self, _s: State) -> Vec<f64> {
        let mut p = vec![0.0; self.n_actions];
        p[self.index] = 1.0;
        p
    }
}

/// Names accepted by [`make_env`].
pub const ENV_IDS: [&str; 6] =
    ["stochastic-chain", "coin", "loop-chain", "branching-tree", "windy-grid", "continuous-bandit"];

pub fn make_env(id: &str) -> Result<Box<dyn Env>> {
    Ok(match id {
        "stochastic-chain" => Box::new(StochasticChain::default()),
        "coin" => Box::new(StochasticChain::coin()),
        "loop-chain" => Box::new(StochasticChain::looping(1.0, 0.9)),
        "branching-tree" => Box::new(BranchingTree::default()),
        "windy-grid" => Box::new(WindyGrid::default()),
        "continuous-bandit" => Box::new(ContinuousBandit::default()),
        other => {
            return Err(Error::Config(format!("unknown env {other:?}; expected one of {ENV_IDS:?}")))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_env_is_well_formed() {
        for id in ENV_IDS {
            let env = make_env(id).unwrap();
            assert_eq!(env.id(), id);
            let g = env.gamma();
            assert!((0.0..1.0).contains(&g));
            let (lo, hi) = env.reward_bounds();
            assert!(lo <= 0.0 && 0.0 <= hi);
            let Some(actions) = env.discrete_actions() else { continue };
            for s in 0..env.n_states() {
                if s == env.terminal_state() {
                    continue;
                }
                for a in &actions {
                    let outs = env.outcomes(s, a).unwrap();
                    let total: f64 = outs.iter().map(|o| o.prob).sum();
                    assert!((total - 1.0).abs() < 1e-12, "{id} s={s}");
                    assert!(outs.iter().all(|o| o.reward >= lo && o.reward <= hi));
                }
            }
        }
    }

    #[test]
    fn terminal_state_absorbs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for id in ENV_IDS {
            let env = make_env(id).unwrap();
            let t = env.terminal_state();
            let a = vec![0.5; env.action_dim()];
            let r = env.step(t, &a, &mut rng).unwrap();
            assert_eq!(r, StepResult { next: t, reward: 0.0, terminal: true });
        }
    }

    #[test]
    fn action_outside_box_is_rejected() {
        let env = make_env("branching-tree").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(env.step(0, &[1.5], &mut rng), Err(Error::Contract(_))));
        assert!(matches!(env.step(0, &[0.0, 0.0], &mut rng), Err(Error::Contract(_))));
        assert!(matches!(env.step(0, &[f64::NAN], &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn encode_decode_round_trip() {
        let env = make_env("windy-grid").unwrap();
        for s in 0..env.n_states() {
            assert_eq!(env.decode(&env.encode(s)), s);
        }
    }

    #[test]
    fn unknown_env_is_config_error() {
        assert!(matches!(make_env("cartpole"), Err(Error::Config(_))));
    }
}
