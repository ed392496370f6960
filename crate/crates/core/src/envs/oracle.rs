use std::collections::HashMap;

use rand::RngCore;

use super::{ActionPolicy, DiscretePolicy, Env, State};
use crate::error::{Error, Result};

/// Largest frontier the enumerator will hold before giving up.
pub const MAX_FRONTIER: usize = 10_000_000;

/// Exact law of the truncated discounted return from one `(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnAtomSet {
    /// `(return, mass)` pairs sorted by return, distinct returns.
    pub atoms: Vec<(f64, f64)>,
    pub horizon: usize,
    /// Mass of trajectories still running at the horizon. Their atoms sit at
    /// the truncated return.
    pub unterminated_mass: f64,
    /// Mass of branches pruned below `mass_tol`, absent from `atoms`.
    pub dropped_mass: f64,
    /// Bound on how far any truncated atom is from its untruncated return.
    pub value_error_bound: f64,
}

impl ReturnAtomSet {
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(z, p)| z * p).sum::<f64>() / self.total_mass()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.atoms.iter().map(|(z, p)| p * (z - m) * (z - m)).sum::<f64>() / self.total_mass()
    }

    /// Quantile at level `u` of the (renormalised) atom distribution.
    pub fn quantile(&self, u: f64) -> f64 {
        let total = self.total_mass();
        let mut acc = 0.0;
        for &(z, p) in &self.atoms {
            acc += p / total;
            if u < acc {
                return z;
            }
        }
        self.atoms.last().map(|a| a.0).unwrap_or(0.0)
    }

    /// `n` evenly spaced quantiles, a deterministic stand-in for `n` samples.
    pub fn quantile_samples(&self, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.quantile((i as f64 + 0.5) / n as f64)).collect()
    }
}

#[derive(Clone, Copy)]
struct Branch {
    state: State,
    ret: f64,
    mass: f64,
}

fn merge_into(map: &mut HashMap<(State, u64), f64>, state: State, ret: f64, mass: f64) {
    *map.entry((state, ret.to_bits())).or_insert(0.0) += mass;
}

/// Enumerates every trajectory of `policy` from `(s, a)` for `horizon` steps
/// (the first step being `a` itself). Branches reaching the same state with
/// the same partial return are merged, so the frontier stays small on
/// recurrent envs. Branches lighter than `mass_tol` are dropped and their
/// mass reported.
pub fn enumerate_return_distribution(
    env: &dyn Env,
    policy: &dyn DiscretePolicy,
    s: State,
    a: &[f64],
    horizon: usize,
    mass_tol: f64,
) -> Result<ReturnAtomSet> {
    enumerate_with_guard(env, policy, s, a, horizon, mass_tol, MAX_FRONTIER)
}

fn enumerate_with_guard(
    env: &dyn Env,
    policy: &dyn DiscretePolicy,
    s: State,
    a: &[f64],
    horizon: usize,
    mass_tol: f64,
    max_frontier: usize,
) -> Result<ReturnAtomSet> {
    let actions = env
        .discrete_actions()
        .ok_or_else(|| Error::Oracle(format!("{} has a continuous action space", env.id())))?;
    if horizon == 0 {
        return Err(Error::Oracle("horizon must be at least 1".into()));
    }
    if s >= env.n_states() {
        return Err(Error::Contract(format!("state {s} out of range for {}", env.id())));
    }
    env.check_action(a)?;
    let gamma = env.gamma();
    let mut finished: HashMap<u64, f64> = HashMap::new();
    let mut dropped = 0.0;
    let mut frontier = vec![Branch { state: s, ret: 0.0, mass: 1.0 }];
    let mut first = Some(env.snap_action(a));
    let mut discount = 1.0;

    for _ in 0..horizon {
        let fanout = if first.is_some() { 1 } else { actions.len() };
        if frontier.len().saturating_mul(fanout) > max_frontier {
            return Err(guard_error(env, horizon, max_frontier));
        }
        let mut next: HashMap<(State, u64), f64> = HashMap::new();
        for b in &frontier {
            if b.state == env.terminal_state() {
                *finished.entry(b.ret.to_bits()).or_insert(0.0) += b.mass;
                continue;
            }
            let choices: Vec<(Vec<f64>, f64)> = match &first {
                Some(a0) => vec![(a0.clone(), 1.0)],
                None => actions.iter().cloned().zip(policy.probs(b.state)).filter(|c| c.1 > 0.0).collect(),
            };
            for (act, pa) in choices {
                let outs = env
                    .outcomes(b.state, &act)
                    .ok_or_else(|| Error::Oracle(format!("{} has no outcome table", env.id())))?;
                for o in outs {
                    let mass = b.mass * pa * o.prob;
                    if mass <= 0.0 {
                        continue;
                    }
                    if mass < mass_tol {
                        dropped += mass;
                        continue;
                    }
                    let ret = b.ret + discount * o.reward;
                    if o.terminal {
                        *finished.entry(ret.to_bits()).or_insert(0.0) += mass;
                    } else {
                        merge_into(&mut next, o.next, ret, mass);
                    }
                }
            }
            if next.len() > max_frontier {
                return Err(guard_error(env, horizon, max_frontier));
            }
        }
        first = None;
        discount *= gamma;
        frontier = next.into_iter().map(|((state, bits), mass)| Branch { state, ret: f64::from_bits(bits), mass }).collect();
        if frontier.is_empty() {
            break;
        }
    }

    let mut unterminated = 0.0;
    for b in &frontier {
        unterminated += b.mass;
        *finished.entry(b.ret.to_bits()).or_insert(0.0) += b.mass;
    }
    let mut atoms: Vec<(f64, f64)> = finished.into_iter().map(|(bits, m)| (f64::from_bits(bits), m)).collect();
    atoms.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (lo, hi) = env.reward_bounds();
    let value_error_bound =
        if unterminated > 0.0 { gamma.powi(horizon as i32) * lo.abs().max(hi.abs()) / (1.0 - gamma) } else { 0.0 };
    Ok(ReturnAtomSet { atoms, horizon, unterminated_mass: unterminated, dropped_mass: dropped, value_error_bound })
}

fn guard_error(env: &dyn Env, horizon: usize, max_frontier: usize) -> Error {
    Error::Oracle(format!(
        "more than {max_frontier} distinct branches on {}; lower the horizon (now {horizon}) or raise mass_tol",
        env.id()
    ))
}

/// `n` independent truncated discounted returns from rollouts that take `a`
/// at `s` and then follow `policy`.
pub fn monte_carlo_returns(
    env: &dyn Env,
    policy: &dyn ActionPolicy,
    s: State,
    a: &[f64],
    n: usize,
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Contract("monte_carlo_returns needs n >= 1".into()));
    }
    let gamma = env.gamma();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut state = s;
        let mut action = a.to_vec();
        let mut ret = 0.0;
        let mut discount = 1.0;
        for _ in 0..horizon {
            let step = env.step(state, &action, rng)?;
            ret += discount * step.reward;
            if step.terminal {
                break;
            }
            discount *= gamma;
            state = step.next;
            action = policy.act(state, rng);
        }
        out.push(ret);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{BranchingTree, StochasticChain, UniformPolicy, WindyGrid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn w1_sorted(x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64
    }

    #[test]
    fn loop_chain_converges_to_geometric_sum() {
        let env = StochasticChain::looping(1.0, 0.9);
        let pi = UniformPolicy::new(&env);
        let set = enumerate_return_distribution(&env, &pi, 0, &[1.0], 400, 0.0).unwrap();
        assert_eq!(set.atoms.len(), 1);
        assert!((set.atoms[0].0 - 10.0).abs() < 1e-9);
        assert!((set.unterminated_mass - 1.0).abs() < 1e-12);
        assert!(set.value_error_bound < 1e-15);
    }

    #[test]
    fn coin_has_two_half_atoms() {
        let env = StochasticChain::coin();
        let pi = UniformPolicy::new(&env);
        let set = enumerate_return_distribution(&env, &pi, 0, &[1.0], 5, 0.0).unwrap();
        assert_eq!(set.atoms, vec![(-1.0, 0.5), (1.0, 0.5)]);
        assert_eq!(set.unterminated_mass, 0.0);
        assert_eq!(set.value_error_bound, 0.0);
    }

    #[test]
    fn depth_three_tree_has_eight_atoms_matching_rollouts() {
        let env = BranchingTree::default();
        let pi = UniformPolicy::new(&env);
        let set = enumerate_return_distribution(&env, &pi, 0, &[1.0], 10, 0.0).unwrap();
        assert_eq!(set.atoms.len(), 8);
        assert!((set.total_mass() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mut mc = monte_carlo_returns(&env, &pi, 0, &[1.0], n, 10, &mut rng).unwrap();
        mc.sort_by(f64::total_cmp);
        assert!(w1_sorted(&mc, &set.quantile_samples(n)) < 0.02);
    }

    #[test]
    fn oracle_mass_is_accounted_on_grid() {
        let env = WindyGrid::default();
        let pi = UniformPolicy::new(&env);
        let set = enumerate_return_distribution(&env, &pi, 0, &[1.0, 0.0], 30, 1e-12).unwrap();
        assert!((set.total_mass() + set.dropped_mass - 1.0).abs() < 1e-9);
        let (lo, hi) = env.return_range();
        assert!(set.atoms.iter().all(|(z, _)| *z >= lo && *z <= hi));
    }

    #[test]
    fn guard_trips_with_oracle_error() {
        // a tree with distinct rewards per level never merges branches
        let rewards: Vec<f64> = (0..12).map(|i| 1.0 / (i as f64 + 1.7)).collect();
        let env = BranchingTree::new(rewards, 0.5, 0.99);
        let pi = UniformPolicy::new(&env);
        assert!(enumerate_with_guard(&env, &pi, 0, &[1.0], 12, 0.0, 1 << 12).is_ok());
        let err = enumerate_with_guard(&env, &pi, 0, &[1.0], 12, 0.0, 1000).unwrap_err();
        assert!(matches!(err, Error::Oracle(m) if m.contains("lower the horizon")));
    }

    #[test]
    fn coin_mc_mean_is_within_clt_band() {
        let env = StochasticChain::coin();
        let pi = UniformPolicy::new(&env);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 40_000;
        let xs = monte_carlo_returns(&env, &pi, 0, &[1.0], n, 5, &mut rng).unwrap();
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
    }
}
