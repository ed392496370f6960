//! Distributional Bellman operator on per-`(s, a)` histograms over a fixed
//! grid of return atoms. Shifted and scaled atoms are split linearly between
//! their two neighbouring grid points.

use rand::{Rng, RngCore};

use super::{DiscretePolicy, Env, State};
use crate::error::{Error, Result};
use crate::metrics::wasserstein1_atoms;

/// A return distribution for every state-action pair of a finite env.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnTable {
    n_actions: usize,
    /// `dists[s * n_actions + a]` holds masses over the operator's support.
    dists: Vec<Vec<f64>>,
}

impl ReturnTable {
    pub fn get(&self, s: State, a: usize) -> &[f64] {
        &self.dists[s * self.n_actions + a]
    }
}

pub struct BellmanOperator<'a> {
    env: &'a dyn Env,
    support: Vec<f64>,
    actions: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
}

impl<'a> BellmanOperator<'a> {
    /// `n_atoms` evenly spaced atoms on `[lo, hi]`.
    pub fn new(env: &'a dyn Env, policy: &dyn DiscretePolicy, lo: f64, hi: f64, n_atoms: usize) -> Result<Self> {
        let actions = env
            .discrete_actions()
            .ok_or_else(|| Error::Contract(format!("{} has no finite action set", env.id())))?;
        if n_atoms < 2 || !(lo < hi) {
            return Err(Error::Contract(format!("bad support [{lo}, {hi}] with {n_atoms} atoms")));
        }
        let support = (0..n_atoms).map(|i| lo + (hi - lo) * i as f64 / (n_atoms - 1) as f64).collect();
        let probs = (0..env.n_states()).map(|s| policy.probs(s)).collect();
        Ok(Self { env, support, actions, probs })
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn spacing(&self) -> f64 {
        self.support[1] - self.support[0]
    }

    fn table(&self, mut f: impl FnMut() -> Vec<f64>) -> ReturnTable {
        let n = self.env.n_states() * self.actions.len();
        ReturnTable { n_actions: self.actions.len(), dists: (0..n).map(|_| f()).collect() }
    }

    pub fn uniform(&self) -> ReturnTable {
        let m = self.support.len();
        self.table(|| vec![1.0 / m as f64; m])
    }

    /// Independent random histograms, Dirichlet(1)-like via normalised
    /// exponentials.
    pub fn random(&self, rng: &mut dyn RngCore) -> ReturnTable {
        let m = self.support.len();
        self.table(|| {
            let v: Vec<f64> = (0..m).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let total: f64 = v.iter().sum();
            v.into_iter().map(|x| x / total).collect()
        })
    }

    fn deposit(&self, out: &mut [f64], z: f64, mass: f64) {
        let lo = self.support[0];
        let m = self.support.len();
        let pos = ((z - lo) / self.spacing()).clamp(0.0, (m - 1) as f64);
        let i = (pos.floor() as usize).min(m - 2);
        let frac = pos - i as f64;
        out[i] += mass * (1.0 - frac);
        out[i + 1] += mass * frac;
    }

    /// `(T eta)(s, a)` = law of `r + gamma * Z(s', a')` with `a' ~ policy`;
    /// the terminal state carries a point mass at 0.
    pub fn apply(&self, eta: &ReturnTable) -> Result<ReturnTable> {
        let gamma = self.env.gamma();
        let m = self.support.len();
        let na = self.actions.len();
        let mut dists = vec![vec![0.0; m]; eta.dists.len()];
        for s in 0..self.env.n_states() {
            for (ai, act) in self.actions.iter().enumerate() {
                let out = &mut dists[s * na + ai];
                if s == self.env.terminal_state() {
                    self.deposit(out, 0.0, 1.0);
                    continue;
                }
                let outs = self
                    .env
                    .outcomes(s, act)
                    .ok_or_else(|| Error::Contract(format!("{} has no outcome table", self.env.id())))?;
                for o in outs {
                    if o.terminal {
                        self.deposit(out, o.reward, o.prob);
                        continue;
                    }
                    for (bi, pb) in self.probs[o.next].iter().enumerate() {
                        if *pb == 0.0 {
                            continue;
                        }
                        for (z, q) in self.support.iter().zip(eta.get(o.next, bi)) {
                            if *q != 0.0 {
                                self.deposit(out, o.reward + gamma * z, o.prob * pb * q);
                            }
                        }
                    }
                }
            }
        }
        Ok(ReturnTable { n_actions: na, dists })
    }

    pub fn w1(&self, p: &[f64], q: &[f64]) -> f64 {
        let atoms = |v: &[f64]| self.support.iter().copied().zip(v.iter().copied()).collect::<Vec<_>>();
        wasserstein1_atoms(&atoms(p), &atoms(q))
    }

    /// `sup_{s,a} W1(p(s,a), q(s,a))` over non-terminal states.
    pub fn sup_w1(&self, p: &ReturnTable, q: &ReturnTable) -> f64 {
        let na = self.actions.len();
        (0..p.dists.len())
            .filter(|i| i / na != self.env.terminal_state())
            .map(|i| self.w1(&p.dists[i], &q.dists[i]))
            .fold(0.0, f64::max)
    }

    /// Iterates the operator from the uniform table until successive iterates
    /// are within `tol` in sup-W1. Returns the table and iteration count.
    pub fn fixed_point(&self, tol: f64, max_iter: usize) -> Result<(ReturnTable, usize)> {
        let mut eta = self.uniform();
        for k in 1..=max_iter {
            let next = self.apply(&eta)?;
            let d = self.sup_w1(&next, &eta);
            eta = next;
            if d < tol {
                return Ok((eta, k));
            }
        }
        Ok((eta, max_iter))
    }

    /// Atoms of `eta(s, a)` on the support.
    pub fn atoms(&self, eta: &ReturnTable, s: State, a: usize) -> Vec<(f64, f64)> {
        self.support.iter().copied().zip(eta.get(s, a).iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{enumerate_return_distribution, BranchingTree, StochasticChain, UniformPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn operator_conserves_mass() {
        let env = BranchingTree::default();
        let pi = UniformPolicy::new(&env);
        let op = BellmanOperator::new(&env, &pi, -2.0, 2.0, 81).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = op.apply(&op.random(&mut rng)).unwrap();
        for d in &t.dists {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn contraction_on_random_pairs() {
        let env = StochasticChain::default();
        let pi = UniformPolicy::new(&env);
        let op = BellmanOperator::new(&env, &pi, -2.0, 2.0, 41).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (p, q) = (op.random(&mut rng), op.random(&mut rng));
            let lhs = op.sup_w1(&op.apply(&p).unwrap(), &op.apply(&q).unwrap());
            assert!(lhs <= env.gamma() * op.sup_w1(&p, &q) + 2.0 * op.spacing());
        }
    }

    #[test]
    fn fixed_point_matches_coin_oracle() {
        let env = StochasticChain::coin();
        let pi = UniformPolicy::new(&env);
        let op = BellmanOperator::new(&env, &pi, -2.0, 2.0, 41).unwrap();
        let (eta, _) = op.fixed_point(1e-10, 100).unwrap();
        let exact = enumerate_return_distribution(&env, &pi, 0, &[1.0], 5, 0.0).unwrap();
        assert!(wasserstein1_atoms(&op.atoms(&eta, 0, 1), &exact.atoms) < 1e-12);
    }
}
