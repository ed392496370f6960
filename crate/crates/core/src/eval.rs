//! Policy evaluation and distribution reports.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{critic_histogram, CriticRef};
use crate::envs::{enumerate_return_distribution, DiscretePolicy, Env, State};
use crate::error::{Error, Result};
use crate::metrics::{wasserstein1_histograms, ReturnHistogram};

/// Picks an action for a state.
pub type ActionSelector<'a> = dyn FnMut(State, &mut dyn RngCore) -> Result<Vec<f64>> + 'a;

/// Discounted-return statistics over seeded rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
    pub horizon: usize,
    pub seed: u64,
    pub returns: Vec<f64>,
}

/// Sample mean and standard deviation (0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64);
    rng
}

/// Rolls out `select` from the start state for `episodes` episodes of at
/// most `horizon` steps, each on its own RNG stream.
pub fn evaluate_policy(
    env: &dyn Env,
    select: &mut ActionSelector<'_>,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<PolicyStats> {
    if episodes == 0 {
        return Err(Error::Contract("evaluation needs at least one episode".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut rng = episode_rng(seed, ep);
        let (mut s, mut ret, mut discount) = (env.start_state(), 0.0, 1.0);
        for _ in 0..horizon {
            let a = select(s, &mut rng)?;
            let step = env.step(s, &a, &mut rng)?;
            ret += discount * step.reward;
            if step.terminal {
                break;
            }
            discount *= env.gamma();
            s = step.next;
        }
        returns.push(ret);
    }
    let (mean, std) = mean_std(&returns);
    Ok(PolicyStats { mean, std, episodes, horizon, seed, returns })
}

/// `n` truncated discounted returns that take `a` at `s` and then follow
/// `select`.
pub fn rollout_returns(
    env: &dyn Env,
    select: &mut ActionSelector<'_>,
    s: State,
    a: &[f64],
    n: usize,
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (mut state, mut action, mut ret, mut discount) = (s, a.to_vec(), 0.0, 1.0);
        for _ in 0..horizon {
            let step = env.step(state, &action, rng)?;
            ret += discount * step.reward;
            if step.terminal {
                break;
            }
            discount *= env.gamma();
            state = step.next;
            action = select(state, rng)?;
        }
        out.push(ret);
    }
    Ok(out)
}

/// W1 between a learned return histogram and a reference at one `(s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct W1Entry {
    pub state: State,
    pub action: Vec<f64>,
    /// What the critic was compared against.
    pub reference: String,
    pub w1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: String,
    pub w1: Vec<W1Entry>,
    pub policy: Option<PolicyStats>,
    pub seeds: Vec<u64>,
    pub runtime_secs: f64,
}

/// Learned and oracle histograms on shared edges, and their W1.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionComparison {
    pub learned: ReturnHistogram,
    pub reference: ReturnHistogram,
    pub w1: f64,
    /// Learned samples outside the range, clipped before binning.
    pub clipped: usize,
}

/// Compares the critic at `(s, a)` with the enumerated return distribution
/// of `policy`, both binned on `[lo, hi]`.
#[allow(clippy::too_many_arguments)]
pub fn compare_to_oracle(
    critic: CriticRef<'_>,
    env: &dyn Env,
    policy: &dyn DiscretePolicy,
    s: State,
    a: &[f64],
    sa: &[f64],
    n_samples: usize,
    n_bins: usize,
    range: (f64, f64),
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Result<DistributionComparison> {
    let oracle = enumerate_return_distribution(env, policy, s, a, horizon, 1e-12)?;
    let reference = ReturnHistogram::from_atoms(&oracle.atoms, range.0, range.1, n_bins)?;
    let (learned, clipped) = critic_histogram(critic, sa, n_samples, n_bins, range, rng)?;
    let w1 = wasserstein1_histograms(&learned, &reference)?;
    Ok(DistributionComparison { learned, reference, w1, clipped })
}

/// Compares the critic at `(s, a)` with Monte Carlo returns of `select`.
#[allow(clippy::too_many_arguments)]
pub fn compare_to_rollouts(
    critic: CriticRef<'_>,
    env: &dyn Env,
    select: &mut ActionSelector<'_>,
    s: State,
    a: &[f64],
    sa: &[f64],
    n_samples: usize,
    n_bins: usize,
    range: (f64, f64),
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Result<DistributionComparison> {
    let returns = rollout_returns(env, select, s, a, n_samples, horizon, rng)?;
    let reference = ReturnHistogram::from_samples(&returns, range.0, range.1, n_bins)?.0;
    let (learned, clipped) = critic_histogram(critic, sa, n_samples, n_bins, range, rng)?;
    let w1 = wasserstein1_histograms(&learned, &reference)?;
    Ok(DistributionComparison { learned, reference, w1, clipped })
}
