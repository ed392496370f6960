//! Action extraction: a behavior-cloning flow policy used for rejection
//! sampling, and a one-step policy distilled from it for online fine-tuning.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::critic::{critic_ensemble_q, repeat_rows, ReturnField};
use crate::diffcore::{DenseArray, MlpSpec, ParamSet, Tape, Var};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::flowkit::{cfm_loss, euler_integrate, IntegrationConfig, NetField};

/// Velocity field over actions; input `concat(a^t, t, s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcFlowPolicy {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl BcFlowPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let spec = MlpSpec::new(action_dim + 1 + state_dim, hidden, action_dim);
        let params = spec.init(rng);
        Self { spec, params }
    }

    pub fn action_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn net(&self) -> NetField<'_> {
        NetField::new(&self.spec, &self.params)
    }

    /// Integrated actions before clipping.
    pub fn raw_actions(&self, s: &DenseArray, eps: &DenseArray, steps: usize) -> Result<DenseArray> {
        if eps.rows() != s.rows() || eps.cols() != self.action_dim() {
            return Err(Error::Contract("action noise does not match states and action width".into()));
        }
        euler_integrate(&self.net(), eps, Some(s), &IntegrationConfig::unit(steps))
    }
}

fn clip_box(a: DenseArray) -> DenseArray {
    a.map(|x| x.clamp(-1.0, 1.0))
}

pub(crate) fn noise(rng: &mut dyn RngCore, rows: usize, cols: usize) -> DenseArray {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DenseArray::new(vec![rows, cols], data).expect("sized")
}

/// CFM loss of the BC policy on `(s, a)` pairs for fixed noises and times.
pub fn bc_flow_loss(
    policy: &BcFlowPolicy,
    s: &DenseArray,
    a: &DenseArray,
    eps: &DenseArray,
    t: &[f64],
) -> Result<(f64, ParamSet)> {
    if s.rows() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    cfm_loss(&policy.spec, &policy.params, a, eps, t, Some(s))
}

/// [`bc_flow_loss`] with noises and times drawn from `rng`.
pub fn bc_flow_loss_sampled(
    policy: &BcFlowPolicy,
    s: &DenseArray,
    a: &DenseArray,
    rng: &mut dyn RngCore,
) -> Result<(f64, ParamSet)> {
    let eps = noise(rng, a.rows(), a.cols());
    let t: Vec<f64> = (0..a.rows()).map(|_| 1.0 - rng.random::<f64>()).collect();
    bc_flow_loss(policy, s, a, &eps, &t)
}

/// BC actions for given noises, clipped to the action box.
pub fn sample_bc_action(policy: &BcFlowPolicy, s: &DenseArray, eps: &DenseArray, steps: usize) -> Result<DenseArray> {
    Ok(clip_box(policy.raw_actions(s, eps, steps)?))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// For each state row, draws `n_candidates` BC actions (snapped to legal
/// actions when `env` has a finite action set) and keeps the one with the
/// highest ensemble Q estimate.
pub fn rejection_sample_actions(
    critics: &[ReturnField],
    bc: &BcFlowPolicy,
    s: &DenseArray,
    n_candidates: usize,
    noise_set: &[f64],
    steps: usize,
    env: Option<&dyn Env>,
    rng: &mut dyn RngCore,
) -> Result<DenseArray> {
    let q = |sa: &DenseArray| critic_ensemble_q(critics, sa, noise_set);
    rejection_sample_with(&q, bc, s, n_candidates, steps, env, rng)
}

/// [`rejection_sample_actions`] scored by an arbitrary per-row Q function.
pub fn rejection_sample_with(
    q_fn: &dyn Fn(&DenseArray) -> Result<Vec<f64>>,
    bc: &BcFlowPolicy,
    s: &DenseArray,
    n_candidates: usize,
    steps: usize,
    env: Option<&dyn Env>,
    rng: &mut dyn RngCore,
) -> Result<DenseArray> {
    if n_candidates == 0 {
        return Err(Error::Contract("rejection sampling needs at least one candidate".into()));
    }
    let n = s.rows();
    let d = bc.action_dim();
    let states = repeat_rows(s, n_candidates);
    let mut cands = sample_bc_action(bc, &states, &noise(rng, n * n_candidates, d), steps)?;
    if let Some(env) = env {
        let rows: Vec<Vec<f64>> = (0..cands.rows()).map(|r| env.snap_action(cands.row_slice(r))).collect();
        cands = DenseArray::from_rows(&rows)?;
    }
    if n_candidates == 1 {
        return Ok(cands);
    }
    let sa = crate::critic::state_action(&states, &cands)?;
    let q = q_fn(&sa)?;
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let k = argmax_first(&q[i * n_candidates..(i + 1) * n_candidates]);
        out.extend_from_slice(cands.row_slice(i * n_candidates + k));
    }
    DenseArray::new(vec![n, d], out)
}

/// Maps `concat(s, eps_d)` to an action in one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStepPolicy {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl OneStepPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let spec = MlpSpec::new(state_dim + action_dim, hidden, action_dim);
        let params = spec.init(rng);
        Self { spec, params }
    }

    pub fn action_dim(&self) -> usize {
        self.spec.output_dim
    }

    /// Unclipped actions.
    pub fn raw_actions(&self, s: &DenseArray, eps: &DenseArray) -> Result<DenseArray> {
        self.spec.eval(&self.params, &crate::critic::state_action(s, eps)?)
    }

    /// Actions clipped to the box, for acting in an env.
    pub fn act(&self, s: &DenseArray, eps: &DenseArray) -> Result<DenseArray> {
        Ok(clip_box(self.raw_actions(s, eps)?))
    }
}

/// Noise for one one-step update: the shared policy noise `eps_d` and, per
/// sample, `m` critic noises for the Q estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct OneStepDraws {
    pub eps_d: DenseArray,
    /// `n x m`.
    pub q_noise: DenseArray,
}

impl OneStepDraws {
    pub fn sample(n: usize, action_dim: usize, q_noises: usize, rng: &mut dyn RngCore) -> Self {
        Self { eps_d: noise(rng, n, action_dim), q_noise: noise(rng, n, q_noises.max(1)) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OneStepDiagnostics {
    pub loss: f64,
    pub q_mean: f64,
    pub distill: f64,
}

/// `mean(-Q(s, pi(s, eps_d))) + alpha * mean ||pi(s, eps_d) - pi_bc(s, eps_d)||^2`,
/// differentiated through the one-step policy only. `Q` is the ensemble
/// minimum of per-sample averages over `draws.q_noise`. With `q_term` off
/// only the distillation term remains.
pub fn one_step_policy_loss(
    policy: &OneStepPolicy,
    bc: &BcFlowPolicy,
    critics: &[ReturnField],
    s: &DenseArray,
    draws: &OneStepDraws,
    alpha: f64,
    steps: usize,
    q_term: bool,
) -> Result<(ParamSet, OneStepDiagnostics)> {
    let n = s.rows();
    if n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    if q_term && critics.is_empty() {
        return Err(Error::Contract("empty critic ensemble".into()));
    }
    if draws.eps_d.rows() != n || draws.q_noise.rows() != n {
        return Err(Error::Contract("one-step draws are not aligned with the batch".into()));
    }
    let bc_actions = bc.raw_actions(s, &draws.eps_d, steps)?;

    let mut tape = Tape::new();
    let bound = tape.bind(&policy.params);
    let x = tape.leaf(crate::critic::state_action(s, &draws.eps_d)?);
    let pi = policy.spec.forward(&mut tape, &bound, x)?;
    let distill = tape.weighted_sq_err(pi, bc_actions, vec![alpha; n])?;
    let mut loss = distill;
    let mut q_mean = 0.0;
    if q_term {
        let q = ensemble_q_on_tape(&mut tape, critics, s, pi, &draws.q_noise)?;
        let mean_q = tape.mean_all(q);
        q_mean = tape.scalar(mean_q);
        let neg = tape.scale(mean_q, -1.0);
        loss = tape.add(neg, distill)?;
    }
    let grads = tape.backward(loss, DenseArray::scalar(1.0))?;
    let diag = OneStepDiagnostics { loss: tape.scalar(loss), q_mean, distill: tape.scalar(distill) };
    if !diag.loss.is_finite() {
        return Err(Error::Training(format!("one-step policy loss is {}", diag.loss)));
    }
    Ok((grads.params(&bound, &policy.params)?, diag))
}

/// Per-row ensemble-minimum Q with gradient into the action node `a`.
fn ensemble_q_on_tape(
    tape: &mut Tape,
    critics: &[ReturnField],
    s: &DenseArray,
    a: Var,
    q_noise: &DenseArray,
) -> Result<Var> {
    let n = s.rows();
    let m = q_noise.cols();
    // block layout: row i + j * n pairs sample i with its j-th noise
    let mut z = Vec::with_capacity(n * m);
    for j in 0..m {
        for i in 0..n {
            z.push(q_noise.get(i, j));
        }
    }
    let z = tape.leaf(DenseArray::column(z));
    let t = tape.leaf(DenseArray::zeros(&[n * m, 1]));
    let s_leaf = tape.leaf(s.clone());
    let s_tiled = tape.tile_rows(s_leaf, m);
    let a_tiled = tape.tile_rows(a, m);
    let input = tape.concat_cols(&[z, t, s_tiled, a_tiled])?;
    let mut best: Option<Var> = None;
    for c in critics {
        let cb = tape.bind(&c.params);
        let v = c.spec.forward(tape, &cb, input)?;
        let q = tape.block_mean(v, m)?;
        best = Some(match best {
            None => q,
            Some(b) => tape.minimum(b, q)?,
        });
    }
    Ok(best.expect("non-empty ensemble"))
}

/// Next actions from the BC policy, snapped to legal actions when `env` has
/// a finite action set.
pub fn bc_next_actions(
    bc: &BcFlowPolicy,
    s_next: &DenseArray,
    steps: usize,
    env: Option<&dyn Env>,
    rng: &mut dyn RngCore,
) -> Result<DenseArray> {
    let a = sample_bc_action(bc, s_next, &noise(rng, s_next.rows(), bc.action_dim()), steps)?;
    snap_rows(a, env)
}

/// Next actions from the one-step policy, clipped and snapped.
pub fn one_step_next_actions(
    policy: &OneStepPolicy,
    s_next: &DenseArray,
    env: Option<&dyn Env>,
    rng: &mut dyn RngCore,
) -> Result<DenseArray> {
    let a = policy.act(s_next, &noise(rng, s_next.rows(), policy.action_dim()))?;
    snap_rows(a, env)
}

fn snap_rows(a: DenseArray, env: Option<&dyn Env>) -> Result<DenseArray> {
    match env {
        Some(env) if env.discrete_actions().is_some() => {
            DenseArray::from_rows(&(0..a.rows()).map(|r| env.snap_action(a.row_slice(r))).collect::<Vec<_>>())
        }
        _ => Ok(a),
    }
}
