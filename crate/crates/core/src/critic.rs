//! Return critic: a scalar vector field `v(z | t, s, a)` whose flow carries
//! standard normal noise to the return distribution at `(s, a)`.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, DenseArray, MlpSpec, ParamSet, Tape};
use crate::envs::{Env, Transition};
use crate::error::{Error, Result};
use crate::flowkit::{
    euler_integrate_rows, euler_integrate_with_derivative_rows, field_input, NetField, ScalarField, VectorField,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub gamma: f64,
    /// BCFM coefficient.
    pub lambda: f64,
    /// Confidence temperature.
    pub tau: f64,
    /// Euler steps for every flow integration.
    pub flow_steps: usize,
    pub ensemble_size: usize,
    pub z_lo: f64,
    pub z_hi: f64,
    /// Clip full-time return samples to `[z_lo, z_hi]`.
    pub clip_returns: bool,
}

impl CriticConfig {
    /// Defaults with the return range taken from `env`.
    pub fn for_env(env: &dyn Env) -> Self {
        let (z_lo, z_hi) = env.return_range();
        Self {
            gamma: env.gamma(),
            lambda: 1.0,
            tau: 3.0,
            flow_steps: 10,
            ensemble_size: 2,
            z_lo,
            z_hi,
            clip_returns: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if self.flow_steps == 0 || self.ensemble_size == 0 {
            return bad("flow_steps and ensemble_size must be >= 1".into());
        }
        if !(self.z_lo < self.z_hi) {
            return bad(format!("return range [{}, {}] is empty", self.z_lo, self.z_hi));
        }
        Ok(())
    }

    fn clip(&self) -> Option<(f64, f64)> {
        self.clip_returns.then_some((self.z_lo, self.z_hi))
    }
}

/// The return field network; input `concat(z, t, s, a)`, scalar output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnField {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl ReturnField {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let spec = MlpSpec::new(2 + state_dim + action_dim, hidden, 1);
        let params = spec.init(rng);
        Self { spec, params }
    }

    pub fn from_parts(spec: MlpSpec, params: ParamSet) -> Result<Self> {
        if spec.output_dim != 1 || spec.input_dim < 2 {
            return Err(Error::Config("a return field maps (z, t, s, a) to a scalar".into()));
        }
        spec.validate(&params)?;
        Ok(Self { spec, params })
    }

    pub fn net(&self) -> NetField<'_> {
        NetField::new(&self.spec, &self.params)
    }

    /// Width of `concat(s, a)`.
    pub fn context_dim(&self) -> usize {
        self.spec.input_dim - 2
    }
}

impl VectorField for ReturnField {
    fn dim(&self) -> usize {
        1
    }

    fn velocity(&self, x: &DenseArray, t: &[f64], ctx: Option<&DenseArray>) -> Result<DenseArray> {
        self.net().velocity(x, t, ctx)
    }
}

impl ScalarField for ReturnField {
    fn velocity_and_slope(&self, z: &[f64], t: &[f64], ctx: Option<&DenseArray>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.net().velocity_and_slope(z, t, ctx)
    }
}

/// Row-wise `concat(s, a)`.
pub fn state_action(s: &DenseArray, a: &DenseArray) -> Result<DenseArray> {
    if s.rows() != a.rows() {
        return Err(Error::Contract(format!("{} states but {} actions", s.rows(), a.rows())));
    }
    let mut data = Vec::with_capacity(s.rows() * (s.cols() + a.cols()));
    for r in 0..s.rows() {
        data.extend_from_slice(s.row_slice(r));
        data.extend_from_slice(a.row_slice(r));
    }
    DenseArray::new(vec![s.rows(), s.cols() + a.cols()], data)
}

/// Each row of `x` repeated `k` times in a row (row `i * k + j` is row `i`).
pub fn repeat_rows(x: &DenseArray, k: usize) -> DenseArray {
    let mut data = Vec::with_capacity(x.len() * k);
    for r in 0..x.rows() {
        for _ in 0..k {
            data.extend_from_slice(x.row_slice(r));
        }
    }
    DenseArray::new(vec![x.rows() * k, x.cols()], data).expect("sized")
}

fn gather_rows(x: &DenseArray, idx: &[usize]) -> DenseArray {
    let mut data = Vec::with_capacity(idx.len() * x.cols());
    for &i in idx {
        data.extend_from_slice(x.row_slice(i));
    }
    DenseArray::new(vec![idx.len(), x.cols()], data).expect("sized")
}

/// One return sample per row: `phi(eps_i | 1, s_i, a_i)`, clipped when
/// `clip` is given.
pub fn sample_return(
    field: &impl VectorField,
    sa: &DenseArray,
    noise: &[f64],
    steps: usize,
    clip: Option<(f64, f64)>,
) -> Result<Vec<f64>> {
    let n = sa.rows();
    let z = euler_integrate_rows(field, &DenseArray::column(noise.to_vec()), Some(sa), &vec![0.0; n], &vec![1.0; n], steps)?;
    Ok(clip_all(z.into_data(), clip))
}

fn clip_all(z: Vec<f64>, clip: Option<(f64, f64)>) -> Vec<f64> {
    match clip {
        Some((lo, hi)) => z.into_iter().map(|x| x.clamp(lo, hi)).collect(),
        None => z,
    }
}

/// Per row, the mean over `noise_set` of `v(eps | 0, s, a)`.
pub fn q_estimate(field: &impl VectorField, sa: &DenseArray, noise_set: &[f64]) -> Result<Vec<f64>> {
    let m = noise_set.len();
    if m == 0 {
        return Err(Error::Contract("q_estimate needs at least one noise".into()));
    }
    let n = sa.rows();
    let z: Vec<f64> = (0..n).flat_map(|_| noise_set.iter().copied()).collect();
    let v = field.velocity(&DenseArray::column(z), &vec![0.0; n * m], Some(&repeat_rows(sa, m)))?;
    Ok(v.data().chunks(m).map(|c| c.iter().sum::<f64>() / m as f64).collect())
}

/// Per row, the mean over `noise_set` of the squared flow derivative
/// `(d phi / d eps)^2` at `t = 1`.
pub fn variance_estimate(field: &impl ScalarField, sa: &DenseArray, noise_set: &[f64], steps: usize) -> Result<Vec<f64>> {
    let m = noise_set.len();
    if m == 0 {
        return Err(Error::Contract("variance_estimate needs at least one noise".into()));
    }
    let n = sa.rows();
    let z: Vec<f64> = (0..n).flat_map(|_| noise_set.iter().copied()).collect();
    let (_, jac) =
        euler_integrate_with_derivative_rows(field, &z, Some(&repeat_rows(sa, m)), &vec![0.0; n * m], &vec![1.0; n * m], steps)?;
    Ok(jac.chunks(m).map(|c| c.iter().map(|j| j * j).sum::<f64>() / m as f64).collect())
}

/// `sigmoid(-tau / |J|) + 0.5`, with `J = 0` mapped to 0.5.
pub fn confidence_weight(flow_derivative: f64, tau: f64) -> f64 {
    let d = flow_derivative.abs();
    if d == 0.0 {
        return 0.5;
    }
    sigmoid(-tau / d) + 0.5
}

/// Confidence weights for a batch, one noise per row. Returns the weights
/// and the absolute flow derivatives.
pub fn confidence_weights(
    field: &impl ScalarField,
    sa: &DenseArray,
    noise: &[f64],
    tau: f64,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = sa.rows();
    let (_, jac) = euler_integrate_with_derivative_rows(field, noise, Some(sa), &vec![0.0; n], &vec![1.0; n], steps)?;
    let abs: Vec<f64> = jac.iter().map(|j| j.abs()).collect();
    Ok((abs.iter().map(|&d| confidence_weight(d, tau)).collect(), abs))
}

/// Per row, the minimum over fields of [`q_estimate`].
pub fn critic_ensemble_q<F: VectorField>(fields: &[F], sa: &DenseArray, noise_set: &[f64]) -> Result<Vec<f64>> {
    let (first, rest) = fields.split_first().ok_or_else(|| Error::Contract("empty critic ensemble".into()))?;
    let mut q = q_estimate(first, sa, noise_set)?;
    for f in rest {
        for (a, b) in q.iter_mut().zip(q_estimate(f, sa, noise_set)?) {
            *a = a.min(b);
        }
    }
    Ok(q)
}

/// Transitions laid out as matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticBatch {
    pub s: DenseArray,
    pub a: DenseArray,
    pub r: Vec<f64>,
    pub s_next: DenseArray,
    pub terminal: Vec<bool>,
}

impl CriticBatch {
    pub fn from_transitions<'a>(items: impl IntoIterator<Item = &'a Transition>) -> Result<Self> {
        let items: Vec<&Transition> = items.into_iter().collect();
        if items.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let rows = |f: fn(&Transition) -> &Vec<f64>| DenseArray::from_rows(&items.iter().map(|t| f(t).clone()).collect::<Vec<_>>());
        Ok(Self {
            s: rows(|t| &t.s)?,
            a: rows(|t| &t.a)?,
            r: items.iter().map(|t| t.r).collect(),
            s_next: rows(|t| &t.s_next)?,
            terminal: items.iter().map(|t| t.terminal).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn state_action(&self) -> Result<DenseArray> {
        state_action(&self.s, &self.a)
    }

    fn check(&self) -> Result<()> {
        let n = self.r.len();
        if n == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if self.s.rows() != n || self.a.rows() != n || self.s_next.rows() != n || self.terminal.len() != n {
            return Err(Error::Contract("batch columns have different lengths".into()));
        }
        Ok(())
    }
}

/// Picks `a' ~ pi(. | s')` for each row of `s_next`.
pub trait NextActionSampler {
    fn next_actions(&self, s_next: &DenseArray, rng: &mut dyn RngCore) -> Result<DenseArray>;
}

impl<F> NextActionSampler for F
where
    F: Fn(&DenseArray, &mut dyn RngCore) -> Result<DenseArray>,
{
    fn next_actions(&self, s_next: &DenseArray, rng: &mut dyn RngCore) -> Result<DenseArray> {
        self(s_next, rng)
    }
}

/// Random quantities shared by every term of one critic update: a flow
/// time, a noise and a next action per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LossDraws {
    pub t: Vec<f64>,
    pub eps: Vec<f64>,
    pub a_next: DenseArray,
}

impl LossDraws {
    pub fn sample(batch: &CriticBatch, sampler: &dyn NextActionSampler, rng: &mut dyn RngCore) -> Result<Self> {
        batch.check()?;
        let n = batch.len();
        let a_next = sampler.next_actions(&batch.s_next, rng)?;
        Self::with_actions(n, a_next, rng)
    }

    /// Fresh times and noises for given next actions.
    pub fn with_actions(n: usize, a_next: DenseArray, rng: &mut dyn RngCore) -> Result<Self> {
        if a_next.rows() != n {
            return Err(Error::Contract(format!("{} next actions for {n} transitions", a_next.rows())));
        }
        let t = (0..n).map(|_| 1.0 - rng.random::<f64>()).collect();
        let eps = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Self { t, eps, a_next })
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.t.len() != n || self.eps.len() != n || self.a_next.rows() != n {
            return Err(Error::Contract("loss draws are not aligned with the batch".into()));
        }
        Ok(())
    }
}

/// Inputs and targets of a scalar regression `v(z | t, s, a) ~ target`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionPairs {
    pub z: Vec<f64>,
    pub target: Vec<f64>,
}

fn non_terminal(batch: &CriticBatch) -> Vec<usize> {
    (0..batch.len()).filter(|&i| !batch.terminal[i]).collect()
}

/// DCFM pairs. For a live transition, `z^t = phi_bar(eps | t, s', a')`, the
/// input is `r + gamma z^t` and the target `v_bar(z^t | t, s', a')`. After
/// termination the next-state return is a point mass at 0, whose
/// straight-line flow gives `z^t = (1 - t) eps` and velocity `-eps`.
pub fn dcfm_pairs(
    target: &impl VectorField,
    batch: &CriticBatch,
    draws: &LossDraws,
    gamma: f64,
    steps: usize,
) -> Result<RegressionPairs> {
    batch.check()?;
    draws.check(batch.len())?;
    let live = non_terminal(batch);
    let mut z: Vec<f64> = batch.r.clone();
    let mut tgt: Vec<f64> = draws.eps.iter().map(|e| -e).collect();
    if !live.is_empty() {
        let ctx = state_action(&gather_rows(&batch.s_next, &live), &gather_rows(&draws.a_next, &live))?;
        let t: Vec<f64> = live.iter().map(|&i| draws.t[i]).collect();
        let eps = DenseArray::column(live.iter().map(|&i| draws.eps[i]).collect());
        let zt = euler_integrate_rows(target, &eps, Some(&ctx), &vec![0.0; live.len()], &t, steps)?;
        let v = target.velocity(&zt, &t, Some(&ctx))?;
        for (k, &i) in live.iter().enumerate() {
            z[i] = batch.r[i] + gamma * zt.data()[k];
            tgt[i] = v.data()[k];
        }
    }
    Ok(RegressionPairs { z, target: tgt })
}

/// BCFM pairs: `z1_td = r + gamma z1` with `z1 = phi_bar(eps | 1, s', a')`
/// (`z1_td = r` after termination), input `t z1_td + (1 - t) eps`, target
/// `z1_td - eps`.
pub fn bcfm_pairs(
    target: &impl VectorField,
    batch: &CriticBatch,
    draws: &LossDraws,
    gamma: f64,
    steps: usize,
    clip: Option<(f64, f64)>,
) -> Result<RegressionPairs> {
    batch.check()?;
    draws.check(batch.len())?;
    let live = non_terminal(batch);
    let mut z1td = batch.r.clone();
    if !live.is_empty() {
        let ctx = state_action(&gather_rows(&batch.s_next, &live), &gather_rows(&draws.a_next, &live))?;
        let eps: Vec<f64> = live.iter().map(|&i| draws.eps[i]).collect();
        let z1 = sample_return(target, &ctx, &eps, steps, clip)?;
        for (k, &i) in live.iter().enumerate() {
            z1td[i] += gamma * z1[k];
        }
    }
    let z = (0..batch.len()).map(|i| draws.t[i] * z1td[i] + (1.0 - draws.t[i]) * draws.eps[i]).collect();
    let target = (0..batch.len()).map(|i| z1td[i] - draws.eps[i]).collect();
    Ok(RegressionPairs { z, target })
}

/// `sum_i w_i (v(z_i | t_i, s_i, a_i) - target_i)^2 / n` and its gradient.
pub fn regression_loss(
    online: &ReturnField,
    sa: &DenseArray,
    t: &[f64],
    pairs: &RegressionPairs,
    weights: &[f64],
) -> Result<(f64, ParamSet)> {
    let mut tape = Tape::new();
    let bound = tape.bind(&online.params);
    let input = tape.leaf(field_input(&DenseArray::column(pairs.z.clone()), t, Some(sa))?);
    let v = online.spec.forward(&mut tape, &bound, input)?;
    let loss = tape.weighted_sq_err(v, DenseArray::column(pairs.target.clone()), weights.to_vec())?;
    let grads = tape.backward(loss, DenseArray::scalar(1.0))?;
    Ok((tape.scalar(loss), grads.params(&bound, &online.params)?))
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::Contract(format!("{} weights for {n} transitions", weights.len())));
    }
    Ok(())
}

/// Weighted DCFM loss for fixed draws, with its gradient.
pub fn dcfm_loss(
    online: &ReturnField,
    target: &impl VectorField,
    batch: &CriticBatch,
    draws: &LossDraws,
    weights: &[f64],
    cfg: &CriticConfig,
) -> Result<(f64, ParamSet)> {
    check_weights(weights, batch.len())?;
    let pairs = dcfm_pairs(target, batch, draws, cfg.gamma, cfg.flow_steps)?;
    regression_loss(online, &batch.state_action()?, &draws.t, &pairs, weights)
}

/// Weighted BCFM loss for fixed draws, with its gradient.
pub fn bcfm_loss(
    online: &ReturnField,
    target: &impl VectorField,
    batch: &CriticBatch,
    draws: &LossDraws,
    weights: &[f64],
    cfg: &CriticConfig,
) -> Result<(f64, ParamSet)> {
    check_weights(weights, batch.len())?;
    let pairs = bcfm_pairs(target, batch, draws, cfg.gamma, cfg.flow_steps, cfg.clip())?;
    regression_loss(online, &batch.state_action()?, &draws.t, &pairs, weights)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticDiagnostics {
    pub loss: f64,
    pub dcfm: f64,
    pub bcfm: f64,
    pub mean_weight: f64,
    pub mean_abs_flow_derivative: f64,
    pub q_mean: f64,
}

/// `L_wDCFM + lambda L_wBCFM` with confidence weights from the target field
/// (same noise as the loss). Returns the gradient and diagnostics.
pub fn value_flow_loss(
    online: &ReturnField,
    target: &impl ScalarField,
    batch: &CriticBatch,
    draws: &LossDraws,
    cfg: &CriticConfig,
) -> Result<(ParamSet, CriticDiagnostics)> {
    cfg.validate()?;
    batch.check()?;
    draws.check(batch.len())?;
    let sa = batch.state_action()?;
    let (weights, abs_j) = confidence_weights(target, &sa, &draws.eps, cfg.tau, cfg.flow_steps)?;
    let d = dcfm_pairs(target, batch, draws, cfg.gamma, cfg.flow_steps)?;
    let b = bcfm_pairs(target, batch, draws, cfg.gamma, cfg.flow_steps, cfg.clip())?;

    let n = batch.len();
    let mut tape = Tape::new();
    let bound = tape.bind(&online.params);
    let x_d = tape.leaf(field_input(&DenseArray::column(d.z), &draws.t, Some(&sa))?);
    let v_d = online.spec.forward(&mut tape, &bound, x_d)?;
    let l_d = tape.weighted_sq_err(v_d, DenseArray::column(d.target), weights.clone())?;
    let x_b = tape.leaf(field_input(&DenseArray::column(b.z), &draws.t, Some(&sa))?);
    let v_b = online.spec.forward(&mut tape, &bound, x_b)?;
    let l_b = tape.weighted_sq_err(v_b, DenseArray::column(b.target), weights.clone())?;
    let l_b_scaled = tape.scale(l_b, cfg.lambda);
    let loss = tape.add(l_d, l_b_scaled)?;
    let grads = tape.backward(loss, DenseArray::scalar(1.0))?;
    let grads = grads.params(&bound, &online.params)?;

    let q = online.velocity(&DenseArray::column(draws.eps.clone()), &vec![0.0; n], Some(&sa))?;
    let diag = CriticDiagnostics {
        loss: tape.scalar(loss),
        dcfm: tape.scalar(l_d),
        bcfm: tape.scalar(l_b),
        mean_weight: weights.iter().sum::<f64>() / n as f64,
        mean_abs_flow_derivative: abs_j.iter().sum::<f64>() / n as f64,
        q_mean: q.data().iter().sum::<f64>() / n as f64,
    };
    if !diag.loss.is_finite() {
        return Err(Error::Training(format!("critic loss is {}", diag.loss)));
    }
    Ok((grads, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowkit::FnField;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_field(c: f64, state_dim: usize, action_dim: usize) -> ReturnField {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = ReturnField::new(state_dim, action_dim, &[4], &mut rng);
        f.params.get_mut("dense1.kernel").unwrap().data_mut().fill(0.0);
        f.params.get_mut("dense1.bias").unwrap().data_mut()[0] = c;
        f
    }

    fn toy_batch(n: usize, rng: &mut ChaCha8Rng) -> CriticBatch {
        let s = DenseArray::new(vec![n, 2], (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = DenseArray::new(vec![n, 1], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let s_next = DenseArray::new(vec![n, 2], (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        CriticBatch {
            s,
            a,
            r: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            s_next,
            terminal: (0..n).map(|i| i % 3 == 0).collect(),
        }
    }

    fn cfg() -> CriticConfig {
        CriticConfig {
            gamma: 0.9,
            lambda: 1.0,
            tau: 3.0,
            flow_steps: 10,
            ensemble_size: 1,
            z_lo: -10.0,
            z_hi: 10.0,
            clip_returns: true,
        }
    }

    #[test]
    fn sampling_constant_fields() {
        let sa = DenseArray::from_rows(&[vec![0.0, 1.0, 0.5], vec![1.0, 0.0, -0.5]]).unwrap();
        let zero = constant_field(0.0, 2, 1);
        assert_eq!(sample_return(&zero, &sa, &[0.3, -1.1], 10, None).unwrap(), vec![0.3, -1.1]);
        let c = constant_field(2.5, 2, 1);
        let z = sample_return(&c, &sa, &[0.3, -1.1], 10, None).unwrap();
        assert!((z[0] - 2.8).abs() < 1e-12 && (z[1] - 1.4).abs() < 1e-12);
        let clipped = sample_return(&c, &sa, &[0.3, -1.1], 10, Some((-1.0, 2.0))).unwrap();
        assert_eq!(clipped[0], 2.0);
        assert_eq!(q_estimate(&c, &sa, &[0.1, 0.7]).unwrap(), vec![2.5, 2.5]);
    }

    #[test]
    fn q_of_point_mass_field_is_exact_on_symmetric_noise() {
        let star = 4.0;
        let f = FnField::scalar(|z: &[f64], _t, _c: &[f64]| vec![star - z[0]], |_z: &[f64], _t, _c: &[f64]| -1.0);
        let sa = DenseArray::row(vec![0.0]);
        assert_eq!(q_estimate(&f, &sa, &[0.8, -0.8]).unwrap(), vec![star]);
    }

    #[test]
    fn variance_of_affine_transport() {
        // straight path to N(mu, sigma^2): v = mu + (sigma - 1) eps, d phi / d eps = sigma
        let (mu, sigma) = (1.0, 0.5);
        let f = FnField::scalar(
            move |z: &[f64], t, _c: &[f64]| vec![mu + (sigma - 1.0) * (z[0] - t * mu) / (1.0 + t * (sigma - 1.0))],
            move |_z: &[f64], t, _c: &[f64]| (sigma - 1.0) / (1.0 + t * (sigma - 1.0)),
        );
        let sa = DenseArray::row(vec![0.0]);
        let v = variance_estimate(&f, &sa, &[0.4, -1.0, 2.0], 2000).unwrap();
        assert!((v[0] - sigma * sigma).abs() < 1e-3);
        let z_free = constant_field(1.0, 0, 1);
        assert!((variance_estimate(&z_free, &sa, &[0.2], 10).unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confidence_weight_values() {
        assert!((confidence_weight(1.0, 1.0) - 0.7689414213699951).abs() < 1e-12);
        assert_eq!(confidence_weight(0.0, 1.0), 0.5);
        assert!((confidence_weight(1e12, 3.0) - 1.0).abs() < 1e-9);
        assert!(confidence_weight(-2.0, 1.0) == confidence_weight(2.0, 1.0));
    }

    #[test]
    fn ensemble_takes_minimum() {
        let sa = DenseArray::row(vec![0.0, 0.0, 0.0]);
        let fields = vec![constant_field(1.0, 2, 1), constant_field(2.0, 2, 1)];
        assert_eq!(critic_ensemble_q(&fields, &sa, &[0.0]).unwrap(), vec![1.0]);
        assert_eq!(critic_ensemble_q(&fields[1..], &sa, &[0.0]).unwrap(), vec![2.0]);
        assert!(critic_ensemble_q::<ReturnField>(&[], &sa, &[0.0]).is_err());
    }

    #[test]
    fn dcfm_vanishes_for_equal_constant_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = toy_batch(9, &mut rng);
        let c = constant_field(0.7, 2, 1);
        let a_next = DenseArray::zeros(&[9, 1]);
        let draws = LossDraws::with_actions(9, a_next, &mut rng).unwrap();
        let mut b = batch.clone();
        b.terminal = vec![false; 9];
        let (l, _) = dcfm_loss(&c, &c, &b, &draws, &[1.0; 9], &cfg()).unwrap();
        assert!(l.abs() < 1e-24);
    }

    #[test]
    fn half_weights_halve_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = toy_batch(12, &mut rng);
        let online = ReturnField::new(2, 1, &[8, 8], &mut rng);
        let target = ReturnField::new(2, 1, &[8, 8], &mut rng);
        let draws = LossDraws::with_actions(12, DenseArray::filled(&[12, 1], 0.3), &mut rng).unwrap();
        for bootstrapped in [false, true] {
            let loss = |w: &[f64]| {
                let f = if bootstrapped { bcfm_loss } else { dcfm_loss };
                f(&online, &target, &batch, &draws, w, &cfg()).unwrap().0
            };
            let full = loss(&[1.0; 12]);
            let half = loss(&[0.5; 12]);
            assert!((half - 0.5 * full).abs() < 1e-12 * full.abs().max(1.0));
        }
    }

    #[test]
    fn bcfm_vanishes_for_exact_straight_line_field() {
        // one-step transitions: every target is r - eps, matched by v(z|t) = (r - z)/(1 - t)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut batch = toy_batch(6, &mut rng);
        batch.terminal = vec![true; 6];
        batch.r = vec![0.5; 6];
        let draws = LossDraws::with_actions(6, DenseArray::zeros(&[6, 1]), &mut rng).unwrap();
        let target = constant_field(0.0, 2, 1);
        let pairs = bcfm_pairs(&target, &batch, &draws, 0.9, 10, None).unwrap();
        for i in 0..6 {
            let t = draws.t[i];
            let exact = if t < 1.0 { (0.5 - pairs.z[i]) / (1.0 - t) } else { 0.5 - draws.eps[i] };
            assert!((exact - pairs.target[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn terminal_rows_ignore_bootstrap_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut batch = toy_batch(5, &mut rng);
        batch.terminal = vec![true; 5];
        let draws = LossDraws::with_actions(5, DenseArray::zeros(&[5, 1]), &mut rng).unwrap();
        let f1 = ReturnField::new(2, 1, &[8], &mut rng);
        let f2 = ReturnField::new(2, 1, &[8], &mut rng);
        assert_eq!(dcfm_pairs(&f1, &batch, &draws, 0.9, 10).unwrap(), dcfm_pairs(&f2, &batch, &draws, 0.9, 10).unwrap());
        assert_eq!(
            bcfm_pairs(&f1, &batch, &draws, 0.9, 10, None).unwrap(),
            bcfm_pairs(&f2, &batch, &draws, 0.9, 10, None).unwrap()
        );
    }

    #[test]
    fn combined_loss_is_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = toy_batch(10, &mut rng);
        let online = ReturnField::new(2, 1, &[8, 8], &mut rng);
        let target = ReturnField::new(2, 1, &[8, 8], &mut rng);
        let draws = LossDraws::with_actions(10, DenseArray::filled(&[10, 1], -0.2), &mut rng).unwrap();
        let mut c = cfg();
        let (_, d) = value_flow_loss(&online, &target, &batch, &draws, &c).unwrap();
        assert!((d.loss - d.dcfm - d.bcfm).abs() < 1e-12);
        let (w, _) = confidence_weights(&target, &batch.state_action().unwrap(), &draws.eps, c.tau, c.flow_steps).unwrap();
        let (wd, _) = dcfm_loss(&online, &target, &batch, &draws, &w, &c).unwrap();
        assert!((wd - d.dcfm).abs() < 1e-12);
        c.lambda = 0.0;
        let (_, d0) = value_flow_loss(&online, &target, &batch, &draws, &c).unwrap();
        assert!((d0.loss - wd).abs() < 1e-12);
        assert!(d.mean_weight >= 0.5 && d.mean_weight <= 1.0);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        assert!(c.validate().is_ok());
        c.gamma = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = cfg();
        c.tau = 0.0;
        assert!(c.validate().is_err());
    }
}
