//! Categorical (C51-style) and quantile (IQN-style) return critics built on
//! the same MLP trunk as the flow critic, plus histogram extraction for all
//! three.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::critic::{repeat_rows, sample_return, state_action, CriticBatch, ReturnField};
use crate::diffcore::{kernels, DenseArray, MlpSpec, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::metrics::ReturnHistogram;

/// `N` evenly spaced atoms from `lo` to `hi` inclusive.
pub fn atom_support(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(lo < hi) {
        return Err(Error::Config(format!("categorical support needs >= 2 atoms on a non-empty range, got {n} on [{lo}, {hi}]")));
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

/// Projects the law of `r + gamma * Z`, `Z ~ probs` on `support`, back onto
/// `support`. Each shifted atom splits its mass between the two nearest
/// atoms in proportion to proximity; values beyond the ends land on the
/// boundary atoms.
pub fn c51_project(r: f64, gamma: f64, probs: &[f64], support: &[f64]) -> Vec<f64> {
    let n = support.len();
    let (lo, hi) = (support[0], support[n - 1]);
    let dz = (hi - lo) / (n - 1) as f64;
    let mut out = vec![0.0; n];
    for (z, p) in support.iter().zip(probs) {
        let b = ((r + gamma * z).clamp(lo, hi) - lo) / dz;
        let l = (b.floor() as usize).min(n - 1);
        let u = (b.ceil() as usize).min(n - 1);
        if l == u {
            out[l] += p;
        } else {
            out[l] += p * (u as f64 - b);
            out[u] += p * (b - l as f64);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalCritic {
    pub spec: MlpSpec,
    pub params: ParamSet,
    pub support: Vec<f64>,
}

impl CategoricalCritic {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], support: Vec<f64>, rng: &mut impl Rng) -> Self {
        let spec = MlpSpec::new(state_dim + action_dim, hidden, support.len());
        let params = spec.init(rng);
        Self { spec, params, support }
    }

    /// Softmax probabilities per `(s, a)` row.
    pub fn probs(&self, sa: &DenseArray) -> Result<DenseArray> {
        let logits = self.spec.eval(&self.params, sa)?;
        let n = self.support.len();
        let mut data = Vec::with_capacity(logits.len());
        for r in 0..logits.rows() {
            data.extend(kernels::log_softmax_row(logits.row_slice(r)).into_iter().map(f64::exp));
        }
        DenseArray::new(vec![logits.rows(), n], data)
    }

    pub fn q(&self, sa: &DenseArray) -> Result<Vec<f64>> {
        let p = self.probs(sa)?;
        Ok((0..p.rows()).map(|r| p.row_slice(r).iter().zip(&self.support).map(|(a, b)| a * b).sum()).collect())
    }
}

/// Cross-entropy between the projected target distributions and the online
/// distributions at `(s, a)`, with gradient. Terminal rows project a point
/// mass at `r`.
pub fn c51_loss(
    online: &CategoricalCritic,
    target: &CategoricalCritic,
    batch: &CriticBatch,
    a_next: &DenseArray,
    gamma: f64,
) -> Result<(f64, ParamSet)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let next = target.probs(&state_action(&batch.s_next, a_next)?)?;
    let n = online.support.len();
    let mut proj = Vec::with_capacity(batch.len() * n);
    for i in 0..batch.len() {
        let g = if batch.terminal[i] { 0.0 } else { gamma };
        proj.extend(c51_project(batch.r[i], g, next.row_slice(i), &online.support));
    }
    let mut tape = Tape::new();
    let bound = tape.bind(&online.params);
    let x = tape.leaf(batch.state_action()?);
    let logits = online.spec.forward(&mut tape, &bound, x)?;
    let loss = tape.softmax_xent(logits, DenseArray::new(vec![batch.len(), n], proj)?)?;
    let grads = tape.backward(loss, DenseArray::scalar(1.0))?;
    Ok((tape.scalar(loss), grads.params(&bound, &online.params)?))
}

/// Quantile function network; input `concat(s, a, u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileCritic {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

fn with_fraction(sa: &DenseArray, u: &[f64]) -> Result<DenseArray> {
    state_action(sa, &DenseArray::column(u.to_vec()))
}

impl QuantileCritic {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let spec = MlpSpec::new(state_dim + action_dim + 1, hidden, 1);
        let params = spec.init(rng);
        Self { spec, params }
    }

    /// Quantile values, row `i` at fraction `u[i]`.
    pub fn quantiles(&self, sa: &DenseArray, u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.spec.eval(&self.params, &with_fraction(sa, u)?)?.into_data())
    }

    /// Mean of `k` quantiles at midpoint fractions.
    pub fn q(&self, sa: &DenseArray, k: usize) -> Result<Vec<f64>> {
        let u: Vec<f64> = (0..sa.rows()).flat_map(|_| (0..k).map(move |j| (j as f64 + 0.5) / k as f64)).collect();
        let v = self.quantiles(&repeat_rows(sa, k), &u)?;
        Ok(v.chunks(k).map(|c| c.iter().sum::<f64>() / k as f64).collect())
    }
}

/// Fractions drawn for one quantile update.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileDraws {
    /// `n x k` online fractions.
    pub u: DenseArray,
    /// `n x k'` target fractions.
    pub u_target: DenseArray,
}

impl QuantileDraws {
    pub fn sample(n: usize, k: usize, k_target: usize, rng: &mut dyn RngCore) -> Self {
        let mut draw = |c: usize| {
            DenseArray::new(vec![n, c], (0..n * c).map(|_| rng.random_range(f64::EPSILON..1.0)).collect()).expect("sized")
        };
        let u = draw(k);
        Self { u, u_target: draw(k_target) }
    }
}

/// Quantile Huber loss between online quantiles at `draws.u` and target
/// samples `r + gamma z'` (`z'` the target quantiles at `draws.u_target`,
/// zero after termination): batch mean of the sum over online fractions of
/// the mean over targets.
pub fn quantile_huber_loss(
    online: &QuantileCritic,
    target: &QuantileCritic,
    batch: &CriticBatch,
    a_next: &DenseArray,
    draws: &QuantileDraws,
    gamma: f64,
    kappa: f64,
) -> Result<(f64, ParamSet)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let (k, kt) = (draws.u.cols(), draws.u_target.cols());
    let zt = target.quantiles(&repeat_rows(&state_action(&batch.s_next, a_next)?, kt), draws.u_target.data())?;
    let mut samples = Vec::with_capacity(n * kt);
    for i in 0..n {
        let g = if batch.terminal[i] { 0.0 } else { gamma };
        samples.extend(zt[i * kt..(i + 1) * kt].iter().map(|z| batch.r[i] + g * z));
    }
    // row i * k + j: sample i at online fraction j
    let mut targets = Vec::with_capacity(n * k * kt);
    for i in 0..n {
        for _ in 0..k {
            targets.extend_from_slice(&samples[i * kt..(i + 1) * kt]);
        }
    }
    let sa = repeat_rows(&batch.state_action()?, k);
    let mut tape = Tape::new();
    let bound = tape.bind(&online.params);
    let x = tape.leaf(with_fraction(&sa, draws.u.data())?);
    let pred = online.spec.forward(&mut tape, &bound, x)?;
    let loss = tape.quantile_huber(
        pred,
        DenseArray::new(vec![n * k, kt], targets)?,
        draws.u.data().to_vec(),
        kappa,
        1.0 / n as f64,
    )?;
    let grads = tape.backward(loss, DenseArray::scalar(1.0))?;
    Ok((tape.scalar(loss), grads.params(&bound, &online.params)?))
}

/// Any of the three critics, for histogram extraction.
pub enum CriticRef<'a> {
    Flow { field: &'a ReturnField, steps: usize },
    Categorical(&'a CategoricalCritic),
    Quantile(&'a QuantileCritic),
}

/// Return histogram at one `(s, a)` on `[lo, hi]`. The flow critic is
/// sampled with `n_samples` noises, the quantile critic at `n_samples`
/// evenly spaced fractions, and the categorical critic bins its atoms.
/// Also returns how many samples (atoms for the categorical critic) fell
/// outside the range and were clipped.
pub fn critic_histogram(
    critic: CriticRef<'_>,
    sa: &[f64],
    n_samples: usize,
    n_bins: usize,
    (lo, hi): (f64, f64),
    rng: &mut dyn RngCore,
) -> Result<(ReturnHistogram, usize)> {
    if n_samples == 0 {
        return Err(Error::Contract("histogram needs at least one sample".into()));
    }
    let row = DenseArray::row(sa.to_vec());
    match critic {
        CriticRef::Flow { field, steps } => {
            let eps: Vec<f64> = (0..n_samples).map(|_| rng.sample(StandardNormal)).collect();
            let z = sample_return(field, &repeat_rows(&row, n_samples), &eps, steps, None)?;
            ReturnHistogram::from_samples(&z, lo, hi, n_bins)
        }
        CriticRef::Categorical(c) => {
            let p = c.probs(&row)?;
            let atoms: Vec<(f64, f64)> = c.support.iter().copied().zip(p.row_slice(0).iter().copied()).collect();
            let clipped = atoms.iter().filter(|(x, m)| *m > 0.0 && (*x < lo || *x > hi)).count();
            Ok((ReturnHistogram::from_atoms(&atoms, lo, hi, n_bins)?, clipped))
        }
        CriticRef::Quantile(c) => {
            let u: Vec<f64> = (0..n_samples).map(|i| (i as f64 + 0.5) / n_samples as f64).collect();
            let mut z = c.quantiles(&repeat_rows(&row, n_samples), &u)?;
            z.sort_by(f64::total_cmp);
            ReturnHistogram::from_samples(&z, lo, hi, n_bins)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_examples() {
        let support = atom_support(-2.0, 2.0, 5).unwrap();
        // gamma = 0 with r on an atom
        assert_eq!(c51_project(1.0, 0.0, &[0.2, 0.2, 0.2, 0.2, 0.2], &support), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        // midway between atoms
        let p = c51_project(0.5, 0.0, &[1.0, 0.0, 0.0, 0.0, 0.0], &support);
        assert_eq!(p, vec![0.0, 0.0, 0.5, 0.5, 0.0]);
        // two-atom target {-2: 0.25, 2: 0.75}, r = 0.3, gamma = 0.5:
        // -0.7 -> 0.7 on -1, 0.3 on 0; 1.3 -> 0.7 on 1, 0.3 on 2
        let p = c51_project(0.3, 0.5, &[0.25, 0.0, 0.0, 0.0, 0.75], &support);
        let want = [0.0, 0.25 * 0.7, 0.25 * 0.3, 0.75 * 0.7, 0.75 * 0.3];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        // clamped at the boundary
        assert_eq!(c51_project(5.0, 0.9, &[0.0, 0.0, 1.0, 0.0, 0.0], &support), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn median_quantile_loss_is_half_huber() {
        for d in [-3.0, -0.4, 0.0, 0.2, 2.5] {
            let kappa = 1.0;
            let huber = if f64::abs(d) <= kappa { 0.5 * d * d } else { kappa * (f64::abs(d) - 0.5 * kappa) };
            assert!((kernels::quantile_huber(0.5, d, kappa).0 - 0.5 * huber / kappa).abs() < 1e-15);
        }
    }

    #[test]
    fn categorical_probs_normalise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = CategoricalCritic::new(2, 1, &[8], atom_support(-1.0, 1.0, 11).unwrap(), &mut rng);
        let p = c.probs(&DenseArray::from_rows(&[vec![0.1, 0.2, 0.3], vec![1.0, -1.0, 0.0]]).unwrap()).unwrap();
        for r in 0..2 {
            assert!((p.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn point_mass_critic_gives_one_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = QuantileCritic::new(1, 1, &[4], &mut rng);
        c.params.get_mut("dense1.kernel").unwrap().data_mut().fill(0.0);
        c.params.get_mut("dense1.bias").unwrap().data_mut()[0] = 0.4;
        let (h, _) = critic_histogram(CriticRef::Quantile(&c), &[0.0, 0.0], 500, 60, (-1.0, 1.0), &mut rng).unwrap();
        assert_eq!(h.masses().iter().filter(|m| **m > 0.0).count(), 1);
        assert!((h.masses().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quantile_loss_vanishes_when_online_matches_constant_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = QuantileCritic::new(1, 1, &[4], &mut rng);
        c.params.get_mut("dense1.kernel").unwrap().data_mut().fill(0.0);
        c.params.get_mut("dense1.bias").unwrap().data_mut()[0] = 0.0;
        let batch = CriticBatch {
            s: DenseArray::column(vec![0.0, 1.0]),
            a: DenseArray::column(vec![0.5, -0.5]),
            r: vec![0.0, 0.0],
            s_next: DenseArray::column(vec![1.0, 0.0]),
            terminal: vec![false, true],
        };
        let draws = QuantileDraws::sample(2, 4, 4, &mut rng);
        let (l, _) = quantile_huber_loss(&c, &c, &batch, &DenseArray::zeros(&[2, 1]), &draws, 0.9, 0.9).unwrap();
        assert_eq!(l, 0.0);
    }
}
