//! Generic flow-matching machinery: Euler integration of the flow ODE, the
//! co-integrated flow-derivative ODE for scalar fields, and the conditional
//! flow-matching regression loss.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{input_derivative_batch, DenseArray, MlpSpec, ParamSet, Tape};
use crate::error::{Error, Result};

/// A time-dependent velocity field over `dim`-dimensional samples,
/// evaluated row-wise on a batch. Each row carries its own flow time and
/// (optionally) a conditioning context row.
pub trait VectorField {
    fn dim(&self) -> usize;

    fn velocity(&self, x: &DenseArray, t: &[f64], ctx: Option<&DenseArray>) -> Result<DenseArray>;
}

/// A one-dimensional field that can also report `dv/dz`.
pub trait ScalarField: VectorField {
    /// Returns `(v, dv/dz)` per row.
    fn velocity_and_slope(&self, z: &[f64], t: &[f64], ctx: Option<&DenseArray>) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Builds the network input `concat(x, t, ctx)`.
pub fn field_input(x: &DenseArray, t: &[f64], ctx: Option<&DenseArray>) -> Result<DenseArray> {
    let n = x.rows();
    if t.len() != n {
        return Err(Error::Contract(format!("{} flow times for {n} samples", t.len())));
    }
    let c = match ctx {
        Some(c) if c.rows() != n => {
            return Err(Error::Contract(format!("context has {} rows, samples {n}", c.rows())))
        }
        Some(c) => c.cols(),
        None => 0,
    };
    let d = x.cols();
    let mut data = Vec::with_capacity(n * (d + 1 + c));
    for r in 0..n {
        data.extend_from_slice(x.row_slice(r));
        data.push(t[r]);
        if let Some(c) = ctx {
            data.extend_from_slice(c.row_slice(r));
        }
    }
    DenseArray::new(vec![n, d + 1 + c], data)
}

/// An MLP read as a field: input `concat(x, t, ctx)`, output velocity.
#[derive(Clone, Copy, Debug)]
pub struct NetField<'a> {
    pub spec: &'a MlpSpec,
    pub params: &'a ParamSet,
}

impl<'a> NetField<'a> {
    pub fn new(spec: &'a MlpSpec, params: &'a ParamSet) -> Self {
        Self { spec, params }
    }
}

impl VectorField for NetField<'_> {
    fn dim(&self) -> usize {
        self.spec.output_dim
    }

    fn velocity(&self, x: &DenseArray, t: &[f64], ctx: Option<&DenseArray>) -> Result<DenseArray> {
        self.spec.eval(self.params, &field_input(x, t, ctx)?)
    }
}

impl ScalarField for NetField<'_> {
    fn velocity_and_slope(&self, z: &[f64], t: &[f64], ctx: Option<&DenseArray>) -> Result<(Vec<f64>, Vec<f64>)> {
        let input = field_input(&DenseArray::column(z.to_vec()), t, ctx)?;
        input_derivative_batch(self.params, self.spec, &input, 0)
    }
}

/// A field given by closures; handy for analytic fields.
pub struct FnField<V, S> {
    dim: usize,
    velocity: V,
    slope: S,
}

impl<V> FnField<V, fn(&[f64], f64, &[f64]) -> f64>
where
    V: Fn(&[f64], f64, &[f64]) -> Vec<f64>,
{
    /// Field without a known slope; `velocity_and_slope` reports zero slope,
    /// so only use it with [`euler_integrate`].
    pub fn new(dim: usize, velocity: V) -> Self {
        fn no_slope(_: &[f64], _: f64, _: &[f64]) -> f64 {
            0.0
        }
        Self { dim, velocity, slope: no_slope }
    }
}

impl<V, S> FnField<V, S>
where
    V: Fn(&[f64], f64, &[f64]) -> Vec<f64>,
    S: Fn(&[f64], f64, &[f64]) -> f64,
{
    /// Scalar field with an analytic `dv/dz`.
    pub fn scalar(velocity: V, slope: S) -> Self {
        Self { dim: 1, velocity, slope }
    }
}

fn ctx_row<'c>(ctx: Option<&'c DenseArray>, r: usize) -> &'c [f64] {
    ctx.map(|c| c.row_slice(r)).unwrap_or(&[])
}

impl<V, S> VectorField for FnField<V, S>
where
    V: Fn(&[f64], f64, &[f64]) -> Vec<f64>,
    S: Fn(&[f64], f64, &[f64]) -> f64,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &DenseArray, t: &[f64], ctx: Option<&DenseArray>) -> Result<DenseArray> {
        let rows: Vec<Vec<f64>> =
            (0..x.rows()).map(|r| (self.velocity)(x.row_slice(r), t[r], ctx_row(ctx, r))).collect();
        DenseArray::from_rows(&rows)
    }
}

impl<V, S> ScalarField for FnField<V, S>
where
    V: Fn(&[f64], f64, &[f64]) -> Vec<f64>,
    S: Fn(&[f64], f64, &[f64]) -> f64,
{
    fn velocity_and_slope(&self, z: &[f64], t: &[f64], ctx: Option<&DenseArray>) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut v = Vec::with_capacity(z.len());
        let mut s = Vec::with_capacity(z.len());
        for r in 0..z.len() {
            let c = ctx_row(ctx, r);
            v.push((self.velocity)(&[z[r]], t[r], c)[0]);
            s.push((self.slope)(&[z[r]], t[r], c));
        }
        Ok((v, s))
    }
}

/// Step count and time window for Euler integration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub steps: usize,
    pub t_init: f64,
    pub t_final: f64,
}

impl IntegrationConfig {
    pub fn unit(steps: usize) -> Self {
        Self { steps, t_init: 0.0, t_final: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("Euler step count must be >= 1".into()));
        }
        let ok = (0.0..=1.0).contains(&self.t_init)
            && (0.0..=1.0).contains(&self.t_final)
            && self.t_init <= self.t_final;
        if !ok {
            return Err(Error::Config(format!(
                "need 0 <= t_init <= t_final <= 1, got [{}, {}]",
                self.t_init, self.t_final
            )));
        }
        Ok(())
    }
}

fn check_times(t_init: &[f64], t_final: &[f64], n: usize, steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::Config("Euler step count must be >= 1".into()));
    }
    if t_init.len() != n || t_final.len() != n {
        return Err(Error::Contract(format!("time vectors must have {n} entries")));
    }
    for (a, b) in t_init.iter().zip(t_final) {
        if !(0.0..=1.0).contains(a) || !(0.0..=1.0).contains(b) || a > b {
            return Err(Error::Config(format!("invalid time window [{a}, {b}]")));
        }
    }
    Ok(())
}

/// Euler integration where row `i` runs from `t_init[i]` to `t_final[i]` in
/// `steps` equal steps.
pub fn euler_integrate_rows(
    field: &impl VectorField,
    noise: &DenseArray,
    ctx: Option<&DenseArray>,
    t_init: &[f64],
    t_final: &[f64],
    steps: usize,
) -> Result<DenseArray> {
    let n = noise.rows();
    check_times(t_init, t_final, n, steps)?;
    if noise.cols() != field.dim() {
        return Err(Error::Contract(format!("noise width {} but field dimension {}", noise.cols(), field.dim())));
    }
    let dt: Vec<f64> = t_init.iter().zip(t_final).map(|(a, b)| (b - a) / steps as f64).collect();
    let d = noise.cols();
    let mut x = noise.clone();
    let mut t = t_init.to_vec();
    for step in 0..steps {
        let v = field.velocity(&x, &t, ctx)?;
        if !v.is_finite() {
            return Err(Error::Integration { step, detail: "non-finite velocity".into() });
        }
        for (i, (xv, vv)) in x.data_mut().iter_mut().zip(v.data()).enumerate() {
            *xv += vv * dt[i / d];
        }
        for (ti, (t0, h)) in t.iter_mut().zip(t_init.iter().zip(&dt)) {
            *ti = t0 + (step + 1) as f64 * h;
        }
    }
    Ok(x)
}

/// Integrates every row of `noise` over the window in `cfg`.
pub fn euler_integrate(
    field: &impl VectorField,
    noise: &DenseArray,
    ctx: Option<&DenseArray>,
    cfg: &IntegrationConfig,
) -> Result<DenseArray> {
    cfg.validate()?;
    let n = noise.rows();
    euler_integrate_rows(field, noise, ctx, &vec![cfg.t_init; n], &vec![cfg.t_final; n], cfg.steps)
}

/// Co-integrates a scalar flow and its noise derivative on one Euler grid:
/// `z <- z + v dt`, `J <- J + (dv/dz) J dt`, `J(t_init) = 1`.
/// Returns `(samples, derivatives)`.
pub fn euler_integrate_with_derivative_rows(
    field: &impl ScalarField,
    noise: &[f64],
    ctx: Option<&DenseArray>,
    t_init: &[f64],
    t_final: &[f64],
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = noise.len();
    check_times(t_init, t_final, n, steps)?;
    if field.dim() != 1 {
        return Err(Error::Contract("flow derivative requires a scalar field".into()));
    }
    let dt: Vec<f64> = t_init.iter().zip(t_final).map(|(a, b)| (b - a) / steps as f64).collect();
    let mut z = noise.to_vec();
    let mut jac = vec![1.0; n];
    let mut t = t_init.to_vec();
    for step in 0..steps {
        let (v, slope) = field.velocity_and_slope(&z, &t, ctx)?;
        if v.iter().chain(&slope).any(|x| !x.is_finite()) {
            return Err(Error::Integration { step, detail: "non-finite velocity or slope".into() });
        }
        for i in 0..n {
            jac[i] += slope[i] * jac[i] * dt[i];
            z[i] += v[i] * dt[i];
            t[i] = t_init[i] + (step + 1) as f64 * dt[i];
        }
    }
    Ok((z, jac))
}

pub fn euler_integrate_with_derivative(
    field: &impl ScalarField,
    noise: &[f64],
    ctx: Option<&DenseArray>,
    cfg: &IntegrationConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let n = noise.len();
    euler_integrate_with_derivative_rows(field, noise, ctx, &vec![cfg.t_init; n], &vec![cfg.t_final; n], cfg.steps)
}

/// Flow times drawn from `(0, 1]`.
pub fn sample_times(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| 1.0 - rng.random::<f64>()).collect()
}

pub fn sample_noise(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseArray {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    DenseArray::new(vec![rows, cols], data).expect("sized")
}

/// Interpolants `x^t = t x + (1 - t) eps` and regression targets `x - eps`.
pub fn cfm_pairs(data: &DenseArray, noise: &DenseArray, times: &[f64]) -> Result<(DenseArray, DenseArray)> {
    if data.rows() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if !data.same_shape(noise) || times.len() != data.rows() {
        return Err(Error::Contract("data, noise and times are not aligned".into()));
    }
    let d = data.cols();
    let mut xt = Vec::with_capacity(data.len());
    let mut target = Vec::with_capacity(data.len());
    for (i, (x, e)) in data.data().iter().zip(noise.data()).enumerate() {
        let t = times[i / d];
        xt.push(t * x + (1.0 - t) * e);
        target.push(x - e);
    }
    Ok((
        DenseArray::new(data.shape().to_vec(), xt)?,
        DenseArray::new(data.shape().to_vec(), target)?,
    ))
}

/// Conditional flow-matching loss `mean_i ||v(x^t_i | t_i, ctx_i) - (x_i - eps_i)||^2`
/// and its gradient with respect to the network parameters.
pub fn cfm_loss(
    spec: &MlpSpec,
    params: &ParamSet,
    data: &DenseArray,
    noise: &DenseArray,
    times: &[f64],
    ctx: Option<&DenseArray>,
) -> Result<(f64, ParamSet)> {
    let (xt, target) = cfm_pairs(data, noise, times)?;
    let input = field_input(&xt, times, ctx)?;
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let x = tape.leaf(input);
    let v = spec.forward(&mut tape, &bound, x)?;
    let n = data.rows();
    let loss = tape.weighted_sq_err(v, target, vec![1.0; n])?;
    let grads = tape.backward(loss, DenseArray::scalar(1.0))?;
    Ok((tape.scalar(loss), grads.params(&bound, params)?))
}
