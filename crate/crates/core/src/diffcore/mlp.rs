//! Fully connected networks: `Dense -> GELU -> LayerNorm` per hidden layer
//! and a final linear `Dense`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::array::DenseArray;
use super::kernels;
use super::params::ParamSet;
use super::tape::{BoundParams, Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Architecture of an MLP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default = "default_true")]
    pub layer_norm: bool,
}

fn default_true() -> bool {
    true
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        Self { input_dim, hidden: hidden.to_vec(), output_dim, layer_norm: true }
    }

    /// `[input, hidden.., output]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(self.input_dim);
        s.extend_from_slice(&self.hidden);
        s.push(self.output_dim);
        s
    }

    fn n_dense(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Fan-in scaled uniform weights (variance `1/fan_in`), zero biases, unit
    /// layer-norm scales.
    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let sizes = self.layer_sizes();
        let mut p = ParamSet::new();
        for i in 0..self.n_dense() {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let bound = (3.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            p.insert(kernel_name(i), DenseArray::new(vec![fan_in, fan_out], w).expect("sized"))
                .expect("unique");
            p.insert(bias_name(i), DenseArray::zeros(&[fan_out])).expect("unique");
            if self.layer_norm && i + 1 < self.n_dense() {
                p.insert(ln_scale_name(i), DenseArray::filled(&[fan_out], 1.0)).expect("unique");
                p.insert(ln_offset_name(i), DenseArray::zeros(&[fan_out])).expect("unique");
            }
        }
        p
    }

    /// Checks that `params` has exactly the layout this spec expects.
    pub fn validate(&self, params: &ParamSet) -> Result<()> {
        let sizes = self.layer_sizes();
        let mut expected = 0;
        for i in 0..self.n_dense() {
            check_shape(params, &kernel_name(i), &[sizes[i], sizes[i + 1]])?;
            check_shape(params, &bias_name(i), &[sizes[i + 1]])?;
            expected += 2;
            if self.layer_norm && i + 1 < self.n_dense() {
                check_shape(params, &ln_scale_name(i), &[sizes[i + 1]])?;
                check_shape(params, &ln_offset_name(i), &[sizes[i + 1]])?;
                expected += 2;
            }
        }
        if params.len() != expected {
            return Err(Error::Config(format!(
                "parameter set has {} entries, architecture expects {expected}",
                params.len()
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, input: Var) -> Result<Var> {
        if tape.value(input).cols() != self.input_dim {
            return Err(Error::Config(format!(
                "input width {} does not match first layer {}",
                tape.value(input).cols(),
                self.input_dim
            )));
        }
        let mut x = input;
        for i in 0..self.n_dense() {
            let w = bound.var(&kernel_name(i))?;
            let b = bound.var(&bias_name(i))?;
            x = tape.matmul(x, w)?;
            x = tape.add_row(x, b)?;
            if i + 1 < self.n_dense() {
                x = tape.gelu(x);
                if self.layer_norm {
                    x = tape.layer_norm(x);
                    x = tape.mul_row(x, bound.var(&ln_scale_name(i))?)?;
                    x = tape.add_row(x, bound.var(&ln_offset_name(i))?)?;
                }
            }
        }
        Ok(x)
    }

    /// Forward pass without recording; bitwise equal to [`MlpSpec::forward`].
    pub fn eval(&self, params: &ParamSet, input: &DenseArray) -> Result<DenseArray> {
        if input.cols() != self.input_dim {
            return Err(Error::Config(format!(
                "input width {} does not match first layer {}",
                input.cols(),
                self.input_dim
            )));
        }
        let mut x = kernels::matmul(input, params.require(&kernel_name(0))?);
        x = kernels::add_row(&x, params.require(&bias_name(0))?);
        for i in 1..self.n_dense() {
            x = x.map(kernels::gelu);
            if self.layer_norm {
                x = kernels::layer_norm(&x).0;
                x = kernels::mul_row(&x, params.require(&ln_scale_name(i - 1))?);
                x = kernels::add_row(&x, params.require(&ln_offset_name(i - 1))?);
            }
            x = kernels::matmul(&x, params.require(&kernel_name(i))?);
            x = kernels::add_row(&x, params.require(&bias_name(i))?);
        }
        Ok(x)
    }
}

fn check_shape(params: &ParamSet, name: &str, shape: &[usize]) -> Result<()> {
    let a = params.require(name)?;
    if a.shape() != shape {
        return Err(Error::Config(format!("{name}: expected shape {shape:?}, found {:?}", a.shape())));
    }
    Ok(())
}

fn kernel_name(i: usize) -> String {
    format!("dense{i}.kernel")
}
fn bias_name(i: usize) -> String {
    format!("dense{i}.bias")
}
fn ln_scale_name(i: usize) -> String {
    format!("norm{i}.scale")
}
fn ln_offset_name(i: usize) -> String {
    format!("norm{i}.offset")
}

/// A recorded forward pass through one MLP.
#[derive(Debug)]
pub struct MlpTape {
    tape: Tape,
    bound: BoundParams,
    params: ParamSet,
    input: Var,
    output: Var,
}

/// Gradients of an MLP forward pass.
#[derive(Debug)]
pub struct MlpGrads {
    pub params: ParamSet,
    pub input: DenseArray,
}

pub fn mlp_forward(params: &ParamSet, input: &DenseArray, spec: &MlpSpec) -> Result<(DenseArray, MlpTape)> {
    spec.validate(params)?;
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let x = tape.leaf(input.clone());
    let y = spec.forward(&mut tape, &bound, x)?;
    let out = tape.value(y).clone();
    Ok((out, MlpTape { tape, bound, params: params.clone(), input: x, output: y }))
}

impl MlpTape {
    /// Vector-Jacobian product with `output_grad`.
    pub fn backward(&self, output_grad: &DenseArray) -> Result<MlpGrads> {
        let g: Gradients = self.tape.backward(self.output, output_grad.clone())?;
        let params = g.params(&self.bound, &self.params)?;
        let input = g
            .get(self.input)
            .cloned()
            .unwrap_or_else(|| DenseArray::zeros(self.tape.value(self.input).shape()));
        Ok(MlpGrads { params, input })
    }
}

/// Per-row derivative of a scalar-output network with respect to input
/// column `component`, by forward-mode differentiation alongside the
/// forward pass. Values are bitwise equal to [`MlpSpec::eval`].
pub fn input_derivative_batch(
    params: &ParamSet,
    spec: &MlpSpec,
    input: &DenseArray,
    component: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if spec.output_dim != 1 {
        return Err(Error::Contract(format!(
            "input derivative needs a scalar-output network, got output width {}",
            spec.output_dim
        )));
    }
    if component >= spec.input_dim {
        return Err(Error::Contract(format!("input component {component} out of range")));
    }
    if input.cols() != spec.input_dim {
        return Err(Error::Config(format!(
            "input width {} does not match first layer {}",
            input.cols(),
            spec.input_dim
        )));
    }
    let n = input.rows();
    let w0 = params.require(&kernel_name(0))?;
    let mut x = kernels::add_row(&kernels::matmul(input, w0), params.require(&bias_name(0))?);
    // tangent of the first pre-activation is row `component` of the kernel
    let mut dx = DenseArray::from_rows(&vec![w0.row_slice(component).to_vec(); n])?;
    for i in 1..spec.n_dense() {
        let m = x.cols();
        let mut h = x.clone();
        for (hv, dv) in h.data_mut().iter_mut().zip(dx.data_mut()) {
            let (g, dg) = kernels::gelu_and_grad(*hv);
            *hv = g;
            *dv *= dg;
        }
        if spec.layer_norm {
            let (y, inv) = kernels::layer_norm(&h);
            for ((yr, dr), iv) in y.data().chunks_exact(m).zip(dx.data_mut().chunks_exact_mut(m)).zip(&inv) {
                let md = dr.iter().sum::<f64>() / m as f64;
                let proj = yr.iter().zip(dr.iter()).map(|(a, b)| a * (b - md)).sum::<f64>() / m as f64;
                for (d, yv) in dr.iter_mut().zip(yr) {
                    *d = iv * ((*d - md) - yv * proj);
                }
            }
            let scale = params.require(&ln_scale_name(i - 1))?;
            h = kernels::mul_row(&y, scale);
            h = kernels::add_row(&h, params.require(&ln_offset_name(i - 1))?);
            dx = kernels::mul_row(&dx, scale);
        }
        let w = params.require(&kernel_name(i))?;
        x = kernels::add_row(&kernels::matmul(&h, w), params.require(&bias_name(i))?);
        dx = kernels::matmul(&dx, w);
    }
    Ok((x.into_data(), dx.into_data()))
}

/// Derivative of the scalar output with respect to one input coordinate.
pub fn input_derivative(params: &ParamSet, spec: &MlpSpec, input: &[f64], component: usize) -> Result<f64> {
    let (_, d) = input_derivative_batch(params, spec, &DenseArray::row(input.to_vec()), component)?;
    Ok(d[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(weights: &[f64], bias: f64) -> (MlpSpec, ParamSet) {
        let spec = MlpSpec { input_dim: weights.len(), hidden: vec![], output_dim: 1, layer_norm: false };
        let mut p = ParamSet::new();
        p.insert("dense0.kernel", DenseArray::column(weights.to_vec())).unwrap();
        p.insert("dense0.bias", DenseArray::new(vec![1], vec![bias]).unwrap()).unwrap();
        (spec, p)
    }

    #[test]
    fn identity_linear_net() {
        let (spec, p) = linear(&[1.0], 0.0);
        let (y, _) = mlp_forward(&p, &DenseArray::row(vec![1.0]), &spec).unwrap();
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn zero_weights_output_bias() {
        let spec = MlpSpec::new(3, &[4], 2);
        let mut p = spec.init(&mut ChaCha8Rng::seed_from_u64(0));
        p.get_mut("dense1.kernel").unwrap().data_mut().fill(0.0);
        p.get_mut("dense1.bias").unwrap().data_mut().copy_from_slice(&[0.25, -2.0]);
        let y = spec.eval(&p, &DenseArray::row(vec![0.3, -1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.25, -2.0]);
    }

    #[test]
    fn linear_input_derivative() {
        // y = 2 z + s
        let (spec, p) = linear(&[2.0, 1.0], 0.0);
        assert_eq!(input_derivative(&p, &spec, &[0.7, -3.0], 0).unwrap(), 2.0);
        let (spec, p) = linear(&[0.0, 0.0], 1.5);
        assert_eq!(input_derivative(&p, &spec, &[0.7, -3.0], 0).unwrap(), 0.0);
    }

    #[test]
    fn vector_output_rejected_for_input_derivative() {
        let spec = MlpSpec::new(2, &[3], 2);
        let p = spec.init(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(input_derivative(&p, &spec, &[0.0, 0.0], 0), Err(Error::Contract(_))));
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let spec = MlpSpec::new(2, &[3], 1);
        let p = spec.init(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(spec.eval(&p, &DenseArray::row(vec![1.0])), Err(Error::Config(_))));
        let other = MlpSpec::new(2, &[4], 1);
        assert!(other.validate(&p).is_err());
    }

    #[test]
    fn tape_and_eval_agree_bitwise() {
        let spec = MlpSpec::new(4, &[8, 8], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = spec.init(&mut rng);
        let x = DenseArray::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (y, _) = mlp_forward(&p, &x, &spec).unwrap();
        let y2 = spec.eval(&p, &x).unwrap();
        assert_eq!(y, y2);
    }
}
