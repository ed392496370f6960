#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use value_flows::diffcore::{DenseArray, ParamSet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Moves every parameter off its initial value so that biases and norm
/// offsets are exercised too.
pub fn jitter(params: &mut ParamSet, scale: f64, rng: &mut ChaCha8Rng) {
    for (_, v) in params.iter_mut() {
        for x in v.data_mut() {
            *x += scale * rng.random_range(-1.0..1.0);
        }
    }
}

pub fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseArray {
    DenseArray::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub within_rel: usize,
    pub failures: Vec<(String, usize, f64, f64)>,
}

impl FdReport {
    /// At least 95% of components within relative 1e-3 and the rest within
    /// absolute 1e-6.
    pub fn passes(&self) -> bool {
        self.failures.is_empty() && self.within_rel as f64 >= 0.95 * self.checked as f64
    }
}

/// Central differences with step 1e-4 against an analytic gradient.
pub fn fd_check(params: &ParamSet, grads: &ParamSet, loss: impl Fn(&ParamSet) -> f64) -> FdReport {
    let h = 1e-4;
    let mut report = FdReport { checked: 0, within_rel: 0, failures: vec![] };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        for k in 0..n {
            let mut p = params.clone();
            let x0 = p.get(&name).unwrap().data()[k];
            p.get_mut(&name).unwrap().data_mut()[k] = x0 + h;
            let up = loss(&p);
            p.get_mut(&name).unwrap().data_mut()[k] = x0 - h;
            let down = loss(&p);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(&name).unwrap().data()[k];
            report.checked += 1;
            let diff = (numeric - analytic).abs();
            if diff <= 1e-3 * numeric.abs().max(analytic.abs()) {
                report.within_rel += 1;
            } else if diff > 1e-6 {
                report.failures.push((name.clone(), k, analytic, numeric));
            }
        }
    }
    report
}
