//! Forward kernels shared by the tape and the tape-free evaluation path, so
//! both produce bitwise-identical values.

use super::array::DenseArray;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-6;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// `(gelu(x), gelu'(x))` sharing one `erf`; the value is bitwise equal to
/// [`gelu`].
pub fn gelu_and_grad(x: f64) -> (f64, f64) {
    let e = libm::erf(x * INV_SQRT_2);
    let value = 0.5 * x * (1.0 + e);
    let cdf = 0.5 * (1.0 + e);
    (value, cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(n x k) . (k x m)`.
pub(crate) fn matmul(a: &DenseArray, b: &DenseArray) -> DenseArray {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(k, b.rows());
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    DenseArray::from_parts(n, m, out)
}

/// `a^T . b` for `a: n x k`, `b: n x m`.
pub(crate) fn matmul_tn(a: &DenseArray, b: &DenseArray) -> DenseArray {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let brow = &bd[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    DenseArray::from_parts(k, m, out)
}

/// `a . b^T` for `a: n x m`, `b: k x m`.
pub(crate) fn matmul_nt(a: &DenseArray, b: &DenseArray) -> DenseArray {
    let (n, m, k) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; n * k];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let arow = &ad[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &bd[p * m..(p + 1) * m];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    DenseArray::from_parts(n, k, out)
}

pub(crate) fn add_row(x: &DenseArray, b: &DenseArray) -> DenseArray {
    let m = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(m) {
        for (o, bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    out
}

pub(crate) fn mul_row(x: &DenseArray, g: &DenseArray) -> DenseArray {
    let m = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(m) {
        for (o, gv) in row.iter_mut().zip(g.data()) {
            *o *= gv;
        }
    }
    out
}

/// Row-wise normalization (no affine part). Returns the output and the
/// per-row inverse standard deviations.
pub(crate) fn layer_norm(x: &DenseArray) -> (DenseArray, Vec<f64>) {
    let m = x.cols();
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for row in out.data_mut().chunks_exact_mut(m) {
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv_std;
        }
        inv.push(inv_std);
    }
    (out, inv)
}

pub(crate) fn concat_cols(parts: &[&DenseArray]) -> DenseArray {
    let n = parts[0].rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(n * total);
    for r in 0..n {
        for p in parts {
            data.extend_from_slice(p.row_slice(r));
        }
    }
    DenseArray::from_parts(n, total, data)
}

/// Quantile Huber penalty `|u - 1{delta < 0}| * huber_kappa(delta) / kappa`
/// and its derivative with respect to `delta`.
pub(crate) fn quantile_huber(u: f64, delta: f64, kappa: f64) -> (f64, f64) {
    let w = if delta < 0.0 { (u - 1.0).abs() } else { u };
    let abs = delta.abs();
    let (h, dh) = if abs <= kappa {
        (0.5 * delta * delta, delta)
    } else {
        (kappa * (abs - 0.5 * kappa), kappa * delta.signum())
    };
    (w * h / kappa, w * dh / kappa)
}

pub(crate) fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}
