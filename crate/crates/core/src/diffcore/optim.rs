use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

/// Adam constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moment estimates for one parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub first: ParamSet,
    pub second: ParamSet,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ParamSet) -> Self {
        Self { first: params.zeros_like(), second: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    opt: &mut OptState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&opt.first)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Training(format!("non-finite gradient for {name:?} at step {}", opt.step)));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked");
        let m = opt.first.get_mut(name).expect("checked");
        for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
        }
        let v = opt.second.get_mut(name).expect("checked");
        for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
        }
        let m = opt.first.get(name).expect("checked");
        let v = opt.second.get(name).expect("checked");
        for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let mhat = mv / c1;
            let vhat = vv / c2;
            *pv -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so its global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) {
    let n = grads.global_norm();
    if n > max_norm && n.is_finite() {
        grads.scale(max_norm / n);
    }
}
