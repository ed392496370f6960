//! Offline training and offline-to-online fine-tuning loops, replay,
//! metrics records and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    atom_support, c51_loss, quantile_huber_loss, CategoricalCritic, CriticRef, QuantileCritic, QuantileDraws,
};
use crate::critic::{
    state_action, value_flow_loss, CriticBatch, CriticConfig, CriticDiagnostics, LossDraws, ReturnField,
};
use crate::diffcore::{adam_step, clip_global_norm, ema_update, AdamConfig, DenseArray, OptState, ParamSet};
use crate::envs::{make_env, Dataset, Env, State, Transition};
use crate::error::{Error, Result};
use crate::policies::{
    bc_flow_loss_sampled, bc_next_actions, one_step_next_actions, one_step_policy_loss, rejection_sample_with,
    BcFlowPolicy, OneStepDraws, OneStepPolicy,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticKind {
    Flow,
    Categorical,
    Quantile,
}

impl std::str::FromStr for CriticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Self::Flow),
            "categorical" => Ok(Self::Categorical),
            "quantile" => Ok(Self::Quantile),
            _ => Err(Error::Config(format!("unknown critic {s:?}; expected flow, categorical or quantile"))),
        }
    }
}

/// Every hyperparameter of a run. Missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub critic: CriticKind,
    /// Discount; the env's own discount when absent.
    pub gamma: Option<f64>,
    pub lambda: f64,
    pub tau: f64,
    pub flow_steps: usize,
    pub ensemble_size: usize,
    /// Return range; the env's `r / (1 - gamma)` bounds when absent.
    pub z_lo: Option<f64>,
    pub z_hi: Option<f64>,
    pub clip_returns: bool,
    pub n_atoms: usize,
    pub kappa: f64,
    pub n_quantiles: usize,
    pub n_target_quantiles: usize,
    pub critic_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    pub offline_steps: usize,
    pub log_interval: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
    pub n_candidates: usize,
    /// Noises averaged for Q during rejection sampling.
    pub q_eval_noises: usize,
    pub alpha: f64,
    /// Noises averaged for Q inside the one-step policy loss.
    pub q_noises: usize,
    pub online_steps: usize,
    pub warmstart_steps: usize,
    pub updates_per_step: usize,
    pub replay_capacity: usize,
    pub episode_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            critic: CriticKind::Flow,
            gamma: None,
            lambda: 1.0,
            tau: 3.0,
            flow_steps: 10,
            ensemble_size: 2,
            z_lo: None,
            z_hi: None,
            clip_returns: true,
            n_atoms: 51,
            kappa: 0.9,
            n_quantiles: 32,
            n_target_quantiles: 32,
            critic_hidden: vec![64, 64],
            actor_hidden: vec![64, 64],
            batch_size: 256,
            lr: 3e-4,
            ema_rate: 5e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            offline_steps: 100_000,
            log_interval: 1000,
            checkpoint_interval: 0,
            n_candidates: 16,
            q_eval_noises: 8,
            alpha: 10.0,
            q_noises: 4,
            online_steps: 100_000,
            warmstart_steps: 1000,
            updates_per_step: 1,
            replay_capacity: 1_000_000,
            episode_cap: 100,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::error::read_file(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("flow_steps", self.flow_steps),
            ("ensemble_size", self.ensemble_size),
            ("n_quantiles", self.n_quantiles),
            ("n_target_quantiles", self.n_target_quantiles),
            ("batch_size", self.batch_size),
            ("log_interval", self.log_interval),
            ("n_candidates", self.n_candidates),
            ("q_eval_noises", self.q_eval_noises),
            ("q_noises", self.q_noises),
            ("updates_per_step", self.updates_per_step),
            ("replay_capacity", self.replay_capacity),
            ("episode_cap", self.episode_cap),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_atoms < 2 {
            return Err(Error::Config("n_atoms must be at least 2".into()));
        }
        if self.critic_hidden.is_empty()
            || self.actor_hidden.is_empty()
            || self.critic_hidden.iter().chain(&self.actor_hidden).any(|&h| h == 0)
        {
            return Err(Error::Config("hidden layer lists must be non-empty with positive widths".into()));
        }
        let checks = [
            ("lr", self.lr > 0.0),
            ("ema_rate", self.ema_rate > 0.0 && self.ema_rate <= 1.0),
            ("kappa", self.kappa > 0.0),
            ("alpha", self.alpha >= 0.0),
            ("adam_beta1", (0.0..1.0).contains(&self.adam_beta1)),
            ("adam_beta2", (0.0..1.0).contains(&self.adam_beta2)),
            ("adam_eps", self.adam_eps > 0.0),
            ("grad_clip", self.grad_clip.is_none_or(|c| c > 0.0)),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::Config(format!("{name} is out of range")));
            }
        }
        Ok(())
    }

    /// Critic settings resolved against `env`.
    pub fn critic_config(&self, env: &dyn Env) -> Result<CriticConfig> {
        let (lo, hi) = env.return_range();
        let cfg = CriticConfig {
            gamma: self.gamma.unwrap_or(env.gamma()),
            lambda: self.lambda,
            tau: self.tau,
            flow_steps: self.flow_steps,
            ensemble_size: self.ensemble_size,
            z_lo: self.z_lo.unwrap_or(lo),
            z_hi: self.z_hi.unwrap_or(hi),
            clip_returns: self.clip_returns,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    fn same_architecture(&self, other: &Self) -> bool {
        self.critic == other.critic
            && self.ensemble_size == other.ensemble_size
            && self.n_atoms == other.n_atoms
            && self.critic_hidden == other.critic_hidden
            && self.actor_hidden == other.actor_hidden
    }
}

/// Ring buffer of transitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: Vec::new(), inserted: 0 })
    }

    /// A buffer holding `dataset`; fails when it does not fit.
    pub fn from_dataset(dataset: &Dataset, capacity: usize) -> Result<Self> {
        if capacity < dataset.len() {
            return Err(Error::Config(format!(
                "replay capacity {capacity} is smaller than the dataset ({} transitions)",
                dataset.len()
            )));
        }
        let mut buf = Self::new(capacity)?;
        for t in &dataset.transitions {
            buf.push(t.clone());
        }
        Ok(buf)
    }

    /// Appends `t`, overwriting the oldest entry when full. Returns the
    /// overwritten entry.
    pub fn push(&mut self, t: Transition) -> Option<Transition> {
        let displaced = if self.items.len() < self.capacity {
            self.items.push(t);
            None
        } else {
            let i = (self.inserted % self.capacity as u64) as usize;
            Some(std::mem::replace(&mut self.items[i], t))
        };
        self.inserted += 1;
        displaced
    }

    /// Reverts the latest [`ReplayBuffer::push`].
    fn undo_push(&mut self, displaced: Option<Transition>) {
        self.inserted -= 1;
        match displaced {
            None => {
                self.items.pop();
            }
            Some(t) => {
                let i = (self.inserted % self.capacity as u64) as usize;
                self.items[i] = t;
            }
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }
}

/// Anything batches can be drawn from.
pub trait TransitionSource {
    fn len(&self) -> usize;

    fn get(&self, i: usize) -> &Transition;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TransitionSource for Dataset {
    fn len(&self) -> usize {
        self.transitions.len()
    }

    fn get(&self, i: usize) -> &Transition {
        &self.transitions[i]
    }
}

impl TransitionSource for ReplayBuffer {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }
}

/// `n` indices drawn uniformly with replacement.
pub fn sample_indices(source: &dyn TransitionSource, n: usize, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    if source.is_empty() {
        return Err(Error::Contract("cannot sample from an empty source".into()));
    }
    Ok((0..n).map(|_| rng.random_range(0..source.len())).collect())
}

pub fn sample_batch(source: &dyn TransitionSource, batch_size: usize, rng: &mut dyn RngCore) -> Result<CriticBatch> {
    let idx = sample_indices(source, batch_size, rng)?;
    CriticBatch::from_transitions(idx.into_iter().map(|i| source.get(i)))
}

/// One critic network of any kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CriticNet {
    Flow(ReturnField),
    Categorical(CategoricalCritic),
    Quantile(QuantileCritic),
}

impl CriticNet {
    pub fn params(&self) -> &ParamSet {
        match self {
            Self::Flow(c) => &c.params,
            Self::Categorical(c) => &c.params,
            Self::Quantile(c) => &c.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Self::Flow(c) => &mut c.params,
            Self::Categorical(c) => &mut c.params,
            Self::Quantile(c) => &mut c.params,
        }
    }

    /// Mean return per `(s, a)` row. The flow critic averages over
    /// `noise_set`, the quantile critic over `n_quantiles` midpoints.
    pub fn q(&self, sa: &DenseArray, noise_set: &[f64], n_quantiles: usize) -> Result<Vec<f64>> {
        match self {
            Self::Flow(c) => crate::critic::q_estimate(c, sa, noise_set),
            Self::Categorical(c) => c.q(sa),
            Self::Quantile(c) => c.q(sa, n_quantiles),
        }
    }

    pub fn as_ref(&self, steps: usize) -> CriticRef<'_> {
        match self {
            Self::Flow(field) => CriticRef::Flow { field, steps },
            Self::Categorical(c) => CriticRef::Categorical(c),
            Self::Quantile(c) => CriticRef::Quantile(c),
        }
    }
}

/// Progress of an online run that a checkpoint must carry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineState {
    pub replay: ReplayBuffer,
    pub state: State,
    pub episode_step: usize,
    pub episode_return: f64,
    pub last_episode_return: Option<f64>,
}

/// Everything a run produces and needs to resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub env: String,
    pub config: TrainConfig,
    pub offline_step: usize,
    pub online_step: usize,
    pub critics: Vec<CriticNet>,
    pub targets: Vec<CriticNet>,
    pub critic_opt: Vec<OptState>,
    pub bc: BcFlowPolicy,
    pub bc_opt: OptState,
    pub one_step: Option<OneStepPolicy>,
    pub one_step_opt: Option<OptState>,
    pub online: Option<OnlineState>,
}

const INIT: u64 = 0;
const OFFLINE: u64 = 1;
const WARMSTART: u64 = 2;
const ONLINE: u64 = 3;

/// Independent stream for one iteration of one phase.
pub fn step_rng(seed: u64, phase: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((phase << 56) | step);
    rng
}

impl Artifacts {
    /// Freshly initialized networks for `env`.
    pub fn init(cfg: &TrainConfig, env: &dyn Env) -> Result<Self> {
        cfg.validate()?;
        let ccfg = cfg.critic_config(env)?;
        let (sd, ad) = (env.state_dim(), env.action_dim());
        let mut rng = step_rng(cfg.seed, INIT, 0);
        let critics: Vec<CriticNet> = (0..cfg.ensemble_size)
            .map(|_| {
                Ok(match cfg.critic {
                    CriticKind::Flow => CriticNet::Flow(ReturnField::new(sd, ad, &cfg.critic_hidden, &mut rng)),
                    CriticKind::Categorical => {
                        let support = atom_support(ccfg.z_lo, ccfg.z_hi, cfg.n_atoms)?;
                        CriticNet::Categorical(CategoricalCritic::new(sd, ad, &cfg.critic_hidden, support, &mut rng))
                    }
                    CriticKind::Quantile => {
                        CriticNet::Quantile(QuantileCritic::new(sd, ad, &cfg.critic_hidden, &mut rng))
                    }
                })
            })
            .collect::<Result<_>>()?;
        let bc = BcFlowPolicy::new(sd, ad, &cfg.actor_hidden, &mut rng);
        Ok(Self {
            env: env.id().to_string(),
            config: cfg.clone(),
            offline_step: 0,
            online_step: 0,
            critic_opt: critics.iter().map(|c| OptState::new(c.params())).collect(),
            targets: critics.clone(),
            critics,
            bc_opt: OptState::new(&bc.params),
            bc,
            one_step: None,
            one_step_opt: None,
            online: None,
        })
    }

    /// Swaps in a new config; the network shapes must stay the same.
    pub fn reconfigure(&mut self, cfg: TrainConfig) -> Result<()> {
        cfg.validate()?;
        if !cfg.same_architecture(&self.config) {
            return Err(Error::Config("config changes the network architecture of the checkpoint".into()));
        }
        self.config = cfg;
        Ok(())
    }

    pub fn make_env(&self) -> Result<Box<dyn Env>> {
        make_env(&self.env)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        crate::error::write_file(&tmp, &serde_json::to_string(self)?)?;
        std::fs::rename(&tmp, path).map_err(|e| crate::error::with_path(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a: Self = serde_json::from_str(&crate::error::read_file(path)?)?;
        a.config.validate()?;
        Ok(a)
    }

    pub fn flow_critics(&self) -> Option<Vec<&ReturnField>> {
        self.critics
            .iter()
            .map(|c| match c {
                CriticNet::Flow(f) => Some(f),
                _ => None,
            })
            .collect()
    }

    /// Ensemble-minimum Q of the online critics.
    pub fn ensemble_q(&self, sa: &DenseArray, noise_set: &[f64]) -> Result<Vec<f64>> {
        let mut best: Option<Vec<f64>> = None;
        for c in &self.critics {
            let q = c.q(sa, noise_set, self.config.n_quantiles)?;
            best = Some(match best {
                None => q,
                Some(b) => b.into_iter().zip(q).map(|(x, y)| x.min(y)).collect(),
            });
        }
        best.ok_or_else(|| Error::Contract("empty critic ensemble".into()))
    }

    /// Rejection-sampled actions from the BC policy scored by the critics.
    pub fn offline_actions(&self, s: &DenseArray, env: &dyn Env, rng: &mut dyn RngCore) -> Result<DenseArray> {
        let noise_set: Vec<f64> = (0..self.config.q_eval_noises).map(|_| rng.sample(StandardNormal)).collect();
        let q = |sa: &DenseArray| self.ensemble_q(sa, &noise_set);
        let snap = env.discrete_actions().is_some().then_some(env);
        rejection_sample_with(&q, &self.bc, s, self.config.n_candidates, self.config.flow_steps, snap, rng)
    }

    /// One-step policy actions; falls back to rejection sampling before
    /// fine-tuning.
    pub fn online_actions(&self, s: &DenseArray, env: &dyn Env, rng: &mut dyn RngCore) -> Result<DenseArray> {
        match &self.one_step {
            Some(p) => one_step_next_actions(p, s, Some(env), rng),
            None => self.offline_actions(s, env, rng),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: String,
    pub step: usize,
    pub critic_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dcfm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bcfm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_abs_flow_derivative: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub q_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bc_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub policy_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub episode_return: Option<f64>,
}

impl MetricRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Receives metrics and periodic checkpoints while a run progresses.
pub trait TrainObserver {
    fn metric(&mut self, _record: &MetricRecord) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _artifacts: &Artifacts) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Appends metrics to a JSON-lines file and overwrites a checkpoint file.
pub struct FileObserver {
    metrics: Option<BufWriter<File>>,
    checkpoint: Option<PathBuf>,
}

impl FileObserver {
    pub fn new(metrics: Option<&Path>, checkpoint: Option<&Path>) -> Result<Self> {
        let metrics = match metrics {
            Some(p) => Some(BufWriter::new(std::fs::OpenOptions::new().create(true).append(true).open(p).map_err(|e| crate::error::with_path(p, e))?)),
            None => None,
        };
        Ok(Self { metrics, checkpoint: checkpoint.map(Path::to_path_buf) })
    }
}

impl TrainObserver for FileObserver {
    fn metric(&mut self, record: &MetricRecord) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            writeln!(w, "{}", record.to_json_line()?)?;
            w.flush()?;
        }
        Ok(())
    }

    fn checkpoint(&mut self, artifacts: &Artifacts) -> Result<()> {
        match &self.checkpoint {
            Some(p) => artifacts.save(p),
            None => Ok(()),
        }
    }
}

/// Result of a run. On divergence `artifacts` is the state before the
/// failing iteration.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub artifacts: Artifacts,
    pub metrics: Vec<MetricRecord>,
    pub divergence: Option<String>,
}

struct CriticStep {
    loss: f64,
    flow: Option<CriticDiagnostics>,
}

fn average(xs: &[CriticStep]) -> MetricRecord {
    let n = xs.len() as f64;
    let mean = |f: &dyn Fn(&CriticStep) -> Option<f64>| -> Option<f64> {
        xs.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
    };
    MetricRecord {
        critic_loss: xs.iter().map(|x| x.loss).sum::<f64>() / n,
        dcfm: mean(&|x| x.flow.as_ref().map(|d| d.dcfm)),
        bcfm: mean(&|x| x.flow.as_ref().map(|d| d.bcfm)),
        mean_weight: mean(&|x| x.flow.as_ref().map(|d| d.mean_weight)),
        mean_abs_flow_derivative: mean(&|x| x.flow.as_ref().map(|d| d.mean_abs_flow_derivative)),
        q_mean: mean(&|x| x.flow.as_ref().map(|d| d.q_mean)),
        ..MetricRecord::default()
    }
}

fn apply(params: &mut ParamSet, mut grads: ParamSet, opt: &mut OptState, cfg: &TrainConfig) -> Result<()> {
    if let Some(c) = cfg.grad_clip {
        clip_global_norm(&mut grads, c);
    }
    adam_step(params, &grads, opt, cfg.lr, &cfg.adam())
}

/// Weights and critic update for every ensemble member: each member draws
/// its own times and noises, all share `a_next`.
fn critic_update(
    art: &mut Artifacts,
    ccfg: &CriticConfig,
    batch: &CriticBatch,
    a_next: &DenseArray,
    rng: &mut dyn RngCore,
) -> Result<Vec<CriticStep>> {
    let cfg = art.config.clone();
    let mut grads = Vec::with_capacity(art.critics.len());
    let mut steps = Vec::with_capacity(art.critics.len());
    for (online, target) in art.critics.iter().zip(&art.targets) {
        let (g, step) = match (online, target) {
            (CriticNet::Flow(on), CriticNet::Flow(tg)) => {
                let draws = LossDraws::with_actions(batch.len(), a_next.clone(), rng)?;
                let (g, d) = value_flow_loss(on, tg, batch, &draws, ccfg)?;
                (g, CriticStep { loss: d.loss, flow: Some(d) })
            }
            (CriticNet::Categorical(on), CriticNet::Categorical(tg)) => {
                let (l, g) = c51_loss(on, tg, batch, a_next, ccfg.gamma)?;
                (g, CriticStep { loss: l, flow: None })
            }
            (CriticNet::Quantile(on), CriticNet::Quantile(tg)) => {
                let draws = QuantileDraws::sample(batch.len(), cfg.n_quantiles, cfg.n_target_quantiles, rng);
                let (l, g) = quantile_huber_loss(on, tg, batch, a_next, &draws, ccfg.gamma, cfg.kappa)?;
                (g, CriticStep { loss: l, flow: None })
            }
            _ => return Err(Error::Contract("online and target critics differ in kind".into())),
        };
        if !step.loss.is_finite() {
            return Err(Error::Training(format!("critic loss is {}", step.loss)));
        }
        grads.push(g);
        steps.push(step);
    }
    for ((c, g), opt) in art.critics.iter_mut().zip(grads).zip(art.critic_opt.iter_mut()) {
        apply(c.params_mut(), g, opt, &cfg)?;
    }
    Ok(steps)
}

fn ema_targets(art: &mut Artifacts) -> Result<()> {
    for (t, o) in art.targets.iter_mut().zip(&art.critics) {
        let next = ema_update(t.params(), o.params(), art.config.ema_rate)?;
        *t.params_mut() = next;
    }
    Ok(())
}

fn snap_env(env: &dyn Env) -> Option<&dyn Env> {
    env.discrete_actions().is_some().then_some(env)
}

/// One offline iteration: batch, weights and critic step, BC step, EMA.
fn offline_iteration(art: &mut Artifacts, env: &dyn Env, dataset: &Dataset, step: usize) -> Result<MetricRecord> {
    let ccfg = art.config.critic_config(env)?;
    let mut rng = step_rng(art.config.seed, OFFLINE, step as u64);
    let batch = sample_batch(dataset, art.config.batch_size, &mut rng)?;
    let a_next = bc_next_actions(&art.bc, &batch.s_next, art.config.flow_steps, snap_env(env), &mut rng)?;
    let steps = critic_update(art, &ccfg, &batch, &a_next, &mut rng)?;
    let (bc_loss, g) = bc_flow_loss_sampled(&art.bc, &batch.s, &batch.a, &mut rng)?;
    if !bc_loss.is_finite() {
        return Err(Error::Training(format!("BC flow loss is {bc_loss}")));
    }
    let cfg = art.config.clone();
    apply(&mut art.bc.params, g, &mut art.bc_opt, &cfg)?;
    ema_targets(art)?;
    Ok(MetricRecord { phase: "offline".into(), step: step + 1, bc_loss: Some(bc_loss), ..average(&steps) })
}

/// Runs one iteration on a copy so a failure leaves `art` untouched.
fn guarded<F>(art: &mut Artifacts, f: F) -> Result<std::result::Result<MetricRecord, String>>
where
    F: FnOnce(&mut Artifacts) -> Result<MetricRecord>,
{
    let mut next = art.clone();
    match f(&mut next) {
        Ok(rec) => {
            *art = next;
            Ok(Ok(rec))
        }
        Err(Error::Training(msg)) => Ok(Err(msg)),
        Err(e) => Err(e),
    }
}

fn log_due(step: usize, interval: usize, last: usize) -> bool {
    step % interval == 0 || step == last
}

/// Fresh artifacts trained for `cfg.offline_steps` iterations on `dataset`.
pub fn train_offline(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainRun> {
    train_offline_observed(cfg, dataset, &mut ())
}

pub fn train_offline_observed(cfg: &TrainConfig, dataset: &Dataset, observer: &mut dyn TrainObserver) -> Result<TrainRun> {
    let env = make_env(&dataset.meta.env)?;
    let art = Artifacts::init(cfg, env.as_ref())?;
    continue_offline(art, dataset, observer)
}

/// Trains until `artifacts.offline_step` reaches `config.offline_steps`.
pub fn continue_offline(mut art: Artifacts, dataset: &Dataset, observer: &mut dyn TrainObserver) -> Result<TrainRun> {
    if dataset.is_empty() {
        return Err(Error::Contract("dataset is empty".into()));
    }
    if dataset.meta.env != art.env {
        return Err(Error::Config(format!("dataset is from {}, artifacts from {}", dataset.meta.env, art.env)));
    }
    let env = art.make_env()?;
    if dataset.meta.state_dim != env.state_dim() || dataset.meta.action_dim != env.action_dim() {
        return Err(Error::Contract("dataset dimensions do not match the env".into()));
    }
    let total = art.config.offline_steps;
    let mut metrics = Vec::new();
    while art.offline_step < total {
        let step = art.offline_step;
        let out = guarded(&mut art, |a| {
            let rec = offline_iteration(a, env.as_ref(), dataset, step)?;
            a.offline_step += 1;
            Ok(rec)
        })?;
        let rec = match out {
            Ok(rec) => rec,
            Err(msg) => {
                let msg = format!("offline step {}: {msg}", step + 1);
                observer.checkpoint(&art)?;
                return Ok(TrainRun { artifacts: art, metrics, divergence: Some(msg) });
            }
        };
        if log_due(rec.step, art.config.log_interval, total) {
            observer.metric(&rec)?;
            metrics.push(rec);
        }
        let ci = art.config.checkpoint_interval;
        if ci > 0 && art.offline_step % ci == 0 {
            observer.checkpoint(&art)?;
        }
    }
    Ok(TrainRun { artifacts: art, metrics, divergence: None })
}

fn states_of(dataset: &Dataset, idx: &[usize]) -> Result<DenseArray> {
    DenseArray::from_rows(&idx.iter().map(|&i| dataset.transitions[i].s.clone()).collect::<Vec<_>>())
}

/// Initializes the one-step policy and distils the BC policy into it.
fn warm_start(art: &mut Artifacts, dataset: &Dataset) -> Result<()> {
    let cfg = art.config.clone();
    let mut rng = step_rng(cfg.seed, WARMSTART, 0);
    let policy = OneStepPolicy::new(dataset.meta.state_dim, dataset.meta.action_dim, &cfg.actor_hidden, &mut rng);
    let mut opt = OptState::new(&policy.params);
    let mut policy = policy;
    let flows: Vec<ReturnField> = Vec::new();
    for i in 0..cfg.warmstart_steps {
        let mut rng = step_rng(cfg.seed, WARMSTART, i as u64 + 1);
        let s = states_of(dataset, &sample_indices(dataset, cfg.batch_size, &mut rng)?)?;
        let draws = OneStepDraws::sample(s.rows(), policy.action_dim(), cfg.q_noises, &mut rng);
        let (g, _) = one_step_policy_loss(&policy, &art.bc, &flows, &s, &draws, 1.0, cfg.flow_steps, false)?;
        apply(&mut policy.params, g, &mut opt, &cfg)?;
    }
    art.one_step = Some(policy);
    art.one_step_opt = Some(OptState::new(&art.one_step.as_ref().expect("set").params));
    Ok(())
}

/// Env step with the one-step policy; returns what is needed to undo it.
fn env_step(
    policy: &OneStepPolicy,
    online: &mut OnlineState,
    env: &dyn Env,
    gamma: f64,
    episode_cap: usize,
    rng: &mut dyn RngCore,
) -> Result<(OnlineState, Option<Transition>)> {
    let s_enc = env.encode(online.state);
    let a = one_step_next_actions(policy, &DenseArray::row(s_enc.clone()), snap_env(env), rng)?;
    let a = env.snap_action(a.row_slice(0));
    let res = env.step(online.state, &a, rng)?;
    let before = online.clone_progress();
    let displaced = online.replay.push(Transition {
        s: s_enc,
        a,
        r: res.reward,
        s_next: env.encode(res.next),
        terminal: res.terminal,
    });
    online.episode_return += gamma.powi(online.episode_step as i32) * res.reward;
    online.episode_step += 1;
    online.state = res.next;
    if res.terminal || online.episode_step >= episode_cap {
        online.last_episode_return = Some(online.episode_return);
        online.state = env.start_state();
        online.episode_step = 0;
        online.episode_return = 0.0;
    }
    Ok((before, displaced))
}

impl OnlineState {
    fn clone_progress(&self) -> OnlineState {
        OnlineState {
            replay: ReplayBuffer { capacity: 1, items: Vec::new(), inserted: 0 },
            state: self.state,
            episode_step: self.episode_step,
            episode_return: self.episode_return,
            last_episode_return: self.last_episode_return,
        }
    }

    fn restore_progress(&mut self, before: OnlineState) {
        self.state = before.state;
        self.episode_step = before.episode_step;
        self.episode_return = before.episode_return;
        self.last_episode_return = before.last_episode_return;
    }
}

/// One online iteration: an env step with the one-step policy, then
/// `updates_per_step` rounds of weights and critic step, one-step policy
/// step, EMA.
fn online_iteration(
    art: &mut Artifacts,
    online: &mut OnlineState,
    env: &dyn Env,
    step: usize,
) -> Result<MetricRecord> {
    let cfg = art.config.clone();
    let ccfg = cfg.critic_config(env)?;
    let mut rng = step_rng(cfg.seed, ONLINE, step as u64);
    let policy = art.one_step.as_ref().ok_or_else(|| Error::Contract("missing one-step policy".into()))?;
    let (before, displaced) = env_step(policy, online, env, ccfg.gamma, cfg.episode_cap, &mut rng)?;
    let updated = (|| {
        let mut rec = MetricRecord::default();
        for _ in 0..cfg.updates_per_step {
            let batch = sample_batch(&online.replay, cfg.batch_size, &mut rng)?;
            let policy = art.one_step.as_ref().expect("checked");
            let a_next = one_step_next_actions(policy, &batch.s_next, snap_env(env), &mut rng)?;
            let steps = critic_update(art, &ccfg, &batch, &a_next, &mut rng)?;
            let flows: Vec<ReturnField> = art
                .flow_critics()
                .ok_or_else(|| Error::Config("online fine-tuning needs the flow critic".into()))?
                .into_iter()
                .cloned()
                .collect();
            let policy = art.one_step.as_mut().expect("checked");
            let draws = OneStepDraws::sample(batch.len(), policy.action_dim(), cfg.q_noises, &mut rng);
            let (g, d) =
                one_step_policy_loss(policy, &art.bc, &flows, &batch.s, &draws, cfg.alpha, cfg.flow_steps, true)?;
            apply(&mut policy.params, g, art.one_step_opt.as_mut().expect("set with policy"), &cfg)?;
            ema_targets(art)?;
            rec = MetricRecord { policy_loss: Some(d.loss), ..average(&steps) };
        }
        Ok(rec)
    })();
    match updated {
        Ok(mut rec) => {
            rec.phase = "online".into();
            rec.step = step + 1;
            rec.episode_return = online.last_episode_return;
            Ok(rec)
        }
        Err(e) => {
            online.replay.undo_push(displaced);
            online.restore_progress(before);
            Err(e)
        }
    }
}

/// Offline-to-online fine-tuning for `cfg.online_steps` env steps. The BC
/// policy stays frozen; replay starts as the offline dataset.
pub fn finetune_online(
    cfg: &TrainConfig,
    offline: Artifacts,
    env: &dyn Env,
    dataset: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<TrainRun> {
    cfg.validate()?;
    if !cfg.same_architecture(&offline.config) {
        return Err(Error::Config("fine-tuning config changes the network architecture".into()));
    }
    if env.id() != offline.env {
        return Err(Error::Config(format!("artifacts are for {}, not {}", offline.env, env.id())));
    }
    if cfg.critic != CriticKind::Flow {
        return Err(Error::Config("online fine-tuning needs the flow critic".into()));
    }
    if cfg.online_steps == 0 {
        return Ok(TrainRun { artifacts: offline, metrics: Vec::new(), divergence: None });
    }
    let mut art = offline;
    art.config = cfg.clone();
    if art.one_step.is_none() {
        warm_start(&mut art, dataset)?;
    }
    if art.online.is_none() {
        art.online = Some(OnlineState {
            replay: ReplayBuffer::from_dataset(dataset, cfg.replay_capacity)?,
            state: env.start_state(),
            episode_step: 0,
            episode_return: 0.0,
            last_episode_return: None,
        });
    }
    let total = cfg.online_steps;
    let mut metrics = Vec::new();
    // kept outside the artifacts so the per-iteration copy skips the replay
    let mut online = art.online.take().expect("set above");
    while art.online_step < total {
        let step = art.online_step;
        let out = guarded(&mut art, |a| {
            let rec = online_iteration(a, &mut online, env, step)?;
            a.online_step += 1;
            Ok(rec)
        });
        let rec = match out {
            Ok(Ok(rec)) => rec,
            Ok(Err(msg)) => {
                art.online = Some(online);
                let msg = format!("online step {}: {msg}", step + 1);
                observer.checkpoint(&art)?;
                return Ok(TrainRun { artifacts: art, metrics, divergence: Some(msg) });
            }
            Err(e) => return Err(e),
        };
        if log_due(rec.step, cfg.log_interval, total) {
            observer.metric(&rec)?;
            metrics.push(rec);
        }
        if cfg.checkpoint_interval > 0 && art.online_step % cfg.checkpoint_interval == 0 {
            art.online = Some(online);
            observer.checkpoint(&art)?;
            online = art.online.take().expect("just set");
        }
    }
    art.online = Some(online);
    Ok(TrainRun { artifacts: art, metrics, divergence: None })
}

/// `(s, a)` input row for an env state and action.
pub fn encode_pair(env: &dyn Env, s: State, a: &[f64]) -> Result<DenseArray> {
    state_action(&DenseArray::row(env.encode(s)), &DenseArray::row(a.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_dataset, StochasticChain, UniformPolicy};

    fn tiny(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            critic_hidden: vec![8],
            actor_hidden: vec![8],
            batch_size: 16,
            offline_steps: 6,
            log_interval: 2,
            online_steps: 4,
            warmstart_steps: 3,
            ..TrainConfig::default()
        }
    }

    fn chain_data() -> Dataset {
        let env = StochasticChain::default();
        generate_dataset(&env, &UniformPolicy::new(&env), 200, 3, 20).unwrap()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.batch_size, cfg.lr, cfg.flow_steps, cfg.n_candidates), (256, 3e-4, 10, 16));
        assert_eq!((cfg.ema_rate, cfg.ensemble_size), (5e-3, 2));
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("lambda = 10.0\ncritic = \"quantile\"\n").unwrap();
        assert_eq!((partial.lambda, partial.critic, partial.batch_size), (10.0, CriticKind::Quantile, 256));
        assert!(matches!(TrainConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml("batch_size = 0"), Err(Error::Config(_))));
    }

    #[test]
    fn replay_is_a_ring() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        let t = |r: f64| Transition { s: vec![0.0], a: vec![0.0], r, s_next: vec![0.0], terminal: false };
        for i in 0..7 {
            buf.push(t(i as f64));
            assert!(buf.len() <= 3);
        }
        let mut rs: Vec<f64> = (0..3).map(|i| buf.get(i).r).collect();
        rs.sort_by(f64::total_cmp);
        assert_eq!(rs, vec![4.0, 5.0, 6.0]);
        assert_eq!(buf.inserted(), 7);
        assert!(matches!(ReplayBuffer::from_dataset(&chain_data(), 10), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_contracts() {
        let mut data = chain_data();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = sample_indices(&data, 5, &mut rng).unwrap();
        let b = sample_indices(&data, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a, b);
        data.transitions.truncate(1);
        let batch = sample_batch(&data, 4, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        assert!(batch.r.iter().all(|r| *r == data.transitions[0].r));
        data.transitions.clear();
        assert!(matches!(sample_batch(&data, 4, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_steps_is_identity() {
        let data = chain_data();
        let cfg = TrainConfig { offline_steps: 0, ..tiny(1) };
        let run = train_offline(&cfg, &data).unwrap();
        let env = StochasticChain::default();
        assert_eq!(run.artifacts, Artifacts::init(&cfg, &env).unwrap());
        assert!(run.metrics.is_empty());
        let cfg0 = TrainConfig { online_steps: 0, ..cfg };
        let again = finetune_online(&cfg0, run.artifacts.clone(), &env, &data, &mut ()).unwrap();
        assert_eq!(again.artifacts, run.artifacts);
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let data = chain_data();
        let env = StochasticChain::default();
        let cfg = tiny(7);
        let a = train_offline(&cfg, &data).unwrap();
        let b = train_offline(&cfg, &data).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 3);
        assert!(a.divergence.is_none());
        assert!(a.artifacts.targets != a.artifacts.critics);

        let half = train_offline(&TrainConfig { offline_steps: 3, ..cfg.clone() }, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        half.artifacts.save(&path).unwrap();
        let mut loaded = Artifacts::load(&path).unwrap();
        assert_eq!(loaded, half.artifacts);
        loaded.config.offline_steps = 6;
        let rest = continue_offline(loaded, &data, &mut ()).unwrap();
        assert_eq!(rest.artifacts, a.artifacts);
        assert_eq!(rest.metrics.last(), a.metrics.last());

        let on1 = finetune_online(&cfg, a.artifacts.clone(), &env, &data, &mut ()).unwrap();
        let on2 = finetune_online(&cfg, a.artifacts.clone(), &env, &data, &mut ()).unwrap();
        assert_eq!(on1.metrics, on2.metrics);
        assert_eq!(on1.artifacts.bc, a.artifacts.bc);
        let replay = &on1.artifacts.online.as_ref().unwrap().replay;
        assert_eq!(replay.len(), data.len() + 4);
    }

    #[test]
    fn baseline_critics_train() {
        let data = chain_data();
        for kind in [CriticKind::Categorical, CriticKind::Quantile] {
            let run = train_offline(&TrainConfig { critic: kind, ..tiny(2) }, &data).unwrap();
            assert!(run.metrics.iter().all(|m| m.critic_loss.is_finite() && m.dcfm.is_none()));
        }
    }

    #[test]
    fn divergence_keeps_last_good_state() {
        let mut data = chain_data();
        for t in data.transitions.iter_mut().skip(1) {
            t.r = f64::NAN;
        }
        let cfg = tiny(3);
        let run = train_offline(&cfg, &data).unwrap();
        let msg = run.divergence.expect("NaN rewards diverge");
        assert!(msg.starts_with("offline step "), "{msg}");
        let done = run.artifacts.offline_step;
        assert!(done < cfg.offline_steps);
        let mut clean = train_offline(&TrainConfig { offline_steps: done, ..cfg }, &data).unwrap();
        assert!(clean.divergence.take().is_none());
        assert_eq!(clean.artifacts.critics, run.artifacts.critics);
    }
}
