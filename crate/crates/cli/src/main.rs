use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use value_flows::baselines::critic_histogram;
use value_flows::diffcore::DenseArray;
use value_flows::envs::{generate_dataset, make_env, ActionPolicy, Dataset, Env, FixedPolicy, State, UniformPolicy};
use value_flows::eval::{compare_to_oracle, compare_to_rollouts, evaluate_policy, EvalReport, W1Entry};
use value_flows::trainer::{
    continue_offline, finetune_online, Artifacts, FileObserver, TrainConfig, TrainRun,
};
use value_flows::{Error, Result};

#[derive(Parser)]
#[command(name = "valueflows", version, about = "Flow-matching return-distribution critics on toy MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a behavior policy and write a dataset.
    GenData(GenData),
    /// Train critics and the BC policy on a dataset.
    TrainOffline(TrainOffline),
    /// Fine-tune offline artifacts with online interaction.
    FinetuneOnline(FinetuneOnline),
    /// Mean and std of discounted returns of a trained policy.
    EvalPolicy(EvalPolicy),
    /// W1 between the critic's return histogram and reference returns.
    EvalDist(EvalDist),
    /// Write the critic's return histogram at one state-action pair as CSV.
    DumpHist(DumpHist),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    env: String,
    /// `uniform`, or `fixed:<a1,a2,...>`.
    #[arg(long, default_value = "uniform")]
    behavior: String,
    #[arg(long, default_value_t = 10_000)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    episode_cap: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Every `TrainConfig` key as an optional flag; set flags override the
/// config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML file with `TrainConfig` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// flow, categorical or quantile.
    #[arg(long)]
    critic: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    flow_steps: Option<usize>,
    #[arg(long)]
    ensemble_size: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    z_lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    z_hi: Option<f64>,
    #[arg(long)]
    clip_returns: Option<bool>,
    #[arg(long)]
    n_atoms: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    n_quantiles: Option<usize>,
    #[arg(long)]
    n_target_quantiles: Option<usize>,
    /// Comma-separated widths.
    #[arg(long, value_delimiter = ',')]
    critic_hidden: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    actor_hidden: Option<Vec<usize>>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    ema_rate: Option<f64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    offline_steps: Option<usize>,
    #[arg(long)]
    log_interval: Option<usize>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    n_candidates: Option<usize>,
    #[arg(long)]
    q_eval_noises: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    q_noises: Option<usize>,
    #[arg(long)]
    online_steps: Option<usize>,
    #[arg(long)]
    warmstart_steps: Option<usize>,
    #[arg(long)]
    updates_per_step: Option<usize>,
    #[arg(long)]
    replay_capacity: Option<usize>,
    #[arg(long)]
    episode_cap: Option<usize>,
}

macro_rules! overrides {
    ($args:expr, $map:expr; $($field:ident),* $(,)?) => {
        $(
            if let Some(v) = &$args.$field {
                $map.insert(stringify!($field).to_string(), serde_json::to_value(v)?);
            }
        )*
    };
}

impl ConfigArgs {
    /// `base`, then keys from the config file, then flags.
    fn resolve(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut json = serde_json::to_value(&base)?;
        let map = json.as_object_mut().expect("struct serializes to an object");
        if let Some(p) = &self.config {
            let table: toml::Table =
                std::fs::read_to_string(p)?.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            for (k, v) in table {
                map.insert(k, serde_json::to_value(v)?);
            }
        }
        overrides!(self, map;
            seed, critic, gamma, lambda, tau, flow_steps, ensemble_size, z_lo, z_hi, clip_returns,
            n_atoms, kappa, n_quantiles, n_target_quantiles, critic_hidden, actor_hidden, batch_size,
            lr, ema_rate, adam_beta1, adam_beta2, adam_eps, grad_clip, offline_steps, log_interval,
            checkpoint_interval, n_candidates, q_eval_noises, alpha, q_noises, online_steps,
            warmstart_steps, updates_per_step, replay_capacity, episode_cap,
        );
        let cfg: TrainConfig = serde_json::from_value(json).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainOffline {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written at the end (and at checkpoint intervals).
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines metrics file (appended).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct FinetuneOnline {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Offline dataset that seeds the replay buffer.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Rejection sampling from the BC policy.
    Offline,
    /// The one-step policy.
    Online,
}

#[derive(Args)]
struct EvalPolicy {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "offline")]
    mode: Mode,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 100)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    state: State,
    /// Comma-separated action.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    action: Vec<f64>,
    /// Ensemble member to read.
    #[arg(long, default_value_t = 0)]
    member: usize,
    #[arg(long, default_value_t = 5000)]
    samples: usize,
    #[arg(long, default_value_t = 60)]
    bins: usize,
    /// Histogram range; the env's return range when absent.
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalDist {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long, value_enum, default_value = "offline")]
    mode: Mode,
    /// Rollout and enumeration horizon.
    #[arg(long, default_value_t = 50)]
    horizon: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpHist {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainOffline(a) => train_offline(a),
        Command::FinetuneOnline(a) => finetune(a),
        Command::EvalPolicy(a) => eval_policy(a),
        Command::EvalDist(a) => eval_dist(a),
        Command::DumpHist(a) => dump_hist(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Training(_) | Error::Integration { .. } => 2,
        Error::Io(_) => 3,
        _ => 1,
    }
}

fn behavior(env: &dyn Env, spec: &str) -> Result<Box<dyn ActionPolicy>> {
    if spec == "uniform" {
        return Ok(Box::new(UniformPolicy::new(env)));
    }
    let Some(rest) = spec.strip_prefix("fixed:") else {
        return Err(Error::Config(format!("unknown behavior {spec:?}; expected uniform or fixed:<action>")));
    };
    let action = rest
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad action {v:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    env.check_action(&action)?;
    Ok(Box::new(FixedPolicy::new(env, action)))
}

fn gen_data(a: GenData) -> Result<()> {
    let env = make_env(&a.env)?;
    let pi = behavior(env.as_ref(), &a.behavior)?;
    let mut data = generate_dataset(env.as_ref(), pi.as_ref(), a.size, a.seed, a.episode_cap)?;
    data.meta.behavior = a.behavior;
    data.save(&a.out)?;
    println!("wrote {} transitions to {}", data.len(), a.out.display());
    Ok(())
}

fn finish(run: TrainRun, out: &Path) -> Result<()> {
    run.artifacts.save(out)?;
    if let Some(last) = run.metrics.last() {
        println!("{}", last.to_json_line()?);
    }
    match run.divergence {
        Some(msg) => Err(Error::Training(format!("{msg}; last good state saved to {}", out.display()))),
        None => {
            println!("saved {}", out.display());
            Ok(())
        }
    }
}

fn train_offline(a: TrainOffline) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let mut observer = FileObserver::new(a.metrics.as_deref(), Some(&a.out))?;
    let art = match &a.resume {
        Some(p) => {
            let mut art = Artifacts::load(p)?;
            let cfg = a.config.resolve(art.config.clone())?;
            art.reconfigure(cfg)?;
            art
        }
        None => {
            let cfg = a.config.resolve(TrainConfig::default())?;
            let env = make_env(&data.meta.env)?;
            Artifacts::init(&cfg, env.as_ref())?
        }
    };
    finish(continue_offline(art, &data, &mut observer)?, &a.out)
}

fn finetune(a: FinetuneOnline) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let art = Artifacts::load(&a.checkpoint)?;
    let cfg = a.config.resolve(art.config.clone())?;
    let env = art.make_env()?;
    let mut observer = FileObserver::new(a.metrics.as_deref(), Some(&a.out))?;
    finish(finetune_online(&cfg, art, env.as_ref(), &data, &mut observer)?, &a.out)
}

fn selector<'a>(
    art: &'a Artifacts,
    env: &'a dyn Env,
    mode: Mode,
) -> impl FnMut(State, &mut dyn RngCore) -> Result<Vec<f64>> + 'a {
    move |s, rng| {
        let row = DenseArray::row(env.encode(s));
        let a = match mode {
            Mode::Offline => art.offline_actions(&row, env, rng)?,
            Mode::Online => art.online_actions(&row, env, rng)?,
        };
        Ok(a.row_slice(0).to_vec())
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn eval_policy(a: EvalPolicy) -> Result<()> {
    let t0 = Instant::now();
    let art = Artifacts::load(&a.checkpoint)?;
    let env = art.make_env()?;
    let mut select = selector(&art, env.as_ref(), a.mode);
    let stats = evaluate_policy(env.as_ref(), &mut select, a.episodes, a.horizon, a.seed)?;
    let report = EvalReport {
        env: art.env.clone(),
        w1: Vec::new(),
        policy: Some(stats),
        seeds: vec![art.config.seed, a.seed],
        runtime_secs: t0.elapsed().as_secs_f64(),
    };
    write_or_print(a.out.as_deref(), &serde_json::to_string_pretty(&report)?)
}

struct Pair {
    art: Artifacts,
    env: Box<dyn Env>,
    action: Vec<f64>,
    sa: Vec<f64>,
    range: (f64, f64),
}

fn load_pair(p: &PairArgs) -> Result<Pair> {
    let art = Artifacts::load(&p.checkpoint)?;
    let env = art.make_env()?;
    if p.state >= env.n_states() {
        return Err(Error::Contract(format!("state {} out of range for {}", p.state, env.id())));
    }
    if p.member >= art.critics.len() {
        return Err(Error::Contract(format!("ensemble has {} members", art.critics.len())));
    }
    let action = if p.action.is_empty() { vec![0.0; env.action_dim()] } else { p.action.clone() };
    env.check_action(&action)?;
    let action = env.snap_action(&action);
    let sa = env.encode(p.state).into_iter().chain(action.iter().copied()).collect();
    let ccfg = art.config.critic_config(env.as_ref())?;
    let range = (p.lo.unwrap_or(ccfg.z_lo), p.hi.unwrap_or(ccfg.z_hi));
    Ok(Pair { art, env, action, sa, range })
}

fn eval_dist(a: EvalDist) -> Result<()> {
    let t0 = Instant::now();
    let p = &a.pair;
    let pair = load_pair(p)?;
    let env = pair.env.as_ref();
    let critic = &pair.art.critics[p.member];
    let steps = pair.art.config.flow_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut entries = Vec::new();
    if env.discrete_actions().is_some() && env.outcomes(p.state, &pair.action).is_some() {
        let behavior = UniformPolicy::new(env);
        let c = compare_to_oracle(
            critic.as_ref(steps),
            env,
            &behavior,
            p.state,
            &pair.action,
            &pair.sa,
            p.samples,
            p.bins,
            pair.range,
            a.horizon,
            &mut rng,
        )?;
        eprintln!("oracle comparison: {} critic samples clipped", c.clipped);
        entries.push(W1Entry { state: p.state, action: pair.action.clone(), reference: "oracle-uniform".into(), w1: c.w1 });
    }
    let mut select = selector(&pair.art, env, a.mode);
    let c = compare_to_rollouts(
        critic.as_ref(steps),
        env,
        &mut select,
        p.state,
        &pair.action,
        &pair.sa,
        p.samples,
        p.bins,
        pair.range,
        a.horizon,
        &mut rng,
    )?;
    eprintln!("rollout comparison: {} critic samples clipped", c.clipped);
    let name = match a.mode {
        Mode::Offline => "rollouts-offline-policy",
        Mode::Online => "rollouts-online-policy",
    };
    entries.push(W1Entry { state: p.state, action: pair.action.clone(), reference: name.into(), w1: c.w1 });
    let report = EvalReport {
        env: pair.art.env.clone(),
        w1: entries,
        policy: None,
        seeds: vec![pair.art.config.seed, p.seed],
        runtime_secs: t0.elapsed().as_secs_f64(),
    };
    write_or_print(a.out.as_deref(), &serde_json::to_string_pretty(&report)?)
}

fn dump_hist(a: DumpHist) -> Result<()> {
    let p = &a.pair;
    let pair = load_pair(p)?;
    let critic = &pair.art.critics[p.member];
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (hist, clipped) =
        critic_histogram(critic.as_ref(pair.art.config.flow_steps), &pair.sa, p.samples, p.bins, pair.range, &mut rng)?;
    hist.write_csv(&a.out)?;
    println!("wrote {} bins to {} ({clipped} samples clipped)", hist.n_bins(), a.out.display());
    Ok(())
}
