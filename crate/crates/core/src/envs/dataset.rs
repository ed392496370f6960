use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionPolicy, Env};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// True only when the env terminated, never on truncation.
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub env: String,
    pub behavior: String,
    pub seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub transitions: Vec<Transition>,
}

const MAGIC: &str = "#valueflows-dataset";

/// Rolls out `behavior` from the start state until `n` transitions are
/// collected, restarting after termination or `episode_cap` steps.
pub fn generate_dataset(
    env: &dyn Env,
    behavior: &dyn ActionPolicy,
    n: usize,
    seed: u64,
    episode_cap: usize,
) -> Result<Dataset> {
    if n == 0 || episode_cap == 0 {
        return Err(Error::Contract("dataset size and episode cap must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(n);
    let mut s = env.start_state();
    let mut t = 0;
    while transitions.len() < n {
        let a = behavior.act(s, &mut rng);
        let step = env.step(s, &a, &mut rng)?;
        transitions.push(Transition {
            s: env.encode(s),
            a,
            r: step.reward,
            s_next: env.encode(step.next),
            terminal: step.terminal,
        });
        t += 1;
        if step.terminal || t >= episode_cap {
            s = env.start_state();
            t = 0;
        } else {
            s = step.next;
        }
    }
    let meta = DatasetMeta {
        env: env.id().to_string(),
        behavior: behavior.id(),
        seed,
        state_dim: env.state_dim(),
        action_dim: env.action_dim(),
    };
    Ok(Dataset { meta, transitions })
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_vec(field: &str, dim: usize, line: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = field
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| Error::Parse(format!("line {line}: {e}"))))
        .collect::<Result<_>>()?;
    if v.len() != dim {
        return Err(Error::Parse(format!("line {line}: expected {dim} values, found {}", v.len())));
    }
    Ok(v)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Header line followed by one `s|a|r|s_next|terminal` record per line.
    /// Reals are written in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mut out = format!(
            "{MAGIC} env={} behavior={} seed={} count={} state_dim={} action_dim={}\n",
            m.env,
            m.behavior,
            m.seed,
            self.transitions.len(),
            m.state_dim,
            m.action_dim
        );
        for t in &self.transitions {
            let _ = writeln!(out, "{}|{}|{:?}|{}|{}", join(&t.s), join(&t.a), t.r, join(&t.s_next), t.terminal);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty dataset file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(MAGIC) {
            return Err(Error::Parse(format!("missing {MAGIC} header")));
        }
        let mut get = std::collections::HashMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| Error::Parse(format!("bad header field {f:?}")))?;
            get.insert(k, v);
        }
        let field = |k: &str| get.get(k).copied().ok_or_else(|| Error::Parse(format!("header lacks {k}")));
        let num = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|e| Error::Parse(format!("{k}: {e}"))) };
        let meta = DatasetMeta {
            env: field("env")?.to_string(),
            behavior: field("behavior")?.to_string(),
            seed: num("seed")?,
            state_dim: num("state_dim")? as usize,
            action_dim: num("action_dim")? as usize,
        };
        let count = num("count")? as usize;
        let mut transitions = Vec::with_capacity(count);
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let n = i + 2;
            let parts: Vec<&str> = line.split('|').collect();
            if parts.len() != 5 {
                return Err(Error::Parse(format!("line {n}: expected 5 fields, found {}", parts.len())));
            }
            let terminal = match parts[4].trim() {
                "true" => true,
                "false" => false,
                other => return Err(Error::Parse(format!("line {n}: bad terminal flag {other:?}"))),
            };
            transitions.push(Transition {
                s: parse_vec(parts[0], meta.state_dim, n)?,
                a: parse_vec(parts[1], meta.action_dim, n)?,
                r: parts[2].trim().parse().map_err(|e| Error::Parse(format!("line {n}: {e}")))?,
                s_next: parse_vec(parts[3], meta.state_dim, n)?,
                terminal,
            });
        }
        if transitions.len() != count {
            return Err(Error::Parse(format!("header says {count} records, found {}", transitions.len())));
        }
        Ok(Self { meta, transitions })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::error::write_file(path, &self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&crate::error::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_env, UniformPolicy};

    #[test]
    fn single_transition_is_valid() {
        let env = make_env("stochastic-chain").unwrap();
        let d = generate_dataset(env.as_ref(), &UniformPolicy::new(env.as_ref()), 1, 0, 50).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.transitions[0].s, env.encode(0));
    }

    #[test]
    fn same_seed_same_data() {
        let env = make_env("windy-grid").unwrap();
        let pi = UniformPolicy::new(env.as_ref());
        let a = generate_dataset(env.as_ref(), &pi, 300, 7, 50).unwrap();
        let b = generate_dataset(env.as_ref(), &pi, 300, 7, 50).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset(env.as_ref(), &pi, 300, 8, 50).unwrap());
    }

    #[test]
    fn uniform_behavior_frequencies() {
        let env = make_env("stochastic-chain").unwrap();
        let d = generate_dataset(env.as_ref(), &UniformPolicy::new(env.as_ref()), 20_000, 3, 50).unwrap();
        let fwd = d.transitions.iter().filter(|t| t.a[0] > 0.0).count() as f64 / d.len() as f64;
        assert!((fwd - 0.5).abs() < 3.0 * (0.25 / d.len() as f64).sqrt());
    }

    #[test]
    fn truncation_is_not_terminal() {
        let env = make_env("loop-chain").unwrap();
        let d = generate_dataset(env.as_ref(), &UniformPolicy::new(env.as_ref()), 30, 0, 5).unwrap();
        assert!(d.transitions.iter().all(|t| !t.terminal));
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let env = make_env("continuous-bandit").unwrap();
        let mut d = generate_dataset(env.as_ref(), &UniformPolicy::new(env.as_ref()), 50, 1, 50).unwrap();
        d.transitions[0].r = -0.0;
        d.transitions[1].a[0] = 1e-310;
        d.transitions[2].r = 0.1 + 0.2;
        let back = Dataset::from_text(&d.to_text()).unwrap();
        assert_eq!(back.meta, d.meta);
        for (x, y) in back.transitions.iter().zip(&d.transitions) {
            assert_eq!(x.r.to_bits(), y.r.to_bits());
            assert_eq!(x.a[0].to_bits(), y.a[0].to_bits());
            assert_eq!(x.s, y.s);
            assert_eq!(x.terminal, y.terminal);
        }
    }

    #[test]
    fn malformed_lines_are_parse_errors() {
        let env = make_env("coin").unwrap();
        let d = generate_dataset(env.as_ref(), &UniformPolicy::new(env.as_ref()), 3, 1, 50).unwrap();
        let text = d.to_text().replace("|true", "|maybe").replace("|false", "|maybe");
        assert!(matches!(Dataset::from_text(&text), Err(Error::Parse(_))));
        assert!(matches!(Dataset::from_text("nonsense"), Err(Error::Parse(_))));
    }
}
