//! Flat `key = value` run configuration.
//!
//! A config file holds one assignment per line; `#` starts a comment. Keys
//! mirror the field names below. Values are resolved in this order, later
//! sources winning: built-in defaults, config file, the `PRDC_SEED`
//! environment variable, command-line overrides.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{Map, Value};

use crate::agents::{Algorithm, PrdcConfig};
use crate::error::{Error, Result};
use crate::lineworld::Variant;

pub const SEED_ENV_VAR: &str = "PRDC_SEED";

/// Every key a config may set, in manifest order.
pub const KEYS: &[&str] = &[
    "env_id",
    "dataset",
    "dataset_seed",
    "samples_per_state",
    "algorithm",
    "gamma",
    "tau",
    "policy_noise",
    "noise_clip",
    "policy_update_frequency",
    "batch_size",
    "actor_lr",
    "critic_lr",
    "action_bound",
    "hidden_width",
    "hidden_layers",
    "alpha",
    "beta",
    "k",
    "steps",
    "seed",
    "eval_interval",
    "eval_episodes",
    "probe_interval",
    "probe_states",
    "log_interval",
    "checkpoint_interval",
    "out",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env_id: String,
    /// Dataset file; `None` generates the dataset named by `env_id`.
    pub dataset: Option<PathBuf>,
    pub dataset_seed: u64,
    pub samples_per_state: usize,
    pub agent: PrdcConfig,
    pub steps: u64,
    pub seed: u64,
    /// Steps between evaluations; 0 evaluates only at the end.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Steps between value probes; 0 disables probing.
    pub probe_interval: u64,
    pub probe_states: usize,
    pub log_interval: u64,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env_id: Variant::Superhard.env_id(),
            dataset: None,
            dataset_seed: 0,
            samples_per_state: 100,
            agent: PrdcConfig::default(),
            steps: 1_000_000,
            seed: 0,
            eval_interval: 5000,
            eval_episodes: 10,
            probe_interval: 5000,
            probe_states: 10,
            log_interval: 1000,
            checkpoint_interval: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        let t = &mut self.agent.td3;
        match k {
            "env_id" => self.env_id = value.to_string(),
            "dataset" => {
                self.dataset = match value {
                    "" | "none" => None,
                    path => Some(PathBuf::from(path)),
                }
            }
            "dataset_seed" => self.dataset_seed = parse(k, value)?,
            "samples_per_state" => self.samples_per_state = parse(k, value)?,
            "algorithm" => self.agent.algorithm = value.parse::<Algorithm>().map_err(|e| Error::Config(format!("algorithm: {e}")))?,
            "gamma" => t.gamma = parse(k, value)?,
            "tau" => t.tau = parse(k, value)?,
            "policy_noise" => t.policy_noise = parse(k, value)?,
            "noise_clip" => t.noise_clip = parse(k, value)?,
            "policy_update_frequency" => t.policy_update_frequency = parse(k, value)?,
            "batch_size" => t.batch_size = parse(k, value)?,
            "actor_lr" => t.actor_lr = parse(k, value)?,
            "critic_lr" => t.critic_lr = parse(k, value)?,
            "action_bound" => t.action_bound = parse(k, value)?,
            "hidden_width" => t.hidden_width = parse(k, value)?,
            "hidden_layers" => t.hidden_layers = parse(k, value)?,
            "alpha" => self.agent.alpha = parse(k, value)?,
            "beta" => self.agent.beta = parse(k, value)?,
            "k" => self.agent.k = parse(k, value)?,
            "steps" => self.steps = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "eval_interval" => self.eval_interval = parse(k, value)?,
            "eval_episodes" => self.eval_episodes = parse(k, value)?,
            "probe_interval" => self.probe_interval = parse(k, value)?,
            "probe_states" => self.probe_states = parse(k, value)?,
            "log_interval" => self.log_interval = parse(k, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(k, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let t = &self.agent.td3;
        Ok(match key {
            "env_id" => self.env_id.clone(),
            "dataset" => self
                .dataset
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            "dataset_seed" => self.dataset_seed.to_string(),
            "samples_per_state" => self.samples_per_state.to_string(),
            "algorithm" => self.agent.algorithm.name().to_string(),
            "gamma" => t.gamma.to_string(),
            "tau" => t.tau.to_string(),
            "policy_noise" => t.policy_noise.to_string(),
            "noise_clip" => t.noise_clip.to_string(),
            "policy_update_frequency" => t.policy_update_frequency.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "actor_lr" => t.actor_lr.to_string(),
            "critic_lr" => t.critic_lr.to_string(),
            "action_bound" => t.action_bound.to_string(),
            "hidden_width" => t.hidden_width.to_string(),
            "hidden_layers" => t.hidden_layers.to_string(),
            "alpha" => self.agent.alpha.to_string(),
            "beta" => self.agent.beta.to_string(),
            "k" => self.agent.k.to_string(),
            "steps" => self.steps.to_string(),
            "seed" => self.seed.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "probe_interval" => self.probe_interval.to_string(),
            "probe_states" => self.probe_states.to_string(),
            "log_interval" => self.log_interval.to_string(),
            "checkpoint_interval" => self.checkpoint_interval.to_string(),
            "out" => self.out.display().to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        })
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn apply_pairs<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Reads `PRDC_SEED` from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV_VAR) {
            Ok(v) => self.set("seed", &v).map_err(|e| Error::Config(format!("{SEED_ENV_VAR}: {e}"))),
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::Config(format!("{SEED_ENV_VAR}: {e}"))),
        }
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|&k| (k, self.get(k).expect("every key is gettable"))).collect()
    }

    /// `key = value` text that [`RunConfig::apply_text`] reads back exactly.
    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_json(&self) -> Map<String, Value> {
        self.pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), Value::String(v)))
            .collect()
    }

    pub fn from_json(map: &Map<String, Value>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            let v = v
                .as_str()
                .ok_or_else(|| Error::Config(format!("{k}: manifest values must be strings")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn variant(&self) -> Result<Variant> {
        self.env_id.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.variant()?;
        if self.samples_per_state == 0 {
            return Err(Error::Config("samples_per_state must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be at least 1".into()));
        }
        if self.probe_interval > 0 && self.probe_states == 0 {
            return Err(Error::Config("probe_states must be positive when probing".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be positive".into()));
        }
        if self.agent.algorithm.needs_index() && !(self.agent.beta.is_finite()) {
            return Err(Error::Config("beta must be finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_hyperparameter_table() {
        let c = RunConfig::default();
        let t = &c.agent.td3;
        assert_eq!((t.actor_lr, t.critic_lr, t.batch_size), (3e-4, 3e-4, 256));
        assert_eq!((t.gamma, t.tau, t.policy_noise, t.noise_clip), (0.99, 0.005, 0.2, 0.5));
        assert_eq!(t.policy_update_frequency, 2);
        assert_eq!((c.agent.alpha, c.agent.beta, c.agent.k), (2.5, 2.0, 1));
        assert_eq!((t.hidden_width, t.hidden_layers), (256, 2));
        assert_eq!(c.agent.algorithm, Algorithm::Prdc);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut c = RunConfig::default();
        c.apply_text("beta = 0.1\nactor_lr=0.00031 # comment\n\n# only a comment\nalgorithm = td3bc\ndataset = d.bin\n")
            .unwrap();
        assert_eq!(c.agent.beta, 0.1);
        assert_eq!(c.agent.algorithm, Algorithm::Td3Bc);
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.pairs().len(), KEYS.len());
    }

    #[test]
    fn errors_name_the_field() {
        let mut c = RunConfig::default();
        let e = c.set("beta", "abc").unwrap_err().to_string();
        assert!(e.contains("beta"), "{e}");
        let e = c.set("bogus", "1").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
        let e = c.apply_text("steps 10").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        c.set("alpha", "-1").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("alpha"));
    }

    #[test]
    fn hyphenated_keys_are_accepted() {
        let mut c = RunConfig::default();
        c.set("hidden-width", "64").unwrap();
        assert_eq!(c.agent.td3.hidden_width, 64);
    }
}
