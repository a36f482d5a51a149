//! A complete training run: dataset preparation, the training loop with
//! periodic evaluation and value probes, and the files a run leaves behind.
//!
//! A run directory contains
//!
//! - `manifest.json`: every resolved config value plus dataset statistics
//! - `log.csv`: the RunLog
//! - `probes.csv`, `distance.csv`, `profile.csv`: diagnostic series
//! - `summary.json`: final evaluation and diagnostic summaries
//! - `*.ckpt`: the six networks in checkpoint format

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agents::Agent;
use crate::config::RunConfig;
use crate::dataset::{Normalizer, OfflineDataset};
use crate::diagnostics::{
    self, DistanceTrace, OverestimationReport, ProfilePoint, ValueProbe, TRACE_BETA,
};
use crate::error::{Error, Result};
use crate::lineworld::{self, DatasetSpec, EvalReport, STATE_MAX, STATE_MIN};
use crate::neighbors::NeighborIndex;
use crate::nn::Mlp;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "log.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PROBES_FILE: &str = "probes.csv";
pub const DISTANCE_FILE: &str = "distance.csv";
pub const PROFILE_FILE: &str = "profile.csv";

/// Offsets that derive evaluation and probe seeds from the run seed.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;
pub const PROBE_SEED_OFFSET: u64 = 2_000_000;

/// Grid resolution of the exported policy profile over `[0, 100]`.
pub const PROFILE_POINTS: usize = 1001;

pub const NETWORK_FILES: [&str; 6] = [
    "actor.ckpt",
    "critic1.ckpt",
    "critic2.ckpt",
    "actor_target.ckpt",
    "critic1_target.ckpt",
    "critic2_target.ckpt",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub lambda: Option<f64>,
    pub dc_distance: Option<f64>,
    pub eval_return: Option<f64>,
    pub eval_success: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

impl RunLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<Vec<LogRow>, _>>().map_err(csv_error)?;
        Ok(Self { rows })
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Parse {
        offset: e.position().map_or(0, |p| p.byte()),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub agent: Agent,
    pub normalizer: Normalizer,
    pub log: RunLog,
    pub final_eval: EvalReport,
    pub probes: Vec<ValueProbe>,
    pub distance_trace: DistanceTrace,
}

impl RunOutput {
    pub fn profile(&self) -> Vec<ProfilePoint> {
        diagnostics::policy_profile(
            &self.agent.policy(&self.normalizer),
            STATE_MIN,
            STATE_MAX - 1.0,
            PROFILE_POINTS,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env_id: String,
    pub algorithm: String,
    pub seed: u64,
    pub steps: u64,
    pub final_mean_return: f64,
    pub final_successes: usize,
    pub final_episodes: usize,
    pub final_eval: EvalReport,
    pub profile_min: f64,
    pub profile_max: f64,
    pub overestimation: Option<OverestimationReport>,
    pub distance_trace: DistanceTrace,
}

impl RunSummary {
    pub fn from_output(cfg: &RunConfig, out: &RunOutput) -> Self {
        let profile = out.profile();
        let (lo, hi) = diagnostics::profile_range(&profile);
        let overestimation = (out.probes.len() >= 2).then(|| {
            diagnostics::overestimation_report(&out.probes, lineworld::VALUE_BOUND).expect("at least two probes")
        });
        Self {
            env_id: cfg.env_id.clone(),
            algorithm: cfg.agent.algorithm.name().to_string(),
            seed: cfg.seed,
            steps: cfg.steps,
            final_mean_return: out.final_eval.mean_return,
            final_successes: out.final_eval.successes,
            final_episodes: out.final_eval.episodes.len(),
            final_eval: out.final_eval.clone(),
            profile_min: lo,
            profile_max: hi,
            overestimation,
            distance_trace: out.distance_trace.clone(),
        }
    }
}

/// Loads the configured dataset file, or generates the lineworld dataset
/// named by `env_id`. The result is not normalized.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<OfflineDataset> {
    let variant = cfg.variant()?;
    match &cfg.dataset {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Config(format!("dataset file {} does not exist", path.display())));
            }
            let ds = OfflineDataset::load(path)?;
            if ds.env_id() != variant.env_id() {
                return Err(Error::Config(format!(
                    "dataset {} holds {} but env_id is {}",
                    path.display(),
                    ds.env_id(),
                    cfg.env_id
                )));
            }
            if ds.is_normalized() {
                return Err(Error::Config(format!("dataset {} is already normalized", path.display())));
            }
            Ok(ds)
        }
        None => lineworld::generate_dataset(&DatasetSpec {
            variant,
            samples_per_state: cfg.samples_per_state,
            seed: cfg.dataset_seed,
        }),
    }
}

/// Runs training on a normalized dataset. Writes intermediate checkpoints
/// into `checkpoint_dir` when one is given and the config asks for them.
pub fn train(cfg: &RunConfig, ds: &OfflineDataset, checkpoint_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    if !ds.is_normalized() {
        return Err(Error::Config("training expects a normalized dataset".into()));
    }
    let acfg = &cfg.agent;
    let index = if acfg.algorithm.needs_index() {
        if acfg.k > ds.len() {
            return Err(Error::Config(format!("k = {} exceeds the dataset size {}", acfg.k, ds.len())));
        }
        Some(NeighborIndex::build(ds, acfg.beta)?)
    } else {
        None
    };
    let trace_index = NeighborIndex::build(ds, TRACE_BETA)?;
    let normalizer = ds.normalizer().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agent = Agent::new(ds.state_dim(), ds.action_dim(), acfg, &mut rng)?;
    let eval_seed = cfg.seed.wrapping_add(EVAL_SEED_OFFSET);
    let probe_states = diagnostics::probe_states(cfg.probe_states.max(1), cfg.seed.wrapping_add(PROBE_SEED_OFFSET));

    let mut log = RunLog::default();
    let mut probes = Vec::new();
    let mut trace = DistanceTrace::new();
    let mut last_actor = (None, None, None);
    info!(
        "training {} on {} for {} steps (seed {})",
        acfg.algorithm.name(),
        cfg.env_id,
        cfg.steps,
        cfg.seed
    );
    for step in 1..=cfg.steps {
        let m = agent
            .train_step(ds, index.as_ref(), acfg, &mut rng)
            .map_err(|e| Error::Training {
                step,
                source: Box::new(e),
            })?;
        if m.actor_loss.is_some() {
            last_actor = (m.actor_loss, m.lambda, m.dc_distance);
        }
        let eval_now = step == cfg.steps || (cfg.eval_interval > 0 && step % cfg.eval_interval == 0);
        let mut eval = None;
        if eval_now {
            let report = lineworld::evaluate_policy(&agent.policy(&normalizer), cfg.eval_episodes, eval_seed)?;
            let d = diagnostics::visited_distance(&trace_index, &normalizer, &report.visited)?;
            trace.push(step, d);
            debug!(
                "step {step}: return {:.1}, {}/{} successes, distance {d:.4}",
                report.mean_return, report.successes, cfg.eval_episodes
            );
            eval = Some(report);
        }
        if cfg.probe_interval > 0 && step % cfg.probe_interval == 0 {
            probes.push(diagnostics::value_probe(&agent, &normalizer, &probe_states, acfg.td3.gamma, step)?);
        }
        if step % cfg.log_interval == 0 || eval.is_some() {
            log.rows.push(LogRow {
                step,
                critic_loss: m.critic_loss,
                actor_loss: last_actor.0,
                lambda: last_actor.1,
                dc_distance: last_actor.2,
                eval_return: eval.as_ref().map(|r| r.mean_return),
                eval_success: eval.as_ref().map(|r| r.successes as f64 / r.episodes.len() as f64),
            });
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 && step != cfg.steps {
                let sub = dir.join(format!("step_{step}"));
                save_networks(&agent, &sub)?;
                let mut m = manifest(cfg, ds);
                m["checkpoint_step"] = json!(step);
                fs::write(sub.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)?)?;
            }
        }
    }
    let final_eval = lineworld::evaluate_policy(&agent.policy(&normalizer), cfg.eval_episodes, eval_seed)?;
    if cfg.steps == 0 {
        let d = diagnostics::visited_distance(&trace_index, &normalizer, &final_eval.visited)?;
        trace.push(0, d);
    }
    info!(
        "finished {} on {} seed {}: {}/{} successes",
        acfg.algorithm.name(),
        cfg.env_id,
        cfg.seed,
        final_eval.successes,
        cfg.eval_episodes
    );
    Ok(RunOutput {
        agent,
        normalizer,
        log,
        final_eval,
        probes,
        distance_trace: trace,
    })
}

pub fn save_networks(agent: &Agent, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let nets = [
        &agent.actor,
        &agent.critic1,
        &agent.critic2,
        &agent.actor_target,
        &agent.critic1_target,
        &agent.critic2_target,
    ];
    for (net, name) in nets.into_iter().zip(NETWORK_FILES) {
        net.save(dir.join(name))?;
    }
    Ok(())
}

pub fn manifest(cfg: &RunConfig, ds: &OfflineDataset) -> Value {
    let n = ds.normalizer();
    json!({
        "config": cfg.to_json(),
        "dataset": {
            "env_id": ds.env_id(),
            "transitions": ds.len(),
            "state_mean": n.mean,
            "state_std": n.std,
        },
        "distance_trace_beta": TRACE_BETA,
        "value_bound": lineworld::VALUE_BOUND,
    })
}

/// Reads the config recorded in a manifest.
pub fn config_from_manifest(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)?;
    let map = v
        .get("config")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::Config(format!("{} has no config object", path.display())))?;
    RunConfig::from_json(map)
}

/// Trains and writes every run artifact under `cfg.out`.
pub fn run_to_dir(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let raw = prepare_dataset(cfg)?;
    let ds = raw.normalize_states()?;
    run_prepared(cfg, &ds)
}

/// [`run_to_dir`] for an already prepared, normalized dataset.
pub fn run_prepared(cfg: &RunConfig, ds: &OfflineDataset) -> Result<RunSummary> {
    let out_dir = &cfg.out;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest(cfg, ds))?)?;
    let output = train(cfg, ds, Some(&out_dir.join("checkpoints")))?;
    write_outputs(cfg, &output)
}

pub fn write_outputs(cfg: &RunConfig, output: &RunOutput) -> Result<RunSummary> {
    let dir = &cfg.out;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(LOG_FILE), output.log.to_csv()?)?;
    fs::write(dir.join(PROBES_FILE), diagnostics::probes_csv(&output.probes)?)?;
    fs::write(dir.join(DISTANCE_FILE), output.distance_trace.to_csv()?)?;
    fs::write(dir.join(PROFILE_FILE), diagnostics::profile_csv(&output.profile())?)?;
    save_networks(&output.agent, dir)?;
    let summary = RunSummary::from_output(cfg, output);
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Loads the actor of a run directory together with the normalizer recorded
/// in its manifest.
pub fn load_policy(checkpoint: &Path) -> Result<(Mlp, Normalizer, RunConfig)> {
    let dir: PathBuf = checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !checkpoint.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let cfg = config_from_manifest(&manifest_path)?;
    let text = fs::read_to_string(&manifest_path)?;
    let v: Value = serde_json::from_str(&text)?;
    let stats = |key: &str| -> Result<Vec<f64>> {
        serde_json::from_value(v["dataset"][key].clone())
            .map_err(|e| Error::Config(format!("manifest dataset.{key}: {e}")))
    };
    let normalizer = Normalizer {
        mean: stats("state_mean")?,
        std: stats("state_std")?,
    };
    Ok((Mlp::load(checkpoint)?, normalizer, cfg))
}

/// Restores every network of a run directory into an agent. Optimiser
/// moments are not saved, so they start fresh.
pub fn load_agent(dir: &Path) -> Result<(Agent, Normalizer, RunConfig)> {
    let (actor, normalizer, cfg) = load_policy(&dir.join(NETWORK_FILES[0]))?;
    let state_dim = normalizer.mean.len();
    let action_dim = *actor.sizes().last().expect("actor has layers");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agent = Agent::new(state_dim, action_dim, &cfg.agent, &mut rng)?;
    let mut nets = [
        &mut agent.actor,
        &mut agent.critic1,
        &mut agent.critic2,
        &mut agent.actor_target,
        &mut agent.critic1_target,
        &mut agent.critic2_target,
    ];
    *nets[0] = actor;
    for (net, name) in nets.iter_mut().zip(NETWORK_FILES).skip(1) {
        let loaded = Mlp::load(dir.join(name))?;
        if loaded.sizes() != net.sizes() {
            return Err(Error::Config(format!(
                "{name} has layer sizes {:?}, expected {:?}",
                loaded.sizes(),
                net.sizes()
            )));
        }
        **net = loaded;
    }
    Ok((agent, normalizer, cfg))
}
