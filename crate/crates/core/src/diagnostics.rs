//! Measurement instruments: value probes against Monte-Carlo returns,
//! overestimation flags, point-to-set distance traces, policy profiles and
//! hyper-parameter sweeps.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, Algorithm};
use crate::config::RunConfig;
use crate::dataset::{Normalizer, OfflineDataset};
use crate::error::{Error, Result};
use crate::lineworld::{LineworldEnv, Policy, ACCOMPLISH_EPISODES, ACCOMPLISH_SEEDS};
use crate::neighbors::{self, NeighborIndex};
use crate::run;

/// State scale used by every distance trace, whatever the training beta.
pub const TRACE_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueProbe {
    pub step: u64,
    /// Mean of `Q1(s, pi(s))` over the probe states.
    pub estimated_q: f64,
    /// Mean discounted Monte-Carlo return of the policy from the probe states.
    pub true_q: f64,
    pub probe_states: Vec<f64>,
}

/// `n` initial states drawn from the environment's reset distribution.
pub fn probe_states(n: usize, seed: u64) -> Vec<f64> {
    let mut env = LineworldEnv::new(seed);
    (0..n).map(|_| env.reset()).collect()
}

/// Discounted return of one noise-free rollout from `start`, truncated at
/// the episode horizon.
pub fn discounted_return<P: Policy + ?Sized>(policy: &P, start: f64, gamma: f64) -> Result<f64> {
    let mut env = LineworldEnv::new(0);
    env.reset_to(start);
    let mut total = 0.0;
    let mut discount = 1.0;
    while !env.is_done() {
        let out = env.step(policy.act(&[env.state()]))?;
        total += discount * out.reward;
        discount *= gamma;
    }
    Ok(total)
}

pub fn value_probe(agent: &Agent, normalizer: &Normalizer, states: &[f64], gamma: f64, step: u64) -> Result<ValueProbe> {
    if states.is_empty() {
        return Err(Error::Config("value probe needs at least one state".into()));
    }
    let norm = Array2::from_shape_fn((states.len(), 1), |(i, _)| normalizer.normalize(&states[i..=i])[0]);
    let actions = agent.act_batch(norm.view())?;
    let q = agent.q1(norm.view(), actions.view())?;
    let policy = agent.policy(normalizer);
    let mut true_sum = 0.0;
    for &s in states {
        true_sum += discounted_return(&policy, s, gamma)?;
    }
    Ok(ValueProbe {
        step,
        estimated_q: q.mean().expect("non-empty"),
        true_q: true_sum / states.len() as f64,
        probe_states: states.to_vec(),
    })
}

/// `r_max / (1 - gamma)`: no discounted return can exceed it.
pub fn feasibility_bound(r_max: f64, gamma: f64) -> f64 {
    r_max / (1.0 - gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverestimationPoint {
    pub step: u64,
    pub estimated_q: f64,
    pub true_q: f64,
    /// `estimated_q - true_q`.
    pub gap: f64,
    /// The estimate exceeds the bound.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverestimationReport {
    pub bound: f64,
    pub points: Vec<OverestimationPoint>,
    pub flagged_steps: Vec<u64>,
    pub max_estimate: f64,
}

impl OverestimationReport {
    pub fn any_flagged(&self) -> bool {
        !self.flagged_steps.is_empty()
    }
}

pub fn overestimation_report(probes: &[ValueProbe], bound: f64) -> Result<OverestimationReport> {
    if probes.len() < 2 {
        return Err(Error::Config(format!(
            "an overestimation report needs at least 2 probes, got {}",
            probes.len()
        )));
    }
    let points: Vec<OverestimationPoint> = probes
        .iter()
        .map(|p| OverestimationPoint {
            step: p.step,
            estimated_q: p.estimated_q,
            true_q: p.true_q,
            gap: p.estimated_q - p.true_q,
            flagged: p.estimated_q > bound,
        })
        .collect();
    for p in points.iter().filter(|p| p.flagged) {
        warn!("value estimate {:.2} at step {} exceeds the bound {bound}", p.estimated_q, p.step);
    }
    Ok(OverestimationReport {
        bound,
        flagged_steps: points.iter().filter(|p| p.flagged).map(|p| p.step).collect(),
        max_estimate: points.iter().map(|p| p.estimated_q).fold(f64::NEG_INFINITY, f64::max),
        points,
    })
}

pub fn probes_csv(probes: &[ValueProbe]) -> Result<String> {
    #[derive(Serialize)]
    struct Row {
        step: u64,
        estimated_q: f64,
        true_q: f64,
    }
    to_csv(probes.iter().map(|p| Row {
        step: p.step,
        estimated_q: p.estimated_q,
        true_q: p.true_q,
    }))
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: u64,
    pub mean_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceTrace {
    pub beta: f64,
    pub points: Vec<TracePoint>,
}

impl Default for DistanceTrace {
    fn default() -> Self {
        Self::new()
    }
}

impl DistanceTrace {
    pub fn new() -> Self {
        Self {
            beta: TRACE_BETA,
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, step: u64, mean_distance: f64) {
        self.points.push(TracePoint { step, mean_distance });
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(self.points.iter())
    }
}

/// Mean `d^1` of visited `(state, action)` pairs, given in environment units,
/// to a dataset indexed in normalized state space.
pub fn visited_distance(index: &NeighborIndex, normalizer: &Normalizer, visited: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if index.beta() != TRACE_BETA {
        return Err(Error::Config(format!(
            "distance traces use beta = {TRACE_BETA}, index has {}",
            index.beta()
        )));
    }
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = visited
        .iter()
        .map(|(s, a)| (normalizer.normalize(s), a.clone()))
        .collect();
    neighbors::mean_point_to_set_distance(index, &pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub state: f64,
    pub action: f64,
}

/// Policy outputs on `points` evenly spaced states in `[lo, hi]`.
pub fn policy_profile<P: Policy + ?Sized>(policy: &P, lo: f64, hi: f64, points: usize) -> Vec<ProfilePoint> {
    (0..points)
        .map(|i| {
            let state = if points == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (points - 1) as f64
            };
            ProfilePoint {
                state,
                action: policy.act(&[state]),
            }
        })
        .collect()
}

/// `(min, max)` of the profile's actions.
pub fn profile_range(profile: &[ProfilePoint]) -> (f64, f64) {
    profile.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.action), hi.max(p.action))
    })
}

pub fn profile_csv(profile: &[ProfilePoint]) -> Result<String> {
    to_csv(profile.iter())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Beta,
    K,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Beta => "beta",
            SweepAxis::K => "k",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "beta" => Ok(SweepAxis::Beta),
            "k" => Ok(SweepAxis::K),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}; expected beta or k"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Ok {
        mean_return: f64,
        successes: usize,
        episodes: usize,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub value: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: f64,
    pub completed: usize,
    pub failed: usize,
    pub mean_return: Option<f64>,
    /// Sample standard deviation of the final returns over seeds.
    pub std_return: Option<f64>,
    pub successes: usize,
    pub episodes: usize,
    /// The 5 x 10 accomplishment verdict, when the sweep follows that protocol.
    pub accomplished: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub runs: Vec<SweepRun>,
    pub summary: Vec<SweepCell>,
}

fn child_config(base: &RunConfig, axis: SweepAxis, value: f64, seed: u64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    match axis {
        SweepAxis::Beta => cfg.agent.beta = value,
        SweepAxis::K => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(Error::Config(format!("k must be a positive integer, got {value}")));
            }
            cfg.agent.k = value as usize;
        }
    }
    cfg.out = base.out.join(format!("{axis}_{value}_seed{seed}"));
    cfg.validate()?;
    Ok(cfg)
}

/// Trains one run per `(value, seed)` with up to `jobs` runs in flight.
///
/// Every child writes its own run directory under `base.out`. A failing run
/// is recorded in the result and the sweep carries on.
pub fn run_sweep(base: &RunConfig, axis: SweepAxis, values: &[f64], seeds: &[u64], jobs: usize) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    if axis == SweepAxis::K && base.agent.algorithm != Algorithm::PrdcKnn {
        return Err(Error::Config(format!(
            "a k sweep needs algorithm prdc_knn, got {}",
            base.agent.algorithm.name()
        )));
    }
    let ds: OfflineDataset = run::prepare_dataset(base)?.normalize_states()?;
    let tasks: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SweepRun>>> = Mutex::new(vec![None; tasks.len()]);
    let workers = jobs.clamp(1, tasks.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(value, seed)) = tasks.get(i) else {
                    break;
                };
                let outcome = child_config(base, axis, value, seed).and_then(|cfg| run::run_prepared(&cfg, &ds));
                let status = match outcome {
                    Ok(s) => {
                        info!("sweep {axis}={value} seed {seed}: {}/{} successes", s.final_successes, s.final_episodes);
                        RunStatus::Ok {
                            mean_return: s.final_mean_return,
                            successes: s.final_successes,
                            episodes: s.final_episodes,
                        }
                    }
                    Err(e) => {
                        warn!("sweep {axis}={value} seed {seed} failed: {e}");
                        RunStatus::Failed { error: e.to_string() }
                    }
                };
                results.lock().expect("no worker panics while holding the lock")[i] = Some(SweepRun { value, seed, status });
            });
        }
    });
    let runs: Vec<SweepRun> = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect();
    let summary = values.iter().map(|&v| summarize(v, &runs, seeds.len())).collect();
    Ok(SweepResult {
        axis,
        values: values.to_vec(),
        seeds: seeds.to_vec(),
        runs,
        summary,
    })
}

fn summarize(value: f64, runs: &[SweepRun], seeds: usize) -> SweepCell {
    let mut returns = Vec::new();
    let (mut successes, mut episodes, mut failed) = (0, 0, 0);
    for r in runs.iter().filter(|r| r.value == value) {
        match &r.status {
            RunStatus::Ok {
                mean_return,
                successes: s,
                episodes: e,
            } => {
                returns.push(*mean_return);
                successes += s;
                episodes += e;
            }
            RunStatus::Failed { .. } => failed += 1,
        }
    }
    let n = returns.len();
    let mean = (n > 0).then(|| returns.iter().sum::<f64>() / n as f64);
    let std = mean.map(|m| {
        if n < 2 {
            0.0
        } else {
            (returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        }
    });
    let protocol = seeds == ACCOMPLISH_SEEDS && episodes == ACCOMPLISH_SEEDS * ACCOMPLISH_EPISODES;
    SweepCell {
        value,
        completed: n,
        failed,
        mean_return: mean,
        std_return: std,
        successes,
        episodes,
        accomplished: (protocol || failed > 0).then_some(failed == 0 && successes == episodes),
    }
}
