//! One-dimensional chain environment and its four offline datasets.
//!
//! The agent lives on `[0, 101]`, starts uniformly in `[0, 1]` and moves by
//! its action (clipped to `[-1, 1]`). Landing in the goal `(100, 101]` pays
//! 100 and ends the episode; otherwise the reward is 0 and the episode times
//! out after [`HORIZON`] steps.
//!
//! Datasets are organised by unit cells: "state k" refers to the cell
//! `(k, k + 1]` (cell 0 is `[0, 1]`, the start cell). Each sample is placed at
//! a seeded uniform position inside its cell and its successor, reward and
//! done flag come from the true dynamics.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{OfflineDataset, Transition};
use crate::error::{Error, Result};

pub const STATE_MIN: f64 = 0.0;
pub const STATE_MAX: f64 = 101.0;
pub const GOAL_LOW: f64 = 100.0;
pub const GOAL_REWARD: f64 = 100.0;
pub const ACTION_BOUND: f64 = 1.0;
/// Maximum number of steps in an episode.
pub const HORIZON: usize = 105;
/// Upper bound on any return (discounted or not): the goal pays once.
pub const VALUE_BOUND: f64 = GOAL_REWARD;

pub fn in_goal(state: f64) -> bool {
    state > GOAL_LOW && state <= STATE_MAX
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next_state: f64,
    pub reward: f64,
    pub done: bool,
    /// True when the episode ended by reaching the goal.
    pub success: bool,
}

/// Pure transition function shared by the environment and the generators.
pub fn dynamics(state: f64, action: f64) -> (f64, f64) {
    let next = (state + action.clamp(-ACTION_BOUND, ACTION_BOUND)).clamp(STATE_MIN, STATE_MAX);
    let reward = if in_goal(next) { GOAL_REWARD } else { 0.0 };
    (next, reward)
}

#[derive(Debug, Clone)]
pub struct LineworldEnv {
    state: f64,
    step_count: usize,
    done: bool,
    rng: ChaCha8Rng,
}

impl LineworldEnv {
    pub fn new(seed: u64) -> Self {
        Self {
            state: 0.0,
            step_count: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Draws the initial state from `U[0, 1]`.
    pub fn reset(&mut self) -> f64 {
        let s = self.rng.random_range(0.0..=1.0);
        self.reset_to(s)
    }

    /// Starts an episode from an arbitrary state (clipped into range).
    pub fn reset_to(&mut self, state: f64) -> f64 {
        self.state = state.clamp(STATE_MIN, STATE_MAX);
        self.step_count = 0;
        self.done = false;
        self.state
    }

    pub fn state(&self) -> f64 {
        self.state
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, action: f64) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if !action.is_finite() {
            return Err(Error::NonFinite(format!("lineworld action {action}")));
        }
        if action.abs() > ACTION_BOUND {
            warn!("lineworld action {action} clipped to [-1, 1]");
        }
        let (next, reward) = dynamics(self.state, action);
        self.state = next;
        self.step_count += 1;
        let success = reward > 0.0;
        self.done = success || self.step_count >= HORIZON;
        Ok(StepOutcome {
            next_state: next,
            reward,
            done: self.done,
            success,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Easy,
    Medium,
    Hard,
    Superhard,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Easy, Variant::Medium, Variant::Hard, Variant::Superhard];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Easy => "easy",
            Variant::Medium => "medium",
            Variant::Hard => "hard",
            Variant::Superhard => "superhard",
        }
    }

    pub fn env_id(self) -> String {
        format!("lineworld-{}", self.name())
    }

    /// `(cell, number of -1 actions)` per populated cell, given
    /// `samples` actions per cell.
    pub fn composition(self, samples: usize) -> Vec<(usize, usize)> {
        let rare = samples / 100;
        let odd = (1..100).step_by(2);
        match self {
            Variant::Easy => (0..=100).map(|c| (c, rare)).collect(),
            Variant::Medium => odd.map(|c| (c, samples / 2)).collect(),
            Variant::Hard => odd.map(|c| (c, samples - rare)).collect(),
            Variant::Superhard => (0..=100)
                .map(|c| if c % 2 == 1 { (c, samples - rare) } else { (c, samples) })
                .collect(),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().trim_start_matches("lineworld-") {
            "easy" => Ok(Variant::Easy),
            "medium" => Ok(Variant::Medium),
            "hard" => Ok(Variant::Hard),
            "superhard" => Ok(Variant::Superhard),
            other => Err(Error::Config(format!("unknown lineworld variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSpec {
    pub variant: Variant,
    pub samples_per_state: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            samples_per_state: 100,
            seed,
        }
    }
}

/// Builds one of the four datasets with exact action counts per cell.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<OfflineDataset> {
    let n = spec.samples_per_state;
    if n == 0 || n % 100 != 0 {
        return Err(Error::Config(format!(
            "samples_per_state must be a positive multiple of 100 to realise the 1:99 ratios, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut transitions = Vec::new();
    for (cell, negatives) in spec.variant.composition(n) {
        for j in 0..n {
            let action = if j < negatives { -1.0 } else { 1.0 };
            let state = cell_position(cell, &mut rng);
            let (next_state, reward) = dynamics(state, action);
            transitions.push(Transition {
                state: vec![state],
                action: vec![action],
                reward,
                next_state: vec![next_state],
                done: reward > 0.0,
            });
        }
    }
    OfflineDataset::new(spec.variant.env_id(), 1, 1, transitions)
}

/// Uniform position in cell `(k, k + 1]`; cell 0 is `[0, 1]`.
fn cell_position<R: Rng + ?Sized>(cell: usize, rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(0.0..1.0);
    if cell == 0 {
        u
    } else {
        cell as f64 + (1.0 - u)
    }
}

/// Anything that maps an environment state to an action.
pub trait Policy {
    fn act(&self, state: &[f64]) -> f64;
}

impl<F: Fn(f64) -> f64> Policy for F {
    fn act(&self, state: &[f64]) -> f64 {
        self(state[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub initial_state: f64,
    pub total_return: f64,
    pub steps: usize,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub episodes: Vec<EpisodeRecord>,
    pub mean_return: f64,
    pub successes: usize,
    /// Every `(state, action)` the policy emitted, in env units.
    #[serde(skip)]
    pub visited: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Noise-free rollouts from `U[0, 1]` starts.
pub fn evaluate_policy<P: Policy + ?Sized>(policy: &P, episodes: usize, seed: u64) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be at least 1".into()));
    }
    let mut env = LineworldEnv::new(seed);
    let mut records = Vec::with_capacity(episodes);
    let mut visited = Vec::new();
    for _ in 0..episodes {
        let initial_state = env.reset();
        let mut total = 0.0;
        let mut success = false;
        while !env.is_done() {
            let s = env.state();
            let a = policy.act(&[s]);
            visited.push((vec![s], vec![a]));
            let out = env.step(a)?;
            total += out.reward;
            success |= out.success;
        }
        records.push(EpisodeRecord {
            initial_state,
            total_return: total,
            steps: env.step_count(),
            success,
        });
    }
    let mean_return = records.iter().map(|r| r.total_return).sum::<f64>() / episodes as f64;
    let successes = records.iter().filter(|r| r.success).count();
    Ok(EvalReport {
        seed,
        episodes: records,
        mean_return,
        successes,
        visited,
    })
}

pub const ACCOMPLISH_SEEDS: usize = 5;
pub const ACCOMPLISH_EPISODES: usize = 10;

/// True only if all 5 x 10 evaluation episodes reach the goal.
pub fn accomplishment(reports: &[EvalReport]) -> Result<bool> {
    if reports.len() != ACCOMPLISH_SEEDS {
        return Err(Error::Config(format!(
            "accomplishment needs {ACCOMPLISH_SEEDS} seed reports, got {}",
            reports.len()
        )));
    }
    if let Some(r) = reports.iter().find(|r| r.episodes.len() != ACCOMPLISH_EPISODES) {
        return Err(Error::Config(format!(
            "accomplishment needs {ACCOMPLISH_EPISODES} episodes per seed, seed {} has {}",
            r.seed,
            r.episodes.len()
        )));
    }
    Ok(reports.iter().all(|r| r.successes == ACCOMPLISH_EPISODES))
}
