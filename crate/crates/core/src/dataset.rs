//! Offline transition store.
//!
//! A dataset is built once (generated or loaded), optionally normalized, and
//! then only read. Normalization statistics are computed over the union of the
//! `state` and `next_state` columns so that critic targets see inputs from the
//! same distribution as critic inputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"PRDCDS01";

/// Standard deviations below this are clamped before dividing.
pub const STD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Per-dimension affine map `x -> (x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    env_id: String,
    state_dim: usize,
    action_dim: usize,
    transitions: Vec<Transition>,
    /// Identity until [`OfflineDataset::normalize_states`] runs.
    stats: Normalizer,
    normalized: bool,
}

/// Column-major view of `n` sampled transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    /// 1.0 for terminal transitions, 0.0 otherwise.
    pub dones: Array1<f64>,
    pub indices: Vec<usize>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

impl OfflineDataset {
    /// Builds an unnormalized dataset, checking every transition's shape.
    pub fn new(env_id: impl Into<String>, state_dim: usize, action_dim: usize, transitions: Vec<Transition>) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::Config("state_dim and action_dim must be positive".into()));
        }
        for (i, t) in transitions.iter().enumerate() {
            if t.state.len() != state_dim || t.next_state.len() != state_dim {
                return Err(Error::shape("transition state", state_dim, format!("transition {i}")));
            }
            if t.action.len() != action_dim {
                return Err(Error::shape("transition action", action_dim, format!("transition {i}")));
            }
        }
        Ok(Self {
            env_id: env_id.into(),
            state_dim,
            action_dim,
            transitions,
            stats: Normalizer::identity(state_dim),
            normalized: false,
        })
    }

    pub fn env_id(&self) -> &str {
        &self.env_id
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.transitions.get(i)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.stats
    }

    /// Returns a copy whose `state` and `next_state` columns are standardized
    /// with population moments of their union. Rewards and actions are kept.
    pub fn normalize_states(&self) -> Result<Self> {
        if self.normalized {
            return Err(Error::AlreadyNormalized);
        }
        if self.transitions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = self.state_dim;
        let count = 2.0 * self.transitions.len() as f64;
        let mut mean = vec![0.0; d];
        for t in &self.transitions {
            for j in 0..d {
                mean[j] += t.state[j] + t.next_state[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for t in &self.transitions {
            for j in 0..d {
                let a = t.state[j] - mean[j];
                let b = t.next_state[j] - mean[j];
                var[j] += a * a + b * b;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt().max(STD_FLOOR)).collect();
        let stats = Normalizer { mean, std };
        let transitions = self
            .transitions
            .iter()
            .map(|t| Transition {
                state: stats.normalize(&t.state),
                action: t.action.clone(),
                reward: t.reward,
                next_state: stats.normalize(&t.next_state),
                done: t.done,
            })
            .collect();
        Ok(Self {
            env_id: self.env_id.clone(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            transitions,
            stats,
            normalized: true,
        })
    }

    /// Uniform sampling with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<MiniBatch> {
        if self.transitions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if n == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.transitions.len())).collect();
        Ok(self.gather(&indices))
    }

    /// Builds a batch from explicit indices (which must be in range).
    pub fn gather(&self, indices: &[usize]) -> MiniBatch {
        let n = indices.len();
        let (sd, ad) = (self.state_dim, self.action_dim);
        let mut states = Array2::zeros((n, sd));
        let mut actions = Array2::zeros((n, ad));
        let mut next_states = Array2::zeros((n, sd));
        let mut rewards = Array1::zeros(n);
        let mut dones = Array1::zeros(n);
        for (row, &i) in indices.iter().enumerate() {
            let t = &self.transitions[i];
            for j in 0..sd {
                states[[row, j]] = t.state[j];
                next_states[[row, j]] = t.next_state[j];
            }
            for j in 0..ad {
                actions[[row, j]] = t.action[j];
            }
            rewards[row] = t.reward;
            dones[row] = if t.done { 1.0 } else { 0.0 };
        }
        MiniBatch {
            states,
            actions,
            rewards,
            next_states,
            dones,
            indices: indices.to_vec(),
        }
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = ByteWriter::new(out);
        w.bytes(DATASET_MAGIC)?;
        let id = self.env_id.as_bytes();
        w.u32(id.len() as u32)?;
        w.bytes(id)?;
        w.u32(self.state_dim as u32)?;
        w.u32(self.action_dim as u32)?;
        w.u8(self.normalized as u8)?;
        w.f64s(&self.stats.mean)?;
        w.f64s(&self.stats.std)?;
        w.u64(self.transitions.len() as u64)?;
        for t in &self.transitions {
            w.f64s(&t.state)?;
            w.f64s(&t.action)?;
            w.f64(t.reward)?;
            w.f64s(&t.next_state)?;
            w.u8(t.done as u8)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = ByteReader::new(input);
        r.magic(DATASET_MAGIC)?;
        let id_len = r.u32("env_id length")? as usize;
        if id_len > 4096 {
            return Err(r.error(format!("env_id length {id_len} is implausible")));
        }
        let id_bytes = r.bytes(id_len, "env_id")?;
        let env_id = String::from_utf8(id_bytes).map_err(|_| r.error("env_id is not UTF-8"))?;
        let state_dim = r.u32("state_dim")? as usize;
        let action_dim = r.u32("action_dim")? as usize;
        if state_dim == 0 || action_dim == 0 || state_dim > 1 << 16 || action_dim > 1 << 16 {
            return Err(r.error(format!("invalid dims state={state_dim} action={action_dim}")));
        }
        let normalized = match r.u8("normalized flag")? {
            0 => false,
            1 => true,
            v => return Err(r.error(format!("normalized flag must be 0 or 1, got {v}"))),
        };
        let mean = r.f64s(state_dim, "state mean")?;
        let std = r.f64s(state_dim, "state std")?;
        let count = r.u64("transition count")?;
        let mut transitions = Vec::with_capacity(count.min(1 << 20) as usize);
        for _ in 0..count {
            let state = r.f64s(state_dim, "state")?;
            let action = r.f64s(action_dim, "action")?;
            let reward = r.f64("reward")?;
            let next_state = r.f64s(state_dim, "next_state")?;
            let done = match r.u8("done flag")? {
                0 => false,
                1 => true,
                v => return Err(r.error(format!("done flag must be 0 or 1, got {v}"))),
            };
            transitions.push(Transition {
                state,
                action,
                reward,
                next_state,
                done,
            });
        }
        r.expect_eof()?;
        Ok(Self {
            env_id,
            state_dim,
            action_dim,
            transitions,
            stats: Normalizer { mean, std },
            normalized,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
