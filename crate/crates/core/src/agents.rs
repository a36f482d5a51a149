//! Actor-critic training shared by PRDC, its k-NN variant, TD3+BC, BC and
//! plain TD3.
//!
//! All variants use the same twin-critic TD3 machinery: clipped double-Q
//! targets with smoothed target actions, delayed actor updates and Polyak
//! averaged target networks. They differ only in the actor objective:
//!
//! | algorithm  | actor loss                                   |
//! |------------|----------------------------------------------|
//! | `prdc`     | `lambda * -Q1(s, pi(s)) + mean d(s, pi(s))`  |
//! | `prdc_knn` | `lambda * -Q1(s, pi(s)) + mean |pi(s) - a_bar|` |
//! | `td3bc`    | `lambda * -Q1(s, pi(s)) + mean |pi(s) - a|^2` |
//! | `bc`       | `mean |pi(s) - a|^2`                         |
//! | `td3`      | `-Q1(s, pi(s))`                              |
//!
//! `lambda = alpha * N / sum |Q1(s, pi(s))|` is recomputed every actor update
//! and treated as a constant. Retrieved neighbours are constants too: the
//! dataset-constraint gradient flows only through `pi(s)`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{MiniBatch, Normalizer, OfflineDataset};
use crate::error::{Error, Result};
use crate::lineworld::Policy;
use crate::neighbors::NeighborIndex;
use crate::nn::{polyak_blend, Adam, Gradient, Head, Mlp, Tape};

/// Floor for the `lambda` denominator.
pub const LAMBDA_FLOOR: f64 = 1e-8;

/// Bound of the policy's last-layer initialisation.
pub const POLICY_FINAL_INIT: f64 = 3e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Td3Config {
    pub gamma: f64,
    pub tau: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub policy_update_frequency: u64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub action_bound: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_update_frequency: 2,
            batch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            action_bound: 1.0,
            hidden_width: 256,
            hidden_layers: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// Distance to the nearest dataset pair.
    PrdcNearest,
    /// Distance to the mean action of the k nearest dataset pairs.
    KnnAverage,
    /// Squared error to the batch action.
    Bc,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Prdc,
    PrdcKnn,
    Td3Bc,
    Bc,
    Td3,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Prdc,
        Algorithm::PrdcKnn,
        Algorithm::Td3Bc,
        Algorithm::Bc,
        Algorithm::Td3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Prdc => "prdc",
            Algorithm::PrdcKnn => "prdc_knn",
            Algorithm::Td3Bc => "td3bc",
            Algorithm::Bc => "bc",
            Algorithm::Td3 => "td3",
        }
    }

    pub fn regularizer(self) -> Regularizer {
        match self {
            Algorithm::Prdc => Regularizer::PrdcNearest,
            Algorithm::PrdcKnn => Regularizer::KnnAverage,
            Algorithm::Td3Bc | Algorithm::Bc => Regularizer::Bc,
            Algorithm::Td3 => Regularizer::None,
        }
    }

    /// Whether the actor loss contains the `-Q` term.
    pub fn uses_q(self) -> bool {
        !matches!(self, Algorithm::Bc)
    }

    pub fn needs_index(self) -> bool {
        matches!(self.regularizer(), Regularizer::PrdcNearest | Regularizer::KnnAverage)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
        match norm.as_str() {
            "prdc" => Ok(Algorithm::Prdc),
            "prdc_knn" => Ok(Algorithm::PrdcKnn),
            "td3bc" | "td3_bc" => Ok(Algorithm::Td3Bc),
            "bc" => Ok(Algorithm::Bc),
            "td3" => Ok(Algorithm::Td3),
            _ => Err(Error::Config(format!("unknown algorithm {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrdcConfig {
    pub td3: Td3Config,
    pub algorithm: Algorithm,
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
}

impl Default for PrdcConfig {
    fn default() -> Self {
        Self {
            td3: Td3Config::default(),
            algorithm: Algorithm::Prdc,
            alpha: 2.5,
            beta: 2.0,
            k: 1,
        }
    }
}

impl PrdcConfig {
    pub fn regularizer(&self) -> Regularizer {
        self.algorithm.regularizer()
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.td3;
        let positive = [
            ("tau", t.tau),
            ("actor_lr", t.actor_lr),
            ("critic_lr", t.critic_lr),
            ("action_bound", t.action_bound),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&t.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", t.gamma)));
        }
        if t.tau > 1.0 {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", t.tau)));
        }
        if !(t.policy_noise >= 0.0 && t.noise_clip >= 0.0) {
            return Err(Error::Config("policy_noise and noise_clip must be non-negative".into()));
        }
        if t.policy_update_frequency == 0 || t.batch_size == 0 || t.hidden_width == 0 {
            return Err(Error::Config(
                "policy_update_frequency, batch_size and hidden_width must be positive".into(),
            ));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }

    fn layer_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(self.td3.hidden_width, self.td3.hidden_layers));
        sizes.push(output);
        sizes
    }
}

/// Online and target networks plus their optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub actor_target: Mlp,
    pub critic1_target: Mlp,
    pub critic2_target: Mlp,
    pub actor_opt: Adam,
    pub critic1_opt: Adam,
    pub critic2_opt: Adam,
    pub step: u64,
    state_dim: usize,
    action_dim: usize,
    action_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticLoss {
    /// Sum of both critics' mean squared TD errors.
    pub loss: f64,
    pub loss1: f64,
    pub loss2: f64,
    pub grad1: Gradient,
    pub grad2: Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerLoss {
    pub loss: f64,
    /// dL/d(policy action), one row per state.
    pub action_grad: Array2<f64>,
    /// Mean point-to-set distance for the nearest-neighbour regularizer.
    pub mean_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorLoss {
    pub loss: f64,
    /// `-mean Q1(s, pi(s))`, before weighting.
    pub td3_term: f64,
    pub reg_term: f64,
    pub lambda: Option<f64>,
    pub mean_distance: Option<f64>,
    pub grad: Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub lambda: Option<f64>,
    pub dc_distance: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
enum LambdaRule {
    Fixed(Option<f64>),
    /// `lambda_weight` of the critic values computed for the TD3 term.
    FromCritic,
}

/// Neighbours captured at retrieval time, `k` per batch row. The losses read
/// only these copies, so changing the index afterwards cannot reach a
/// gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    beta: f64,
    k: usize,
    /// Row `i * k + j` is the j-th neighbour of batch row i.
    states: Array2<f64>,
    actions: Array2<f64>,
    indices: Vec<usize>,
}

impl Neighbors {
    /// Looks up the `k` nearest dataset pairs of every `(states[i], actions[i])`.
    pub fn capture(index: &NeighborIndex, states: ArrayView2<f64>, actions: ArrayView2<f64>, k: usize) -> Result<Self> {
        check_batch_rows("neighbour query actions", actions.nrows(), states.nrows())?;
        let rows = states.nrows() * k;
        let mut out_s = Array2::zeros((rows, index.state_dim()));
        let mut out_a = Array2::zeros((rows, index.action_dim()));
        let mut indices = Vec::with_capacity(rows);
        for (s, a) in states.rows().into_iter().zip(actions.rows()) {
            for (_, j) in index.k_nearest_raw(&s.to_vec(), &a.to_vec(), k)? {
                let r = indices.len();
                out_s.row_mut(r).assign(&ArrayView1::from(index.state_of(j)));
                out_a.row_mut(r).assign(&ArrayView1::from(index.action_of(j)));
                indices.push(j);
            }
        }
        Ok(Self {
            beta: index.beta(),
            k,
            states: out_s,
            actions: out_a,
            indices,
        })
    }

    /// Neighbour values given directly; `states` and `actions` hold `k` rows
    /// per batch row.
    pub fn from_values(beta: f64, k: usize, states: Array2<f64>, actions: Array2<f64>) -> Result<Self> {
        if k == 0 || states.nrows() % k != 0 || states.nrows() != actions.nrows() {
            return Err(Error::Config(format!(
                "neighbour rows ({}, {}) do not split into groups of {k}",
                states.nrows(),
                actions.nrows()
            )));
        }
        Ok(Self {
            beta,
            k,
            indices: Vec::new(),
            states,
            actions,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Number of batch rows covered.
    pub fn len(&self) -> usize {
        self.states.nrows() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    /// Dataset indices, empty when built with [`Neighbors::from_values`].
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn state(&self, row: usize, j: usize) -> ArrayView1<'_, f64> {
        self.states.row(row * self.k + j)
    }

    pub fn action(&self, row: usize, j: usize) -> ArrayView1<'_, f64> {
        self.actions.row(row * self.k + j)
    }
}

/// `lambda = alpha * N / max(sum |q|, 1e-8)`.
pub fn lambda_weight(q_values: &[f64], alpha: f64) -> f64 {
    let n = q_values.len() as f64;
    let denom = q_values.iter().map(|q| q.abs()).sum::<f64>().max(LAMBDA_FLOOR);
    alpha * n / denom
}

pub fn critic_input(states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[states, actions]).expect("row counts agree")
}

fn check_batch_rows(context: &'static str, rows: usize, expected: usize) -> Result<()> {
    if rows != expected {
        return Err(Error::shape(context, expected, rows));
    }
    Ok(())
}

impl Agent {
    /// Fresh networks; targets start as exact copies of the online networks.
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, cfg: &PrdcConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let actor = Mlp::init(&cfg.layer_sizes(state_dim, action_dim), Some(POLICY_FINAL_INIT), rng)?;
        let critic_sizes = cfg.layer_sizes(state_dim + action_dim, 1);
        let critic1 = Mlp::init(&critic_sizes, None, rng)?;
        let critic2 = Mlp::init(&critic_sizes, None, rng)?;
        Ok(Self {
            actor_opt: Adam::new(&actor, cfg.td3.actor_lr)?,
            critic1_opt: Adam::new(&critic1, cfg.td3.critic_lr)?,
            critic2_opt: Adam::new(&critic2, cfg.td3.critic_lr)?,
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            step: 0,
            state_dim,
            action_dim,
            action_bound: cfg.td3.action_bound,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn action_bound(&self) -> f64 {
        self.action_bound
    }

    pub fn policy_head(&self) -> Head {
        Head::Tanh {
            bound: self.action_bound,
        }
    }

    /// Policy actions for a batch of (normalized) states.
    pub fn act_batch(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.actor.forward(states, self.policy_head())
    }

    pub fn q1(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        let q = self.critic1.forward(critic_input(states, actions).view(), Head::Linear)?;
        Ok(q.column(0).to_owned())
    }

    /// Draws target-smoothing noise: `clip(N(0, sigma^2), -c, c)`.
    pub fn sample_target_noise<R: Rng + ?Sized>(&self, rows: usize, cfg: &Td3Config, rng: &mut R) -> Array2<f64> {
        Array2::from_shape_fn((rows, self.action_dim), |_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * cfg.policy_noise).clamp(-cfg.noise_clip, cfg.noise_clip)
        })
    }

    /// `y = r + gamma (1 - d) min_i Q'_i(s', clip(pi'(s') + noise))`.
    pub fn critic_target_with_noise(&self, batch: &MiniBatch, noise: &Array2<f64>, cfg: &Td3Config) -> Result<Array1<f64>> {
        let n = batch.len();
        check_batch_rows("target noise", noise.nrows(), n)?;
        let bound = self.action_bound;
        let mut next_actions = self.actor_target.forward(batch.next_states.view(), self.policy_head())?;
        next_actions += noise;
        next_actions.mapv_inplace(|a| a.clamp(-bound, bound));
        let input = critic_input(batch.next_states.view(), next_actions.view());
        let q1 = self.critic1_target.forward(input.view(), Head::Linear)?;
        let q2 = self.critic2_target.forward(input.view(), Head::Linear)?;
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let q_min = q1[[i, 0]].min(q2[[i, 0]]);
            y[i] = batch.rewards[i] + cfg.gamma * (1.0 - batch.dones[i]) * q_min;
        }
        Ok(y)
    }

    pub fn critic_target<R: Rng + ?Sized>(&self, batch: &MiniBatch, cfg: &Td3Config, rng: &mut R) -> Result<Array1<f64>> {
        let noise = self.sample_target_noise(batch.len(), cfg, rng);
        self.critic_target_with_noise(batch, &noise, cfg)
    }

    /// Mean squared TD error of each critic against the shared target `y`.
    pub fn critic_loss(&self, batch: &MiniBatch, y: &Array1<f64>) -> Result<CriticLoss> {
        let n = batch.len();
        check_batch_rows("critic target", y.len(), n)?;
        let input = critic_input(batch.states.view(), batch.actions.view());
        let one = |net: &Mlp| -> Result<(f64, Gradient)> {
            let tape = net.forward_tape(input.view(), Head::Linear)?;
            let mut up = Array2::zeros((n, 1));
            let mut loss = 0.0;
            for i in 0..n {
                let err = tape.output()[[i, 0]] - y[i];
                loss += err * err;
                up[[i, 0]] = 2.0 * err / n as f64;
            }
            let g = net.param_gradient(&tape, up.view())?;
            Ok((loss / n as f64, g))
        };
        let (loss1, grad1) = one(&self.critic1)?;
        let (loss2, grad2) = one(&self.critic2)?;
        let loss = loss1 + loss2;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("critic loss at step {}", self.step)));
        }
        Ok(CriticLoss {
            loss,
            loss1,
            loss2,
            grad1,
            grad2,
        })
    }

    /// Gradient of `-mean Q1(s, a)` with respect to `a`, plus that mean.
    fn q_action_grad(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let n = states.nrows();
        let input = critic_input(states, actions);
        let tape = self.critic1.forward_tape(input.view(), Head::Linear)?;
        let up = Array2::from_elem((n, 1), -1.0 / n as f64);
        let input_grad = self.critic1.input_gradient(&tape, up.view())?;
        let q = tape.into_output().column(0).to_owned();
        Ok((q, input_grad.slice(s![.., self.state_dim..]).to_owned()))
    }

    /// Nearest-neighbour indices for every row, `k` per row.
    pub fn retrieve(&self, index: &NeighborIndex, states: ArrayView2<f64>, actions: ArrayView2<f64>, k: usize) -> Result<Neighbors> {
        if index.state_dim() != self.state_dim || index.action_dim() != self.action_dim {
            return Err(Error::Config(format!(
                "index built for dims ({}, {}) but agent uses ({}, {})",
                index.state_dim(),
                index.action_dim(),
                self.state_dim,
                self.action_dim
            )));
        }
        Neighbors::capture(index, states, actions, k)
    }

    /// Full actor objective for fixed `lambda` and fixed neighbours.
    ///
    /// `batch_actions` is only read by the BC regularizer; `neighbors` only by
    /// the dataset-constraint regularizers.
    pub fn actor_objective(
        &self,
        cfg: &PrdcConfig,
        states: ArrayView2<f64>,
        batch_actions: ArrayView2<f64>,
        neighbors: Option<&Neighbors>,
        lambda: Option<f64>,
    ) -> Result<ActorLoss> {
        let tape = self.actor.forward_tape(states, self.policy_head())?;
        self.actor_objective_on_tape(cfg, &tape, states, batch_actions, neighbors, LambdaRule::Fixed(lambda))
    }

    fn actor_objective_on_tape(
        &self,
        cfg: &PrdcConfig,
        tape: &Tape,
        states: ArrayView2<f64>,
        batch_actions: ArrayView2<f64>,
        neighbors: Option<&Neighbors>,
        rule: LambdaRule,
    ) -> Result<ActorLoss> {
        let actions = tape.output();
        let mut lambda = None;
        let n = actions.nrows();
        let mut action_grad = Array2::zeros(actions.raw_dim());
        let mut td3_term = 0.0;
        let mut loss = 0.0;
        if cfg.algorithm.uses_q() {
            let (q, q_grad) = self.q_action_grad(states, actions.view())?;
            td3_term = -q.sum() / n as f64;
            lambda = match rule {
                LambdaRule::Fixed(l) => l,
                LambdaRule::FromCritic => Some(lambda_weight(q.as_slice().expect("contiguous"), cfg.alpha)),
            };
            let weight = lambda.unwrap_or(1.0);
            loss += weight * td3_term;
            action_grad.scaled_add(weight, &q_grad);
        }
        let reg = match cfg.regularizer() {
            Regularizer::None => None,
            Regularizer::Bc => Some(bc_loss(actions.view(), batch_actions)?),
            Regularizer::PrdcNearest | Regularizer::KnnAverage => {
                let nb = neighbors.ok_or_else(|| {
                    Error::Config(format!("{} needs retrieved neighbours", cfg.algorithm.name()))
                })?;
                Some(if cfg.regularizer() == Regularizer::PrdcNearest {
                    dc_loss(states, actions.view(), nb)?
                } else {
                    knn_average_loss(actions.view(), nb)?
                })
            }
        };
        let (reg_term, mean_distance) = match reg {
            Some(r) => {
                loss += r.loss;
                action_grad += &r.action_grad;
                (r.loss, r.mean_distance)
            }
            None => (0.0, None),
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("actor loss at step {}", self.step)));
        }
        let grad = self.actor.param_gradient(tape, action_grad.view())?;
        Ok(ActorLoss {
            loss,
            td3_term,
            reg_term,
            lambda,
            mean_distance,
            grad,
        })
    }

    /// Actor loss for a batch: computes `lambda` and neighbours from the
    /// current policy, then the objective and its gradient.
    pub fn actor_loss(&self, batch: &MiniBatch, cfg: &PrdcConfig, index: Option<&NeighborIndex>) -> Result<ActorLoss> {
        let states = batch.states.view();
        let tape = self.actor.forward_tape(states, self.policy_head())?;
        let actions = tape.output().view();
        let rule = match cfg.algorithm {
            Algorithm::Td3 | Algorithm::Bc => LambdaRule::Fixed(None),
            _ => LambdaRule::FromCritic,
        };
        let neighbors = if cfg.algorithm.needs_index() {
            let index = index.ok_or_else(|| {
                Error::Config(format!("{} needs a neighbour index", cfg.algorithm.name()))
            })?;
            let k = if cfg.regularizer() == Regularizer::KnnAverage { cfg.k } else { 1 };
            Some(self.retrieve(index, states, actions, k)?)
        } else {
            None
        };
        self.actor_objective_on_tape(
            cfg,
            &tape,
            states,
            batch.actions.view(),
            neighbors.as_ref(),
            rule,
        )
    }

    /// One iteration: critic update every call, actor and target updates
    /// every `policy_update_frequency` calls.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        ds: &OfflineDataset,
        index: Option<&NeighborIndex>,
        cfg: &PrdcConfig,
        rng: &mut R,
    ) -> Result<StepMetrics> {
        if cfg.algorithm.needs_index() && index.is_none() {
            return Err(Error::Config(format!("{} needs a neighbour index", cfg.algorithm.name())));
        }
        self.step += 1;
        let batch = ds.sample_batch(cfg.td3.batch_size, rng)?;
        let y = self.critic_target(&batch, &cfg.td3, rng)?;
        let critic = self.critic_loss(&batch, &y)?;
        self.critic1_opt.step(&mut self.critic1, &critic.grad1)?;
        self.critic2_opt.step(&mut self.critic2, &critic.grad2)?;

        let mut metrics = StepMetrics {
            step: self.step,
            critic_loss: critic.loss,
            actor_loss: None,
            lambda: None,
            dc_distance: None,
        };
        if self.step % cfg.td3.policy_update_frequency == 0 {
            let actor = self.actor_loss(&batch, cfg, index)?;
            self.actor_opt.step(&mut self.actor, &actor.grad)?;
            let tau = cfg.td3.tau;
            polyak_blend(&mut self.critic1_target, &self.critic1, tau)?;
            polyak_blend(&mut self.critic2_target, &self.critic2, tau)?;
            polyak_blend(&mut self.actor_target, &self.actor, tau)?;
            metrics.actor_loss = Some(actor.loss);
            metrics.lambda = actor.lambda;
            metrics.dc_distance = actor.mean_distance;
        }
        Ok(metrics)
    }

    /// Wraps the actor as an environment-unit policy.
    pub fn policy<'a>(&'a self, normalizer: &'a Normalizer) -> AgentPolicy<'a> {
        AgentPolicy {
            actor: &self.actor,
            normalizer,
            head: self.policy_head(),
        }
    }
}

/// Policy acting on raw environment states; normalizes before the actor.
pub struct AgentPolicy<'a> {
    actor: &'a Mlp,
    normalizer: &'a Normalizer,
    head: Head,
}

impl AgentPolicy<'_> {
    pub fn action(&self, state: &[f64]) -> Vec<f64> {
        let x = self.normalizer.normalize(state);
        self.actor.forward_one(&x, self.head).expect("state dims match the actor")
    }
}

impl Policy for AgentPolicy<'_> {
    fn act(&self, state: &[f64]) -> f64 {
        self.action(state)[0]
    }
}

/// `mean_i |(beta s_i) ++ a_i - (beta s_hat) ++ a_hat|` against the first
/// captured neighbour of each row. Only the action block depends on the
/// policy; at distance 0 the gradient is taken to be 0.
pub fn dc_loss(states: ArrayView2<f64>, actions: ArrayView2<f64>, neighbors: &Neighbors) -> Result<RegularizerLoss> {
    let n = actions.nrows();
    check_batch_rows("dc neighbours", neighbors.len(), n)?;
    check_batch_rows("dc states", states.nrows(), n)?;
    let beta = neighbors.beta();
    let mut grad = Array2::zeros(actions.raw_dim());
    let mut total = 0.0;
    for i in 0..n {
        let (ns, na) = (neighbors.state(i, 0), neighbors.action(i, 0));
        let mut d2 = 0.0;
        for (x, y) in states.row(i).iter().zip(ns) {
            let d = beta * x - beta * y;
            d2 += d * d;
        }
        for (x, y) in actions.row(i).iter().zip(na) {
            let d = x - y;
            d2 += d * d;
        }
        let dist = d2.sqrt();
        total += dist;
        if dist > 0.0 {
            for (c, (x, y)) in actions.row(i).iter().zip(na).enumerate() {
                grad[[i, c]] = (x - y) / dist / n as f64;
            }
        }
    }
    let mean = total / n as f64;
    Ok(RegularizerLoss {
        loss: mean,
        action_grad: grad,
        mean_distance: Some(mean),
    })
}

/// `mean_i |a_i - a_bar_i|` where `a_bar_i` averages the actions of row i's
/// captured neighbours.
pub fn knn_average_loss(actions: ArrayView2<f64>, neighbors: &Neighbors) -> Result<RegularizerLoss> {
    let n = actions.nrows();
    check_batch_rows("knn neighbours", neighbors.len(), n)?;
    let ad = actions.ncols();
    let k = neighbors.k();
    let mut grad = Array2::zeros(actions.raw_dim());
    let mut total = 0.0;
    let mut mean_action = vec![0.0; ad];
    for i in 0..n {
        mean_action.iter_mut().for_each(|m| *m = 0.0);
        for j in 0..k {
            for (m, a) in mean_action.iter_mut().zip(neighbors.action(i, j)) {
                *m += a;
            }
        }
        mean_action.iter_mut().for_each(|m| *m /= k as f64);
        let dist = actions
            .row(i)
            .iter()
            .zip(&mean_action)
            .map(|(a, m)| (a - m) * (a - m))
            .sum::<f64>()
            .sqrt();
        total += dist;
        if dist > 0.0 {
            for c in 0..ad {
                grad[[i, c]] = (actions[[i, c]] - mean_action[c]) / dist / n as f64;
            }
        }
    }
    Ok(RegularizerLoss {
        loss: total / n as f64,
        action_grad: grad,
        mean_distance: None,
    })
}

/// `mean_i |a_i - a_data_i|^2`.
pub fn bc_loss(actions: ArrayView2<f64>, batch_actions: ArrayView2<f64>) -> Result<RegularizerLoss> {
    if actions.dim() != batch_actions.dim() {
        return Err(Error::shape(
            "bc actions",
            format!("{:?}", actions.dim()),
            format!("{:?}", batch_actions.dim()),
        ));
    }
    let n = actions.nrows() as f64;
    let diff = &actions - &batch_actions;
    let loss = diff.mapv(|d| d * d).sum() / n;
    Ok(RegularizerLoss {
        loss,
        action_grad: diff.mapv(|d| 2.0 * d / n),
        mean_distance: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Transition;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(algorithm: Algorithm) -> PrdcConfig {
        PrdcConfig {
            td3: Td3Config {
                batch_size: 8,
                hidden_width: 8,
                ..Td3Config::default()
            },
            algorithm,
            ..PrdcConfig::default()
        }
    }

    fn line_dataset(points: &[(f64, f64)]) -> OfflineDataset {
        OfflineDataset::new(
            "t",
            1,
            1,
            points
                .iter()
                .map(|&(s, a)| Transition {
                    state: vec![s],
                    action: vec![a],
                    reward: 0.0,
                    next_state: vec![s],
                    done: false,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn lambda_cases() {
        let q = vec![1.0; 256];
        assert_eq!(lambda_weight(&q, 2.5), 2.5);
        let zeros = vec![0.0; 256];
        let l = lambda_weight(&zeros, 2.5);
        assert_eq!(l, 2.5 * 256.0 / 1e-8);
        assert!(l.is_finite());
        let q2: Vec<f64> = q.iter().map(|v| v * 2.0).collect();
        assert_eq!(lambda_weight(&q2, 2.5), 1.25);
        let mixed = vec![-1.0, 1.0, -1.0, 1.0];
        assert_eq!(lambda_weight(&mixed, 2.5), 2.5);
    }

    #[test]
    fn algorithm_parsing() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert_eq!("TD3+BC".parse::<Algorithm>().unwrap(), Algorithm::Td3Bc);
        assert!("sac".parse::<Algorithm>().is_err());
    }

    #[test]
    fn targets_start_equal_to_online() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let agent = Agent::new(1, 1, &small_cfg(Algorithm::Prdc), &mut rng).unwrap();
        assert_eq!(agent.actor, agent.actor_target);
        assert_eq!(agent.critic1, agent.critic1_target);
        assert_eq!(agent.critic2, agent.critic2_target);
        assert_eq!(agent.step, 0);
    }

    fn zero_critics(agent: &mut Agent) {
        for net in [
            &mut agent.critic1,
            &mut agent.critic2,
            &mut agent.critic1_target,
            &mut agent.critic2_target,
        ] {
            *net = Mlp::zeros(net.sizes()).unwrap();
        }
    }

    /// Critic whose output is the constant `c` (all weights zero, last bias c).
    fn constant_critic(sizes: &[usize], c: f64) -> Mlp {
        let mut net = Mlp::zeros(sizes).unwrap();
        let last = net.num_layers() - 1;
        net.biases[last][0] = c;
        net
    }

    #[test]
    fn critic_target_terminal_and_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_cfg(Algorithm::Td3);
        let mut agent = Agent::new(1, 1, &cfg, &mut rng).unwrap();
        let ds = OfflineDataset::new(
            "t",
            1,
            1,
            vec![
                Transition { state: vec![0.0], action: vec![1.0], reward: 7.0, next_state: vec![1.0], done: true },
                Transition { state: vec![0.0], action: vec![1.0], reward: 100.0, next_state: vec![1.0], done: false },
                Transition { state: vec![0.0], action: vec![1.0], reward: 0.0, next_state: vec![1.0], done: false },
            ],
        )
        .unwrap();
        let batch = ds.gather(&[0, 1, 2]);
        let noise = Array2::zeros((3, 1));
        // Random critics: terminal rows still give y = r.
        let y = agent.critic_target_with_noise(&batch, &noise, &cfg.td3).unwrap();
        assert_eq!(y[0], 7.0);
        zero_critics(&mut agent);
        let y = agent.critic_target_with_noise(&batch, &noise, &cfg.td3).unwrap();
        assert_eq!((y[1], y[2]), (100.0, 0.0));
        let sizes = agent.critic1.sizes().to_vec();
        agent.critic1_target = constant_critic(&sizes, 50.0);
        agent.critic2_target = constant_critic(&sizes, 80.0);
        let y = agent.critic_target_with_noise(&batch, &noise, &cfg.td3).unwrap();
        assert!((y[2] - 49.5).abs() < 1e-12);
        assert_eq!(y[0], 7.0);
    }

    #[test]
    fn target_noise_is_clipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = small_cfg(Algorithm::Td3);
        cfg.td3.policy_noise = 5.0;
        let agent = Agent::new(1, 1, &cfg, &mut rng).unwrap();
        let noise = agent.sample_target_noise(2000, &cfg.td3, &mut rng);
        assert!(noise.iter().all(|v| v.abs() <= cfg.td3.noise_clip));
        assert!(noise.iter().any(|v| v.abs() == cfg.td3.noise_clip));
    }

    #[test]
    fn critic_loss_constant_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_cfg(Algorithm::Td3);
        let mut agent = Agent::new(1, 1, &cfg, &mut rng).unwrap();
        let sizes = agent.critic1.sizes().to_vec();
        agent.critic1 = constant_critic(&sizes, 3.0);
        agent.critic2 = constant_critic(&sizes, 3.0);
        let ds = line_dataset(&[(0.0, 1.0), (1.0, -1.0)]);
        let batch = ds.gather(&[0, 1]);
        let l = agent.critic_loss(&batch, &array![1.0, 1.0]).unwrap();
        assert_eq!((l.loss1, l.loss2, l.loss), (4.0, 4.0, 8.0));
        let l = agent.critic_loss(&batch, &array![3.0, 3.0]).unwrap();
        assert_eq!(l.loss, 0.0);
        assert!(agent.critic_loss(&batch, &array![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn dc_loss_geometry() {
        // Singleton dataset, beta 1, batch state equals the stored state.
        let ds = line_dataset(&[(0.4, 0.2)]);
        let index = NeighborIndex::build(&ds, 1.0).unwrap();
        let states = array![[0.4], [0.4]];
        let actions = array![[0.2 + 0.3], [0.2 - 0.5]];
        let nb = Neighbors::capture(&index, states.view(), actions.view(), 1).unwrap();
        assert_eq!(nb.indices(), &[0, 0]);
        let r = dc_loss(states.view(), actions.view(), &nb).unwrap();
        assert!((r.loss - 0.4).abs() < 1e-12);
        assert!((r.action_grad[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((r.action_grad[[1, 0]] + 0.5).abs() < 1e-12);

        let exact = array![[0.2], [0.2]];
        let r = dc_loss(states.view(), exact.view(), &nb).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.action_grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn knn_average_cases() {
        let nb = |actions: &[f64]| {
            let k = actions.len();
            Neighbors::from_values(
                1.0,
                k,
                Array2::zeros((k, 1)),
                Array2::from_shape_vec((k, 1), actions.to_vec()).unwrap(),
            )
            .unwrap()
        };
        let a = array![[0.0]];
        let r = knn_average_loss(a.view(), &nb(&[-1.0, 1.0])).unwrap();
        assert_eq!(r.loss, 0.0);
        let a = array![[0.5]];
        let r = knn_average_loss(a.view(), &nb(&[0.5])).unwrap();
        assert_eq!(r.loss, 0.0);
        let a = array![[0.25]];
        let r = knn_average_loss(a.view(), &nb(&[-1.0, 1.0, 0.5])).unwrap();
        assert!((r.loss - (0.25 - 0.5 / 3.0)).abs() < 1e-12);
        assert!(Neighbors::from_values(1.0, 2, Array2::zeros((3, 1)), Array2::zeros((3, 1))).is_err());

        let ds = line_dataset(&[(0.0, -1.0), (0.0, 1.0), (5.0, 0.5)]);
        let index = NeighborIndex::build(&ds, 1.0).unwrap();
        let captured = Neighbors::capture(&index, array![[0.0]].view(), array![[0.1]].view(), 2).unwrap();
        let r = knn_average_loss(array![[0.0]].view(), &captured).unwrap();
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn missing_index_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = small_cfg(Algorithm::Prdc);
        let mut agent = Agent::new(1, 1, &cfg, &mut rng).unwrap();
        let ds = line_dataset(&[(0.0, 1.0)]);
        assert!(matches!(
            agent.train_step(&ds, None, &cfg, &mut rng),
            Err(Error::Config(_))
        ));
        let batch = ds.gather(&[0]);
        assert!(agent.actor_loss(&batch, &cfg, None).is_err());
    }

    #[test]
    fn td3_with_constant_critic_has_zero_actor_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small_cfg(Algorithm::Td3);
        let mut agent = Agent::new(1, 1, &cfg, &mut rng).unwrap();
        agent.critic1 = constant_critic(&agent.critic1.sizes().to_vec(), 4.0);
        let ds = line_dataset(&[(0.0, 1.0), (1.0, 0.3)]);
        let l = agent.actor_loss(&ds.gather(&[0, 1]), &cfg, None).unwrap();
        assert_eq!(l.td3_term, -4.0);
        assert_eq!(l.grad.max_abs(), 0.0);
    }

    #[test]
    fn odd_steps_leave_actor_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cfg = small_cfg(Algorithm::Prdc);
        cfg.td3.tau = 1.0;
        let ds = line_dataset(&[(0.0, 1.0), (1.0, -1.0), (2.0, 1.0)]);
        let index = NeighborIndex::build(&ds, cfg.beta).unwrap();
        let mut agent = Agent::new(1, 1, &cfg, &mut rng).unwrap();
        let before = agent.clone();
        let m = agent.train_step(&ds, Some(&index), &cfg, &mut rng).unwrap();
        assert_eq!(m.step, 1);
        assert!(m.actor_loss.is_none());
        assert_eq!(agent.actor, before.actor);
        assert_ne!(agent.critic1, before.critic1);
        assert_eq!(agent.critic1_target, before.critic1_target);
        let m = agent.train_step(&ds, Some(&index), &cfg, &mut rng).unwrap();
        assert!(m.actor_loss.is_some() && m.lambda.is_some() && m.dc_distance.is_some());
        assert_ne!(agent.actor, before.actor);
        // tau = 1 copies online into target.
        assert_eq!(agent.actor_target, agent.actor);
        assert_eq!(agent.critic1_target, agent.critic1);
        assert_eq!(agent.critic2_target, agent.critic2);
    }

    #[test]
    fn target_lag_follows_blend_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = small_cfg(Algorithm::Td3Bc);
        let ds = line_dataset(&[(0.0, 1.0), (1.0, -1.0), (2.0, 1.0), (3.0, 1.0)]);
        let mut agent = Agent::new(1, 1, &cfg, &mut rng).unwrap();
        for _ in 0..6 {
            let prev_target = agent.critic1_target.clone();
            agent.train_step(&ds, None, &cfg, &mut rng).unwrap();
            if agent.step % 2 == 0 {
                let tau = cfg.td3.tau;
                for ((t, p), o) in agent
                    .critic1_target
                    .params()
                    .zip(prev_target.params())
                    .zip(agent.critic1.params())
                {
                    assert!((t - (tau * o + (1.0 - tau) * p)).abs() < 1e-15);
                    assert!((t - o).abs() <= (1.0 - tau) * (p - o).abs() + 1e-15);
                }
            } else {
                assert_eq!(agent.critic1_target, prev_target);
            }
        }
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let run = || {
            let cfg = small_cfg(Algorithm::Prdc);
            let ds = line_dataset(&[(0.0, 1.0), (1.0, -1.0), (2.0, 1.0), (3.0, -1.0)]);
            let index = NeighborIndex::build(&ds, cfg.beta).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mut agent = Agent::new(1, 1, &cfg, &mut rng).unwrap();
            let mut log = Vec::new();
            for _ in 0..10 {
                let m = agent.train_step(&ds, Some(&index), &cfg, &mut rng).unwrap();
                log.push(format!("{m:?}"));
            }
            (log, agent)
        };
        let (a, agent_a) = run();
        let (b, agent_b) = run();
        assert_eq!(a, b);
        assert_eq!(agent_a, agent_b);
    }

    #[test]
    fn lambda_zero_reduces_to_dc() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = small_cfg(Algorithm::Prdc);
        let ds = line_dataset(&[(0.0, 1.0), (1.0, -1.0), (2.0, 0.5)]);
        let index = NeighborIndex::build(&ds, cfg.beta).unwrap();
        let agent = Agent::new(1, 1, &cfg, &mut rng).unwrap();
        let batch = ds.gather(&[0, 1, 2]);
        let actions = agent.act_batch(batch.states.view()).unwrap();
        let nb = agent.retrieve(&index, batch.states.view(), actions.view(), 1).unwrap();
        let l = agent
            .actor_objective(&cfg, batch.states.view(), batch.actions.view(), Some(&nb), Some(0.0))
            .unwrap();
        let dc = dc_loss(batch.states.view(), actions.view(), &nb).unwrap();
        assert_eq!(l.loss, dc.loss);
        let tape = agent.actor.forward_tape(batch.states.view(), agent.policy_head()).unwrap();
        let (g, _) = agent.actor.backward(&tape, dc.action_grad.view()).unwrap();
        assert_eq!(l.grad, g);
    }
}
