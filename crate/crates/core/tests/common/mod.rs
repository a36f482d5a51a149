//! Property suites shared by the integration tests and the acceptance report.

#![allow(dead_code)]

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use prdc::agents::{critic_input, Agent, Algorithm, Neighbors, PrdcConfig};
use prdc::dataset::{MiniBatch, OfflineDataset, Transition};
use prdc::neighbors::{brute_force_nearest, NeighborIndex};
use prdc::nn::Mlp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_SCALE_FLOOR: f64 = 1e-6;
pub const TINY_WIDTH: usize = 8;
/// Cases with a hidden pre-activation closer than this to zero are redrawn,
/// so a finite-difference step never crosses a ReLU kink.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Default)]
pub struct FdReport {
    pub cases: usize,
    pub entries: usize,
    pub failures: usize,
    pub worst: f64,
    /// Draws rejected for lying near a ReLU kink.
    pub redrawn: usize,
}

impl FdReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(FD_SCALE_FLOOR);
        let rel = (analytic - numeric).abs() / scale;
        self.entries += 1;
        self.worst = self.worst.max(rel);
        if rel > FD_RTOL {
            self.failures += 1;
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

/// Central differences of `f` over every parameter of `net`, compared with
/// `analytic` (in `Mlp::params` order).
fn check_params(report: &mut FdReport, net: &Mlp, analytic: Vec<f64>, f: impl Fn(&Mlp) -> f64) {
    let mut probe = net.clone();
    for (i, g) in analytic.into_iter().enumerate() {
        let original = probe.params().nth(i).expect("parameter exists");
        *probe.params_mut().nth(i).expect("parameter exists") = original + FD_STEP;
        let up = f(&probe);
        *probe.params_mut().nth(i).expect("parameter exists") = original - FD_STEP;
        let down = f(&probe);
        *probe.params_mut().nth(i).expect("parameter exists") = original;
        report.record(g, (up - down) / (2.0 * FD_STEP));
    }
}

pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, state_dim: usize, action_dim: usize) -> OfflineDataset {
    let transitions = (0..n)
        .map(|_| Transition {
            state: (0..state_dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            action: (0..action_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            reward: rng.random_range(-1.0..1.0),
            next_state: (0..state_dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            done: rng.random_bool(0.2),
        })
        .collect();
    OfflineDataset::new("random", state_dim, action_dim, transitions).expect("valid dataset")
}

pub fn tiny_config(algorithm: Algorithm, rng: &mut ChaCha8Rng) -> PrdcConfig {
    let mut cfg = PrdcConfig {
        algorithm,
        beta: rng.random_range(0.5..4.0),
        k: rng.random_range(1..=4),
        ..Default::default()
    };
    cfg.td3.hidden_width = TINY_WIDTH;
    cfg.td3.batch_size = 16;
    cfg
}

/// A random agent whose networks have moved away from the near-zero policy
/// initialisation, so the tanh head is exercised away from the origin.
pub fn tiny_agent(cfg: &PrdcConfig, state_dim: usize, action_dim: usize, rng: &mut ChaCha8Rng) -> Agent {
    let mut agent = Agent::new(state_dim, action_dim, cfg, rng).expect("valid agent");
    for p in agent.actor.params_mut() {
        *p += rng.random_range(-0.5..0.5);
    }
    agent
}

/// Smallest |pre-activation| over the hidden layers of `net` on `input`.
pub fn relu_margin(net: &Mlp, input: ArrayView2<f64>) -> f64 {
    let mut x = input.to_owned();
    let mut margin = f64::INFINITY;
    let hidden = net.weights.len() - 1;
    for (w, b) in net.weights.iter().zip(&net.biases).take(hidden) {
        let z = x.dot(&w.t()) + b;
        margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
        x = z.mapv(|v| v.max(0.0));
    }
    margin
}

struct Case {
    cfg: PrdcConfig,
    ds: OfflineDataset,
    batch: MiniBatch,
    agent: Agent,
}

impl Case {
    fn smooth_for_critic(&self) -> bool {
        let input = critic_input(self.batch.states.view(), self.batch.actions.view());
        relu_margin(&self.agent.critic1, input.view()) > KINK_MARGIN
            && relu_margin(&self.agent.critic2, input.view()) > KINK_MARGIN
    }

    fn smooth_for_actor(&self) -> bool {
        let states = self.batch.states.view();
        let actions = self.agent.act_batch(states).expect("actions");
        relu_margin(&self.agent.actor, states) > KINK_MARGIN
            && relu_margin(&self.agent.critic1, critic_input(states, actions.view()).view()) > KINK_MARGIN
    }
}

/// Draws cases from consecutive seeds until one satisfies `smooth`.
fn smooth_case(algorithm: Algorithm, seed: &mut u64, report: &mut FdReport, smooth: fn(&Case) -> bool) -> Case {
    loop {
        let case = random_case(algorithm, *seed);
        *seed += 1;
        if smooth(&case) {
            return case;
        }
        report.redrawn += 1;
    }
}

fn random_case(algorithm: Algorithm, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state_dim = rng.random_range(1..=3);
    let action_dim = rng.random_range(1..=2);
    let cfg = tiny_config(algorithm, &mut rng);
    let ds = random_dataset(&mut rng, 40, state_dim, action_dim);
    let batch = ds.sample_batch(cfg.td3.batch_size, &mut rng).expect("batch");
    let agent = tiny_agent(&cfg, state_dim, action_dim, &mut rng);
    Case { cfg, ds, batch, agent }
}

/// Critic TD loss against both critics' parameters with the target fixed.
pub fn critic_gradient_suite(cases: usize, seed: u64) -> FdReport {
    let mut report = FdReport::default();
    let mut next = seed;
    for c in 0..cases {
        let Case { cfg, batch, agent, .. } = smooth_case(Algorithm::Prdc, &mut next, &mut report, Case::smooth_for_critic);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ c as u64);
        let y = agent.critic_target(&batch, &cfg.td3, &mut rng).expect("target");
        let loss = agent.critic_loss(&batch, &y).expect("critic loss");
        check_params(&mut report, &agent.critic1, loss.grad1.iter().collect(), |net| {
            let mut a = agent.clone();
            a.critic1 = net.clone();
            a.critic_loss(&batch, &y).expect("critic loss").loss
        });
        check_params(&mut report, &agent.critic2, loss.grad2.iter().collect(), |net| {
            let mut a = agent.clone();
            a.critic2 = net.clone();
            a.critic_loss(&batch, &y).expect("critic loss").loss
        });
        report.cases += 1;
    }
    report
}

/// Actor objective for `algorithm` with neighbours retrieved once and then
/// frozen; `lambda` is fixed so the objective is a plain function of the
/// actor parameters.
pub fn actor_gradient_suite(algorithm: Algorithm, lambda: Option<f64>, cases: usize, seed: u64) -> FdReport {
    let mut report = FdReport::default();
    let mut next = seed;
    for _ in 0..cases {
        let Case { cfg, ds, batch, agent } = smooth_case(algorithm, &mut next, &mut report, Case::smooth_for_actor);
        let index = algorithm
            .needs_index()
            .then(|| NeighborIndex::build(&ds, cfg.beta).expect("index"));
        let neighbors = index.as_ref().map(|idx| {
            let actions = agent.act_batch(batch.states.view()).expect("actions");
            agent
                .retrieve(idx, batch.states.view(), actions.view(), cfg.k)
                .expect("neighbours")
        });
        let objective = |a: &Agent| {
            a.actor_objective(
                &cfg,
                batch.states.view(),
                batch.actions.view(),
                neighbors.as_ref(),
                lambda,
            )
            .expect("actor objective")
        };
        let analytic = objective(&agent).grad.iter().collect();
        check_params(&mut report, &agent.actor, analytic, |net| {
            let mut a = agent.clone();
            a.actor = net.clone();
            objective(&a).loss
        });
        report.cases += 1;
    }
    report
}

/// Largest deviation between the combined actor gradient and
/// `lambda * (TD3 gradient) + (DC gradient)` over random cases.
pub fn linearity_gap(cases: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let Case { cfg, ds, batch, agent } = random_case(Algorithm::Prdc, seed + c as u64 * 1000);
        let index = NeighborIndex::build(&ds, cfg.beta).expect("index");
        let actions = agent.act_batch(batch.states.view()).expect("actions");
        let nb = agent.retrieve(&index, batch.states.view(), actions.view(), 1).expect("neighbours");
        let lambda = 0.1 + c as f64 * 0.37;
        let run = |cfg: &PrdcConfig, l: Option<f64>| {
            agent
                .actor_objective(cfg, batch.states.view(), batch.actions.view(), Some(&nb), l)
                .expect("objective")
                .grad
        };
        let combined = run(&cfg, Some(lambda));
        let td3_cfg = PrdcConfig {
            algorithm: Algorithm::Td3,
            ..cfg.clone()
        };
        let td3 = run(&td3_cfg, None);
        let dc = run(&cfg, Some(0.0));
        for ((g, t), d) in combined.iter().zip(td3.iter()).zip(dc.iter()) {
            worst = worst.max((g - (lambda * t + d)).abs());
        }
    }
    worst
}

pub struct LeakCheck {
    /// Gradient with the captured neighbours after the dataset changed.
    pub frozen_unchanged: bool,
    /// Gradient after re-retrieving from the changed dataset.
    pub recaptured_changed: bool,
}

/// Moves every retrieved neighbour in the dataset after retrieval and
/// compares actor gradients.
pub fn neighbour_leak_check(seed: u64) -> LeakCheck {
    let Case { cfg, ds, batch, agent } = random_case(Algorithm::Prdc, seed);
    let index = NeighborIndex::build(&ds, cfg.beta).expect("index");
    let actions = agent.act_batch(batch.states.view()).expect("actions");
    let nb: Neighbors = agent.retrieve(&index, batch.states.view(), actions.view(), 1).expect("neighbours");
    let grad = |nb: &Neighbors| {
        agent
            .actor_objective(&cfg, batch.states.view(), batch.actions.view(), Some(nb), Some(0.7))
            .expect("objective")
            .grad
    };
    let before = grad(&nb);
    let mut moved = ds.transitions().to_vec();
    for &j in nb.indices() {
        for a in &mut moved[j].action {
            *a = (*a * 0.5) - 0.25;
        }
        for x in &mut moved[j].state {
            *x += 1e-3;
        }
    }
    let moved = OfflineDataset::new("random", ds.state_dim(), ds.action_dim(), moved).expect("valid dataset");
    let moved_index = NeighborIndex::build(&moved, cfg.beta).expect("index");
    drop(index);
    let frozen = grad(&nb);
    let recaptured = agent
        .retrieve(&moved_index, batch.states.view(), actions.view(), 1)
        .expect("neighbours");
    LeakCheck {
        frozen_unchanged: before == frozen,
        recaptured_changed: grad(&recaptured) != before,
    }
}

#[derive(Debug, Default)]
pub struct OracleReport {
    pub cases: usize,
    pub queries: usize,
    pub mismatches: usize,
    pub bound_violations: usize,
    pub seconds: f64,
}

/// KD-tree against linear scan on randomized (dataset, query, k, beta) cases,
/// checking the component bounds on every returned neighbour.
pub fn oracle_suite(cases: usize, seed: u64) -> OracleReport {
    let start = Instant::now();
    let mut report = OracleReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cases {
        let dims = rng.random_range(2..=8);
        let action_dim = rng.random_range(1..dims);
        let state_dim = dims - action_dim;
        let n = rng.random_range(1..=2000);
        let mut ds = random_dataset(&mut rng, n, state_dim, action_dim);
        if rng.random_bool(0.3) {
            ds = with_duplicates(ds, &mut rng);
        }
        let beta = 10f64.powf(rng.random_range(-2.0..2.0));
        let k = [1, 2, 4][rng.random_range(0..3)].min(ds.len());
        let index = NeighborIndex::build(&ds, beta).expect("index");
        let state: Vec<f64> = (0..state_dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let action: Vec<f64> = (0..action_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let fast = index.k_nearest(&state, &action, k).expect("kd query");
        let slow = brute_force_nearest(&ds, beta, &state, &action, k).expect("scan");
        report.cases += 1;
        report.queries += fast.len();
        let same = fast.len() == slow.len()
            && fast
                .iter()
                .zip(&slow)
                .all(|(f, s)| f.source_index == s.source_index && (f.distance - s.distance).abs() <= 1e-9);
        if !same {
            report.mismatches += 1;
        }
        for r in &fast {
            let (state_gap, action_gap) = index.component_gaps(&state, &action, r.source_index);
            if state_gap > r.distance || action_gap > r.distance {
                report.bound_violations += 1;
            }
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    report
}

/// Copies some transitions so that exact distance ties occur.
fn with_duplicates(ds: OfflineDataset, rng: &mut ChaCha8Rng) -> OfflineDataset {
    let mut t = ds.transitions().to_vec();
    let extra = rng.random_range(1..=t.len().min(50));
    for _ in 0..extra {
        let i = rng.random_range(0..t.len());
        t.push(t[i].clone());
    }
    OfflineDataset::new("random", ds.state_dim(), ds.action_dim(), t).expect("valid dataset")
}

pub fn batch_states(rows: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((rows.len(), 1), rows.to_vec()).expect("column")
}
