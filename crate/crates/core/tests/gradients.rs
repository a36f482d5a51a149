mod common;

use common::{actor_gradient_suite, critic_gradient_suite, linearity_gap, neighbour_leak_check, FdReport};
use prdc::agents::{lambda_weight, Agent, Algorithm, PrdcConfig};
use prdc::dataset::{OfflineDataset, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 50;

fn assert_report(name: &str, r: &FdReport) {
    assert!(r.cases >= CASES, "{name}: only {} cases", r.cases);
    assert!(r.passed(), "{name}: {} of {} entries off, worst relative error {:.3e}", r.failures, r.entries, r.worst);
}

#[test]
fn critic_td_loss_matches_finite_differences() {
    assert_report("critic", &critic_gradient_suite(CASES, 100));
}

#[test]
fn td3_actor_term_matches_finite_differences() {
    assert_report("td3 actor", &actor_gradient_suite(Algorithm::Td3, None, CASES, 200));
}

#[test]
fn dc_loss_with_frozen_neighbour_matches_finite_differences() {
    assert_report("dc", &actor_gradient_suite(Algorithm::Prdc, Some(0.0), CASES, 300));
}

#[test]
fn knn_average_loss_matches_finite_differences() {
    assert_report("knn", &actor_gradient_suite(Algorithm::PrdcKnn, Some(0.0), CASES, 400));
}

#[test]
fn weighted_objectives_match_finite_differences() {
    assert_report("prdc", &actor_gradient_suite(Algorithm::Prdc, Some(0.8), CASES, 500));
    assert_report("td3+bc", &actor_gradient_suite(Algorithm::Td3Bc, Some(0.8), CASES, 600));
    assert_report("bc", &actor_gradient_suite(Algorithm::Bc, None, CASES, 700));
}

#[test]
fn combined_gradient_is_linear_in_its_parts() {
    let gap = linearity_gap(CASES, 800);
    assert!(gap <= 1e-10, "gap {gap:e}");
}

#[test]
fn changing_the_dataset_after_retrieval_does_not_reach_the_gradient() {
    for seed in 0..20 {
        let check = neighbour_leak_check(900 + seed);
        assert!(check.frozen_unchanged, "seed {seed}");
        assert!(check.recaptured_changed, "seed {seed}: perturbation had no effect at all");
    }
}

#[test]
fn lambda_is_alpha_when_every_q_has_unit_magnitude() {
    let q: Vec<f64> = (0..256).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
    assert_eq!(lambda_weight(&q, 2.5), 2.5);
}

fn scaled_setup(seed: u64) -> (PrdcConfig, Agent, prdc::MiniBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = PrdcConfig {
        algorithm: Algorithm::Td3Bc,
        ..Default::default()
    };
    cfg.td3.hidden_width = 8;
    let t = (0..64)
        .map(|_| Transition {
            state: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            action: vec![rng.random_range(-1.0..1.0)],
            reward: 0.0,
            next_state: vec![0.0, 0.0],
            done: false,
        })
        .collect();
    let ds = OfflineDataset::new("scaled", 2, 1, t).unwrap();
    let agent = Agent::new(2, 1, &cfg, &mut rng).unwrap();
    let batch = ds.sample_batch(32, &mut rng).unwrap();
    (cfg, agent, batch)
}

fn scale_critic(agent: &mut Agent, c: f64) {
    for net in [&mut agent.critic1, &mut agent.critic2] {
        *net.weights.last_mut().unwrap() *= c;
        *net.biases.last_mut().unwrap() *= c;
    }
}

#[test]
fn scaling_the_critics_scales_lambda_inversely() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..20 {
        let (cfg, agent, batch) = scaled_setup(seed);
        let base = agent.actor_loss(&batch, &cfg, None).unwrap();
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let mut scaled = agent.clone();
        scale_critic(&mut scaled, c);
        let l = scaled.actor_loss(&batch, &cfg, None).unwrap();
        let (l0, l1) = (base.lambda.unwrap(), l.lambda.unwrap());
        assert!((l1 * c - l0).abs() <= 1e-12 * l0, "c = {c}: {l0} vs {l1}");
        // lambda * (-mean Q) is invariant too.
        let (w0, w1) = (l0 * base.td3_term, l1 * l.td3_term);
        assert!((w0 - w1).abs() <= 1e-10 * w0.abs().max(1.0), "{w0} vs {w1}");
        let g0: Vec<f64> = base.grad.iter().collect();
        let g1: Vec<f64> = l.grad.iter().collect();
        let worst = g0.iter().zip(&g1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-10, "gradient changed by {worst:e}");
    }
}

#[test]
fn lambda_floor_keeps_zero_critics_finite() {
    let (cfg, mut agent, batch) = scaled_setup(3);
    scale_critic(&mut agent, 0.0);
    let l = agent.actor_loss(&batch, &cfg, None).unwrap();
    assert_eq!(l.lambda, Some(2.5 * 32.0 / 1e-8));
    assert!(l.loss.is_finite());
}
