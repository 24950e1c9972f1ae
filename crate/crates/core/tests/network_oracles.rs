use hnu_core::network::{value_iterate, Backup, ValueIterationParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{branch, chain, key, linear_oracle, random_network, tight};

#[test]
fn fixtures_match_closed_form() {
    let p = tight();
    let mut net = chain();
    value_iterate(&mut net, &p).unwrap();
    assert!((net.nodes[&key(1)].value - 89.0).abs() < 1e-9);
    assert!((net.nodes[&key(0)].value - 79.1).abs() < 1e-9);
    let mut net = branch();
    value_iterate(&mut net, &p).unwrap();
    assert!(net.nodes[&key(3)].is_deadend);
    assert!((net.nodes[&key(0)].value - -5.95).abs() < 1e-9);
}

#[test]
fn random_networks_match_linear_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let p = tight();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        let mut net = random_network(&mut rng, n);
        let report = value_iterate(&mut net, &p).unwrap();
        assert!(report.converged);
        let oracle = linear_oracle(&net, &p);
        for (k, node) in &net.nodes {
            worst = worst.max((node.value - oracle[k]).abs());
        }
    }
    assert!(worst < 1e-9, "max deviation {worst:e}");
}

#[test]
fn max_backup_never_below_expected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.random_range(2..=30);
        let base = random_network(&mut rng, n);
        let mut expected = base.clone();
        let mut best = base;
        value_iterate(&mut expected, &tight()).unwrap();
        value_iterate(&mut best, &ValueIterationParams { backup: Backup::Max, ..tight() }).unwrap();
        for (k, node) in &best.nodes {
            assert!(node.value >= expected.nodes[k].value - 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Sup-norm residuals shrink by at least the discount each sweep, and
    /// terminals keep their fixed values.
    #[test]
    fn residuals_contract(seed in any::<u64>(), n in 2usize..40, discount in 0.5f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = random_network(&mut rng, n);
        let p = ValueIterationParams { discount, epsilon: 1e-10, max_iterations: 10_000, ..Default::default() };
        let report = value_iterate(&mut net, &p).unwrap();
        for w in report.residuals.windows(2) {
            prop_assert!(w[1] <= discount * w[0] + 1e-9, "{} then {}", w[0], w[1]);
        }
        for node in net.nodes.values() {
            if node.is_goal {
                prop_assert_eq!(node.value, p.goal_reward);
            } else if node.is_deadend {
                prop_assert_eq!(node.value, p.deadend_penalty);
            }
            prop_assert!((0.0..=100.0).contains(&node.global_quality));
            prop_assert!((0.0..=100.0).contains(&node.local_quality));
        }
    }

    /// A larger goal reward never lowers any value.
    #[test]
    fn goal_reward_is_monotone(seed in any::<u64>(), n in 2usize..40, bump in 0.1f64..500.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = random_network(&mut rng, n);
        let mut low = base.clone();
        let mut high = base;
        let p = tight();
        value_iterate(&mut low, &p).unwrap();
        value_iterate(&mut high, &ValueIterationParams { goal_reward: p.goal_reward + bump, ..p }).unwrap();
        for (k, node) in &high.nodes {
            prop_assert!(node.value >= low.nodes[k].value - 1e-9);
        }
    }
}
