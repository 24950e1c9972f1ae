use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hnu_core::logic::{shipped_problems, shortest_proof, Expr, ProofState, StateKey};
use hnu_core::network::{value_iterate, InteractionNetwork, ValueIterationParams};
use hnu_core::predictor::{planted_cohort, train};
use hnu_core::sim::{simulate_step, Agent, BehaviorConfig, Curriculum, ExperimentConfig, StudentProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn search(c: &mut Criterion) {
    let mut problems = shipped_problems();
    problems.sort_by_key(|p| p.optimal_length);
    let mut group = c.benchmark_group("search");
    group.sample_size(10);
    for problem in [problems.first().unwrap(), problems.last().unwrap()] {
        let name = format!("{}_len{}", problem.id, problem.optimal_length);
        group.bench_function(name, |b| b.iter(|| shortest_proof(black_box(problem), problem.optimal_length + 2)));
    }
    group.finish();
}

fn random_network(n: usize, seed: u64) -> InteractionNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = |i: usize| StateKey(format!("s{i:04}"));
    let mut transitions = Vec::new();
    for from in 0..n - 1 {
        for _ in 0..rng.random_range(1..4) {
            let to = rng.random_range(0..n);
            if to != from {
                transitions.push((key(from), key(to), rng.random_range(1..20), Expr::var('p')));
            }
        }
    }
    InteractionNetwork::from_counts("bench", key(0), transitions, &[key(n - 1)])
}

fn value_iteration(c: &mut Criterion) {
    let params = ValueIterationParams::default();
    let mut group = c.benchmark_group("value_iteration");
    for n in [100, 2000] {
        let net = random_network(n, 1);
        group.bench_function(format!("{n}_nodes"), |b| {
            b.iter_batched(|| net.clone(), |mut net| value_iterate(&mut net, &params).unwrap(), BatchSize::SmallInput)
        });
    }
    group.finish();
}

fn forest(c: &mut Criterion) {
    let config = ExperimentConfig::default();
    let examples = planted_cohort(0, 60, 40);
    let params = config.train_params();
    let settings = config.feature_settings(Default::default());
    let mut group = c.benchmark_group("forest");
    group.sample_size(10);
    group.bench_function("train_2400_examples", |b| b.iter(|| train(black_box(&examples), &params, settings.clone()).unwrap()));
    group.finish();
}

fn step(c: &mut Criterion) {
    let curriculum = Curriculum::shipped();
    let problem = curriculum.problems.iter().max_by_key(|p| p.optimal_length).unwrap().clone();
    let space = curriculum.spaces[&problem.id].clone();
    let behavior = BehaviorConfig::default();
    let profile = StudentProfile {
        skill: 0.5,
        error_rate: 0.1,
        speed_median: 20.0,
        speed_sigma: 0.3,
        help_propensity: 0.0,
        hint_adoption: 0.8,
        learning_rate: 0.1,
    };
    let mut agent = Agent::new("bench", profile, 7);
    let start = ProofState::new(&problem);
    c.bench_function("simulate_step", |b| {
        b.iter_batched(
            || start.clone(),
            |mut state| simulate_step(&mut agent, &problem, &space, &mut state, None, None, 0, &behavior),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, search, value_iteration, forest, step);
criterion_main!(benches);
