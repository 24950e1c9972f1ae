//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use hnu_core::corpus::{Classifier, PredictionRecord, Replayer, StateKeys, StepKind, StepRecord, TraceEvent};
use hnu_core::hints::{Agency, HintSource};
use hnu_core::logic::{apply_rule, check_step, Expr, KeyMode, Problem, ProofState, Rule, StateKey};
use hnu_core::network::{InteractionNetwork, ValueIterationParams};
use hnu_core::sim::Curriculum;
use hnu_core::stepscore::{LabeledStep, ProgressVector, StepBehavior};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Truth-table evaluator kept apart from the library's.
pub fn truth(e: &Expr, env: &[bool; 3]) -> bool {
    match e {
        Expr::Var(c) => env[(*c as u8 - b'p') as usize],
        Expr::Not(a) => !truth(a, env),
        Expr::And(a, b) => truth(a, env) && truth(b, env),
        Expr::Or(a, b) => truth(a, env) || truth(b, env),
        Expr::Implies(a, b) => !truth(a, env) || truth(b, env),
        Expr::Iff(a, b) => truth(a, env) == truth(b, env),
    }
}

/// All eight assignments at once: bit m is the value under assignment m.
pub fn table(e: &Expr) -> u8 {
    match e {
        Expr::Var(c) => match c {
            'p' => 0b1010_1010,
            'q' => 0b1100_1100,
            'r' => 0b1111_0000,
            other => panic!("variable {other} outside p, q, r"),
        },
        Expr::Not(a) => !table(a),
        Expr::And(a, b) => table(a) & table(b),
        Expr::Or(a, b) => table(a) | table(b),
        Expr::Implies(a, b) => !table(a) | table(b),
        Expr::Iff(a, b) => !(table(a) ^ table(b)),
    }
}

pub fn assignments() -> impl Iterator<Item = [bool; 3]> {
    (0u8..8).map(|m| [m & 1 != 0, m & 2 != 0, m & 4 != 0])
}

pub fn sound(premises: &[&Expr], conclusion: &Expr) -> bool {
    assignments().all(|env| !premises.iter().all(|p| truth(p, &env)) || truth(conclusion, &env))
}

pub fn binaries(a: &Expr, b: &Expr) -> [Expr; 4] {
    [
        Expr::and(a.clone(), b.clone()),
        Expr::or(a.clone(), b.clone()),
        Expr::implies(a.clone(), b.clone()),
        Expr::iff(a.clone(), b.clone()),
    ]
}

/// Atoms, their negations and every binary combination of those.
pub fn small_pool() -> Vec<Expr> {
    let atoms: Vec<Expr> = "pqr".chars().map(Expr::var).collect();
    let mut level: Vec<Expr> = atoms.clone();
    level.extend(atoms.iter().map(|a| Expr::not(a.clone())));
    let mut pool = level.clone();
    for a in &level {
        for b in &level {
            pool.extend(binaries(a, b));
        }
    }
    pool.push(Expr::not(Expr::not(Expr::var('p'))));
    pool
}

pub fn second_premises(first: &Expr, pool: &[Expr]) -> Vec<Expr> {
    let subs: Vec<Expr> = first.subformulas().into_iter().cloned().collect();
    let mut out: Vec<Expr> = pool.iter().take(6).cloned().collect();
    for s in &subs {
        out.push(s.clone());
        out.push(Expr::not(s.clone()));
        for t in &subs {
            out.push(Expr::or(s.clone(), t.clone()));
            out.push(Expr::implies(s.clone(), t.clone()));
        }
        for a in "pqr".chars() {
            out.push(Expr::implies(s.clone(), Expr::var(a)));
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct SoundnessSweep {
    pub applications: usize,
    pub conclusions: usize,
    pub unsound: Vec<String>,
    /// Rules that never produced a conclusion over the pool.
    pub silent_rules: Vec<Rule>,
}

/// Applies every rule to a pool of formulas over p, q, r and checks each
/// conclusion against the truth table.
pub fn soundness_sweep() -> SoundnessSweep {
    let pool = small_pool();
    let mut firsts = pool.clone();
    for a in pool.iter().take(60) {
        for b in pool.iter().take(60) {
            firsts.extend(binaries(a, b));
        }
    }
    let addends: Vec<Expr> = pool.iter().take(6).cloned().collect();
    let mut out = SoundnessSweep::default();
    let mut fired = [false; Rule::ALL.len()];
    for p in &firsts {
        let tp = table(p);
        let mut distinct = HashSet::new();
        let seconds: Vec<(Expr, u8)> = second_premises(p, &pool)
            .into_iter()
            .filter(|q| distinct.insert(q.clone()))
            .map(|q| {
                let t = table(&q);
                (q, t)
            })
            .collect();
        for (r, &rule) in Rule::ALL.iter().enumerate() {
            let mut check = |premises: &[&Expr], holds: u8| {
                let conclusions = apply_rule(rule, premises, &addends).expect("arity matches");
                out.applications += 1;
                fired[r] |= !conclusions.is_empty();
                for c in &conclusions {
                    out.conclusions += 1;
                    if holds & !table(c) != 0 {
                        let shown: Vec<String> = premises.iter().map(|e| e.to_string()).collect();
                        out.unsound.push(format!("{rule}: {} |- {c}", shown.join(", ")));
                    }
                }
            };
            if rule.arity() == 1 {
                check(&[p], tp);
            } else {
                for (q, tq) in &seconds {
                    check(&[p, q], tp & tq);
                }
            }
        }
    }
    out.silent_rules = Rule::ALL.iter().zip(fired).filter(|(_, f)| !f).map(|(r, _)| *r).collect();
    out
}

pub fn key(i: usize) -> StateKey {
    StateKey(format!("s{i:02}"))
}

pub fn tight() -> ValueIterationParams {
    ValueIterationParams {
        epsilon: 1e-13,
        max_iterations: 100_000,
        ..ValueIterationParams::default()
    }
}

/// Random count graph over `n` nodes; node 0 is the start.
pub fn random_network(rng: &mut ChaCha8Rng, n: usize) -> InteractionNetwork {
    let goals: Vec<StateKey> = (0..rng.random_range(1..=3usize.min(n))).map(|_| key(rng.random_range(1..n))).collect();
    let mut transitions = Vec::new();
    for from in 0..n {
        let degree = rng.random_range(0..=4);
        for _ in 0..degree {
            let to = rng.random_range(0..n);
            transitions.push((key(from), key(to), rng.random_range(1..20u64), Expr::var('p')));
        }
    }
    // merge duplicate edges by summing their counts
    let mut merged: BTreeMap<(StateKey, StateKey), u64> = BTreeMap::new();
    for (f, t, c, _) in transitions {
        *merged.entry((f, t)).or_default() += c;
    }
    InteractionNetwork::from_counts(
        "random",
        key(0),
        merged.into_iter().map(|((f, t), c)| (f, t, c, Expr::var('p'))),
        &goals,
    )
}

/// Exact solution of the expected-backup Bellman equations by Gaussian
/// elimination over the non-terminal nodes.
pub fn linear_oracle(net: &InteractionNetwork, p: &ValueIterationParams) -> BTreeMap<StateKey, f64> {
    let keys: Vec<&StateKey> = net.nodes.keys().collect();
    let terminal = |k: &StateKey| {
        let n = &net.nodes[k];
        if n.is_goal {
            Some(p.goal_reward)
        } else if n.is_deadend {
            Some(p.deadend_penalty)
        } else {
            None
        }
    };
    let free: Vec<&StateKey> = keys.iter().copied().filter(|k| terminal(k).is_none()).collect();
    let pos: BTreeMap<&StateKey, usize> = free.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let m = free.len();
    let mut a = vec![vec![0.0; m + 1]; m];
    for (i, k) in free.iter().enumerate() {
        a[i][i] = 1.0;
        a[i][m] = p.step_reward;
        let out = &net.edges[*k];
        let total: u64 = out.values().map(|e| e.count).sum();
        for (to, e) in out {
            let prob = e.count as f64 / total as f64;
            match terminal(to) {
                Some(v) => a[i][m] += p.discount * prob * v,
                None => a[i][pos[to]] -= p.discount * prob,
            }
        }
    }
    for col in 0..m {
        let pivot = (col..m).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, pivot);
        for row in 0..m {
            if row != col {
                let f = a[row][col] / a[col][col];
                if f != 0.0 {
                    for c in col..=m {
                        a[row][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    for k in keys {
        let v = match terminal(k) {
            Some(v) => v,
            None => {
                let i = pos[k];
                a[i][m] / a[i][i]
            }
        };
        out.insert(k.clone(), v);
    }
    out
}

pub fn chain() -> InteractionNetwork {
    InteractionNetwork::from_counts(
        "chain",
        key(0),
        [(key(0), key(1), 3, Expr::var('p')), (key(1), key(2), 3, Expr::var('q'))],
        &[key(2)],
    )
}

pub fn branch() -> InteractionNetwork {
    InteractionNetwork::from_counts(
        "branch",
        key(0),
        [
            (key(0), key(1), 1, Expr::var('p')),
            (key(0), key(3), 1, Expr::var('r')),
            (key(1), key(2), 1, Expr::var('q')),
        ],
        &[key(2)],
    )
}

pub fn record(student: &str, index: usize, duration: f64) -> StepRecord {
    let keys = StateKeys {
        ordered: StateKey(String::new()),
        unordered: StateKey(String::new()),
    };
    StepRecord {
        student: student.into(),
        problem: "oracle".into(),
        index,
        seq: index as u64,
        kind: StepKind::Derive,
        rule: None,
        statement: Expr::var('p'),
        pre: keys.clone(),
        post: keys,
        duration,
        hint_used: false,
        correct: true,
        failed_attempts: 0,
        reaches_goal: false,
        hints_requested: 0,
        proactive_hints: 0,
        prediction: None,
    }
}

/// Truth table plus a neighbour check: a quick inefficient step is FarOff
/// when either neighbour is also quick and inefficient.
pub fn oracle_labels(long: &[bool], efficient: &[bool]) -> Vec<StepBehavior> {
    let qi = |i: usize| !long[i] && !efficient[i];
    (0..long.len())
        .map(|i| match (long[i], efficient[i]) {
            (false, true) => StepBehavior::Expert,
            (true, true) => StepBehavior::Strategic,
            (true, false) => StepBehavior::Futile,
            (false, false) => {
                let before = i > 0 && qi(i - 1);
                let after = i + 1 < long.len() && qi(i + 1);
                if before || after {
                    StepBehavior::FarOff
                } else {
                    StepBehavior::Opportunistic
                }
            }
        })
        .collect()
}


/// Outcome of following hints from every state observed in a corpus.
#[derive(Debug, Default)]
pub struct HintWalk {
    pub states: usize,
    pub hints: usize,
    pub network_hints: usize,
    /// Largest (hint steps to goal) − optimal length over all states.
    pub worst_slack: i64,
    pub failures: Vec<String>,
}

/// A rule application in `state` that derives `target`.
pub fn derivation_of(problem: &Problem, state: &ProofState, target: &Expr) -> Option<(Rule, Vec<usize>)> {
    let n = state.len();
    for &rule in &problem.allowed_rules {
        let tuples: Vec<Vec<usize>> = if rule.arity() == 1 {
            (0..n).map(|i| vec![i]).collect()
        } else {
            (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| vec![i, j])).collect()
        };
        for idx in tuples {
            if check_step(state, rule, &idx, target).unwrap_or(false) {
                return Some((rule, idx));
            }
        }
    }
    None
}

/// Collects every distinct state reached in `events` and follows on-demand
/// hints from each to the goal, memoizing states already walked.
pub fn hint_walk(curriculum: &Curriculum, networks: &BTreeMap<String, InteractionNetwork>, events: &[TraceEvent]) -> HintWalk {
    let engines = curriculum.engines(Some(networks));
    let problems: BTreeMap<&str, &Problem> = curriculum.problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut attempts: BTreeMap<(&str, &str), Vec<&TraceEvent>> = BTreeMap::new();
    for e in events {
        attempts.entry((e.student.as_str(), e.problem.as_str())).or_default().push(e);
    }
    let mut states: BTreeMap<(String, StateKey), ProofState> = BTreeMap::new();
    for ((_, problem), evs) in &attempts {
        let p = problems[problem];
        let mut r = Replayer::new("walk", p);
        states.insert((p.id.clone(), r.state().key(KeyMode::Unordered)), r.state().clone());
        for e in evs {
            r.push(e).expect("corpus replays");
            if !r.state().is_complete(&p.conclusion) {
                states.insert((p.id.clone(), r.state().key(KeyMode::Unordered)), r.state().clone());
            }
        }
    }
    let mut out = HintWalk {
        states: states.len(),
        worst_slack: i64::MIN,
        ..Default::default()
    };
    let mut memo: BTreeMap<(String, StateKey), usize> = BTreeMap::new();
    for ((pid, key), state) in &states {
        let p = problems[pid.as_str()];
        let engine = &engines[pid];
        let mut path: Vec<StateKey> = vec![key.clone()];
        let mut st = state.clone();
        let mut tail = None;
        for _ in 0..=p.optimal_length + 3 {
            if st.is_complete(&p.conclusion) {
                tail = Some(0);
                break;
            }
            if let Some(&d) = memo.get(&(pid.clone(), st.key(KeyMode::Unordered))) {
                tail = Some(d);
                break;
            }
            let hint = match engine.next_step_hint(&st, Agency::OnDemand, 0) {
                Ok(h) => h,
                Err(e) => {
                    out.failures.push(format!("{pid}: no hint at {}: {e}", st.key(KeyMode::Unordered)));
                    break;
                }
            };
            out.hints += 1;
            out.network_hints += usize::from(hint.source == HintSource::Network);
            let Some((rule, idx)) = derivation_of(p, &st, &hint.statement) else {
                out.failures.push(format!("{pid}: hint {} does not follow in one step", hint.statement));
                break;
            };
            st.derive(rule, &idx, hint.statement).expect("checked step");
            path.push(st.key(KeyMode::Unordered));
        }
        let Some(tail) = tail else {
            if out.failures.last().is_none_or(|f| !f.starts_with(pid.as_str())) {
                out.failures.push(format!("{pid}: hints did not reach the goal from {key}"));
            }
            continue;
        };
        // the last state on the path is complete or already memoized
        let n = path.len();
        for (i, k) in path.into_iter().enumerate() {
            memo.entry((pid.clone(), k)).or_insert(tail + n - 1 - i);
        }
        let steps = memo[&(pid.clone(), key.clone())];
        out.worst_slack = out.worst_slack.max(steps as i64 - p.optimal_length as i64);
    }
    out
}

/// A labeled training step with a logged prediction.
pub fn labeled(student: &str, index: usize, observed: StepBehavior, predicted: bool, requested: u32, proactive: u32) -> LabeledStep {
    let mut step = record(student, index, 1.0);
    step.hints_requested = requested;
    step.proactive_hints = proactive;
    step.prediction = Some(PredictionRecord {
        score: if predicted { 0.9 } else { 0.1 },
        helpneed: predicted,
        classifier: Classifier::StateFree,
        acted: true,
    });
    LabeledStep {
        step,
        progress: ProgressVector::default(),
        raw_progress: ProgressVector::default(),
        long: false,
        label: observed,
        observed,
    }
}
