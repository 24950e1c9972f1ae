//! Interaction networks: per-problem graphs of observed proof states, with
//! value iteration over empirical transition probabilities.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{StepKind, StepRecord};
use crate::logic::{Expr, KeyMode, Problem, ProofState, StateKey};

pub const NETWORK_FORMAT: &str = "hnu-network/1";

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("no steps recorded for problem {0}")]
    EmptyCorpus(String),
    #[error("state {0} is not in the network")]
    UnknownKey(StateKey),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed network file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backup {
    #[default]
    Expected,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueIterationParams {
    pub goal_reward: f64,
    pub deadend_penalty: f64,
    pub step_reward: f64,
    pub discount: f64,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub backup: Backup,
}

impl Default for ValueIterationParams {
    fn default() -> Self {
        ValueIterationParams {
            goal_reward: 100.0,
            deadend_penalty: -100.0,
            step_reward: -1.0,
            discount: 0.9,
            epsilon: 1e-6,
            max_iterations: 1000,
            backup: Backup::Expected,
        }
    }
}

impl ValueIterationParams {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(NetworkError::Params(format!("discount must lie in (0, 1), got {}", self.discount)));
        }
        if !(self.epsilon > 0.0) {
            return Err(NetworkError::Params(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub visits: u64,
    pub value: f64,
    pub global_quality: f64,
    pub local_quality: f64,
    pub is_goal: bool,
    pub is_deadend: bool,
    /// Some goal node is reachable along observed edges.
    pub goal_reachable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub count: u64,
    pub kind: StepKind,
    /// Statement derived or deleted on this transition (first occurrence).
    pub statement: Expr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Max |ΔV| of each sweep.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionNetwork {
    pub format: String,
    pub problem_id: String,
    pub key_mode: KeyMode,
    pub start_key: StateKey,
    pub nodes: BTreeMap<StateKey, NodeStats>,
    pub edges: BTreeMap<StateKey, BTreeMap<StateKey, Edge>>,
    /// Keys under the other mode, mapped to the node they were observed as.
    pub aliases: BTreeMap<StateKey, StateKey>,
    pub params: Option<ValueIterationParams>,
    pub report: Option<IterationReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quality {
    pub global: f64,
    pub local: f64,
}

/// Counts states and transitions from replayed steps. Each student's
/// attempt starts at the empty-derivation state.
pub fn build_network(steps: &[StepRecord], problem: &Problem, key_mode: KeyMode) -> Result<InteractionNetwork, NetworkError> {
    let steps: Vec<&StepRecord> = steps.iter().filter(|s| s.problem == problem.id).collect();
    if steps.is_empty() {
        return Err(NetworkError::EmptyCorpus(problem.id.clone()));
    }
    let other = match key_mode {
        KeyMode::Ordered => KeyMode::Unordered,
        KeyMode::Unordered => KeyMode::Ordered,
    };
    let start_key = ProofState::new(problem).key(key_mode);
    let mut nodes: BTreeMap<StateKey, NodeStats> = BTreeMap::new();
    let mut edges: BTreeMap<StateKey, BTreeMap<StateKey, Edge>> = BTreeMap::new();
    // alias candidates with visit counts, resolved to the most visited node
    let mut alias_votes: BTreeMap<StateKey, BTreeMap<StateKey, u64>> = BTreeMap::new();
    let blank = || NodeStats {
        visits: 0,
        value: 0.0,
        global_quality: 0.0,
        local_quality: 0.0,
        is_goal: false,
        is_deadend: false,
        goal_reachable: false,
    };
    let mut visit = |nodes: &mut BTreeMap<StateKey, NodeStats>, key: &StateKey, alias: &StateKey, goal: bool| {
        let node = nodes.entry(key.clone()).or_insert_with(blank);
        node.visits += 1;
        node.is_goal |= goal;
        *alias_votes.entry(alias.clone()).or_default().entry(key.clone()).or_default() += 1;
    };
    for s in &steps {
        if s.index == 0 {
            visit(&mut nodes, s.pre.get(key_mode), s.pre.get(other), false);
        }
        let from = s.pre.get(key_mode);
        let to = s.post.get(key_mode);
        visit(&mut nodes, to, s.post.get(other), s.reaches_goal);
        edges
            .entry(from.clone())
            .or_default()
            .entry(to.clone())
            .and_modify(|e| e.count += 1)
            .or_insert_with(|| Edge {
                count: 1,
                kind: s.kind,
                statement: s.statement.clone(),
            });
    }
    nodes.entry(start_key.clone()).or_insert_with(blank);
    // goal states are absorbing
    for (k, n) in &nodes {
        if n.is_goal {
            edges.remove(k);
        }
    }
    for (k, n) in nodes.iter_mut() {
        n.is_deadend = !n.is_goal && edges.get(k).is_none_or(|m| m.is_empty());
    }
    mark_goal_reachable(&mut nodes, &edges);
    let aliases = alias_votes
        .into_iter()
        .filter_map(|(alias, votes)| {
            let best = votes.into_iter().max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))?;
            Some((alias, best.0))
        })
        .collect();
    Ok(InteractionNetwork {
        format: NETWORK_FORMAT.to_string(),
        problem_id: problem.id.clone(),
        key_mode,
        start_key,
        nodes,
        edges,
        aliases,
        params: None,
        report: None,
    })
}

fn mark_goal_reachable(nodes: &mut BTreeMap<StateKey, NodeStats>, edges: &BTreeMap<StateKey, BTreeMap<StateKey, Edge>>) {
    let mut preds: BTreeMap<&StateKey, Vec<&StateKey>> = BTreeMap::new();
    for (from, out) in edges {
        for to in out.keys() {
            preds.entry(to).or_default().push(from);
        }
    }
    let mut seen: BTreeSet<StateKey> = nodes.iter().filter(|(_, n)| n.is_goal).map(|(k, _)| k.clone()).collect();
    let mut queue: VecDeque<StateKey> = seen.iter().cloned().collect();
    while let Some(k) = queue.pop_front() {
        for p in preds.get(&k).into_iter().flatten() {
            if seen.insert((*p).clone()) {
                queue.push_back((*p).clone());
            }
        }
    }
    for (k, n) in nodes.iter_mut() {
        n.goal_reachable = seen.contains(k);
    }
}

impl InteractionNetwork {
    /// Network over given transition counts, for fixtures and external
    /// corpora. Goal nodes lose their outgoing edges; other leaves become
    /// dead ends.
    pub fn from_counts(
        problem_id: &str,
        start_key: StateKey,
        transitions: impl IntoIterator<Item = (StateKey, StateKey, u64, Expr)>,
        goals: &[StateKey],
    ) -> Self {
        let blank = NodeStats {
            visits: 0,
            value: 0.0,
            global_quality: 0.0,
            local_quality: 0.0,
            is_goal: false,
            is_deadend: false,
            goal_reachable: false,
        };
        let mut nodes = BTreeMap::new();
        let mut edges: BTreeMap<StateKey, BTreeMap<StateKey, Edge>> = BTreeMap::new();
        nodes.insert(start_key.clone(), blank.clone());
        for (from, to, count, statement) in transitions {
            nodes.entry(from.clone()).or_insert_with(|| blank.clone());
            nodes.entry(to.clone()).or_insert_with(|| blank.clone()).visits += count;
            edges.entry(from).or_default().insert(
                to,
                Edge {
                    count,
                    kind: StepKind::Derive,
                    statement,
                },
            );
        }
        nodes.get_mut(&start_key).expect("inserted").visits = nodes[&start_key].visits.max(1);
        for g in goals {
            nodes.entry(g.clone()).or_insert_with(|| blank.clone()).is_goal = true;
            edges.remove(g);
        }
        for (k, n) in nodes.iter_mut() {
            n.is_deadend = !n.is_goal && !edges.contains_key(k);
        }
        mark_goal_reachable(&mut nodes, &edges);
        InteractionNetwork {
            format: NETWORK_FORMAT.into(),
            problem_id: problem_id.to_string(),
            key_mode: KeyMode::Unordered,
            start_key,
            nodes,
            edges,
            aliases: BTreeMap::new(),
            params: None,
            report: None,
        }
    }

    pub fn node(&self, key: &StateKey) -> Option<&NodeStats> {
        self.nodes.get(key)
    }

    pub fn successors(&self, key: &StateKey) -> impl Iterator<Item = (&StateKey, &Edge)> {
        self.edges.get(key).into_iter().flat_map(|m| m.iter())
    }

    /// P(to | from) from transition counts.
    pub fn probability(&self, from: &StateKey, to: &StateKey) -> f64 {
        let Some(out) = self.edges.get(from) else { return 0.0 };
        let total: u64 = out.values().map(|e| e.count).sum();
        match out.get(to) {
            Some(e) if total > 0 => e.count as f64 / total as f64,
            _ => 0.0,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(BTreeMap::len).sum()
    }

    /// Resolves a state to its node key under the requested mode; other-mode
    /// lookups go through the alias index.
    pub fn resolve(&self, state: &ProofState, mode: KeyMode) -> Option<&StateKey> {
        let key = state.key(mode);
        if mode == self.key_mode {
            self.nodes.get_key_value(&key).map(|(k, _)| k)
        } else {
            self.aliases.get(&key)
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        let text = serde_json::to_string(self).map_err(|e| NetworkError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let net: InteractionNetwork = serde_json::from_str(text).map_err(|e| NetworkError::Format(e.to_string()))?;
        if net.format != NETWORK_FORMAT {
            return Err(NetworkError::Format(format!("unsupported format tag `{}`", net.format)));
        }
        Ok(net)
    }
}

/// Runs Jacobi-style value iteration in place and fills both quality
/// scales. Terminal values are fixed; non-convergence is flagged in the
/// report rather than treated as an error.
pub fn value_iterate(network: &mut InteractionNetwork, params: &ValueIterationParams) -> Result<IterationReport, NetworkError> {
    params.validate()?;
    let keys: Vec<StateKey> = network.nodes.keys().cloned().collect();
    let index: BTreeMap<&StateKey, usize> = keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
    let n = keys.len();
    let mut terminal: Vec<Option<f64>> = vec![None; n];
    let mut out: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, k) in keys.iter().enumerate() {
        let node = &network.nodes[k];
        if node.is_goal {
            terminal[i] = Some(params.goal_reward);
        } else if node.is_deadend {
            terminal[i] = Some(params.deadend_penalty);
        } else {
            let edges = &network.edges[k];
            let total: u64 = edges.values().map(|e| e.count).sum();
            out[i] = edges
                .iter()
                .map(|(to, e)| (index[to], e.count as f64 / total as f64))
                .collect();
        }
    }
    let mut v: Vec<f64> = terminal.iter().map(|t| t.unwrap_or(0.0)).collect();
    let mut next = v.clone();
    let mut residuals = Vec::new();
    let mut converged = terminal.iter().all(Option::is_some);
    while !converged && residuals.len() < params.max_iterations {
        let mut delta: f64 = 0.0;
        for i in 0..n {
            if terminal[i].is_some() {
                continue;
            }
            let future = match params.backup {
                Backup::Expected => out[i].iter().map(|&(j, p)| p * v[j]).sum::<f64>(),
                Backup::Max => out[i].iter().map(|&(j, _)| v[j]).fold(f64::NEG_INFINITY, f64::max),
            };
            next[i] = params.step_reward + params.discount * future;
            delta = delta.max((next[i] - v[i]).abs());
        }
        std::mem::swap(&mut v, &mut next);
        residuals.push(delta);
        converged = delta < params.epsilon;
    }
    for (i, k) in keys.iter().enumerate() {
        network.nodes.get_mut(k).expect("key from map").value = v[i];
    }
    fill_quality(network);
    let report = IterationReport {
        iterations: residuals.len(),
        residual: residuals.last().copied().unwrap_or(0.0),
        converged,
        residuals,
    };
    network.params = Some(*params);
    network.report = Some(report.clone());
    Ok(report)
}

fn rescale(v: f64, lo: f64, hi: f64) -> f64 {
    if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
        100.0
    } else {
        (v - lo) / (hi - lo) * 100.0
    }
}

fn fill_quality(network: &mut InteractionNetwork) {
    let (lo, hi) = network
        .nodes
        .values()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), n| (lo.min(n.value), hi.max(n.value)));
    let mut preds: BTreeMap<&StateKey, Vec<&StateKey>> = BTreeMap::new();
    for (from, out) in &network.edges {
        for to in out.keys() {
            preds.entry(to).or_default().push(from);
        }
    }
    let mut local: BTreeMap<StateKey, f64> = BTreeMap::new();
    for (k, node) in &network.nodes {
        let mut sib_lo = node.value;
        let mut sib_hi = node.value;
        for p in preds.get(k).into_iter().flatten() {
            for to in network.edges[*p].keys() {
                let v = network.nodes[to].value;
                sib_lo = sib_lo.min(v);
                sib_hi = sib_hi.max(v);
            }
        }
        local.insert(k.clone(), rescale(node.value, sib_lo, sib_hi));
    }
    for (k, node) in network.nodes.iter_mut() {
        node.global_quality = rescale(node.value, lo, hi);
        node.local_quality = local[k];
    }
}

pub fn quality(network: &InteractionNetwork, key: &StateKey) -> Result<Quality, NetworkError> {
    let node = network.nodes.get(key).ok_or_else(|| NetworkError::UnknownKey(key.clone()))?;
    Ok(Quality {
        global: node.global_quality,
        local: node.local_quality,
    })
}

/// The node for `state` under `mode`, or `None` when it was never observed.
pub fn match_state<'a>(network: &'a InteractionNetwork, state: &ProofState, mode: KeyMode) -> Option<&'a NodeStats> {
    network.resolve(state, mode).and_then(|k| network.nodes.get(k))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    fn key(s: &str) -> StateKey {
        StateKey(s.to_string())
    }

    /// Network over abstract keys: `edges` as (from, to, count); `goals`
    /// name the goal keys. Start is "".
    pub(crate) fn synthetic(edges: &[(&str, &str, u64)], goals: &[&str]) -> InteractionNetwork {
        let transitions = edges
            .iter()
            .map(|&(a, b, c)| (key(a), key(b), c, Expr::var(b.chars().last().unwrap_or('z'))));
        let goals: Vec<StateKey> = goals.iter().map(|g| key(g)).collect();
        InteractionNetwork::from_counts("syn", key(""), transitions, &goals)
    }

    fn tight() -> ValueIterationParams {
        ValueIterationParams {
            epsilon: 1e-12,
            ..Default::default()
        }
    }

    fn attempt(student: &str, order: &[(&str, Vec<usize>)], problem: &Problem) -> Vec<StepRecord> {
        use crate::corpus::{events_to_steps, TraceEvent};
        use crate::logic::{parse_expression, Rule};
        let events: Vec<TraceEvent> = order
            .iter()
            .enumerate()
            .map(|(i, (stmt, prem))| {
                let rule = if prem.len() == 2 { Rule::Conjunction } else { Rule::Simplification };
                TraceEvent::derive(student, &problem.id, i as u64, rule, prem.clone(), parse_expression(stmt).unwrap(), true, 1.0)
            })
            .collect();
        events_to_steps(&events, problem).unwrap()
    }

    fn two_route_problem() -> Problem {
        use crate::logic::{parse_expression, Rule, Section};
        Problem {
            id: "two".into(),
            premises: vec![parse_expression("p & q").unwrap(), parse_expression("r & s").unwrap()],
            conclusion: parse_expression("q & s").unwrap(),
            allowed_rules: Rule::ALL.to_vec(),
            section: Section::Training,
            optimal_length: 3,
        }
    }

    #[test]
    fn counts_from_identical_traces() {
        let problem = two_route_problem();
        let route = [("q", vec![0]), ("s", vec![1]), ("q & s", vec![2, 3])];
        let mut steps = attempt("a", &route, &problem);
        steps.extend(attempt("b", &route, &problem));
        let net = build_network(&steps, &problem, KeyMode::Unordered).unwrap();
        assert_eq!(net.nodes.len(), 4);
        assert!(net.nodes.values().all(|n| n.visits == 2));
        assert!(net.edges.values().flat_map(|m| m.values()).all(|e| e.count == 2));
        assert_eq!(net.nodes.values().filter(|n| n.is_goal).count(), 1);
    }

    #[test]
    fn unordered_keys_merge_orders() {
        let problem = two_route_problem();
        let mut steps = attempt("a", &[("q", vec![0]), ("s", vec![1]), ("q & s", vec![2, 3])], &problem);
        steps.extend(attempt("b", &[("s", vec![1]), ("q", vec![0]), ("q & s", vec![2, 3])], &problem));
        let unordered = build_network(&steps, &problem, KeyMode::Unordered).unwrap();
        let ordered = build_network(&steps, &problem, KeyMode::Ordered).unwrap();
        assert_eq!(unordered.nodes.len(), 5);
        assert_eq!(ordered.nodes.len(), 7);
        assert_eq!(unordered.probability(&unordered.start_key, &key("q")), 0.5);

        // a permuted state of a third order: q, s via a state that no one visited in that order
        let mut state = ProofState::new(&problem);
        let simp = crate::logic::Rule::Simplification;
        state.derive(simp, &[1], crate::logic::parse_expression("s").unwrap()).unwrap();
        state.derive(simp, &[0], crate::logic::parse_expression("q").unwrap()).unwrap();
        assert!(match_state(&unordered, &state, KeyMode::Unordered).is_some());
        assert!(match_state(&ordered, &state, KeyMode::Ordered).is_some());
        let only_a = attempt("a", &[("q", vec![0]), ("s", vec![1]), ("q & s", vec![2, 3])], &problem);
        let net = build_network(&only_a, &problem, KeyMode::Unordered).unwrap();
        assert!(match_state(&net, &state, KeyMode::Ordered).is_none());
        assert!(match_state(&net, &state, KeyMode::Unordered).is_some());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            build_network(&[], &two_route_problem(), KeyMode::Unordered),
            Err(NetworkError::EmptyCorpus(_))
        ));
    }

    #[test]
    fn snapshot_round_trip() {
        let problem = two_route_problem();
        let steps = attempt("a", &[("q", vec![0]), ("s", vec![1]), ("q & s", vec![2, 3])], &problem);
        let mut net = build_network(&steps, &problem, KeyMode::Unordered).unwrap();
        value_iterate(&mut net, &Default::default()).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        assert_eq!(InteractionNetwork::from_json(&text).unwrap(), net);
        let bad = text.replace(NETWORK_FORMAT, "hnu-network/0");
        assert!(InteractionNetwork::from_json(&bad).is_err());
    }

    #[test]
    fn chain_values() {
        let mut net = synthetic(&[("", "a", 1), ("a", "g", 1)], &["g"]);
        value_iterate(&mut net, &tight()).unwrap();
        assert!((net.nodes[&key("a")].value - 89.0).abs() < 1e-9);
        assert!((net.nodes[&key("")].value - 79.1).abs() < 1e-9);
    }

    #[test]
    fn branch_values() {
        let mut net = synthetic(&[("", "a", 1), ("", "d", 1), ("a", "g", 1)], &["g"]);
        assert_eq!(net.probability(&key(""), &key("a")), 0.5);
        value_iterate(&mut net, &tight()).unwrap();
        assert!((net.nodes[&key("d")].value + 100.0).abs() < 1e-12);
        assert!((net.nodes[&key("")].value + 5.95).abs() < 1e-9);
        let q = quality(&net, &key("a")).unwrap();
        assert!((q.global - 94.5).abs() < 1e-9);
    }

    #[test]
    fn goal_only_network_needs_no_iterations() {
        let mut net = synthetic(&[], &[""]);
        let report = value_iterate(&mut net, &Default::default()).unwrap();
        assert_eq!(report.iterations, 0);
        assert!(report.converged);
        assert_eq!(net.nodes[&key("")].value, 100.0);
        assert_eq!(net.nodes[&key("")].global_quality, 100.0);
    }

    #[test]
    fn local_quality_uses_siblings() {
        let mut net = synthetic(&[("", "a", 1), ("", "d", 1), ("a", "g", 1)], &["g"]);
        value_iterate(&mut net, &tight()).unwrap();
        // siblings of a: {a, d}
        assert!((net.nodes[&key("a")].local_quality - 100.0).abs() < 1e-9);
        assert!(net.nodes[&key("d")].local_quality.abs() < 1e-9);
        // start has no predecessors
        assert_eq!(net.nodes[&key("")].local_quality, 100.0);
    }

    #[test]
    fn max_backup_picks_best_successor() {
        let mut net = synthetic(&[("", "a", 1), ("", "d", 1), ("a", "g", 1)], &["g"]);
        let params = ValueIterationParams {
            backup: Backup::Max,
            ..tight()
        };
        value_iterate(&mut net, &params).unwrap();
        assert!((net.nodes[&key("")].value - 79.1).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_discount() {
        let mut net = synthetic(&[("", "g", 1)], &["g"]);
        let params = ValueIterationParams {
            discount: 1.0,
            ..Default::default()
        };
        assert!(matches!(value_iterate(&mut net, &params), Err(NetworkError::Params(_))));
    }

    #[test]
    fn flags_non_convergence() {
        let mut net = synthetic(&[("", "a", 1), ("a", "", 1), ("a", "g", 1)], &["g"]);
        let params = ValueIterationParams {
            max_iterations: 3,
            ..Default::default()
        };
        let report = value_iterate(&mut net, &params).unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 3);
    }
}
