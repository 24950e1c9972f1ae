//! Shortest-proof search.
//!
//! A [`ProblemSpace`] closes a problem's premises under its allowed rules,
//! keeping statements no larger than [`Problem::size_cap`] and drawing
//! Addition disjuncts from [`Problem::addends`]. Each closed statement gets
//! a bit; a proof state becomes a bitset and every rule application a
//! precomputed `Way` (target plus one or two premises).
//!
//! The search is iterative deepening over derivation count with two
//! prunings that keep it exhaustive:
//! * an LM-cut bound over the relaxed derivation graph never
//!   overestimates the remaining derivations;
//! * independent steps are explored in one order only: a step whose
//!   statement sorts before the previous step's must depend on it.
//!   Every proof has a linearization satisfying this, so no minimum is
//!   lost.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::sync::Arc;

use dashmap::DashMap;
use serde::{Deserialize, Serialize};

use super::expr::{Expr, NormKey};
use super::problem::Problem;
use super::proof::ProofState;
use super::rules::{apply_rule, Rule};

/// Upper bound on closed statements per space; problems are authored well
/// below it.
const MAX_UNIVERSE: usize = 60_000;
const INF: u32 = u32::MAX;
const NO_PCF: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofStep {
    pub rule: Rule,
    /// Indices into the statement list as it stands before this step.
    pub premises: Vec<usize>,
    pub derived: Expr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proof {
    pub steps: Vec<ProofStep>,
}

impl Proof {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Way {
    pub target: u32,
    pub rule: Rule,
    pub premises: [u32; 2],
    pub arity: u8,
}

impl Way {
    fn premises(&self) -> &[u32] {
        &self.premises[..self.arity as usize]
    }
}

#[derive(Debug, Clone, Default)]
pub struct SearchStats {
    pub nodes: u64,
}

type Bits = Box<[u64]>;

#[derive(Debug)]
struct Solved {
    /// Targets in derivation order; `None` when no proof within the bound.
    plan: Option<Vec<u32>>,
    /// Depth bound the negative answer was established for.
    bound: usize,
}

/// Closed statement universe and derivation table for one problem, with a
/// cache of solved states shared across threads.
pub struct ProblemSpace {
    problem_id: String,
    universe: Vec<Expr>,
    index: HashMap<NormKey, u32>,
    rank: Vec<u32>,
    ways: Vec<Way>,
    ways_by_target: Vec<Vec<u32>>,
    ways_by_premise: Vec<Vec<u32>>,
    base: Bits,
    conclusion: u32,
    words: usize,
    cache: DashMap<Bits, Arc<Solved>>,
}

impl std::fmt::Debug for ProblemSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpace")
            .field("problem_id", &self.problem_id)
            .field("statements", &self.universe.len())
            .field("ways", &self.ways.len())
            .finish()
    }
}

impl ProblemSpace {
    pub fn new(problem: &Problem) -> Self {
        Self::with_extra(problem, &[])
    }

    /// Space whose seed set also contains `extra` statements (for states
    /// holding statements outside the closed universe).
    pub fn with_extra(problem: &Problem, extra: &[Expr]) -> Self {
        let cap = problem
            .size_cap()
            .max(extra.iter().map(Expr::size).max().unwrap_or(0));
        let addends = problem.addends();
        let anchors: HashSet<NormKey> = addends.iter().map(Expr::norm_key).collect();
        // Conjunction, Addition and Tautology-introduction only build
        // statements that already occur as subformulas of the problem.
        let admissible = |rule: Rule, premise: &Expr, c: &Expr| -> bool {
            if c.size() > cap {
                return false;
            }
            match rule {
                Rule::Conjunction | Rule::Addition => anchors.contains(&c.norm_key()),
                Rule::Tautology if c.size() > premise.size() => anchors.contains(&c.norm_key()),
                _ => true,
            }
        };
        let mut universe: Vec<Expr> = Vec::new();
        let mut keys: Vec<NormKey> = Vec::new();
        let mut index: HashMap<NormKey, u32> = HashMap::new();
        let mut intern = |e: Expr, universe: &mut Vec<Expr>, keys: &mut Vec<NormKey>| -> u32 {
            let k = e.norm_key();
            if let Some(&i) = index.get(&k) {
                return i;
            }
            let i = universe.len() as u32;
            index.insert(k.clone(), i);
            universe.push(e);
            keys.push(k);
            i
        };
        let mut base_members = Vec::new();
        for e in problem.premises.iter().chain(extra) {
            base_members.push(intern(e.clone(), &mut universe, &mut keys));
        }
        let unary: Vec<Rule> = problem
            .allowed_rules
            .iter()
            .copied()
            .filter(|r| r.arity() == 1)
            .collect();
        let binary: Vec<Rule> = problem
            .allowed_rules
            .iter()
            .copied()
            .filter(|r| r.arity() == 2)
            .collect();
        let mut raw_ways: Vec<(u32, Rule, [u32; 2], u8)> = Vec::new();
        let mut processed = 0usize;
        while processed < universe.len() {
            assert!(
                universe.len() <= MAX_UNIVERSE,
                "problem {}: statement closure exceeds {MAX_UNIVERSE}",
                problem.id
            );
            let u = processed as u32;
            let ue = universe[processed].clone();
            for &rule in &unary {
                let adds: &[Expr] = if rule == Rule::Addition { &addends } else { &[] };
                for c in apply_rule(rule, &[&ue], adds).expect("arity checked") {
                    if !admissible(rule, &ue, &c) {
                        continue;
                    }
                    let t = intern(c, &mut universe, &mut keys);
                    if t != u {
                        raw_ways.push((t, rule, [u, u], 1));
                    }
                }
            }
            for v in 0..=processed {
                if v == processed {
                    continue;
                }
                let ve = universe[v].clone();
                for &rule in &binary {
                    for c in apply_rule(rule, &[&ue, &ve], &[]).expect("arity checked") {
                        if !admissible(rule, &ue, &c) {
                            continue;
                        }
                        let t = intern(c, &mut universe, &mut keys);
                        if t != u && t != v as u32 {
                            let (a, b) = if (v as u32) < u { (v as u32, u) } else { (u, v as u32) };
                            raw_ways.push((t, rule, [a, b], 2));
                        }
                    }
                }
            }
            processed += 1;
        }
        // an unreachable conclusion still needs an id
        let conclusion = intern(problem.conclusion.clone(), &mut universe, &mut keys);
        raw_ways.sort_by(|x, y| (x.0, x.1, x.2, x.3).cmp(&(y.0, y.1, y.2, y.3)));
        raw_ways.dedup_by(|x, y| (x.0, x.1, x.2, x.3) == (y.0, y.1, y.2, y.3));

        let n = universe.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_by(|&a, &b| keys[a as usize].cmp(&keys[b as usize]));
        let mut rank = vec![0u32; n];
        for (r, &u) in order.iter().enumerate() {
            rank[u as usize] = r as u32;
        }
        let mut ways_by_target = vec![Vec::new(); n];
        let mut ways_by_premise = vec![Vec::new(); n];
        let ways: Vec<Way> = raw_ways
            .into_iter()
            .map(|(target, rule, premises, arity)| Way {
                target,
                rule,
                premises,
                arity,
            })
            .collect();
        for (i, w) in ways.iter().enumerate() {
            ways_by_target[w.target as usize].push(i as u32);
            for &p in w.premises() {
                ways_by_premise[p as usize].push(i as u32);
            }
        }
        let words = n.div_ceil(64).max(1);
        let mut base = vec![0u64; words].into_boxed_slice();
        for &b in &base_members {
            set_bit(&mut base, b);
        }
        ProblemSpace {
            problem_id: problem.id.clone(),
            universe,
            index,
            rank,
            ways,
            ways_by_target,
            ways_by_premise,
            base,
            conclusion,
            words,
            cache: DashMap::new(),
        }
    }

    pub fn problem_id(&self) -> &str {
        &self.problem_id
    }

    pub fn statement_count(&self) -> usize {
        self.universe.len()
    }

    pub fn way_count(&self) -> usize {
        self.ways.len()
    }

    pub fn statement(&self, id: u32) -> &Expr {
        &self.universe[id as usize]
    }

    pub fn id_of(&self, expr: &Expr) -> Option<u32> {
        self.index.get(&expr.norm_key()).copied()
    }

    /// Bitset for a proof state, or `None` if some statement lies outside
    /// the universe.
    pub(crate) fn bits_of(&self, state: &ProofState) -> Option<Bits> {
        let mut bits = vec![0u64; self.words].into_boxed_slice();
        for e in state.exprs() {
            set_bit(&mut bits, self.id_of(e)?);
        }
        Some(bits)
    }

    /// Minimum derivations from the premises alone, if within `max_depth`.
    pub fn distance_from_start(&self, max_depth: usize) -> Option<usize> {
        let base = self.base.clone();
        self.solve(&base, max_depth).map(|p| p.len())
    }

    /// Shortest proof from a state, as a list of steps applicable to it.
    pub fn shortest_from(&self, state: &ProofState, max_depth: usize) -> Option<Proof> {
        let bits = self.bits_of(state)?;
        let plan = self.solve(&bits, max_depth)?;
        Some(self.materialize(state, &bits, &plan))
    }

    /// Minimum derivations from a state, if within `max_depth`.
    pub fn distance(&self, state: &ProofState, max_depth: usize) -> Option<usize> {
        let bits = self.bits_of(state)?;
        self.solve(&bits, max_depth).map(|p| p.len())
    }

    /// Every rule application available in `state` that adds a new
    /// statement of the universe, one entry per (rule, premises) pair.
    /// `None` if the state holds statements outside the universe.
    pub fn applicable_steps(&self, state: &ProofState) -> Option<Vec<ProofStep>> {
        let bits = self.bits_of(state)?;
        Some(
            self.applicable_bits(&bits)
                .into_iter()
                .map(|w| self.step_for(state, &self.ways[w as usize]))
                .collect(),
        )
    }

    /// The steps of one minimum plan that are applicable right now.
    pub fn plan_steps(&self, state: &ProofState, max_depth: usize) -> Option<Vec<ProofStep>> {
        let bits = self.bits_of(state)?;
        let plan = self.solve(&bits, max_depth)?;
        Some(
            plan.iter()
                .filter_map(|&t| {
                    self.ways_by_target[t as usize]
                        .iter()
                        .map(|&w| &self.ways[w as usize])
                        .find(|w| w.premises().iter().all(|&p| has_bit(&bits, p)))
                })
                .map(|w| self.step_for(state, w))
                .collect(),
        )
    }

    fn applicable_bits(&self, bits: &Bits) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, w) in self.ways.iter().enumerate() {
            if !has_bit(bits, w.target) && w.premises().iter().all(|&p| has_bit(bits, p)) {
                out.push(i as u32);
            }
        }
        out
    }

    fn step_for(&self, state: &ProofState, way: &Way) -> ProofStep {
        ProofStep {
            rule: way.rule,
            premises: way
                .premises()
                .iter()
                .map(|&p| state.position(self.statement(p)).expect("premise present in state"))
                .collect(),
            derived: self.statement(way.target).clone(),
        }
    }

    fn materialize(&self, state: &ProofState, bits: &Bits, plan: &[u32]) -> Proof {
        let mut current = bits.clone();
        let mut positions: HashMap<u32, usize> = HashMap::new();
        for (i, e) in state.exprs().enumerate() {
            positions.insert(self.id_of(e).expect("state within universe"), i);
        }
        let mut next_index = state.len();
        let mut steps = Vec::with_capacity(plan.len());
        for &t in plan {
            let way = self.ways_by_target[t as usize]
                .iter()
                .map(|&w| &self.ways[w as usize])
                .find(|w| w.premises().iter().all(|&p| has_bit(&current, p)))
                .expect("plan step is applicable");
            steps.push(ProofStep {
                rule: way.rule,
                premises: way.premises().iter().map(|p| positions[p]).collect(),
                derived: self.universe[t as usize].clone(),
            });
            set_bit(&mut current, t);
            positions.insert(t, next_index);
            next_index += 1;
        }
        Proof { steps }
    }

    fn solve(&self, bits: &Bits, max_depth: usize) -> Option<Vec<u32>> {
        if let Some(hit) = self.cache.get(bits) {
            match &hit.plan {
                Some(p) if p.len() <= max_depth => return Some(p.clone()),
                Some(_) => return None,
                None if hit.bound >= max_depth => return None,
                None => {}
            }
        }
        let mut searcher = Searcher::new(self);
        let plan = searcher.iterative_deepening(bits, max_depth);
        if let Some(p) = &plan {
            self.seed_children(bits, p);
        }
        self.cache.insert(
            bits.clone(),
            Arc::new(Solved {
                plan: plan.clone(),
                bound: max_depth,
            }),
        );
        plan
    }

    /// Deriving a statement of a minimum plan leaves the rest of the plan
    /// minimum for the successor state.
    fn seed_children(&self, bits: &Bits, plan: &[u32]) {
        for (i, &t) in plan.iter().enumerate() {
            let applicable = self.ways_by_target[t as usize]
                .iter()
                .any(|&w| self.ways[w as usize].premises().iter().all(|&p| has_bit(bits, p)));
            if !applicable {
                continue;
            }
            let mut child = bits.clone();
            set_bit(&mut child, t);
            if self.cache.contains_key(&child) {
                continue;
            }
            let rest: Vec<u32> = plan.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &u)| u).collect();
            self.cache.insert(
                child,
                Arc::new(Solved {
                    bound: rest.len(),
                    plan: Some(rest),
                }),
            );
        }
    }

    /// Every statement set that forms a minimum-length proof from the
    /// premises (up to `limit` sets).
    pub(crate) fn minimum_proof_sets(&self, max_depth: usize, limit: usize) -> Vec<Vec<u32>> {
        let base = self.base.clone();
        let Some(best) = self.solve(&base, max_depth) else {
            return Vec::new();
        };
        let mut searcher = Searcher::new(self);
        searcher.collect_limit = limit;
        let mut path = Vec::new();
        searcher.dfs(&base, best.len(), None, &mut path, true);
        let mut sets: BTreeSet<Vec<u32>> = BTreeSet::new();
        for mut s in searcher.found {
            s.sort_unstable();
            sets.insert(s);
        }
        sets.into_iter().collect()
    }

    /// Rules that occur in some minimum-length proof from the premises.
    pub fn targeted_rules(&self, max_depth: usize) -> BTreeSet<Rule> {
        let mut rules = BTreeSet::new();
        for set in self.minimum_proof_sets(max_depth, 20_000) {
            for &t in &set {
                for &w in &self.ways_by_target[t as usize] {
                    let way = &self.ways[w as usize];
                    if rules.contains(&way.rule) {
                        continue;
                    }
                    if self.realizable_with(&set, t, way) {
                        rules.insert(way.rule);
                    }
                }
            }
        }
        rules
    }

    /// Whether the statements in `set` can all be derived from the base
    /// when `target` must be obtained through `forced`.
    fn realizable_with(&self, set: &[u32], target: u32, forced: &Way) -> bool {
        let mut have = self.base.clone();
        let mut remaining: Vec<u32> = set.to_vec();
        loop {
            let before = remaining.len();
            remaining.retain(|&s| {
                let ok = if s == target {
                    forced.premises().iter().all(|&p| has_bit(&have, p))
                } else {
                    self.ways_by_target[s as usize].iter().any(|&w| {
                        self.ways[w as usize]
                            .premises()
                            .iter()
                            .all(|&p| has_bit(&have, p))
                    })
                };
                if ok {
                    set_bit(&mut have, s);
                }
                !ok
            });
            if remaining.is_empty() {
                return true;
            }
            if remaining.len() == before {
                return false;
            }
        }
    }
}

struct Searcher<'a> {
    space: &'a ProblemSpace,
    /// Failed (state, last derived) pairs with the depth they failed at.
    failed: HashMap<(Bits, u32), usize>,
    counters: Vec<u8>,
    cost: Vec<u32>,
    pcf: Vec<u32>,
    value: Vec<u32>,
    zone: Vec<bool>,
    reached: Vec<bool>,
    cut: Vec<u32>,
    heap: BinaryHeap<Reverse<(u32, u32)>>,
    queue: Vec<u32>,
    found: Vec<Vec<u32>>,
    collect_limit: usize,
    stats: SearchStats,
}

impl<'a> Searcher<'a> {
    fn new(space: &'a ProblemSpace) -> Self {
        Searcher {
            space,
            failed: HashMap::new(),
            counters: vec![0; space.ways.len()],
            cost: vec![1; space.ways.len()],
            pcf: vec![NO_PCF; space.ways.len()],
            value: vec![INF; space.universe.len()],
            zone: vec![false; space.universe.len()],
            reached: vec![false; space.universe.len()],
            cut: Vec::new(),
            heap: BinaryHeap::new(),
            queue: Vec::new(),
            found: Vec::new(),
            collect_limit: 0,
            stats: SearchStats::default(),
        }
    }

    fn iterative_deepening(&mut self, bits: &Bits, max_depth: usize) -> Option<Vec<u32>> {
        if has_bit(bits, self.space.conclusion) {
            return Some(Vec::new());
        }
        let h = self.lm_cut(bits, max_depth);
        if h > max_depth {
            return None;
        }
        for depth in h.max(1)..=max_depth {
            let mut path = Vec::new();
            if self.dfs(bits, depth, None, &mut path, false) {
                return Some(path);
            }
        }
        None
    }

    /// Cost-weighted relaxed levels from `bits`: fills `value` and, for each
    /// way that fires, its last-finalized (maximal) premise in `pcf`.
    fn relaxed_levels(&mut self, bits: &Bits) {
        let space = self.space;
        self.value.fill(INF);
        self.heap.clear();
        for u in 0..space.universe.len() as u32 {
            if has_bit(bits, u) {
                self.value[u as usize] = 0;
                self.heap.push(Reverse((0, u)));
            }
        }
        for (i, w) in space.ways.iter().enumerate() {
            self.counters[i] = w.arity;
            self.pcf[i] = NO_PCF;
        }
        while let Some(Reverse((v, u))) = self.heap.pop() {
            if v > self.value[u as usize] {
                continue;
            }
            for &wi in &space.ways_by_premise[u as usize] {
                // a unary way lists its premise once; binary ways have distinct premises
                self.counters[wi as usize] -= 1;
                if self.counters[wi as usize] == 0 {
                    self.pcf[wi as usize] = u;
                    let t = space.ways[wi as usize].target as usize;
                    let cand = v + self.cost[wi as usize];
                    if cand < self.value[t] {
                        self.value[t] = cand;
                        self.heap.push(Reverse((cand, t as u32)));
                    }
                }
            }
        }
    }

    /// LM-cut lower bound on the derivations still needed; returns
    /// `bound + 1` once it exceeds `bound`.
    fn lm_cut(&mut self, bits: &Bits, bound: usize) -> usize {
        let space = self.space;
        let goal = space.conclusion as usize;
        self.cost.fill(1);
        let mut h = 0usize;
        loop {
            self.relaxed_levels(bits);
            let g = self.value[goal];
            if g == INF {
                return bound + 1;
            }
            if g == 0 {
                return h;
            }
            if h + g as usize > bound {
                return bound + 1;
            }
            // goal zone: statements reaching the goal over zero-cost ways
            self.zone.fill(false);
            self.zone[goal] = true;
            self.queue.clear();
            self.queue.push(goal as u32);
            while let Some(t) = self.queue.pop() {
                for &wi in &space.ways_by_target[t as usize] {
                    let p = self.pcf[wi as usize];
                    if p != NO_PCF && self.cost[wi as usize] == 0 && !self.zone[p as usize] {
                        self.zone[p as usize] = true;
                        self.queue.push(p);
                    }
                }
            }
            // statements reachable from the state without entering the zone
            self.reached.fill(false);
            self.queue.clear();
            for u in 0..space.universe.len() as u32 {
                if has_bit(bits, u) {
                    self.reached[u as usize] = true;
                    self.queue.push(u);
                }
            }
            self.cut.clear();
            while let Some(u) = self.queue.pop() {
                for &wi in &space.ways_by_premise[u as usize] {
                    if self.pcf[wi as usize] != u {
                        continue;
                    }
                    let t = space.ways[wi as usize].target as usize;
                    if self.zone[t] {
                        self.cut.push(wi);
                    } else if !self.reached[t] {
                        self.reached[t] = true;
                        self.queue.push(t as u32);
                    }
                }
            }
            let m = self.cut.iter().map(|&w| self.cost[w as usize]).min().expect("nonempty cut");
            for &w in &self.cut {
                self.cost[w as usize] -= m;
            }
            h += m as usize;
        }
    }

    fn derivable(&self, bits: &Bits) -> Vec<u32> {
        let space = self.space;
        let mut seen = vec![false; space.universe.len()];
        let mut out = Vec::new();
        for w in &space.ways {
            let t = w.target;
            if seen[t as usize] || has_bit(bits, t) {
                continue;
            }
            if w.premises().iter().all(|&p| has_bit(bits, p)) {
                seen[t as usize] = true;
                out.push(t);
            }
        }
        out.sort_by_key(|&t| space.rank[t as usize]);
        out
    }

    /// True when `t` needs `last` among its premises under every way
    /// available in `bits`.
    fn depends_on(&self, bits: &Bits, t: u32, last: u32) -> bool {
        !self.space.ways_by_target[t as usize].iter().any(|&w| {
            let w = &self.space.ways[w as usize];
            w.premises().iter().all(|&p| p != last && has_bit(bits, p))
        })
    }

    fn dfs(&mut self, bits: &Bits, depth: usize, last: Option<u32>, path: &mut Vec<u32>, collect: bool) -> bool {
        self.stats.nodes += 1;
        let space = self.space;
        if has_bit(bits, space.conclusion) {
            if collect {
                self.found.push(path.clone());
                return self.found.len() >= self.collect_limit;
            }
            return true;
        }
        if depth == 0 {
            return false;
        }
        let memo_key = (bits.clone(), last.unwrap_or(u32::MAX));
        if let Some(&d) = self.failed.get(&memo_key) {
            if d >= depth {
                return false;
            }
        }
        if self.lm_cut(bits, depth) > depth {
            self.failed.insert(memo_key, depth);
            return false;
        }
        let mut candidates = self.derivable(bits);
        if depth == 1 {
            candidates.retain(|&t| t == space.conclusion);
        }
        let mut any = false;
        for t in candidates {
            if let Some(a) = last {
                if space.rank[t as usize] < space.rank[a as usize] && !self.depends_on(bits, t, a) {
                    continue;
                }
            }
            let mut next = bits.clone();
            set_bit(&mut next, t);
            path.push(t);
            let before = self.found.len();
            if self.dfs(&next, depth - 1, Some(t), path, collect) {
                return true;
            }
            path.pop();
            if self.found.len() > before {
                any = true;
            }
        }
        if !any {
            self.failed.insert(memo_key, depth);
        }
        false
    }
}

fn set_bit(bits: &mut [u64], i: u32) {
    bits[(i / 64) as usize] |= 1 << (i % 64);
}

fn has_bit(bits: &[u64], i: u32) -> bool {
    bits[(i / 64) as usize] & (1 << (i % 64)) != 0
}

/// Minimum-derivation proof of `problem` from its premises, or `None` when
/// none exists within `max_depth` derivations.
pub fn shortest_proof(problem: &Problem, max_depth: usize) -> Option<Proof> {
    let space = ProblemSpace::new(problem);
    space.shortest_from(&ProofState::new(problem), max_depth)
}
