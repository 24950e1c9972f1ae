//! Next-step hints from the interaction network, with a shortest-proof
//! fallback so every solvable state gets a hint.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::StepKind;
use crate::logic::{Expr, KeyMode, Problem, ProblemSpace, ProofState};
use crate::network::InteractionNetwork;

/// Extra derivations beyond the problem's optimal length the fallback
/// search may use.
pub const FALLBACK_SLACK: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HintError {
    #[error("no proof of {problem} within {depth} derivations from the current state")]
    Unsolvable { problem: String, depth: usize },
    #[error("the conclusion is already derived")]
    AlreadySolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintSource {
    Network,
    SearchFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agency {
    Proactive,
    OnDemand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hint {
    pub statement: Expr,
    pub source: HintSource,
    pub agency: Agency,
    pub justified: bool,
    /// Index of the step the hint was issued for.
    pub issued_at: usize,
}

impl Hint {
    /// Marks the hint justified when `derived` is its statement and the
    /// application was correct.
    pub fn record_justification(&mut self, kind: StepKind, derived: &Expr, correct: bool) -> bool {
        if kind == StepKind::Derive && correct && !self.justified && self.statement.matches(derived) {
            self.justified = true;
        }
        self.justified
    }
}

/// Justifies the most recent unjustified hint whose statement matches
/// `derived`; returns its position.
pub fn justify_latest(hints: &mut [Hint], derived: &Expr) -> Option<usize> {
    let i = hints.iter().rposition(|h| !h.justified && h.statement.matches(derived))?;
    hints[i].justified = true;
    Some(i)
}

/// Hint selection for one problem. The network is optional; without it
/// every hint comes from search.
#[derive(Debug, Clone)]
pub struct HintEngine {
    problem: Problem,
    space: Arc<ProblemSpace>,
    network: Option<Arc<InteractionNetwork>>,
}

impl HintEngine {
    pub fn new(problem: Problem, space: Arc<ProblemSpace>, network: Option<Arc<InteractionNetwork>>) -> Self {
        HintEngine { problem, space, network }
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn space(&self) -> &Arc<ProblemSpace> {
        &self.space
    }

    pub fn network(&self) -> Option<&InteractionNetwork> {
        self.network.as_deref()
    }

    pub fn depth_bound(&self) -> usize {
        self.problem.optimal_length + FALLBACK_SLACK
    }

    /// Space covering `state`; statements outside the shared universe get a
    /// private space.
    fn space_for(&self, state: &ProofState) -> Arc<ProblemSpace> {
        if state.exprs().all(|e| self.space.id_of(e).is_some()) {
            self.space.clone()
        } else {
            let extra: Vec<Expr> = state.exprs().cloned().collect();
            Arc::new(ProblemSpace::with_extra(&self.problem, &extra))
        }
    }

    /// Hints the network successor with the highest value among those that
    /// keep the state on a shortest route (ties by statement text), or the
    /// first step of a shortest proof when there is none.
    pub fn next_step_hint(&self, state: &ProofState, agency: Agency, issued_at: usize) -> Result<Hint, HintError> {
        if state.is_complete(&self.problem.conclusion) {
            return Err(HintError::AlreadySolved);
        }
        let depth = self.depth_bound();
        let space = self.space_for(state);
        let unsolvable = || HintError::Unsolvable {
            problem: self.problem.id.clone(),
            depth,
        };
        let distance = space.distance(state, depth).ok_or_else(unsolvable)?;
        let hint = |statement: Expr, source: HintSource| Hint {
            statement,
            source,
            agency,
            justified: false,
            issued_at,
        };
        if let Some(statement) = self.network_choice(&space, state, distance) {
            return Ok(hint(statement, HintSource::Network));
        }
        let proof = space.shortest_from(state, depth).ok_or_else(unsolvable)?;
        let first = proof.steps.into_iter().next().ok_or(HintError::AlreadySolved)?;
        Ok(hint(first.derived, HintSource::SearchFallback))
    }

    fn network_choice(&self, space: &ProblemSpace, state: &ProofState, distance: usize) -> Option<Expr> {
        let net = self.network.as_deref()?;
        let key = net.resolve(state, KeyMode::Unordered)?;
        let mut candidates: Vec<(f64, String, &Expr)> = net
            .successors(key)
            .filter(|(to, e)| e.kind == StepKind::Derive && net.nodes[*to].goal_reachable && !state.contains(&e.statement))
            .map(|(to, e)| (net.nodes[to].value, e.statement.to_string(), &e.statement))
            .collect();
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let steps = space.applicable_steps(state)?;
        for (_, _, statement) in candidates {
            let Some(step) = steps.iter().find(|s| s.derived.matches(statement)) else {
                continue;
            };
            let mut child = state.clone();
            if !child.derive(step.rule, &step.premises, step.derived.clone()).unwrap_or(false) {
                continue;
            }
            if space.distance(&child, distance - 1) == Some(distance - 1) {
                return Some(statement.clone());
            }
        }
        None
    }
}

/// One-off hint without a shared space.
pub fn next_step_hint(network: Option<&InteractionNetwork>, state: &ProofState, problem: &Problem) -> Result<Hint, HintError> {
    let engine = HintEngine::new(
        problem.clone(),
        Arc::new(ProblemSpace::new(problem)),
        network.map(|n| Arc::new(n.clone())),
    );
    engine.next_step_hint(state, Agency::OnDemand, state.derived_count())
}
