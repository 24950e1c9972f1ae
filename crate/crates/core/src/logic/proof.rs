use std::fmt;

use serde::{Deserialize, Serialize};

use super::expr::{Expr, NormKey};
use super::problem::Problem;
use super::rules::{derives, Rule};
use super::LogicError;

/// How a derived statement was obtained. `cited` keeps the premise
/// statements themselves so the record stays checkable after deletions
/// shift indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Justification {
    pub rule: Rule,
    pub premises: Vec<usize>,
    pub cited: Vec<Expr>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub expr: Expr,
    /// `None` for a given premise.
    pub justification: Option<Justification>,
}

impl Statement {
    pub fn is_premise(&self) -> bool {
        self.justification.is_none()
    }
}

/// A snapshot of one attempt at a problem: the given premises followed by
/// derived statements in derivation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofState {
    pub problem_id: String,
    statements: Vec<Statement>,
}

impl ProofState {
    pub fn new(problem: &Problem) -> Self {
        ProofState {
            problem_id: problem.id.clone(),
            statements: problem
                .premises
                .iter()
                .map(|e| Statement {
                    expr: e.clone(),
                    justification: None,
                })
                .collect(),
        }
    }

    pub fn statements(&self) -> &[Statement] {
        &self.statements
    }

    pub fn exprs(&self) -> impl Iterator<Item = &Expr> {
        self.statements.iter().map(|s| &s.expr)
    }

    pub fn derived(&self) -> impl Iterator<Item = &Expr> {
        self.statements
            .iter()
            .filter(|s| !s.is_premise())
            .map(|s| &s.expr)
    }

    pub fn derived_count(&self) -> usize {
        self.statements.iter().filter(|s| !s.is_premise()).count()
    }

    pub fn len(&self) -> usize {
        self.statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }

    pub fn position(&self, expr: &Expr) -> Option<usize> {
        let key = expr.norm_key();
        self.statements.iter().position(|s| s.expr.norm_key() == key)
    }

    pub fn contains(&self, expr: &Expr) -> bool {
        self.position(expr).is_some()
    }

    pub fn is_complete(&self, conclusion: &Expr) -> bool {
        self.contains(conclusion)
    }

    fn select(&self, indices: &[usize]) -> Result<Vec<&Expr>, LogicError> {
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= self.statements.len() {
                return Err(LogicError::IndexOutOfRange {
                    index: idx,
                    len: self.statements.len(),
                });
            }
            if indices[..i].contains(&idx) {
                return Err(LogicError::RepeatedPremise);
            }
        }
        Ok(indices.iter().map(|&i| &self.statements[i].expr).collect())
    }

    /// Appends `derived` when it is a correct application; returns whether
    /// it was. Incorrect applications leave the state untouched.
    pub fn derive(&mut self, rule: Rule, premises: &[usize], derived: Expr) -> Result<bool, LogicError> {
        if !check_step(self, rule, premises, &derived)? {
            return Ok(false);
        }
        if self.contains(&derived) {
            return Err(LogicError::Duplicate(derived.to_string()));
        }
        let cited = self.select(premises)?.into_iter().cloned().collect();
        self.statements.push(Statement {
            expr: derived,
            justification: Some(Justification {
                rule,
                premises: premises.to_vec(),
                cited,
            }),
        });
        Ok(true)
    }

    /// Removes a derived statement. Statements that cited it stay.
    pub fn delete(&mut self, index: usize) -> Result<Expr, LogicError> {
        let stmt = self.statements.get(index).ok_or(LogicError::IndexOutOfRange {
            index,
            len: self.statements.len(),
        })?;
        if stmt.is_premise() {
            return Err(LogicError::PremiseDeletion(index));
        }
        Ok(self.statements.remove(index).expr)
    }

    pub fn key(&self, mode: KeyMode) -> StateKey {
        canonical_state(self, mode)
    }
}

/// Whether `derived` follows from the statements at `premise_indices` by
/// `rule`. Pure: the state is not modified.
pub fn check_step(
    state: &ProofState,
    rule: Rule,
    premise_indices: &[usize],
    derived: &Expr,
) -> Result<bool, LogicError> {
    let premises = state.select(premise_indices)?;
    derives(rule, &premises, derived)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeyMode {
    Ordered,
    #[default]
    Unordered,
}

impl std::str::FromStr for KeyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ordered" => Ok(KeyMode::Ordered),
            "unordered" => Ok(KeyMode::Unordered),
            other => Err(format!("unknown key mode `{other}` (expected ordered|unordered)")),
        }
    }
}

impl fmt::Display for KeyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyMode::Ordered => "ordered",
            KeyMode::Unordered => "unordered",
        })
    }
}

/// Identity of a proof state within one problem. Premises are fixed per
/// problem, so only derived statements enter the key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateKey(pub String);

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            f.write_str("<start>")
        } else {
            f.write_str(&self.0)
        }
    }
}

const KEY_SEPARATOR: &str = " ; ";

/// Ordered keys list derived statements in derivation order; unordered keys
/// sort them, so states reached in different orders collide.
pub fn canonical_state(state: &ProofState, mode: KeyMode) -> StateKey {
    let mut parts: Vec<NormKey> = state.derived().map(Expr::norm_key).collect();
    if mode == KeyMode::Unordered {
        parts.sort();
    }
    StateKey(
        parts
            .iter()
            .map(|k| k.0.as_str())
            .collect::<Vec<_>>()
            .join(KEY_SEPARATOR),
    )
}
