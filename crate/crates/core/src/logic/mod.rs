//! Propositional logic kernel: expressions, rules, proof states and the
//! shortest-proof search used as an optimality oracle.

mod expr;
mod problem;
mod proof;
mod rules;
mod search;

pub use expr::{entails, parse_expression, Expr, NormKey, ParseError};
pub use problem::{load_problems, shipped_problems, write_problems, Problem, ProblemError, Section};
pub use proof::{canonical_state, check_step, Justification, KeyMode, ProofState, StateKey, Statement};
pub use rules::{apply_rule, derives, Rule, RuleKind};
pub use search::{shortest_proof, Proof, ProofStep, ProblemSpace, SearchStats};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogicError {
    #[error("rule {rule} takes {expected} premise(s), got {got}")]
    Arity { rule: Rule, expected: usize, got: usize },
    #[error("statement index {index} out of range (state has {len} statements)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("statement {0} is already present")]
    Duplicate(String),
    #[error("statement {0} is a premise and cannot be deleted")]
    PremiseDeletion(usize),
    #[error("premise indices must be distinct")]
    RepeatedPremise,
    #[error("unknown rule `{0}`")]
    UnknownRule(String),
}
