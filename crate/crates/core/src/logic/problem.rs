use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::expr::Expr;
use super::rules::Rule;
use super::search::ProblemSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Introduction,
    Pretest,
    Training,
    Posttest,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Section::Introduction => "introduction",
            Section::Pretest => "pretest",
            Section::Training => "training",
            Section::Posttest => "posttest",
        })
    }
}

/// Extra size allowed for statements the search and agents may create,
/// on top of the largest statement in the problem.
pub const SIZE_SLACK: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub premises: Vec<Expr>,
    pub conclusion: Expr,
    pub allowed_rules: Vec<Rule>,
    pub section: Section,
    pub optimal_length: usize,
}

impl Problem {
    pub fn allows(&self, rule: Rule) -> bool {
        self.allowed_rules.contains(&rule)
    }

    /// Largest statement the search oracle and simulated students will
    /// derive for this problem.
    pub fn size_cap(&self) -> usize {
        self.premises
            .iter()
            .chain(std::iter::once(&self.conclusion))
            .map(Expr::size)
            .max()
            .unwrap_or(1)
            + SIZE_SLACK
    }

    /// Disjuncts the oracle may introduce with Addition: subformulas already
    /// present in the problem, deduplicated up to and/or reordering.
    pub fn addends(&self) -> Vec<Expr> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for stmt in self.premises.iter().chain(std::iter::once(&self.conclusion)) {
            for sub in stmt.subformulas() {
                if seen.insert(sub.norm_key()) {
                    out.push(sub.clone());
                }
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("problem {id}: conclusion not provable within {depth} derivations")]
    Unprovable { id: String, depth: usize },
    #[error("problem {id}: declared optimal length {declared}, shortest proof has {actual}")]
    LengthMismatch {
        id: String,
        declared: usize,
        actual: usize,
    },
    #[error("problem {0}: optimal_length must be at least 1")]
    ZeroLength(String),
}

/// Reads one problem per line. With `verify`, each problem's optimal length
/// is checked against the shortest-proof oracle.
pub fn load_problems(path: &Path, verify: bool) -> Result<Vec<Problem>, ProblemError> {
    let file = std::fs::File::open(path)?;
    parse_problems(std::io::BufReader::new(file), verify)
}

pub(crate) fn parse_problems(reader: impl BufRead, verify: bool) -> Result<Vec<Problem>, ProblemError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let problem: Problem = serde_json::from_str(&line).map_err(|e| ProblemError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        if problem.optimal_length == 0 {
            return Err(ProblemError::ZeroLength(problem.id));
        }
        if verify {
            verify_problem(&problem)?;
        }
        out.push(problem);
    }
    Ok(out)
}

pub fn verify_problem(problem: &Problem) -> Result<(), ProblemError> {
    let space = ProblemSpace::new(problem);
    match space.distance_from_start(problem.optimal_length) {
        None => Err(ProblemError::Unprovable {
            id: problem.id.clone(),
            depth: problem.optimal_length,
        }),
        Some(d) if d != problem.optimal_length => Err(ProblemError::LengthMismatch {
            id: problem.id.clone(),
            declared: problem.optimal_length,
            actual: d,
        }),
        Some(_) => Ok(()),
    }
}

pub fn write_problems(problems: &[Problem], mut out: impl Write) -> std::io::Result<()> {
    for p in problems {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

const SHIPPED: &str = include_str!("../../data/problems.jsonl");

/// The bundled problem set: pretest, training and posttest sections.
pub fn shipped_problems() -> Vec<Problem> {
    parse_problems(SHIPPED.as_bytes(), false).expect("bundled problem file is well-formed")
}
