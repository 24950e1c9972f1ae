//! Trace-log schema, validation, persistence and replay into steps.
//!
//! Traces are line-delimited JSON, one [`TraceEvent`] per line with a fixed
//! key order. Replaying a student's events through the logic kernel yields
//! one [`StepRecord`] per realized state transition.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{Expr, KeyMode, Problem, ProofState, Rule, StateKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Derive,
    Delete,
    HintRequest,
    ProactiveHint,
    HintJustified,
    ProblemComplete,
    Prediction,
}

impl EventKind {
    pub fn is_hint(self) -> bool {
        matches!(self, EventKind::HintRequest | EventKind::ProactiveHint)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    StateBased,
    StateFree,
}

impl fmt::Display for Classifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classifier::StateBased => "state_based",
            Classifier::StateFree => "state_free",
        })
    }
}

/// Predictor output logged at the start of a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub score: f64,
    pub helpneed: bool,
    pub classifier: Classifier,
    /// Whether the policy acted on it (false for shadow predictions).
    pub acted: bool,
}

/// One logged action. Optional fields are present only for the kinds that
/// use them; see [`validate_events`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub student: String,
    pub problem: String,
    pub seq: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premises: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statement: Option<Expr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint_seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<PredictionRecord>,
    /// Seconds since the previous event by the same student.
    pub action_time: f64,
}

impl TraceEvent {
    pub fn new(student: &str, problem: &str, seq: u64, kind: EventKind, action_time: f64) -> Self {
        TraceEvent {
            student: student.to_string(),
            problem: problem.to_string(),
            seq,
            kind,
            rule: None,
            premises: None,
            index: None,
            statement: None,
            correct: None,
            hint_seq: None,
            prediction: None,
            action_time,
        }
    }

    pub fn derive(
        student: &str,
        problem: &str,
        seq: u64,
        rule: Rule,
        premises: Vec<usize>,
        statement: Expr,
        correct: bool,
        action_time: f64,
    ) -> Self {
        TraceEvent {
            rule: Some(rule),
            premises: Some(premises),
            statement: Some(statement),
            correct: Some(correct),
            ..TraceEvent::new(student, problem, seq, EventKind::Derive, action_time)
        }
    }

    pub fn delete(student: &str, problem: &str, seq: u64, index: usize, statement: Expr, action_time: f64) -> Self {
        TraceEvent {
            index: Some(index),
            statement: Some(statement),
            ..TraceEvent::new(student, problem, seq, EventKind::Delete, action_time)
        }
    }

    pub fn hint(student: &str, problem: &str, seq: u64, kind: EventKind, statement: Expr, action_time: f64) -> Self {
        debug_assert!(kind.is_hint());
        TraceEvent {
            statement: Some(statement),
            ..TraceEvent::new(student, problem, seq, kind, action_time)
        }
    }

    pub fn justified(student: &str, problem: &str, seq: u64, hint_seq: u64, statement: Expr) -> Self {
        TraceEvent {
            hint_seq: Some(hint_seq),
            statement: Some(statement),
            ..TraceEvent::new(student, problem, seq, EventKind::HintJustified, 0.0)
        }
    }

    pub fn prediction(student: &str, problem: &str, seq: u64, record: PredictionRecord) -> Self {
        TraceEvent {
            prediction: Some(record),
            ..TraceEvent::new(student, problem, seq, EventKind::Prediction, 0.0)
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: seq {seq} does not increase for student {student} on {problem}")]
    NonMonotoneSeq {
        line: usize,
        student: String,
        problem: String,
        seq: u64,
    },
    #[error("replay of {student} on {problem} failed at seq {seq}: {message}")]
    Replay {
        student: String,
        problem: String,
        seq: u64,
        message: String,
    },
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
}

fn schema(line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Schema {
        line,
        message: message.into(),
    }
}

/// Checks per-kind required fields, non-negative action times, strictly
/// increasing seq per (student, problem), and that every justification
/// references an earlier hint. Line numbers are 1-based event positions.
pub fn validate_events(events: &[TraceEvent]) -> Result<(), CorpusError> {
    let mut last_seq: HashMap<(&str, &str), u64> = HashMap::new();
    let mut hints: HashMap<(&str, &str), Vec<u64>> = HashMap::new();
    for (i, e) in events.iter().enumerate() {
        let line = i + 1;
        if !e.action_time.is_finite() || e.action_time < 0.0 {
            return Err(schema(line, format!("action_time must be a non-negative number, got {}", e.action_time)));
        }
        let key = (e.student.as_str(), e.problem.as_str());
        if let Some(&prev) = last_seq.get(&key) {
            if e.seq <= prev {
                return Err(CorpusError::NonMonotoneSeq {
                    line,
                    student: e.student.clone(),
                    problem: e.problem.clone(),
                    seq: e.seq,
                });
            }
        }
        last_seq.insert(key, e.seq);
        let need = |ok: bool, what: &str| if ok { Ok(()) } else { Err(schema(line, format!("{:?} event requires {what}", e.kind))) };
        match e.kind {
            EventKind::Derive => {
                need(e.rule.is_some(), "rule")?;
                need(e.premises.is_some(), "premises")?;
                need(e.statement.is_some(), "statement")?;
                need(e.correct.is_some(), "a correctness flag")?;
            }
            EventKind::Delete => {
                need(e.index.is_some(), "index")?;
                need(e.statement.is_some(), "statement")?;
            }
            EventKind::HintRequest | EventKind::ProactiveHint => {
                need(e.statement.is_some(), "the hinted statement")?;
                hints.entry(key).or_default().push(e.seq);
            }
            EventKind::HintJustified => {
                need(e.statement.is_some(), "statement")?;
                let Some(h) = e.hint_seq else {
                    return Err(schema(line, "hint_justified event requires hint_seq"));
                };
                if !hints.get(&key).is_some_and(|v| v.contains(&h)) {
                    return Err(schema(line, format!("hint_justified references seq {h}, which is not a prior hint")));
                }
            }
            EventKind::Prediction => need(e.prediction.is_some(), "a prediction record")?,
            EventKind::ProblemComplete => {}
        }
    }
    Ok(())
}

pub fn read_traces(reader: impl BufRead) -> Result<Vec<TraceEvent>, CorpusError> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: TraceEvent = serde_json::from_str(&line).map_err(|e| schema(i + 1, e.to_string()))?;
        events.push(event);
    }
    validate_events(&events)?;
    Ok(events)
}

pub fn load_traces(path: &Path) -> Result<Vec<TraceEvent>, CorpusError> {
    read_traces(BufReader::new(std::fs::File::open(path)?))
}

pub fn write_events(events: &[TraceEvent], mut out: impl Write) -> Result<(), CorpusError> {
    for e in events {
        serde_json::to_writer(&mut out, e).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Validates, then writes one event per line.
pub fn write_traces(events: &[TraceEvent], path: &Path) -> Result<(), CorpusError> {
    validate_events(events)?;
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    write_events(events, &mut out)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Derive,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateKeys {
    pub ordered: StateKey,
    pub unordered: StateKey,
}

impl StateKeys {
    pub fn of(state: &ProofState) -> Self {
        StateKeys {
            ordered: state.key(KeyMode::Ordered),
            unordered: state.key(KeyMode::Unordered),
        }
    }

    pub fn get(&self, mode: KeyMode) -> &StateKey {
        match mode {
            KeyMode::Ordered => &self.ordered,
            KeyMode::Unordered => &self.unordered,
        }
    }
}

/// One realized state transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub student: String,
    pub problem: String,
    /// Position of this step within the student's attempt.
    pub index: usize,
    pub seq: u64,
    pub kind: StepKind,
    pub rule: Option<Rule>,
    pub statement: Expr,
    pub pre: StateKeys,
    pub post: StateKeys,
    /// Seconds, including failed attempts and hint traffic folded in.
    pub duration: f64,
    pub hint_used: bool,
    /// No failed attempt preceded the realized application.
    pub correct: bool,
    pub failed_attempts: u32,
    pub reaches_goal: bool,
    pub hints_requested: u32,
    pub proactive_hints: u32,
    pub prediction: Option<PredictionRecord>,
}

impl StepRecord {
    pub fn hints_received(&self) -> u32 {
        self.hints_requested + self.proactive_hints
    }
}

#[derive(Default)]
struct Window {
    time: f64,
    failed: u32,
    requested: u32,
    proactive: u32,
    prediction: Option<PredictionRecord>,
}

/// Replays one problem's events (any number of students) into steps.
///
/// Failed applications are not transitions: their time and count fold
/// into the next realized step. A justification attaches to the step it
/// justifies; anything logged after the final step folds into that step.
pub fn events_to_steps(events: &[TraceEvent], problem: &Problem) -> Result<Vec<StepRecord>, CorpusError> {
    let mut by_student: Vec<(&str, Vec<&TraceEvent>)> = Vec::new();
    for e in events.iter().filter(|e| e.problem == problem.id) {
        match by_student.iter_mut().find(|(s, _)| *s == e.student) {
            Some((_, v)) => v.push(e),
            None => by_student.push((&e.student, vec![e])),
        }
    }
    let mut out = Vec::new();
    for (student, mut evs) in by_student {
        evs.sort_by_key(|e| e.seq);
        replay_attempt(student, &evs, problem, &mut out)?;
    }
    Ok(out)
}

fn replay_attempt(student: &str, events: &[&TraceEvent], problem: &Problem, out: &mut Vec<StepRecord>) -> Result<(), CorpusError> {
    let mut replayer = Replayer::new(student, problem);
    for e in events {
        replayer.push(e)?;
    }
    out.extend(replayer.finish());
    Ok(())
}

/// Incremental replay of one student's attempt at one problem.
pub struct Replayer<'a> {
    student: String,
    problem: &'a Problem,
    state: ProofState,
    window: Window,
    hinted: HashMap<u64, Expr>,
    steps: Vec<StepRecord>,
}

impl<'a> Replayer<'a> {
    pub fn new(student: &str, problem: &'a Problem) -> Self {
        Replayer {
            student: student.to_string(),
            problem,
            state: ProofState::new(problem),
            window: Window::default(),
            hinted: HashMap::new(),
            steps: Vec::new(),
        }
    }

    pub fn state(&self) -> &ProofState {
        &self.state
    }

    /// Steps realized so far; events since the last one are still pending.
    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    fn fail(&self, seq: u64, message: String) -> CorpusError {
        CorpusError::Replay {
            student: self.student.clone(),
            problem: self.problem.id.clone(),
            seq,
            message,
        }
    }

    /// Applies one event; events must arrive in seq order.
    pub fn push(&mut self, e: &TraceEvent) -> Result<(), CorpusError> {
        self.window.time += e.action_time;
        match e.kind {
            EventKind::Derive => {
                let rule = e.rule.expect("validated");
                let premises = e.premises.as_deref().expect("validated");
                let stmt = e.statement.clone().expect("validated");
                if e.correct != Some(true) {
                    if let Ok(true) = crate::logic::check_step(&self.state, rule, premises, &stmt) {
                        if !self.state.contains(&stmt) {
                            return Err(self.fail(e.seq, "application logged as incorrect is correct".into()));
                        }
                    }
                    self.window.failed += 1;
                    return Ok(());
                }
                let pre = StateKeys::of(&self.state);
                let derived = self.state.derive(rule, premises, stmt.clone());
                let derived = derived.map_err(|err| self.fail(e.seq, err.to_string()))?;
                if !derived {
                    return Err(self.fail(e.seq, format!("{rule} does not derive {stmt}")));
                }
                self.close_step(e, StepKind::Derive, Some(rule), stmt, pre);
            }
            EventKind::Delete => {
                let index = e.index.expect("validated");
                let stmt = e.statement.clone().expect("validated");
                let pre = StateKeys::of(&self.state);
                let removed = self.state.delete(index);
                let removed = removed.map_err(|err| self.fail(e.seq, err.to_string()))?;
                if !removed.matches(&stmt) {
                    return Err(self.fail(e.seq, format!("statement {index} is {removed}, not {stmt}")));
                }
                self.close_step(e, StepKind::Delete, None, stmt, pre);
            }
            EventKind::HintRequest | EventKind::ProactiveHint => {
                self.hinted.insert(e.seq, e.statement.clone().expect("validated"));
                if e.kind == EventKind::HintRequest {
                    self.window.requested += 1;
                } else {
                    self.window.proactive += 1;
                }
            }
            EventKind::HintJustified => {
                let stmt = e.statement.as_ref().expect("validated");
                let hint_seq = e.hint_seq.expect("validated");
                let matches_hint = self.hinted.get(&hint_seq).is_some_and(|h| h.matches(stmt));
                let ok = self
                    .steps
                    .last()
                    .map(|last| matches_hint && last.kind == StepKind::Derive && last.statement.matches(stmt));
                match ok {
                    None => return Err(self.fail(e.seq, "justification before any step".into())),
                    Some(false) => return Err(self.fail(e.seq, "justification does not match the preceding derivation and hint".into())),
                    Some(true) => {}
                }
                let last = self.steps.last_mut().expect("checked");
                last.hint_used = true;
                last.duration += self.window.time;
                self.window.time = 0.0;
            }
            EventKind::Prediction => {
                if self.window.prediction.is_none() {
                    self.window.prediction = e.prediction;
                }
            }
            EventKind::ProblemComplete => {}
        }
        Ok(())
    }

    /// Folds trailing events into the last step and returns all steps.
    pub fn finish(mut self) -> Vec<StepRecord> {
        if let Some(last) = self.steps.last_mut() {
            last.duration += self.window.time;
            last.failed_attempts += self.window.failed;
            last.hints_requested += self.window.requested;
            last.proactive_hints += self.window.proactive;
        }
        self.steps
    }

    fn close_step(&mut self, e: &TraceEvent, kind: StepKind, rule: Option<Rule>, statement: Expr, pre: StateKeys) {
        let w = std::mem::take(&mut self.window);
        self.steps.push(StepRecord {
            student: self.student.clone(),
            problem: self.problem.id.clone(),
            index: self.steps.len(),
            seq: e.seq,
            kind,
            rule,
            statement,
            pre,
            post: StateKeys::of(&self.state),
            duration: w.time,
            hint_used: false,
            correct: w.failed == 0,
            failed_attempts: w.failed,
            reaches_goal: self.state.is_complete(&self.problem.conclusion),
            hints_requested: w.requested,
            proactive_hints: w.proactive,
            prediction: w.prediction,
        });
    }
}

/// Replays a whole corpus. Steps come back grouped by problem in the order
/// of `problems`, students in order of first appearance.
pub fn corpus_steps(events: &[TraceEvent], problems: &[Problem]) -> Result<Vec<StepRecord>, CorpusError> {
    let known: HashMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
    if let Some(e) = events.iter().find(|e| !known.contains_key(e.problem.as_str())) {
        return Err(CorpusError::UnknownProblem(e.problem.clone()));
    }
    let mut by_problem: BTreeMap<&str, Vec<TraceEvent>> = BTreeMap::new();
    for e in events {
        by_problem.entry(e.problem.as_str()).or_default().push(e.clone());
    }
    let mut out = Vec::new();
    for p in problems {
        if let Some(evs) = by_problem.get(p.id.as_str()) {
            out.extend(events_to_steps(evs, p)?);
        }
    }
    Ok(out)
}
