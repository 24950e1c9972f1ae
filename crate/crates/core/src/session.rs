//! Live tutor sessions. A session is a header plus its event log; every
//! derived field is recomputed from the log, so replaying a stored log
//! restores the session exactly.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{events_to_steps, CorpusError, EventKind, PredictionRecord, Replayer, StepRecord, TraceEvent};
use crate::hints::{Agency, HintEngine, HintError, HintSource};
use crate::logic::{check_step, Expr, LogicError, Problem, ProofState, Rule, Section};
use crate::network::InteractionNetwork;
use crate::policy::{on_demand_hint, on_step_start, PolicyConfig, PolicyError, StepContext};
use crate::predictor::{HelpNeedModel, PriorAggregates};
use crate::sim::{student_stream, Curriculum};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error("{0}")]
    Conflict(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Hint(#[from] HintError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Immutable artifacts shared by all sessions.
pub struct Tutor {
    problems: Vec<Problem>,
    engines: BTreeMap<String, HintEngine>,
    model: Option<HelpNeedModel>,
    networks: BTreeMap<String, InteractionNetwork>,
}

const SECTION_ORDER: [Section; 4] = [Section::Introduction, Section::Pretest, Section::Training, Section::Posttest];

impl Tutor {
    pub fn new(curriculum: &Curriculum, networks: BTreeMap<String, InteractionNetwork>, model: Option<HelpNeedModel>) -> Self {
        let engines = curriculum.engines(Some(&networks));
        let problems = SECTION_ORDER.iter().flat_map(|&s| curriculum.section(s).cloned()).collect();
        Tutor {
            problems,
            engines,
            model,
            networks,
        }
    }

    /// Problems in the order a session visits them.
    pub fn problems(&self) -> &[Problem] {
        &self.problems
    }

    pub fn model(&self) -> Option<&HelpNeedModel> {
        self.model.as_ref()
    }

    fn engine(&self, problem: &Problem) -> &HintEngine {
        &self.engines[&problem.id]
    }
}

/// The persisted, non-derivable part of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub id: String,
    pub student: String,
    pub policy: PolicyConfig,
    pub seed: u64,
    pub problem_index: usize,
    pub finished: bool,
}

/// A hint as it appears in the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintView {
    /// Seq of the hint event.
    pub seq: u64,
    pub statement: Expr,
    pub agency: Agency,
    pub justified: bool,
    /// Superseded by a later proactive hint before being justified.
    pub replaced: bool,
    pub issued_at: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemView {
    pub id: String,
    pub section: Section,
    pub premises: Vec<Expr>,
    pub conclusion: Expr,
    pub allowed_rules: Vec<Rule>,
    pub optimal_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub id: String,
    pub student: String,
    pub policy: PolicyConfig,
    pub problem_index: usize,
    pub problem_count: usize,
    pub problem: Option<ProblemView>,
    pub state: Option<ProofState>,
    pub steps: usize,
    pub complete: bool,
    pub finished: bool,
    /// The most recent hint still waiting for justification.
    pub pending_hint: Option<HintView>,
    pub hints: Vec<HintView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepInput {
    Derive { rule: Rule, premises: Vec<usize>, statement: Expr },
    Delete { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub correct: bool,
    pub feedback: Option<String>,
    /// Seq of the hint this step justified.
    pub justified_hint: Option<u64>,
    pub complete: bool,
    /// Proactive hint for the upcoming step.
    pub proactive_hint: Option<HintView>,
    pub prediction: Option<PredictionRecord>,
    pub session: SessionSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintOutcome {
    pub hint: HintView,
    pub source: HintSource,
    pub session: SessionSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvanceOutcome {
    pub proactive_hint: Option<HintView>,
    pub prediction: Option<PredictionRecord>,
    pub session: SessionSnapshot,
}

/// Current-problem view rebuilt from the log.
#[derive(Debug, Clone, Default)]
struct Attempt {
    state: Option<ProofState>,
    steps: Vec<StepRecord>,
    hints: Vec<HintView>,
    since_proactive: Option<usize>,
}

pub struct Session {
    tutor: Arc<Tutor>,
    header: SessionHeader,
    events: Vec<TraceEvent>,
    prior: PriorAggregates,
    attempt: Attempt,
}

impl Session {
    /// Starts at the first problem; a training-first curriculum gets its
    /// opening prediction right away.
    pub fn new(tutor: Arc<Tutor>, id: &str, student: &str, policy: PolicyConfig, seed: u64) -> Result<Self, SessionError> {
        policy.check(tutor.model())?;
        let header = SessionHeader {
            id: id.to_string(),
            student: student.to_string(),
            policy,
            seed,
            problem_index: 0,
            finished: tutor.problems().is_empty(),
        };
        let mut session = Session::restore(tutor, header, Vec::new())?;
        session.decide()?;
        Ok(session)
    }

    /// Rebuilds a session from its header and log.
    pub fn restore(tutor: Arc<Tutor>, header: SessionHeader, events: Vec<TraceEvent>) -> Result<Self, SessionError> {
        let mut session = Session {
            tutor,
            header,
            events,
            prior: PriorAggregates::default(),
            attempt: Attempt::default(),
        };
        session.rebuild_prior()?;
        session.refresh()?;
        Ok(session)
    }

    pub fn header(&self) -> &SessionHeader {
        &self.header
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn problem(&self) -> Option<&Problem> {
        if self.header.finished {
            None
        } else {
            self.tutor.problems().get(self.header.problem_index)
        }
    }

    fn active(&self) -> Result<&Problem, SessionError> {
        self.problem().ok_or_else(|| SessionError::Conflict("the session has no remaining problems".into()))
    }

    fn complete(&self) -> bool {
        match (self.problem(), &self.attempt.state) {
            (Some(p), Some(s)) => s.is_complete(&p.conclusion),
            _ => false,
        }
    }

    fn next_seq(&self) -> u64 {
        self.events.last().map_or(0, |e| e.seq + 1)
    }

    fn push(&mut self, e: TraceEvent) {
        self.events.push(e);
    }

    fn problem_events<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a TraceEvent> + 'a {
        self.events.iter().filter(move |e| e.problem == id)
    }

    fn refresh(&mut self) -> Result<(), SessionError> {
        let Some(problem) = self.problem().cloned() else {
            self.attempt = Attempt::default();
            return Ok(());
        };
        let mut replayer = Replayer::new(&self.header.student, &problem);
        let mut hints: Vec<HintView> = Vec::new();
        let mut since_proactive = None;
        let mut realized = 0;
        for e in self.problem_events(&problem.id) {
            replayer.push(e)?;
            if replayer.steps().len() > realized {
                realized = replayer.steps().len();
                since_proactive = since_proactive.map(|n: usize| n + 1);
            }
            match e.kind {
                EventKind::HintRequest | EventKind::ProactiveHint => {
                    let agency = if e.kind == EventKind::ProactiveHint {
                        for h in hints.iter_mut().filter(|h| h.agency == Agency::Proactive && !h.justified) {
                            h.replaced = true;
                        }
                        since_proactive = Some(0);
                        Agency::Proactive
                    } else {
                        Agency::OnDemand
                    };
                    hints.push(HintView {
                        seq: e.seq,
                        statement: e.statement.clone().expect("validated"),
                        agency,
                        justified: false,
                        replaced: false,
                        issued_at: realized,
                    });
                }
                EventKind::HintJustified => {
                    if let Some(h) = hints.iter_mut().find(|h| Some(h.seq) == e.hint_seq) {
                        h.justified = true;
                    }
                }
                _ => {}
            }
        }
        self.attempt = Attempt {
            state: Some(replayer.state().clone()),
            steps: replayer.steps().to_vec(),
            hints,
            since_proactive,
        };
        Ok(())
    }

    fn rebuild_prior(&mut self) -> Result<(), SessionError> {
        self.prior = PriorAggregates::default();
        let Some(model) = self.tutor.model() else { return Ok(()) };
        let done = self.header.problem_index.min(self.tutor.problems().len());
        for problem in &self.tutor.problems()[..done] {
            let events: Vec<TraceEvent> = self.problem_events(&problem.id).cloned().collect();
            let steps = events_to_steps(&events, problem)?;
            let ctx = model.settings.context(problem, self.tutor.networks.get(&problem.id));
            self.prior.absorb(&steps, &ctx);
        }
        Ok(())
    }

    fn pending(&self) -> Option<&HintView> {
        self.attempt.hints.iter().rev().find(|h| !h.justified && !h.replaced)
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        let problem = self.problem();
        SessionSnapshot {
            id: self.header.id.clone(),
            student: self.header.student.clone(),
            policy: self.header.policy,
            problem_index: self.header.problem_index,
            problem_count: self.tutor.problems().len(),
            problem: problem.map(|p| ProblemView {
                id: p.id.clone(),
                section: p.section,
                premises: p.premises.clone(),
                conclusion: p.conclusion.clone(),
                allowed_rules: p.allowed_rules.clone(),
                optimal_length: p.optimal_length,
            }),
            state: self.attempt.state.clone(),
            steps: self.attempt.steps.len(),
            complete: self.complete(),
            finished: self.header.finished,
            pending_hint: self.pending().cloned(),
            hints: self.attempt.hints.clone(),
        }
    }

    /// Runs the policy for the upcoming step of a training problem and logs
    /// its prediction and any proactive hint.
    fn decide(&mut self) -> Result<(Option<HintView>, Option<PredictionRecord>), SessionError> {
        let Some(problem) = self.problem() else { return Ok((None, None)) };
        if problem.section != Section::Training || self.complete() {
            return Ok((None, None));
        }
        let problem = problem.clone();
        let tutor = self.tutor.clone();
        let engine = tutor.engine(&problem);
        let seq = self.next_seq();
        let mut rng = ChaCha8Rng::seed_from_u64(self.header.seed);
        rng.set_stream(student_stream(&self.header.id) ^ seq);
        let state = self.attempt.state.clone().expect("active problem");
        let ctx = StepContext {
            state: &state,
            completed: &self.attempt.steps,
            prior: &self.prior,
            since_proactive: self.attempt.since_proactive,
        };
        let decision = on_step_start(&self.header.policy, tutor.model(), engine, &ctx, &mut rng)?;
        let student = self.header.student.clone();
        if let Some(record) = decision.prediction {
            let seq = self.next_seq();
            self.push(TraceEvent::prediction(&student, &problem.id, seq, record));
        }
        let mut issued = None;
        if let Some(hint) = decision.hint {
            let seq = self.next_seq();
            self.push(TraceEvent::hint(&student, &problem.id, seq, EventKind::ProactiveHint, hint.statement, 0.0));
            issued = Some(seq);
        }
        self.refresh()?;
        let hint = issued.and_then(|seq| self.attempt.hints.iter().find(|h| h.seq == seq).cloned());
        Ok((hint, decision.prediction))
    }

    pub fn submit_step(&mut self, input: StepInput, action_time: f64) -> Result<StepOutcome, SessionError> {
        if !(action_time.is_finite() && action_time >= 0.0) {
            return Err(SessionError::InvalidStep(format!("action_time must be non-negative, got {action_time}")));
        }
        let problem = self.active()?.clone();
        if self.complete() {
            return Err(SessionError::Conflict("the problem is already solved; advance to continue".into()));
        }
        let state = self.attempt.state.clone().expect("active problem");
        let student = self.header.student.clone();
        let seq = self.next_seq();
        let mut justified_hint = None;
        let (correct, feedback) = match input {
            StepInput::Derive { rule, premises, statement } => {
                if !problem.allows(rule) {
                    return Err(SessionError::InvalidStep(format!("{rule} is not available in this problem")));
                }
                let verdict = match check_step(&state, rule, &premises, &statement) {
                    Ok(v) => v,
                    Err(e @ (LogicError::Arity { .. } | LogicError::IndexOutOfRange { .. } | LogicError::RepeatedPremise)) => {
                        return Err(SessionError::InvalidStep(e.to_string()))
                    }
                    Err(e) => return Err(SessionError::InvalidStep(e.to_string())),
                };
                let duplicate = state.contains(&statement);
                let ok = verdict && !duplicate;
                self.push(TraceEvent::derive(&student, &problem.id, seq, rule, premises, statement.clone(), ok, action_time));
                if ok {
                    if let Some(h) = self.pending_match(&statement) {
                        let seq = self.next_seq();
                        self.push(TraceEvent::justified(&student, &problem.id, seq, h, statement));
                        justified_hint = Some(h);
                    }
                    (true, None)
                } else if duplicate {
                    (false, Some("that statement is already in the proof".to_string()))
                } else {
                    (false, Some(format!("{rule} does not derive {statement} from the selected statements")))
                }
            }
            StepInput::Delete { index } => {
                let stmt = state
                    .statements()
                    .get(index)
                    .ok_or_else(|| SessionError::InvalidStep(format!("no statement at index {index}")))?;
                if stmt.is_premise() {
                    return Err(SessionError::InvalidStep(format!("statement {index} is a premise and cannot be deleted")));
                }
                self.push(TraceEvent::delete(&student, &problem.id, seq, index, stmt.expr.clone(), action_time));
                (true, None)
            }
        };
        self.refresh()?;
        let complete = self.complete();
        if complete {
            let seq = self.next_seq();
            self.push(TraceEvent::new(&student, &problem.id, seq, EventKind::ProblemComplete, 0.0));
        }
        let (proactive_hint, prediction) = if correct { self.decide()? } else { (None, None) };
        Ok(StepOutcome {
            correct,
            feedback,
            justified_hint,
            complete,
            proactive_hint,
            prediction,
            session: self.snapshot(),
        })
    }

    /// Most recent unjustified, unreplaced hint for `statement`.
    fn pending_match(&self, statement: &Expr) -> Option<u64> {
        self.attempt
            .hints
            .iter()
            .rev()
            .find(|h| !h.justified && !h.replaced && h.statement.matches(statement))
            .map(|h| h.seq)
    }

    /// On-demand hints; offered in the training section only.
    pub fn request_hint(&mut self, action_time: f64) -> Result<HintOutcome, SessionError> {
        if !(action_time.is_finite() && action_time >= 0.0) {
            return Err(SessionError::InvalidStep(format!("action_time must be non-negative, got {action_time}")));
        }
        let problem = self.active()?.clone();
        if problem.section != Section::Training {
            return Err(SessionError::Conflict(format!("hints are not available in the {} section", problem.section)));
        }
        let state = self.attempt.state.clone().expect("active problem");
        let hint = on_demand_hint(self.tutor.engine(&problem), &state, self.attempt.steps.len())?;
        let seq = self.next_seq();
        let student = self.header.student.clone();
        self.push(TraceEvent::hint(&student, &problem.id, seq, EventKind::HintRequest, hint.statement, action_time));
        self.refresh()?;
        let view = self.attempt.hints.iter().find(|h| h.seq == seq).cloned().expect("just logged");
        Ok(HintOutcome {
            hint: view,
            source: hint.source,
            session: self.snapshot(),
        })
    }

    /// Moves to the next problem, solved or not.
    pub fn advance(&mut self) -> Result<AdvanceOutcome, SessionError> {
        self.active()?;
        self.header.problem_index += 1;
        self.header.finished = self.header.problem_index >= self.tutor.problems().len();
        self.rebuild_prior()?;
        self.refresh()?;
        let (proactive_hint, prediction) = self.decide()?;
        Ok(AdvanceOutcome {
            proactive_hint,
            prediction,
            session: self.snapshot(),
        })
    }
}
