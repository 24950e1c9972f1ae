//! Synthetic students, the pretest/training/posttest protocol with
//! stratified condition assignment, and seeded A/B experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{corpus_steps, events_to_steps, CorpusError, EventKind, Replayer, StepRecord, TraceEvent};
use crate::hints::{Agency, HintEngine};
use crate::logic::{check_step, shipped_problems, Expr, KeyMode, Problem, ProblemSpace, ProofState, ProofStep, Section};
use crate::metrics::{help_behaviors, hint_counts, per_student_fn_fp, performance, Denominator, HelpBehaviorReport, HintCounts, MetricsError, Performance};
use crate::network::{build_network, value_iterate, InteractionNetwork, NetworkError, ValueIterationParams};
use crate::policy::{on_step_start, PolicyConfig, PolicyError, PolicyKind, StepContext};
use crate::predictor::{build_dataset, train, FeatureSettings, ForestParams, HelpNeedModel, PredictorError, PriorAggregates, TrainParams};
use crate::stepscore::{label_corpus, threshold_table, EfficiencyCombo, LabelConfig, LabeledStep, StepBehavior, StepScoreError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Score(#[from] StepScoreError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentProfile {
    /// Probability of taking a step of a shortest proof.
    pub skill: f64,
    /// Probability that an attempted application is incorrect.
    pub error_rate: f64,
    /// Median seconds per action.
    pub speed_median: f64,
    /// Log-scale spread of action durations.
    pub speed_sigma: f64,
    pub help_propensity: f64,
    pub hint_adoption: f64,
    /// Skill multiplier per justified hint.
    pub learning_rate: f64,
}

impl StudentProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        let probs = [
            ("skill", self.skill),
            ("error_rate", self.error_rate),
            ("help_propensity", self.help_propensity),
            ("hint_adoption", self.hint_adoption),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.speed_median > 0.0 && self.speed_sigma >= 0.0 && self.speed_sigma.is_finite()) {
            return Err(SimError::Config("speed parameters must be positive".into()));
        }
        if !(self.learning_rate >= 1.0 && self.learning_rate.is_finite()) {
            return Err(SimError::Config("learning_rate must be at least 1".into()));
        }
        Ok(())
    }
}

/// Uniform ranges each profile field is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileDistribution {
    pub skill: (f64, f64),
    pub error_rate: (f64, f64),
    pub speed_median: (f64, f64),
    pub speed_sigma: f64,
    pub help_propensity: (f64, f64),
    pub hint_adoption: (f64, f64),
    pub learning_rate: (f64, f64),
}

impl Default for ProfileDistribution {
    fn default() -> Self {
        ProfileDistribution {
            skill: (0.15, 0.65),
            error_rate: (0.05, 0.25),
            speed_median: (15.0, 45.0),
            speed_sigma: 0.5,
            help_propensity: (0.1, 0.5),
            hint_adoption: (0.6, 0.95),
            learning_rate: (1.02, 1.08),
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

impl ProfileDistribution {
    pub fn sample(&self, rng: &mut impl Rng) -> StudentProfile {
        StudentProfile {
            skill: uniform(rng, self.skill),
            error_rate: uniform(rng, self.error_rate),
            speed_median: uniform(rng, self.speed_median),
            speed_sigma: self.speed_sigma,
            help_propensity: uniform(rng, self.help_propensity),
            hint_adoption: uniform(rng, self.hint_adoption),
            learning_rate: uniform(rng, self.learning_rate),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorConfig {
    /// Chance of being stuck at a step, scaled by (1 - skill).
    pub stuck_rate: f64,
    /// Duration multiplier for stuck steps.
    pub stuck_slowdown: f64,
    /// Incorrect attempts before an application is forced through.
    pub max_attempts: u32,
    /// A problem is abandoned after `optimal_length * factor + 10` steps.
    pub step_budget_factor: usize,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            stuck_rate: 0.4,
            stuck_slowdown: 2.5,
            max_attempts: 5,
            step_budget_factor: 4,
        }
    }
}

/// A simulated student: profile, current skill and private random stream.
#[derive(Debug, Clone)]
pub struct Agent {
    pub id: String,
    pub profile: StudentProfile,
    pub skill: f64,
    pub rng: ChaCha8Rng,
    seq: u64,
}

/// Stream id for a student, stable across runs and schedules.
pub(crate) fn student_stream(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl Agent {
    pub fn new(id: &str, profile: StudentProfile, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(student_stream(id));
        Agent {
            id: id.to_string(),
            skill: profile.skill,
            profile,
            rng,
            seq: 0,
        }
    }

    /// Agent whose profile is drawn from its own stream.
    pub fn sampled(id: &str, dist: &ProfileDistribution, seed: u64) -> Self {
        let mut agent = Agent::new(id, dist.sample(&mut ChaCha8Rng::seed_from_u64(0)), seed);
        agent.profile = dist.sample(&mut agent.rng);
        agent.skill = agent.profile.skill;
        agent
    }

    fn next_seq(&mut self) -> u64 {
        let s = self.seq;
        self.seq += 1;
        s
    }

    fn duration(&mut self) -> f64 {
        let dist = LogNormal::new(self.profile.speed_median.ln(), self.profile.speed_sigma).expect("validated profile");
        dist.sample(&mut self.rng)
    }
}

/// A hint the student has received but not yet acted on.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingHint {
    /// Seq of the hint event.
    pub seq: u64,
    pub statement: Expr,
}

/// A rule that does not license `step` in `state`, for logging an
/// incorrect attempt.
fn wrong_rule(agent: &mut Agent, problem: &Problem, state: &ProofState, step: &ProofStep) -> Option<crate::logic::Rule> {
    let options: Vec<_> = problem
        .allowed_rules
        .iter()
        .copied()
        .filter(|&r| r != step.rule && r.arity() == step.rule.arity())
        .filter(|&r| !matches!(check_step(state, r, &step.premises, &step.derived), Ok(true)))
        .collect();
    options.choose(&mut agent.rng).copied()
}

/// Simulates one step: hint adoption, optional help request, move choice,
/// incorrect attempts and the realized derivation. `help` is `None` in
/// sections without hints.
#[allow(clippy::too_many_arguments)]
pub fn simulate_step(
    agent: &mut Agent,
    problem: &Problem,
    space: &ProblemSpace,
    state: &mut ProofState,
    pending: Option<PendingHint>,
    help: Option<&HintEngine>,
    step_index: usize,
    behavior: &BehaviorConfig,
) -> Vec<TraceEvent> {
    let mut events = Vec::new();
    let mut pending = pending;
    let mut requested = false;
    let applicable = space.applicable_steps(state).unwrap_or_default();
    let stuck = loop {
        if let Some(hint) = pending.take() {
            if agent.rng.random_bool(agent.profile.hint_adoption) {
                if let Some(step) = applicable.iter().find(|s| s.derived.matches(&hint.statement)) {
                    let t = agent.duration() * 0.5;
                    let seq = agent.next_seq();
                    events.push(TraceEvent::derive(&agent.id, &problem.id, seq, step.rule, step.premises.clone(), step.derived.clone(), true, t));
                    state.derive(step.rule, &step.premises, step.derived.clone()).expect("applicable step");
                    let seq = agent.next_seq();
                    events.push(TraceEvent::justified(&agent.id, &problem.id, seq, hint.seq, step.derived.clone()));
                    agent.skill = (agent.skill * agent.profile.learning_rate).min(1.0);
                    return events;
                }
            }
        }
        let stuck = applicable.is_empty() || agent.rng.random_bool((behavior.stuck_rate * (1.0 - agent.skill)).clamp(0.0, 1.0));
        if let Some(engine) = help.filter(|_| stuck && !requested) {
            requested = true;
            if agent.rng.random_bool(agent.profile.help_propensity) {
                if let Ok(hint) = engine.next_step_hint(state, Agency::OnDemand, step_index) {
                    let t = agent.duration() * 0.25;
                    let seq = agent.next_seq();
                    events.push(TraceEvent::hint(&agent.id, &problem.id, seq, EventKind::HintRequest, hint.statement.clone(), t));
                    pending = Some(PendingHint {
                        seq,
                        statement: hint.statement,
                    });
                    continue;
                }
            }
        }
        break stuck;
    };
    if applicable.is_empty() {
        return events;
    }
    let optimal = if !stuck && agent.rng.random_bool(agent.skill) {
        space.plan_steps(state, problem.optimal_length).filter(|p| !p.is_empty())
    } else {
        None
    };
    let step = match optimal {
        Some(plan) => plan.choose(&mut agent.rng).expect("nonempty").clone(),
        None => applicable.choose(&mut agent.rng).expect("nonempty").clone(),
    };
    let slow = if stuck { behavior.stuck_slowdown } else { 1.0 };
    let mut attempts = 0;
    while attempts < behavior.max_attempts && agent.rng.random_bool(agent.profile.error_rate) {
        attempts += 1;
        let Some(rule) = wrong_rule(agent, problem, state, &step) else { break };
        let t = agent.duration() * slow;
        let seq = agent.next_seq();
        events.push(TraceEvent::derive(&agent.id, &problem.id, seq, rule, step.premises.clone(), step.derived.clone(), false, t));
    }
    let t = agent.duration() * slow;
    let seq = agent.next_seq();
    events.push(TraceEvent::derive(&agent.id, &problem.id, seq, step.rule, step.premises.clone(), step.derived.clone(), true, t));
    state.derive(step.rule, &step.premises, step.derived).expect("applicable step");
    events
}

/// Policy wiring for a training problem.
#[derive(Debug, Clone, Copy)]
pub struct PolicyRun<'a> {
    pub config: &'a PolicyConfig,
    pub model: Option<&'a HelpNeedModel>,
}

/// Everything a student needs to attempt one problem.
#[derive(Debug, Clone, Copy)]
pub struct ProblemRun<'a> {
    pub engine: &'a HintEngine,
    /// Present in the training section only.
    pub policy: Option<PolicyRun<'a>>,
    pub behavior: &'a BehaviorConfig,
}

/// One attempt at a problem; ends at the goal or when the step budget runs
/// out.
pub fn run_problem(agent: &mut Agent, run: ProblemRun, prior: &PriorAggregates) -> Result<Vec<TraceEvent>, SimError> {
    let engine = run.engine;
    let problem = engine.problem();
    let space = engine.space().clone();
    let mut state = ProofState::new(problem);
    let mut events: Vec<TraceEvent> = Vec::new();
    let mut replayer = Replayer::new(&agent.id, problem);
    let mut since_proactive: Option<usize> = None;
    let budget = problem.optimal_length * run.behavior.step_budget_factor + 10;
    let mut steps = 0;
    let log = |events: &mut Vec<TraceEvent>, replayer: &mut Replayer, new: Vec<TraceEvent>| -> Result<(), SimError> {
        for e in &new {
            replayer.push(e)?;
        }
        events.extend(new);
        Ok(())
    };
    while !state.is_complete(&problem.conclusion) && steps < budget {
        let mut pending = None;
        if let Some(policy) = run.policy {
            let ctx = StepContext {
                state: &state,
                completed: replayer.steps(),
                prior,
                since_proactive,
            };
            let decision = on_step_start(policy.config, policy.model, engine, &ctx, &mut agent.rng)?;
            let mut new = Vec::new();
            if let Some(record) = decision.prediction {
                let seq = agent.next_seq();
                new.push(TraceEvent::prediction(&agent.id, &problem.id, seq, record));
            }
            since_proactive = since_proactive.map(|n| n + 1);
            if let Some(hint) = decision.hint {
                let seq = agent.next_seq();
                new.push(TraceEvent::hint(&agent.id, &problem.id, seq, EventKind::ProactiveHint, hint.statement.clone(), 0.0));
                pending = Some(PendingHint {
                    seq,
                    statement: hint.statement,
                });
                since_proactive = Some(0);
            }
            log(&mut events, &mut replayer, new)?;
        }
        let help = run.policy.map(|_| engine);
        let before = state.len();
        let new = simulate_step(agent, problem, &space, &mut state, pending, help, steps, run.behavior);
        log(&mut events, &mut replayer, new)?;
        if state.len() == before {
            break;
        }
        steps += 1;
    }
    if state.is_complete(&problem.conclusion) {
        let seq = agent.next_seq();
        events.push(TraceEvent::new(&agent.id, &problem.id, seq, EventKind::ProblemComplete, 0.0));
    }
    Ok(events)
}

/// Sorts by pretest score, pairs neighbours and flips a seeded coin per
/// pair. Returns (treatment, control) ids.
pub fn assign_conditions(scores: &[(String, f64)], seed: u64) -> (Vec<String>, Vec<String>) {
    let mut sorted: Vec<&(String, f64)> = scores.iter().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(student_stream("assignment"));
    let (mut treatment, mut control) = (Vec::new(), Vec::new());
    for pair in sorted.chunks(2) {
        let flip = rng.random_bool(0.5);
        match pair {
            [a, b] => {
                let (t, c) = if flip { (a, b) } else { (b, a) };
                treatment.push(t.0.clone());
                control.push(c.0.clone());
            }
            [a] if flip => treatment.push(a.0.clone()),
            [a] => control.push(a.0.clone()),
            _ => unreachable!("chunks of two"),
        }
    }
    (treatment, control)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub n_students: usize,
    pub seed: u64,
    /// Students simulated to build the seed corpus the model is trained on.
    pub seed_students: usize,
    /// Training-section policy used for the seed corpus.
    pub seed_policy: PolicyKind,
    pub treatment: PolicyKind,
    pub control: PolicyKind,
    /// HNU (halved gains on hint use) when true, HN otherwise.
    pub penalty: bool,
    pub key_mode: KeyMode,
    pub cooldown: usize,
    pub profiles: ProfileDistribution,
    pub behavior: BehaviorConfig,
    pub forest: ForestParams,
    pub value_iteration: ValueIterationParams,
    pub combo: EfficiencyCombo,
    pub denominator: Denominator,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_students: 74,
            seed: 0,
            seed_students: 80,
            seed_policy: PolicyKind::Random(0.2),
            treatment: PolicyKind::Adaptive,
            control: PolicyKind::Control,
            penalty: true,
            key_mode: KeyMode::Unordered,
            cooldown: 0,
            profiles: ProfileDistribution::default(),
            behavior: BehaviorConfig::default(),
            forest: ForestParams {
                n_trees: 50,
                max_depth: 8,
                ..ForestParams::default()
            },
            value_iteration: ValueIterationParams::default(),
            combo: EfficiencyCombo::default(),
            denominator: Denominator::PerStudent,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_students < 2 {
            return Err(SimError::Config("need at least two students".into()));
        }
        if self.seed_students == 0 {
            return Err(SimError::Config("need at least one seed student".into()));
        }
        for (lo, hi) in [
            self.profiles.skill,
            self.profiles.error_rate,
            self.profiles.help_propensity,
            self.profiles.hint_adoption,
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(SimError::Config(format!("probability range ({lo}, {hi}) must lie in [0, 1]")));
            }
        }
        let (lo, hi) = self.profiles.speed_median;
        if !(0.0 < lo && lo <= hi) {
            return Err(SimError::Config("speed_median range must be positive".into()));
        }
        if self.profiles.learning_rate.0 < 1.0 || self.profiles.learning_rate.0 > self.profiles.learning_rate.1 {
            return Err(SimError::Config("learning_rate range must be at least 1".into()));
        }
        for kind in [self.seed_policy, self.treatment, self.control] {
            if let PolicyKind::Random(p) = kind {
                if !(0.0..=1.0).contains(&p) {
                    return Err(SimError::Config(format!("random policy probability {p} outside [0, 1]")));
                }
            }
        }
        self.value_iteration.validate()?;
        Ok(())
    }

    fn policy(&self, kind: PolicyKind) -> PolicyConfig {
        PolicyConfig {
            kind,
            penalty_enabled: self.penalty,
            key_mode: self.key_mode,
            cooldown: self.cooldown,
        }
    }
}

/// Shared per-problem artifacts.
pub struct Curriculum {
    pub problems: Vec<Problem>,
    pub spaces: BTreeMap<String, Arc<ProblemSpace>>,
}

impl Curriculum {
    pub fn new(problems: Vec<Problem>) -> Self {
        let spaces = problems.iter().map(|p| (p.id.clone(), Arc::new(ProblemSpace::new(p)))).collect();
        Curriculum { problems, spaces }
    }

    pub fn shipped() -> Self {
        Self::new(shipped_problems())
    }

    pub fn section(&self, section: Section) -> impl Iterator<Item = &Problem> {
        self.problems.iter().filter(move |p| p.section == section)
    }

    pub fn engines(&self, networks: Option<&BTreeMap<String, InteractionNetwork>>) -> BTreeMap<String, HintEngine> {
        self.problems
            .iter()
            .map(|p| {
                let net = networks.and_then(|n| n.get(&p.id)).map(|n| Arc::new(n.clone()));
                (p.id.clone(), HintEngine::new(p.clone(), self.spaces[&p.id].clone(), net))
            })
            .collect()
    }
}

/// One student's full run through all sections.
#[allow(clippy::too_many_arguments)]
fn run_student(
    agent: &mut Agent,
    curriculum: &Curriculum,
    engines: &BTreeMap<String, HintEngine>,
    sections: &[Section],
    policy: Option<PolicyRun>,
    behavior: &BehaviorConfig,
    networks: Option<&BTreeMap<String, InteractionNetwork>>,
    prior: &mut PriorAggregates,
) -> Result<Vec<TraceEvent>, SimError> {
    let mut events = Vec::new();
    for &section in sections {
        for problem in curriculum.section(section) {
            let run = ProblemRun {
                engine: &engines[&problem.id],
                policy: policy.filter(|_| section == Section::Training),
                behavior,
            };
            let attempt = run_problem(agent, run, prior)?;
            if let Some(model) = policy.and_then(|p| p.model) {
                let steps = events_to_steps(&attempt, problem)?;
                let ctx = model.settings.context(problem, networks.and_then(|n| n.get(&problem.id)));
                prior.absorb(&steps, &ctx);
            }
            events.extend(attempt);
        }
    }
    Ok(events)
}

const ALL_SECTIONS: [Section; 3] = [Section::Pretest, Section::Training, Section::Posttest];

/// Seed corpus: students under `config.seed_policy` without a model, so
/// hints come from search alone.
pub fn generate_corpus(config: &ExperimentConfig, curriculum: &Curriculum) -> Result<Vec<TraceEvent>, SimError> {
    config.validate()?;
    let engines = curriculum.engines(None);
    let policy = PolicyConfig {
        kind: config.seed_policy,
        penalty_enabled: config.penalty,
        key_mode: config.key_mode,
        cooldown: config.cooldown,
    };
    let run = PolicyRun {
        config: &policy,
        model: None,
    };
    let per_student: Vec<Result<Vec<TraceEvent>, SimError>> = (0..config.seed_students)
        .into_par_iter()
        .map(|i| {
            let mut agent = Agent::sampled(&format!("seed{i:03}"), &config.profiles, config.seed);
            let mut prior = PriorAggregates::default();
            run_student(&mut agent, curriculum, &engines, &ALL_SECTIONS, Some(run), &config.behavior, None, &mut prior)
        })
        .collect();
    let mut events = Vec::new();
    for r in per_student {
        events.extend(r?);
    }
    Ok(events)
}

/// Networks for every problem, value-iterated.
pub fn build_networks(
    steps: &[StepRecord],
    problems: &[Problem],
    key_mode: KeyMode,
    params: &ValueIterationParams,
) -> Result<BTreeMap<String, InteractionNetwork>, SimError> {
    let mut by_problem: BTreeMap<&str, Vec<StepRecord>> = BTreeMap::new();
    for s in steps {
        by_problem.entry(s.problem.as_str()).or_default().push(s.clone());
    }
    let mut out = BTreeMap::new();
    for p in problems {
        let Some(ps) = by_problem.get(p.id.as_str()) else { continue };
        let mut net = build_network(ps, p, key_mode)?;
        value_iterate(&mut net, params)?;
        out.insert(p.id.clone(), net);
    }
    Ok(out)
}

/// Seed-corpus artifacts: networks, thresholds, labels and the model.
pub struct TrainedPipeline {
    pub seed_events: Vec<TraceEvent>,
    pub networks: BTreeMap<String, InteractionNetwork>,
    pub thresholds: BTreeMap<String, f64>,
    pub labeled: Vec<LabeledStep>,
    pub model: HelpNeedModel,
}

pub fn train_pipeline(config: &ExperimentConfig, curriculum: &Curriculum, seed_events: Vec<TraceEvent>) -> Result<TrainedPipeline, SimError> {
    let steps = corpus_steps(&seed_events, &curriculum.problems)?;
    let networks = build_networks(&steps, &curriculum.problems, config.key_mode, &config.value_iteration)?;
    let thresholds = threshold_table(&steps);
    let labeled = label_corpus(&steps, &networks, &thresholds, &config.label_config())?;
    let model = config.train_model(&labeled, curriculum, &networks, thresholds.clone())?;
    Ok(TrainedPipeline {
        seed_events,
        networks,
        thresholds,
        labeled,
        model,
    })
}

impl ExperimentConfig {
    pub fn label_config(&self) -> LabelConfig {
        LabelConfig {
            combo: self.combo,
            penalty: self.penalty,
            penalty_in_reporting: false,
        }
    }

    pub fn feature_settings(&self, thresholds: BTreeMap<String, f64>) -> FeatureSettings {
        FeatureSettings {
            key_mode: self.key_mode,
            penalty: self.penalty,
            combo: self.combo,
            thresholds,
        }
    }

    /// Forest seeded from the experiment seed.
    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            forest: ForestParams {
                seed: self.seed,
                ..self.forest.clone()
            },
            ..TrainParams::default()
        }
    }

    pub fn train_model(
        &self,
        labeled: &[LabeledStep],
        curriculum: &Curriculum,
        networks: &BTreeMap<String, InteractionNetwork>,
        thresholds: BTreeMap<String, f64>,
    ) -> Result<HelpNeedModel, SimError> {
        let settings = self.feature_settings(thresholds);
        let examples = build_dataset(labeled, &curriculum.problems, networks, &settings);
        Ok(train(&examples, &self.train_params(), settings)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SectionPerformance {
    /// Means per student.
    pub length: f64,
    pub time_minutes: f64,
    pub accuracy: f64,
    pub completed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BehaviorCounts {
    pub expert: usize,
    pub strategic: usize,
    pub opportunistic: usize,
    pub far_off: usize,
    pub futile: usize,
    pub total: usize,
}

impl BehaviorCounts {
    pub fn add(&mut self, b: StepBehavior) {
        match b {
            StepBehavior::Expert => self.expert += 1,
            StepBehavior::Strategic => self.strategic += 1,
            StepBehavior::Opportunistic => self.opportunistic += 1,
            StepBehavior::FarOff => self.far_off += 1,
            StepBehavior::Futile => self.futile += 1,
        }
        self.total += 1;
    }

    pub fn helpneed(&self) -> usize {
        self.far_off + self.futile
    }

    pub fn sum(&self) -> usize {
        self.expert + self.strategic + self.opportunistic + self.far_off + self.futile
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub policy: PolicyKind,
    pub students: Vec<String>,
    pub pretest: SectionPerformance,
    pub training: SectionPerformance,
    pub posttest: SectionPerformance,
    /// Training-step behavior totals over the condition.
    pub behaviors: BehaviorCounts,
    pub mean_training_steps: f64,
    pub mean_helpneed_steps: f64,
    pub hints: HintCounts,
    pub mean_proactive_hints: f64,
    pub mean_on_demand_hints: f64,
    /// Proactive hints as a fraction of training steps, averaged per student.
    pub proactive_rate: f64,
    pub hjr: Option<f64>,
    pub hjr_proactive: Option<f64>,
    pub hjr_on_demand: Option<f64>,
    pub help: HelpBehaviorReport,
    pub fn_rate: f64,
    pub fp_rate: f64,
    /// Fraction of training steps whose starting state is in the seed
    /// network under each key mode.
    pub match_rate_ordered: f64,
    pub match_rate_unordered: f64,
    /// Fraction of predictions served by the state-based classifier.
    pub state_based_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub seed: u64,
    pub n_students: usize,
    pub penalty: bool,
    pub key_mode: KeyMode,
    pub model_corpus_hash: String,
    pub conditions: Vec<ConditionReport>,
}

impl CohortReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text tables: performance, step behaviors, hints and help
    /// behaviors.
    pub fn to_tables(&self) -> String {
        let mut out = String::new();
        let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.1}%", 100.0 * v));
        let _ = writeln!(out, "seed {}  students {}  penalty {}  key mode {}", self.seed, self.n_students, if self.penalty { "on" } else { "off" }, self.key_mode);
        let _ = writeln!(out, "\nPerformance (means per student)");
        let _ = writeln!(out, "{:<10} {:<10} {:>8} {:>10} {:>9} {:>10}", "condition", "section", "length", "time(min)", "accuracy", "completed");
        for c in &self.conditions {
            for (name, s) in [("pretest", &c.pretest), ("training", &c.training), ("posttest", &c.posttest)] {
                let _ = writeln!(out, "{:<10} {:<10} {:>8.2} {:>10.2} {:>9.3} {:>10.2}", c.name, name, s.length, s.time_minutes, s.accuracy, s.completed);
            }
        }
        let _ = writeln!(out, "\nTraining step behaviors (totals)");
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>9} {:>13} {:>7} {:>7} {:>7} {:>9} {:>11} {:>12}",
            "condition", "expert", "strategic", "opportunistic", "far_off", "futile", "total", "helpneed", "mean steps", "mean helpneed"
        );
        for c in &self.conditions {
            let b = &c.behaviors;
            let _ = writeln!(
                out,
                "{:<10} {:>7} {:>9} {:>13} {:>7} {:>7} {:>7} {:>9} {:>11.2} {:>12.2}",
                c.name,
                b.expert,
                b.strategic,
                b.opportunistic,
                b.far_off,
                b.futile,
                b.total,
                b.helpneed(),
                c.mean_training_steps,
                c.mean_helpneed_steps
            );
        }
        let _ = writeln!(out, "\nHints");
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>10} {:>15} {:>8} {:>14} {:>14}",
            "condition", "proactive", "on-demand", "proactive rate", "HJR", "HJR proactive", "HJR on-demand"
        );
        for c in &self.conditions {
            let _ = writeln!(
                out,
                "{:<10} {:>10.2} {:>10.2} {:>15} {:>8} {:>14} {:>14}",
                c.name,
                c.mean_proactive_hints,
                c.mean_on_demand_hints,
                pct(Some(c.proactive_rate)),
                pct(c.hjr),
                pct(c.hjr_proactive),
                pct(c.hjr_on_demand)
            );
        }
        let _ = writeln!(out, "\nHelp behaviors (% of training steps) and predictor");
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>8} {:>16} {:>8} {:>8} {:>11} {:>13} {:>12}",
            "condition", "avoidance", "abuse", "appropriateness", "FN", "FP", "match ord", "match unord", "state-based"
        );
        for c in &self.conditions {
            let _ = writeln!(
                out,
                "{:<10} {:>9.1}% {:>7.1}% {:>15.1}% {:>8} {:>8} {:>11} {:>13} {:>12}",
                c.name,
                c.help.possible_avoidance,
                c.help.possible_abuse,
                c.help.possible_appropriateness,
                pct(Some(c.fn_rate)),
                pct(Some(c.fp_rate)),
                pct(Some(c.match_rate_ordered)),
                pct(Some(c.match_rate_unordered)),
                pct(Some(c.state_based_rate))
            );
        }
        out
    }
}

/// Everything an experiment produced.
pub struct ExperimentOutcome {
    pub report: CohortReport,
    pub pipeline: TrainedPipeline,
    pub cohort_events: Vec<TraceEvent>,
    pub labeled: Vec<LabeledStep>,
    pub assignment: BTreeMap<String, String>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<CohortReport, SimError> {
    run_experiment_full(config, &Curriculum::shipped()).map(|o| o.report)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn run_experiment_full(config: &ExperimentConfig, curriculum: &Curriculum) -> Result<ExperimentOutcome, SimError> {
    config.validate()?;
    let seed_events = generate_corpus(config, curriculum)?;
    let pipeline = train_pipeline(config, curriculum, seed_events)?;
    let engines = curriculum.engines(Some(&pipeline.networks));

    let ids: Vec<String> = (0..config.n_students).map(|i| format!("s{i:03}")).collect();
    let mut agents: Vec<Agent> = ids.iter().map(|id| Agent::sampled(id, &config.profiles, config.seed)).collect();

    // pretest, no hints and no predictions
    let pretest: Vec<Result<Vec<TraceEvent>, SimError>> = agents
        .par_iter_mut()
        .map(|agent| {
            let mut prior = PriorAggregates::default();
            run_student(agent, curriculum, &engines, &[Section::Pretest], None, &config.behavior, None, &mut prior)
        })
        .collect();
    let mut per_student: Vec<Vec<TraceEvent>> = Vec::with_capacity(agents.len());
    for r in pretest {
        per_student.push(r?);
    }
    let scores: Vec<(String, f64)> = ids
        .iter()
        .zip(&per_student)
        .map(|(id, events)| (id.clone(), pretest_score(events, curriculum)))
        .collect();
    let (treatment, control) = assign_conditions(&scores, config.seed);
    let mut assignment = BTreeMap::new();
    for id in &treatment {
        assignment.insert(id.clone(), "treatment".to_string());
    }
    for id in &control {
        assignment.insert(id.clone(), "control".to_string());
    }

    let treatment_policy = config.policy(config.treatment);
    let control_policy = config.policy(config.control);
    let model = &pipeline.model;
    let networks = &pipeline.networks;
    let rest: Vec<Result<Vec<TraceEvent>, SimError>> = agents
        .par_iter_mut()
        .zip(per_student.par_iter())
        .map(|(agent, pre)| {
            let policy = if assignment[&agent.id] == "treatment" { &treatment_policy } else { &control_policy };
            let run = PolicyRun {
                config: policy,
                model: Some(model),
            };
            // prior aggregates include the pretest problems
            let mut prior = PriorAggregates::default();
            for problem in curriculum.section(Section::Pretest) {
                let attempt: Vec<TraceEvent> = pre.iter().filter(|e| e.problem == problem.id).cloned().collect();
                let steps = events_to_steps(&attempt, problem)?;
                prior.absorb(&steps, &model.settings.context(problem, networks.get(&problem.id)));
            }
            run_student(agent, curriculum, &engines, &[Section::Training, Section::Posttest], Some(run), &config.behavior, Some(networks), &mut prior)
        })
        .collect();
    let mut cohort_events = Vec::new();
    for (pre, r) in per_student.into_iter().zip(rest) {
        cohort_events.extend(pre);
        cohort_events.extend(r?);
    }

    // observed labels come from networks over seed and cohort traces
    let mut all_events = pipeline.seed_events.clone();
    all_events.extend(cohort_events.iter().cloned());
    let all_steps = corpus_steps(&all_events, &curriculum.problems)?;
    let label_nets = build_networks(&all_steps, &curriculum.problems, config.key_mode, &config.value_iteration)?;
    let label_thresholds = threshold_table(&all_steps);
    let cohort_steps = corpus_steps(&cohort_events, &curriculum.problems)?;
    let training_ids: Vec<&str> = curriculum.section(Section::Training).map(|p| p.id.as_str()).collect();
    let training_steps: Vec<StepRecord> = cohort_steps.into_iter().filter(|s| training_ids.contains(&s.problem.as_str())).collect();
    let label_config = LabelConfig {
        combo: config.combo,
        penalty: config.penalty,
        penalty_in_reporting: false,
    };
    let labeled = label_corpus(&training_steps, &label_nets, &label_thresholds, &label_config)?;

    let seed_steps = corpus_steps(&pipeline.seed_events, &curriculum.problems)?;
    let match_nets = [KeyMode::Ordered, KeyMode::Unordered].map(|mode| {
        build_networks(&seed_steps, &curriculum.problems, mode, &config.value_iteration).map(|n| (mode, n))
    });
    let mut match_maps = Vec::new();
    for m in match_nets {
        match_maps.push(m?);
    }

    let mut conditions = Vec::new();
    for (name, kind, members) in [("treatment", config.treatment, &treatment), ("control", config.control, &control)] {
        conditions.push(condition_report(name, kind, members, &cohort_events, &labeled, curriculum, &match_maps, config.denominator)?);
    }
    let report = CohortReport {
        seed: config.seed,
        n_students: config.n_students,
        penalty: config.penalty,
        key_mode: config.key_mode,
        model_corpus_hash: pipeline.model.metadata.corpus_hash.clone(),
        conditions,
    };
    Ok(ExperimentOutcome {
        report,
        pipeline,
        cohort_events,
        labeled,
        assignment,
    })
}

/// Sum over pretest problems of optimal length over realized length,
/// zero for unfinished problems.
pub fn pretest_score(events: &[TraceEvent], curriculum: &Curriculum) -> f64 {
    curriculum
        .section(Section::Pretest)
        .map(|p| {
            let mine: Vec<&TraceEvent> = events.iter().filter(|e| e.problem == p.id).collect();
            let done = mine.iter().any(|e| e.kind == EventKind::ProblemComplete);
            let derived = mine.iter().filter(|e| e.kind == EventKind::Derive && e.correct == Some(true)).count();
            if done && derived > 0 {
                p.optimal_length as f64 / derived as f64
            } else {
                0.0
            }
        })
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn condition_report(
    name: &str,
    policy: PolicyKind,
    members: &[String],
    events: &[TraceEvent],
    labeled: &[LabeledStep],
    curriculum: &Curriculum,
    match_nets: &[(KeyMode, BTreeMap<String, InteractionNetwork>)],
    denominator: Denominator,
) -> Result<ConditionReport, SimError> {
    let section_of: BTreeMap<&str, Section> = curriculum.problems.iter().map(|p| (p.id.as_str(), p.section)).collect();
    let mut perf: BTreeMap<(Section, &str), Performance> = BTreeMap::new();
    let mut hints = HintCounts::default();
    let mut proactive = Vec::new();
    let mut on_demand = Vec::new();
    for id in members {
        let mine: Vec<TraceEvent> = events.iter().filter(|e| &e.student == id).cloned().collect();
        for section in ALL_SECTIONS {
            let part: Vec<TraceEvent> = mine.iter().filter(|e| section_of.get(e.problem.as_str()) == Some(&section)).cloned().collect();
            perf.insert((section, id.as_str()), performance(&part));
        }
        let c = hint_counts(&mine);
        proactive.push(c.proactive_issued as f64);
        on_demand.push(c.on_demand_issued as f64);
        hints.add(&c);
    }
    let section_perf = |section: Section| SectionPerformance {
        length: mean(members.iter().map(|id| perf[&(section, id.as_str())].length as f64)),
        time_minutes: mean(members.iter().map(|id| perf[&(section, id.as_str())].time_minutes)),
        accuracy: mean(members.iter().filter_map(|id| perf[&(section, id.as_str())].accuracy())),
        completed: mean(members.iter().map(|id| perf[&(section, id.as_str())].completed as f64)),
    };

    let mine: Vec<LabeledStep> = labeled.iter().filter(|l| members.contains(&l.step.student)).cloned().collect();
    let mut behaviors = BehaviorCounts::default();
    let mut steps_per: BTreeMap<&str, (usize, usize)> = members.iter().map(|m| (m.as_str(), (0, 0))).collect();
    for l in &mine {
        behaviors.add(l.observed);
        let e = steps_per.get_mut(l.step.student.as_str()).expect("member");
        e.0 += 1;
        e.1 += usize::from(l.observed.helpneed());
    }
    let proactive_rate = mean(
        members
            .iter()
            .zip(&proactive)
            .map(|(id, p)| {
                let n = steps_per[id.as_str()].0;
                if n == 0 {
                    0.0
                } else {
                    p / n as f64
                }
            }),
    );
    let help = help_behaviors(&mine, denominator)?;
    let (fn_rate, fp_rate) = per_student_fn_fp(&mine)?;
    let matched = |mode: KeyMode| -> f64 {
        let nets = &match_nets.iter().find(|(m, _)| *m == mode).expect("both modes").1;
        mean(mine.iter().map(|l| {
            let hit = nets.get(&l.step.problem).is_some_and(|n| n.nodes.contains_key(l.step.pre.get(mode)));
            f64::from(u8::from(hit))
        }))
    };
    let state_based_rate = mean(
        mine.iter()
            .filter_map(|l| l.step.prediction.as_ref())
            .map(|p| f64::from(u8::from(p.classifier == crate::corpus::Classifier::StateBased))),
    );
    Ok(ConditionReport {
        name: name.to_string(),
        policy,
        students: members.to_vec(),
        pretest: section_perf(Section::Pretest),
        training: section_perf(Section::Training),
        posttest: section_perf(Section::Posttest),
        behaviors,
        mean_training_steps: mean(steps_per.values().map(|v| v.0 as f64)),
        mean_helpneed_steps: mean(steps_per.values().map(|v| v.1 as f64)),
        hjr: hints.hjr(),
        hjr_proactive: hints.hjr_for(Agency::Proactive),
        hjr_on_demand: hints.hjr_for(Agency::OnDemand),
        hints,
        mean_proactive_hints: mean(proactive.iter().copied()),
        mean_on_demand_hints: mean(on_demand.iter().copied()),
        proactive_rate,
        help,
        fn_rate,
        fp_rate,
        match_rate_ordered: matched(KeyMode::Ordered),
        match_rate_unordered: matched(KeyMode::Unordered),
        state_based_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expert() -> StudentProfile {
        StudentProfile {
            skill: 1.0,
            error_rate: 0.0,
            speed_median: 10.0,
            speed_sigma: 0.3,
            help_propensity: 0.0,
            hint_adoption: 1.0,
            learning_rate: 1.0,
        }
    }

    #[test]
    fn expert_replays_a_shortest_proof() {
        let curriculum = Curriculum::shipped();
        let engines = curriculum.engines(None);
        let behavior = BehaviorConfig::default();
        for problem in &curriculum.problems {
            let mut agent = Agent::new("x", expert(), 1);
            let run = ProblemRun {
                engine: &engines[&problem.id],
                policy: None,
                behavior: &behavior,
            };
            let events = run_problem(&mut agent, run, &PriorAggregates::default()).unwrap();
            let steps = events_to_steps(&events, problem).unwrap();
            assert_eq!(steps.len(), problem.optimal_length, "{}", problem.id);
            assert!(steps.last().unwrap().reaches_goal);
            assert!(steps.iter().all(|s| s.correct));
        }
    }

    #[test]
    fn adopted_hint_is_derived_and_justified() {
        let curriculum = Curriculum::shipped();
        let problem = &curriculum.problems[2];
        let space = curriculum.spaces[&problem.id].clone();
        let engine = HintEngine::new(problem.clone(), space.clone(), None);
        let mut state = ProofState::new(problem);
        let hint = engine.next_step_hint(&state, Agency::Proactive, 0).unwrap();
        let profile = StudentProfile { skill: 0.0, ..expert() };
        let mut agent = Agent::new("x", profile, 3);
        let pending = PendingHint {
            seq: 99,
            statement: hint.statement.clone(),
        };
        let events = simulate_step(&mut agent, problem, &space, &mut state, Some(pending), None, 0, &BehaviorConfig::default());
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].kind, EventKind::Derive);
        assert_eq!(events[0].statement.as_ref(), Some(&hint.statement));
        assert_eq!(events[1].kind, EventKind::HintJustified);
        assert_eq!(events[1].hint_seq, Some(99));
        assert!(state.contains(&hint.statement));
    }

    #[test]
    fn assignment_pairs_by_score() {
        let scores: Vec<(String, f64)> = [1.0, 2.0, 3.0, 4.0].iter().enumerate().map(|(i, s)| (format!("s{i}"), *s)).collect();
        let (t, c) = assign_conditions(&scores, 5);
        assert_eq!((t.len(), c.len()), (2, 2));
        let pair = |a: &str, b: &str| (t.contains(&a.to_string())) != (t.contains(&b.to_string()));
        assert!(pair("s0", "s1") && pair("s2", "s3"));
        assert_eq!(assign_conditions(&scores, 5), (t, c));

        let same: Vec<(String, f64)> = (0..4).map(|i| (format!("s{i}"), 1.0)).collect();
        let (t, c) = assign_conditions(&same, 9);
        assert_eq!((t.len(), c.len()), (2, 2));

        let odd: Vec<(String, f64)> = (0..5).map(|i| (format!("s{i}"), i as f64)).collect();
        let (t, c) = assign_conditions(&odd, 2);
        assert!(t.len().abs_diff(c.len()) <= 1);
        assert_eq!(t.len() + c.len(), 5);
    }

    #[test]
    fn incorrect_attempts_replay() {
        let curriculum = Curriculum::shipped();
        let engines = curriculum.engines(None);
        let behavior = BehaviorConfig::default();
        let profile = StudentProfile {
            skill: 0.5,
            error_rate: 0.5,
            ..expert()
        };
        let mut agent = Agent::new("e", profile, 11);
        let problem = &curriculum.problems[0];
        let run = ProblemRun {
            engine: &engines[&problem.id],
            policy: None,
            behavior: &behavior,
        };
        let events = run_problem(&mut agent, run, &PriorAggregates::default()).unwrap();
        assert!(events.iter().any(|e| e.correct == Some(false)));
        let steps = events_to_steps(&events, problem).unwrap();
        let logged: f64 = events.iter().map(|e| e.action_time).sum();
        let stepped: f64 = steps.iter().map(|s| s.duration).sum();
        assert!((logged - stepped).abs() < 1e-9);
    }

    #[test]
    fn profiles_validate() {
        assert!(expert().validate().is_ok());
        assert!(StudentProfile { skill: 1.5, ..expert() }.validate().is_err());
    }
}
