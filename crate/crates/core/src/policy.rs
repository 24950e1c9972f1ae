//! Per-step hint policies: adaptive (predictor-driven), control and random.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PredictionRecord, StepRecord};
use crate::hints::{Agency, Hint, HintEngine, HintError};
use crate::logic::{KeyMode, ProofState};
use crate::predictor::{extract_features, predict, HelpNeedModel, PredictorError, PriorAggregates};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("the adaptive policy needs a trained model")]
    MissingModel,
    #[error("policy penalty setting ({policy}) differs from the model's ({model})")]
    PenaltyMismatch { policy: bool, model: bool },
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Hint(#[from] HintError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "p")]
pub enum PolicyKind {
    Adaptive,
    Control,
    Random(f64),
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::Adaptive => f.write_str("adaptive"),
            PolicyKind::Control => f.write_str("control"),
            PolicyKind::Random(p) => write!(f, "random:{p}"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive" => Ok(PolicyKind::Adaptive),
            "control" => Ok(PolicyKind::Control),
            other => {
                let p: f64 = other
                    .strip_prefix("random:")
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| format!("unknown policy `{other}` (expected adaptive|control|random:p)"))?;
                if (0.0..=1.0).contains(&p) {
                    Ok(PolicyKind::Random(p))
                } else {
                    Err(format!("random policy probability must lie in [0, 1], got {p}"))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub penalty_enabled: bool,
    pub key_mode: KeyMode,
    /// Steps that must pass after a proactive hint before the next one.
    pub cooldown: usize,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        PolicyConfig {
            kind,
            penalty_enabled: true,
            key_mode: KeyMode::Unordered,
            cooldown: 0,
        }
    }

    pub fn check(&self, model: Option<&HelpNeedModel>) -> Result<(), PolicyError> {
        match (self.kind, model) {
            (PolicyKind::Adaptive, None) => Err(PolicyError::MissingModel),
            (_, Some(m)) if m.settings.penalty != self.penalty_enabled => Err(PolicyError::PenaltyMismatch {
                policy: self.penalty_enabled,
                model: m.settings.penalty,
            }),
            _ => Ok(()),
        }
    }
}

/// What the policy sees at the start of a step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub state: &'a ProofState,
    /// Completed steps of the current problem.
    pub completed: &'a [StepRecord],
    pub prior: &'a PriorAggregates,
    /// Steps since the last proactive hint, `None` if there was none.
    pub since_proactive: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Decision {
    pub hint: Option<Hint>,
    pub prediction: Option<PredictionRecord>,
}

/// Runs the predictor (when a model is available; under non-adaptive
/// policies its output is logged but not acted on) and decides whether to
/// issue a proactive hint.
pub fn on_step_start(
    config: &PolicyConfig,
    model: Option<&HelpNeedModel>,
    engine: &HintEngine,
    ctx: &StepContext,
    rng: &mut impl Rng,
) -> Result<Decision, PolicyError> {
    config.check(model)?;
    let prediction = match model {
        Some(m) => {
            let mut settings = m.settings.clone();
            settings.key_mode = config.key_mode;
            let fctx = settings.context(engine.problem(), engine.network());
            let features = extract_features(ctx.prior, engine.problem(), ctx.completed, &fctx);
            Some(predict(m, &features)?)
        }
        None => None,
    };
    let cooled = ctx.since_proactive.is_none_or(|n| n >= config.cooldown);
    let issue = cooled
        && match config.kind {
            PolicyKind::Control => false,
            PolicyKind::Random(p) => rng.random_bool(p),
            PolicyKind::Adaptive => prediction.is_some_and(|p| p.helpneed),
        };
    let record = prediction.map(|p| PredictionRecord {
        score: p.score,
        helpneed: p.helpneed,
        classifier: p.classifier,
        acted: config.kind == PolicyKind::Adaptive,
    });
    let hint = if issue {
        Some(engine.next_step_hint(ctx.state, Agency::Proactive, ctx.completed.len())?)
    } else {
        None
    };
    Ok(Decision {
        hint,
        prediction: record,
    })
}

/// On-demand hints are available under every policy.
pub fn on_demand_hint(engine: &HintEngine, state: &ProofState, step_index: usize) -> Result<Hint, HintError> {
    engine.next_step_hint(state, Agency::OnDemand, step_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::{parse_expression, Problem, ProblemSpace, Rule, Section};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn engine() -> HintEngine {
        let problem = Problem {
            id: "x".into(),
            premises: vec![parse_expression("p").unwrap(), parse_expression("p -> q").unwrap()],
            conclusion: parse_expression("q").unwrap(),
            allowed_rules: Rule::ALL.to_vec(),
            section: Section::Training,
            optimal_length: 1,
        };
        let space = Arc::new(ProblemSpace::new(&problem));
        HintEngine::new(problem, space, None)
    }

    fn decide(kind: PolicyKind, seed: u64) -> Decision {
        let engine = engine();
        let state = ProofState::new(engine.problem());
        let prior = PriorAggregates::default();
        let ctx = StepContext {
            state: &state,
            completed: &[],
            prior: &prior,
            since_proactive: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        on_step_start(&PolicyConfig::new(kind), None, &engine, &ctx, &mut rng).unwrap()
    }

    #[test]
    fn control_never_hints() {
        for seed in 0..20 {
            assert!(decide(PolicyKind::Control, seed).hint.is_none());
        }
    }

    #[test]
    fn random_endpoints() {
        for seed in 0..20 {
            assert!(decide(PolicyKind::Random(0.0), seed).hint.is_none());
            let d = decide(PolicyKind::Random(1.0), seed);
            assert_eq!(d.hint.unwrap().agency, Agency::Proactive);
        }
    }

    #[test]
    fn adaptive_requires_model() {
        let engine = engine();
        let state = ProofState::new(engine.problem());
        let prior = PriorAggregates::default();
        let ctx = StepContext {
            state: &state,
            completed: &[],
            prior: &prior,
            since_proactive: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            on_step_start(&PolicyConfig::new(PolicyKind::Adaptive), None, &engine, &ctx, &mut rng),
            Err(PolicyError::MissingModel)
        ));
    }

    #[test]
    fn on_demand_is_idempotent() {
        let engine = engine();
        let state = ProofState::new(engine.problem());
        let a = on_demand_hint(&engine, &state, 0).unwrap();
        assert_eq!(a.statement, parse_expression("q").unwrap());
        assert_eq!(a, on_demand_hint(&engine, &state, 0).unwrap());
    }

    #[test]
    fn policy_names() {
        assert_eq!("random:0.25".parse::<PolicyKind>().unwrap(), PolicyKind::Random(0.25));
        assert!("random:2".parse::<PolicyKind>().is_err());
        assert_eq!(PolicyKind::Adaptive.to_string(), "adaptive");
    }
}
