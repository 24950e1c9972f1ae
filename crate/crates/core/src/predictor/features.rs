//! Feature extraction at the start of a step.
//!
//! Features are a pure function of the completed steps of the current
//! problem and aggregates over earlier problems, so offline dataset
//! construction and live prediction compute identical vectors.

use serde::{Deserialize, Serialize};

use crate::corpus::{StateKeys, StepKind, StepRecord};
use crate::logic::{KeyMode, Problem, StateKey};
use crate::network::{InteractionNetwork, Quality};
use crate::stepscore::{efficiency, progress, EfficiencyCombo, ProgressVector, StepBehavior};

pub const SCHEMA_VERSION: u32 = 1;

pub const STATE_BASED_NAMES: [&str; 6] = [
    "relative_local",
    "relative_global",
    "absolute_local",
    "absolute_global",
    "post_local",
    "post_global",
];

pub const STATE_FREE_NAMES: [&str; 15] = [
    "prev_duration",
    "step_index",
    "elapsed",
    "prior_expert",
    "prior_strategic",
    "prior_opportunistic",
    "prior_far_off",
    "prior_futile",
    "hints_received",
    "hints_justified",
    "prev_failed_attempts",
    "mean_helpneed_rate",
    "mean_hjr",
    "mean_accuracy",
    "difficulty",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: u32,
    pub state_based: Vec<String>,
    pub state_free: Vec<String>,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        FeatureSchema {
            version: SCHEMA_VERSION,
            state_based: STATE_BASED_NAMES.iter().map(|s| s.to_string()).collect(),
            state_free: STATE_FREE_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Present only when the current state matched the network.
    pub state_based: Option<ProgressVector>,
    pub state_free: [f64; 15],
}

impl FeatureVector {
    /// Input row for the state-based classifier: six features then the
    /// state-free block.
    pub fn state_based_row(&self) -> Option<Vec<f64>> {
        self.state_based.map(|p| {
            let mut row = p.to_array().to_vec();
            row.extend_from_slice(&self.state_free);
            row
        })
    }

    pub fn state_free_row(&self) -> Vec<f64> {
        self.state_free.to_vec()
    }
}

/// What the extractor needs to know about the problem's network.
#[derive(Debug, Clone, Copy)]
pub struct FeatureContext<'a> {
    pub network: Option<&'a InteractionNetwork>,
    pub key_mode: KeyMode,
    pub penalty: bool,
    pub t75: f64,
    pub combo: EfficiencyCombo,
}

impl FeatureContext<'_> {
    fn quality_of(&self, keys: &StateKeys) -> Option<Quality> {
        let net = self.network?;
        let key: &StateKey = if self.key_mode == net.key_mode {
            keys.get(self.key_mode)
        } else {
            net.aliases.get(keys.get(self.key_mode))?
        };
        net.nodes.get(key).map(|n| Quality {
            global: n.global_quality,
            local: n.local_quality,
        })
    }

    fn start_quality(&self) -> Option<Quality> {
        let empty = StateKey(String::new());
        self.quality_of(&StateKeys {
            ordered: empty.clone(),
            unordered: empty,
        })
    }

    /// Progress of a completed step, if both its states matched.
    pub fn step_progress(&self, step: &StepRecord) -> Option<ProgressVector> {
        let start = self.start_quality()?;
        let pre = self.quality_of(&step.pre)?;
        let post = self.quality_of(&step.post)?;
        Some(progress(pre, post, start, step.hint_used, self.penalty))
    }

    /// Labels completed steps as they would be seen online: no later step
    /// relabels an earlier one. Unscored steps get `None`.
    pub fn provisional_labels(&self, steps: &[StepRecord]) -> Vec<Option<StepBehavior>> {
        let mut out = Vec::with_capacity(steps.len());
        let mut prev_quick_inefficient = false;
        for s in steps {
            let long = s.duration > self.t75;
            let label = self.step_progress(s).map(|p| match (long, efficiency(&p, self.combo)) {
                (false, true) => StepBehavior::Expert,
                (true, true) => StepBehavior::Strategic,
                (true, false) => StepBehavior::Futile,
                (false, false) if prev_quick_inefficient => StepBehavior::FarOff,
                (false, false) => StepBehavior::Opportunistic,
            });
            prev_quick_inefficient = matches!(label, Some(StepBehavior::FarOff | StepBehavior::Opportunistic));
            out.push(label);
        }
        out
    }
}

/// Aggregates over a student's finished problems.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PriorAggregates {
    pub problems: u32,
    pub helpneed_rate_sum: f64,
    pub hints_issued: u32,
    pub hints_justified: u32,
    pub correct: u32,
    pub attempts: u32,
}

impl PriorAggregates {
    pub fn absorb(&mut self, steps: &[StepRecord], ctx: &FeatureContext) {
        if steps.is_empty() {
            return;
        }
        let labels = ctx.provisional_labels(steps);
        let helpneed = labels.iter().filter(|l| l.is_some_and(StepBehavior::helpneed)).count();
        self.problems += 1;
        self.helpneed_rate_sum += helpneed as f64 / steps.len() as f64;
        for s in steps {
            self.hints_issued += s.hints_received();
            self.hints_justified += u32::from(s.hint_used);
            self.correct += u32::from(s.kind == StepKind::Derive);
            self.attempts += u32::from(s.kind == StepKind::Derive) + s.failed_attempts;
        }
    }

    fn mean_helpneed_rate(&self) -> f64 {
        if self.problems == 0 {
            0.0
        } else {
            self.helpneed_rate_sum / self.problems as f64
        }
    }

    fn ratio(num: u32, den: u32) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }
}

/// Features for the step about to start, given the steps already
/// completed in this problem.
pub fn extract_features(prior: &PriorAggregates, problem: &Problem, completed: &[StepRecord], ctx: &FeatureContext) -> FeatureVector {
    let state_based = match completed.last() {
        None => ctx.start_quality().map(|q| ProgressVector {
            post_local: q.local,
            post_global: q.global,
            ..Default::default()
        }),
        Some(last) => ctx.step_progress(last),
    };
    let mut counts = [0.0; 5];
    for label in ctx.provisional_labels(completed).into_iter().flatten() {
        counts[label.index()] += 1.0;
    }
    let last = completed.last();
    let state_free = [
        last.map_or(0.0, |s| s.duration),
        completed.len() as f64,
        completed.iter().map(|s| s.duration).sum(),
        counts[0],
        counts[1],
        counts[2],
        counts[3],
        counts[4],
        completed.iter().map(|s| s.hints_received() as f64).sum(),
        completed.iter().filter(|s| s.hint_used).count() as f64,
        last.map_or(0.0, |s| s.failed_attempts as f64),
        prior.mean_helpneed_rate(),
        PriorAggregates::ratio(prior.hints_justified, prior.hints_issued),
        PriorAggregates::ratio(prior.correct, prior.attempts),
        problem.optimal_length as f64,
    ];
    FeatureVector { state_based, state_free }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::{Rule, Section};

    fn problem() -> Problem {
        Problem {
            id: "x".into(),
            premises: vec![crate::logic::parse_expression("p").unwrap()],
            conclusion: crate::logic::parse_expression("p | q").unwrap(),
            allowed_rules: Rule::ALL.to_vec(),
            section: Section::Training,
            optimal_length: 1,
        }
    }

    #[test]
    fn cold_start() {
        let ctx = FeatureContext {
            network: None,
            key_mode: KeyMode::Unordered,
            penalty: true,
            t75: 10.0,
            combo: EfficiencyCombo::default(),
        };
        let f = extract_features(&PriorAggregates::default(), &problem(), &[], &ctx);
        assert!(f.state_based.is_none());
        assert_eq!(&f.state_free[..14], &[0.0; 14]);
        assert_eq!(f.state_free[14], 1.0);
        assert_eq!(f, extract_features(&PriorAggregates::default(), &problem(), &[], &ctx));
    }
}
