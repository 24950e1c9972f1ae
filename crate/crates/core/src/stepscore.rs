//! Step efficiency, the hint-usage gain penalty, duration thresholds and
//! the five-way step-behavior labeler.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::StepRecord;
use crate::network::{quality, InteractionNetwork, NetworkError, Quality};

#[derive(Debug, Error)]
pub enum StepScoreError {
    #[error("duration threshold needs at least one duration")]
    EmptyDurations,
    #[error("no network for problem {0}")]
    MissingNetwork(String),
    #[error("no duration threshold for problem {0}")]
    MissingThreshold(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// The six quality/progress features of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProgressVector {
    pub relative_local: f64,
    pub relative_global: f64,
    pub absolute_local: f64,
    pub absolute_global: f64,
    pub post_local: f64,
    pub post_global: f64,
}

impl ProgressVector {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.relative_local,
            self.relative_global,
            self.absolute_local,
            self.absolute_global,
            self.post_local,
            self.post_global,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenalizedGain {
    pub post_quality: f64,
    pub absolute_progress: f64,
    pub relative_progress: f64,
}

/// Halves the quality gain of a hint-justified step. The gain is halved,
/// not the post value.
pub fn penalize_gain(pre_quality: f64, post_quality_raw: f64, start_quality: f64, hint_used: bool) -> PenalizedGain {
    let post = if hint_used {
        pre_quality + (post_quality_raw - pre_quality) / 2.0
    } else {
        post_quality_raw
    };
    PenalizedGain {
        post_quality: post,
        absolute_progress: post - start_quality,
        relative_progress: post - pre_quality,
    }
}

/// Progress on both scales; `penalize` applies [`penalize_gain`] to
/// hint-justified steps.
pub fn progress(pre: Quality, post: Quality, start: Quality, hint_used: bool, penalize: bool) -> ProgressVector {
    let halve = hint_used && penalize;
    let local = penalize_gain(pre.local, post.local, start.local, halve);
    let global = penalize_gain(pre.global, post.global, start.global, halve);
    ProgressVector {
        relative_local: local.relative_progress,
        relative_global: global.relative_progress,
        absolute_local: local.absolute_progress,
        absolute_global: global.absolute_progress,
        post_local: local.post_quality,
        post_global: global.post_quality,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgressKind {
    Relative,
    #[default]
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityScale {
    Local,
    #[default]
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EfficiencyCombo {
    pub progress: ProgressKind,
    pub scale: QualityScale,
}

/// A step is efficient when the selected progress is non-negative.
pub fn efficiency(progress: &ProgressVector, combo: EfficiencyCombo) -> bool {
    let value = match (combo.progress, combo.scale) {
        (ProgressKind::Relative, QualityScale::Local) => progress.relative_local,
        (ProgressKind::Relative, QualityScale::Global) => progress.relative_global,
        (ProgressKind::Absolute, QualityScale::Local) => progress.absolute_local,
        (ProgressKind::Absolute, QualityScale::Global) => progress.absolute_global,
    };
    value >= 0.0
}

/// Nearest-rank 75th percentile: the ⌈0.75·n⌉-th smallest duration.
pub fn duration_threshold(durations: &[f64]) -> Result<f64, StepScoreError> {
    if durations.is_empty() {
        return Err(StepScoreError::EmptyDurations);
    }
    let mut sorted = durations.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (3 * sorted.len()).div_ceil(4);
    Ok(sorted[rank - 1])
}

/// Per-problem t75 over the durations of `steps`.
pub fn threshold_table(steps: &[StepRecord]) -> BTreeMap<String, f64> {
    let mut by_problem: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in steps {
        by_problem.entry(s.problem.clone()).or_default().push(s.duration);
    }
    by_problem
        .into_iter()
        .map(|(p, d)| (p, duration_threshold(&d).expect("nonempty by construction")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepBehavior {
    Expert,
    Strategic,
    Opportunistic,
    FarOff,
    Futile,
}

impl StepBehavior {
    pub const ALL: [StepBehavior; 5] = [
        StepBehavior::Expert,
        StepBehavior::Strategic,
        StepBehavior::Opportunistic,
        StepBehavior::FarOff,
        StepBehavior::Futile,
    ];

    pub fn helpneed(self) -> bool {
        matches!(self, StepBehavior::FarOff | StepBehavior::Futile)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for StepBehavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepBehavior::Expert => "Expert",
            StepBehavior::Strategic => "Strategic",
            StepBehavior::Opportunistic => "Opportunistic",
            StepBehavior::FarOff => "FarOff",
            StepBehavior::Futile => "Futile",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlags {
    pub long: bool,
    pub efficient: bool,
}

/// Labels one attempt's flag sequence. Runs of two or more quick
/// inefficient steps are FarOff throughout; a lone one is Opportunistic.
pub fn label_flags(flags: &[StepFlags]) -> Vec<StepBehavior> {
    let mut out = Vec::with_capacity(flags.len());
    let mut i = 0;
    while i < flags.len() {
        let f = flags[i];
        match (f.long, f.efficient) {
            (false, true) => out.push(StepBehavior::Expert),
            (true, true) => out.push(StepBehavior::Strategic),
            (true, false) => out.push(StepBehavior::Futile),
            (false, false) => {
                let run = flags[i..].iter().take_while(|g| !g.long && !g.efficient).count();
                let label = if run >= 2 {
                    StepBehavior::FarOff
                } else {
                    StepBehavior::Opportunistic
                };
                out.extend(std::iter::repeat_n(label, run));
                i += run;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Labels steps of a single attempt from their progress and t75.
pub fn label_steps(steps: &[(StepRecord, ProgressVector)], t75: f64, combo: EfficiencyCombo) -> Vec<StepBehavior> {
    let flags: Vec<StepFlags> = steps
        .iter()
        .map(|(s, p)| StepFlags {
            long: s.duration > t75,
            efficient: efficiency(p, combo),
        })
        .collect();
    label_flags(&flags)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub combo: EfficiencyCombo,
    /// Halve gains of hint-justified steps in features and training labels.
    pub penalty: bool,
    /// Also use penalized progress for the observed labels.
    pub penalty_in_reporting: bool,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            combo: EfficiencyCombo::default(),
            penalty: true,
            penalty_in_reporting: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledStep {
    pub step: StepRecord,
    /// Progress used for features and the training label.
    pub progress: ProgressVector,
    pub raw_progress: ProgressVector,
    pub long: bool,
    /// Label the predictor is trained on.
    pub label: StepBehavior,
    /// Label for reporting what the student actually did.
    pub observed: StepBehavior,
}

impl LabeledStep {
    pub fn helpneed(&self) -> bool {
        self.label.helpneed()
    }
}

/// Scores and labels every step against per-problem networks and
/// thresholds. Steps must be grouped by attempt, as replay produces them.
pub fn label_corpus(
    steps: &[StepRecord],
    networks: &BTreeMap<String, InteractionNetwork>,
    thresholds: &BTreeMap<String, f64>,
    config: &LabelConfig,
) -> Result<Vec<LabeledStep>, StepScoreError> {
    let mut out: Vec<LabeledStep> = Vec::with_capacity(steps.len());
    let mut start = 0;
    while start < steps.len() {
        let (student, problem) = (&steps[start].student, &steps[start].problem);
        let end = start
            + steps[start..]
                .iter()
                .take_while(|s| &s.student == student && &s.problem == problem)
                .count();
        let net = networks
            .get(problem)
            .ok_or_else(|| StepScoreError::MissingNetwork(problem.clone()))?;
        let t75 = *thresholds
            .get(problem)
            .ok_or_else(|| StepScoreError::MissingThreshold(problem.clone()))?;
        let start_q = quality(net, &net.start_key)?;
        let mode = net.key_mode;
        let mut scored = Vec::with_capacity(end - start);
        for s in &steps[start..end] {
            let pre = quality(net, s.pre.get(mode))?;
            let post = quality(net, s.post.get(mode))?;
            scored.push((
                progress(pre, post, start_q, s.hint_used, config.penalty),
                progress(pre, post, start_q, s.hint_used, false),
                progress(pre, post, start_q, s.hint_used, config.penalty_in_reporting),
            ));
        }
        let flags = |pick: fn(&(ProgressVector, ProgressVector, ProgressVector)) -> &ProgressVector| -> Vec<StepFlags> {
            steps[start..end]
                .iter()
                .zip(&scored)
                .map(|(s, p)| StepFlags {
                    long: s.duration > t75,
                    efficient: efficiency(pick(p), config.combo),
                })
                .collect()
        };
        let labels = label_flags(&flags(|p| &p.0));
        let observed = label_flags(&flags(|p| &p.2));
        for (i, s) in steps[start..end].iter().enumerate() {
            out.push(LabeledStep {
                step: s.clone(),
                progress: scored[i].0,
                raw_progress: scored[i].1,
                long: s.duration > t75,
                label: labels[i],
                observed: observed[i],
            });
        }
        start = end;
    }
    Ok(out)
}
