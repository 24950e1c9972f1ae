//! Performance, hint justification, help-behavior rates, targeted-rule
//! counts and the two-sample Kolmogorov-Smirnov test.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EventKind, TraceEvent};
use crate::hints::{Agency, Hint};
use crate::logic::{Problem, ProblemSpace, Rule};
use crate::predictor::per_student_rates;
use crate::stepscore::LabeledStep;

/// Per-action time cap in seconds.
pub const TIME_CAP: f64 = 300.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("step {index} of {student}/{problem} has no prediction record")]
    MissingPrediction { student: String, problem: String, index: usize },
    #[error("ks test needs two nonempty samples")]
    EmptySample,
    #[error("exact ks test supports at most {max} observations per sample")]
    ExactTooLarge { max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Performance {
    /// Derivations across completed problems.
    pub length: usize,
    pub completed: usize,
    pub time_minutes: f64,
    pub raw_time_minutes: f64,
    pub correct_applications: usize,
    pub applications: usize,
}

impl Performance {
    pub fn accuracy(&self) -> Option<f64> {
        (self.applications > 0).then(|| self.correct_applications as f64 / self.applications as f64)
    }
}

/// Performance over the events of one section.
pub fn performance(events: &[TraceEvent]) -> Performance {
    let completed: BTreeSet<(&str, &str)> = events
        .iter()
        .filter(|e| e.kind == EventKind::ProblemComplete)
        .map(|e| (e.student.as_str(), e.problem.as_str()))
        .collect();
    let mut perf = Performance {
        completed: completed.len(),
        ..Default::default()
    };
    let mut capped = 0.0;
    let mut raw = 0.0;
    for e in events {
        capped += e.action_time.min(TIME_CAP);
        raw += e.action_time;
        if e.kind == EventKind::Derive {
            let correct = e.correct == Some(true);
            perf.applications += 1;
            perf.correct_applications += usize::from(correct);
            if correct && completed.contains(&(e.student.as_str(), e.problem.as_str())) {
                perf.length += 1;
            }
        }
    }
    perf.time_minutes = capped / 60.0;
    perf.raw_time_minutes = raw / 60.0;
    perf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HintCounts {
    pub proactive_issued: usize,
    pub proactive_justified: usize,
    pub on_demand_issued: usize,
    pub on_demand_justified: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl HintCounts {
    pub fn issued(&self) -> usize {
        self.proactive_issued + self.on_demand_issued
    }

    pub fn justified(&self) -> usize {
        self.proactive_justified + self.on_demand_justified
    }

    /// Justified fraction of issued hints; `None` when none were issued.
    pub fn hjr(&self) -> Option<f64> {
        ratio(self.justified(), self.issued())
    }

    pub fn hjr_for(&self, agency: Agency) -> Option<f64> {
        match agency {
            Agency::Proactive => ratio(self.proactive_justified, self.proactive_issued),
            Agency::OnDemand => ratio(self.on_demand_justified, self.on_demand_issued),
        }
    }

    pub fn add(&mut self, other: &HintCounts) {
        self.proactive_issued += other.proactive_issued;
        self.proactive_justified += other.proactive_justified;
        self.on_demand_issued += other.on_demand_issued;
        self.on_demand_justified += other.on_demand_justified;
    }
}

pub fn hjr(hints: &[Hint]) -> HintCounts {
    let mut c = HintCounts::default();
    for h in hints {
        match h.agency {
            Agency::Proactive => {
                c.proactive_issued += 1;
                c.proactive_justified += usize::from(h.justified);
            }
            Agency::OnDemand => {
                c.on_demand_issued += 1;
                c.on_demand_justified += usize::from(h.justified);
            }
        }
    }
    c
}

/// Hint counts recovered from a trace; justifications are attributed to
/// the agency of the hint event they reference.
pub fn hint_counts(events: &[TraceEvent]) -> HintCounts {
    let mut agency: BTreeMap<(&str, &str, u64), Agency> = BTreeMap::new();
    let mut c = HintCounts::default();
    for e in events {
        let key = (e.student.as_str(), e.problem.as_str(), e.seq);
        match e.kind {
            EventKind::ProactiveHint => {
                c.proactive_issued += 1;
                agency.insert(key, Agency::Proactive);
            }
            EventKind::HintRequest => {
                c.on_demand_issued += 1;
                agency.insert(key, Agency::OnDemand);
            }
            EventKind::HintJustified => {
                let Some(hint_seq) = e.hint_seq else { continue };
                match agency.get(&(e.student.as_str(), e.problem.as_str(), hint_seq)) {
                    Some(Agency::Proactive) => c.proactive_justified += 1,
                    Some(Agency::OnDemand) => c.on_demand_justified += 1,
                    None => {}
                }
            }
            _ => {}
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Mean of per-student rates.
    #[default]
    PerStudent,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelpBehaviorReport {
    pub possible_avoidance: f64,
    pub possible_abuse: f64,
    pub possible_appropriateness: f64,
    pub denominator: Denominator,
    pub steps: usize,
    pub students: usize,
}

/// Which help behaviors one step exhibits: (avoidance, abuse, appropriateness).
pub fn step_help_behavior(step: &LabeledStep) -> Result<(bool, bool, bool), MetricsError> {
    let s = &step.step;
    let prediction = s.prediction.as_ref().ok_or_else(|| MetricsError::MissingPrediction {
        student: s.student.clone(),
        problem: s.problem.clone(),
        index: s.index,
    })?;
    let observed = step.observed.helpneed();
    let received = s.hints_received() > 0;
    Ok((
        observed && !received,
        !prediction.helpneed && !observed && s.hints_requested > 0,
        prediction.helpneed && received,
    ))
}

/// Table-2 rates over training steps, in percent.
pub fn help_behaviors(steps: &[LabeledStep], denominator: Denominator) -> Result<HelpBehaviorReport, MetricsError> {
    let mut per: BTreeMap<&str, [usize; 4]> = BTreeMap::new();
    for step in steps {
        let (a, b, c) = step_help_behavior(step)?;
        let e = per.entry(step.step.student.as_str()).or_default();
        e[0] += 1;
        e[1] += usize::from(a);
        e[2] += usize::from(b);
        e[3] += usize::from(c);
    }
    let rate = |i: usize| -> f64 {
        match denominator {
            Denominator::Pooled => {
                let total: usize = per.values().map(|c| c[0]).sum();
                let hits: usize = per.values().map(|c| c[i]).sum();
                if total == 0 {
                    0.0
                } else {
                    100.0 * hits as f64 / total as f64
                }
            }
            Denominator::PerStudent => {
                if per.is_empty() {
                    0.0
                } else {
                    per.values().map(|c| 100.0 * c[i] as f64 / c[0] as f64).sum::<f64>() / per.len() as f64
                }
            }
        }
    };
    Ok(HelpBehaviorReport {
        possible_avoidance: rate(1),
        possible_abuse: rate(2),
        possible_appropriateness: rate(3),
        denominator,
        steps: steps.len(),
        students: per.len(),
    })
}

/// Mean per-student false-negative and false-positive rates of the logged
/// predictions against observed labels, each over the student's steps.
pub fn per_student_fn_fp(steps: &[LabeledStep]) -> Result<(f64, f64), MetricsError> {
    let mut students = Vec::with_capacity(steps.len());
    let mut predicted = Vec::with_capacity(steps.len());
    let mut observed = Vec::with_capacity(steps.len());
    for l in steps {
        let s = &l.step;
        let p = s.prediction.as_ref().ok_or_else(|| MetricsError::MissingPrediction {
            student: s.student.clone(),
            problem: s.problem.clone(),
            index: s.index,
        })?;
        students.push(s.student.as_str());
        predicted.push(p.helpneed);
        observed.push(l.observed.helpneed());
    }
    Ok(per_student_rates(&students, &predicted, &observed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TargetedStats {
    pub correct_targeted: usize,
    pub incorrect_targeted: usize,
    pub correct_other: usize,
    pub incorrect_other: usize,
}

impl TargetedStats {
    pub fn total(&self) -> usize {
        self.correct_targeted + self.incorrect_targeted + self.correct_other + self.incorrect_other
    }

    pub fn add(&mut self, other: &TargetedStats) {
        self.correct_targeted += other.correct_targeted;
        self.incorrect_targeted += other.incorrect_targeted;
        self.correct_other += other.correct_other;
        self.incorrect_other += other.incorrect_other;
    }
}

/// Partitions the problem's rule applications by whether the rule appears
/// in some minimum-length proof.
pub fn targeted_rule_stats(events: &[TraceEvent], problem: &Problem) -> TargetedStats {
    let targeted = ProblemSpace::new(problem).targeted_rules(problem.optimal_length);
    count_targeted(events, &problem.id, &targeted)
}

pub fn count_targeted(events: &[TraceEvent], problem_id: &str, targeted: &BTreeSet<Rule>) -> TargetedStats {
    let mut t = TargetedStats::default();
    for e in events.iter().filter(|e| e.kind == EventKind::Derive && e.problem == problem_id) {
        let Some(rule) = e.rule else { continue };
        let correct = e.correct == Some(true);
        match (targeted.contains(&rule), correct) {
            (true, true) => t.correct_targeted += 1,
            (true, false) => t.incorrect_targeted += 1,
            (false, true) => t.correct_other += 1,
            (false, false) => t.incorrect_other += 1,
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d: f64,
    pub p: f64,
}

/// Largest sample size per side for the exact test.
pub const KS_EXACT_MAX: usize = 20;

fn sorted(sample: &[f64]) -> Vec<f64> {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// D = sup |F_a - F_b|.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (sorted(a), sorted(b));
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = sign * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample test with the asymptotic p-value and effective-n correction.
pub fn ks_test(a: &[f64], b: &[f64]) -> Result<KsResult, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let d = ks_statistic(a, b);
    let ne = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
    let sq = ne.sqrt();
    Ok(KsResult {
        d,
        p: kolmogorov_q((sq + 0.12 + 0.11 / sq) * d),
    })
}

/// Exact permutation p-value, counting lattice paths whose ECDF gap stays
/// below the observed D at every distinct pooled value.
pub fn ks_test_exact(a: &[f64], b: &[f64]) -> Result<KsResult, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    if a.len() > KS_EXACT_MAX || b.len() > KS_EXACT_MAX {
        return Err(MetricsError::ExactTooLarge { max: KS_EXACT_MAX });
    }
    let d = ks_statistic(a, b);
    let (n, m) = (a.len(), b.len());
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    // a boundary after k pooled observations is a point where ECDFs are compared
    let boundary = |k: usize| k == n + m || pooled[k - 1] != pooled[k];
    let tol = 1e-12;
    let inside = |i: usize, j: usize| (i as f64 / n as f64 - j as f64 / m as f64).abs() < d - tol;
    let mut paths = vec![vec![0.0f64; m + 1]; n + 1];
    paths[0][0] = 1.0;
    for i in 0..=n {
        for j in 0..=m {
            if i + j == 0 {
                continue;
            }
            if boundary(i + j) && !inside(i, j) {
                continue;
            }
            let mut v = 0.0;
            if i > 0 {
                v += paths[i - 1][j];
            }
            if j > 0 {
                v += paths[i][j - 1];
            }
            paths[i][j] = v;
        }
    }
    let total: f64 = (1..=m).fold(1.0, |acc, k| acc * (n + k) as f64 / k as f64);
    Ok(KsResult {
        d,
        p: (1.0 - paths[n][m] / total).clamp(0.0, 1.0),
    })
}
