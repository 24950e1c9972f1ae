use std::collections::BTreeMap;

use hnu_core::metrics::{help_behaviors, per_student_fn_fp, Denominator};
use hnu_core::stepscore::{label_steps, EfficiencyCombo, ProgressVector, StepBehavior};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{labeled, oracle_labels, record};

#[test]
fn labeler_matches_oracle_on_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t75 = 30.0;
    let mut seen = [0usize; 5];
    for _ in 0..10_000 {
        let n = rng.random_range(0..25);
        let mut long = Vec::with_capacity(n);
        let mut efficient = Vec::with_capacity(n);
        let mut steps = Vec::with_capacity(n);
        for i in 0..n {
            // durations straddle the threshold, including equality
            let duration = *[10.0, 29.9, 30.0, 30.1, 90.0].get(rng.random_range(0..5)).unwrap();
            let gain = *[-12.5, -0.001, 0.0, 0.001, 7.0].get(rng.random_range(0..5)).unwrap();
            long.push(duration > t75);
            efficient.push(gain >= 0.0);
            let progress = ProgressVector {
                absolute_global: gain,
                // the other five must not matter under the default combo
                relative_local: -gain,
                relative_global: -gain,
                absolute_local: -gain,
                post_local: rng.random_range(-50.0..50.0),
                post_global: rng.random_range(-50.0..50.0),
            };
            steps.push((record("s", i, duration), progress));
        }
        let got = label_steps(&steps, t75, EfficiencyCombo::default());
        let want = oracle_labels(&long, &efficient);
        assert_eq!(got, want, "long {long:?} efficient {efficient:?}");
        for l in got {
            seen[l.index()] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c > 1000), "{seen:?}");
}

#[test]
fn help_behaviors_and_error_rates_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for round in 0..200 {
        let students = rng.random_range(1..8);
        let mut steps = Vec::new();
        for s in 0..students {
            for i in 0..rng.random_range(1..30) {
                let observed = StepBehavior::ALL[rng.random_range(0..5)];
                steps.push(labeled(
                    &format!("st{s}"),
                    i,
                    observed,
                    rng.random_bool(0.4),
                    rng.random_range(0..3u32).saturating_sub(1),
                    u32::from(rng.random_bool(0.3)),
                ));
            }
        }
        // per student: [steps, avoidance, abuse, appropriate, positives, fn, negatives, fp]
        let mut per: BTreeMap<String, [f64; 8]> = BTreeMap::new();
        for l in &steps {
            let need = matches!(l.observed, StepBehavior::FarOff | StepBehavior::Futile);
            let predicted = l.step.prediction.unwrap().helpneed;
            let got_hint = l.step.hints_requested + l.step.proactive_hints > 0;
            let e = per.entry(l.step.student.clone()).or_default();
            e[0] += 1.0;
            if need && !got_hint {
                e[1] += 1.0;
            }
            if !need && !predicted && l.step.hints_requested > 0 {
                e[2] += 1.0;
            }
            if predicted && got_hint {
                e[3] += 1.0;
            }
            if need {
                e[4] += 1.0;
                e[5] += f64::from(u8::from(!predicted));
            } else {
                e[6] += 1.0;
                e[7] += f64::from(u8::from(predicted));
            }
        }
        let per_student = |i: usize| per.values().map(|e| 100.0 * e[i] / e[0]).sum::<f64>() / per.len() as f64;
        let pooled = |i: usize| 100.0 * per.values().map(|e| e[i]).sum::<f64>() / per.values().map(|e| e[0]).sum::<f64>();

        let r = help_behaviors(&steps, Denominator::PerStudent).unwrap();
        assert!((r.possible_avoidance - per_student(1)).abs() < 1e-9, "round {round}");
        assert!((r.possible_abuse - per_student(2)).abs() < 1e-9);
        assert!((r.possible_appropriateness - per_student(3)).abs() < 1e-9);
        let r = help_behaviors(&steps, Denominator::Pooled).unwrap();
        assert!((r.possible_avoidance - pooled(1)).abs() < 1e-9);
        assert!((r.possible_abuse - pooled(2)).abs() < 1e-9);
        assert!((r.possible_appropriateness - pooled(3)).abs() < 1e-9);

        // FN/FP rates are taken over each student's steps
        let (fn_rate, fp_rate) = per_student_fn_fp(&steps).unwrap();
        let want_fn = per.values().map(|e| e[5] / e[0]).sum::<f64>() / per.len() as f64;
        let want_fp = per.values().map(|e| e[7] / e[0]).sum::<f64>() / per.len() as f64;
        assert!((fn_rate - want_fn).abs() < 1e-12, "round {round}: {fn_rate} vs {want_fn}");
        assert!((fp_rate - want_fp).abs() < 1e-12);
    }
}
