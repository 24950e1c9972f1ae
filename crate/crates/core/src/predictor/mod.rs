//! HelpNeed prediction: features, the state-based/state-free forest pair,
//! and the cross-validation and holdout protocols.

mod eval;
mod features;
mod forest;

pub use eval::{auc, evaluate, evaluate_model, per_student_rates, recall, EvalReport, EvalRow, Protocol, RowClassifier};
pub use features::{
    extract_features, FeatureContext, FeatureSchema, FeatureVector, PriorAggregates, SCHEMA_VERSION, STATE_BASED_NAMES,
    STATE_FREE_NAMES,
};
pub use forest::{train_forest, ForestParams, Tree, TreeEnsemble, TreeNode};

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Classifier;
use crate::logic::{KeyMode, Problem};
use crate::network::InteractionNetwork;
use crate::stepscore::{EfficiencyCombo, LabeledStep, ProgressVector};

pub const MODEL_FORMAT: &str = "hnu-model/1";

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("training data contains a single class")]
    SingleClass,
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("feature schema mismatch: {0}")]
    Schema(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model file: {0}")]
    Format(String),
}

/// One step's features and training label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub student: String,
    pub problem: String,
    pub features: FeatureVector,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub forest: ForestParams,
    pub threshold: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            forest: ForestParams::default(),
            threshold: 0.5,
        }
    }
}

/// How features were computed; frozen into the model so serving matches
/// training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSettings {
    pub key_mode: KeyMode,
    pub penalty: bool,
    pub combo: EfficiencyCombo,
    /// Per-problem 75th-percentile step duration.
    pub thresholds: BTreeMap<String, f64>,
}

impl FeatureSettings {
    pub fn context<'a>(&self, problem: &Problem, network: Option<&'a InteractionNetwork>) -> FeatureContext<'a> {
        FeatureContext {
            network,
            key_mode: self.key_mode,
            penalty: self.penalty,
            t75: self.thresholds.get(&problem.id).copied().unwrap_or(f64::INFINITY),
            combo: self.combo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub corpus_hash: String,
    pub examples: usize,
    pub state_based_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelpNeedModel {
    pub format: String,
    pub schema: FeatureSchema,
    pub state_based: TreeEnsemble,
    pub state_free: TreeEnsemble,
    pub class_weight: f64,
    pub threshold: f64,
    pub settings: FeatureSettings,
    pub metadata: TrainingMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub helpneed: bool,
    pub score: f64,
    pub classifier: Classifier,
}

/// Builds one example per labeled step. Features for a step only see the
/// steps before it in the same problem and the student's earlier problems,
/// taken in `problems` order.
pub fn build_dataset(
    labeled: &[LabeledStep],
    problems: &[Problem],
    networks: &BTreeMap<String, InteractionNetwork>,
    settings: &FeatureSettings,
) -> Vec<Example> {
    let mut by_student: BTreeMap<&str, BTreeMap<&str, Vec<&LabeledStep>>> = BTreeMap::new();
    for l in labeled {
        by_student
            .entry(l.step.student.as_str())
            .or_default()
            .entry(l.step.problem.as_str())
            .or_default()
            .push(l);
    }
    let mut out = Vec::with_capacity(labeled.len());
    for (student, attempts) in by_student {
        let mut prior = PriorAggregates::default();
        for problem in problems {
            let Some(steps) = attempts.get(problem.id.as_str()) else {
                continue;
            };
            let ctx = settings.context(problem, networks.get(&problem.id));
            let records: Vec<_> = steps.iter().map(|l| l.step.clone()).collect();
            for (i, l) in steps.iter().enumerate() {
                out.push(Example {
                    student: student.to_string(),
                    problem: problem.id.clone(),
                    features: extract_features(&prior, problem, &records[..i], &ctx),
                    label: l.helpneed(),
                });
            }
            prior.absorb(&records, &ctx);
        }
    }
    out
}

pub fn corpus_hash(examples: &[Example]) -> String {
    let mut hasher = Sha256::new();
    for e in examples {
        hasher.update(serde_json::to_vec(e).expect("examples serialize"));
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// Trains both classifiers on the same examples: the state-based one on
/// those with a matched state, the state-free one on all.
pub fn train(examples: &[Example], params: &TrainParams, settings: FeatureSettings) -> Result<HelpNeedModel, PredictorError> {
    let (sb_x, sb_y): (Vec<Vec<f64>>, Vec<u8>) = examples
        .iter()
        .filter_map(|e| e.features.state_based_row().map(|r| (r, u8::from(e.label))))
        .unzip();
    let free_x: Vec<Vec<f64>> = examples.iter().map(|e| e.features.state_free_row()).collect();
    let free_y: Vec<u8> = examples.iter().map(|e| u8::from(e.label)).collect();
    if examples.is_empty() || free_y.iter().all(|&y| y == free_y[0]) {
        return Err(PredictorError::SingleClass);
    }
    let state_based = train_forest(&sb_x, &sb_y, &params.forest)?;
    let state_free = train_forest(&free_x, &free_y, &params.forest)?;
    Ok(HelpNeedModel {
        format: MODEL_FORMAT.to_string(),
        schema: FeatureSchema::default(),
        state_based,
        state_free,
        class_weight: params.forest.class_weights[1],
        threshold: params.threshold,
        settings,
        metadata: TrainingMetadata {
            seed: params.forest.seed,
            corpus_hash: corpus_hash(examples),
            examples: examples.len(),
            state_based_examples: sb_x.len(),
        },
    })
}

/// Dispatches to the state-based classifier iff the state-based block is
/// present.
pub fn predict(model: &HelpNeedModel, features: &FeatureVector) -> Result<Prediction, PredictorError> {
    let (row, ensemble, classifier) = match features.state_based_row() {
        Some(row) => (row, &model.state_based, Classifier::StateBased),
        None => (features.state_free_row(), &model.state_free, Classifier::StateFree),
    };
    if row.len() != ensemble.n_features {
        return Err(PredictorError::Schema(format!(
            "{classifier} classifier expects {} features, got {}",
            ensemble.n_features,
            row.len()
        )));
    }
    let score = ensemble.score(&row);
    Ok(Prediction {
        helpneed: score >= model.threshold,
        score,
        classifier,
    })
}

impl HelpNeedModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PredictorError> {
        let model: HelpNeedModel = serde_json::from_str(text).map_err(|e| PredictorError::Format(e.to_string()))?;
        if model.format != MODEL_FORMAT {
            return Err(PredictorError::Format(format!("unsupported format tag `{}`", model.format)));
        }
        if model.schema != FeatureSchema::default() {
            return Err(PredictorError::Schema(format!("model uses schema version {}", model.schema.version)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PredictorError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Examples whose class signal lives only in the six quality/progress
/// features; the state-free block is label-independent noise.
pub fn planted_cohort(seed: u64, students: usize, steps_per_student: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let duration = LogNormal::new(3.0, 0.6).expect("valid lognormal");
    let mut out = Vec::with_capacity(students * steps_per_student);
    for s in 0..students {
        let mut elapsed = 0.0;
        for i in 0..steps_per_student {
            let label = rng.random_bool(0.35);
            let shift = if label { -1.0 } else { 1.0 };
            let mut g = |mean: f64, sd: f64| mean + sd * noise.sample(&mut rng);
            let absolute_global = g(4.0 * shift, 6.0);
            let relative_global = g(3.0 * shift, 5.0);
            let progress = ProgressVector {
                relative_local: g(4.0 * shift, 8.0),
                relative_global,
                absolute_local: g(3.0 * shift, 8.0),
                absolute_global,
                post_local: g(60.0 + 8.0 * shift, 15.0),
                post_global: g(65.0 + 6.0 * shift, 12.0),
            };
            let prev = duration.sample(&mut rng);
            elapsed += prev;
            let mut free = [0.0; 15];
            free[0] = prev;
            free[1] = i as f64;
            free[2] = elapsed;
            for v in free.iter_mut().skip(3).take(11) {
                *v = rng.random_range(0.0..3.0f64).floor();
            }
            free[11] = rng.random::<f64>();
            free[12] = rng.random::<f64>();
            free[13] = rng.random::<f64>();
            free[14] = rng.random_range(3..=8) as f64;
            out.push(Example {
                student: format!("syn-{s:03}"),
                problem: "planted".into(),
                features: FeatureVector {
                    state_based: Some(progress),
                    state_free: free,
                },
                label,
            });
        }
    }
    out
}
