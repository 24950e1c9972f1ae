//! HelpNeed-and-Use adaptive assistance for propositional logic proofs.

pub mod corpus;
pub mod hints;
pub mod logic;
pub mod metrics;
pub mod network;
pub mod policy;
pub mod predictor;
pub mod session;
pub mod sim;
pub mod stepscore;

pub use corpus::{EventKind, StepRecord, TraceEvent};
pub use hints::{Agency, Hint, HintEngine, HintSource};
pub use logic::{parse_expression, Expr, KeyMode, Problem, ProofState, Rule, Section, StateKey};
pub use metrics::{Denominator, KsResult};
pub use network::{InteractionNetwork, ValueIterationParams};
pub use policy::PolicyKind;
pub use predictor::{HelpNeedModel, Protocol};
pub use sim::{CohortReport, Curriculum, ExperimentConfig};
pub use stepscore::{LabeledStep, StepBehavior};
