//! Concept-bottleneck classifiers with tree label predictors and a
//! quantified information-leakage account.
//!
//! The pipeline: a small MLP predicts binary concepts from features
//! ([`mlp`]), optionally calibrated per concept ([`calibration`]); a global
//! decision tree over hard concept annotations predicts the label ([`tree`]);
//! each global leaf may grow a sub-tree over predicted concept probabilities
//! ([`mcbm`]). Soft splits recover label information that the hard concepts
//! miss — the information gain of those splits, in bits, is exactly the
//! leakage the report quantifies ([`leakage`]). [`pipeline`] wires full runs
//! and parameter sweeps; [`synth`] generates data with a controllable
//! concept-completeness level.

pub mod calibration;
pub mod dataset;
pub mod dot;
pub mod error;
pub mod leakage;
pub mod matrix;
pub mod mcbm;
pub mod mlp;
pub mod pipeline;
pub mod rng;
pub mod schema;
pub mod source;
pub mod synth;
pub mod tree;

pub use calibration::{
    apply_calibration, expected_calibration_error, fit_calibration, fit_platt, fit_temperature,
    CalibrationParams,
};
pub use dataset::{load_dataset, load_dataset_with_schema, split_dataset, write_dataset, Dataset};
pub use dot::export_dot;
pub use error::{Error, Result};
pub use leakage::{
    entropy_bits, model_leakage_bits, path_report, soft_splits, spearman_rho, split_leakage,
    standard_metrics, tree_leakage_bits, LeakageReport, LeakySplit, ModelRef, StandardMetrics,
};
pub use matrix::Matrix;
pub use mcbm::{
    build_mixed_matrix, fit_baseline, fit_mcbm, fit_subtrees, BaselineModel, BaselineVariant,
    ConceptMode, McbmBundle, McbmModel, MixedConceptMatrix, MIN_LEAKY_GAIN_BITS,
};
pub use mlp::{
    binarize_matrix, binarize_row, gradient_check, probs_from_logits, train_independent,
    train_joint, Activation, MlpArch, MlpParams, PredictorBundle, TrainHyper,
};
pub use pipeline::{
    completeness_sweep, msl_sweep, run_experiment, train_source, CompletenessSweep, Experiment,
    ExperimentMetrics, ExperimentSettings, LevelSummary, MslPoint, SweepPoint,
};
pub use schema::ConceptSchema;
pub use source::{
    read_probability_csv, write_probability_csv, Mode, ProbabilitySource, SourceKind,
};
pub use synth::{generate_synthetic, SynthSpec};
pub use tree::{
    fit_tree, DecisionPath, DecisionTree, Direction, FeatureKind, Node, NodeKind, PathCondition,
    TreeParams,
};
