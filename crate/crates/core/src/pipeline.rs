//! End-to-end runs: predictor training, calibration, model fitting, metric
//! collection, and the two parameter sweeps.

use serde::{Deserialize, Serialize};

use crate::calibration::{fit_calibration, CalibrationParams};
use crate::dataset::{split_dataset, Dataset};
use crate::error::{Error, Result};
use crate::leakage::{
    model_leakage_bits, path_report, spearman_rho, standard_metrics, LeakageReport, ModelRef,
    StandardMetrics,
};
use crate::mcbm::{
    fit_baseline, fit_mcbm, BaselineModel, BaselineVariant, ConceptMode, McbmModel,
};
use crate::mlp::{train_independent, train_joint, MlpArch, PredictorBundle, TrainHyper};
use crate::source::{Mode, ProbabilitySource};
use crate::synth::{generate_synthetic, SynthSpec};

/// Everything a fit needs beyond the data splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub msl: usize,
    pub mode: Mode,
    pub concept_mode: ConceptMode,
    /// Fit per-concept calibration on the calibration split (seq mode only).
    pub calibrate: bool,
    pub arch: MlpArch,
    pub hyper: TrainHyper,
}

impl ExperimentSettings {
    pub fn validate(&self) -> Result<()> {
        if self.msl == 0 {
            return Err(Error::InvalidArgument(
                "msl must be at least 1".into(),
            ));
        }
        if self.mode == Mode::Joint && self.calibrate {
            return Err(Error::InvalidArgument(
                "joint mode keeps the jointly trained probabilities; calibration must be off"
                    .into(),
            ));
        }
        self.hyper.validate()
    }
}

/// Trains the concept predictor for the configured mode and wraps it as a
/// probability source. Seq mode optionally fits calibration on `calib`.
pub fn train_source(
    train: &Dataset,
    calib: &Dataset,
    settings: &ExperimentSettings,
) -> Result<ProbabilitySource> {
    settings.validate()?;
    match settings.mode {
        Mode::Seq => {
            let params = train_independent(train, &settings.arch, &settings.hyper)?;
            let calibration = if settings.calibrate {
                if calib.n() == 0 {
                    return Err(Error::InvalidArgument(
                        "calibration is enabled but the calibration split is empty".into(),
                    ));
                }
                fit_calibration(&params, calib)?
            } else {
                CalibrationParams::identity()
            };
            Ok(ProbabilitySource::from_model(
                PredictorBundle { params, head: None },
                calibration,
                Mode::Seq,
            ))
        }
        Mode::Joint => {
            let (params, head) = train_joint(train, &settings.arch, &settings.hyper)?;
            Ok(ProbabilitySource::from_model(
                PredictorBundle {
                    params,
                    head: Some(head),
                },
                CalibrationParams::identity(),
                Mode::Joint,
            ))
        }
    }
}

/// Test-set metrics for the mixed model and the three baselines, plus the
/// fit-time leakage total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub mcbm: StandardMetrics,
    pub hard: StandardMetrics,
    pub independent: StandardMetrics,
    pub sequential_soft: StandardMetrics,
    pub total_leakage_bits: f64,
}

#[derive(Debug)]
pub struct Experiment {
    pub model: McbmModel,
    pub baselines: Vec<BaselineModel>,
    pub metrics: ExperimentMetrics,
    pub report: LeakageReport,
}

/// Trains, fits, and scores one full configuration.
pub fn run_experiment(
    train: &Dataset,
    calib: &Dataset,
    test: &Dataset,
    settings: &ExperimentSettings,
) -> Result<Experiment> {
    let source = train_source(train, calib, settings)?;
    let model = fit_mcbm(
        train,
        source.clone(),
        settings.msl,
        settings.mode,
        settings.concept_mode,
    )?;
    let baselines: Vec<BaselineModel> = [
        BaselineVariant::Hard,
        BaselineVariant::Independent,
        BaselineVariant::SequentialSoft,
    ]
    .into_iter()
    .map(|variant| {
        fit_baseline(
            train,
            source.clone(),
            settings.msl,
            variant,
            settings.concept_mode,
        )
    })
    .collect::<Result<_>>()?;
    let metrics = ExperimentMetrics {
        mcbm: standard_metrics(ModelRef::Mcbm(&model), test)?,
        hard: standard_metrics(ModelRef::Baseline(&baselines[0]), test)?,
        independent: standard_metrics(ModelRef::Baseline(&baselines[1]), test)?,
        sequential_soft: standard_metrics(ModelRef::Baseline(&baselines[2]), test)?,
        total_leakage_bits: model_leakage_bits(&model),
    };
    let report = path_report(&model, train, test)?;
    Ok(Experiment {
        model,
        baselines,
        metrics,
        report,
    })
}

/// One completeness-sweep fit: leakage measured at fit time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub level: usize,
    pub seed: u64,
    pub total_bits: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: usize,
    pub mean_bits: f64,
    pub std_bits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletenessSweep {
    pub points: Vec<SweepPoint>,
    pub levels: Vec<LevelSummary>,
    /// Rank correlation between completeness level and mean leakage; absent
    /// when either sequence is constant.
    pub spearman_level_vs_mean: Option<f64>,
}

/// Sweeps concept completeness: each level reveals the first `level` latent
/// factors, each seed regenerates data, splits, predictor, and fit.
pub fn completeness_sweep(
    base: &SynthSpec,
    levels: &[usize],
    seeds: &[u64],
    fractions: (f64, f64, f64),
    settings: &ExperimentSettings,
) -> Result<CompletenessSweep> {
    if levels.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "completeness sweep needs at least one level and one seed".into(),
        ));
    }
    for &level in levels {
        if level == 0 || level > base.n_factors {
            return Err(Error::InvalidArgument(format!(
                "completeness level {level} out of range for {} factors",
                base.n_factors
            )));
        }
    }
    let mut points = Vec::with_capacity(levels.len() * seeds.len());
    let mut summaries = Vec::with_capacity(levels.len());
    for &level in levels {
        let mut bits = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut spec = base.with_revealed((0..level).collect());
            spec.seed = seed;
            let ds = generate_synthetic(&spec)?;
            let (train, calib, test) = split_dataset(&ds, fractions, seed)?;
            drop(test);
            let mut settings = settings.clone();
            settings.hyper.seed = seed;
            let source = train_source(&train, &calib, &settings)?;
            let model = fit_mcbm(
                &train,
                source,
                settings.msl,
                settings.mode,
                settings.concept_mode,
            )?;
            let total = model_leakage_bits(&model);
            bits.push(total);
            points.push(SweepPoint {
                level,
                seed,
                total_bits: total,
            });
        }
        let mean = bits.iter().sum::<f64>() / bits.len() as f64;
        let var = if bits.len() > 1 {
            bits.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (bits.len() - 1) as f64
        } else {
            0.0
        };
        summaries.push(LevelSummary {
            level,
            mean_bits: mean,
            std_bits: var.sqrt(),
        });
    }
    let level_vals: Vec<f64> = summaries.iter().map(|s| s.level as f64).collect();
    let mean_vals: Vec<f64> = summaries.iter().map(|s| s.mean_bits).collect();
    let spearman = spearman_rho(&level_vals, &mean_vals).ok();
    Ok(CompletenessSweep {
        points,
        levels: summaries,
        spearman_level_vs_mean: spearman,
    })
}

/// One msl-sweep fit: structure sizes and accuracies at a given leaf floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MslPoint {
    pub msl: usize,
    pub global_nodes: usize,
    pub global_leaves: usize,
    pub merged_nodes: usize,
    pub merged_leaves: usize,
    pub n_subtrees: usize,
    pub total_leakage_bits: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub hard_test_accuracy: f64,
}

/// Refits the model across `msls` with one shared predictor; the probability
/// source does not depend on the tree's complexity control.
pub fn msl_sweep(
    train: &Dataset,
    calib: &Dataset,
    test: &Dataset,
    settings: &ExperimentSettings,
    msls: &[usize],
) -> Result<Vec<MslPoint>> {
    if msls.is_empty() {
        return Err(Error::InvalidArgument("msl sweep needs at least one value".into()));
    }
    let source = train_source(train, calib, settings)?;
    let mut out = Vec::with_capacity(msls.len());
    for &msl in msls {
        let model = fit_mcbm(
            train,
            source.clone(),
            msl,
            settings.mode,
            settings.concept_mode,
        )?;
        let hard = fit_baseline(
            train,
            source.clone(),
            msl,
            BaselineVariant::Hard,
            settings.concept_mode,
        )?;
        let merged = model.merge();
        let train_hits = model
            .evaluate(train)?
            .iter()
            .zip(&train.y)
            .filter(|(p, a)| p == a)
            .count();
        let test_hits = model
            .evaluate(test)?
            .iter()
            .zip(&test.y)
            .filter(|(p, a)| p == a)
            .count();
        let hard_hits = hard
            .evaluate(test)?
            .iter()
            .zip(&test.y)
            .filter(|(p, a)| p == a)
            .count();
        out.push(MslPoint {
            msl,
            global_nodes: model.global.n_nodes(),
            global_leaves: model.global.n_leaves(),
            merged_nodes: merged.n_nodes(),
            merged_leaves: merged.n_leaves(),
            n_subtrees: model.subtrees.len(),
            total_leakage_bits: model_leakage_bits(&model),
            train_accuracy: train_hits as f64 / train.n() as f64,
            test_accuracy: test_hits as f64 / test.n() as f64,
            hard_test_accuracy: hard_hits as f64 / test.n() as f64,
        });
    }
    Ok(out)
}
