//! Pipeline CLI: synthesize data, train and calibrate the concept
//! predictor, fit the mixed tree model and its baselines, score them, and
//! write leakage reports and sweeps — one subcommand per stage, one JSON
//! config per run.
//!
//! Stages communicate through files in the output directory, so any stage
//! can be swapped out (most usefully: an externally produced probability
//! CSV replaces `train`). Every artifact embeds the resolved config hash
//! and seed; downstream stages verify the hash before trusting a file.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use config::{CalibrationChoice, DatasetConfig, RunConfig};
use mcbm::{
    completeness_sweep, export_dot, fit_baseline, fit_mcbm, generate_synthetic, load_dataset,
    load_dataset_with_schema, model_leakage_bits, msl_sweep, path_report, read_probability_csv,
    split_dataset, standard_metrics, train_independent, train_joint, write_dataset,
    BaselineModel, BaselineVariant, CalibrationParams, CompletenessSweep, ConceptSchema, Dataset,
    DecisionTree, Error, ExperimentMetrics, McbmBundle, McbmModel, Mode, ModelRef, MslPoint,
    PredictorBundle, ProbabilitySource, Result,
};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Seq,
    Joint,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Seq => Mode::Seq,
            ModeArg::Joint => Mode::Joint,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CalibrationArg {
    PlattTemp,
    None,
}

impl From<CalibrationArg> for CalibrationChoice {
    fn from(c: CalibrationArg) -> CalibrationChoice {
        match c {
            CalibrationArg::PlattTemp => CalibrationChoice::PlattTemp,
            CalibrationArg::None => CalibrationChoice::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    Completeness,
    Msl,
    All,
}

#[derive(Parser)]
#[command(
    name = "mcbm",
    version,
    about = "Concept-bottleneck tree models with per-leaf soft extensions and leakage reports"
)]
struct Cli {
    /// Run configuration JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's minimum samples per leaf.
    #[arg(long, global = true)]
    msl: Option<usize>,
    /// Override the config's training mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Override the concept-loss weight for joint training.
    #[arg(long, global = true)]
    lambda_c: Option<f64>,
    /// Override the config's calibration method.
    #[arg(long, global = true, value_enum)]
    calibration: Option<CalibrationArg>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset artifacts (dataset.csv, schema.json).
    Synth,
    /// Train the concept predictor on the train split (predictor.json).
    Train,
    /// Fit probability calibration on the calibration split (calibration.json).
    Calibrate,
    /// Fit the mixed model and the baselines (mcbm.json, baselines.json).
    Fit,
    /// Score the fitted models on the test split (metrics.json).
    Eval,
    /// Write the leakage report and tree renderings (report.json/.txt, *.dot).
    Inspect,
    /// Run the completeness and/or msl sweeps (sweep_*.csv).
    Sweep {
        #[arg(long, value_enum, default_value_t = SweepKind::All)]
        kind: SweepKind,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let config_path = cli.config.as_ref().ok_or_else(|| {
        Error::InvalidArgument("pass --config <path> to point at a run configuration".into())
    })?;
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(msl) = cli.msl {
        cfg.msl = msl;
    }
    if let Some(mode) = cli.mode {
        cfg.mode = mode.into();
    }
    if let Some(lambda) = cli.lambda_c {
        cfg.predictor.hyper.lambda_c = lambda;
    }
    if let Some(calibration) = cli.calibration {
        cfg.calibration = calibration.into();
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    let hash = cfg.config_hash();
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    match cli.command {
        Command::Synth => cmd_synth(&cfg, &hash),
        Command::Train => cmd_train(&cfg, &hash),
        Command::Calibrate => cmd_calibrate(&cfg, &hash),
        Command::Fit => cmd_fit(&cfg, &hash),
        Command::Eval => cmd_eval(&cfg, &hash),
        Command::Inspect => cmd_inspect(&cfg, &hash),
        Command::Sweep { kind } => cmd_sweep(&cfg, &hash, kind),
    }
}

// ---------------------------------------------------------------------------
// Artifact plumbing
// ---------------------------------------------------------------------------

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

/// Writes a JSON artifact: `fields` plus the provenance pair. Keys serialize
/// sorted, floats in shortest round-trip form, so identical inputs produce
/// identical bytes.
fn write_artifact(
    path: &Path,
    hash: &str,
    seed: u64,
    fields: &[(&str, Value)],
) -> Result<()> {
    let mut map = Map::new();
    map.insert("config_hash".into(), hash.into());
    map.insert("seed".into(), seed.into());
    for (key, value) in fields {
        map.insert((*key).to_string(), value.clone());
    }
    let text = serde_json::to_string_pretty(&Value::Object(map)).expect("artifact serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Reads a JSON artifact and verifies its embedded config hash.
fn read_artifact(path: &Path, hash: &str, produced_by: &str) -> Result<Map<String, Value>> {
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "missing artifact {}: run `mcbm {produced_by}` first",
            path.display()
        )));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let map = value
        .as_object()
        .cloned()
        .ok_or_else(|| Error::parse(path, "artifact is not a JSON object"))?;
    let found = map
        .get("config_hash")
        .and_then(Value::as_str)
        .unwrap_or("<absent>");
    if found != hash {
        return Err(Error::InvalidArgument(format!(
            "{} was produced by config {found}, but the current resolved config hashes to \
             {hash}; rerun the upstream stages (or rerun with the same flag overrides)",
            path.display()
        )));
    }
    Ok(map)
}

fn field<T: DeserializeOwned>(map: &Map<String, Value>, key: &str, path: &Path) -> Result<T> {
    let value = map
        .get(key)
        .cloned()
        .ok_or_else(|| Error::parse(path, format!("missing field '{key}'")))?;
    serde_json::from_value(value).map_err(|e| Error::parse(path, format!("field '{key}': {e}")))
}

fn write_text_artifact(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Verifies the `# mcbm dataset config_hash=...` comment of a generated CSV.
fn check_csv_provenance(path: &Path, hash: &str) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    std::io::BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    let found = first
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix("config_hash="))
        .unwrap_or("<absent>");
    if found != hash {
        return Err(Error::InvalidArgument(format!(
            "{} was produced by config {found}, but the current resolved config hashes to \
             {hash}; rerun `mcbm synth`",
            path.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared stages
// ---------------------------------------------------------------------------

fn load_configured_dataset(cfg: &RunConfig, hash: &str) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { .. } => {
            let csv = out_path(cfg, "dataset.csv");
            let schema_path = out_path(cfg, "schema.json");
            if !csv.exists() {
                return Err(Error::InvalidArgument(format!(
                    "missing artifact {}: run `mcbm synth` first",
                    csv.display()
                )));
            }
            check_csv_provenance(&csv, hash)?;
            let map = read_artifact(&schema_path, hash, "synth")?;
            let schema: ConceptSchema = field(&map, "schema", &schema_path)?;
            schema.validate()?;
            load_dataset_with_schema(&csv, schema)
        }
        DatasetConfig::Files { csv, schema, .. } => load_dataset(csv, schema),
    }
}

fn load_splits(cfg: &RunConfig, hash: &str) -> Result<(Dataset, Dataset, Dataset)> {
    let ds = load_configured_dataset(cfg, hash)?;
    split_dataset(&ds, cfg.fractions_tuple(), cfg.seed)
}

/// Builds the probability source a fit or evaluation uses: either the
/// configured external probability CSV, or the trained predictor plus its
/// calibration artifact. Returns the source and the references recorded in
/// the model bundle.
fn resolve_source(
    cfg: &RunConfig,
    hash: &str,
    schema: &ConceptSchema,
) -> Result<(ProbabilitySource, String, Option<String>)> {
    if let DatasetConfig::Files {
        probabilities: Some(probs),
        ..
    } = &cfg.dataset
    {
        let rows = read_probability_csv(probs, schema)?;
        return Ok((
            ProbabilitySource::from_file_rows(rows, cfg.mode),
            probs.display().to_string(),
            None,
        ));
    }
    let predictor_path = out_path(cfg, "predictor.json");
    let map = read_artifact(&predictor_path, hash, "train")?;
    let bundle_value: Value = field(&map, "predictor", &predictor_path)?;
    // Round-trip through the bundle parser so its structural validation runs.
    let bundle = PredictorBundle::from_json(&bundle_value.to_string())
        .map_err(|e| Error::parse(&predictor_path, e.to_string()))?;
    let (calibration, calibration_ref) = match cfg.calibration {
        CalibrationChoice::None => (CalibrationParams::identity(), None),
        CalibrationChoice::PlattTemp => {
            let path = out_path(cfg, "calibration.json");
            let map = read_artifact(&path, hash, "calibrate")?;
            (
                field::<CalibrationParams>(&map, "calibration", &path)?,
                Some("calibration.json".to_string()),
            )
        }
    };
    Ok((
        ProbabilitySource::from_model(bundle, calibration, cfg.mode),
        "predictor.json".to_string(),
        calibration_ref,
    ))
}

fn load_model(cfg: &RunConfig, hash: &str, source: ProbabilitySource) -> Result<McbmModel> {
    let path = out_path(cfg, "mcbm.json");
    let map = read_artifact(&path, hash, "fit")?;
    let bundle: McbmBundle = field(&map, "mcbm", &path)?;
    bundle
        .into_model(source)
        .map_err(|e| Error::parse(&path, e.to_string()))
}

/// A baseline stripped to what the artifact needs; the probability source is
/// re-resolved at load time.
#[derive(Serialize, Deserialize)]
struct StoredBaseline {
    variant: BaselineVariant,
    schema_fingerprint: u64,
    tree: DecisionTree,
}

fn load_baselines(
    cfg: &RunConfig,
    hash: &str,
    source: &ProbabilitySource,
) -> Result<Vec<BaselineModel>> {
    let path = out_path(cfg, "baselines.json");
    let map = read_artifact(&path, hash, "fit")?;
    let stored: Vec<StoredBaseline> = field(&map, "baselines", &path)?;
    Ok(stored
        .into_iter()
        .map(|b| BaselineModel {
            variant: b.variant,
            tree: b.tree,
            source: source.clone(),
            concept_mode: cfg.concept_mode,
            schema_fingerprint: b.schema_fingerprint,
        })
        .collect())
}

fn baseline(baselines: &[BaselineModel], variant: BaselineVariant) -> Result<&BaselineModel> {
    baselines
        .iter()
        .find(|b| b.variant == variant)
        .ok_or_else(|| Error::InvalidArgument(format!("baselines.json lacks variant {variant}")))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_synth(cfg: &RunConfig, hash: &str) -> Result<()> {
    let spec = match &cfg.dataset {
        DatasetConfig::Synthetic { spec } => spec,
        DatasetConfig::Files { csv, .. } => {
            return Err(Error::InvalidArgument(format!(
                "dataset kind is files ({}); synth only applies to synthetic configs",
                csv.display()
            )));
        }
    };
    let ds = generate_synthetic(spec)?;
    let csv_path = out_path(cfg, "dataset.csv");
    let schema_path = out_path(cfg, "schema.json");
    write_dataset(&ds, &csv_path, &schema_path)?;
    // Re-wrap the schema with provenance and stamp the CSV with a comment
    // line the loader skips.
    write_artifact(
        &schema_path,
        hash,
        cfg.seed,
        &[("schema", serde_json::to_value(&ds.schema).expect("schema serializes"))],
    )?;
    let body = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    fs::write(
        &csv_path,
        format!("# mcbm dataset config_hash={hash} seed={}\n{body}", cfg.seed),
    )
    .map_err(|e| Error::io(&csv_path, e))?;
    println!("wrote {} ({} samples)", csv_path.display(), ds.n());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, hash: &str) -> Result<()> {
    if let DatasetConfig::Files {
        probabilities: Some(probs),
        ..
    } = &cfg.dataset
    {
        return Err(Error::InvalidArgument(format!(
            "config supplies external probabilities ({}); train is not needed",
            probs.display()
        )));
    }
    let (train, _, _) = load_splits(cfg, hash)?;
    let bundle = match cfg.mode {
        Mode::Seq => PredictorBundle {
            params: train_independent(&train, &cfg.predictor.arch, &cfg.predictor.hyper)?,
            head: None,
        },
        Mode::Joint => {
            let (params, head) = train_joint(&train, &cfg.predictor.arch, &cfg.predictor.hyper)?;
            PredictorBundle {
                params,
                head: Some(head),
            }
        }
    };
    write_artifact(
        &out_path(cfg, "predictor.json"),
        hash,
        cfg.seed,
        &[
            ("mode", serde_json::to_value(cfg.mode).expect("mode serializes")),
            ("predictor", serde_json::to_value(&bundle).expect("predictor serializes")),
        ],
    )
}

fn cmd_calibrate(cfg: &RunConfig, hash: &str) -> Result<()> {
    if let DatasetConfig::Files {
        probabilities: Some(probs),
        ..
    } = &cfg.dataset
    {
        return Err(Error::InvalidArgument(format!(
            "external probability files ({}) are used as-is; there is nothing to calibrate",
            probs.display()
        )));
    }
    let predictor_path = out_path(cfg, "predictor.json");
    let map = read_artifact(&predictor_path, hash, "train")?;
    let bundle_value: Value = field(&map, "predictor", &predictor_path)?;
    let bundle = PredictorBundle::from_json(&bundle_value.to_string())
        .map_err(|e| Error::parse(&predictor_path, e.to_string()))?;
    let params = match cfg.calibration {
        CalibrationChoice::None => CalibrationParams::identity(),
        CalibrationChoice::PlattTemp => {
            let (_, calib, _) = load_splits(cfg, hash)?;
            if calib.n() == 0 {
                return Err(Error::InvalidArgument(
                    "calibration is enabled but the calibration split is empty".into(),
                ));
            }
            mcbm::fit_calibration(&bundle.params, &calib)?
        }
    };
    write_artifact(
        &out_path(cfg, "calibration.json"),
        hash,
        cfg.seed,
        &[
            ("method", Value::String(cfg.calibration.to_string())),
            ("calibration", serde_json::to_value(&params).expect("calibration serializes")),
        ],
    )
}

fn cmd_fit(cfg: &RunConfig, hash: &str) -> Result<()> {
    let (train, _, _) = load_splits(cfg, hash)?;
    let (source, prob_ref, calibration_ref) = resolve_source(cfg, hash, &train.schema)?;
    let model = fit_mcbm(
        &train,
        source.clone(),
        cfg.msl,
        cfg.mode,
        cfg.concept_mode,
    )?;
    let bundle = model.to_bundle(&prob_ref, calibration_ref);
    write_artifact(
        &out_path(cfg, "mcbm.json"),
        hash,
        cfg.seed,
        &[("mcbm", serde_json::to_value(&bundle).expect("model serializes"))],
    )?;
    let stored: Vec<StoredBaseline> = [
        BaselineVariant::Hard,
        BaselineVariant::Independent,
        BaselineVariant::SequentialSoft,
    ]
    .into_iter()
    .map(|variant| {
        fit_baseline(&train, source.clone(), cfg.msl, variant, cfg.concept_mode).map(|b| {
            StoredBaseline {
                variant: b.variant,
                schema_fingerprint: b.schema_fingerprint,
                tree: b.tree,
            }
        })
    })
    .collect::<Result<_>>()?;
    write_artifact(
        &out_path(cfg, "baselines.json"),
        hash,
        cfg.seed,
        &[("baselines", serde_json::to_value(&stored).expect("baselines serialize"))],
    )?;
    println!(
        "fitted: {} global nodes, {} extended of {} leaves, {} bits total leakage",
        model.global.n_nodes(),
        model.subtrees.len(),
        model.global.n_leaves(),
        model_leakage_bits(&model)
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, hash: &str) -> Result<()> {
    let (_, _, test) = load_splits(cfg, hash)?;
    let (source, _, _) = resolve_source(cfg, hash, &test.schema)?;
    let model = load_model(cfg, hash, source.clone())?;
    let baselines = load_baselines(cfg, hash, &source)?;
    let metrics = ExperimentMetrics {
        mcbm: standard_metrics(ModelRef::Mcbm(&model), &test)?,
        hard: standard_metrics(
            ModelRef::Baseline(baseline(&baselines, BaselineVariant::Hard)?),
            &test,
        )?,
        independent: standard_metrics(
            ModelRef::Baseline(baseline(&baselines, BaselineVariant::Independent)?),
            &test,
        )?,
        sequential_soft: standard_metrics(
            ModelRef::Baseline(baseline(&baselines, BaselineVariant::SequentialSoft)?),
            &test,
        )?,
        total_leakage_bits: model_leakage_bits(&model),
    };
    write_artifact(
        &out_path(cfg, "metrics.json"),
        hash,
        cfg.seed,
        &[("metrics", serde_json::to_value(metrics).expect("metrics serialize"))],
    )?;
    println!(
        "task accuracy  mcbm={:.4}  hard={:.4}  independent={:.4}  sequential_soft={:.4}",
        metrics.mcbm.task_accuracy,
        metrics.hard.task_accuracy,
        metrics.independent.task_accuracy,
        metrics.sequential_soft.task_accuracy,
    );
    println!("total leakage: {} bits", metrics.total_leakage_bits);
    Ok(())
}

fn cmd_inspect(cfg: &RunConfig, hash: &str) -> Result<()> {
    let (train, _, test) = load_splits(cfg, hash)?;
    let (source, _, _) = resolve_source(cfg, hash, &train.schema)?;
    let model = load_model(cfg, hash, source)?;
    let report = path_report(&model, &train, &test)?;
    write_artifact(
        &out_path(cfg, "report.json"),
        hash,
        cfg.seed,
        &[("report", serde_json::to_value(&report).expect("report serializes"))],
    )?;
    write_text_artifact(
        &out_path(cfg, "report.txt"),
        &format!(
            "# mcbm report config_hash={hash} seed={}\n\n{}",
            cfg.seed,
            report.render_text()
        ),
    )?;
    let mut annotations = BTreeMap::new();
    for row in &report.rows {
        let label = if row.leaky_splits.is_empty() {
            "no extension".to_string()
        } else {
            format!("extension: +{:.6} bits", row.leakage_bits)
        };
        annotations.insert(row.path_id, label);
    }
    let prefix = format!("// mcbm config_hash={hash} seed={}\n", cfg.seed);
    write_text_artifact(
        &out_path(cfg, "global_tree.dot"),
        &format!("{prefix}{}", export_dot(&model.global, &annotations)),
    )?;
    write_text_artifact(
        &out_path(cfg, "merged_tree.dot"),
        &format!("{prefix}{}", export_dot(&model.merge(), &BTreeMap::new())),
    )?;
    println!(
        "leakage: {} bits over {} extended of {} paths",
        report.totals.total_leakage_bits, report.totals.n_extended_paths, report.totals.n_paths
    );
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, hash: &str, kind: SweepKind) -> Result<()> {
    let completeness = matches!(kind, SweepKind::Completeness | SweepKind::All);
    let msl = matches!(kind, SweepKind::Msl | SweepKind::All);
    if completeness {
        match &cfg.dataset {
            DatasetConfig::Synthetic { spec } => run_completeness_sweep(cfg, hash, spec)?,
            DatasetConfig::Files { .. } if kind == SweepKind::All => {
                println!("skipping completeness sweep: dataset is file-based");
            }
            DatasetConfig::Files { .. } => {
                return Err(Error::InvalidArgument(
                    "the completeness sweep regenerates data and needs a synthetic dataset config"
                        .into(),
                ));
            }
        }
    }
    if msl {
        run_msl_sweep(cfg, hash)?;
    }
    Ok(())
}

fn run_completeness_sweep(cfg: &RunConfig, hash: &str, spec: &mcbm::SynthSpec) -> Result<()> {
    let levels: Vec<usize> = cfg
        .sweep
        .completeness_levels
        .clone()
        .unwrap_or_else(|| (1..=spec.n_factors).collect());
    let seeds: Vec<u64> = cfg
        .sweep
        .completeness_seeds
        .clone()
        .unwrap_or_else(|| (cfg.seed..cfg.seed + 5).collect());
    let sweep = completeness_sweep(
        spec,
        &levels,
        &seeds,
        cfg.fractions_tuple(),
        &cfg.settings(),
    )?;
    write_completeness_csvs(cfg, hash, &sweep)?;
    match sweep.spearman_level_vs_mean {
        Some(rho) => println!("completeness sweep: spearman(level, mean leakage) = {rho}"),
        None => println!("completeness sweep: spearman undefined (constant sequence)"),
    }
    Ok(())
}

fn write_completeness_csvs(cfg: &RunConfig, hash: &str, sweep: &CompletenessSweep) -> Result<()> {
    let mut points = format!(
        "# mcbm sweep config_hash={hash} seed={}\nlevel,seed,total_bits\n",
        cfg.seed
    );
    for p in &sweep.points {
        points.push_str(&format!("{},{},{}\n", p.level, p.seed, p.total_bits));
    }
    write_text_artifact(&out_path(cfg, "sweep_completeness.csv"), &points)?;

    let spearman = sweep
        .spearman_level_vs_mean
        .map(|r| r.to_string())
        .unwrap_or_else(|| "NA".into());
    let mut summary = format!(
        "# mcbm sweep config_hash={hash} seed={}\n# spearman_level_vs_mean={spearman}\n\
         level,mean_bits,std_bits\n",
        cfg.seed
    );
    for s in &sweep.levels {
        summary.push_str(&format!("{},{},{}\n", s.level, s.mean_bits, s.std_bits));
    }
    write_text_artifact(&out_path(cfg, "sweep_completeness_summary.csv"), &summary)
}

fn run_msl_sweep(cfg: &RunConfig, hash: &str) -> Result<()> {
    let msls: Vec<usize> = cfg
        .sweep
        .msl_values
        .clone()
        .unwrap_or_else(|| vec![5, 10, 20, 30, 50]);
    let (train, calib, test) = load_splits(cfg, hash)?;
    let points = msl_sweep(&train, &calib, &test, &cfg.settings(), &msls)?;
    write_msl_csv(cfg, hash, &points)?;
    println!("msl sweep: {} rows", points.len());
    Ok(())
}

fn write_msl_csv(cfg: &RunConfig, hash: &str, points: &[MslPoint]) -> Result<()> {
    let mut text = format!(
        "# mcbm sweep config_hash={hash} seed={}\nmsl,global_nodes,global_leaves,merged_nodes,\
         merged_leaves,n_subtrees,total_leakage_bits,train_accuracy,test_accuracy,\
         hard_test_accuracy\n",
        cfg.seed
    );
    for p in points {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            p.msl,
            p.global_nodes,
            p.global_leaves,
            p.merged_nodes,
            p.merged_leaves,
            p.n_subtrees,
            p.total_leakage_bits,
            p.train_accuracy,
            p.test_accuracy,
            p.hard_test_accuracy
        ));
    }
    write_text_artifact(&out_path(cfg, "sweep_msl.csv"), &text)
}
