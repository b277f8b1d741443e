//! Probability sources: where soft concept values come from.
//!
//! A source is either a trained predictor (optionally calibrated) or a file
//! of precomputed probabilities keyed by sample id — the latter lets
//! encoders trained elsewhere feed the pipeline. Every source carries a mode
//! tag: sequential sources emit calibrated probabilities, joint sources emit
//! the jointly fine-tuned predictor's raw probabilities (never calibrated).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{apply_calibration, CalibrationParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mlp::{self, PredictorBundle};
use crate::schema::ConceptSchema;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Seq,
    Joint,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Seq => write!(f, "seq"),
            Mode::Joint => write!(f, "joint"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SourceKind {
    Model {
        bundle: PredictorBundle,
        calibration: CalibrationParams,
    },
    /// Probability rows keyed by sample id.
    File { rows: BTreeMap<u64, Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilitySource {
    pub kind: SourceKind,
    pub mode: Mode,
}

const GROUP_SUM_TOL: f64 = 1e-9;

fn validate_prob_row(row: &[f64], schema: &ConceptSchema, id: u64) -> Result<()> {
    if row.len() != schema.k() {
        return Err(Error::Dataset(format!(
            "probability row for sample {id} has {} values, schema needs {}",
            row.len(),
            schema.k()
        )));
    }
    for (j, &p) in row.iter().enumerate() {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::Dataset(format!(
                "probability {p} for concept '{}' of sample {id} out of [0,1]",
                schema.concepts[j]
            )));
        }
    }
    for (gi, group) in schema.groups.iter().enumerate() {
        let sum: f64 = group.iter().map(|&j| row[j]).sum();
        if (sum - 1.0).abs() > GROUP_SUM_TOL {
            return Err(Error::Dataset(format!(
                "group {gi} of sample {id} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

impl ProbabilitySource {
    pub fn from_model(bundle: PredictorBundle, calibration: CalibrationParams, mode: Mode) -> Self {
        assert!(
            mode == Mode::Seq || calibration.is_identity(),
            "joint sources are never calibrated"
        );
        ProbabilitySource {
            kind: SourceKind::Model {
                bundle,
                calibration,
            },
            mode,
        }
    }

    pub fn from_file_rows(rows: BTreeMap<u64, Vec<f64>>, mode: Mode) -> Self {
        ProbabilitySource {
            kind: SourceKind::File { rows },
            mode,
        }
    }

    /// Errors unless the source's mode matches the requested one.
    pub fn check_mode(&self, requested: Mode) -> Result<()> {
        if self.mode != requested {
            return Err(Error::ModeMismatch {
                requested: requested.to_string(),
                actual: self.mode.to_string(),
            });
        }
        Ok(())
    }

    /// Soft concept probabilities for the given rows (n x k). Model sources
    /// run the predictor (and, in seq mode, its calibration); file sources
    /// look sample ids up.
    pub fn predict_probs(&self, x: &Matrix, ids: &[u64], schema: &ConceptSchema) -> Result<Matrix> {
        assert_eq!(x.rows(), ids.len(), "one id per feature row");
        match &self.kind {
            SourceKind::Model {
                bundle,
                calibration,
            } => {
                if bundle.params.output_dim() != schema.k() {
                    return Err(Error::SchemaMismatch(format!(
                        "the predictor emits {} concepts but the schema declares {}",
                        bundle.params.output_dim(),
                        schema.k()
                    )));
                }
                if bundle.params.schema_fingerprint != schema.fingerprint() {
                    return Err(Error::SchemaMismatch(
                        "the predictor was trained against a different concept schema".into(),
                    ));
                }
                let logits = bundle.params.logits(x);
                let rows: Vec<Vec<f64>> = (0..x.rows())
                    .map(|i| apply_calibration(calibration, logits.row(i), schema))
                    .collect();
                let probs = Matrix::from_rows(&rows);
                for (i, &id) in ids.iter().enumerate() {
                    validate_prob_row(probs.row(i), schema, id)?;
                }
                Ok(probs)
            }
            SourceKind::File { rows } => {
                let mut out = Vec::with_capacity(ids.len());
                for &id in ids {
                    let row = rows.get(&id).ok_or(Error::MissingSampleId(id))?;
                    validate_prob_row(row, schema, id)?;
                    out.push(row.clone());
                }
                Ok(Matrix::from_rows(&out))
            }
        }
    }

    /// Pre-activation logits. Model sources return the raw network outputs;
    /// file sources derive logits from the stored probabilities (logit for
    /// independents, log for group members; softmax recovers the row).
    pub fn predict_logits(&self, x: &Matrix, ids: &[u64], schema: &ConceptSchema) -> Result<Matrix> {
        match &self.kind {
            SourceKind::Model { bundle, .. } => {
                if bundle.params.output_dim() != schema.k() {
                    return Err(Error::SchemaMismatch(format!(
                        "the predictor emits {} concepts but the schema declares {}",
                        bundle.params.output_dim(),
                        schema.k()
                    )));
                }
                Ok(bundle.params.logits(x))
            }
            SourceKind::File { rows } => {
                let mut out = Vec::with_capacity(ids.len());
                for &id in ids {
                    let row = rows.get(&id).ok_or(Error::MissingSampleId(id))?;
                    validate_prob_row(row, schema, id)?;
                    let mut logits = vec![0.0; row.len()];
                    for &j in &schema.independents {
                        let p = row[j].clamp(mlp::PROB_CLAMP, 1.0 - mlp::PROB_CLAMP);
                        logits[j] = (p / (1.0 - p)).ln();
                    }
                    for group in &schema.groups {
                        for &j in group {
                            logits[j] = row[j].max(mlp::PROB_CLAMP).ln();
                        }
                    }
                    out.push(logits);
                }
                Ok(Matrix::from_rows(&out))
            }
        }
    }
}

/// Writes a probability CSV: header `sample_id` plus one column per concept.
pub fn write_probability_csv(
    path: impl AsRef<Path>,
    ids: &[u64],
    probs: &Matrix,
    schema: &ConceptSchema,
) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(probs.rows(), ids.len());
    assert_eq!(probs.cols(), schema.k());
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string()];
    header.extend(schema.concepts.iter().cloned());
    writer
        .write_record(&header)
        .map_err(|e| Error::parse(path, format!("write header: {e}")))?;
    for (i, &id) in ids.iter().enumerate() {
        let mut record = vec![id.to_string()];
        record.extend(probs.row(i).iter().map(|v| format!("{v}")));
        writer
            .write_record(&record)
            .map_err(|e| Error::parse(path, format!("write row {i}: {e}")))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::parse(path, format!("flush: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a probability CSV written by `write_probability_csv` (or supplied
/// externally with the same layout). Rows are validated against the schema.
pub fn read_probability_csv(
    path: impl AsRef<Path>,
    schema: &ConceptSchema,
) -> Result<BTreeMap<u64, Vec<f64>>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::parse(path, format!("open: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, format!("read header: {e}")))?
        .clone();
    let mut expected = vec!["sample_id".to_string()];
    expected.extend(schema.concepts.iter().cloned());
    let got: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    if got != expected {
        return Err(Error::Schema(format!(
            "probability file header {:?} does not match the schema's {:?}",
            got, expected
        )));
    }
    let mut rows = BTreeMap::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, format!("row {row_idx}: {e}")))?;
        let id: u64 = record[0].parse().map_err(|_| Error::Row {
            row: row_idx,
            message: format!("sample_id '{}' is not an unsigned integer", &record[0]),
        })?;
        let mut probs = Vec::with_capacity(schema.k());
        for j in 0..schema.k() {
            let v: f64 = record[j + 1].parse().map_err(|_| Error::Row {
                row: row_idx,
                message: format!(
                    "probability '{}' for concept '{}' is not a number",
                    &record[j + 1],
                    schema.concepts[j]
                ),
            })?;
            probs.push(v);
        }
        validate_prob_row(&probs, schema, id)?;
        if rows.insert(id, probs).is_some() {
            return Err(Error::Row {
                row: row_idx,
                message: format!("duplicate sample_id {id}"),
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!(
            "probability file {} holds no rows",
            path.display()
        )));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{init_params, probs_from_logits, MlpArch};
    use rand::Rng;

    fn schema_mixed() -> ConceptSchema {
        ConceptSchema::new(
            vec!["i0".into(), "g0".into(), "g1".into(), "g2".into()],
            vec![vec![1, 2, 3]],
            vec![0],
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn model_source_emits_valid_rows_and_respects_mode() {
        let schema = schema_mixed();
        let params = init_params(3, &schema, &MlpArch::default(), 5);
        let src = ProbabilitySource::from_model(
            PredictorBundle {
                params,
                head: None,
            },
            CalibrationParams::identity(),
            Mode::Seq,
        );
        assert!(src.check_mode(Mode::Seq).is_ok());
        let err = src.check_mode(Mode::Joint).unwrap_err();
        assert!(err.to_string().contains("joint"));

        let mut rng = crate::rng::substream(2, "test.source");
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let x = Matrix::from_rows(&rows);
        let ids: Vec<u64> = (0..1000).collect();
        let probs = src.predict_probs(&x, &ids, &schema).unwrap();
        for i in 0..probs.rows() {
            let row = probs.row(i);
            let sum: f64 = row[1..4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "group sum {sum}");
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn schema_fingerprint_mismatch_is_rejected() {
        let schema = schema_mixed();
        let other = ConceptSchema::new(
            vec!["i0".into(), "g0".into(), "g1".into(), "g2".into()],
            vec![vec![1, 2, 3]],
            vec![0],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let params = init_params(3, &other, &MlpArch::default(), 5);
        let src = ProbabilitySource::from_model(
            PredictorBundle { params, head: None },
            CalibrationParams::identity(),
            Mode::Seq,
        );
        let x = Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]);
        let err = src.predict_probs(&x, &[0], &schema).unwrap_err();
        assert!(matches!(err, Error::SchemaMismatch(_)));
    }

    #[test]
    fn probability_csv_round_trips_within_1e12() {
        let schema = schema_mixed();
        let params = init_params(2, &schema, &MlpArch::default(), 9);
        let src = ProbabilitySource::from_model(
            PredictorBundle { params, head: None },
            CalibrationParams::identity(),
            Mode::Seq,
        );
        let mut rng = crate::rng::substream(3, "test.csv");
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let x = Matrix::from_rows(&rows);
        let ids: Vec<u64> = (0..50).map(|i| i * 3 + 7).collect();
        let probs = src.predict_probs(&x, &ids, &schema).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probs.csv");
        write_probability_csv(&path, &ids, &probs, &schema).unwrap();
        let loaded = read_probability_csv(&path, &schema).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            let original = probs.row(i);
            let back = &loaded[&id];
            for (a, b) in original.iter().zip(back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn file_source_reports_missing_ids_and_derives_logits() {
        let schema = schema_mixed();
        let mut rows = BTreeMap::new();
        rows.insert(10u64, vec![0.8, 0.5, 0.25, 0.25]);
        let src = ProbabilitySource::from_file_rows(rows, Mode::Seq);
        let x = Matrix::from_rows(&[vec![0.0], vec![0.0]]);
        let err = src
            .predict_probs(&x, &[10, 11], &schema)
            .unwrap_err();
        assert!(matches!(err, Error::MissingSampleId(11)));

        let x1 = Matrix::from_rows(&[vec![0.0]]);
        let logits = src.predict_logits(&x1, &[10], &schema).unwrap();
        let p = probs_from_logits(logits.row(0), &schema);
        let expected = [0.8, 0.5, 0.25, 0.25];
        for (a, b) in p.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "recovered {a} vs stored {b}");
        }
    }

    #[test]
    fn invalid_probability_rows_are_rejected() {
        let schema = schema_mixed();
        let mut rows = BTreeMap::new();
        rows.insert(0u64, vec![0.5, 0.6, 0.6, 0.1]);
        let src = ProbabilitySource::from_file_rows(rows, Mode::Seq);
        let x = Matrix::from_rows(&[vec![0.0]]);
        let err = src.predict_probs(&x, &[0], &schema).unwrap_err();
        assert!(err.to_string().contains("sums to"));

        let mut rows = BTreeMap::new();
        rows.insert(0u64, vec![1.5, 1.0, 0.0, 0.0]);
        let src = ProbabilitySource::from_file_rows(rows, Mode::Seq);
        let err = src.predict_probs(&x, &[0], &schema).unwrap_err();
        assert!(err.to_string().contains("out of [0,1]"));
    }
}
