//! Datasets: feature matrix, binary concept annotations, labels, and CSV I/O.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::substream;
use crate::schema::ConceptSchema;

/// A fully annotated dataset.
///
/// `c` is an `n x k` matrix holding only 0.0/1.0; every group block of a row
/// is exactly one-hot. `ids` are stable sample identifiers that survive
/// splitting, so externally supplied probability files stay aligned with the
/// rows they describe.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub c: Matrix,
    pub y: Vec<usize>,
    pub ids: Vec<u64>,
    pub schema: ConceptSchema,
}

impl Dataset {
    pub fn new(
        x: Matrix,
        c: Matrix,
        y: Vec<usize>,
        ids: Vec<u64>,
        schema: ConceptSchema,
    ) -> Result<Self> {
        schema.validate()?;
        let n = x.rows();
        if c.rows() != n || y.len() != n || ids.len() != n {
            return Err(Error::Dataset(format!(
                "row counts disagree: x={}, c={}, y={}, ids={}",
                n,
                c.rows(),
                y.len(),
                ids.len()
            )));
        }
        if n == 0 {
            return Err(Error::Dataset("dataset has no rows".into()));
        }
        if c.cols() != schema.k() {
            return Err(Error::Dataset(format!(
                "concept matrix has {} columns but the schema declares {}",
                c.cols(),
                schema.k()
            )));
        }
        for (i, &v) in x.data().iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Row {
                    row: i / x.cols().max(1),
                    message: format!("feature x_{} is not finite", i % x.cols().max(1)),
                });
            }
        }
        let ds = Dataset {
            x,
            c,
            y,
            ids,
            schema,
        };
        ds.validate_annotations()?;
        let mut seen = std::collections::BTreeSet::new();
        for &id in &ds.ids {
            if !seen.insert(id) {
                return Err(Error::Dataset(format!("duplicate sample id {id}")));
            }
        }
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    fn validate_annotations(&self) -> Result<()> {
        let r = self.schema.n_classes();
        for (row, &label) in self.y.iter().enumerate() {
            if label >= r {
                return Err(Error::Row {
                    row,
                    message: format!("label index {label} out of range for {r} classes"),
                });
            }
        }
        for row in 0..self.c.rows() {
            let vals = self.c.row(row);
            for (j, &v) in vals.iter().enumerate() {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Row {
                        row,
                        message: format!(
                            "concept '{}' must be 0 or 1, got {v}",
                            self.schema.concepts[j]
                        ),
                    });
                }
            }
            for (g, members) in self.schema.groups.iter().enumerate() {
                let active: usize = members.iter().map(|&j| vals[j] as usize).sum();
                if active != 1 {
                    return Err(Error::Row {
                        row,
                        message: format!(
                            "group {g} must be one-hot, found {active} active concept(s)"
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// New dataset from a subset of rows (ids carried along).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            c: self.c.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            schema: self.schema.clone(),
        }
    }
}

/// Column header for feature `j`.
fn feature_header(j: usize) -> String {
    format!("x_{j}")
}

/// Loads a dataset from `csv_path` with its schema at `schema_path`.
///
/// Expected header: `x_0..x_{d-1}`, then the schema's concept names in
/// order, then `y`. Concept cells must be the literal `0` or `1`; the label
/// cell holds a class name from the schema.
pub fn load_dataset(csv_path: impl AsRef<Path>, schema_path: impl AsRef<Path>) -> Result<Dataset> {
    let schema = ConceptSchema::load(schema_path)?;
    load_dataset_with_schema(csv_path, schema)
}

/// Like [`load_dataset`], for callers that already hold the schema (for
/// example because it lives inside a larger metadata file).
pub fn load_dataset_with_schema(
    csv_path: impl AsRef<Path>,
    schema: ConceptSchema,
) -> Result<Dataset> {
    let csv_path = csv_path.as_ref();
    let k = schema.k();

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(csv_path)
        .map_err(|e| Error::parse(csv_path, e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(csv_path, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();

    if headers.len() < k + 2 {
        return Err(Error::parse(
            csv_path,
            format!(
                "expected at least {} columns (features, {} concepts, y), found {}",
                k + 2,
                k,
                headers.len()
            ),
        ));
    }
    let d = headers.len() - k - 1;
    for (j, header) in headers.iter().take(d).enumerate() {
        if *header != feature_header(j) {
            return Err(Error::parse(
                csv_path,
                format!(
                    "column {} should be '{}', found '{}'",
                    j,
                    feature_header(j),
                    header
                ),
            ));
        }
    }
    for (j, name) in schema.concepts.iter().enumerate() {
        if &headers[d + j] != name {
            return Err(Error::parse(
                csv_path,
                format!(
                    "column {} should be concept '{}', found '{}'",
                    d + j,
                    name,
                    headers[d + j]
                ),
            ));
        }
    }
    if headers[d + k] != "y" {
        return Err(Error::parse(
            csv_path,
            format!("last column should be 'y', found '{}'", headers[d + k]),
        ));
    }

    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    let mut c_rows: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(csv_path, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(Error::Row {
                row,
                message: format!("expected {} cells, found {}", headers.len(), record.len()),
            });
        }
        let mut xr = Vec::with_capacity(d);
        for j in 0..d {
            let cell = record[j].trim();
            let v: f64 = cell.parse().map_err(|_| Error::Row {
                row,
                message: format!("feature '{}' is not a number: '{cell}'", feature_header(j)),
            })?;
            if !v.is_finite() {
                return Err(Error::Row {
                    row,
                    message: format!("feature '{}' is not finite", feature_header(j)),
                });
            }
            xr.push(v);
        }
        let mut cr = Vec::with_capacity(k);
        for j in 0..k {
            let cell = record[d + j].trim();
            let v = match cell {
                "0" => 0.0,
                "1" => 1.0,
                other => {
                    return Err(Error::Row {
                        row,
                        message: format!(
                            "concept '{}' must be 0 or 1, got '{other}'",
                            schema.concepts[j]
                        ),
                    })
                }
            };
            cr.push(v);
        }
        let label_cell = record[d + k].trim();
        let label = schema.class_index(label_cell).ok_or_else(|| Error::Row {
            row,
            message: format!("unknown class label '{label_cell}'"),
        })?;
        x_rows.push(xr);
        c_rows.push(cr);
        y.push(label);
    }

    if x_rows.is_empty() {
        return Err(Error::parse(csv_path, "dataset has no rows"));
    }
    let n = x_rows.len();
    let ids = (0..n as u64).collect();
    Dataset::new(
        Matrix::from_rows(&x_rows),
        Matrix::from_rows(&c_rows),
        y,
        ids,
        schema,
    )
}

/// Writes `dataset.csv`-style output plus the schema JSON.
///
/// Floats are written in shortest round-trip form, so load(write(ds))
/// reproduces the matrices exactly. Sample ids are not persisted; loading
/// assigns fresh row-order ids.
pub fn write_dataset(
    ds: &Dataset,
    csv_path: impl AsRef<Path>,
    schema_path: impl AsRef<Path>,
) -> Result<()> {
    let csv_path = csv_path.as_ref();
    ds.schema.save(schema_path)?;

    let mut writer = csv::Writer::from_path(csv_path).map_err(|e| {
        Error::parse(csv_path, e.to_string())
    })?;
    let mut header: Vec<String> = (0..ds.d()).map(feature_header).collect();
    header.extend(ds.schema.concepts.iter().cloned());
    header.push("y".into());
    writer
        .write_record(&header)
        .map_err(|e| Error::parse(csv_path, e.to_string()))?;

    for i in 0..ds.n() {
        let mut record: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v}")).collect();
        record.extend(ds.c.row(i).iter().map(|&v| format!("{}", v as u8)));
        record.push(ds.schema.classes[ds.y[i]].clone());
        writer
            .write_record(&record)
            .map_err(|e| Error::parse(csv_path, e.to_string()))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(csv_path, e))?;
    Ok(())
}

/// Seed-deterministic shuffle-then-cut partition into (train, calib, test).
///
/// Fractions must be non-negative and sum to 1 within 1e-9. A fraction of 0
/// yields an empty split only if nothing was requested for it; a positive
/// fraction that rounds to zero rows is an error.
pub fn split_dataset(
    ds: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fc, fe) = fractions;
    for (name, f) in [("train", ft), ("calib", fc), ("test", fe)] {
        if f < 0.0 || !f.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{name} fraction must be non-negative, got {f}"
            )));
        }
    }
    let sum = ft + fc + fe;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must sum to 1, got {sum}"
        )));
    }

    let n = ds.n();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "shuffle"));

    // Cumulative rounding keeps the three cuts exhaustive and disjoint.
    let b1 = (ft * n as f64).round() as usize;
    let b2 = ((ft + fc) * n as f64).round() as usize;
    let (b1, b2) = (b1.min(n), b2.min(n).max(b1));
    let counts = [b1, b2 - b1, n - b2];
    for ((name, f), &count) in [("train", ft), ("calib", fc), ("test", fe)]
        .iter()
        .zip(&counts)
    {
        if *f > 0.0 && count == 0 {
            return Err(Error::InvalidArgument(format!(
                "{name} fraction {f} yields 0 of {n} samples"
            )));
        }
    }

    Ok((
        ds.subset(&idx[..b1]),
        ds.subset(&idx[b1..b2]),
        ds.subset(&idx[b2..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_schema() -> ConceptSchema {
        ConceptSchema::new(
            vec!["wing".into(), "beak::short".into(), "beak::long".into()],
            vec![vec![1, 2]],
            vec![0],
            vec!["gull".into(), "crow".into()],
        )
        .unwrap()
    }

    fn toy_dataset(n: usize) -> Dataset {
        let schema = toy_schema();
        let x_rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, 0.5 * i as f64]).collect();
        let c_rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    vec![1.0, 1.0, 0.0]
                } else {
                    vec![0.0, 0.0, 1.0]
                }
            })
            .collect();
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        Dataset::new(
            Matrix::from_rows(&x_rows),
            Matrix::from_rows(&c_rows),
            y,
            (0..n as u64).collect(),
            schema,
        )
        .unwrap()
    }

    #[test]
    fn one_hot_violation_reports_row_index() {
        let schema = toy_schema();
        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let c = Matrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0]]);
        let err = Dataset::new(x, c, vec![0, 1], vec![0, 1], schema).unwrap_err();
        match err {
            Error::Row { row, message } => {
                assert_eq!(row, 1);
                assert!(message.contains("one-hot"), "{message}");
            }
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn ingestion_parses_a_hand_written_file() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("data.csv");
        let schema_path = dir.path().join("schema.json");
        toy_schema().save(&schema_path).unwrap();
        std::fs::write(
            &csv_path,
            "x_0,x_1,wing,beak::short,beak::long,y\n\
             0.25,-1.5,1,0,1,gull\n\
             2,0.125,0,1,0,crow\n\
             -3.5,4,1,1,0,gull\n\
             1e-3,0.75,0,0,1,crow\n",
        )
        .unwrap();
        let ds = load_dataset(&csv_path, &schema_path).unwrap();
        // The concept matrix is exactly the file's integer cells.
        let expected = [
            [1.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        for (i, row) in expected.iter().enumerate() {
            assert_eq!(ds.c.row(i), row);
        }
        assert_eq!(ds.y, vec![0, 1, 0, 1]);
        assert_eq!(ds.x.get(3, 0), 1e-3);
        assert_eq!(ds.ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ingestion_rejects_unknown_class_and_non_binary_concepts() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("data.csv");
        let schema_path = dir.path().join("schema.json");
        toy_schema().save(&schema_path).unwrap();

        std::fs::write(
            &csv_path,
            "x_0,x_1,wing,beak::short,beak::long,y\n1,2,1,0,1,sparrow\n",
        )
        .unwrap();
        let err = load_dataset(&csv_path, &schema_path).unwrap_err();
        assert!(err.to_string().contains("unknown class label 'sparrow'"));

        std::fs::write(
            &csv_path,
            "x_0,x_1,wing,beak::short,beak::long,y\n1,2,0.7,0,1,gull\n",
        )
        .unwrap();
        let err = load_dataset(&csv_path, &schema_path).unwrap_err();
        assert!(err.to_string().contains("must be 0 or 1"));

        std::fs::write(
            &csv_path,
            "x_0,x_1,beak::short,wing,beak::long,y\n1,2,0,1,1,gull\n",
        )
        .unwrap();
        let err = load_dataset(&csv_path, &schema_path).unwrap_err();
        assert!(err.to_string().contains("should be concept"));
    }

    #[test]
    fn write_then_load_round_trips() {
        let ds = toy_dataset(7);
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("data.csv");
        let schema_path = dir.path().join("schema.json");
        write_dataset(&ds, &csv_path, &schema_path).unwrap();
        let back = load_dataset(&csv_path, &schema_path).unwrap();
        assert_eq!(ds, back);

        // And the bytes themselves are stable under a second write.
        let csv_path2 = dir.path().join("data2.csv");
        let schema_path2 = dir.path().join("schema2.json");
        write_dataset(&back, &csv_path2, &schema_path2).unwrap();
        assert_eq!(
            std::fs::read(&csv_path).unwrap(),
            std::fs::read(&csv_path2).unwrap()
        );
    }

    #[test]
    fn split_counts_follow_cumulative_rounding() {
        let ds = toy_dataset(10);
        let (train, calib, test) = split_dataset(&ds, (0.6, 0.2, 0.2), 9).unwrap();
        assert_eq!((train.n(), calib.n(), test.n()), (6, 2, 2));

        // Zero fractions are fine as long as nothing was requested for them.
        let (all, none_a, none_b) = split_dataset(&ds, (1.0, 0.0, 0.0), 9).unwrap();
        assert_eq!((all.n(), none_a.n(), none_b.n()), (10, 0, 0));
    }

    #[test]
    fn split_is_a_partition_and_deterministic() {
        let ds = toy_dataset(23);
        let (a1, b1, c1) = split_dataset(&ds, (0.7, 0.15, 0.15), 5).unwrap();
        let (a2, b2, c2) = split_dataset(&ds, (0.7, 0.15, 0.15), 5).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(c1, c2);

        let mut ids: Vec<u64> = a1
            .ids
            .iter()
            .chain(&b1.ids)
            .chain(&c1.ids)
            .copied()
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..23).collect::<Vec<u64>>());

        let (a3, ..) = split_dataset(&ds, (0.7, 0.15, 0.15), 6).unwrap();
        assert_ne!(a1.ids, a3.ids, "different seeds should shuffle differently");
    }

    #[test]
    fn split_rejects_bad_fractions_and_starved_splits() {
        let ds = toy_dataset(4);
        assert!(split_dataset(&ds, (0.5, 0.3, 0.3), 0).is_err());
        assert!(split_dataset(&ds, (-0.2, 0.6, 0.6), 0).is_err());
        let err = split_dataset(&ds, (0.99, 0.005, 0.005), 0).unwrap_err();
        assert!(err.to_string().contains("yields 0"), "{err}");
    }
}
