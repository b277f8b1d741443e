//! Post-hoc probability calibration.
//!
//! Independent concepts get Platt scaling (sigma(a*z + b) fitted by Newton
//! iterations on the calibration split); mutually exclusive groups get a
//! shared temperature (softmax(z/T), golden-section search). Calibration is
//! fitted on the dedicated calibration split only — never on training data —
//! and applies to logits before any thresholding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mlp::{self, MlpParams};
use crate::schema::ConceptSchema;

/// Calibration maps keyed by concept name (Platt) and group index
/// (temperature). Empty maps mean identity calibration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub platt: BTreeMap<String, [f64; 2]>,
    pub temperature: BTreeMap<usize, f64>,
}

impl CalibrationParams {
    /// Identity calibration: no reshaping of any concept.
    pub fn identity() -> CalibrationParams {
        CalibrationParams::default()
    }

    pub fn is_identity(&self) -> bool {
        self.platt.is_empty() && self.temperature.is_empty()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration serializes")
    }

    pub fn from_json(json: &str) -> Result<CalibrationParams> {
        let cal: CalibrationParams = serde_json::from_str(json)
            .map_err(|e| Error::Dataset(format!("unparseable calibration JSON: {e}")))?;
        for (group, &t) in &cal.temperature {
            if t <= 0.0 || t.is_nan() {
                return Err(Error::Dataset(format!(
                    "temperature {t} for group {group} must be positive"
                )));
            }
        }
        Ok(cal)
    }
}

/// Fits Platt scaling with the corrected targets
/// t+ = (N+ + 1)/(N+ + 2), t- = 1/(N- + 2), which keep separable calibration
/// sets finite.
pub fn fit_platt(logits: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    fit_platt_with(logits, targets, true)
}

/// `corrected = false` uses the raw 0/1 targets (ablation mode; can push
/// parameters toward infinity on separable data, still bounded by the
/// iteration cap).
pub fn fit_platt_with(logits: &[f64], targets: &[f64], corrected: bool) -> Result<(f64, f64)> {
    if logits.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::InvalidArgument(format!(
            "Platt target {bad} is not binary"
        )));
    }
    let n_pos = targets.iter().filter(|&&t| t == 1.0).count();
    let n_neg = targets.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateCalibration(format!(
            "calibration targets are single-class ({n_pos} positive of {})",
            targets.len()
        )));
    }
    let (t_pos, t_neg) = if corrected {
        (
            (n_pos as f64 + 1.0) / (n_pos as f64 + 2.0),
            1.0 / (n_neg as f64 + 2.0),
        )
    } else {
        (1.0, 0.0)
    };
    let t: Vec<f64> = targets
        .iter()
        .map(|&v| if v == 1.0 { t_pos } else { t_neg })
        .collect();

    let nll = |a: f64, b: f64| -> f64 {
        logits
            .iter()
            .zip(&t)
            .map(|(&z, &ti)| {
                let p = mlp::sigmoid(a * z + b);
                let p = p.clamp(mlp::PROB_CLAMP, 1.0 - mlp::PROB_CLAMP);
                -(ti * p.ln() + (1.0 - ti) * (1.0 - p).ln())
            })
            .sum()
    };

    let (mut a, mut b) = (1.0, 0.0);
    let mut current = nll(a, b);
    for _ in 0..100 {
        let (mut ga, mut gb) = (0.0, 0.0);
        let (mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0);
        for (&z, &ti) in logits.iter().zip(&t) {
            let p = mlp::sigmoid(a * z + b);
            let d = p - ti;
            ga += d * z;
            gb += d;
            let w = p * (1.0 - p);
            haa += w * z * z;
            hab += w * z;
            hbb += w;
        }
        // Ridge keeps the 2x2 solve well-posed when the Hessian degenerates.
        haa += 1e-12;
        hbb += 1e-12;
        let det = haa * hbb - hab * hab;
        if det.abs() < 1e-300 {
            break;
        }
        let da = -(hbb * ga - hab * gb) / det;
        let db = -(haa * gb - hab * ga) / det;
        // Backtracking: halve the Newton step until the objective improves.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = nll(a + scale * da, b + scale * db);
            if trial <= current {
                a += scale * da;
                b += scale * db;
                current = trial;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        if (scale * da).abs().max((scale * db).abs()) < 1e-10 {
            break;
        }
    }
    Ok((a, b))
}

/// Negative log-likelihood of sigma(a*z + b) against binary targets.
pub fn platt_nll(logits: &[f64], targets: &[f64], a: f64, b: f64) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            let p = mlp::sigmoid(a * z + b).clamp(mlp::PROB_CLAMP, 1.0 - mlp::PROB_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum()
}

/// Negative log-likelihood of softmax(z/T) rows against class targets.
pub fn temperature_nll(logits: &Matrix, targets: &[usize], temperature: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().map(|&v| v / temperature).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &z in row {
            sum += (z / temperature - max).exp();
        }
        let target = (row[targets[i]] / temperature - max).exp() / sum;
        total -= target.clamp(mlp::PROB_CLAMP, 1.0 - mlp::PROB_CLAMP).ln();
    }
    total
}

const T_MIN: f64 = 0.05;
const T_MAX: f64 = 20.0;

/// Fits the temperature of one group by golden-section search over
/// [0.05, 20] to an interval width of 1e-6.
pub fn fit_temperature(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit rows vs {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if logits.rows() < 2 {
        return Err(Error::DegenerateCalibration(
            "temperature fitting needs at least 2 samples".into(),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::InvalidArgument(format!(
            "target class {bad} outside the {}-way group",
            logits.cols()
        )));
    }
    let first = targets[0];
    if targets.iter().all(|&t| t == first) {
        return Err(Error::DegenerateCalibration(
            "calibration targets are single-class within the group".into(),
        ));
    }

    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (T_MIN, T_MAX);
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let mut fc = temperature_nll(logits, targets, c);
    let mut fd = temperature_nll(logits, targets, d);
    while hi - lo > 1e-6 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = temperature_nll(logits, targets, c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = temperature_nll(logits, targets, d);
        }
    }
    Ok((lo + hi) / 2.0)
}

/// Calibrated probabilities for one logit row. Concepts without a fitted
/// entry pass through unchanged (identity calibration).
pub fn apply_calibration(
    cal: &CalibrationParams,
    logits: &[f64],
    schema: &ConceptSchema,
) -> Vec<f64> {
    assert_eq!(logits.len(), schema.k(), "logit row width mismatch");
    let mut adjusted = logits.to_vec();
    for &j in &schema.independents {
        if let Some([a, b]) = cal.platt.get(&schema.concepts[j]) {
            adjusted[j] = a * logits[j] + b;
        }
    }
    for (gi, group) in schema.groups.iter().enumerate() {
        if let Some(&t) = cal.temperature.get(&gi) {
            for &j in group {
                adjusted[j] = logits[j] / t;
            }
        }
    }
    mlp::probs_from_logits(&adjusted, schema)
}

/// Fits calibration for every concept of the schema on a calibration split.
pub fn fit_calibration(params: &MlpParams, calib: &Dataset) -> Result<CalibrationParams> {
    let schema = &calib.schema;
    let logits = params.logits(&calib.x);
    let mut cal = CalibrationParams::default();
    for &j in &schema.independents {
        let col = logits.column(j);
        let targets = calib.c.column(j);
        let (a, b) = fit_platt(&col, &targets).map_err(|e| match e {
            Error::DegenerateCalibration(m) => Error::DegenerateCalibration(format!(
                "concept '{}': {m}",
                schema.concepts[j]
            )),
            other => other,
        })?;
        cal.platt.insert(schema.concepts[j].clone(), [a, b]);
    }
    for (gi, group) in schema.groups.iter().enumerate() {
        let rows: Vec<Vec<f64>> = (0..calib.n())
            .map(|i| group.iter().map(|&j| logits.get(i, j)).collect())
            .collect();
        let group_logits = Matrix::from_rows(&rows);
        let targets: Vec<usize> = (0..calib.n())
            .map(|i| {
                group
                    .iter()
                    .position(|&j| calib.c.get(i, j) == 1.0)
                    .expect("dataset rows are one-hot per group")
            })
            .collect();
        let t = fit_temperature(&group_logits, &targets).map_err(|e| match e {
            Error::DegenerateCalibration(m) => {
                Error::DegenerateCalibration(format!("group {gi}: {m}"))
            }
            other => other,
        })?;
        cal.temperature.insert(gi, t);
    }
    Ok(cal)
}

/// Equal-width-bin expected calibration error over binary outcomes.
pub fn expected_calibration_error(probs: &[f64], outcomes: &[f64], n_bins: usize) -> f64 {
    assert_eq!(probs.len(), outcomes.len());
    assert!(n_bins > 0);
    assert!(!probs.is_empty(), "ECE of an empty set");
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut acc = vec![0.0; n_bins];
    for (&p, &o) in probs.iter().zip(outcomes) {
        assert!((0.0..=1.0).contains(&p), "probability {p} out of range");
        let bin = ((p * n_bins as f64) as usize).min(n_bins - 1);
        count[bin] += 1;
        conf[bin] += p;
        acc[bin] += o;
    }
    let n = probs.len() as f64;
    let mut ece = 0.0;
    for b in 0..n_bins {
        if count[b] > 0 {
            let c = count[b] as f64;
            ece += (c / n) * ((acc[b] / c) - (conf[b] / c)).abs();
        }
    }
    ece
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    /// Draws (logit, outcome) pairs that are perfectly calibrated by
    /// construction: outcome ~ Bernoulli(sigma(z)).
    fn calibrated_binary(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = crate::rng::substream(seed, "test.calibrated");
        let mut z = Vec::with_capacity(n);
        let mut t = Vec::with_capacity(n);
        for _ in 0..n {
            let p: f64 = rng.gen_range(0.05..0.95);
            z.push(logit(p));
            t.push(if rng.gen_bool(p) { 1.0 } else { 0.0 });
        }
        (z, t)
    }

    #[test]
    fn platt_on_calibrated_logits_recovers_the_identity() {
        let (z, t) = calibrated_binary(4000, 17);
        let (a, b) = fit_platt(&z, &t).unwrap();
        assert!((a - 1.0).abs() < 0.1, "a = {a}");
        assert!(b.abs() < 0.1, "b = {b}");
        // Grid-search oracle: the Newton solution must not lose to any grid
        // point on its own objective (corrected targets).
        let n_pos = t.iter().filter(|&&v| v == 1.0).count() as f64;
        let n_neg = t.len() as f64 - n_pos;
        let corrected: Vec<f64> = t
            .iter()
            .map(|&v| {
                if v == 1.0 {
                    (n_pos + 1.0) / (n_pos + 2.0)
                } else {
                    1.0 / (n_neg + 2.0)
                }
            })
            .collect();
        let fitted_nll = platt_nll(&z, &corrected, a, b);
        for ga in [-0.5, 0.5, 0.8, 1.0, 1.2, 2.0, 4.0] {
            for gb in [-1.0, -0.3, 0.0, 0.3, 1.0] {
                assert!(
                    fitted_nll <= platt_nll(&z, &corrected, ga, gb) + 1e-9,
                    "grid point ({ga},{gb}) beats the fit"
                );
            }
        }
    }

    #[test]
    fn platt_handles_separable_data_and_beats_identity() {
        let z: Vec<f64> = vec![-3.0, -2.0, -1.5, 1.5, 2.0, 3.0];
        let t: Vec<f64> = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let (a, b) = fit_platt(&z, &t).unwrap();
        assert!(a.is_finite() && b.is_finite());
        let n_pos = 3.0;
        let corrected: Vec<f64> = t
            .iter()
            .map(|&v| if v == 1.0 { (n_pos + 1.0) / (n_pos + 2.0) } else { 1.0 / (n_pos + 2.0) })
            .collect();
        assert!(platt_nll(&z, &corrected, a, b) <= platt_nll(&z, &corrected, 1.0, 0.0) + 1e-12);
    }

    #[test]
    fn single_class_targets_are_degenerate() {
        let err = fit_platt(&[0.1, 0.5, 1.0], &[1.0, 1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateCalibration(_)));
        let logits = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]);
        let err = fit_temperature(&logits, &[0, 0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateCalibration(_)));
    }

    /// Rows whose labels are drawn from softmax(z) are calibrated at T = 1;
    /// tripling the logits must fit T close to 3.
    fn calibrated_group(n: usize, classes: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = crate::rng::substream(seed, "test.group");
        let mut rows = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exp.iter().sum();
            let mut u: f64 = rng.gen_range(0.0..1.0);
            let mut label = classes - 1;
            for (idx, &e) in exp.iter().enumerate() {
                let p = e / sum;
                if u < p {
                    label = idx;
                    break;
                }
                u -= p;
            }
            rows.push(z);
            targets.push(label);
        }
        (Matrix::from_rows(&rows), targets)
    }

    #[test]
    fn temperature_recovers_a_known_inflation_and_matches_a_grid_oracle() {
        let (logits, targets) = calibrated_group(3000, 3, 23);
        let inflated_rows: Vec<Vec<f64>> = (0..logits.rows())
            .map(|i| logits.row(i).iter().map(|&v| 3.0 * v).collect())
            .collect();
        let inflated = Matrix::from_rows(&inflated_rows);
        let t = fit_temperature(&inflated, &targets).unwrap();
        assert!((t - 3.0).abs() < 0.2, "fitted T = {t}");

        let fitted_nll = temperature_nll(&inflated, &targets, t);
        let mut grid_best = f64::INFINITY;
        let mut grid_arg = 0.0;
        let mut g = 0.05;
        while g <= 20.0 {
            let v = temperature_nll(&inflated, &targets, g);
            if v < grid_best {
                grid_best = v;
                grid_arg = g;
            }
            g += 0.01;
        }
        assert!(fitted_nll <= grid_best + 1e-9, "grid at {grid_arg} beats the fit");
        assert!(
            temperature_nll(&inflated, &targets, t)
                <= temperature_nll(&inflated, &targets, 1.0)
        );
    }

    #[test]
    fn calibrated_argmax_equals_raw_argmax() {
        let mut rng = crate::rng::substream(31, "test.argmax");
        let schema = ConceptSchema::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![0, 1, 2]],
            vec![],
            vec!["x".into(), "y".into()],
        )
        .unwrap();
        for _ in 0..200 {
            let logits: Vec<f64> = (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let t: f64 = rng.gen_range(0.06..19.0);
            let mut cal = CalibrationParams::default();
            cal.temperature.insert(0, t);
            let calibrated = apply_calibration(&cal, &logits, &schema);
            let raw = mlp::probs_from_logits(&logits, &schema);
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(argmax(&calibrated), argmax(&raw));
            let sum: f64 = calibrated.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_parameters_change_nothing_and_high_t_flattens() {
        let schema = ConceptSchema::new(
            vec!["i0".into(), "g0".into(), "g1".into(), "g2".into()],
            vec![vec![1, 2, 3]],
            vec![0],
            vec!["x".into(), "y".into()],
        )
        .unwrap();
        let logits = [0.7, 2.0, 0.0, 0.0];
        let mut cal = CalibrationParams::default();
        cal.platt.insert("i0".into(), [1.0, 0.0]);
        cal.temperature.insert(0, 1.0);
        let calibrated = apply_calibration(&cal, &logits, &schema);
        let raw = mlp::probs_from_logits(&logits, &schema);
        for (c, r) in calibrated.iter().zip(&raw) {
            assert!((c - r).abs() < 1e-12);
        }

        cal.temperature.insert(0, 20.0);
        let flat = apply_calibration(&cal, &logits, &schema);
        for &j in &[1usize, 2, 3] {
            assert!((flat[j] - 1.0 / 3.0).abs() < 0.04, "p[{j}] = {}", flat[j]);
        }
    }

    #[test]
    fn platt_with_positive_slope_is_strictly_monotone() {
        let (z, t) = calibrated_binary(500, 41);
        let (a, b) = fit_platt(&z, &t).unwrap();
        assert!(a > 0.0);
        let mut sorted = z.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        sorted.dedup();
        for w in sorted.windows(2) {
            assert!(mlp::sigmoid(a * w[0] + b) < mlp::sigmoid(a * w[1] + b));
        }
    }

    #[test]
    fn ece_extremes_and_monte_carlo_consistency() {
        assert_eq!(expected_calibration_error(&[1.0, 1.0], &[1.0, 1.0], 15), 0.0);
        assert_eq!(expected_calibration_error(&[1.0, 1.0], &[0.0, 0.0], 15), 1.0);

        let mut rng = crate::rng::substream(53, "test.ece");
        let n = 100_000;
        let mut probs = Vec::with_capacity(n);
        let mut outs = Vec::with_capacity(n);
        for _ in 0..n {
            let p: f64 = rng.gen_range(0.0..1.0);
            probs.push(p);
            outs.push(if rng.gen_bool(p) { 1.0 } else { 0.0 });
        }
        let ece = expected_calibration_error(&probs, &outs, 15);
        assert!(ece <= 0.01, "ECE {ece} on calibrated draws");
    }

    #[test]
    fn calibration_json_round_trips() {
        let mut cal = CalibrationParams::default();
        cal.platt.insert("c0".into(), [1.25, -0.5]);
        cal.temperature.insert(0, 2.5);
        cal.temperature.insert(3, 0.75);
        let back = CalibrationParams::from_json(&cal.to_json_pretty()).unwrap();
        assert_eq!(cal, back);
        assert!(CalibrationParams::from_json(
            r#"{"platt": {}, "temperature": {"0": -1.0}}"#
        )
        .is_err());
    }
}
