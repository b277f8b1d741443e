//! Information-leakage arithmetic and reporting.
//!
//! Soft concept probabilities can carry label-relevant signal beyond the
//! hard annotations. Each soft-column split of a sub-tree taps that channel,
//! and its information gain (in bits, over the fitted training partition) is
//! the per-split leakage measure. Totals sum those gains across all stored
//! sub-trees; the global tree routes on hard values only and contributes
//! nothing by construction.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mcbm::{BaselineModel, McbmModel};
use crate::tree::{DecisionTree, FeatureKind, Node, NodeKind};

/// Shannon entropy of a count vector, in bits. Zero counts contribute 0.
///
/// Panics on an empty or all-zero vector — callers always hold at least one
/// sample when they ask for a node's entropy.
pub fn entropy_bits(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    assert!(total > 0, "entropy of an empty count vector");
    let n = total as f64;
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.log2();
        }
    }
    h
}

/// Information gain of a split, in bits:
/// `H(parent) - |left|/|parent| * H(left) - |right|/|parent| * H(right)`.
///
/// The subtraction order matches the tree-fitting scan exactly, so gains
/// recomputed from stored node counts are bit-identical to fit-time gains.
pub fn split_leakage(parent: &[usize], left: &[usize], right: &[usize]) -> Result<f64> {
    if parent.len() != left.len() || parent.len() != right.len() {
        return Err(Error::InvalidArgument(format!(
            "count vectors of widths {}, {}, {} in one split",
            parent.len(),
            left.len(),
            right.len()
        )));
    }
    for i in 0..parent.len() {
        if left[i] + right[i] != parent[i] {
            return Err(Error::InvalidArgument(format!(
                "children do not conserve class {i}: {} + {} != {}",
                left[i], right[i], parent[i]
            )));
        }
    }
    let n: usize = parent.iter().sum();
    let nl: usize = left.iter().sum();
    let nr: usize = right.iter().sum();
    if nl == 0 || nr == 0 {
        return Err(Error::InvalidArgument("a split child is empty".into()));
    }
    let n_f = n as f64;
    Ok(entropy_bits(parent)
        - (nl as f64 / n_f) * entropy_bits(left)
        - (nr as f64 / n_f) * entropy_bits(right))
}

/// Spearman rank correlation between two equal-length sequences.
/// Ties receive their average rank.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "rank correlation over {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(
            "rank correlation needs at least 2 points".into(),
        ));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::InvalidArgument(
            "rank correlation of a constant sequence".into(),
        ));
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // 1-based ranks; tied values share the mean of their rank range.
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One leaky (soft-column) split inside a sub-tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakySplit {
    /// Node id within the sub-tree that owns the split.
    pub node_id: usize,
    pub concept: String,
    pub threshold: f64,
    pub gain_bits: f64,
    /// Training samples at the split node.
    pub n_samples: usize,
}

/// Per-decision-path row of a leakage report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRow {
    /// Leaf id of the path in the global tree.
    pub path_id: usize,
    pub conditions: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    /// Majority-vote accuracy of the global leaf on this path's test rows;
    /// `None` when no test row reaches the path.
    pub hard_accuracy: Option<f64>,
    /// Accuracy of the full model (sub-tree included) on the same rows.
    pub mcbm_accuracy: Option<f64>,
    pub leaky_splits: Vec<LeakySplit>,
    pub leakage_bits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTotals {
    pub total_leakage_bits: f64,
    pub n_paths: usize,
    pub n_extended_paths: usize,
    pub task_accuracy: f64,
    pub concept_accuracy: f64,
    pub explanation_accuracy: f64,
    pub fidelity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub rows: Vec<PathRow>,
    pub totals: ReportTotals,
}

/// Collects every soft-column split of `tree` in preorder, with its fit-time
/// information gain recomputed from the stored node counts.
pub fn soft_splits(tree: &DecisionTree) -> Vec<LeakySplit> {
    let mut out = Vec::new();
    collect_soft_splits(&tree.root, &tree.feature_names, &tree.feature_kinds, &mut out);
    out
}

fn collect_soft_splits(
    node: &Node,
    names: &[String],
    kinds: &[FeatureKind],
    out: &mut Vec<LeakySplit>,
) {
    if let NodeKind::Internal {
        feature,
        threshold,
        left,
        right,
    } = &node.kind
    {
        if kinds[*feature] == FeatureKind::Soft {
            let gain = split_leakage(&node.class_counts, &left.class_counts, &right.class_counts)
                .expect("stored tree counts conserve");
            out.push(LeakySplit {
                node_id: node.id,
                concept: names[*feature].clone(),
                threshold: *threshold,
                gain_bits: gain,
                n_samples: node.n_samples,
            });
        }
        collect_soft_splits(left, names, kinds, out);
        collect_soft_splits(right, names, kinds, out);
    }
}

/// Sum of soft-split gains over one tree, in bits.
pub fn tree_leakage_bits(tree: &DecisionTree) -> f64 {
    // + 0.0 normalizes the IEEE -0.0 that empty sums produce.
    soft_splits(tree).iter().map(|s| s.gain_bits).sum::<f64>() + 0.0
}

/// Total leakage of a fitted model: the sum over all stored sub-trees.
pub fn model_leakage_bits(model: &McbmModel) -> f64 {
    model.subtrees.values().map(tree_leakage_bits).sum::<f64>() + 0.0
}

/// Task / concept / explanation accuracy and fidelity on a test set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardMetrics {
    pub task_accuracy: f64,
    pub concept_accuracy: f64,
    pub explanation_accuracy: f64,
    pub fidelity: f64,
}

/// Either the mixed model or one of the plain baselines, for shared metric
/// plumbing.
pub enum ModelRef<'a> {
    Mcbm(&'a McbmModel),
    Baseline(&'a BaselineModel),
}

/// Computes the standard metric quartet.
///
/// Explanation accuracy replays the model's decision rules as bare
/// predicates over the routed feature rows, independently of the tree
/// routing code; fidelity is the agreement between that replay and the
/// model's own predictions. For tree predictors both coincide with routing,
/// so fidelity must come out exactly 1.0 — this function asserts it.
pub fn standard_metrics(model: ModelRef<'_>, test: &Dataset) -> Result<StandardMetrics> {
    let (predictions, replayed, concept_acc) = match model {
        ModelRef::Mcbm(m) => {
            let predictions = m.evaluate(test)?;
            let replayed = m.replay_rules(test)?;
            (predictions, replayed, m.concept_accuracy(test)?)
        }
        ModelRef::Baseline(b) => {
            let predictions = b.evaluate(test)?;
            let replayed = b.replay_rules(test)?;
            (predictions, replayed, b.concept_accuracy(test)?)
        }
    };
    let n = test.n();
    let task = accuracy(&predictions, &test.y);
    let explanation = accuracy(&replayed, &test.y);
    let agree = predictions
        .iter()
        .zip(&replayed)
        .filter(|(a, b)| a == b)
        .count();
    let fidelity = agree as f64 / n as f64;
    assert_eq!(
        fidelity, 1.0,
        "rule replay diverged from tree routing on {} of {} rows",
        n - agree,
        n
    );
    Ok(StandardMetrics {
        task_accuracy: task,
        concept_accuracy: concept_acc,
        explanation_accuracy: explanation,
        fidelity,
    })
}

pub(crate) fn accuracy(predicted: &[usize], actual: &[usize]) -> f64 {
    assert_eq!(predicted.len(), actual.len());
    assert!(!predicted.is_empty(), "accuracy of an empty prediction set");
    let hits = predicted.iter().zip(actual).filter(|(p, a)| p == a).count();
    hits as f64 / predicted.len() as f64
}

/// Builds the per-path leakage report for a fitted model.
///
/// Rows follow the global tree's decision paths in leaf-id order. Hard
/// accuracy scores each path's test rows by the global leaf's majority
/// vote; model accuracy scores the same rows through the sub-tree when one
/// exists. Leaky splits and their gains come from the sub-trees' stored
/// training counts, not from test data.
pub fn path_report(model: &McbmModel, train: &Dataset, test: &Dataset) -> Result<LeakageReport> {
    let paths = model.global.decompose();
    let train_hard = model.hard_route_matrix(train)?;
    let test_hard = model.hard_route_matrix(test)?;

    let test_leaf: Vec<usize> = (0..test.n())
        .map(|i| model.global.route(test_hard.row(i)).id)
        .collect();
    let train_leaf: Vec<usize> = (0..train.n())
        .map(|i| model.global.route(train_hard.row(i)).id)
        .collect();
    let predictions = model.evaluate(test)?;

    let mut rows = Vec::with_capacity(paths.len());
    let mut total_bits = 0.0;
    let mut extended = 0;
    for path in &paths {
        let leaky = match model.subtrees.get(&path.leaf_id) {
            Some(sub) => soft_splits(sub),
            None => Vec::new(),
        };
        if !leaky.is_empty() {
            extended += 1;
        }
        let bits: f64 = leaky.iter().map(|s| s.gain_bits).sum();
        total_bits += bits;

        let test_rows: Vec<usize> = (0..test.n())
            .filter(|&i| test_leaf[i] == path.leaf_id)
            .collect();
        let (hard_acc, mcbm_acc) = if test_rows.is_empty() {
            (None, None)
        } else {
            let hard_hits = test_rows
                .iter()
                .filter(|&&i| test.y[i] == path.predicted_class)
                .count();
            let mcbm_hits = test_rows
                .iter()
                .filter(|&&i| test.y[i] == predictions[i])
                .count();
            let denom = test_rows.len() as f64;
            (
                Some(hard_hits as f64 / denom),
                Some(mcbm_hits as f64 / denom),
            )
        };
        rows.push(PathRow {
            path_id: path.leaf_id,
            conditions: path
                .conditions
                .iter()
                .map(|c| c.render(&model.global.feature_names))
                .collect(),
            n_train: train_leaf.iter().filter(|&&l| l == path.leaf_id).count(),
            n_test: test_rows.len(),
            hard_accuracy: hard_acc,
            mcbm_accuracy: mcbm_acc,
            leaky_splits: leaky,
            leakage_bits: bits,
        });
    }

    let metrics = standard_metrics(ModelRef::Mcbm(model), test)?;
    Ok(LeakageReport {
        rows,
        totals: ReportTotals {
            total_leakage_bits: total_bits,
            n_paths: paths.len(),
            n_extended_paths: extended,
            task_accuracy: metrics.task_accuracy,
            concept_accuracy: metrics.concept_accuracy,
            explanation_accuracy: metrics.explanation_accuracy,
            fidelity: metrics.fidelity,
        },
    })
}

impl LeakageReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width text table, one row per decision path.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<6} {:>8} {:>7} {:>10} {:>10} {:>13}  {}\n",
            "path", "n_train", "n_test", "hard_acc", "model_acc", "leakage_bits", "leaky splits"
        ));
        let fmt_acc = |a: Option<f64>| match a {
            Some(v) => format!("{:.4}", v),
            None => "-".to_string(),
        };
        for row in &self.rows {
            let splits = if row.leaky_splits.is_empty() {
                "-".to_string()
            } else {
                row.leaky_splits
                    .iter()
                    .map(|s| format!("{} @ {:.4} ({:.4} bits)", s.concept, s.threshold, s.gain_bits))
                    .collect::<Vec<_>>()
                    .join("; ")
            };
            out.push_str(&format!(
                "{:<6} {:>8} {:>7} {:>10} {:>10} {:>13.6}  {}\n",
                row.path_id,
                row.n_train,
                row.n_test,
                fmt_acc(row.hard_accuracy),
                fmt_acc(row.mcbm_accuracy),
                row.leakage_bits,
                splits
            ));
        }
        out.push_str(&format!(
            "total leakage: {:.6} bits over {} of {} paths\n",
            self.totals.total_leakage_bits, self.totals.n_extended_paths, self.totals.n_paths
        ));
        out.push_str(&format!(
            "task {:.4}  concept {:.4}  explanation {:.4}  fidelity {:.4}\n",
            self.totals.task_accuracy,
            self.totals.concept_accuracy,
            self.totals.explanation_accuracy,
            self.totals.fidelity
        ));
        out
    }
}

/// Routes every row of `features` through `tree` and reports the replayed
/// decision-path predictions (used by fidelity checks).
pub fn replay_tree_rules(tree: &DecisionTree, features: &Matrix) -> Vec<usize> {
    let paths = tree.decompose();
    (0..features.rows())
        .map(|i| {
            let row = features.row(i);
            let hits: Vec<_> = paths.iter().filter(|p| p.matches(row)).collect();
            assert_eq!(hits.len(), 1, "decision paths must partition the space");
            hits[0].predicted_class
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn entropy_matches_hand_values() {
        assert_eq!(entropy_bits(&[4, 4]), 1.0);
        assert_eq!(entropy_bits(&[8, 0]), 0.0);
        // -(5/8)log2(5/8) - (3/8)log2(3/8)
        assert!((entropy_bits(&[5, 3]) - 0.954434).abs() < 1e-6);
        // Uniform over 4 classes: exactly 2 bits.
        assert_eq!(entropy_bits(&[3, 3, 3, 3]), 2.0);
    }

    #[test]
    #[should_panic(expected = "empty count vector")]
    fn entropy_of_nothing_panics() {
        entropy_bits(&[0, 0]);
    }

    #[test]
    fn split_leakage_hand_examples() {
        assert_eq!(split_leakage(&[4, 4], &[4, 0], &[0, 4]).unwrap(), 1.0);
        // Children proportional to the parent: zero gain.
        let g = split_leakage(&[8, 4], &[6, 3], &[2, 1]).unwrap();
        assert!(g.abs() < 1e-12);
        let g = split_leakage(&[5, 3], &[4, 1], &[1, 2]).unwrap();
        assert!((g - 0.158868).abs() < 1e-6);
    }

    #[test]
    fn split_leakage_rejects_non_conserving_and_empty_children() {
        assert!(split_leakage(&[4, 4], &[4, 0], &[1, 4]).is_err());
        assert!(split_leakage(&[4, 4], &[4, 4], &[0, 0]).is_err());
        assert!(split_leakage(&[4, 4], &[4], &[0, 4]).is_err());
    }

    #[test]
    fn random_splits_are_non_negative_and_match_direct_evaluation() {
        let mut rng = crate::rng::substream(7, "test.split_leakage");
        for _ in 0..500 {
            let classes = rng.gen_range(2..5);
            let parent: Vec<usize> = (0..classes).map(|_| rng.gen_range(0..20)).collect();
            if parent.iter().sum::<usize>() < 2 {
                continue;
            }
            let left: Vec<usize> = parent.iter().map(|&p| rng.gen_range(0..=p)).collect();
            let right: Vec<usize> = parent.iter().zip(&left).map(|(&p, &l)| p - l).collect();
            if left.iter().sum::<usize>() == 0 || right.iter().sum::<usize>() == 0 {
                continue;
            }
            let got = split_leakage(&parent, &left, &right).unwrap();
            let n: usize = parent.iter().sum();
            let nl: usize = left.iter().sum();
            let direct = entropy_bits(&parent)
                - (nl as f64 / n as f64) * entropy_bits(&left)
                - ((n - nl) as f64 / n as f64) * entropy_bits(&right);
            assert_eq!(got, direct);
            assert!(got >= -1e-12, "gain {got} below zero");
        }
    }

    #[test]
    fn spearman_handles_monotone_and_tied_sequences() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = [2.0, 7.0, 9.0, 20.0, 21.0];
        let down = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman_rho(&x, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman_rho(&x, &down).unwrap() + 1.0).abs() < 1e-12);
        // Ties: (1,1,2) vs (3,3,9) is still perfectly concordant.
        let rho = spearman_rho(&[1.0, 1.0, 2.0], &[3.0, 3.0, 9.0]).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
        assert!(spearman_rho(&[1.0, 1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn average_ranks_assign_tie_means() {
        let r = average_ranks(&[10.0, 20.0, 10.0, 30.0]);
        assert_eq!(r, vec![1.5, 3.0, 1.5, 4.0]);
    }
}
