//! Mixed concept-bottleneck models: a hard global tree whose leaves can be
//! extended with per-leaf sub-trees over predicted concept probabilities.
//!
//! The global tree is fitted on ground-truth concept annotations only, so it
//! carries no label information beyond the annotated concepts. Each of its
//! leaves is then offered a sub-tree over a mixed matrix: concepts the leaf's
//! path already used switch to their predicted probabilities (soft columns),
//! all others keep their hard values. A sub-tree is stored only if it earns
//! at least one soft split with information gain above `MIN_LEAKY_GAIN_BITS`;
//! those gains are exactly what the leakage report sums. Because the global
//! tree stops only when no split satisfies `msl`, and a sub-tree sees the
//! same rows under the same `msl`, hard columns can never split inside a
//! sub-tree — every stored split is soft.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::leakage;
use crate::matrix::Matrix;
use crate::mlp::binarize_matrix;
use crate::schema::ConceptSchema;
use crate::source::{Mode, ProbabilitySource};
use crate::tree::{
    assign_ids, fit_tree, DecisionPath, DecisionTree, FeatureKind, Node, NodeKind, TreeParams,
};

/// Smallest information gain (bits) a soft split must earn for its sub-tree
/// to be stored.
pub const MIN_LEAKY_GAIN_BITS: f64 = 1e-12;

/// Which concept values route samples at evaluation time: the probability
/// source's binarized predictions, or the dataset's annotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptMode {
    Predicted,
    Annotated,
}

impl std::fmt::Display for ConceptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConceptMode::Predicted => write!(f, "predicted"),
            ConceptMode::Annotated => write!(f, "annotated"),
        }
    }
}

/// Soft-column display name for a concept.
pub fn soft_name(concept: &str) -> String {
    format!("p({concept})")
}

/// A concept matrix where a chosen subset of columns carries predicted
/// probabilities and the rest keep their 0/1 annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedConceptMatrix {
    pub values: Matrix,
    pub feature_names: Vec<String>,
    pub feature_kinds: Vec<FeatureKind>,
}

/// Builds the mixed matrix: columns in `soft_concepts` take their values from
/// `soft`, all others from `hard`. With `soft_concepts` empty the values are
/// exactly the hard matrix.
pub fn build_mixed_matrix(
    hard: &Matrix,
    soft: &Matrix,
    soft_concepts: &[usize],
    names: &[String],
) -> MixedConceptMatrix {
    assert_eq!(hard.rows(), soft.rows());
    assert_eq!(hard.cols(), soft.cols());
    assert_eq!(hard.cols(), names.len());
    let k = names.len();
    let mut kinds = vec![FeatureKind::Hard; k];
    for &j in soft_concepts {
        kinds[j] = FeatureKind::Soft;
    }
    let feature_names = names
        .iter()
        .zip(&kinds)
        .map(|(name, kind)| match kind {
            FeatureKind::Hard => name.clone(),
            FeatureKind::Soft => soft_name(name),
        })
        .collect();
    let mut values = Matrix::zeros(hard.rows(), k);
    for i in 0..hard.rows() {
        for (j, kind) in kinds.iter().enumerate() {
            let v = match kind {
                FeatureKind::Hard => hard.get(i, j),
                FeatureKind::Soft => soft.get(i, j),
            };
            values.set(i, j, v);
        }
    }
    MixedConceptMatrix {
        values,
        feature_names,
        feature_kinds: kinds,
    }
}

/// A fitted mixed model.
#[derive(Clone, Debug)]
pub struct McbmModel {
    pub global: DecisionTree,
    /// Sub-trees keyed by the global leaf id they extend.
    pub subtrees: BTreeMap<usize, DecisionTree>,
    pub source: ProbabilitySource,
    pub mode: Mode,
    pub concept_mode: ConceptMode,
    pub msl: usize,
    pub schema_fingerprint: u64,
}

/// Fits the global tree on hard annotations, then offers every leaf a
/// sub-tree over its mixed matrix.
pub fn fit_mcbm(
    train: &Dataset,
    source: ProbabilitySource,
    msl: usize,
    mode: Mode,
    concept_mode: ConceptMode,
) -> Result<McbmModel> {
    source.check_mode(mode)?;
    let schema = &train.schema;
    let params = TreeParams::hard(schema.concepts.clone(), msl);
    let global = fit_tree(&train.c, &train.y, schema.n_classes(), &params)?;
    let probs = source.predict_probs(&train.x, &train.ids, schema)?;
    let subtrees = fit_subtrees(&global, train, &probs, msl)?;
    Ok(McbmModel {
        global,
        subtrees,
        source,
        mode,
        concept_mode,
        msl,
        schema_fingerprint: schema.fingerprint(),
    })
}

/// The sub-tree phase alone: routes training rows through the global tree by
/// their hard annotations, fits one candidate sub-tree per leaf on the
/// leaf's mixed matrix, and keeps those with a qualifying soft split.
pub fn fit_subtrees(
    global: &DecisionTree,
    train: &Dataset,
    probs: &Matrix,
    msl: usize,
) -> Result<BTreeMap<usize, DecisionTree>> {
    let schema = &train.schema;
    let leaf_of: Vec<usize> = (0..train.n())
        .map(|i| global.route(train.c.row(i)).id)
        .collect();
    let mut subtrees = BTreeMap::new();
    for path in global.decompose() {
        if path.concept_set.is_empty() {
            continue;
        }
        let members: Vec<usize> = (0..train.n())
            .filter(|&i| leaf_of[i] == path.leaf_id)
            .collect();
        assert_eq!(
            members.len(),
            path.n_samples,
            "training rows must reproduce the stored leaf population"
        );
        let hard = train.c.select_rows(&members);
        let soft = probs.select_rows(&members);
        let mixed = build_mixed_matrix(&hard, &soft, &path.concept_set, &schema.concepts);
        let labels: Vec<usize> = members.iter().map(|&i| train.y[i]).collect();
        let params = TreeParams {
            msl,
            max_depth: None,
            feature_names: mixed.feature_names,
            feature_kinds: mixed.feature_kinds,
        };
        let sub = fit_tree(&mixed.values, &labels, schema.n_classes(), &params)?;
        let qualifies = leakage::soft_splits(&sub)
            .iter()
            .any(|s| s.gain_bits > MIN_LEAKY_GAIN_BITS);
        if qualifies {
            subtrees.insert(path.leaf_id, sub);
        }
    }
    Ok(subtrees)
}

impl McbmModel {
    fn check_schema(&self, schema: &ConceptSchema) -> Result<()> {
        if schema.fingerprint() != self.schema_fingerprint {
            return Err(Error::SchemaMismatch(
                "the model was fitted against a different concept schema".into(),
            ));
        }
        Ok(())
    }

    /// The matrix evaluation routes on: binarized predictions in predicted
    /// mode, the dataset's annotations in annotated mode.
    pub fn hard_route_matrix(&self, ds: &Dataset) -> Result<Matrix> {
        self.check_schema(&ds.schema)?;
        match self.concept_mode {
            ConceptMode::Predicted => {
                let probs = self.source.predict_probs(&ds.x, &ds.ids, &ds.schema)?;
                Ok(binarize_matrix(&probs, &ds.schema))
            }
            ConceptMode::Annotated => Ok(ds.c.clone()),
        }
    }

    /// Predicts labels: hard routing to a global leaf, then the leaf's
    /// sub-tree over the mixed row when one is stored, the leaf's majority
    /// class otherwise.
    pub fn evaluate(&self, ds: &Dataset) -> Result<Vec<usize>> {
        self.check_schema(&ds.schema)?;
        let probs = self.source.predict_probs(&ds.x, &ds.ids, &ds.schema)?;
        let hard = self.hard_route_matrix(ds)?;
        let mut out = Vec::with_capacity(ds.n());
        for i in 0..ds.n() {
            let leaf = self.global.route(hard.row(i));
            let label = match self.subtrees.get(&leaf.id) {
                None => leaf.majority_class(),
                Some(sub) => {
                    let row = mixed_row(hard.row(i), probs.row(i), &sub.feature_kinds);
                    sub.predict_row(&row)
                }
            };
            out.push(label);
        }
        Ok(out)
    }

    /// Predicts labels by replaying the model's decision rules as bare
    /// predicates: one matching global path per row, then one matching
    /// sub-tree path over the mixed row. Independent of the routing code.
    pub fn replay_rules(&self, ds: &Dataset) -> Result<Vec<usize>> {
        self.check_schema(&ds.schema)?;
        let probs = self.source.predict_probs(&ds.x, &ds.ids, &ds.schema)?;
        let hard = self.hard_route_matrix(ds)?;
        let global_paths = self.global.decompose();
        let sub_paths: BTreeMap<usize, (Vec<DecisionPath>, &DecisionTree)> = self
            .subtrees
            .iter()
            .map(|(&leaf, sub)| (leaf, (sub.decompose(), sub)))
            .collect();
        let mut out = Vec::with_capacity(ds.n());
        for i in 0..ds.n() {
            let path = match_unique_path(&global_paths, hard.row(i));
            let label = match sub_paths.get(&path.leaf_id) {
                None => path.predicted_class,
                Some((paths, sub)) => {
                    let row = mixed_row(hard.row(i), probs.row(i), &sub.feature_kinds);
                    match_unique_path(paths, &row).predicted_class
                }
            };
            out.push(label);
        }
        Ok(out)
    }

    /// Mean agreement between the source's binarized predictions and the
    /// dataset's annotations, over all concept cells.
    pub fn concept_accuracy(&self, ds: &Dataset) -> Result<f64> {
        self.check_schema(&ds.schema)?;
        source_concept_accuracy(&self.source, ds)
    }

    /// Folds the sub-trees into one tree over `2k` columns: `[0, k)` hard
    /// annotations, `[k, 2k)` predicted probabilities. Extended leaves are
    /// replaced by their sub-tree with soft features remapped into the upper
    /// block, so the merged tree reproduces `evaluate` exactly on
    /// `merged_inputs`.
    pub fn merge(&self) -> DecisionTree {
        let k = self.global.feature_names.len();
        let mut root = graft(&self.global.root, &self.subtrees, k);
        let mut next = 0;
        assign_ids(&mut root, &mut next);
        let mut names = self.global.feature_names.clone();
        names.extend(self.global.feature_names.iter().map(|n| soft_name(n)));
        let mut kinds = vec![FeatureKind::Hard; k];
        kinds.resize(2 * k, FeatureKind::Soft);
        DecisionTree {
            root,
            msl: self.msl,
            n_classes: self.global.n_classes,
            feature_names: names,
            feature_kinds: kinds,
        }
    }

    /// The `n x 2k` input rows the merged tree routes on: the hard routing
    /// matrix, then the predicted probabilities.
    pub fn merged_inputs(&self, ds: &Dataset) -> Result<Matrix> {
        let hard = self.hard_route_matrix(ds)?;
        let probs = self.source.predict_probs(&ds.x, &ds.ids, &ds.schema)?;
        let rows: Vec<Vec<f64>> = (0..ds.n())
            .map(|i| {
                let mut row = hard.row(i).to_vec();
                row.extend_from_slice(probs.row(i));
                row
            })
            .collect();
        Ok(Matrix::from_rows(&rows))
    }

    pub fn to_bundle(
        &self,
        prob_source_ref: impl Into<String>,
        calibration_ref: Option<String>,
    ) -> McbmBundle {
        McbmBundle {
            mode: self.mode,
            concept_mode: self.concept_mode,
            msl: self.msl,
            schema_fingerprint: self.schema_fingerprint,
            prob_source_ref: prob_source_ref.into(),
            calibration_ref,
            global_tree: self.global.clone(),
            subtrees: self.subtrees.clone(),
        }
    }
}

/// One routing row for a sub-tree: probabilities where the sub-tree's
/// columns are soft, hard values elsewhere.
fn mixed_row(hard: &[f64], probs: &[f64], kinds: &[FeatureKind]) -> Vec<f64> {
    kinds
        .iter()
        .enumerate()
        .map(|(j, kind)| match kind {
            FeatureKind::Hard => hard[j],
            FeatureKind::Soft => probs[j],
        })
        .collect()
}

fn match_unique_path<'a>(paths: &'a [DecisionPath], row: &[f64]) -> &'a DecisionPath {
    let mut hit: Option<&DecisionPath> = None;
    for path in paths {
        if path.matches(row) {
            assert!(
                hit.is_none(),
                "row matches decision paths {} and {}",
                hit.unwrap().leaf_id,
                path.leaf_id
            );
            hit = Some(path);
        }
    }
    hit.expect("decision paths must partition the feature space")
}

fn source_concept_accuracy(source: &ProbabilitySource, ds: &Dataset) -> Result<f64> {
    let probs = source.predict_probs(&ds.x, &ds.ids, &ds.schema)?;
    let bin = binarize_matrix(&probs, &ds.schema);
    let k = ds.schema.k();
    let mut hits = 0usize;
    for i in 0..ds.n() {
        for j in 0..k {
            if bin.get(i, j) == ds.c.get(i, j) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (ds.n() * k) as f64)
}

fn graft(node: &Node, subtrees: &BTreeMap<usize, DecisionTree>, k: usize) -> Node {
    match &node.kind {
        NodeKind::Leaf { .. } => match subtrees.get(&node.id) {
            Some(sub) => remap_subtree(&sub.root, node.depth, &sub.feature_kinds, k),
            None => node.clone(),
        },
        NodeKind::Internal {
            feature,
            threshold,
            left,
            right,
        } => Node {
            id: 0,
            depth: node.depth,
            n_samples: node.n_samples,
            class_counts: node.class_counts.clone(),
            kind: NodeKind::Internal {
                feature: *feature,
                threshold: *threshold,
                left: Box::new(graft(left, subtrees, k)),
                right: Box::new(graft(right, subtrees, k)),
            },
        },
    }
}

fn remap_subtree(node: &Node, base_depth: usize, kinds: &[FeatureKind], k: usize) -> Node {
    let kind = match &node.kind {
        NodeKind::Leaf { predicted_class } => NodeKind::Leaf {
            predicted_class: *predicted_class,
        },
        NodeKind::Internal {
            feature,
            threshold,
            left,
            right,
        } => NodeKind::Internal {
            feature: match kinds[*feature] {
                FeatureKind::Soft => k + *feature,
                FeatureKind::Hard => *feature,
            },
            threshold: *threshold,
            left: Box::new(remap_subtree(left, base_depth, kinds, k)),
            right: Box::new(remap_subtree(right, base_depth, kinds, k)),
        },
    };
    Node {
        id: 0,
        depth: base_depth + node.depth,
        n_samples: node.n_samples,
        class_counts: node.class_counts.clone(),
        kind,
    }
}

/// Baseline label predictors sharing the tree conventions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    /// Tree on hard annotations, routed on hard values.
    Hard,
    /// The hard tree, routed on raw predicted probabilities.
    Independent,
    /// Tree fitted and routed on predicted probabilities.
    SequentialSoft,
}

impl std::fmt::Display for BaselineVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BaselineVariant::Hard => write!(f, "hard"),
            BaselineVariant::Independent => write!(f, "independent"),
            BaselineVariant::SequentialSoft => write!(f, "sequential_soft"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub variant: BaselineVariant,
    pub tree: DecisionTree,
    pub source: ProbabilitySource,
    pub concept_mode: ConceptMode,
    pub schema_fingerprint: u64,
}

pub fn fit_baseline(
    train: &Dataset,
    source: ProbabilitySource,
    msl: usize,
    variant: BaselineVariant,
    concept_mode: ConceptMode,
) -> Result<BaselineModel> {
    let schema = &train.schema;
    let tree = match variant {
        BaselineVariant::Hard | BaselineVariant::Independent => {
            let params = TreeParams::hard(schema.concepts.clone(), msl);
            fit_tree(&train.c, &train.y, schema.n_classes(), &params)?
        }
        BaselineVariant::SequentialSoft => {
            let probs = source.predict_probs(&train.x, &train.ids, schema)?;
            let names = schema.concepts.iter().map(|n| soft_name(n)).collect();
            let params = TreeParams::soft(names, msl);
            fit_tree(&probs, &train.y, schema.n_classes(), &params)?
        }
    };
    Ok(BaselineModel {
        variant,
        tree,
        source,
        concept_mode,
        schema_fingerprint: schema.fingerprint(),
    })
}

impl BaselineModel {
    fn check_schema(&self, schema: &ConceptSchema) -> Result<()> {
        if schema.fingerprint() != self.schema_fingerprint {
            return Err(Error::SchemaMismatch(
                "the baseline was fitted against a different concept schema".into(),
            ));
        }
        Ok(())
    }

    /// The matrix this baseline routes on.
    pub fn routing_matrix(&self, ds: &Dataset) -> Result<Matrix> {
        self.check_schema(&ds.schema)?;
        match self.variant {
            BaselineVariant::Hard => match self.concept_mode {
                ConceptMode::Annotated => Ok(ds.c.clone()),
                ConceptMode::Predicted => {
                    let probs = self.source.predict_probs(&ds.x, &ds.ids, &ds.schema)?;
                    Ok(binarize_matrix(&probs, &ds.schema))
                }
            },
            BaselineVariant::Independent | BaselineVariant::SequentialSoft => {
                self.source.predict_probs(&ds.x, &ds.ids, &ds.schema)
            }
        }
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let input = self.routing_matrix(ds)?;
        Ok(self.tree.predict(&input))
    }

    pub fn replay_rules(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let input = self.routing_matrix(ds)?;
        Ok(leakage::replay_tree_rules(&self.tree, &input))
    }

    pub fn concept_accuracy(&self, ds: &Dataset) -> Result<f64> {
        self.check_schema(&ds.schema)?;
        source_concept_accuracy(&self.source, ds)
    }
}

/// Serialized model: trees inline, probability source and calibration by
/// file reference so one predictor can back several fits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McbmBundle {
    pub mode: Mode,
    pub concept_mode: ConceptMode,
    pub msl: usize,
    pub schema_fingerprint: u64,
    pub prob_source_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_ref: Option<String>,
    pub global_tree: DecisionTree,
    pub subtrees: BTreeMap<usize, DecisionTree>,
}

impl McbmBundle {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    pub fn from_json(json: &str) -> Result<McbmBundle> {
        serde_json::from_str(json)
            .map_err(|e| Error::Dataset(format!("unparseable model bundle JSON: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<McbmBundle> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        McbmBundle::from_json(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_pretty()).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds the runtime model around a resolved probability source,
    /// re-checking the structural invariants a hand-edited file could break.
    pub fn into_model(self, source: ProbabilitySource) -> Result<McbmModel> {
        source.check_mode(self.mode)?;
        let bad = |m: String| Error::Dataset(format!("invalid model bundle: {m}"));
        let k = self.global_tree.feature_names.len();
        let leaves: BTreeMap<usize, usize> = self
            .global_tree
            .nodes()
            .iter()
            .filter(|n| n.is_leaf())
            .map(|n| (n.id, n.n_samples))
            .collect();
        for (leaf_id, sub) in &self.subtrees {
            let leaf_n = leaves.get(leaf_id).ok_or_else(|| {
                bad(format!("sub-tree attached to non-leaf node {leaf_id}"))
            })?;
            if sub.root.n_samples != *leaf_n {
                return Err(bad(format!(
                    "sub-tree at leaf {leaf_id} was fitted on {} samples, the leaf holds {leaf_n}",
                    sub.root.n_samples
                )));
            }
            if sub.feature_names.len() != k {
                return Err(bad(format!(
                    "sub-tree at leaf {leaf_id} has {} columns, the global tree has {k}",
                    sub.feature_names.len()
                )));
            }
            if sub.n_classes != self.global_tree.n_classes {
                return Err(bad(format!(
                    "sub-tree at leaf {leaf_id} predicts {} classes, the global tree {}",
                    sub.n_classes, self.global_tree.n_classes
                )));
            }
            let qualifies = leakage::soft_splits(sub)
                .iter()
                .any(|s| s.gain_bits > MIN_LEAKY_GAIN_BITS);
            if !qualifies {
                return Err(bad(format!(
                    "sub-tree at leaf {leaf_id} has no soft split above {MIN_LEAKY_GAIN_BITS} bits"
                )));
            }
        }
        Ok(McbmModel {
            global: self.global_tree,
            subtrees: self.subtrees,
            source,
            mode: self.mode,
            concept_mode: self.concept_mode,
            msl: self.msl,
            schema_fingerprint: self.schema_fingerprint,
        })
    }
}
