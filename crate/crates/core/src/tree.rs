//! Binary classification trees with an entropy split criterion (bits).
//!
//! Conventions, fixed across the crate so that trees fitted on binary
//! concept columns behave identically under 0/1 values and probabilities:
//! - candidate thresholds are midpoints between consecutive distinct sorted
//!   feature values, so binary columns always split at 0.5;
//! - `value <= threshold` goes left;
//! - a node splits only while impure, only if both children keep at least
//!   `msl` samples, and only with non-negative information gain — zero-gain
//!   splits are allowed, which lets XOR-like label structure unfold;
//! - gain ties prefer the lower feature index, then the lower threshold;
//! - `msl` is the only complexity control; there is no pruning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leakage::entropy_bits;
use crate::matrix::Matrix;

/// Whether a feature column carries hard 0/1 annotations or predicted
/// probabilities. Trees record this per column; reports and DOT rendering
/// use it to tell leaky (soft) splits from hard ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Hard,
    Soft,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    /// Preorder index within its tree; the root is 0.
    pub id: usize,
    pub depth: usize,
    pub n_samples: usize,
    pub class_counts: Vec<usize>,
    pub kind: NodeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Internal {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        predicted_class: usize,
    },
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf { .. })
    }

    /// Majority class of this node's training samples (lowest index wins ties).
    pub fn majority_class(&self) -> usize {
        argmax_counts(&self.class_counts)
    }
}

pub(crate) fn argmax_counts(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeParams {
    /// Minimum samples every leaf must keep (>= 1).
    pub msl: usize,
    /// Optional depth cap; `None` grows until no admissible split remains.
    pub max_depth: Option<usize>,
    pub feature_names: Vec<String>,
    pub feature_kinds: Vec<FeatureKind>,
}

impl TreeParams {
    /// Parameters for a tree over hard concept columns.
    pub fn hard(feature_names: Vec<String>, msl: usize) -> Self {
        let kinds = vec![FeatureKind::Hard; feature_names.len()];
        TreeParams {
            msl,
            max_depth: None,
            feature_names,
            feature_kinds: kinds,
        }
    }

    /// Same names, all columns soft.
    pub fn soft(feature_names: Vec<String>, msl: usize) -> Self {
        let kinds = vec![FeatureKind::Soft; feature_names.len()];
        TreeParams {
            msl,
            max_depth: None,
            feature_names,
            feature_kinds: kinds,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTree {
    pub root: Node,
    pub msl: usize,
    pub n_classes: usize,
    pub feature_names: Vec<String>,
    pub feature_kinds: Vec<FeatureKind>,
}

/// One routing decision on a path: `feature <= threshold` (Le) or `>` (Gt).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Le,
    Gt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathCondition {
    pub feature: usize,
    pub threshold: f64,
    pub direction: Direction,
}

impl PathCondition {
    pub fn matches(&self, row: &[f64]) -> bool {
        match self.direction {
            Direction::Le => row[self.feature] <= self.threshold,
            Direction::Gt => row[self.feature] > self.threshold,
        }
    }

    pub fn render(&self, names: &[String]) -> String {
        let op = match self.direction {
            Direction::Le => "<=",
            Direction::Gt => ">",
        };
        format!("{} {} {}", names[self.feature], op, self.threshold)
    }
}

/// A root-to-leaf path of the fitted tree.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionPath {
    pub leaf_id: usize,
    pub conditions: Vec<PathCondition>,
    /// Distinct feature indices used along the path, ascending.
    pub concept_set: Vec<usize>,
    pub n_samples: usize,
    pub class_counts: Vec<usize>,
    pub predicted_class: usize,
}

impl DecisionPath {
    /// Does `row` satisfy every condition of this path?
    pub fn matches(&self, row: &[f64]) -> bool {
        self.conditions.iter().all(|c| c.matches(row))
    }
}

struct FitContext<'a> {
    features: &'a Matrix,
    labels: &'a [usize],
    n_classes: usize,
    msl: usize,
    max_depth: Option<usize>,
}

/// Fits a tree on `features` (n x p) and `labels` (values in `0..n_classes`).
pub fn fit_tree(
    features: &Matrix,
    labels: &[usize],
    n_classes: usize,
    params: &TreeParams,
) -> Result<DecisionTree> {
    let n = features.rows();
    let p = features.cols();
    if params.msl == 0 {
        return Err(Error::InvalidArgument("msl must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cannot fit a tree on 0 samples".into()));
    }
    if params.msl > n {
        return Err(Error::InvalidArgument(format!(
            "msl {} exceeds the {} training samples",
            params.msl, n
        )));
    }
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if n_classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    if params.feature_names.len() != p || params.feature_kinds.len() != p {
        return Err(Error::InvalidArgument(format!(
            "feature metadata width {} / {} does not match the {} feature columns",
            params.feature_names.len(),
            params.feature_kinds.len(),
            p
        )));
    }
    if let Some(pos) = features.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "feature column {} contains a non-finite value",
            pos % p.max(1)
        )));
    }

    let ctx = FitContext {
        features,
        labels,
        n_classes,
        msl: params.msl,
        max_depth: params.max_depth,
    };
    let idx: Vec<usize> = (0..n).collect();
    let mut root = grow(&ctx, idx, 0);
    assign_ids(&mut root, &mut 0);
    Ok(DecisionTree {
        root,
        msl: params.msl,
        n_classes,
        feature_names: params.feature_names.clone(),
        feature_kinds: params.feature_kinds.clone(),
    })
}

fn count_classes(labels: &[usize], idx: &[usize], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_classes];
    for &i in idx {
        counts[labels[i]] += 1;
    }
    counts
}

fn grow(ctx: &FitContext, idx: Vec<usize>, depth: usize) -> Node {
    let counts = count_classes(ctx.labels, &idx, ctx.n_classes);
    let n = idx.len();
    let impure = counts.iter().filter(|&&c| c > 0).count() > 1;
    let depth_ok = ctx.max_depth.is_none_or(|d| depth < d);

    let split = if impure && depth_ok && n >= 2 * ctx.msl {
        best_split(ctx, &idx, &counts)
    } else {
        None
    };

    match split {
        None => {
            let predicted_class = argmax_counts(&counts);
            Node {
                id: 0,
                depth,
                n_samples: n,
                class_counts: counts,
                kind: NodeKind::Leaf { predicted_class },
            }
        }
        Some((feature, threshold, _gain)) => {
            let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
                .into_iter()
                .partition(|&i| ctx.features.get(i, feature) <= threshold);
            let left = grow(ctx, left_idx, depth + 1);
            let right = grow(ctx, right_idx, depth + 1);
            Node {
                id: 0,
                depth,
                n_samples: n,
                class_counts: counts,
                kind: NodeKind::Internal {
                    feature,
                    threshold,
                    left: Box::new(left),
                    right: Box::new(right),
                },
            }
        }
    }
}

/// Best admissible split: maximal information gain in bits; ties resolved
/// toward the lower feature index, then the lower threshold (guaranteed by
/// scan order plus strict improvement).
fn best_split(ctx: &FitContext, idx: &[usize], parent_counts: &[usize]) -> Option<(usize, f64, f64)> {
    let n = idx.len();
    let n_f = n as f64;
    let parent_entropy = entropy_bits(parent_counts);
    let mut best: Option<(usize, f64, f64)> = None;

    let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(n);
    for feature in 0..ctx.features.cols() {
        pairs.clear();
        pairs.extend(
            idx.iter()
                .map(|&i| (ctx.features.get(i, feature), ctx.labels[i])),
        );
        pairs.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).expect("finite feature values"));

        let mut left_counts = vec![0usize; ctx.n_classes];
        let mut left_n = 0usize;
        for i in 0..n - 1 {
            left_counts[pairs[i].1] += 1;
            left_n += 1;
            if pairs[i].0 == pairs[i + 1].0 {
                continue;
            }
            let right_n = n - left_n;
            if left_n < ctx.msl || right_n < ctx.msl {
                continue;
            }
            let threshold = (pairs[i].0 + pairs[i + 1].0) / 2.0;
            // Adjacent floats can make the midpoint collapse onto the upper
            // value, which would break the <=-goes-left partition; skip.
            if threshold >= pairs[i + 1].0 {
                continue;
            }
            let right_counts: Vec<usize> = parent_counts
                .iter()
                .zip(&left_counts)
                .map(|(&p, &l)| p - l)
                .collect();
            let gain = parent_entropy
                - (left_n as f64 / n_f) * entropy_bits(&left_counts)
                - (right_n as f64 / n_f) * entropy_bits(&right_counts);
            if gain >= 0.0 && best.as_ref().is_none_or(|&(_, _, g)| gain > g) {
                best = Some((feature, threshold, gain));
            }
        }
    }
    best
}

pub(crate) fn assign_ids(node: &mut Node, next: &mut usize) {
    node.id = *next;
    *next += 1;
    if let NodeKind::Internal { left, right, .. } = &mut node.kind {
        assign_ids(left, next);
        assign_ids(right, next);
    }
}

impl DecisionTree {
    /// Routes a row to its leaf. Values exactly on a threshold go left.
    pub fn route(&self, row: &[f64]) -> &Node {
        let mut node = &self.root;
        loop {
            match &node.kind {
                NodeKind::Leaf { .. } => return node,
                NodeKind::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if row[*feature] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> usize {
        match self.route(row).kind {
            NodeKind::Leaf { predicted_class } => predicted_class,
            NodeKind::Internal { .. } => unreachable!("route returns leaves"),
        }
    }

    pub fn predict(&self, features: &Matrix) -> Vec<usize> {
        (0..features.rows())
            .map(|i| self.predict_row(features.row(i)))
            .collect()
    }

    /// All nodes in preorder (ids ascending).
    pub fn nodes(&self) -> Vec<&Node> {
        let mut out = Vec::new();
        fn walk<'a>(node: &'a Node, out: &mut Vec<&'a Node>) {
            out.push(node);
            if let NodeKind::Internal { left, right, .. } = &node.kind {
                walk(left, out);
                walk(right, out);
            }
        }
        walk(&self.root, &mut out);
        out
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes().len()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes().iter().filter(|n| n.is_leaf()).count()
    }

    pub fn depth(&self) -> usize {
        self.nodes().iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Training accuracy implied by the stored leaf counts.
    pub fn training_accuracy(&self) -> f64 {
        let correct: usize = self
            .nodes()
            .iter()
            .filter(|n| n.is_leaf())
            .map(|n| n.class_counts[n.majority_class()])
            .sum();
        correct as f64 / self.root.n_samples as f64
    }

    /// Decomposes the tree into its decision paths, ordered by leaf id.
    pub fn decompose(&self) -> Vec<DecisionPath> {
        let mut paths = Vec::new();
        let mut conditions = Vec::new();
        fn walk(node: &Node, conditions: &mut Vec<PathCondition>, paths: &mut Vec<DecisionPath>) {
            match &node.kind {
                NodeKind::Leaf { predicted_class } => {
                    let mut concept_set: Vec<usize> =
                        conditions.iter().map(|c| c.feature).collect();
                    concept_set.sort_unstable();
                    concept_set.dedup();
                    paths.push(DecisionPath {
                        leaf_id: node.id,
                        conditions: conditions.clone(),
                        concept_set,
                        n_samples: node.n_samples,
                        class_counts: node.class_counts.clone(),
                        predicted_class: *predicted_class,
                    });
                }
                NodeKind::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    conditions.push(PathCondition {
                        feature: *feature,
                        threshold: *threshold,
                        direction: Direction::Le,
                    });
                    walk(left, conditions, paths);
                    conditions.pop();
                    conditions.push(PathCondition {
                        feature: *feature,
                        threshold: *threshold,
                        direction: Direction::Gt,
                    });
                    walk(right, conditions, paths);
                    conditions.pop();
                }
            }
        }
        walk(&self.root, &mut conditions, &mut paths);
        paths
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&TreeFile::from_tree(self)).expect("tree serializes")
    }

    pub fn from_json(json: &str) -> Result<DecisionTree> {
        let file: TreeFile = serde_json::from_str(json)
            .map_err(|e| Error::Dataset(format!("unparseable tree JSON: {e}")))?;
        file.into_tree()
    }
}

impl Serialize for DecisionTree {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        TreeFile::from_tree(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DecisionTree {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let file = TreeFile::deserialize(deserializer)?;
        file.into_tree().map_err(serde::de::Error::custom)
    }
}

/// Flat serialized form: a `nodes` array where internal nodes reference
/// children by id.
#[derive(Serialize, Deserialize)]
struct TreeFile {
    msl: usize,
    n_classes: usize,
    feature_names: Vec<String>,
    feature_kinds: Vec<FeatureKind>,
    nodes: Vec<NodeRecord>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    depth: usize,
    kind: String,
    n_samples: usize,
    counts: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    children: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    predicted_class: Option<usize>,
}

impl TreeFile {
    fn from_tree(tree: &DecisionTree) -> TreeFile {
        let nodes = tree
            .nodes()
            .into_iter()
            .map(|n| {
                let (kind, feature, threshold, children, predicted) = match &n.kind {
                    NodeKind::Internal {
                        feature,
                        threshold,
                        left,
                        right,
                    } => (
                        "internal".to_string(),
                        Some(*feature),
                        Some(*threshold),
                        Some([left.id, right.id]),
                        None,
                    ),
                    NodeKind::Leaf { predicted_class } => {
                        ("leaf".to_string(), None, None, None, Some(*predicted_class))
                    }
                };
                NodeRecord {
                    id: n.id,
                    depth: n.depth,
                    kind,
                    n_samples: n.n_samples,
                    counts: n.class_counts.clone(),
                    feature,
                    threshold,
                    children,
                    predicted_class: predicted,
                }
            })
            .collect();
        TreeFile {
            msl: tree.msl,
            n_classes: tree.n_classes,
            feature_names: tree.feature_names.clone(),
            feature_kinds: tree.feature_kinds.clone(),
            nodes,
        }
    }

    fn into_tree(self) -> Result<DecisionTree> {
        use std::collections::BTreeMap;
        let bad = |m: String| Error::Dataset(format!("invalid tree JSON: {m}"));
        if self.nodes.is_empty() {
            return Err(bad("no nodes".into()));
        }
        let mut by_id: BTreeMap<usize, &NodeRecord> = BTreeMap::new();
        for rec in &self.nodes {
            if by_id.insert(rec.id, rec).is_some() {
                return Err(bad(format!("duplicate node id {}", rec.id)));
            }
        }
        let root_id = self.nodes[0].id;

        fn build(
            id: usize,
            by_id: &std::collections::BTreeMap<usize, &NodeRecord>,
            n_classes: usize,
            visiting: &mut Vec<usize>,
            bad: &dyn Fn(String) -> Error,
        ) -> Result<Node> {
            if visiting.contains(&id) {
                return Err(bad(format!("node {id} is its own ancestor")));
            }
            let rec = by_id
                .get(&id)
                .ok_or_else(|| bad(format!("missing node id {id}")))?;
            if rec.counts.len() != n_classes {
                return Err(bad(format!(
                    "node {id} has {} counts for {} classes",
                    rec.counts.len(),
                    n_classes
                )));
            }
            let kind = match rec.kind.as_str() {
                "leaf" => NodeKind::Leaf {
                    predicted_class: rec
                        .predicted_class
                        .ok_or_else(|| bad(format!("leaf {id} lacks predicted_class")))?,
                },
                "internal" => {
                    let feature = rec
                        .feature
                        .ok_or_else(|| bad(format!("internal node {id} lacks feature")))?;
                    let threshold = rec
                        .threshold
                        .ok_or_else(|| bad(format!("internal node {id} lacks threshold")))?;
                    let [l, r] = rec
                        .children
                        .ok_or_else(|| bad(format!("internal node {id} lacks children")))?;
                    visiting.push(id);
                    let left = build(l, by_id, n_classes, visiting, bad)?;
                    let right = build(r, by_id, n_classes, visiting, bad)?;
                    visiting.pop();
                    NodeKind::Internal {
                        feature,
                        threshold,
                        left: Box::new(left),
                        right: Box::new(right),
                    }
                }
                other => return Err(bad(format!("unknown node kind '{other}'"))),
            };
            Ok(Node {
                id,
                depth: rec.depth,
                n_samples: rec.n_samples,
                class_counts: rec.counts.clone(),
                kind,
            })
        }

        let mut visiting = Vec::new();
        let root = build(root_id, &by_id, self.n_classes, &mut visiting, &bad)?;
        let tree = DecisionTree {
            root,
            msl: self.msl,
            n_classes: self.n_classes,
            feature_names: self.feature_names,
            feature_kinds: self.feature_kinds,
        };
        if tree.feature_names.len() != tree.feature_kinds.len() {
            return Err(bad("feature_names and feature_kinds disagree".into()));
        }
        Ok(tree)
    }
}
