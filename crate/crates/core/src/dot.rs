//! Graphviz DOT rendering of fitted trees.
//!
//! Hard-split nodes are drawn dark and elliptic; soft-split nodes (the leaky
//! ones) light and boxed, so extensions stand out at a glance. Output is a
//! pure function of the tree plus annotations — byte-identical across runs.

use std::collections::BTreeMap;

use crate::tree::{DecisionTree, FeatureKind, Node, NodeKind};

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Renders `tree` as a DOT digraph. `annotations` maps node ids to an extra
/// label line (e.g. a per-path leakage figure).
pub fn export_dot(tree: &DecisionTree, annotations: &BTreeMap<usize, String>) -> String {
    let mut out = String::from("digraph tree {\n");
    out.push_str("  graph [ordering=out];\n");
    out.push_str("  node [fontname=\"Helvetica\", fontsize=11];\n");
    out.push_str("  edge [fontname=\"Helvetica\", fontsize=9];\n");
    render_node(&tree.root, tree, annotations, &mut out);
    render_edges(&tree.root, &mut out);
    out.push_str("}\n");
    out
}

fn render_node(
    node: &Node,
    tree: &DecisionTree,
    annotations: &BTreeMap<usize, String>,
    out: &mut String,
) {
    let extra = annotations
        .get(&node.id)
        .map(|a| format!("\\n{}", escape(a)))
        .unwrap_or_default();
    let counts = format!("{:?}", node.class_counts);
    match &node.kind {
        NodeKind::Leaf { predicted_class } => {
            out.push_str(&format!(
                "  n{} [shape=ellipse, style=filled, fillcolor=\"#ffffff\", \
                 label=\"{}\\nn={} {}{}\"];\n",
                node.id,
                escape(&format!("class {predicted_class}")),
                node.n_samples,
                counts,
                extra
            ));
        }
        NodeKind::Internal {
            feature,
            threshold,
            left,
            right,
        } => {
            let name = escape(&tree.feature_names[*feature]);
            let label = format!("{name} <= {threshold}\\nn={} {counts}{extra}", node.n_samples);
            match tree.feature_kinds[*feature] {
                FeatureKind::Hard => out.push_str(&format!(
                    "  n{} [shape=ellipse, style=filled, fillcolor=\"#4a4a4a\", \
                     fontcolor=\"#ffffff\", label=\"{label}\"];\n",
                    node.id
                )),
                FeatureKind::Soft => out.push_str(&format!(
                    "  n{} [shape=box, style=filled, fillcolor=\"#e8e8e8\", \
                     label=\"{label}\"];\n",
                    node.id
                )),
            }
            render_node(left, tree, annotations, out);
            render_node(right, tree, annotations, out);
        }
    }
}

fn render_edges(node: &Node, out: &mut String) {
    if let NodeKind::Internal { left, right, .. } = &node.kind {
        out.push_str(&format!(
            "  n{} -> n{} [label=\"yes\"];\n  n{} -> n{} [label=\"no\"];\n",
            node.id, left.id, node.id, right.id
        ));
        render_edges(left, out);
        render_edges(right, out);
    }
}
