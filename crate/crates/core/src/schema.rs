//! Concept schema: which concept columns exist, how they group, and the
//! label classes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Describes the concept columns of a dataset.
///
/// Every concept index in `0..concepts.len()` belongs either to exactly one
/// mutually exclusive group (a one-hot block) or to `independents`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSchema {
    /// Column names, one per concept, in column order.
    pub concepts: Vec<String>,
    /// Mutually exclusive groups as lists of concept indices (each size >= 2).
    pub groups: Vec<Vec<usize>>,
    /// Concept indices not covered by any group.
    pub independents: Vec<usize>,
    /// Class names; the label column stores indices into this list.
    pub classes: Vec<String>,
}

impl ConceptSchema {
    pub fn new(
        concepts: Vec<String>,
        groups: Vec<Vec<usize>>,
        independents: Vec<usize>,
        classes: Vec<String>,
    ) -> Result<Self> {
        let schema = ConceptSchema {
            concepts,
            groups,
            independents,
            classes,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Number of concept columns.
    pub fn k(&self) -> usize {
        self.concepts.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Checks the partition property and all size constraints.
    pub fn validate(&self) -> Result<()> {
        let k = self.concepts.len();
        if k == 0 {
            return Err(Error::Schema("schema declares no concepts".into()));
        }
        for (i, name) in self.concepts.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Schema(format!("concept {i} has an empty name")));
            }
            if self.concepts[..i].contains(name) {
                return Err(Error::Schema(format!("duplicate concept name '{name}'")));
            }
        }
        if self.classes.len() < 2 {
            return Err(Error::Schema(format!(
                "need at least 2 classes, got {}",
                self.classes.len()
            )));
        }
        for (i, name) in self.classes.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Schema(format!("class {i} has an empty name")));
            }
            if self.classes[..i].contains(name) {
                return Err(Error::Schema(format!("duplicate class name '{name}'")));
            }
        }

        // Group/independent membership must partition 0..k.
        let mut owner = vec![None::<String>; k];
        let mut claim = |idx: usize, who: String| -> Result<()> {
            if idx >= k {
                return Err(Error::Schema(format!(
                    "{who} references concept index {idx}, but only {k} concepts exist"
                )));
            }
            match &owner[idx] {
                Some(prev) => Err(Error::Schema(format!(
                    "concept index {idx} appears in both {prev} and {who}"
                ))),
                None => {
                    owner[idx] = Some(who);
                    Ok(())
                }
            }
        };
        for (g, members) in self.groups.iter().enumerate() {
            if members.len() < 2 {
                return Err(Error::Schema(format!(
                    "group {g} has {} member(s); groups need at least 2",
                    members.len()
                )));
            }
            for &idx in members {
                claim(idx, format!("group {g}"))?;
            }
        }
        for &idx in &self.independents {
            claim(idx, "independents".into())?;
        }
        if let Some(idx) = owner.iter().position(Option::is_none) {
            return Err(Error::Schema(format!(
                "concept index {idx} ('{}') belongs to no group and is not listed as independent",
                self.concepts[idx]
            )));
        }
        Ok(())
    }

    /// Stable fingerprint over the schema content, stored in model files so a
    /// model cannot silently be applied to a different concept layout.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_string(self).expect("schema serializes");
        crate::rng::fnv1a(json.as_bytes())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let schema: ConceptSchema = serde_json::from_str(json)
            .map_err(|e| Error::Schema(format!("unparseable schema JSON: {e}")))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: ConceptSchema =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_pretty()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn accepts_a_valid_partition() {
        let s = ConceptSchema::new(
            names("c", 5),
            vec![vec![0, 1, 2]],
            vec![3, 4],
            names("y", 3),
        )
        .unwrap();
        assert_eq!(s.k(), 5);
        assert_eq!(s.n_classes(), 3);
        assert_eq!(s.class_index("y2"), Some(2));
    }

    #[test]
    fn rejects_overlap_gap_and_small_groups() {
        let overlap = ConceptSchema::new(names("c", 3), vec![vec![0, 1]], vec![1, 2], names("y", 2));
        assert!(matches!(overlap, Err(Error::Schema(m)) if m.contains("appears in both")));

        let gap = ConceptSchema::new(names("c", 3), vec![vec![0, 1]], vec![], names("y", 2));
        assert!(matches!(gap, Err(Error::Schema(m)) if m.contains("belongs to no group")));

        let small = ConceptSchema::new(names("c", 3), vec![vec![0]], vec![1, 2], names("y", 2));
        assert!(matches!(small, Err(Error::Schema(m)) if m.contains("at least 2")));
    }

    #[test]
    fn rejects_single_class_and_bad_indices() {
        let one_class = ConceptSchema::new(names("c", 2), vec![], vec![0, 1], names("y", 1));
        assert!(one_class.is_err());

        let oob = ConceptSchema::new(names("c", 2), vec![vec![0, 5]], vec![1], names("y", 2));
        assert!(matches!(oob, Err(Error::Schema(m)) if m.contains("index 5")));
    }

    #[test]
    fn json_round_trip_preserves_schema() {
        let s = ConceptSchema::new(
            names("c", 4),
            vec![vec![1, 2]],
            vec![0, 3],
            names("y", 2),
        )
        .unwrap();
        let back = ConceptSchema::from_json(&s.to_json_pretty()).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.fingerprint(), back.fingerprint());
    }

    #[test]
    fn fingerprint_distinguishes_layouts() {
        let a = ConceptSchema::new(names("c", 2), vec![], vec![0, 1], names("y", 2)).unwrap();
        let b = ConceptSchema::new(names("c", 2), vec![vec![0, 1]], vec![], names("y", 2)).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
