//! Line-delimited native tree files (`.ndtree`).
//!
//! One JSON object per line:
//! `{"id": str, "label": 0|1, "nodes": [{"id": int, "parent": int|null, "text": str}]}`
//! optionally extended with `"states"`/`"stances"` maps (node id → 0|1) and a
//! `"features"` matrix. A leading `{"meta": {...}}` line records provenance and
//! is skipped by readers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stance::StateLabels;
use crate::tree::{build_tree, PropagationTree, RawNode, TreeError};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: i64,
    pub parent: Option<i64>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeRecord {
    pub id: String,
    pub label: u8,
    pub nodes: Vec<NodeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<BTreeMap<usize, u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stances: Option<BTreeMap<usize, u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
}

/// A tree plus whatever annotations travel with it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTree {
    pub tree: PropagationTree,
    pub labels: Option<StateLabels>,
}

impl LabeledTree {
    pub fn unlabeled(tree: PropagationTree) -> Self {
        Self { tree, labels: None }
    }
}

impl TreeRecord {
    pub fn from_tree(item: &LabeledTree, with_features: bool) -> Self {
        let tree = &item.tree;
        let nodes = tree
            .nodes()
            .iter()
            .map(|n| NodeRecord {
                id: n.id as i64,
                parent: n.parent.map(|p| p as i64),
                text: n.text.clone(),
                timestamp: n.timestamp,
            })
            .collect();
        let features = if with_features {
            tree.features()
                .map(|x| x.rows().into_iter().map(|r| r.to_vec()).collect())
        } else {
            None
        };
        Self {
            id: tree.event_id().to_string(),
            label: tree.label(),
            nodes,
            states: item.labels.as_ref().map(|l| l.states.clone()),
            stances: item.labels.as_ref().map(|l| l.stances.clone()),
            features,
        }
    }

    /// Validates the record. Node ids in the file are taken to be canonical
    /// once re-built, so state maps are only accepted for canonical files.
    pub fn into_tree(self) -> Result<LabeledTree, String> {
        let raw: Vec<RawNode> = self
            .nodes
            .into_iter()
            .map(|n| RawNode {
                id: n.id,
                parent: n.parent,
                text: n.text,
                timestamp: n.timestamp,
            })
            .collect();
        let canonical = raw
            .iter()
            .enumerate()
            .all(|(i, n)| n.id == i as i64 && n.parent.is_none_or(|p| p < n.id));
        let mut tree = build_tree(self.id, self.label, raw).map_err(|e| e.to_string())?;
        if let Some(rows) = self.features {
            let h = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != h) {
                return Err("ragged feature matrix".into());
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            let x = Array2::from_shape_vec((flat.len() / h.max(1), h), flat)
                .map_err(|e| e.to_string())?;
            tree = tree.with_features(x).map_err(|e| e.to_string())?;
        }
        let labels = match (self.states, self.stances) {
            (None, None) => None,
            (states, stances) => {
                if !canonical {
                    return Err("state labels require canonical node order".into());
                }
                let labels = match (states, stances) {
                    (Some(states), Some(stances)) => StateLabels {
                        event_id: tree.event_id().to_string(),
                        states,
                        stances,
                    },
                    (Some(states), None) => StateLabels::from_states(&tree, states),
                    (None, Some(stances)) => StateLabels::from_stances(&tree, stances),
                    (None, None) => unreachable!(),
                };
                labels.validate(&tree).map_err(|e| e.to_string())?;
                Some(labels)
            }
        };
        Ok(LabeledTree { tree, labels })
    }
}

#[derive(Debug, Default)]
pub struct ReadOutcome {
    pub trees: Vec<LabeledTree>,
    pub skipped: usize,
    pub meta: Option<serde_json::Value>,
}

/// Reads a native file. Malformed or invalid events are skipped and counted.
pub fn read_ndtree(path: impl AsRef<Path>) -> Result<ReadOutcome, FormatError> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut out = ReadOutcome::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("line {}: {e}", i + 1);
                out.skipped += 1;
                continue;
            }
        };
        if let Some(meta) = value.get("meta").filter(|_| value.get("nodes").is_none()) {
            out.meta = Some(meta.clone());
            continue;
        }
        let parsed = serde_json::from_value::<TreeRecord>(value)
            .map_err(|e| e.to_string())
            .and_then(TreeRecord::into_tree);
        match parsed {
            Ok(t) => out.trees.push(t),
            Err(e) => {
                log::warn!("line {}: skipping event: {e}", i + 1);
                out.skipped += 1;
            }
        }
    }
    if out.skipped > 0 {
        log::warn!("skipped {} malformed events", out.skipped);
    }
    Ok(out)
}

pub fn write_ndtree<W: Write>(
    mut w: W,
    trees: &[LabeledTree],
    meta: Option<&serde_json::Value>,
    with_features: bool,
) -> Result<(), FormatError> {
    if let Some(meta) = meta {
        serde_json::to_writer(&mut w, &serde_json::json!({ "meta": meta }))
            .map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    for t in trees {
        serde_json::to_writer(&mut w, &TreeRecord::from_tree(t, with_features))
            .map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ndtree_file(
    path: impl AsRef<Path>,
    trees: &[LabeledTree],
    meta: Option<&serde_json::Value>,
    with_features: bool,
) -> Result<(), FormatError> {
    let w = BufWriter::new(File::create(path)?);
    write_ndtree(w, trees, meta, with_features)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_good_lines_and_skips_bad_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ndtree");
        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"meta": {{"version": "x"}}}}"#).unwrap();
        writeln!(f, r#"{{"id": "a", "label": 1, "nodes": [{{"id": 0, "parent": null, "text": "src"}}, {{"id": 1, "parent": 0, "text": "fake"}}]}}"#).unwrap();
        writeln!(f, r#"{{"id": "b", "label": 0, "nodes": [{{"id": 0, "parent": null, "text": "s"}}, {{"id": 1, "parent": 2, "text": "x"}}, {{"id": 2, "parent": 1, "text": "y"}}]}}"#).unwrap();
        writeln!(f, "not json").unwrap();
        writeln!(f, r#"{{"id": "c", "label": 0, "nodes": [{{"id": 0, "parent": null, "text": "s"}}]}}"#).unwrap();
        drop(f);
        let out = read_ndtree(&path).unwrap();
        assert_eq!(out.trees.len(), 2);
        assert_eq!(out.skipped, 2);
        assert_eq!(out.meta.unwrap()["version"], "x");
    }

    #[test]
    fn labeled_round_trip_preserves_everything() {
        let tree = build_tree(
            "e1",
            1,
            vec![
                RawNode::new(0, None, "src"),
                RawNode::new(1, Some(0), "no"),
                RawNode::new(2, Some(1), "yes"),
            ],
        )
        .unwrap()
        .with_features(Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64 * 0.5))
        .unwrap();
        let labels = StateLabels::from_stances(&tree, BTreeMap::from([(1, 1), (2, 1)]));
        let item = LabeledTree {
            tree,
            labels: Some(labels),
        };
        let mut buf = Vec::new();
        write_ndtree(&mut buf, std::slice::from_ref(&item), None, true).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert!(line.contains(r#""states":{"1":1,"2":0}"#));
        let record: TreeRecord = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(record.into_tree().unwrap(), item);
    }

    #[test]
    fn inconsistent_labels_are_rejected() {
        let line = r#"{"id": "a", "label": 1, "nodes": [{"id": 0, "parent": null, "text": "s"}, {"id": 1, "parent": 0, "text": "x"}, {"id": 2, "parent": 1, "text": "y"}], "states": {"1": 1, "2": 1}, "stances": {"1": 1, "2": 1}}"#;
        let record: TreeRecord = serde_json::from_str(line).unwrap();
        assert!(record.into_tree().is_err());
    }
}
