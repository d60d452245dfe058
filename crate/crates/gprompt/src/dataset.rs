//! JSON Lines datasets and JSON split files.
//!
//! One graph per line:
//!
//! ```json
//! {"features": [[0.1, 0.2], [0.3, 0.4]], "edges": [[0, 1]], "label": 1}
//! ```
//!
//! `label` is a class index or, for multi-task data, an array of `0`, `1`
//! and `null` (missing). An optional `node_labels` array carries per-node
//! classes for ego-subgraph conversion.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use gprompt_core::graph::{Dataset, GraphInstance, Label, Split};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    features: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    label: LabelRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_labels: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum LabelRecord {
    Class(usize),
    Tasks(Vec<Option<u8>>),
}

impl GraphRecord {
    fn from_graph(g: &GraphInstance) -> Self {
        let d = g.feature_dim();
        GraphRecord {
            features: g.features().chunks(d.max(1)).map(<[f64]>::to_vec).collect(),
            edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
            label: match &g.label {
                Label::Class(c) => LabelRecord::Class(*c),
                Label::MultiTask(ts) => {
                    LabelRecord::Tasks(ts.iter().map(|t| t.map(u8::from)).collect())
                }
            },
            node_labels: g.node_labels.clone(),
        }
    }

    fn into_graph(self) -> std::result::Result<GraphInstance, String> {
        let n = self.features.len();
        if n == 0 {
            return Err("graph has no nodes".into());
        }
        let d = self.features[0].len();
        if let Some(row) = self.features.iter().position(|r| r.len() != d) {
            return Err(format!(
                "feature row {row} has {} entries, expected {d}",
                self.features[row].len()
            ));
        }
        let label = match self.label {
            LabelRecord::Class(c) => Label::Class(c),
            LabelRecord::Tasks(ts) => Label::MultiTask(
                ts.into_iter()
                    .map(|t| match t {
                        None => Ok(None),
                        Some(0) => Ok(Some(false)),
                        Some(1) => Ok(Some(true)),
                        Some(x) => Err(format!("task label {x} is not 0, 1 or null")),
                    })
                    .collect::<std::result::Result<_, _>>()?,
            ),
        };
        let features = self.features.into_iter().flatten().collect();
        let edges = self.edges.into_iter().map(|[u, v]| (u, v)).collect();
        let g = GraphInstance::new(n, d, features, edges, label).map_err(|e| e.to_string())?;
        match self.node_labels {
            Some(labels) => g.with_node_labels(labels).map_err(|e| e.to_string()),
            None => Ok(g),
        }
    }
}

/// Reads a dataset; blank lines are skipped. `classes` fixes the class
/// count instead of inferring it from the largest label.
pub fn load_dataset(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut graphs = Vec::new();
    let mut first_dim: Option<(usize, usize)> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CliError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: GraphRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let g = record.into_graph().map_err(parse_err)?;
        match first_dim {
            None => first_dim = Some((g.feature_dim(), line_no)),
            Some((d, first)) if d != g.feature_dim() => {
                return Err(CliError::Core(gprompt_core::Error::Schema(format!(
                    "{}:{line_no}: feature dim {} differs from {d} on line {first}",
                    path.display(),
                    g.feature_dim()
                ))));
            }
            Some(_) => {}
        }
        graphs.push(g);
    }
    Ok(Dataset::new(graphs, classes)?)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for g in ds.graphs() {
        serde_json::to_writer(&mut out, &GraphRecord::from_graph(g))?;
        out.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    out.flush().map_err(|e| CliError::io(path, e))
}

/// Reads `{"train": [...], "val": [...], "test": [...]}` and checks the
/// indices against a dataset of `len` graphs.
pub fn load_split(path: &Path, len: usize) -> Result<Split> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let split: Split = serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut seen = vec![false; len];
    for &i in split.train.iter().chain(&split.val).chain(&split.test) {
        if i >= len {
            return Err(CliError::Usage(format!(
                "{}: index {i} out of range for {len} graphs",
                path.display()
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(CliError::Usage(format!(
                "{}: index {i} appears in more than one place",
                path.display()
            )));
        }
    }
    Ok(split)
}

pub fn save_split(path: &Path, split: &Split) -> Result<()> {
    let text = serde_json::to_string_pretty(split)?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_task_value_is_rejected() {
        let r: GraphRecord =
            serde_json::from_str(r#"{"features":[[1.0]],"edges":[],"label":[0,2]}"#).unwrap();
        assert!(r.into_graph().unwrap_err().contains("not 0, 1 or null"));
    }

    #[test]
    fn ragged_features_are_rejected() {
        let r: GraphRecord =
            serde_json::from_str(r#"{"features":[[1.0],[1.0,2.0]],"edges":[],"label":0}"#)
                .unwrap();
        assert!(r.into_graph().is_err());
    }
}
