//! Plain-text dataset directories.
//!
//! A dataset directory holds four UTF-8 files:
//!
//! - `meta.json`: `{"num_nodes": .., "num_features": .., "num_classes": ..}`
//! - `features.csv`: one row per node, comma-separated decimals
//! - `labels.csv`: one integer label per line
//! - `edges.csv`: one `u,v` pair per line, 0-indexed
//!
//! Blank lines are ignored. Edges are undirected; duplicates and self-loops
//! collapse on load.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gfscil_core::graph::{GraphDataset, GraphError};
use gfscil_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}:{line}: {msg}")]
    Parse { file: &'static str, line: usize, msg: String },
    #[error("meta.json: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("meta.json declares {what} = {declared} but the files hold {found}")]
    MetaMismatch { what: &'static str, declared: usize, found: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_nodes: usize,
    pub num_features: usize,
    pub num_classes: usize,
}

fn read(dir: &Path, name: &str) -> Result<String, DatasetError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path));
    }
    fs::read_to_string(&path).map_err(|source| DatasetError::Io { path, source })
}

/// Non-blank lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty())
}

fn parse_err(file: &'static str, line: usize, msg: impl Into<String>) -> DatasetError {
    DatasetError::Parse { file, line, msg: msg.into() }
}

pub fn load_dataset(dir: &Path) -> Result<GraphDataset, DatasetError> {
    if !dir.is_dir() {
        return Err(DatasetError::NotFound(dir.to_path_buf()));
    }
    let meta: DatasetMeta = serde_json::from_str(&read(dir, "meta.json")?)?;

    let mut data = Vec::with_capacity(meta.num_nodes * meta.num_features);
    let mut rows = 0;
    for (n, line) in lines(&read(dir, "features.csv")?) {
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| parse_err("features.csv", n, format!("bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err("features.csv", n, "non-finite feature"));
            }
            data.push(v);
        }
        if data.len() - before != meta.num_features {
            return Err(parse_err(
                "features.csv",
                n,
                format!("expected {} columns, found {}", meta.num_features, data.len() - before),
            ));
        }
        rows += 1;
    }

    let labels = lines(&read(dir, "labels.csv")?)
        .map(|(n, l)| l.parse::<usize>().map_err(|_| parse_err("labels.csv", n, format!("bad label {l:?}"))))
        .collect::<Result<Vec<_>, _>>()?;

    let mut edges = Vec::new();
    for (n, line) in lines(&read(dir, "edges.csv")?) {
        let parsed = line.split_once(',').and_then(|(u, v)| Some((u.trim().parse().ok()?, v.trim().parse().ok()?)));
        edges.push(parsed.ok_or_else(|| parse_err("edges.csv", n, format!("expected \"u,v\", found {line:?}")))?);
    }

    if labels.len() != meta.num_nodes {
        return Err(DatasetError::MetaMismatch { what: "num_nodes", declared: meta.num_nodes, found: labels.len() });
    }
    let features = Tensor::new(vec![rows, meta.num_features], data).expect("column count checked per row");
    Ok(GraphDataset::new(features, labels, edges, meta.num_classes)?)
}

/// Writes `ds` in the directory format, creating `dir` if needed. Floats use
/// the shortest representation that parses back to the same bits.
pub fn save_dataset(ds: &GraphDataset, dir: &Path) -> Result<(), DatasetError> {
    let io = |path: PathBuf| move |source| DatasetError::Io { path, source };
    fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
    let meta = DatasetMeta { num_nodes: ds.num_nodes(), num_features: ds.num_features(), num_classes: ds.num_classes() };

    let mut features = String::new();
    for r in 0..ds.num_nodes() {
        for (j, v) in ds.features().row(r).iter().enumerate() {
            if j > 0 {
                features.push(',');
            }
            write!(features, "{v:?}").expect("writing to a String");
        }
        features.push('\n');
    }
    let labels: String = ds.labels().iter().map(|l| format!("{l}\n")).collect();
    let edges: String = ds.edges().iter().map(|(u, v)| format!("{u},{v}\n")).collect();

    for (name, body) in [
        ("meta.json", serde_json::to_string_pretty(&meta)? + "\n"),
        ("features.csv", features),
        ("labels.csv", labels),
        ("edges.csv", edges),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io(path.clone()))?;
    }
    Ok(())
}
