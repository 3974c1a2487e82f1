//! Citation-network datasets on disk and the random split protocol.
//!
//! A dataset directory holds three plain-text files:
//!
//! * `graph.edges`: one whitespace-separated `u v` pair per line, 0-based,
//!   `#` comment lines ignored.
//! * `features.csv`: one line per node with `d` comma-separated reals, or,
//!   when the first line is `#sparse d=<d>`, space-separated `idx:value`
//!   pairs per node.
//! * `labels.txt`: one integer class id per line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{read_edge_lines, Graph};
use crate::linalg::{CsrMatrix, Matrix};

pub const EDGES_FILE: &str = "graph.edges";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.txt";

/// Validation nodes per split.
pub const VAL_SIZE: usize = 500;
/// Test nodes per split.
pub const TEST_SIZE: usize = 1_000;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub graph: Graph,
    /// `n × d`, stored dense.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Number of edge records in the source file (before symmetrization and
    /// deduplication).
    pub edge_records: usize,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, graph: Graph, features: Matrix, labels: Vec<usize>) -> Result<Self> {
        let n = graph.n_nodes();
        if features.rows() != n || labels.len() != n {
            return Err(Error::input(format!(
                "{n} graph nodes, {} feature rows, {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
        let mut seen = vec![false; n_classes];
        labels.iter().for_each(|&c| seen[c] = true);
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::input(format!("class {c} has no nodes")));
        }
        let edge_records = graph.n_undirected_edges();
        Ok(Self {
            name: name.into(),
            graph,
            features,
            labels,
            n_classes,
            edge_records,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn class_members(&self, class: usize) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&v| self.labels[v] == class).collect()
    }

    pub fn sparse_features(&self) -> Arc<CsrMatrix> {
        Arc::new(CsrMatrix::from_dense(&self.features))
    }

    /// Writes the three dataset files into `dir`. Features use the sparse
    /// layout; each undirected edge is written once as `u v` with `u <= v`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut edges = String::new();
        for u in 0..self.n_nodes() {
            for &v in self.graph.neighbors(u) {
                if u <= v {
                    writeln!(edges, "{u} {v}").unwrap();
                }
            }
        }
        let mut feats = format!("#sparse d={}\n", self.n_features());
        for i in 0..self.n_nodes() {
            let line: Vec<String> = self
                .features
                .row(i)
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(j, v)| format!("{j}:{v}"))
                .collect();
            feats.push_str(&line.join(" "));
            feats.push('\n');
        }
        let labels: String = self.labels.iter().map(|c| format!("{c}\n")).collect();
        for (file, body) in [(EDGES_FILE, edges), (FEATURES_FILE, feats), (LABELS_FILE, labels)] {
            let path = dir.join(file);
            std::fs::write(&path, body).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_labels(path: &Path) -> Result<Vec<usize>> {
    let text = read(path)?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let c = line
            .parse::<usize>()
            .map_err(|_| parse_err(path, i + 1, format!("class id '{line}' is not a non-negative integer")))?;
        labels.push(c);
    }
    Ok(labels)
}

fn parse_features(path: &Path, n_rows: usize) -> Result<Matrix> {
    let text = read(path)?;
    let mut lines = text.lines().enumerate().peekable();
    let sparse_dim = match lines.peek() {
        Some((_, first)) if first.starts_with("#sparse") => {
            let dim = first
                .trim_start_matches("#sparse")
                .trim()
                .strip_prefix("d=")
                .and_then(|d| d.trim().parse::<usize>().ok())
                .ok_or_else(|| parse_err(path, 1, "expected header '#sparse d=<d>'"))?;
            lines.next();
            Some(dim)
        }
        _ => None,
    };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_rows);
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.trim();
        let parse_value = |s: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, lineno, format!("'{s}' is not a finite real")))
        };
        match sparse_dim {
            Some(d) => {
                let mut row = vec![0.0; d];
                for pair in line.split_whitespace() {
                    let (idx, val) = pair
                        .split_once(':')
                        .ok_or_else(|| parse_err(path, lineno, format!("expected idx:value, got '{pair}'")))?;
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| parse_err(path, lineno, format!("bad feature index '{idx}'")))?;
                    if idx >= d {
                        return Err(parse_err(path, lineno, format!("feature index {idx} >= d={d}")));
                    }
                    row[idx] = parse_value(val)?;
                }
                rows.push(row);
            }
            None => {
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let row = line.split(',').map(parse_value).collect::<Result<Vec<_>>>()?;
                if let Some(first) = rows.first() {
                    if first.len() != row.len() {
                        return Err(parse_err(
                            path,
                            lineno,
                            format!("{} values, expected {}", row.len(), first.len()),
                        ));
                    }
                }
                rows.push(row);
            }
        }
    }
    if rows.len() != n_rows {
        return Err(parse_err(
            path,
            rows.len(),
            format!("{} feature rows but {} labels", rows.len(), n_rows),
        ));
    }
    Matrix::from_rows(&rows)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let labels_path = dir.join(LABELS_FILE);
    let labels = parse_labels(&labels_path)?;
    let n = labels.len();
    if n == 0 {
        return Err(parse_err(&labels_path, 0, "no labels"));
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    let mut seen = vec![false; n_classes];
    labels.iter().for_each(|&c| seen[c] = true);
    if let Some(missing) = seen.iter().position(|s| !s) {
        let line = labels.iter().position(|&c| c > missing).unwrap() + 1;
        return Err(parse_err(
            &labels_path,
            line,
            format!("class ids must be contiguous: class {missing} never appears but {} does", labels[line - 1]),
        ));
    }
    let features = parse_features(&dir.join(FEATURES_FILE), n)?;
    let edges_path = dir.join(EDGES_FILE);
    let records = read_edge_lines(&edges_path)?;
    if let Some(&(line, u, v)) = records.iter().find(|&&(_, u, v)| u >= n || v >= n) {
        return Err(parse_err(&edges_path, line, format!("edge ({u},{v}) references a node outside 0..{n}")));
    }
    let pairs: Vec<(usize, usize)> = records.iter().map(|&(_, u, v)| (u, v)).collect();
    let graph = Graph::from_edge_list(&pairs, n)?;
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let mut ds = LabeledDataset::new(name, graph, features, labels)?;
    ds.edge_records = pairs.len();
    Ok(ds)
}

/// Divides every nonzero feature row by its L1 norm.
pub fn row_normalize_features(ds: &LabeledDataset) -> LabeledDataset {
    let mut out = ds.clone();
    for i in 0..out.features.rows() {
        let row = out.features.row_mut(i);
        let norm: f64 = row.iter().map(|v| v.abs()).sum();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// One random train/validation/test assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub ell: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read(path)?)?)
    }
}

/// Sizes of the validation and test sets drawn per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            val: VAL_SIZE,
            test: TEST_SIZE,
        }
    }
}

/// `n_splits` splits with seeds `base_seed..base_seed + n_splits`, each with
/// `ell` training nodes per class, 500 validation and 1,000 test nodes.
pub fn make_splits(ds: &LabeledDataset, ell: usize, n_splits: usize, base_seed: u64) -> Result<Vec<Split>> {
    make_splits_sized(ds, ell, n_splits, base_seed, SplitSizes::default())
}

pub fn make_splits_sized(
    ds: &LabeledDataset,
    ell: usize,
    n_splits: usize,
    base_seed: u64,
    sizes: SplitSizes,
) -> Result<Vec<Split>> {
    let members: Vec<Vec<usize>> = (0..ds.n_classes).map(|c| ds.class_members(c)).collect();
    if let Some(c) = members.iter().position(|m| m.len() < ell) {
        return Err(Error::input(format!(
            "class {c} has {} nodes, fewer than ell = {ell}",
            members[c].len()
        )));
    }
    let needed = ell * ds.n_classes + sizes.val + sizes.test;
    if ds.n_nodes() < needed {
        return Err(Error::input(format!(
            "{} nodes cannot hold {needed} train/val/test nodes",
            ds.n_nodes()
        )));
    }
    (0..n_splits as u64)
        .map(|k| Ok(draw_split(ds, &members, ell, base_seed + k, sizes)))
        .collect()
}

fn draw_split(ds: &LabeledDataset, members: &[Vec<usize>], ell: usize, seed: u64, sizes: SplitSizes) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; ds.n_nodes()];
    let mut train = Vec::with_capacity(ell * members.len());
    for class in members {
        for &v in class.choose_multiple(&mut rng, ell) {
            in_train[v] = true;
            train.push(v);
        }
    }
    let mut rest: Vec<usize> = (0..ds.n_nodes()).filter(|&v| !in_train[v]).collect();
    rest.shuffle(&mut rng);
    let mut val = rest[..sizes.val].to_vec();
    let mut test = rest[sizes.val..sizes.val + sizes.test].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Split {
        seed,
        ell,
        train,
        val,
        test,
    }
}

/// Resolves a dataset argument: an existing path is used as-is, otherwise it
/// is looked up under the default data directory.
pub fn resolve_dataset_dir(arg: &Path, data_dir: Option<&Path>) -> PathBuf {
    if arg.exists() {
        return arg.to_path_buf();
    }
    match data_dir {
        Some(base) => base.join(arg),
        None => arg.to_path_buf(),
    }
}
