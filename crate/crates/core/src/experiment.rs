//! Experiment harness: trains every (model, regularized, ℓ, depth) cell over
//! random splits, writes one JSON record per run, and aggregates the records
//! into a results table.
//!
//! Regularized cells train once per μ in the grid and keep the μ with the
//! highest mean validation accuracy. The table is computed from run records
//! alone, so re-aggregating a run directory reproduces it exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_dataset, make_splits_sized, resolve_dataset_dir, row_normalize_features, LabeledDataset, Split, SplitSizes,
};
use crate::diffusion::{propagate_labels, DiffusionConfig, LabelMatrix};
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::linalg::Matrix;
use crate::losses::LossConfig;
use crate::models::{Model, ModelConfig, ModelKind};
use crate::trainer::{accuracy, train, EpochRecord, TrainConfig, TrainReport, TrainingData};

/// Environment variable naming the default dataset directory.
pub const DATA_DIR_ENV: &str = "SMOOTHGNN_DATA_DIR";

pub const DEFAULT_MU_GRID: [f64; 4] = [0.1, 0.5, 1.0, 2.0];

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_TXT: &str = "results.txt";
pub const RUNS_DIR: &str = "runs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub model: ModelKind,
    #[serde(default)]
    pub regularized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Dataset directory, or a name under the default data directory.
    pub dataset: PathBuf,
    pub models: Vec<ModelEntry>,
    pub ell: Vec<usize>,
    #[serde(default = "default_n_splits")]
    pub n_splits: usize,
    pub layer_counts: Vec<usize>,
    #[serde(default = "default_mu_grid")]
    pub mu_grid: Vec<f64>,
    #[serde(default)]
    pub base_seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_true")]
    pub normalize_features: bool,
    /// Architecture settings; `kind` and `n_layers` are set per cell.
    #[serde(default)]
    pub model_config: ModelConfig,
    /// Optimizer and stopping settings; `loss.mu` and `seed` are set per run.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split_sizes: SplitSizes,
}

fn default_n_splits() -> usize {
    10
}

fn default_mu_grid() -> Vec<f64> {
    DEFAULT_MU_GRID.to_vec()
}

fn default_true() -> bool {
    true
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_splits == 0 {
            return Err(Error::input("n_splits must be at least 1"));
        }
        if self.models.is_empty() || self.ell.is_empty() || self.layer_counts.is_empty() {
            return Err(Error::input("models, ell and layer_counts must be non-empty"));
        }
        if self.models.iter().any(|m| m.regularized) && self.mu_grid.is_empty() {
            return Err(Error::input("regularized models need a non-empty mu_grid"));
        }
        if let Some(mu) = self.mu_grid.iter().find(|&&mu| !(mu > 0.0 && mu.is_finite())) {
            return Err(Error::input(format!("mu grid values must be positive, got {mu}")));
        }
        self.train.validate()?;
        let mut probe = self.model_config;
        probe.n_layers = 1;
        probe.validate()
    }
}

/// Everything recorded about one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: ModelKind,
    pub regularized: bool,
    pub dataset: String,
    pub seed: u64,
    pub ell: usize,
    pub n_layers: usize,
    pub mu: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_acc: f64,
    pub test_acc: f64,
    pub history: Vec<EpochRecord>,
    /// Diagnostic of an aborted run; accuracies are meaningless when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn file_name(&self) -> String {
        format!(
            "{}_{}{}_L{}_ell{}_mu{}_seed{}.json",
            self.dataset,
            if self.regularized { "r-" } else { "" },
            self.model,
            self.n_layers,
            self.ell,
            self.mu,
            self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct CellKey {
    dataset: String,
    ell: usize,
    n_layers: usize,
    model: ModelKind,
    regularized: bool,
}

impl CellKey {
    fn of(r: &RunRecord) -> Self {
        Self {
            dataset: r.dataset.clone(),
            ell: r.ell,
            n_layers: r.n_layers,
            model: r.model,
            regularized: r.regularized,
        }
    }
}

pub fn model_label(model: ModelKind, regularized: bool) -> String {
    format!("{}{}", if regularized { "R-" } else { "" }, model.name().to_uppercase())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub model: ModelKind,
    pub regularized: bool,
    pub ell: usize,
    pub n_layers: usize,
    /// Selected trade-off; 0 for unregularized cells.
    pub mu: f64,
    /// Mean test accuracy in percent.
    pub mean: f64,
    /// Sample standard deviation in percent; 0 for a single split.
    pub std: f64,
    pub n_splits: usize,
    /// `None` when every run of the selected μ completed.
    pub failure: Option<String>,
}

impl ResultRow {
    pub fn label(&self) -> String {
        model_label(self.model, self.regularized)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

/// Sample mean and (n − 1) standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl ResultsTable {
    /// Groups records into cells and selects μ per regularized cell by mean
    /// validation accuracy (ties to the smaller μ). A μ whose runs include a
    /// failure is not eligible; a cell with no eligible μ is marked failed.
    pub fn aggregate(records: &[RunRecord]) -> Self {
        let mut cells: BTreeMap<CellKey, Vec<&RunRecord>> = BTreeMap::new();
        for r in records {
            cells.entry(CellKey::of(r)).or_default().push(r);
        }
        let rows = cells
            .into_iter()
            .map(|(key, runs)| {
                let mut by_mu: Vec<(f64, Vec<&RunRecord>)> = Vec::new();
                for r in runs {
                    match by_mu.iter_mut().find(|(mu, _)| *mu == r.mu) {
                        Some((_, group)) => group.push(r),
                        None => by_mu.push((r.mu, vec![r])),
                    }
                }
                by_mu.sort_by(|a, b| a.0.total_cmp(&b.0));
                for (_, group) in &mut by_mu {
                    group.sort_by_key(|r| r.seed);
                }
                let mut best: Option<(f64, f64, &Vec<&RunRecord>)> = None;
                let mut failure = None;
                for (mu, group) in &by_mu {
                    if let Some(r) = group.iter().find(|r| r.error.is_some()) {
                        let err = r.error.as_deref().unwrap_or_default();
                        failure.get_or_insert_with(|| format!("mu={mu} seed={}: {err}", r.seed));
                        continue;
                    }
                    let vals: Vec<f64> = group.iter().map(|r| r.val_acc).collect();
                    let val = mean_std(&vals).0;
                    if best.is_none_or(|(_, b, _)| val > b) {
                        best = Some((*mu, val, group));
                    }
                }
                let base = ResultRow {
                    dataset: key.dataset,
                    model: key.model,
                    regularized: key.regularized,
                    ell: key.ell,
                    n_layers: key.n_layers,
                    mu: 0.0,
                    mean: f64::NAN,
                    std: f64::NAN,
                    n_splits: 0,
                    failure: None,
                };
                match best {
                    Some((mu, _, group)) => {
                        let accs: Vec<f64> = group.iter().map(|r| 100.0 * r.test_acc).collect();
                        let (mean, std) = mean_std(&accs);
                        ResultRow {
                            mu,
                            mean,
                            std,
                            n_splits: group.len(),
                            ..base
                        }
                    }
                    None => ResultRow { failure, ..base },
                }
            })
            .collect();
        Self { rows }
    }

    /// Reads every `*.json` run record in `dir` and aggregates them.
    pub fn from_run_dir(dir: &Path) -> Result<Self> {
        Ok(Self::aggregate(&read_run_records(dir)?))
    }

    pub fn find(&self, model: ModelKind, regularized: bool, ell: usize, n_layers: usize) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.regularized == regularized && r.ell == ell && r.n_layers == n_layers)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::input(format!("csv: {e}"));
        w.write_record(["dataset", "model", "regularized", "ell", "n_layers", "mu", "mean", "std", "n_splits", "status"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.dataset.clone(),
                r.label(),
                r.regularized.to_string(),
                r.ell.to_string(),
                r.n_layers.to_string(),
                r.mu.to_string(),
                format!("{:.4}", r.mean),
                format!("{:.4}", r.std),
                r.n_splits.to_string(),
                r.failure.clone().map_or_else(|| "ok".to_string(), |f| format!("failed: {f}")),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::input(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses a table written by [`ResultsTable::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let bad = |what: &str| Error::input(format!("results csv: bad {what}"));
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::input(format!("results csv: {e}")))?;
            let field = |i: usize| rec.get(i).ok_or_else(|| bad("row length"));
            let label = field(1)?;
            let regularized: bool = field(2)?.parse().map_err(|_| bad("regularized"))?;
            let status = field(9)?;
            rows.push(ResultRow {
                dataset: field(0)?.to_string(),
                model: label.trim_start_matches("R-").parse()?,
                regularized,
                ell: field(3)?.parse().map_err(|_| bad("ell"))?,
                n_layers: field(4)?.parse().map_err(|_| bad("n_layers"))?,
                mu: field(5)?.parse().map_err(|_| bad("mu"))?,
                mean: field(6)?.parse().map_err(|_| bad("mean"))?,
                std: field(7)?.parse().map_err(|_| bad("std"))?,
                n_splits: field(8)?.parse().map_err(|_| bad("n_splits"))?,
                failure: status.strip_prefix("failed: ").map(str::to_string),
            });
        }
        Ok(Self { rows })
    }

    /// Aligned human-readable rendering.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<10} {:<8} {:>4} {:>7} {:>5} {:>16} {:>7}\n",
            "dataset", "model", "ell", "layers", "mu", "accuracy", "splits"
        );
        for r in &self.rows {
            let acc = match &r.failure {
                None => format!("{:.1} ± {:.1}", r.mean, r.std),
                Some(_) => "failed".to_string(),
            };
            let mu = if r.regularized { r.mu.to_string() } else { "-".to_string() };
            writeln!(
                out,
                "{:<10} {:<8} {:>4} {:>7} {:>5} {:>16} {:>7}",
                r.dataset,
                r.label(),
                r.ell,
                r.n_layers,
                mu,
                acc,
                r.n_splits
            )
            .unwrap();
            if let Some(f) = &r.failure {
                writeln!(out, "    {f}").unwrap();
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [(RESULTS_CSV, self.to_csv()?), (RESULTS_TXT, self.to_text())] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

pub fn read_run_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

/// Loads a dataset directory and applies the default preprocessing.
pub fn load_training_data(dir: &Path, normalize: bool) -> Result<(String, TrainingData)> {
    let ds = load_dataset(dir)?;
    let ds = if normalize { row_normalize_features(&ds) } else { ds };
    Ok((ds.name.clone(), TrainingData::new(&ds)?))
}

#[derive(Clone, Copy, Debug)]
struct Job<'a> {
    entry: ModelEntry,
    n_layers: usize,
    mu: f64,
    split: &'a Split,
}

/// Trains one model on one split, returning the report and the trained model.
pub fn train_single(
    data: &TrainingData,
    split: &Split,
    model_config: ModelConfig,
    train_config: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    let mut model = Model::new(model_config, data.n_features(), data.n_classes(), split.seed)?;
    let cfg = TrainConfig {
        seed: split.seed,
        ..*train_config
    };
    let report = train(&mut model, data, split, &cfg)?;
    Ok((model, report))
}

fn run_job(spec: &ExperimentSpec, dataset: &str, data: &TrainingData, job: Job<'_>) -> RunRecord {
    let model_config = ModelConfig {
        kind: job.entry.model,
        n_layers: job.n_layers,
        ..spec.model_config
    };
    let train_config = TrainConfig {
        loss: LossConfig {
            mu: job.mu,
            ..spec.train.loss
        },
        ..spec.train
    };
    let mut record = RunRecord {
        model: job.entry.model,
        regularized: job.entry.regularized,
        dataset: dataset.to_string(),
        seed: job.split.seed,
        ell: job.split.ell,
        n_layers: job.n_layers,
        mu: job.mu,
        best_epoch: 0,
        epochs_run: 0,
        val_acc: 0.0,
        test_acc: 0.0,
        history: Vec::new(),
        error: None,
    };
    match train_single(data, job.split, model_config, &train_config) {
        Ok((_, report)) => {
            record.best_epoch = report.best_epoch;
            record.epochs_run = report.epochs_run;
            record.val_acc = report.val_acc;
            record.test_acc = report.test_acc;
            record.history = report.history;
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

/// Runs every cell of `spec`, writing splits, run records and the results
/// table under `spec.output_dir`.
pub fn run_experiment(spec: &ExperimentSpec, data_dir: Option<&Path>) -> Result<ResultsTable> {
    spec.validate()?;
    let dir = resolve_dataset_dir(&spec.dataset, data_dir);
    let ds = load_dataset(&dir)?;
    let ds = if spec.normalize_features { row_normalize_features(&ds) } else { ds };
    let data = TrainingData::new(&ds)?;

    let out = &spec.output_dir;
    let runs_dir = out.join(RUNS_DIR);
    let splits_dir = out.join("splits");
    for d in [&runs_dir, &splits_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut splits = Vec::new();
    for &ell in &spec.ell {
        for split in make_splits_sized(&ds, ell, spec.n_splits, spec.base_seed, spec.split_sizes)? {
            split.save(&splits_dir.join(format!("ell{ell}_seed{}.json", split.seed)))?;
            splits.push(split);
        }
    }

    let mut jobs = Vec::new();
    for split in &splits {
        for &n_layers in &spec.layer_counts {
            for &entry in &spec.models {
                let mus = if entry.regularized { spec.mu_grid.clone() } else { vec![0.0] };
                for mu in mus {
                    jobs.push(Job {
                        entry,
                        n_layers,
                        mu,
                        split,
                    });
                }
            }
        }
    }
    let records: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&job| {
            let record = run_job(spec, &ds.name, &data, job);
            let path = runs_dir.join(record.file_name());
            std::fs::write(&path, serde_json::to_string(&record)?).map_err(|e| Error::io(&path, e))?;
            Ok(record)
        })
        .collect::<Result<_>>()?;

    let table = ResultsTable::aggregate(&records);
    table.write(out)?;
    Ok(table)
}

/// A trained model plus the preprocessing needed to reproduce its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Model,
    pub normalize_features: bool,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.model.config.validate()?;
        Ok(ckpt)
    }
}

/// Writes `node,h0,…,h{d-1}` rows of the model's last hidden layer.
pub fn export_embeddings(ckpt: &Checkpoint, dataset_dir: &Path, out: &Path) -> Result<(usize, usize)> {
    let (_, data) = load_training_data(dataset_dir, ckpt.normalize_features)?;
    if data.n_features() != ckpt.model.in_dim {
        return Err(Error::input(format!(
            "checkpoint expects {} features, dataset has {}",
            ckpt.model.in_dim,
            data.n_features()
        )));
    }
    let h = ckpt.model.hidden_embedding(&data.features, &data.ctx)?;
    let csv_err = |e: csv::Error| Error::input(format!("csv: {e}"));
    let mut w = csv::Writer::from_path(out).map_err(csv_err)?;
    let mut header = vec!["node".to_string()];
    header.extend((0..h.cols()).map(|j| format!("h{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..h.rows() {
        let mut row = vec![i.to_string()];
        row.extend(h.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(h.shape())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropagationSummary {
    pub gamma: f64,
    /// Accuracy over the split's test nodes.
    pub accuracy: f64,
    pub n_test: usize,
    pub missing_classes: Vec<usize>,
    pub unconverged_residual: Option<f64>,
}

/// Label propagation seeded with `split.train`, scored on `split.test`.
pub fn propagate_on_split(ds: &LabeledDataset, split: &Split, cfg: &DiffusionConfig) -> Result<PropagationSummary> {
    let a_hat = NormalizedAdjacency::from_graph(&ds.graph);
    let y = LabelMatrix::new(&ds.labels, &split.train, ds.n_classes)?;
    let prop = propagate_labels(&a_hat, &y, cfg)?;
    let scores = Matrix::from_fn(ds.n_nodes(), ds.n_classes, |i, j| (prop.predictions[i] == j) as u8 as f64);
    Ok(PropagationSummary {
        gamma: cfg.gamma,
        accuracy: accuracy(&scores, &ds.labels, &split.test)?,
        n_test: split.test.len(),
        missing_classes: prop.missing_classes,
        unconverged_residual: prop.unconverged_residual,
    })
}

/// Published statistics of the standard citation benchmarks:
/// `(name, nodes, edges, classes, features)`.
pub const KNOWN_DATASETS: [(&str, usize, usize, usize, usize); 3] = [
    ("cora", 2708, 5429, 7, 1433),
    ("citeseer", 3327, 4732, 6, 3703),
    ("pubmed", 19717, 44338, 3, 500),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetReport {
    pub name: String,
    pub n_nodes: usize,
    /// Edge records in the file.
    pub edge_records: usize,
    /// Distinct undirected edges, self-loops included.
    pub unique_edges: usize,
    pub n_classes: usize,
    pub n_features: usize,
    pub isolated_nodes: usize,
    pub self_loops: usize,
    pub class_sizes: Vec<usize>,
    /// Differences from the published statistics of a known dataset.
    pub reference_mismatches: Vec<String>,
}

impl DatasetReport {
    pub fn summary_line(&self) -> String {
        format!(
            "{} nodes, {} edges, {} classes, {} features: OK",
            self.n_nodes, self.edge_records, self.n_classes, self.n_features
        )
    }
}

/// Loads `dir` (which runs every format and invariant check) and gathers
/// statistics for the report.
pub fn validate_dataset(dir: &Path) -> Result<DatasetReport> {
    let ds = load_dataset(dir)?;
    if !ds.features.is_finite() {
        return Err(Error::input("features contain non-finite values"));
    }
    let n = ds.n_nodes();
    let self_loops = (0..n).filter(|&v| ds.graph.has_edge(v, v)).count();
    let isolated_nodes = (0..n).filter(|&v| ds.graph.neighbors(v).iter().all(|&u| u == v)).count();
    let class_sizes = (0..ds.n_classes).map(|c| ds.labels.iter().filter(|&&l| l == c).count()).collect();
    let mut report = DatasetReport {
        name: ds.name.clone(),
        n_nodes: n,
        edge_records: ds.edge_records,
        unique_edges: ds.graph.n_undirected_edges(),
        n_classes: ds.n_classes,
        n_features: ds.n_features(),
        isolated_nodes,
        self_loops,
        class_sizes,
        reference_mismatches: Vec::new(),
    };
    let key = ds.name.to_ascii_lowercase();
    if let Some(&(_, nodes, edges, classes, features)) = KNOWN_DATASETS.iter().find(|k| k.0 == key) {
        for (what, expected, got) in [
            ("nodes", nodes, report.n_nodes),
            ("edges", edges, report.edge_records),
            ("classes", classes, report.n_classes),
            ("features", features, report.n_features),
        ] {
            if expected != got {
                report
                    .reference_mismatches
                    .push(format!("{what}: published {expected}, found {got}"));
            }
        }
    }
    Ok(report)
}
