//! End-to-end runs of the command-line binary on a small synthetic dataset.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use smoothgnn::data::{LabeledDataset, Split};
use smoothgnn::experiment::{DATA_DIR_ENV, RESULTS_CSV};
use smoothgnn::trainer::TrainReport;

fn smoothgnn(args: &[&str], data_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_smoothgnn"));
    cmd.args(args).env_remove(DATA_DIR_ENV);
    if let Some(d) = data_dir {
        cmd.env(DATA_DIR_ENV, d);
    }
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// 90 nodes, 3 classes, features carrying a noisy class signal.
fn write_toy(root: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 90;
    let graph = random_graph(n, 0.08, &mut rng);
    let labels = round_robin_labels(n, 3);
    let mut features = random_matrix(n, 6, &mut rng).map(f64::abs);
    for (i, &c) in labels.iter().enumerate() {
        features[(i, c)] += 1.0;
    }
    LabeledDataset::new("toy", graph, features, labels).unwrap().save(&root.join("toy")).unwrap();
}

#[test]
fn full_workflow_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    write_toy(root);
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();

    // Name resolved through the environment variable.
    let summary = stdout(&smoothgnn(&["validate-dataset", "toy"], Some(root)));
    assert!(summary.starts_with("90 nodes,"), "{summary}");
    assert!(summary.lines().next().unwrap().ends_with("3 classes, 6 features: OK"));

    let split_args = ["make-splits", "toy", "--ell", "5", "--n-splits", "2", "--val-size", "20", "--test-size", "40"];
    let out_dir = p("splits");
    stdout(&smoothgnn(&[&split_args[..], &["--out", &out_dir]].concat(), Some(root)));
    let split = Split::load(&root.join("splits/split_ell5_seed1.json")).unwrap();
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (15, 20, 40));

    let split_file = p("splits/split_ell5_seed0.json");
    let report_file = p("report.json");
    let ckpt = p("model.json");
    let line = stdout(&smoothgnn(
        &[
            "train", &p("toy"), "--model", "gcn", "--mu", "0.1", "--split", &split_file, "--max-epochs", "40",
            "--checkpoint", &ckpt, "--report", &report_file,
        ],
        None,
    ));
    assert!(line.starts_with("best epoch"), "{line}");
    let report: TrainReport = serde_json::from_str(&std::fs::read_to_string(&report_file).unwrap()).unwrap();
    assert!(report.epochs_run <= 40 && report.best_epoch >= 1);
    assert_eq!(report.history.len(), report.epochs_run);

    let emb = p("emb.csv");
    stdout(&smoothgnn(&["export-embeddings", "--checkpoint", &ckpt, "--dataset", &p("toy"), "--out", &emb], None));
    let mut reader = csv::Reader::from_path(&emb).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header[0], "node");
    assert_eq!(header.len(), 1 + smoothgnn::models::ModelConfig::default().hidden_dim);
    assert_eq!(reader.records().count(), 90);

    let prop = stdout(&smoothgnn(&["propagate", "toy", "--split", &split_file, "--gamma", "0.2"], Some(root)));
    assert!(prop.contains("on 40 test nodes"), "{prop}");

    let spec = serde_json::json!({
        "dataset": "toy",
        "models": [{"model": "mlp", "regularized": false}, {"model": "mlp", "regularized": true}],
        "ell": [5],
        "n_splits": 2,
        "layer_counts": [2],
        "mu_grid": [0.1],
        "output_dir": p("exp"),
        "train": {"max_epochs": 20},
        "split_sizes": {"val": 20, "test": 40}
    });
    std::fs::write(root.join("spec.json"), spec.to_string()).unwrap();
    let table = stdout(&smoothgnn(&["run", &p("spec.json")], Some(root)));
    assert!(table.contains("R-MLP"), "{table}");
    let csv_before = std::fs::read(root.join("exp").join(RESULTS_CSV)).unwrap();
    stdout(&smoothgnn(&["aggregate", &p("exp")], None));
    assert_eq!(std::fs::read(root.join("exp").join(RESULTS_CSV)).unwrap(), csv_before);
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = smoothgnn(&["validate-dataset", &tmp.path().join("missing").to_string_lossy()], None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    std::fs::write(tmp.path().join("bad.json"), "{\"dataset\": 3}").unwrap();
    let out = smoothgnn(&["run", &tmp.path().join("bad.json").to_string_lossy()], None);
    assert!(!out.status.success());
}
