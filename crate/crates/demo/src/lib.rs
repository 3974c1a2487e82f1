//! Three operations exported to JavaScript. Each returns a JSON string so the
//! page needs no generated type bindings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use smoothgnn::data::{make_splits_sized, LabeledDataset, SplitSizes};
use smoothgnn::diffusion::{diffuse_iterative, propagate_labels, DiffusionConfig, LabelMatrix};
use smoothgnn::graph::{Graph, NormalizedAdjacency};
use smoothgnn::linalg::Matrix;
use smoothgnn::losses::LossConfig;
use smoothgnn::models::{Model, ModelConfig, ModelKind};
use smoothgnn::trainer::{train, TrainConfig, TrainingData};

/// Cliques of this size sit at both ends of the toy graph.
const CLIQUE: usize = 5;
/// Path nodes between the two cliques.
const BRIDGE: usize = 4;

/// Two cliques joined by a path; node 0 and the last node carry labels 0 and 1.
fn toy_graph() -> (Graph, Vec<(usize, usize)>, Vec<usize>) {
    let n = 2 * CLIQUE + BRIDGE;
    let mut edges = Vec::new();
    for offset in [0, CLIQUE + BRIDGE] {
        for i in 0..CLIQUE {
            for j in i + 1..CLIQUE {
                edges.push((offset + i, offset + j));
            }
        }
    }
    for v in CLIQUE - 1..CLIQUE + BRIDGE {
        edges.push((v, v + 1));
    }
    let labels = (0..n).map(|v| usize::from(v >= n / 2)).collect();
    let graph = Graph::from_edge_list(&edges, n).expect("toy graph is valid");
    (graph, edges, labels)
}

#[derive(Serialize)]
struct DiffusionView {
    edges: Vec<(usize, usize)>,
    seeds: Vec<usize>,
    scores: Vec<Vec<f64>>,
    predictions: Vec<usize>,
}

#[derive(Serialize)]
struct ResidualView {
    gamma: f64,
    iterations: usize,
    converged: bool,
    residuals: Vec<f64>,
}

#[derive(Serialize)]
struct ComparisonView {
    mu: f64,
    layers: usize,
    mlp_test_acc: f64,
    rmlp_test_acc: f64,
    mlp_best_epoch: usize,
    rmlp_best_epoch: usize,
}

fn seeded_labels(labels: &[usize]) -> (Vec<usize>, LabelMatrix) {
    let seeds = vec![0, labels.len() - 1];
    let y = LabelMatrix::new(labels, &seeds, 2).expect("seeds are in range");
    (seeds, y)
}

pub fn diffusion_view(gamma: f64) -> smoothgnn::Result<String> {
    let (graph, edges, labels) = toy_graph();
    let a_hat = NormalizedAdjacency::from_graph(&graph);
    let (seeds, y) = seeded_labels(&labels);
    let prop = propagate_labels(&a_hat, &y, &DiffusionConfig::with_gamma(gamma))?;
    let view = DiffusionView {
        edges,
        seeds,
        scores: (0..prop.scores.rows()).map(|i| prop.scores.row(i).to_vec()).collect(),
        predictions: prop.predictions,
    };
    Ok(serde_json::to_string(&view)?)
}

pub fn residual_view(gamma: f64) -> smoothgnn::Result<String> {
    let (graph, _, labels) = toy_graph();
    let a_hat = NormalizedAdjacency::from_graph(&graph);
    let (_, y) = seeded_labels(&labels);
    let out = diffuse_iterative(&a_hat, y.matrix(), &DiffusionConfig::with_gamma(gamma))?;
    let view = ResidualView {
        gamma,
        iterations: out.iters,
        converged: out.converged,
        residuals: out.residual_history,
    };
    Ok(serde_json::to_string(&view)?)
}

/// Planted-partition graph whose features are only weakly informative, so the
/// graph term has something to add.
fn community_dataset(seed: u64) -> smoothgnn::Result<LabeledDataset> {
    const PER_CLASS: usize = 60;
    const CLASSES: usize = 3;
    const DIM: usize = 12;
    let n = PER_CLASS * CLASSES;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|v| v / PER_CLASS).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { 0.08 } else { 0.004 };
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let graph = Graph::from_edge_list(&edges, n)?;
    let features = Matrix::from_fn(n, DIM, |i, k| {
        let signal = if k % CLASSES == labels[i] { 0.25 } else { 0.0 };
        (signal + rng.gen::<f64>()).max(0.0)
    });
    LabeledDataset::new("communities", graph, features, labels)
}

pub fn comparison_view(mu: f64, layers: usize, seed: u64) -> smoothgnn::Result<String> {
    let ds = community_dataset(seed)?;
    let split = make_splits_sized(&ds, 3, 1, seed, SplitSizes { val: 30, test: 100 })?.remove(0);
    let data = TrainingData::new(&ds)?;
    let run = |mu: f64| -> smoothgnn::Result<(f64, usize)> {
        let mut cfg = ModelConfig::new(ModelKind::Mlp, layers);
        cfg.hidden_dim = 16;
        let mut model = Model::new(cfg, ds.n_features(), ds.n_classes, seed)?;
        let train_cfg = TrainConfig {
            max_epochs: 300,
            patience: 50,
            seed,
            loss: LossConfig { mu, ..LossConfig::default() },
            ..TrainConfig::default()
        };
        let report = train(&mut model, &data, &split, &train_cfg)?;
        Ok((report.test_acc, report.best_epoch))
    };
    let (mlp_test_acc, mlp_best_epoch) = run(0.0)?;
    let (rmlp_test_acc, rmlp_best_epoch) = run(mu)?;
    let view = ComparisonView {
        mu,
        layers,
        mlp_test_acc,
        rmlp_test_acc,
        mlp_best_epoch,
        rmlp_best_epoch,
    };
    Ok(serde_json::to_string(&view)?)
}

fn to_js(r: smoothgnn::Result<String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

/// Diffusion scores on the toy graph for one γ.
#[wasm_bindgen]
pub fn diffuse(gamma: f64) -> Result<String, JsValue> {
    to_js(diffusion_view(gamma))
}

/// Residual after each iteration of the fixed-point solver.
#[wasm_bindgen]
pub fn residuals(gamma: f64) -> Result<String, JsValue> {
    to_js(residual_view(gamma))
}

/// Test accuracy of a plain MLP and its regularized twin on a toy graph.
#[wasm_bindgen]
pub fn compare(mu: f64, layers: usize, seed: u32) -> Result<String, JsValue> {
    to_js(comparison_view(mu, layers, u64::from(seed)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn diffusion_separates_the_cliques() {
        let v: Value = serde_json::from_str(&diffusion_view(0.2).unwrap()).unwrap();
        let preds: Vec<u64> = v["predictions"].as_array().unwrap().iter().map(|p| p.as_u64().unwrap()).collect();
        assert_eq!(preds[..CLIQUE], [0; CLIQUE]);
        assert_eq!(preds[preds.len() - CLIQUE..], [1; CLIQUE]);
    }

    #[test]
    fn residuals_decrease_to_tolerance() {
        let v: Value = serde_json::from_str(&residual_view(0.3).unwrap()).unwrap();
        assert!(v["converged"].as_bool().unwrap());
        let r: Vec<f64> = v["residuals"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert!(r.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn invalid_gamma_is_an_error() {
        assert!(diffusion_view(0.0).is_err());
        assert!(residual_view(1.5).is_err());
    }

    #[test]
    fn comparison_reports_both_models() {
        let v: Value = serde_json::from_str(&comparison_view(0.1, 2, 1).unwrap()).unwrap();
        for key in ["mlp_test_acc", "rmlp_test_acc"] {
            let acc = v[key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&acc), "{key} = {acc}");
        }
    }
}
