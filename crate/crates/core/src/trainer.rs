//! Full-batch training with Adam, L2 weight decay and windowed early stopping.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, Matrix};
use crate::losses::{combined_loss, one_hot, softmax_predictions, LossConfig};
use crate::models::{Features, GraphContext, LayerParams, Model};

/// Quantity watched by early stopping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    /// Strictly lower validation loss counts as improvement.
    #[default]
    ValLoss,
    /// Strictly higher validation accuracy counts as improvement.
    ValAccuracy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub loss: LossConfig,
    /// Seeds the dropout masks.
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub stop_metric: StopMetric,
    /// Monitor the full objective on validation nodes rather than the
    /// fitness term alone.
    pub val_loss_includes_smoothness: bool,
    pub decay_biases: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 5e-4,
            max_epochs: 1_000,
            patience: 100,
            loss: LossConfig::default(),
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            stop_metric: StopMetric::ValLoss,
            val_loss_includes_smoothness: true,
            decay_biases: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::input(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::input("weight_decay must be finite and >= 0"));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::input("patience and max_epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::input("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        self.loss.validate()
    }
}

/// First and second moment estimates, one pair per parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        let zeros: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. `decay[i]` selects the parameters whose
/// gradient receives the additive `weight_decay · w` term.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    decay: &[bool],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n {
        return Err(Error::shape(
            "adam_step",
            format!("{n} params, {} grads, {} decay flags, {} moments", grads.len(), decay.len(), state.m.len()),
        ));
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, w) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != w.shape() || state.m[i].shape() != w.shape() {
            return Err(Error::shape("adam_step", format!("parameter {i}")));
        }
        let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
        let w = w.as_mut_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for k in 0..w.len() {
            let gk = g.as_slice()[k] + wd * w[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            w[k] -= cfg.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Tracks the best value of a minimized metric and the number of epochs
/// since it last strictly improved.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Dataset-derived inputs shared by every run on one dataset.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub features: Arc<CsrMatrix>,
    pub labels: Vec<usize>,
    /// One-hot `n × c` targets.
    pub targets: Matrix,
    pub ctx: GraphContext,
}

impl TrainingData {
    pub fn new(ds: &LabeledDataset) -> Result<Self> {
        Ok(Self {
            features: ds.sparse_features(),
            labels: ds.labels.clone(),
            targets: one_hot(&ds.labels, ds.n_classes)?,
            ctx: GraphContext::new(&ds.graph),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.n_cols()
    }

    pub fn n_classes(&self) -> usize {
        self.targets.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
    /// Validation accuracy of the restored parameters.
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Fraction of `indices` whose logits argmax (ties to the lowest class)
/// equals the label.
pub fn accuracy(scores: &Matrix, labels: &[usize], indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::input("accuracy over an empty index set"));
    }
    let pred = scores.argmax_rows();
    let mut hits = 0usize;
    for &i in indices {
        if i >= pred.len() || i >= labels.len() {
            return Err(Error::input(format!("node index {i} out of range")));
        }
        hits += usize::from(pred[i] == labels[i]);
    }
    Ok(hits as f64 / indices.len() as f64)
}

/// Test-mode accuracy of `model` on `indices`.
pub fn evaluate(model: &Model, data: &TrainingData, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::input("evaluate needs at least one node"));
    }
    let logits = model.predict(&data.features, &data.ctx)?;
    accuracy(&logits, &data.labels, indices)
}

fn at_epoch(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { op } => Error::Training {
            epoch,
            msg: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains `model` in place on `split.train`, early-stopping on `split.val`,
/// and restores the best epoch's parameters before scoring `split.test`.
pub fn train(model: &mut Model, data: &TrainingData, split: &Split, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::input("train, val and test sets must be non-empty"));
    }
    if model.in_dim != data.n_features() || model.n_classes != data.n_classes() {
        return Err(Error::input(format!(
            "model expects {}→{}, data has {} features and {} classes",
            model.in_dim,
            model.n_classes,
            data.n_features(),
            data.n_classes()
        )));
    }
    let val_loss_cfg = if cfg.val_loss_includes_smoothness {
        cfg.loss
    } else {
        LossConfig { mu: 0.0, ..cfg.loss }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(&model.parameter_shapes());
    let decay: Vec<bool> = model.decay_mask().iter().map(|&d| d || cfg.decay_biases).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_layers: Vec<LayerParams> = model.layers.clone();
    let mut history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let wrap = at_epoch(epoch);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let out = model
            .forward(&mut tape, &bound, Features::Sparse(&data.features), &data.ctx, true, &mut rng)
            .map_err(&wrap)?;
        let z = softmax_predictions(&mut tape, out.logits).map_err(&wrap)?;
        let loss = combined_loss(&mut tape, z, &data.targets, &split.train, &data.ctx.a_hat, &cfg.loss)
            .map_err(&wrap)?;
        let train_loss = tape.value(loss)[(0, 0)];
        tape.backward(loss).map_err(&wrap)?;
        let grads = model.collect_grads(&tape, &bound);
        drop(tape);
        adam_step(&mut model.parameters_mut(), &grads, &decay, &mut adam, cfg)?;

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let out = model
            .forward(&mut tape, &bound, Features::Sparse(&data.features), &data.ctx, false, &mut rng)
            .map_err(&wrap)?;
        let z = softmax_predictions(&mut tape, out.logits).map_err(&wrap)?;
        let vloss = combined_loss(&mut tape, z, &data.targets, &split.val, &data.ctx.a_hat, &val_loss_cfg)
            .map_err(&wrap)?;
        let val_loss = tape.value(vloss)[(0, 0)];
        let val_acc = accuracy(tape.value(out.logits), &data.labels, &split.val)?;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                msg: "loss is not finite".into(),
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
        });
        let watched = match cfg.stop_metric {
            StopMetric::ValLoss => val_loss,
            StopMetric::ValAccuracy => -val_acc,
        };
        match stopper.observe(epoch, watched) {
            StopDecision::Improved => best_layers.clone_from(&model.layers),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    model.layers = best_layers;
    let best_epoch = stopper.best_epoch();
    let val_acc = history[best_epoch - 1].val_acc;
    let test_acc = evaluate(model, data, &split.test)?;
    Ok(TrainReport {
        best_epoch,
        epochs_run: history.len(),
        history,
        val_acc,
        test_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::models::{ModelConfig, ModelKind};

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut w = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let before = w.clone();
        let mut state = AdamState::new(&[(1, 2)]);
        let cfg = TrainConfig::default();
        adam_step(&mut [&mut w], &[Matrix::zeros(1, 2)], &[false], &mut state, &cfg).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let cfg = TrainConfig::default();
        let mut w = Matrix::zeros(1, 1);
        let mut state = AdamState::new(&[(1, 1)]);
        let g = Matrix::filled(1, 1, 3.7);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = w[(0, 0)];
            adam_step(&mut [&mut w], &[g.clone()], &[false], &mut state, &cfg).unwrap();
            last = before - w[(0, 0)];
        }
        assert!((last - cfg.lr).abs() < 1e-9, "{last}");
    }

    #[test]
    fn weight_decay_only_on_masked_params() {
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut w = Matrix::filled(1, 1, 1.0);
        let mut b = Matrix::filled(1, 1, 1.0);
        let mut state = AdamState::new(&[(1, 1), (1, 1)]);
        let zero = Matrix::zeros(1, 1);
        adam_step(&mut [&mut w, &mut b], &[zero.clone(), zero], &[true, false], &mut state, &cfg).unwrap();
        assert!(w[(0, 0)] < 1.0);
        assert_eq!(b[(0, 0)], 1.0);
    }

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(s.observe(2, 2.0), StopDecision::Stop);
        assert_eq!(s.best_epoch(), 1);

        let mut s = EarlyStopping::new(3);
        assert_eq!(s.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(s.observe(2, 1.0), StopDecision::Continue);
        assert_eq!(s.observe(3, 0.5), StopDecision::Improved);
        assert_eq!(s.observe(4, 0.9), StopDecision::Continue);
        assert_eq!(s.observe(5, 0.9), StopDecision::Continue);
        assert_eq!(s.observe(6, 0.9), StopDecision::Stop);
        assert_eq!((s.best_epoch(), s.best()), (3, 0.5));
    }

    #[test]
    fn accuracy_rules() {
        let scores = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        assert_eq!(accuracy(&scores, &[0, 1, 0, 1], &[0, 1]).unwrap(), 0.5);
        assert_eq!(accuracy(&scores, &[0, 1, 0, 1], &[2, 3]).unwrap(), 1.0);
        assert!(accuracy(&scores, &[0, 1, 0, 1], &[]).is_err());
    }

    /// Two 5-cliques with class-revealing one-hot features.
    fn separable() -> (TrainingData, Split) {
        let mut pairs = Vec::new();
        for base in [0, 5] {
            for i in 0..5 {
                for j in i + 1..5 {
                    pairs.push((base + i, base + j));
                }
            }
        }
        pairs.push((4, 5));
        let graph = Graph::from_edge_list(&pairs, 10).unwrap();
        let labels: Vec<usize> = (0..10).map(|i| i / 5).collect();
        let features = Matrix::from_fn(10, 3, |i, j| match j {
            0 => (i / 5 == 0) as u8 as f64,
            1 => (i / 5 == 1) as u8 as f64,
            _ => 1.0,
        });
        let ds = LabeledDataset::new("toy", graph, features, labels).unwrap();
        let split = Split {
            seed: 0,
            ell: 2,
            train: vec![0, 1, 5, 6],
            val: vec![2, 7],
            test: vec![3, 4, 8, 9],
        };
        (TrainingData::new(&ds).unwrap(), split)
    }

    #[test]
    fn separable_toy_reaches_full_train_accuracy() {
        let (data, split) = separable();
        for kind in [ModelKind::Mlp, ModelKind::Gcn, ModelKind::Gat, ModelKind::Appnp] {
            let mut cfg = ModelConfig::new(kind, 2);
            cfg.hidden_dim = 8;
            let mut model = Model::new(cfg, 3, 2, 1).unwrap();
            let tcfg = TrainConfig {
                loss: LossConfig::vanilla(),
                max_epochs: 200,
                ..TrainConfig::default()
            };
            let report = train(&mut model, &data, &split, &tcfg).unwrap();
            assert!(report.best_epoch >= 1 && report.best_epoch <= report.epochs_run);
            assert_eq!(evaluate(&model, &data, &split.train).unwrap(), 1.0, "{kind}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (data, split) = separable();
        let run = || {
            let mut model = Model::new(ModelConfig::new(ModelKind::Gcn, 2), 3, 2, 4).unwrap();
            let cfg = TrainConfig {
                max_epochs: 50,
                seed: 9,
                ..TrainConfig::default()
            };
            let report = train(&mut model, &data, &split, &cfg).unwrap();
            (model, report)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn restored_parameters_match_best_validation_loss() {
        let (data, split) = separable();
        let mut model = Model::new(ModelConfig::new(ModelKind::Mlp, 2), 3, 2, 2).unwrap();
        let cfg = TrainConfig {
            max_epochs: 300,
            patience: 20,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &data, &split, &cfg).unwrap();
        let best = report.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(report.history[report.best_epoch - 1].val_loss, best);
        assert_eq!(report.val_acc, evaluate(&model, &data, &split.val).unwrap());
    }

    #[test]
    fn divergence_names_the_epoch() {
        let (data, split) = separable();
        let mut model = Model::new(ModelConfig::new(ModelKind::Mlp, 1), 3, 2, 0).unwrap();
        model.layers[0].weight[(0, 0)] = f64::NAN;
        let err = train(&mut model, &data, &split, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Training { epoch: 1, .. }), "{err}");
    }
}
