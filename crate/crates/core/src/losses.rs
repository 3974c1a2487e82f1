//! Supervised fitness losses, graph smoothness losses, and their combination
//! `L = L_fit + μ · L_smooth`.
//!
//! All terms are sums (no averaging over nodes or edges). The smoothness
//! terms run over every ordered pair `(i, j)` with a nonzero entry of the
//! normalized adjacency `Â`, labeled and unlabeled nodes alike.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::linalg::{argmax, CsrMatrix, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessVariant {
    /// Squared error for both terms.
    L2,
    /// Cross-entropy fitness, and cross-entropy smoothness against the
    /// one-hot argmax of the neighbor's prediction.
    #[default]
    CrossEntropy,
}

/// How `combined_loss` scales its two terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Plain sums over labeled nodes and adjacency pairs.
    #[default]
    Sum,
    /// Fitness divided by `|L|`, smoothness divided by the node count.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub mu: f64,
    pub variant: SmoothnessVariant,
    /// Whether the diagonal (self-loop) entries of `Â` contribute to the
    /// smoothness term. They are zero for the L2 variant either way.
    pub include_self_pairs: bool,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            variant: SmoothnessVariant::CrossEntropy,
            include_self_pairs: true,
            reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    /// Plain supervised cross-entropy.
    pub fn vanilla() -> Self {
        Self {
            mu: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::input(format!("mu must be finite and >= 0, got {}", self.mu)));
        }
        Ok(())
    }
}

/// Row-wise softmax turning logits into predicted label distributions.
pub fn softmax_predictions(tape: &mut Tape, logits: Tensor) -> Result<Tensor> {
    tape.row_softmax(logits)
}

/// `n × c` one-hot encoding of integer labels.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Matrix> {
    let mut y = Matrix::zeros(labels.len(), n_classes);
    for (i, &c) in labels.iter().enumerate() {
        if c >= n_classes {
            return Err(Error::input(format!("label {c} at row {i} >= {n_classes} classes")));
        }
        y[(i, c)] = 1.0;
    }
    Ok(y)
}

fn check_labeled(z_rows: usize, y: &Matrix, labeled: &[usize]) -> Result<()> {
    if y.rows() != z_rows {
        return Err(Error::shape("fit loss", format!("{} prediction rows vs {} target rows", z_rows, y.rows())));
    }
    if let Some(&bad) = labeled.iter().find(|&&i| i >= z_rows) {
        return Err(Error::input(format!("labeled index {bad} out of range for {z_rows} nodes")));
    }
    Ok(())
}

fn labeled_targets(y: &Matrix, labeled: &[usize]) -> Matrix {
    Matrix::from_fn(labeled.len(), y.cols(), |i, j| y[(labeled[i], j)])
}

/// `−Σ_{i∈L} y_i · log z_i`
pub fn ce_fit(tape: &mut Tape, z: Tensor, y: &Matrix, labeled: &[usize]) -> Result<Tensor> {
    check_labeled(tape.shape(z).0, y, labeled)?;
    if labeled.is_empty() {
        return Ok(tape.constant(Matrix::zeros(1, 1)));
    }
    let zl = tape.gather_rows(z, labeled)?;
    let log_z = tape.log_clamped(zl)?;
    let targets = tape.constant(labeled_targets(y, labeled));
    let picked = tape.mul(log_z, targets)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0)
}

/// `Σ_{i∈L} ‖z_i − y_i‖²`
pub fn l2_fit(tape: &mut Tape, z: Tensor, y: &Matrix, labeled: &[usize]) -> Result<Tensor> {
    check_labeled(tape.shape(z).0, y, labeled)?;
    if labeled.is_empty() {
        return Ok(tape.constant(Matrix::zeros(1, 1)));
    }
    let zl = tape.gather_rows(z, labeled)?;
    let targets = tape.constant(labeled_targets(y, labeled));
    let diff = tape.sub(zl, targets)?;
    let sq = tape.mul(diff, diff)?;
    tape.sum(sq)
}

/// `Σ_{i,j} Â_ij ‖z_i − z_j‖²`, evaluated as `2·tr(Zᵀ(D̂ − Â)Z)` with
/// `D̂ = diag(row sums of Â)`.
pub fn l2_smooth(tape: &mut Tape, z: Tensor, a_hat: &NormalizedAdjacency) -> Result<Tensor> {
    let (n, c) = tape.shape(z);
    if n != a_hat.n_nodes() {
        return Err(Error::shape("l2_smooth", format!("{n} rows vs {} nodes", a_hat.n_nodes())));
    }
    let deg = a_hat.matrix().row_sums();
    let deg = tape.constant(Matrix::from_fn(n, c, |i, _| deg[i]));
    let sq = tape.mul(z, z)?;
    let weighted = tape.mul(deg, sq)?;
    let diag_term = tape.sum(weighted)?;
    let az = tape.spmm(&a_hat.shared(), z)?;
    let cross = tape.mul(z, az)?;
    let cross_term = tape.sum(cross)?;
    let quad = tape.sub(diag_term, cross_term)?;
    tape.scale(quad, 2.0)
}

/// Degree-normalized smoothness `Σ_{i,j} Ã_ij ‖z_i/√d_i − z_j/√d_j‖²`, where
/// `d` are the row sums of `Ã`. Equals `2·tr(Zᵀ(I − Â)Z)`.
pub fn l2_smooth_normalized(tape: &mut Tape, z: Tensor, a_hat: &NormalizedAdjacency) -> Result<Tensor> {
    let n = tape.shape(z).0;
    if n != a_hat.n_nodes() {
        return Err(Error::shape("l2_smooth_normalized", format!("{n} rows vs {} nodes", a_hat.n_nodes())));
    }
    let sq = tape.mul(z, z)?;
    let diag_term = tape.sum(sq)?;
    let az = tape.spmm(&a_hat.shared(), z)?;
    let cross = tape.mul(z, az)?;
    let cross_term = tape.sum(cross)?;
    let quad = tape.sub(diag_term, cross_term)?;
    tape.scale(quad, 2.0)
}

/// `‖Z − Y‖² + (μ/2)·l2_smooth_normalized(Z)` over all nodes, with zero rows
/// of `Y` for unlabeled nodes. Its unique minimizer is the diffusion
/// `γ (I − (1 − γ) Â)⁻¹ Y` with `γ = 1 / (μ + 1)`.
pub fn diffusion_objective(
    tape: &mut Tape,
    z: Tensor,
    y: &Matrix,
    a_hat: &NormalizedAdjacency,
    mu: f64,
) -> Result<Tensor> {
    if tape.shape(z) != y.shape() {
        return Err(Error::shape("diffusion_objective", format!("{:?} vs {:?}", tape.shape(z), y.shape())));
    }
    let y = tape.constant(y.clone());
    let diff = tape.sub(z, y)?;
    let sq = tape.mul(diff, diff)?;
    let fit = tape.sum(sq)?;
    let smooth = l2_smooth_normalized(tape, z, a_hat)?;
    let weighted = tape.scale(smooth, mu / 2.0)?;
    tape.add(fit, weighted)
}

/// One-hot indicator of each row's maximum (ties to the lowest index).
/// Used as a constant: no gradient flows through it.
pub fn one_hot_argmax(z: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        out[(i, argmax(z.row(i)))] = 1.0;
    }
    out
}

fn without_diagonal(a: &CsrMatrix) -> CsrMatrix {
    let rows = a.row_of_entries();
    let values = a
        .values()
        .iter()
        .zip(rows.iter().zip(a.indices()))
        .map(|(&v, (&i, &j))| if i == j { 0.0 } else { v })
        .collect();
    a.with_values(values).expect("same pattern")
}

/// `−Σ_{(i,j)} Â_ij · φ(z_i) · log z_j` with `φ(z_i)` held constant.
///
/// Computed as `−sum((Âᵀ Φ) ⊙ log Z)`, which gathers every pair's target into
/// the row of the node whose prediction receives the gradient.
pub fn ce_smooth(
    tape: &mut Tape,
    z: Tensor,
    a_hat: &NormalizedAdjacency,
    include_self_pairs: bool,
) -> Result<Tensor> {
    let n = tape.shape(z).0;
    if n != a_hat.n_nodes() {
        return Err(Error::shape("ce_smooth", format!("{n} rows vs {} nodes", a_hat.n_nodes())));
    }
    let phi = one_hot_argmax(tape.value(z));
    let weights = if include_self_pairs {
        a_hat.shared()
    } else {
        Arc::new(without_diagonal(a_hat.matrix()))
    };
    let targets = tape.constant(weights.transpose_matmul_dense(&phi)?);
    let log_z = tape.log_clamped(z)?;
    let picked = tape.mul(targets, log_z)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0)
}

/// `L_fit + μ · L_smooth` for the configured variant. With `μ = 0` the
/// smoothness term is not evaluated at all.
pub fn combined_loss(
    tape: &mut Tape,
    z: Tensor,
    y: &Matrix,
    labeled: &[usize],
    a_hat: &NormalizedAdjacency,
    cfg: &LossConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut fit = match cfg.variant {
        SmoothnessVariant::CrossEntropy => ce_fit(tape, z, y, labeled)?,
        SmoothnessVariant::L2 => l2_fit(tape, z, y, labeled)?,
    };
    let mean = cfg.reduction == Reduction::Mean;
    if mean && !labeled.is_empty() {
        fit = tape.scale(fit, 1.0 / labeled.len() as f64)?;
    }
    if cfg.mu == 0.0 {
        return Ok(fit);
    }
    let smooth = match cfg.variant {
        SmoothnessVariant::CrossEntropy => ce_smooth(tape, z, a_hat, cfg.include_self_pairs)?,
        SmoothnessVariant::L2 => l2_smooth(tape, z, a_hat)?,
    };
    let weight = if mean { cfg.mu / a_hat.n_nodes() as f64 } else { cfg.mu };
    let weighted = tape.scale(smooth, weight)?;
    tape.add(fit, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn scalar(tape: &Tape, t: Tensor) -> f64 {
        tape.value(t)[(0, 0)]
    }

    #[test]
    fn softmax_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(1, 3));
        let z = softmax_predictions(&mut tape, x).unwrap();
        for &p in tape.value(z).as_slice() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = tape.constant(probs(&[vec![0.3, -1.2, 2.0]]));
        let b = tape.constant(probs(&[vec![5.3, 3.8, 7.0]]));
        let za = softmax_predictions(&mut tape, a).unwrap();
        let zb = softmax_predictions(&mut tape, b).unwrap();
        assert!(tape.value(za).max_abs_diff(tape.value(zb)) < 1e-15);
        assert_eq!(tape.value(za).argmax_rows(), vec![2]);
    }

    #[test]
    fn ce_fit_cases() {
        let y = one_hot(&[1, 0], 3).unwrap();
        let mut tape = Tape::new();
        let exact = tape.constant(probs(&[vec![0.0, 1.0, 0.0], vec![0.2, 0.3, 0.5]]));
        let l = ce_fit(&mut tape, exact, &y, &[0]).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);

        let uniform = tape.constant(Matrix::filled(2, 3, 1.0 / 3.0));
        let l = ce_fit(&mut tape, uniform, &y, &[1]).unwrap();
        assert!((scalar(&tape, l) - 3f64.ln()).abs() < 1e-14);

        let l = ce_fit(&mut tape, uniform, &y, &[]).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);

        assert!(matches!(ce_fit(&mut tape, uniform, &y, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn l2_terms_vanish_on_fitted_and_constant_predictions() {
        let g = Graph::from_edge_list(&[(0, 1), (1, 2)], 3).unwrap();
        let a_hat = NormalizedAdjacency::from_graph(&g);
        let y = one_hot(&[0, 1, 1], 2).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(y.clone());
        let fit = l2_fit(&mut tape, z, &y, &[0, 2]).unwrap();
        assert_eq!(scalar(&tape, fit), 0.0);
        let c = tape.constant(Matrix::filled(3, 2, 0.5));
        let s = l2_smooth(&mut tape, c, &a_hat).unwrap();
        assert!(scalar(&tape, s).abs() < 1e-15);
    }

    #[test]
    fn one_hot_argmax_cases() {
        assert_eq!(one_hot_argmax(&probs(&[vec![0.1, 0.7, 0.2]])).as_slice(), &[0.0, 1.0, 0.0]);
        assert_eq!(one_hot_argmax(&probs(&[vec![0.5, 0.5]])).as_slice(), &[1.0, 0.0]);
        let row = probs(&[vec![0.2, -0.4, 0.9, 0.1]]);
        let transformed = row.map(|x| (3.0 * x).exp() + 7.0);
        assert_eq!(one_hot_argmax(&row), one_hot_argmax(&transformed));
    }

    #[test]
    fn ce_smooth_two_nodes_matches_hand_value() {
        // Two connected nodes with a hand-built Â: only the off-diagonal pairs.
        let adj = Graph::from_edge_list(&[(0, 1)], 2).unwrap();
        let a_hat = NormalizedAdjacency::from_graph(&adj);
        let mut tape = Tape::new();
        let z = tape.constant(probs(&[vec![0.9, 0.1], vec![0.1, 0.9]]));
        let no_self = ce_smooth(&mut tape, z, &a_hat, false).unwrap();
        let expected = -0.5 * 0.1f64.ln() - 0.5 * 0.1f64.ln();
        assert!((scalar(&tape, no_self) - expected).abs() < 1e-14);
        let with_self = ce_smooth(&mut tape, z, &a_hat, true).unwrap();
        let expected_self = expected - 0.5 * 0.9f64.ln() - 0.5 * 0.9f64.ln();
        assert!((scalar(&tape, with_self) - expected_self).abs() < 1e-14);
    }

    #[test]
    fn ce_smooth_vanishes_on_saturated_identical_rows() {
        let g = Graph::from_edge_list(&[(0, 1), (1, 2)], 3).unwrap();
        let a_hat = NormalizedAdjacency::from_graph(&g);
        let mut tape = Tape::new();
        let z = tape.constant(probs(&vec![vec![1.0 - 1e-15, 1e-15]; 3]));
        let l = ce_smooth(&mut tape, z, &a_hat, true).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-13);
    }

    #[test]
    fn mu_zero_is_exactly_the_fit_term() {
        let g = Graph::from_edge_list(&[(0, 1), (1, 2), (2, 3)], 4).unwrap();
        let a_hat = NormalizedAdjacency::from_graph(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = one_hot(&[0, 1, 0, 1], 2).unwrap();
        let mut tape = Tape::new();
        let logits = tape.constant(Matrix::random_uniform(4, 2, -1.0, 1.0, &mut rng));
        let z = softmax_predictions(&mut tape, logits).unwrap();
        for variant in [SmoothnessVariant::CrossEntropy, SmoothnessVariant::L2] {
            let cfg = LossConfig { mu: 0.0, variant, ..LossConfig::default() };
            let combined = combined_loss(&mut tape, z, &y, &[0, 3], &a_hat, &cfg).unwrap();
            let fit = match variant {
                SmoothnessVariant::CrossEntropy => ce_fit(&mut tape, z, &y, &[0, 3]).unwrap(),
                SmoothnessVariant::L2 => l2_fit(&mut tape, z, &y, &[0, 3]).unwrap(),
            };
            assert_eq!(scalar(&tape, combined), scalar(&tape, fit));
        }
        let bad = LossConfig { mu: -1.0, ..LossConfig::default() };
        assert!(combined_loss(&mut tape, z, &y, &[0], &a_hat, &bad).is_err());
    }
}
