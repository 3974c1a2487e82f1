//! Label diffusion with the kernel `γ (I − (1 − γ) Â)⁻¹`.
//!
//! The closed form is solved directly with a dense Cholesky factorization;
//! the fixed-point iteration `Z ← (1 − γ) Â Z + γ Y` reaches the same point
//! from any starting matrix because `(1 − γ) Â` is a contraction for
//! `γ > 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::linalg::{argmax, Matrix};

/// Above this node count [`Solver::Auto`] switches to the iterative solver.
pub const DIRECT_SOLVER_MAX_NODES: usize = 3_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Iterative,
    Direct,
    /// Direct up to [`DIRECT_SOLVER_MAX_NODES`] nodes, iterative beyond.
    #[default]
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub solver: Solver,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            tol: 1e-8,
            max_iter: 10_000,
            solver: Solver::Auto,
        }
    }
}

impl DiffusionConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }

    /// `γ = 1 / (μ + 1)` for a smoothness weight `μ`.
    pub fn from_mu(mu: f64) -> Self {
        Self::with_gamma(1.0 / (mu + 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if !(self.tol > 0.0) {
            return Err(Error::input(format!("tolerance must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::input(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    Ok(())
}

/// Seed labels: one-hot rows for labeled nodes, zero rows elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    y: Matrix,
    labeled: Vec<bool>,
}

impl LabelMatrix {
    /// `labels[v]` is the class of node `v` when `v` is in `labeled`.
    pub fn new(labels: &[usize], labeled: &[usize], n_classes: usize) -> Result<Self> {
        let n = labels.len();
        let mut y = Matrix::zeros(n, n_classes);
        let mut mask = vec![false; n];
        for &v in labeled {
            if v >= n {
                return Err(Error::input(format!("labeled node {v} out of range for {n} nodes")));
            }
            let c = labels[v];
            if c >= n_classes {
                return Err(Error::input(format!("label {c} of node {v} >= {n_classes} classes")));
            }
            y[(v, c)] = 1.0;
            mask[v] = true;
        }
        Ok(Self { y, labeled: mask })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.y
    }

    pub fn n_nodes(&self) -> usize {
        self.y.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.y.cols()
    }

    pub fn is_labeled(&self, v: usize) -> bool {
        self.labeled[v]
    }

    /// Classes with no labeled node.
    pub fn missing_classes(&self) -> Vec<usize> {
        (0..self.n_classes())
            .filter(|&c| (0..self.n_nodes()).all(|v| self.y[(v, c)] == 0.0))
            .collect()
    }
}

fn check_sizes(a_hat: &NormalizedAdjacency, y: &Matrix) -> Result<()> {
    if a_hat.n_nodes() != y.rows() {
        return Err(Error::shape(
            "diffusion",
            format!("{} graph nodes vs {} label rows", a_hat.n_nodes(), y.rows()),
        ));
    }
    Ok(())
}

/// `Z* = γ (I − (1 − γ) Â)⁻¹ Y` through a dense Cholesky factorization.
pub fn diffuse_direct(a_hat: &NormalizedAdjacency, y: &Matrix, gamma: f64) -> Result<Matrix> {
    check_gamma(gamma)?;
    check_sizes(a_hat, y)?;
    let n = a_hat.n_nodes();
    let mut system = Matrix::identity(n);
    let a = a_hat.matrix();
    for i in 0..n {
        let (cols, vals) = a.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            system[(i, j)] -= (1.0 - gamma) * v;
        }
    }
    let chol = Cholesky::factor(system)?;
    let mut z = chol.solve(y);
    z.scale_in_place(gamma);
    Ok(z)
}

/// Lower-triangular factor `L` with `M = L Lᵀ`.
struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    fn factor(mut m: Matrix) -> Result<Self> {
        let n = m.rows();
        for j in 0..n {
            let mut diag = m[(j, j)];
            for k in 0..j {
                diag -= m[(j, k)] * m[(j, k)];
            }
            if !(diag > 0.0) {
                return Err(Error::Numeric { op: "cholesky" });
            }
            let diag = diag.sqrt();
            m[(j, j)] = diag;
            let (head, tail) = m.as_mut_slice().split_at_mut((j + 1) * n);
            let row_j = &head[j * n..j * n + j];
            for i in (j + 1)..n {
                let row_i = &mut tail[(i - j - 1) * n..(i - j) * n];
                let s: f64 = row_i[..j].iter().zip(row_j).map(|(a, b)| a * b).sum();
                row_i[j] = (row_i[j] - s) / diag;
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                m[(i, j)] = 0.0;
            }
        }
        Ok(Self { l: m })
    }

    fn solve(&self, b: &Matrix) -> Matrix {
        let n = self.l.rows();
        let c = b.cols();
        let mut x = b.clone();
        // forward: L w = b
        for i in 0..n {
            for k in 0..i {
                let lik = self.l[(i, k)];
                if lik == 0.0 {
                    continue;
                }
                for col in 0..c {
                    x[(i, col)] -= lik * x[(k, col)];
                }
            }
            let d = self.l[(i, i)];
            x.row_mut(i).iter_mut().for_each(|v| *v /= d);
        }
        // backward: Lᵀ x = w
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let lki = self.l[(k, i)];
                if lki == 0.0 {
                    continue;
                }
                for col in 0..c {
                    x[(i, col)] -= lki * x[(k, col)];
                }
            }
            let d = self.l[(i, i)];
            x.row_mut(i).iter_mut().for_each(|v| *v /= d);
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterativeOutcome {
    pub z: Matrix,
    pub iters: usize,
    /// Max-abs change of the last step.
    pub residual: f64,
    /// `false` when `max_iter` ran out before the tolerance was met.
    pub converged: bool,
    /// Residual after every step.
    pub residual_history: Vec<f64>,
}

/// Fixed-point iteration started from `Z⁽⁰⁾ = Y`.
pub fn diffuse_iterative(a_hat: &NormalizedAdjacency, y: &Matrix, cfg: &DiffusionConfig) -> Result<IterativeOutcome> {
    diffuse_iterative_from(a_hat, y, y.clone(), cfg)
}

/// Fixed-point iteration from an arbitrary starting matrix.
pub fn diffuse_iterative_from(
    a_hat: &NormalizedAdjacency,
    y: &Matrix,
    start: Matrix,
    cfg: &DiffusionConfig,
) -> Result<IterativeOutcome> {
    cfg.validate()?;
    check_sizes(a_hat, y)?;
    if start.shape() != y.shape() {
        return Err(Error::shape("diffuse_iterative", "start matrix differs from label shape"));
    }
    let gamma = cfg.gamma;
    let mut z = start;
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    for iter in 1..=cfg.max_iter {
        let mut next = a_hat.matmul_dense(&z)?;
        next.scale_in_place(1.0 - gamma);
        next.axpy(gamma, y);
        residual = next.max_abs_diff(&z);
        history.push(residual);
        z = next;
        if residual < cfg.tol {
            return Ok(IterativeOutcome {
                z,
                iters: iter,
                residual,
                converged: true,
                residual_history: history,
            });
        }
    }
    Ok(IterativeOutcome {
        z,
        iters: cfg.max_iter,
        residual,
        converged: false,
        residual_history: history,
    })
}

/// Runs the solver selected by `cfg.solver`.
pub fn diffuse(a_hat: &NormalizedAdjacency, y: &Matrix, cfg: &DiffusionConfig) -> Result<(Matrix, Option<IterativeOutcome>)> {
    let direct = match cfg.solver {
        Solver::Direct => true,
        Solver::Iterative => false,
        Solver::Auto => a_hat.n_nodes() <= DIRECT_SOLVER_MAX_NODES,
    };
    if direct {
        Ok((diffuse_direct(a_hat, y, cfg.gamma)?, None))
    } else {
        let outcome = diffuse_iterative(a_hat, y, cfg)?;
        Ok((outcome.z.clone(), Some(outcome)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    /// Predicted class per node; labeled nodes keep their given class.
    pub predictions: Vec<usize>,
    /// Diffused scores before the argmax.
    pub scores: Matrix,
    /// Classes without any labeled node (a warning, not an error).
    pub missing_classes: Vec<usize>,
    /// Set when the iterative solver ran and stopped before converging.
    pub unconverged_residual: Option<f64>,
}

/// Label propagation baseline: diffuse the seed labels and take the row
/// argmax (ties to the lowest class).
pub fn propagate_labels(a_hat: &NormalizedAdjacency, y: &LabelMatrix, cfg: &DiffusionConfig) -> Result<Propagation> {
    let (scores, outcome) = diffuse(a_hat, y.matrix(), cfg)?;
    let predictions = (0..y.n_nodes())
        .map(|v| {
            if y.is_labeled(v) {
                argmax(y.matrix().row(v))
            } else {
                argmax(scores.row(v))
            }
        })
        .collect();
    Ok(Propagation {
        predictions,
        scores,
        missing_classes: y.missing_classes(),
        unconverged_residual: outcome.filter(|o| !o.converged).map(|o| o.residual),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn path(n: usize) -> NormalizedAdjacency {
        let pairs: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        NormalizedAdjacency::from_graph(&Graph::from_edge_list(&pairs, n).unwrap())
    }

    #[test]
    fn gamma_one_is_identity_kernel() {
        let a = path(5);
        let y = LabelMatrix::new(&[0, 1, 0, 1, 0], &[0, 3], 2).unwrap();
        let z = diffuse_direct(&a, y.matrix(), 1.0).unwrap();
        assert!(z.max_abs_diff(y.matrix()) < 1e-15);
        let out = diffuse_iterative(&a, y.matrix(), &DiffusionConfig::with_gamma(1.0)).unwrap();
        assert_eq!(out.iters, 1);
        assert!(out.converged);
        assert_eq!(&out.z, y.matrix());
    }

    #[test]
    fn identity_adjacency_returns_labels() {
        let a = NormalizedAdjacency::from_graph(&Graph::from_edge_list(&[], 4).unwrap());
        let y = LabelMatrix::new(&[0, 1, 2, 0], &[0, 1, 2], 3).unwrap();
        let z = diffuse_direct(&a, y.matrix(), 0.3).unwrap();
        assert!(z.max_abs_diff(y.matrix()) < 1e-14);
    }

    #[test]
    fn gamma_outside_range_is_rejected() {
        let a = path(3);
        let y = Matrix::zeros(3, 2);
        assert!(diffuse_direct(&a, &y, 0.0).is_err());
        assert!(diffuse_direct(&a, &y, 1.5).is_err());
        assert!(diffuse_iterative(&a, &y, &DiffusionConfig::with_gamma(0.0)).is_err());
    }

    #[test]
    fn iteration_budget_exhaustion_is_an_outcome() {
        let a = path(30);
        let y = LabelMatrix::new(&vec![0; 30], &[0], 1).unwrap();
        let cfg = DiffusionConfig { gamma: 0.01, max_iter: 3, ..DiffusionConfig::default() };
        let out = diffuse_iterative(&a, y.matrix(), &cfg).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iters, 3);
        assert!(out.residual > cfg.tol);
        let cfg = DiffusionConfig { solver: Solver::Iterative, ..cfg };
        let p = propagate_labels(&a, &y, &cfg).unwrap();
        assert_eq!(p.unconverged_residual, Some(out.residual));
    }

    #[test]
    fn propagation_keeps_given_labels_and_reports_missing_classes() {
        let a = path(4);
        let labels = [1, 0, 1, 0];
        let all = LabelMatrix::new(&labels, &[0, 1, 2, 3], 2).unwrap();
        let p = propagate_labels(&a, &all, &DiffusionConfig::with_gamma(0.2)).unwrap();
        assert_eq!(p.predictions, labels);
        assert!(p.missing_classes.is_empty());

        let single = LabelMatrix::new(&[2, 0, 0, 0], &[0], 3).unwrap();
        let p = propagate_labels(&a, &single, &DiffusionConfig::with_gamma(0.2)).unwrap();
        assert_eq!(p.predictions, vec![2; 4]);
        assert_eq!(p.missing_classes, vec![0, 1]);
    }

    #[test]
    fn mu_maps_to_gamma() {
        assert_eq!(DiffusionConfig::from_mu(0.0).gamma, 1.0);
        assert_eq!(DiffusionConfig::from_mu(1.0).gamma, 0.5);
    }
}
