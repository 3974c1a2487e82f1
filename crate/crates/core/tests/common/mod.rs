#![allow(dead_code)]

use rand::Rng;
use smoothgnn::graph::Graph;
use smoothgnn::linalg::Matrix;

/// Erdős–Rényi graph with edge probability `p`.
pub fn random_graph<R: Rng>(n: usize, p: f64, rng: &mut R) -> Graph {
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < p {
                pairs.push((i, j));
            }
        }
    }
    Graph::from_edge_list(&pairs, n).unwrap()
}

/// Row-stochastic `n × c` matrix with strictly positive entries.
pub fn random_probs<R: Rng>(n: usize, c: usize, rng: &mut R) -> Matrix {
    let mut m = Matrix::from_fn(n, c, |_, _| rng.gen_range(0.05..1.0));
    for i in 0..n {
        let s: f64 = m.row(i).iter().sum();
        m.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    m
}

pub fn random_matrix<R: Rng>(r: usize, c: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// Two `k`-cliques joined by a single bridge edge `(k-1, k)`.
pub fn barbell(k: usize) -> Graph {
    let mut pairs = Vec::new();
    for base in [0, k] {
        for i in 0..k {
            for j in i + 1..k {
                pairs.push((base + i, base + j));
            }
        }
    }
    pairs.push((k - 1, k));
    Graph::from_edge_list(&pairs, 2 * k).unwrap()
}

pub fn to_nalgebra(m: &Matrix) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Labels `0..c` assigned round-robin.
pub fn round_robin_labels(n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|i| i % c).collect()
}
