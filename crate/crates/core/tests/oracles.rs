//! Independent reference implementations checked against the library.

mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smoothgnn::autodiff::{Tape, LOG_EPS};
use smoothgnn::diffusion::{diffuse_direct, diffuse_iterative, DiffusionConfig};
use smoothgnn::graph::{Graph, NormalizedAdjacency};
use smoothgnn::linalg::Matrix;
use smoothgnn::losses::*;

fn scalar(tape: &Tape, t: smoothgnn::autodiff::Tensor) -> f64 {
    tape.value(t)[(0, 0)]
}

fn ln(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

fn loop_ce_fit(z: &Matrix, labels: &[usize], labeled: &[usize]) -> f64 {
    labeled.iter().map(|&i| -ln(z[(i, labels[i])])).sum()
}

fn loop_l2_fit(z: &Matrix, y: &Matrix, labeled: &[usize]) -> f64 {
    labeled
        .iter()
        .map(|&i| (0..z.cols()).map(|k| (z[(i, k)] - y[(i, k)]).powi(2)).sum::<f64>())
        .sum()
}

fn loop_l2_smooth(z: &Matrix, a: &Matrix) -> f64 {
    let n = z.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if a[(i, j)] != 0.0 {
                let d: f64 = (0..z.cols()).map(|k| (z[(i, k)] - z[(j, k)]).powi(2)).sum();
                total += a[(i, j)] * d;
            }
        }
    }
    total
}

fn loop_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..row.len() {
        if row[k] > row[best] {
            best = k;
        }
    }
    best
}

fn loop_ce_smooth(z: &Matrix, a: &Matrix, self_pairs: bool) -> f64 {
    let n = z.rows();
    let mut total = 0.0;
    for i in 0..n {
        let target = loop_argmax(z.row(i));
        for j in 0..n {
            if a[(i, j)] != 0.0 && (self_pairs || i != j) {
                total -= a[(i, j)] * ln(z[(j, target)]);
            }
        }
    }
    total
}

fn setup(seed: u64, n: usize, c: usize) -> (NormalizedAdjacency, Matrix, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(n, 0.25, &mut rng);
    let z = random_probs(n, c, &mut rng);
    let labels = round_robin_labels(n, c);
    let labeled: Vec<usize> = (0..n).filter(|i| i % 3 == 0).collect();
    (NormalizedAdjacency::from_graph(&g), z, labels, labeled)
}

#[test]
fn fitness_terms_match_scalar_loops() {
    for seed in 0..10 {
        let (_, z, labels, labeled) = setup(seed, 15, 4);
        let y = one_hot(&labels, 4).unwrap();
        let mut tape = Tape::new();
        let zt = tape.constant(z.clone());
        let ce = ce_fit(&mut tape, zt, &y, &labeled).unwrap();
        let l2 = l2_fit(&mut tape, zt, &y, &labeled).unwrap();
        assert!((scalar(&tape, ce) - loop_ce_fit(&z, &labels, &labeled)).abs() < 1e-12);
        assert!((scalar(&tape, l2) - loop_l2_fit(&z, &y, &labeled)).abs() < 1e-12);
    }
}

#[test]
fn smoothness_terms_match_scalar_loops() {
    for seed in 0..10 {
        let (a_hat, z, _, _) = setup(100 + seed, 18, 3);
        let a = a_hat.to_dense();
        let mut tape = Tape::new();
        let zt = tape.constant(z.clone());
        let l2 = l2_smooth(&mut tape, zt, &a_hat).unwrap();
        let ce_self = ce_smooth(&mut tape, zt, &a_hat, true).unwrap();
        let ce_noself = ce_smooth(&mut tape, zt, &a_hat, false).unwrap();
        let l2_oracle = loop_l2_smooth(&z, &a);
        assert!((scalar(&tape, l2) - l2_oracle).abs() < 1e-10 * (1.0 + l2_oracle));
        assert!((scalar(&tape, ce_self) - loop_ce_smooth(&z, &a, true)).abs() < 1e-10);
        assert!((scalar(&tape, ce_noself) - loop_ce_smooth(&z, &a, false)).abs() < 1e-10);
    }
}

#[test]
fn l2_smooth_matches_dense_laplacian_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let n = 5 + (rand::Rng::gen_range(&mut rng, 0..25));
        let g = random_graph(n, 0.3, &mut rng);
        let a_hat = NormalizedAdjacency::from_graph(&g);
        let z = random_matrix(n, 3, &mut rng);
        let a = to_nalgebra(&a_hat.to_dense());
        let d = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |i, _| a.row(i).sum()));
        let zz = to_nalgebra(&z);
        let oracle = 2.0 * (zz.transpose() * (d - &a) * &zz).trace();
        let mut tape = Tape::new();
        let zt = tape.constant(z);
        let got = l2_smooth(&mut tape, zt, &a_hat).unwrap();
        assert!((scalar(&tape, got) - oracle).abs() < 1e-10 * (1.0 + oracle.abs()));
    }
}

#[test]
fn combined_l2_matches_scalar_loop() {
    for seed in 0..5 {
        let (a_hat, z, labels, labeled) = setup(200 + seed, 20, 3);
        let y = one_hot(&labels, 3).unwrap();
        let a = a_hat.to_dense();
        let cfg = LossConfig {
            mu: 1.0,
            variant: SmoothnessVariant::L2,
            ..LossConfig::default()
        };
        let mut tape = Tape::new();
        let zt = tape.constant(z.clone());
        let got = combined_loss(&mut tape, zt, &y, &labeled, &a_hat, &cfg).unwrap();
        let oracle = loop_l2_fit(&z, &y, &labeled) + loop_l2_smooth(&z, &a);
        assert!((scalar(&tape, got) - oracle).abs() < 1e-10 * (1.0 + oracle));
    }
}

#[test]
fn two_node_ce_smooth_by_hand() {
    // Â for a single edge: every entry is 1/2.
    let g = Graph::from_edge_list(&[(0, 1)], 2).unwrap();
    let a_hat = NormalizedAdjacency::from_graph(&g);
    let z = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
    let mut tape = Tape::new();
    let zt = tape.constant(z);
    let without = ce_smooth(&mut tape, zt, &a_hat, false).unwrap();
    let with = ce_smooth(&mut tape, zt, &a_hat, true).unwrap();
    let cross = -0.5 * 0.1f64.ln() - 0.5 * 0.1f64.ln();
    let selfs = -0.5 * 0.9f64.ln() - 0.5 * 0.9f64.ln();
    assert!((scalar(&tape, without) - cross).abs() < 1e-14);
    assert!((scalar(&tape, with) - (cross + selfs)).abs() < 1e-14);
}

#[test]
fn empty_graph_ce_smooth_is_self_entropy_of_max() {
    let a_hat = NormalizedAdjacency::from_graph(&Graph::from_edge_list(&[], 3).unwrap());
    let z = Matrix::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4], vec![0.5, 0.5]]).unwrap();
    let mut tape = Tape::new();
    let zt = tape.constant(z);
    let got = ce_smooth(&mut tape, zt, &a_hat, true).unwrap();
    let oracle = -(0.8f64.ln() + 0.6f64.ln() + 0.5f64.ln());
    assert!((scalar(&tape, got) - oracle).abs() < 1e-14);
}

#[test]
fn normalized_l2_smooth_matches_degree_scaled_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_graph(12, 0.3, &mut rng);
    let looped = g.add_self_loops();
    let deg = looped.degrees();
    let a_tilde = looped.adjacency().to_dense();
    let z = random_matrix(12, 2, &mut rng);
    let mut oracle = 0.0;
    for i in 0..12 {
        for j in 0..12 {
            for k in 0..2 {
                oracle += a_tilde[(i, j)] * (z[(i, k)] / deg[i].sqrt() - z[(j, k)] / deg[j].sqrt()).powi(2);
            }
        }
    }
    let a_hat = NormalizedAdjacency::from_graph(&g);
    let mut tape = Tape::new();
    let zt = tape.constant(z);
    let got = l2_smooth_normalized(&mut tape, zt, &a_hat).unwrap();
    assert!((scalar(&tape, got) - oracle).abs() < 1e-10);
}

#[test]
fn spectral_radius_of_normalized_adjacency() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let n = 2 + trial * 5;
        let g = random_graph(n, 0.2, &mut rng);
        let a = to_nalgebra(&NormalizedAdjacency::from_graph(&g).to_dense());
        let eig = a.symmetric_eigen();
        let rho = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(rho <= 1.0 + 1e-10, "n={n} rho={rho}");
    }
}

#[test]
fn direct_solver_matches_dense_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_graph(30, 0.15, &mut rng);
    let a_hat = NormalizedAdjacency::from_graph(&g);
    let y = one_hot(&round_robin_labels(30, 3), 3).unwrap();
    for gamma in [0.05, 0.5, 1.0] {
        let m = nalgebra::DMatrix::identity(30, 30) - to_nalgebra(&a_hat.to_dense()) * (1.0 - gamma);
        let oracle = m.try_inverse().unwrap() * to_nalgebra(&y) * gamma;
        let got = to_nalgebra(&diffuse_direct(&a_hat, &y, gamma).unwrap());
        assert!((oracle - got).amax() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_adjacency_is_symmetric_and_nonnegative(
        n in 1usize..40,
        edges in prop::collection::vec((0usize..40, 0usize..40), 0..120),
    ) {
        let pairs: Vec<_> = edges.into_iter().filter(|&(u, v)| u < n && v < n).collect();
        let g = Graph::from_edge_list(&pairs, n).unwrap();
        let a = NormalizedAdjacency::from_graph(&g).to_dense();
        for i in 0..n {
            prop_assert!(a[(i, i)] > 0.0);
            for j in 0..n {
                prop_assert!(a[(i, j)] >= 0.0);
                prop_assert!((a[(i, j)] - a[(j, i)]).abs() < 1e-15);
                prop_assert_eq!(a[(i, j)] != 0.0, i == j || g.has_edge(i, j));
            }
        }
    }

    #[test]
    fn normalization_commutes_with_relabeling(seed in 0u64..1000, n in 2usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(n, 0.3, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let a = NormalizedAdjacency::from_graph(&g).to_dense();
        let b = NormalizedAdjacency::from_graph(&g.permuted(&perm).unwrap()).to_dense();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((a[(i, j)] - b[(perm[i], perm[j])]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn smoothness_losses_are_nonnegative(seed in 0u64..1000, n in 1usize..20, c in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_hat = NormalizedAdjacency::from_graph(&random_graph(n, 0.3, &mut rng));
        let z = random_probs(n, c, &mut rng);
        let mut tape = Tape::new();
        let zt = tape.constant(z);
        let l2 = l2_smooth(&mut tape, zt, &a_hat).unwrap();
        let ce = ce_smooth(&mut tape, zt, &a_hat, true).unwrap();
        prop_assert!(scalar(&tape, l2) >= -1e-12);
        prop_assert!(scalar(&tape, ce) >= 0.0);
    }

    #[test]
    fn l2_smooth_vanishes_exactly_on_componentwise_constants(seed in 0u64..1000, n in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(n, 0.15, &mut rng);
        let a_hat = NormalizedAdjacency::from_graph(&g);
        let comp = g.connected_components();
        let n_comp = comp.iter().max().unwrap() + 1;
        let values = random_matrix(n_comp, 2, &mut rng);
        let constant = Matrix::from_fn(n, 2, |i, k| values[(comp[i], k)]);
        let mut tape = Tape::new();
        let zt = tape.constant(constant.clone());
        let zero = l2_smooth(&mut tape, zt, &a_hat).unwrap();
        prop_assert!(scalar(&tape, zero).abs() < 1e-12);

        // Perturbing one node that has a neighbor makes it positive.
        if let Some(v) = (0..n).find(|&v| g.neighbors(v).iter().any(|&u| u != v)) {
            let mut bumped = constant;
            bumped[(v, 0)] += 0.5;
            let zt = tape.constant(bumped);
            let pos = l2_smooth(&mut tape, zt, &a_hat).unwrap();
            prop_assert!(scalar(&tape, pos) > 1e-6);
        }
    }

    #[test]
    fn combined_loss_increases_with_mu(seed in 0u64..1000, mu in 0.0f64..3.0, step in 0.01f64..1.0) {
        let (a_hat, z, labels, labeled) = setup(seed, 12, 3);
        let y = one_hot(&labels, 3).unwrap();
        let eval = |mu: f64| {
            let mut tape = Tape::new();
            let zt = tape.constant(z.clone());
            let cfg = LossConfig { mu, ..LossConfig::default() };
            let l = combined_loss(&mut tape, zt, &y, &labeled, &a_hat, &cfg).unwrap();
            scalar(&tape, l)
        };
        prop_assert!(eval(mu + step) > eval(mu));
    }

    #[test]
    fn softmax_and_argmax_rows(rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 4), 1..10)) {
        let logits = Matrix::from_rows(&rows).unwrap();
        let mut tape = Tape::new();
        let lt = tape.constant(logits.clone());
        let z = softmax_predictions(&mut tape, lt).unwrap();
        let z = tape.value(z).clone();
        let phi = one_hot_argmax(&z);
        for i in 0..z.rows() {
            let s: f64 = z.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
            prop_assert!(z.row(i).iter().all(|&p| p >= 0.0));
            prop_assert_eq!(phi.row(i).iter().sum::<f64>(), 1.0);
            prop_assert!(phi.row(i).iter().all(|&p| p == 0.0 || p == 1.0));
            prop_assert_eq!(loop_argmax(z.row(i)), loop_argmax(logits.row(i)));
            let cubed = Matrix::from_fn(1, 4, |_, k| z[(i, k)].powi(3) + 2.0);
            let phi_cubed = one_hot_argmax(&cubed);
            prop_assert_eq!(phi_cubed.row(0), phi.row(i));
        }
    }

    #[test]
    fn diffusion_is_nonnegative_and_solvers_agree(seed in 0u64..1000, n in 2usize..60, gamma in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_hat = NormalizedAdjacency::from_graph(&random_graph(n, 0.1, &mut rng));
        let y = one_hot(&round_robin_labels(n, 2), 2).unwrap();
        let direct = diffuse_direct(&a_hat, &y, gamma).unwrap();
        prop_assert!(direct.as_slice().iter().all(|&v| v >= -1e-12));
        let it = diffuse_iterative(&a_hat, &y, &DiffusionConfig::with_gamma(gamma)).unwrap();
        prop_assert!(it.converged);
        prop_assert!(direct.max_abs_diff(&it.z) < 1e-6);
    }
}
