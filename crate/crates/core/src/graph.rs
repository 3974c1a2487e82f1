//! Undirected graph storage and the normalized adjacency operator.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, Matrix};

/// Immutable undirected graph backed by a symmetric CSR adjacency matrix.
///
/// Every stored value is `1.0`: input edge weights are never kept.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    adjacency: CsrMatrix,
    binary_input: bool,
}

impl Graph {
    /// Builds a binary symmetric graph from undirected pairs.
    ///
    /// Both orientations of every pair are stored once; repeated pairs and
    /// repeated self-loops collapse to a single entry of value 1.
    pub fn from_edge_list(pairs: &[(usize, usize)], n_nodes: usize) -> Result<Self> {
        if let Some(&(u, v)) = pairs.iter().find(|(u, v)| *u >= n_nodes || *v >= n_nodes) {
            return Err(Error::input(format!(
                "edge ({u},{v}) references a node outside 0..{n_nodes}"
            )));
        }
        let mut entries: Vec<(usize, usize)> = pairs
            .iter()
            .flat_map(|&(u, v)| [(u, v), (v, u)])
            .collect();
        entries.sort_unstable();
        entries.dedup();
        let adjacency =
            CsrMatrix::from_triplets(n_nodes, n_nodes, entries.into_iter().map(|(u, v)| (u, v, 1.0)))?;
        Ok(Self {
            adjacency,
            binary_input: true,
        })
    }

    /// Reads a whitespace-separated `u v` edge file. Lines starting with `#`
    /// and blank lines are skipped.
    pub fn read_edge_file(path: &Path, n_nodes: usize) -> Result<Self> {
        let pairs = read_edge_pairs(path)?;
        Self::from_edge_list(&pairs, n_nodes).map_err(|e| match e {
            Error::Input(msg) => Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg,
            },
            other => other,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.n_rows()
    }

    /// Number of stored directed entries (each undirected edge counts twice,
    /// a self-loop once).
    pub fn n_entries(&self) -> usize {
        self.adjacency.nnz()
    }

    /// Number of distinct undirected edges, self-loops included.
    pub fn n_undirected_edges(&self) -> usize {
        let loops = (0..self.n_nodes()).filter(|&v| self.has_edge(v, v)).count();
        (self.n_entries() - loops) / 2 + loops
    }

    pub fn binary_input(&self) -> bool {
        self.binary_input
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        self.adjacency.row(v).0
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Row sums of the stored values.
    pub fn degrees(&self) -> Vec<f64> {
        self.adjacency.row_sums()
    }

    /// `A + I`, leaving existing self-loops at value 1.
    pub fn add_self_loops(&self) -> Graph {
        let n = self.n_nodes();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(self.n_entries() + n);
        indptr.push(0);
        for v in 0..n {
            let cols = self.neighbors(v);
            let pos = cols.partition_point(|&c| c < v);
            indices.extend_from_slice(&cols[..pos]);
            indices.push(v);
            let rest = if cols.get(pos) == Some(&v) { pos + 1 } else { pos };
            indices.extend_from_slice(&cols[rest..]);
            indptr.push(indices.len());
        }
        let values = vec![1.0; indices.len()];
        Graph {
            adjacency: CsrMatrix::new(n, n, indptr, indices, values)
                .expect("self-loop insertion preserves CSR structure"),
            binary_input: self.binary_input,
        }
    }

    /// Connected component id of every node, numbered in order of first node.
    pub fn connected_components(&self) -> Vec<usize> {
        let n = self.n_nodes();
        let mut comp = vec![usize::MAX; n];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = next;
            stack.push(start);
            while let Some(v) = stack.pop() {
                for &u in self.neighbors(v) {
                    if comp[u] == usize::MAX {
                        comp[u] = next;
                        stack.push(u);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    /// Returns the graph with node `v` renamed to `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.n_nodes();
        if perm.len() != n {
            return Err(Error::input("permutation length differs from node count"));
        }
        let mut pairs = Vec::with_capacity(self.n_entries());
        for v in 0..n {
            for &u in self.neighbors(v) {
                pairs.push((perm[v], perm[u]));
            }
        }
        Graph::from_edge_list(&pairs, n)
    }
}

pub(crate) fn read_edge_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    Ok(read_edge_lines(path)?.into_iter().map(|(_, u, v)| (u, v)).collect())
}

/// Edge records as `(line, u, v)` with 1-based line numbers.
pub(crate) fn read_edge_lines(path: &Path) -> Result<Vec<(usize, usize, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: msg.to_string(),
        };
        let mut it = line.split_whitespace();
        let (Some(u), Some(v), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err("expected exactly two node ids"));
        };
        let u = u.parse().map_err(|_| parse_err("node id is not a non-negative integer"))?;
        let v = v.parse().map_err(|_| parse_err("node id is not a non-negative integer"))?;
        pairs.push((lineno + 1, u, v));
    }
    Ok(pairs)
}

/// `D^{-1/2} Ã D^{-1/2}` for a self-looped graph `Ã`; shared read-only.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    matrix: Arc<CsrMatrix>,
}

impl NormalizedAdjacency {
    /// Symmetric normalization of `g_tilde` by its own row sums.
    pub fn sym_normalize(g_tilde: &Graph) -> Result<Self> {
        let deg = g_tilde.degrees();
        if let Some(v) = deg.iter().position(|&d| d <= 0.0) {
            return Err(Error::Precondition(format!(
                "node {v} has zero degree; add self-loops before normalizing"
            )));
        }
        let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
        let a = g_tilde.adjacency();
        let rows = a.row_of_entries();
        let values = a
            .values()
            .iter()
            .zip(rows.iter().zip(a.indices()))
            .map(|(&v, (&i, &j))| v * inv_sqrt[i] * inv_sqrt[j])
            .collect();
        Ok(Self {
            matrix: Arc::new(a.with_values(values)?),
        })
    }

    /// `sym_normalize(add_self_loops(g))`, the operator every model and
    /// smoothness term uses.
    pub fn from_graph(g: &Graph) -> Self {
        Self::sym_normalize(&g.add_self_loops()).expect("self-looped graph has positive degrees")
    }

    pub fn n_nodes(&self) -> usize {
        self.matrix.n_rows()
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn shared(&self) -> Arc<CsrMatrix> {
        Arc::clone(&self.matrix)
    }

    pub fn to_dense(&self) -> Matrix {
        self.matrix.to_dense()
    }

    pub fn matmul_dense(&self, b: &Matrix) -> Result<Matrix> {
        self.matrix.matmul_dense(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn path3() -> Graph {
        Graph::from_edge_list(&[(0, 1), (1, 2)], 3).unwrap()
    }

    #[test]
    fn symmetrizes_and_counts_degrees() {
        let g = path3();
        assert_eq!(g.n_entries(), 4);
        assert_eq!(g.degrees(), vec![1.0, 2.0, 1.0]);
        assert!(g.has_edge(1, 0) && g.has_edge(0, 1));
        assert!(g.binary_input());
    }

    #[test]
    fn duplicates_collapse_to_binary_entries() {
        let g = Graph::from_edge_list(&[(0, 1), (1, 0), (0, 1)], 2).unwrap();
        assert_eq!(g.n_entries(), 2);
        assert!(g.adjacency().values().iter().all(|&v| v == 1.0));
        assert_eq!(g.n_undirected_edges(), 1);
    }

    #[test]
    fn out_of_range_node_is_rejected() {
        assert!(matches!(
            Graph::from_edge_list(&[(0, 3)], 3),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn empty_edge_list_is_valid() {
        let g = Graph::from_edge_list(&[], 3).unwrap();
        assert_eq!(g.n_entries(), 0);
        assert_eq!(g.degrees(), vec![0.0; 3]);
    }

    #[test]
    fn triangle_degrees() {
        let g = Graph::from_edge_list(&[(0, 1), (1, 2), (2, 0)], 3).unwrap();
        assert_eq!(g.degrees(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn self_loops_on_empty_graph_give_identity() {
        let g = Graph::from_edge_list(&[], 3).unwrap().add_self_loops();
        assert_eq!(g.n_entries(), 3);
        assert_eq!(g.adjacency().to_dense(), Matrix::identity(3));
        let a_hat = NormalizedAdjacency::sym_normalize(&g).unwrap();
        assert_eq!(a_hat.to_dense(), Matrix::identity(3));
    }

    #[test]
    fn self_loops_add_one_to_degree_and_are_idempotent() {
        let g = path3().add_self_loops();
        assert_eq!(g.degrees(), vec![2.0, 3.0, 2.0]);
        assert_eq!(g.add_self_loops(), g);
        let looped = Graph::from_edge_list(&[(0, 0), (0, 1)], 2).unwrap().add_self_loops();
        assert_eq!(looped.adjacency().get(0, 0), 1.0);
        assert_eq!(looped.n_entries(), 4);
    }

    #[test]
    fn two_node_normalization_is_one_half() {
        let g = Graph::from_edge_list(&[(0, 1)], 2).unwrap().add_self_loops();
        let a_hat = NormalizedAdjacency::sym_normalize(&g).unwrap();
        let d = a_hat.to_dense();
        for i in 0..2 {
            for j in 0..2 {
                assert!((d[(i, j)] - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_degree_row_is_a_precondition_error() {
        let g = Graph::from_edge_list(&[(0, 1)], 3).unwrap();
        assert!(matches!(
            NormalizedAdjacency::sym_normalize(&g),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn edge_file_parsing() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# comment\n0 1\n\n1   2\n2 0").unwrap();
        let g = Graph::read_edge_file(f.path(), 3).unwrap();
        assert_eq!(g.degrees(), vec![2.0, 2.0, 2.0]);

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, "0 1\n1 x").unwrap();
        match Graph::read_edge_file(bad.path(), 3) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn components_split_disconnected_parts() {
        let g = Graph::from_edge_list(&[(0, 1), (2, 3)], 5).unwrap();
        assert_eq!(g.connected_components(), vec![0, 0, 1, 1, 2]);
    }
}
