//! K-NN affinity graph over an embedding set, with the row-normalized
//! adjacency and ground-truth vertex confidences used to supervise the
//! confidence GCN.

use crate::data::EmbeddingSet;
use crate::error::{LafrError, Result};
use crate::linalg::{cosine, CsrMatrix, Mat};

/// Sparse K-NN graph with cosine affinities.
///
/// Neighbor lists are sorted by descending affinity, ties broken by ascending
/// vertex index. `norm_adjacency` holds D^-1 (A + I) over the directed K-NN
/// adjacency, so every row sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    n: usize,
    k: usize,
    neighbor_ids: Vec<usize>,
    affinities: Vec<f64>,
    norm_adjacency: CsrMatrix,
}

impl KnnGraph {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_ids[i * self.k..(i + 1) * self.k]
    }

    pub fn affinities(&self, i: usize) -> &[f64] {
        &self.affinities[i * self.k..(i + 1) * self.k]
    }

    pub fn norm_adjacency(&self) -> &CsrMatrix {
        &self.norm_adjacency
    }

    /// Build a graph with hand-picked affinities; shortcut for unit tests
    /// that need exact edge weights.
    #[cfg(test)]
    pub(crate) fn from_parts_for_tests(
        n: usize,
        k: usize,
        neighbor_ids: Vec<usize>,
        affinities: Vec<f64>,
    ) -> KnnGraph {
        assert_eq!(neighbor_ids.len(), n * k);
        assert_eq!(affinities.len(), n * k);
        let rows: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|i| {
                let mut entries: Vec<(usize, f64)> = neighbor_ids[i * k..(i + 1) * k]
                    .iter()
                    .zip(&affinities[i * k..(i + 1) * k])
                    .map(|(&j, &a)| (j, a))
                    .collect();
                entries.push((i, 1.0));
                entries.sort_by_key(|&(j, _)| j);
                let total: f64 = entries.iter().map(|&(_, a)| a).sum();
                entries.iter().map(|&(j, a)| (j, a / total)).collect()
            })
            .collect();
        KnnGraph {
            n,
            k,
            neighbor_ids,
            affinities,
            norm_adjacency: CsrMatrix::from_rows(n, &rows),
        }
    }
}

/// Exact K-NN under cosine similarity by full pairwise scan.
pub fn build_knn_graph(set: &EmbeddingSet, k: usize) -> Result<KnnGraph> {
    let n = set.n();
    if k == 0 || k >= n {
        return Err(LafrError::InvalidArgument(format!(
            "need 1 <= k < n, got k={k}, n={n}"
        )));
    }
    let feats = set.to_mat();
    build_knn_graph_from_mat(&feats, k)
}

/// Same as [`build_knn_graph`] but over an arbitrary feature matrix; rows
/// need not be unit norm (cosine handles scaling).
pub fn build_knn_graph_from_mat(feats: &Mat, k: usize) -> Result<KnnGraph> {
    let n = feats.rows();
    if k == 0 || k >= n {
        return Err(LafrError::InvalidArgument(format!(
            "need 1 <= k < n, got k={k}, n={n}"
        )));
    }
    let mut neighbor_ids = Vec::with_capacity(n * k);
    let mut affinities = Vec::with_capacity(n * k);
    let mut adj_rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);

    let mut cand: Vec<(usize, f64)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        for j in 0..n {
            if j != i {
                cand.push((j, cosine(feats.row(i), feats.row(j))));
            }
        }
        // Descending affinity, then ascending index.
        cand.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        cand.truncate(k);

        let degree: f64 = 1.0 + cand.iter().map(|&(_, a)| a).sum::<f64>();
        if degree.abs() < 1e-9 {
            return Err(LafrError::Numeric(format!(
                "vertex {i}: degree of A+I is {degree}, cannot normalize"
            )));
        }
        // Row of (A + I) / degree, with the self loop in index order.
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        let mut placed_self = false;
        for &(j, a) in &cand {
            neighbor_ids.push(j);
            affinities.push(a);
        }
        let mut sorted = cand.clone();
        sorted.sort_by_key(|&(j, _)| j);
        for &(j, a) in &sorted {
            if !placed_self && j > i {
                row.push((i, 1.0 / degree));
                placed_self = true;
            }
            row.push((j, a / degree));
        }
        if !placed_self {
            row.push((i, 1.0 / degree));
        }
        adj_rows.push(row);
    }

    Ok(KnnGraph {
        n,
        k,
        neighbor_ids,
        affinities,
        norm_adjacency: CsrMatrix::from_rows(n, &adj_rows),
    })
}

/// Ground-truth confidence per vertex: the affinity-weighted agreement of a
/// vertex's neighborhood with its own label, averaged over the k neighbors.
/// Values land in [-1, 1]; low confidence flags boundary vertices.
pub fn ground_truth_confidence(graph: &KnnGraph, labels: &[u32]) -> Result<Vec<f64>> {
    if labels.len() != graph.n() {
        return Err(LafrError::Shape(format!(
            "labels {} != graph vertices {}",
            labels.len(),
            graph.n()
        )));
    }
    let mut conf = Vec::with_capacity(graph.n());
    for i in 0..graph.n() {
        let mut acc = 0.0;
        for (&j, &a) in graph.neighbors(i).iter().zip(graph.affinities(i)) {
            let sign = if labels[j] == labels[i] { 1.0 } else { -1.0 };
            acc += sign * a;
        }
        conf.push(acc / graph.k() as f64);
    }
    Ok(conf)
}
