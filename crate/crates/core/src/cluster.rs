//! Pseudo-label extraction from vertex confidences, the distance-threshold
//! clustering baseline, and the pairwise / BCubed F-score metrics.

use crate::data::EmbeddingSet;
use crate::error::{LafrError, Result};
use crate::graph::KnnGraph;
use crate::linalg::cosine;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterMethod {
    MetaGcn,
    Gcn,
    Distance,
}

impl ClusterMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClusterMethod::MetaGcn => "meta-gcn",
            ClusterMethod::Gcn => "gcn",
            ClusterMethod::Distance => "distance",
        }
    }
}

impl fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClusterMethod {
    type Err = LafrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta-gcn" => Ok(ClusterMethod::MetaGcn),
            "gcn" => Ok(ClusterMethod::Gcn),
            "distance" => Ok(ClusterMethod::Distance),
            other => Err(LafrError::InvalidArgument(format!(
                "unknown cluster method '{other}', expected meta-gcn | gcn | distance"
            ))),
        }
    }
}

/// How a vertex picks the neighbor it attaches to after the edge cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkingRule {
    /// Attach to the highest-affinity surviving neighbor whose confidence is
    /// strictly higher (equal confidence counts when the neighbor has the
    /// lower vertex index).
    HigherConfidence,
    /// Attach to the highest-affinity surviving neighbor regardless of
    /// confidence; kept for ablation.
    NearestNeighbor,
}

/// A full partition of the vertex set with cluster ids 0..num_clusters-1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeling {
    pub cluster_id: Vec<u32>,
    pub num_clusters: usize,
    pub method_tag: ClusterMethod,
    /// Edge-cut threshold (cosine similarity), or the cosine-distance
    /// threshold for the distance baseline.
    pub tau: f64,
}

impl PseudoLabeling {
    /// Compact arbitrary assignments into contiguous ids by first appearance.
    pub fn from_raw_assignments(raw: &[u32], method_tag: ClusterMethod, tau: f64) -> Self {
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let mut cluster_id = Vec::with_capacity(raw.len());
        for &r in raw {
            let next = remap.len() as u32;
            let id = *remap.entry(r).or_insert(next);
            cluster_id.push(id);
        }
        PseudoLabeling {
            cluster_id,
            num_clusters: remap.len(),
            method_tag,
            tau,
        }
    }

    pub fn n(&self) -> usize {
        self.cluster_id.len()
    }

    /// CSV rows: source_id, cluster_id, method_tag, tau.
    pub fn to_csv(&self, source_ids: &[String]) -> Result<String> {
        if source_ids.len() != self.n() {
            return Err(LafrError::Shape(format!(
                "{} source ids for {} vertices",
                source_ids.len(),
                self.n()
            )));
        }
        let mut out = String::from("source_id,cluster_id,method_tag,tau\n");
        for (id, c) in source_ids.iter().zip(&self.cluster_id) {
            out.push_str(&format!("{id},{c},{},{}\n", self.method_tag, self.tau));
        }
        Ok(out)
    }
}

/// Cut K-NN edges below `tau`, then attach each vertex to one surviving
/// neighbor per the linking rule. The resulting link forest is the partition;
/// cluster ids follow ascending root index.
pub fn extract_pseudo_labels(
    graph: &KnnGraph,
    confidences: &[f64],
    tau: f64,
    rule: LinkingRule,
    method_tag: ClusterMethod,
) -> Result<PseudoLabeling> {
    let n = graph.n();
    if confidences.len() != n {
        return Err(LafrError::Shape(format!(
            "{} confidences for {} vertices",
            confidences.len(),
            n
        )));
    }

    let mut parent: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        for (&j, &a) in graph.neighbors(i).iter().zip(graph.affinities(i)) {
            if a < tau {
                // Neighbor lists are sorted by descending affinity, so
                // nothing further survives the cut.
                break;
            }
            let eligible = match rule {
                LinkingRule::HigherConfidence => {
                    confidences[j] > confidences[i]
                        || (confidences[j] == confidences[i] && j < i)
                }
                LinkingRule::NearestNeighbor => true,
            };
            if eligible {
                parent[i] = Some(j);
                break;
            }
        }
    }

    let cluster_id = match rule {
        LinkingRule::HigherConfidence => {
            // Links strictly ascend in (confidence, -index), so each
            // component is a tree with a unique root.
            let mut root = vec![usize::MAX; n];
            fn find_root(v: usize, parent: &[Option<usize>], root: &mut [usize]) -> usize {
                if root[v] != usize::MAX {
                    return root[v];
                }
                let r = match parent[v] {
                    None => v,
                    Some(p) => find_root(p, parent, root),
                };
                root[v] = r;
                r
            }
            for v in 0..n {
                find_root(v, &parent, &mut root);
            }
            assign_by_ascending_representative(&root)
        }
        LinkingRule::NearestNeighbor => {
            // Mutual attachments can form cycles; use union-find and label by
            // the smallest vertex index in each component.
            let mut uf = UnionFind::new(n);
            for (i, p) in parent.iter().enumerate() {
                if let Some(j) = *p {
                    uf.union(i, j);
                }
            }
            let reps = min_index_representatives(&mut uf, n);
            assign_by_ascending_representative(&reps)
        }
    };

    let num_clusters = cluster_id.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    Ok(PseudoLabeling {
        cluster_id,
        num_clusters,
        method_tag,
        tau,
    })
}

fn assign_by_ascending_representative(rep: &[usize]) -> Vec<u32> {
    let mut reps: Vec<usize> = rep.to_vec();
    reps.sort_unstable();
    reps.dedup();
    let index: HashMap<usize, u32> = reps
        .iter()
        .enumerate()
        .map(|(id, &r)| (r, id as u32))
        .collect();
    rep.iter().map(|r| index[r]).collect()
}

fn min_index_representatives(uf: &mut UnionFind, n: usize) -> Vec<usize> {
    let mut min_rep = vec![usize::MAX; n];
    for v in 0..n {
        let r = uf.find(v);
        min_rep[r] = min_rep[r].min(v);
    }
    (0..n).map(|v| min_rep[uf.find(v)]).collect()
}

/// Link every pair whose cosine distance (1 - cos) is below `threshold` and
/// take connected components.
pub fn distance_baseline(set: &EmbeddingSet, threshold: f64) -> PseudoLabeling {
    distance_baseline_from_mat(&set.to_mat(), threshold)
}

/// Distance baseline over an arbitrary feature matrix (e.g. backbone
/// embeddings of an unlabeled set).
pub fn distance_baseline_from_mat(m: &crate::linalg::Mat, threshold: f64) -> PseudoLabeling {
    let n = m.rows();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if 1.0 - cosine(m.row(i), m.row(j)) < threshold {
                uf.union(i, j);
            }
        }
    }
    let reps = min_index_representatives(&mut uf, n);
    let cluster_id = assign_by_ascending_representative(&reps);
    let num_clusters = cluster_id.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    PseudoLabeling {
        cluster_id,
        num_clusters,
        method_tag: ClusterMethod::Distance,
        tau: threshold,
    }
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub pairwise: PairScore,
    pub bcubed: PairScore,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn contingency(pred: &[u32], truth: &[u32]) -> HashMap<(u32, u32), u64> {
    let mut table = HashMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *table.entry((p, t)).or_insert(0u64) += 1;
    }
    table
}

fn pair_count(count: u64) -> u64 {
    count * (count - 1) / 2
}

/// Pairwise precision/recall/F over all unordered vertex pairs. When neither
/// side has any positive pair the partitions are identical singletons and the
/// score is 1; a positive-free prediction against a truth with pairs scores 0.
pub fn pairwise_f(pred: &PseudoLabeling, truth: &[u32]) -> PairScore {
    assert_eq!(pred.n(), truth.len(), "pred/truth size mismatch");
    let table = contingency(&pred.cluster_id, truth);
    let mut pred_counts: HashMap<u32, u64> = HashMap::new();
    let mut truth_counts: HashMap<u32, u64> = HashMap::new();
    for (&(p, t), &c) in &table {
        *pred_counts.entry(p).or_insert(0) += c;
        *truth_counts.entry(t).or_insert(0) += c;
    }
    let tp: u64 = table.values().map(|&c| pair_count(c)).sum();
    let pred_pairs: u64 = pred_counts.values().map(|&c| pair_count(c)).sum();
    let truth_pairs: u64 = truth_counts.values().map(|&c| pair_count(c)).sum();

    if pred_pairs == 0 && truth_pairs == 0 {
        return PairScore {
            precision: 1.0,
            recall: 1.0,
            f: 1.0,
        };
    }
    let precision = if pred_pairs > 0 {
        tp as f64 / pred_pairs as f64
    } else {
        0.0
    };
    let recall = if truth_pairs > 0 {
        tp as f64 / truth_pairs as f64
    } else {
        0.0
    };
    PairScore {
        precision,
        recall,
        f: harmonic(precision, recall),
    }
}

/// BCubed precision/recall/F: per-item overlap of its predicted cluster with
/// its truth class, averaged over items.
pub fn bcubed_f(pred: &PseudoLabeling, truth: &[u32]) -> PairScore {
    assert_eq!(pred.n(), truth.len(), "pred/truth size mismatch");
    let n = pred.n();
    let table = contingency(&pred.cluster_id, truth);
    let mut pred_counts: HashMap<u32, u64> = HashMap::new();
    let mut truth_counts: HashMap<u32, u64> = HashMap::new();
    for (&(p, t), &c) in &table {
        *pred_counts.entry(p).or_insert(0) += c;
        *truth_counts.entry(t).or_insert(0) += c;
    }
    let mut precision = 0.0;
    let mut recall = 0.0;
    for (&p, &t) in pred.cluster_id.iter().zip(truth) {
        let overlap = table[&(p, t)] as f64;
        precision += overlap / pred_counts[&p] as f64;
        recall += overlap / truth_counts[&t] as f64;
    }
    precision /= n as f64;
    recall /= n as f64;
    PairScore {
        precision,
        recall,
        f: harmonic(precision, recall),
    }
}

pub fn cluster_score(pred: &PseudoLabeling, truth: &[u32]) -> ClusterScore {
    ClusterScore {
        pairwise: pairwise_f(pred, truth),
        bcubed: bcubed_f(pred, truth),
    }
}
