//! Graph-convolutional confidence model.
//!
//! Each layer concatenates vertex features with their neighborhood average
//! and applies a learned projection under a rectifier; a final affine head
//! emits one confidence value per vertex. Training minimizes the mean
//! absolute error against ground-truth confidences, with exact gradients
//! from the reverse-mode tape.

use crate::container::{bytes_to_f64s, f64s_to_bytes, read_container, write_container};
use crate::error::{LafrError, Result};
use crate::graph::KnnGraph;
use crate::linalg::Mat;
use crate::params::ParamVector;
use crate::rng::{derive_seed, CounterRng};
use crate::tape::Tape;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
}

impl GcnConfig {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        GcnConfig {
            input_dim,
            hidden_dims: vec![64],
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    input_dim: usize,
    /// Layer l maps 2*d_in(l) columns to d_out(l).
    layers: Vec<Mat>,
    /// d_last x 1 projection.
    head_weight: Mat,
    head_bias: f64,
}

impl GcnModel {
    /// Glorot-uniform initialization, seed-controlled.
    pub fn init(config: &GcnConfig) -> Result<GcnModel> {
        if config.input_dim == 0 {
            return Err(LafrError::Config("input_dim must be positive".into()));
        }
        if config.hidden_dims.is_empty() || config.hidden_dims.contains(&0) {
            return Err(LafrError::Config(
                "hidden_dims must be non-empty and positive".into(),
            ));
        }
        let mut rng = CounterRng::new(derive_seed(config.seed, 0x67636e69)); // "gcni"
        let mut layers = Vec::with_capacity(config.hidden_dims.len());
        let mut d_in = config.input_dim;
        for &d_out in &config.hidden_dims {
            layers.push(glorot(&mut rng, 2 * d_in, d_out));
            d_in = d_out;
        }
        let head_weight = glorot(&mut rng, d_in, 1);
        Ok(GcnModel {
            input_dim: config.input_dim,
            layers,
            head_weight,
            head_bias: 0.0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|w| w.cols()).collect()
    }

    pub fn num_params(&self) -> usize {
        let layer_params: usize = self.layers.iter().map(|w| w.rows() * w.cols()).sum();
        layer_params + self.head_weight.rows() + 1
    }

    /// Flatten with fixed ordering: layers in depth order (row-major), then
    /// head weight, then bias.
    pub fn to_params(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.num_params());
        for w in &self.layers {
            out.extend_from_slice(w.as_slice());
        }
        out.extend_from_slice(self.head_weight.as_slice());
        out.push(self.head_bias);
        ParamVector(out)
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        params.check_len(self.num_params())?;
        let mut off = 0;
        for w in &mut self.layers {
            let len = w.rows() * w.cols();
            w.as_mut_slice().copy_from_slice(&params.as_slice()[off..off + len]);
            off += len;
        }
        let len = self.head_weight.rows();
        self.head_weight
            .as_mut_slice()
            .copy_from_slice(&params.as_slice()[off..off + len]);
        off += len;
        self.head_bias = params.as_slice()[off];
        Ok(())
    }

    pub fn with_params(&self, params: &ParamVector) -> Result<GcnModel> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = GcnHeader {
            kind: "gcn".into(),
            input_dim: self.input_dim,
            hidden_dims: self.hidden_dims(),
        };
        write_container(path, &header, &f64s_to_bytes(self.to_params().as_slice()))
    }

    pub fn load(path: &Path) -> Result<GcnModel> {
        let (header, payload): (GcnHeader, Vec<u8>) = read_container(path)?;
        if header.kind != "gcn" {
            return Err(LafrError::Format(format!(
                "{}: expected gcn checkpoint, found {}",
                path.display(),
                header.kind
            )));
        }
        let mut model = GcnModel::init(&GcnConfig {
            input_dim: header.input_dim,
            hidden_dims: header.hidden_dims,
            seed: 0,
        })?;
        let values = bytes_to_f64s(&payload)?;
        model.set_params(&ParamVector(values))?;
        Ok(model)
    }

    fn check_inputs(&self, graph: &KnnGraph, features: &Mat) -> Result<()> {
        if features.cols() != self.input_dim {
            return Err(LafrError::Shape(format!(
                "features have {} columns, model expects {}",
                features.cols(),
                self.input_dim
            )));
        }
        if features.rows() != graph.n() {
            return Err(LafrError::Shape(format!(
                "features have {} rows, graph has {} vertices",
                features.rows(),
                graph.n()
            )));
        }
        Ok(())
    }
}

fn glorot(rng: &mut CounterRng, rows: usize, cols: usize) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Mat::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = bound * rng.next_signed();
    }
    m
}

#[derive(Serialize, Deserialize)]
struct GcnHeader {
    kind: String,
    input_dim: usize,
    hidden_dims: Vec<usize>,
}

/// Predicted confidence per vertex.
pub fn gcn_forward(model: &GcnModel, graph: &KnnGraph, features: &Mat) -> Result<Vec<f64>> {
    model.check_inputs(graph, features)?;
    let mut current = features.clone();
    for (l, w) in model.layers.iter().enumerate() {
        let propagated = graph.norm_adjacency().matmul_dense(&current);
        let stacked = current.concat_cols(&propagated);
        let mut next = stacked.matmul(w);
        for v in next.as_mut_slice() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if !next.all_finite() {
            return Err(LafrError::Numeric(format!(
                "non-finite activation after layer {l}"
            )));
        }
        current = next;
    }
    let head = current.matmul(&model.head_weight);
    Ok(head.as_slice().iter().map(|v| v + model.head_bias).collect())
}

/// Mean absolute error between predicted and target confidences.
pub fn gcn_loss(predicted: &[f64], target: &[f64]) -> f64 {
    assert_eq!(predicted.len(), target.len(), "confidence length mismatch");
    predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / predicted.len() as f64
}

/// Loss plus the exact gradient of the loss with respect to every parameter,
/// in [`GcnModel::to_params`] order.
pub fn gcn_backward(
    model: &GcnModel,
    graph: &KnnGraph,
    features: &Mat,
    target: &[f64],
) -> Result<(f64, ParamVector)> {
    model.check_inputs(graph, features)?;
    if target.len() != graph.n() {
        return Err(LafrError::Shape(format!(
            "target has {} entries, graph has {} vertices",
            target.len(),
            graph.n()
        )));
    }

    let mut tape = Tape::new();
    let mut current = tape.leaf(features.clone());
    let mut layer_nodes = Vec::with_capacity(model.layers.len());
    for (l, w) in model.layers.iter().enumerate() {
        let w_node = tape.leaf(w.clone());
        layer_nodes.push(w_node);
        let propagated = tape.spmm(graph.norm_adjacency(), current);
        let stacked = tape.concat_cols(current, propagated);
        let pre = tape.matmul(stacked, w_node);
        current = tape.relu(pre);
        if !tape.value(current).all_finite() {
            return Err(LafrError::Numeric(format!(
                "non-finite activation after layer {l}"
            )));
        }
    }
    let head_w = tape.leaf(model.head_weight.clone());
    let head_b = tape.leaf(Mat::from_vec(1, 1, vec![model.head_bias]));
    let projected = tape.matmul(current, head_w);
    let predicted = tape.add_scalar(projected, head_b);
    let target_mat = Mat::from_vec(target.len(), 1, target.to_vec());
    let loss_node = tape.l1_mean(predicted, target_mat);
    let loss = tape.value(loss_node).get(0, 0);
    if !loss.is_finite() {
        return Err(LafrError::Numeric("non-finite loss at head".into()));
    }

    let grads = tape.backward(loss_node);
    let mut flat = Vec::with_capacity(model.num_params());
    for &node in &layer_nodes {
        flat.extend_from_slice(grads[node].as_slice());
    }
    flat.extend_from_slice(grads[head_w].as_slice());
    flat.push(grads[head_b].get(0, 0));
    Ok((loss, ParamVector(flat)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EmbeddingSet;
    use crate::graph::build_knn_graph;
    use crate::rng::CounterRng;

    pub(crate) fn random_unit_set(n: usize, d: usize, seed: u64) -> EmbeddingSet {
        let mut rng = CounterRng::new(seed);
        let mut flat = Vec::with_capacity(n * d);
        for _ in 0..n {
            let mut v: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
            let norm = crate::linalg::l2_norm(&v);
            flat.extend(v.iter_mut().map(|x| (*x / norm) as f32));
        }
        let ids = (0..n).map(|i| format!("v{i}")).collect();
        EmbeddingSet::new(n, d, flat, None, "rand".into(), ids).unwrap()
    }

    #[test]
    fn zero_weights_propagate_bias() {
        let set = random_unit_set(6, 4, 1);
        let graph = build_knn_graph(&set, 2).unwrap();
        let mut model = GcnModel::init(&GcnConfig {
            input_dim: 4,
            hidden_dims: vec![8],
            seed: 0,
        })
        .unwrap();
        let mut params = ParamVector::zeros(model.num_params());
        *params.0.last_mut().unwrap() = 0.5;
        model.set_params(&params).unwrap();
        let out = gcn_forward(&model, &graph, &set.to_mat()).unwrap();
        for v in out {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn single_vertex_hand_matrix_product() {
        // One vertex with only the self loop: propagation is the identity, so
        // the layer computes relu([f | f] W). Check against a hand product on
        // a 2-dim embedding.
        let set = EmbeddingSet::new(
            2,
            2,
            vec![0.6, 0.8, 0.6, 0.8],
            None,
            "t".into(),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let graph = build_knn_graph(&set, 1).unwrap();
        // Both rows identical: affinity 1, adjacency row = (1 + 1)/2 each.
        let mut model = GcnModel::init(&GcnConfig {
            input_dim: 2,
            hidden_dims: vec![2],
            seed: 3,
        })
        .unwrap();
        let w = Mat::from_vec(4, 2, vec![1.0, -1.0, 2.0, 0.5, -0.5, 1.0, 0.25, -2.0]);
        let head = Mat::from_vec(2, 1, vec![1.0, 1.0]);
        model.layers[0] = w.clone();
        model.head_weight = head;
        model.head_bias = 0.1;
        let feats = set.to_mat();
        let out = gcn_forward(&model, &graph, &feats).unwrap();
        // For identical rows the propagated features equal the row itself,
        // so the layer sees [f | f].
        let f = feats.row(0);
        let stacked = [f[0], f[1], f[0], f[1]];
        let mut hidden = [0.0f64; 2];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, s) in stacked.iter().enumerate() {
                acc += s * w.get(i, j);
            }
            *h = acc.max(0.0);
        }
        let want = hidden[0] + hidden[1] + 0.1;
        assert!((out[0] - want).abs() < 1e-12);
        assert!((out[1] - want).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_dense_oracle() {
        // Independent dense-matrix route: materialize the normalized
        // adjacency and run plain dense algebra.
        let set = random_unit_set(12, 5, 4);
        let graph = build_knn_graph(&set, 3).unwrap();
        let model = GcnModel::init(&GcnConfig {
            input_dim: 5,
            hidden_dims: vec![7],
            seed: 5,
        })
        .unwrap();
        let feats = set.to_mat();
        let got = gcn_forward(&model, &graph, &feats).unwrap();

        let mut dense = Mat::zeros(12, 12);
        for i in 0..12 {
            for (c, v) in graph.norm_adjacency().row_entries(i) {
                dense.set(i, c, v);
            }
        }
        let propagated = dense.matmul(&feats);
        let stacked = feats.concat_cols(&propagated);
        let mut hidden = stacked.matmul(&model.layers[0]);
        for v in hidden.as_mut_slice() {
            *v = v.max(0.0);
        }
        let head = hidden.matmul(&model.head_weight);
        for i in 0..12 {
            let want = head.get(i, 0) + model.head_bias;
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_scaling_is_linear_through_first_preactivation() {
        // With the graph fixed, scaling all features by c > 0 scales the
        // first layer's pre-activation by exactly c.
        let set = random_unit_set(10, 4, 20);
        let graph = build_knn_graph(&set, 3).unwrap();
        let model = GcnModel::init(&GcnConfig {
            input_dim: 4,
            hidden_dims: vec![6],
            seed: 21,
        })
        .unwrap();
        let feats = set.to_mat();
        let mut scaled = feats.clone();
        scaled.scale(2.5);

        // Dense oracle for the pre-activation.
        let pre = |f: &Mat| -> Mat {
            let propagated = graph.norm_adjacency().matmul_dense(f);
            f.concat_cols(&propagated).matmul(&model.layers[0])
        };
        let base = pre(&feats);
        let scaled_pre = pre(&scaled);
        for (a, b) in base.as_slice().iter().zip(scaled_pre.as_slice()) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_hand_cases() {
        assert_eq!(gcn_loss(&[1.0, -1.0], &[1.0, -1.0]), 0.0);
        assert!((gcn_loss(&[0.0, 0.0], &[1.0, -1.0]) - 1.0).abs() < 1e-12);
        let mut rng = CounterRng::new(8);
        let p: Vec<f64> = (0..10).map(|_| rng.next_signed()).collect();
        let t: Vec<f64> = (0..10).map(|_| rng.next_signed()).collect();
        let hand: f64 = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / 10.0;
        assert!((gcn_loss(&p, &t) - hand).abs() < 1e-12);
    }

    #[test]
    fn bias_gradient_hand_case() {
        // Zero weights, only the bias alive: d loss / d b = mean sign(b - c).
        let set = random_unit_set(8, 3, 9);
        let graph = build_knn_graph(&set, 2).unwrap();
        let mut model = GcnModel::init(&GcnConfig {
            input_dim: 3,
            hidden_dims: vec![4],
            seed: 0,
        })
        .unwrap();
        let mut params = ParamVector::zeros(model.num_params());
        *params.0.last_mut().unwrap() = 0.3;
        model.set_params(&params).unwrap();
        let target = vec![0.5, -0.2, 0.3, 0.9, -0.5, 0.1, 0.4, 0.0];
        let (loss, grad) = gcn_backward(&model, &graph, &set.to_mat(), &target).unwrap();
        let want_loss = target.iter().map(|c| (0.3 - c).abs()).sum::<f64>() / 8.0;
        assert!((loss - want_loss).abs() < 1e-12);
        let want_db = target
            .iter()
            .map(|&c| if 0.3 > c { 1.0 } else if 0.3 < c { -1.0 } else { 0.0 })
            .sum::<f64>()
            / 8.0;
        assert!((grad.as_slice().last().unwrap() - want_db).abs() < 1e-12);
    }

    #[test]
    fn gradient_zero_at_perfect_fit() {
        let set = random_unit_set(6, 3, 10);
        let graph = build_knn_graph(&set, 2).unwrap();
        let model = GcnModel::init(&GcnConfig {
            input_dim: 3,
            hidden_dims: vec![4],
            seed: 11,
        })
        .unwrap();
        let target = gcn_forward(&model, &graph, &set.to_mat()).unwrap();
        let (loss, grad) = gcn_backward(&model, &graph, &set.to_mat(), &target).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let model = GcnModel::init(&GcnConfig {
            input_dim: 5,
            hidden_dims: vec![6, 3],
            seed: 12,
        })
        .unwrap();
        let params = model.to_params();
        let rebuilt = model.with_params(&params).unwrap();
        assert_eq!(model, rebuilt);
        assert_eq!(params, rebuilt.to_params());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = GcnModel::init(&GcnConfig {
            input_dim: 4,
            hidden_dims: vec![5],
            seed: 13,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gcn.ckpt");
        model.save(&path).unwrap();
        let loaded = GcnModel::load(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn non_finite_intermediate_names_the_layer() {
        let set = random_unit_set(6, 4, 15);
        let graph = build_knn_graph(&set, 2).unwrap();
        let mut model = GcnModel::init(&GcnConfig {
            input_dim: 4,
            hidden_dims: vec![4],
            seed: 0,
        })
        .unwrap();
        let mut params = model.to_params();
        params.0[0] = f64::INFINITY;
        model.set_params(&params).unwrap();
        let target = vec![0.0; 6];
        let err = gcn_backward(&model, &graph, &set.to_mat(), &target).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 0"), "message was: {msg}");
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let set = random_unit_set(6, 4, 14);
        let graph = build_knn_graph(&set, 2).unwrap();
        let model = GcnModel::init(&GcnConfig {
            input_dim: 5,
            hidden_dims: vec![4],
            seed: 0,
        })
        .unwrap();
        assert!(matches!(
            gcn_forward(&model, &graph, &set.to_mat()),
            Err(LafrError::Shape(_))
        ));
    }
}
