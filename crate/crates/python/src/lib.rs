//! Python bindings: the main types and operations of the toolkit exposed as
//! the `lafr_py` extension module. Vectors cross the boundary as plain lists
//! of floats; reports come back as dicts.

use lafr_core::cluster::{
    bcubed_f, distance_baseline_from_mat, extract_pseudo_labels, pairwise_f, ClusterMethod,
    LinkingRule, PseudoLabeling,
};
use lafr_core::data::{generate_domain, separated_prototypes, EmbeddingSet, SyntheticDomainSpec};
use lafr_core::federated::{
    fedpav_average, run_dual_loop, AnchorMode, Client, FederationConfig,
};
use lafr_core::gcn::{gcn_forward, GcnConfig, GcnModel};
use lafr_core::graph::{build_knn_graph_from_mat, ground_truth_confidence, KnnGraph};
use lafr_core::linalg::Mat;
use lafr_core::meta::{train_meta_gcn, train_pooled_gcn, DomainBundle, MetaConfig, MetaDomain};
use lafr_core::params::ParamVector;
use lafr_core::recognition::{
    compute_class_centers, evaluate_verification, finetune_baseline, margin_loss,
    pretrain_backbone, rct_adapt, sample_verification_pairs, Backbone, BackboneConfig,
    ClassifierBank, MarginLossKind, RctConfig, VerificationPair,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

fn py_err(e: lafr_core::LafrError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn mat_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("empty matrix"));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Ok(Mat::from_rows(&rows))
}

fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn parse_loss_kind(s: &str) -> PyResult<MarginLossKind> {
    s.parse().map_err(py_err)
}

fn parse_linking(s: &str) -> PyResult<LinkingRule> {
    match s {
        "higher-confidence" => Ok(LinkingRule::HigherConfidence),
        "nearest-neighbor" => Ok(LinkingRule::NearestNeighbor),
        other => Err(PyValueError::new_err(format!(
            "unknown linking rule '{other}'"
        ))),
    }
}

fn parse_method(s: &str) -> PyResult<ClusterMethod> {
    s.parse().map_err(py_err)
}

#[allow(clippy::too_many_arguments)]
fn rct_config(
    loss_kind: &str,
    gamma: f64,
    margin: f64,
    lambda_: f64,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    min_class_size: usize,
    seed: u64,
) -> PyResult<RctConfig> {
    Ok(RctConfig {
        loss_kind: parse_loss_kind(loss_kind)?,
        gamma,
        margin,
        lambda: lambda_,
        lr,
        epochs,
        batch_size,
        min_class_size,
        seed,
    })
}

/// Unit-norm feature vectors from one domain.
#[pyclass(name = "EmbeddingSet")]
struct PyEmbeddingSet {
    inner: EmbeddingSet,
}

#[pymethods]
impl PyEmbeddingSet {
    /// Generate one synthetic domain around shared class prototypes.
    #[staticmethod]
    #[pyo3(signature = (tag, num_classes, items_per_class, prototypes, rotation_seed=None, noise_sigma=0.1, contrast_shift=0.0, sample_seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        tag: &str,
        num_classes: usize,
        items_per_class: (usize, usize),
        prototypes: Vec<Vec<f64>>,
        rotation_seed: Option<u64>,
        noise_sigma: f64,
        contrast_shift: f64,
        sample_seed: u64,
    ) -> PyResult<Self> {
        let spec = SyntheticDomainSpec {
            domain_tag: tag.to_string(),
            num_classes,
            items_per_class,
            rotation_seed,
            noise_sigma,
            contrast_shift,
            sample_seed,
        };
        let protos = mat_from_rows(prototypes)?;
        Ok(PyEmbeddingSet {
            inner: generate_domain(&spec, &protos).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyEmbeddingSet {
            inner: EmbeddingSet::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn domain_tag(&self) -> String {
        self.inner.domain_tag().to_string()
    }

    fn vectors(&self) -> Vec<Vec<f64>> {
        mat_to_rows(&self.inner.to_mat())
    }

    fn labels(&self) -> Option<Vec<u32>> {
        self.inner.labels().map(|l| l.to_vec())
    }

    fn source_ids(&self) -> Vec<String> {
        self.inner.source_ids().to_vec()
    }
}

/// Sparse K-NN graph with cosine affinities.
#[pyclass(name = "KnnGraph")]
struct PyKnnGraph {
    inner: KnnGraph,
}

#[pymethods]
impl PyKnnGraph {
    #[staticmethod]
    fn build(vectors: Vec<Vec<f64>>, k: usize) -> PyResult<Self> {
        let m = mat_from_rows(vectors)?;
        Ok(PyKnnGraph {
            inner: build_knn_graph_from_mat(&m, k).map_err(py_err)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn neighbors(&self, i: usize) -> Vec<usize> {
        self.inner.neighbors(i).to_vec()
    }

    fn affinities(&self, i: usize) -> Vec<f64> {
        self.inner.affinities(i).to_vec()
    }

    fn ground_truth_confidence(&self, labels: Vec<u32>) -> PyResult<Vec<f64>> {
        ground_truth_confidence(&self.inner, &labels).map_err(py_err)
    }
}

/// Graph-convolutional confidence model.
#[pyclass(name = "GcnModel")]
struct PyGcnModel {
    inner: GcnModel,
}

#[pymethods]
impl PyGcnModel {
    #[new]
    #[pyo3(signature = (input_dim, hidden_dims=vec![64], seed=0))]
    fn new(input_dim: usize, hidden_dims: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(PyGcnModel {
            inner: GcnModel::init(&GcnConfig {
                input_dim,
                hidden_dims,
                seed,
            })
            .map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyGcnModel {
            inner: GcnModel::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn forward(&self, graph: &PyKnnGraph, features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let m = mat_from_rows(features)?;
        gcn_forward(&self.inner, &graph.inner, &m).map_err(py_err)
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }
}

/// Meta-train the confidence model over labeled domains given as
/// (vectors, labels) pairs; holds one domain out per iteration.
#[pyfunction]
#[pyo3(signature = (domains, k, input_dim, hidden_dims=vec![64], alpha=0.1, beta=0.1, xi=1.0, max_iter=2000, momentum=0.9, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_meta_gcn_py(
    domains: Vec<(Vec<Vec<f64>>, Vec<u32>)>,
    k: usize,
    input_dim: usize,
    hidden_dims: Vec<usize>,
    alpha: f64,
    beta: f64,
    xi: f64,
    max_iter: usize,
    momentum: f64,
    seed: u64,
) -> PyResult<PyGcnModel> {
    let mut metadomains = Vec::with_capacity(domains.len());
    for (i, (vectors, labels)) in domains.into_iter().enumerate() {
        let m = mat_from_rows(vectors)?;
        metadomains.push(
            MetaDomain::from_labeled_features(&format!("domain-{i}"), m, &labels, k)
                .map_err(py_err)?,
        );
    }
    let bundle = DomainBundle::new(metadomains).map_err(py_err)?;
    let model = GcnModel::init(&GcnConfig {
        input_dim,
        hidden_dims,
        seed,
    })
    .map_err(py_err)?;
    let config = MetaConfig {
        alpha,
        beta,
        xi,
        max_iter,
        momentum,
        seed,
    };
    let (trained, _history) = train_meta_gcn(&bundle, model, &config).map_err(py_err)?;
    Ok(PyGcnModel { inner: trained })
}

/// Pooled conventional training baseline over the same domain format.
#[pyfunction]
#[pyo3(signature = (domains, k, input_dim, hidden_dims=vec![64], beta=0.1, max_iter=2000, momentum=0.9, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_pooled_gcn_py(
    domains: Vec<(Vec<Vec<f64>>, Vec<u32>)>,
    k: usize,
    input_dim: usize,
    hidden_dims: Vec<usize>,
    beta: f64,
    max_iter: usize,
    momentum: f64,
    seed: u64,
) -> PyResult<PyGcnModel> {
    let mut metadomains = Vec::with_capacity(domains.len());
    for (i, (vectors, labels)) in domains.into_iter().enumerate() {
        let m = mat_from_rows(vectors)?;
        metadomains.push(
            MetaDomain::from_labeled_features(&format!("domain-{i}"), m, &labels, k)
                .map_err(py_err)?,
        );
    }
    let model = GcnModel::init(&GcnConfig {
        input_dim,
        hidden_dims,
        seed,
    })
    .map_err(py_err)?;
    let config = MetaConfig {
        beta,
        max_iter,
        momentum,
        seed,
        ..MetaConfig::default()
    };
    let (trained, _) = train_pooled_gcn(&metadomains, model, &config).map_err(py_err)?;
    Ok(PyGcnModel { inner: trained })
}

/// A partition of a vertex set into pseudo identity classes.
#[pyclass(name = "PseudoLabeling")]
struct PyPseudoLabeling {
    inner: PseudoLabeling,
}

#[pymethods]
impl PyPseudoLabeling {
    #[staticmethod]
    #[pyo3(signature = (labels, method="meta-gcn", tau=0.8))]
    fn from_labels(labels: Vec<u32>, method: &str, tau: f64) -> PyResult<Self> {
        Ok(PyPseudoLabeling {
            inner: PseudoLabeling::from_raw_assignments(&labels, parse_method(method)?, tau),
        })
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.inner.cluster_id.clone()
    }

    #[getter]
    fn num_clusters(&self) -> usize {
        self.inner.num_clusters
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method_tag.to_string()
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }
}

#[pyfunction]
#[pyo3(signature = (graph, confidences, tau, linking="higher-confidence", method="meta-gcn"))]
fn extract_pseudo_labels_py(
    graph: &PyKnnGraph,
    confidences: Vec<f64>,
    tau: f64,
    linking: &str,
    method: &str,
) -> PyResult<PyPseudoLabeling> {
    Ok(PyPseudoLabeling {
        inner: extract_pseudo_labels(
            &graph.inner,
            &confidences,
            tau,
            parse_linking(linking)?,
            parse_method(method)?,
        )
        .map_err(py_err)?,
    })
}

#[pyfunction]
fn distance_baseline_py(vectors: Vec<Vec<f64>>, threshold: f64) -> PyResult<PyPseudoLabeling> {
    let m = mat_from_rows(vectors)?;
    Ok(PyPseudoLabeling {
        inner: distance_baseline_from_mat(&m, threshold),
    })
}

#[pyfunction]
fn pairwise_f_py(pred: Vec<u32>, truth: Vec<u32>) -> PyResult<(f64, f64, f64)> {
    if pred.len() != truth.len() {
        return Err(PyValueError::new_err("pred/truth size mismatch"));
    }
    let labeling = PseudoLabeling::from_raw_assignments(&pred, ClusterMethod::Gcn, 0.0);
    let s = pairwise_f(&labeling, &truth);
    Ok((s.precision, s.recall, s.f))
}

#[pyfunction]
fn bcubed_f_py(pred: Vec<u32>, truth: Vec<u32>) -> PyResult<(f64, f64, f64)> {
    if pred.len() != truth.len() {
        return Err(PyValueError::new_err("pred/truth size mismatch"));
    }
    let labeling = PseudoLabeling::from_raw_assignments(&pred, ClusterMethod::Gcn, 0.0);
    let s = bcubed_f(&labeling, &truth);
    Ok((s.precision, s.recall, s.f))
}

/// Recognition backbone: MLP onto the unit sphere.
#[pyclass(name = "Backbone")]
struct PyBackbone {
    inner: Backbone,
}

#[pymethods]
impl PyBackbone {
    #[new]
    #[pyo3(signature = (input_dim, embed_dim, hidden_dim=128, seed=0))]
    fn new(input_dim: usize, embed_dim: usize, hidden_dim: usize, seed: u64) -> PyResult<Self> {
        Ok(PyBackbone {
            inner: Backbone::init(&BackboneConfig {
                input_dim,
                hidden_dim,
                embed_dim,
                seed,
            })
            .map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyBackbone {
            inner: Backbone::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn embed(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let m = mat_from_rows(inputs)?;
        Ok(mat_to_rows(&self.inner.embed(&m).map_err(py_err)?))
    }

    fn params(&self) -> Vec<f64> {
        self.inner.to_params().0
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }
}

#[pyfunction]
#[pyo3(signature = (inputs, labels, embed_dim, hidden_dim=128, backbone_seed=0, loss_kind="am-softmax", gamma=30.0, margin=0.35, lr=0.01, epochs=50, batch_size=32, seed=0))]
#[allow(clippy::too_many_arguments)]
fn pretrain_backbone_py(
    inputs: Vec<Vec<f64>>,
    labels: Vec<u32>,
    embed_dim: usize,
    hidden_dim: usize,
    backbone_seed: u64,
    loss_kind: &str,
    gamma: f64,
    margin: f64,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> PyResult<PyBackbone> {
    let m = mat_from_rows(inputs)?;
    let config = rct_config(loss_kind, gamma, margin, 0.0, lr, epochs, batch_size, 1, seed)?;
    let backbone_config = BackboneConfig {
        input_dim: m.cols(),
        hidden_dim,
        embed_dim,
        seed: backbone_seed,
    };
    let (backbone, _log) =
        pretrain_backbone(&backbone_config, &m, &labels, &config).map_err(py_err)?;
    Ok(PyBackbone { inner: backbone })
}

#[pyfunction]
#[pyo3(signature = (theta0, inputs, pseudo, loss_kind="circle", gamma=32.0, margin=0.25, lambda_=0.1, lr=0.001, epochs=50, batch_size=32, min_class_size=1, seed=0))]
#[allow(clippy::too_many_arguments)]
fn rct_adapt_py(
    theta0: &PyBackbone,
    inputs: Vec<Vec<f64>>,
    pseudo: &PyPseudoLabeling,
    loss_kind: &str,
    gamma: f64,
    margin: f64,
    lambda_: f64,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    min_class_size: usize,
    seed: u64,
) -> PyResult<PyBackbone> {
    let m = mat_from_rows(inputs)?;
    let config = rct_config(
        loss_kind,
        gamma,
        margin,
        lambda_,
        lr,
        epochs,
        batch_size,
        min_class_size,
        seed,
    )?;
    let (adapted, _log) = rct_adapt(&theta0.inner, &m, &pseudo.inner, &config).map_err(py_err)?;
    Ok(PyBackbone { inner: adapted })
}

#[pyfunction]
#[pyo3(signature = (theta0, inputs, pseudo, loss_kind="circle", gamma=32.0, margin=0.25, lr=0.001, epochs=50, batch_size=32, min_class_size=1, seed=0))]
#[allow(clippy::too_many_arguments)]
fn finetune_baseline_py(
    theta0: &PyBackbone,
    inputs: Vec<Vec<f64>>,
    pseudo: &PyPseudoLabeling,
    loss_kind: &str,
    gamma: f64,
    margin: f64,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    min_class_size: usize,
    seed: u64,
) -> PyResult<PyBackbone> {
    let m = mat_from_rows(inputs)?;
    let config = rct_config(
        loss_kind,
        gamma,
        margin,
        0.0,
        lr,
        epochs,
        batch_size,
        min_class_size,
        seed,
    )?;
    let (tuned, _log) =
        finetune_baseline(&theta0.inner, &m, &pseudo.inner, &config).map_err(py_err)?;
    Ok(PyBackbone { inner: tuned })
}

#[pyfunction]
#[pyo3(signature = (backbone, inputs, labels))]
fn class_centers_py(
    backbone: &PyBackbone,
    inputs: Vec<Vec<f64>>,
    labels: Vec<u32>,
) -> PyResult<Vec<Vec<f64>>> {
    let m = mat_from_rows(inputs)?;
    let centers = compute_class_centers(&backbone.inner, &m, &labels).map_err(py_err)?;
    Ok(mat_to_rows(&centers.normalized))
}

#[pyfunction]
#[pyo3(signature = (embeddings, labels, bank_rows, loss_kind="am-softmax", gamma=30.0, margin=0.35))]
fn margin_loss_py(
    embeddings: Vec<Vec<f64>>,
    labels: Vec<u32>,
    bank_rows: Vec<Vec<f64>>,
    loss_kind: &str,
    gamma: f64,
    margin: f64,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let emb = mat_from_rows(embeddings)?;
    let bank = ClassifierBank::from_unit_rows(mat_from_rows(bank_rows)?, true).map_err(py_err)?;
    let out = margin_loss(&emb, &labels, &bank, parse_loss_kind(loss_kind)?, gamma, margin)
        .map_err(py_err)?;
    Ok((out.loss, mat_to_rows(&out.embed_grad)))
}

#[pyfunction]
fn sample_verification_pairs_py(
    labels: Vec<u32>,
    num_genuine: usize,
    num_impostor: usize,
    seed: u64,
) -> PyResult<Vec<(usize, usize, bool)>> {
    let pairs =
        sample_verification_pairs(&labels, num_genuine, num_impostor, seed).map_err(py_err)?;
    Ok(pairs.into_iter().map(|p| (p.a, p.b, p.genuine)).collect())
}

#[pyfunction]
#[pyo3(signature = (backbone, inputs, pairs, fmr_targets=vec![]))]
fn evaluate_verification_py(
    py: Python<'_>,
    backbone: &PyBackbone,
    inputs: Vec<Vec<f64>>,
    pairs: Vec<(usize, usize, bool)>,
    fmr_targets: Vec<f64>,
) -> PyResult<Py<PyDict>> {
    let m = mat_from_rows(inputs)?;
    let pairs: Vec<VerificationPair> = pairs
        .into_iter()
        .map(|(a, b, genuine)| VerificationPair { a, b, genuine })
        .collect();
    let report =
        evaluate_verification(&backbone.inner, &m, &pairs, &fmr_targets).map_err(py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("accuracy", report.accuracy)?;
    dict.set_item("best_threshold", report.best_threshold)?;
    dict.set_item("num_genuine", report.num_genuine)?;
    dict.set_item("num_impostor", report.num_impostor)?;
    let fnmr: Vec<(f64, f64)> = report
        .fnmr_at_fmr
        .iter()
        .map(|e| (e.target, e.fnmr))
        .collect();
    dict.set_item("fnmr_at_fmr", fnmr)?;
    Ok(dict.into())
}

#[pyfunction]
fn fedpav_average_py(backbones: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let params: Vec<ParamVector> = backbones.into_iter().map(ParamVector).collect();
    Ok(fedpav_average(&params).map_err(py_err)?.0)
}

/// Dual-loop federation over (shard_vectors, pseudo_labels) clients.
/// Returns the server backbone after the final round.
#[pyfunction]
#[pyo3(signature = (server, shards, rounds=5, anchor="round", loss_kind="circle", gamma=32.0, margin=0.25, lambda_=0.1, lr=0.001, epochs=50, batch_size=32, seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_dual_loop_py(
    server: &PyBackbone,
    shards: Vec<(Vec<Vec<f64>>, Vec<u32>)>,
    rounds: usize,
    anchor: &str,
    loss_kind: &str,
    gamma: f64,
    margin: f64,
    lambda_: f64,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> PyResult<PyBackbone> {
    let anchor_mode = match anchor {
        "round" => AnchorMode::Round,
        "origin" => AnchorMode::Origin,
        other => return Err(PyValueError::new_err(format!("unknown anchor mode '{other}'"))),
    };
    let mut clients = Vec::with_capacity(shards.len());
    for (i, (vectors, labels)) in shards.into_iter().enumerate() {
        let m = mat_from_rows(vectors)?;
        clients.push(Client::new(&format!("client-{i}"), m, labels, None).map_err(py_err)?);
    }
    let config = FederationConfig {
        rounds,
        rct: rct_config(loss_kind, gamma, margin, lambda_, lr, epochs, batch_size, 1, seed)?,
        anchor_mode,
        seed,
    };
    let outcome = run_dual_loop(&server.inner, &clients, &config).map_err(py_err)?;
    let final_params = outcome
        .server_checkpoints
        .last()
        .ok_or_else(|| PyValueError::new_err("no rounds ran"))?;
    Ok(PyBackbone {
        inner: server.inner.with_params(final_params).map_err(py_err)?,
    })
}

#[pyfunction]
fn separated_prototypes_py(num: usize, dim: usize, max_cos: f64, seed: u64) -> Vec<Vec<f64>> {
    mat_to_rows(&separated_prototypes(num, dim, max_cos, seed))
}

#[pymodule]
fn lafr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEmbeddingSet>()?;
    m.add_class::<PyKnnGraph>()?;
    m.add_class::<PyGcnModel>()?;
    m.add_class::<PyPseudoLabeling>()?;
    m.add_class::<PyBackbone>()?;
    m.add_function(wrap_pyfunction!(separated_prototypes_py, m)?)?;
    m.add_function(wrap_pyfunction!(train_meta_gcn_py, m)?)?;
    m.add_function(wrap_pyfunction!(train_pooled_gcn_py, m)?)?;
    m.add_function(wrap_pyfunction!(extract_pseudo_labels_py, m)?)?;
    m.add_function(wrap_pyfunction!(distance_baseline_py, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_f_py, m)?)?;
    m.add_function(wrap_pyfunction!(bcubed_f_py, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_backbone_py, m)?)?;
    m.add_function(wrap_pyfunction!(rct_adapt_py, m)?)?;
    m.add_function(wrap_pyfunction!(finetune_baseline_py, m)?)?;
    m.add_function(wrap_pyfunction!(class_centers_py, m)?)?;
    m.add_function(wrap_pyfunction!(margin_loss_py, m)?)?;
    m.add_function(wrap_pyfunction!(sample_verification_pairs_py, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_verification_py, m)?)?;
    m.add_function(wrap_pyfunction!(fedpav_average_py, m)?)?;
    m.add_function(wrap_pyfunction!(run_dual_loop_py, m)?)?;
    Ok(())
}
