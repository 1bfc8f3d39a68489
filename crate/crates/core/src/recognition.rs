//! Recognition backbone and its adaptation machinery: margin-based losses
//! over cosine logits, class-center computation, regularized center transfer,
//! the plain fine-tune baseline, and verification metrics.

use crate::cluster::PseudoLabeling;
use crate::container::{bytes_to_f64s, f64s_to_bytes, read_container, write_container};
use crate::error::{LafrError, Result};
use crate::linalg::{cosine, l2_norm, Mat};
use crate::params::ParamVector;
use crate::rng::{derive_seed, CounterRng};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn new(input_dim: usize, embed_dim: usize, seed: u64) -> Self {
        BackboneConfig {
            input_dim,
            hidden_dim: 128,
            embed_dim,
            seed,
        }
    }
}

/// Two-layer perceptron followed by L2 normalization; outputs live on the
/// unit sphere by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    w1: Mat,
    b1: Vec<f64>,
    w2: Mat,
    b2: Vec<f64>,
}

impl Backbone {
    pub fn init(config: &BackboneConfig) -> Result<Backbone> {
        if config.input_dim == 0 || config.hidden_dim == 0 || config.embed_dim == 0 {
            return Err(LafrError::Config("backbone dims must be positive".into()));
        }
        let mut rng = CounterRng::new(derive_seed(config.seed, 0x62626e69)); // "bbni"
        Ok(Backbone {
            w1: glorot(&mut rng, config.input_dim, config.hidden_dim),
            b1: vec![0.0; config.hidden_dim],
            w2: glorot(&mut rng, config.hidden_dim, config.embed_dim),
            b2: vec![0.0; config.embed_dim],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.rows() * self.w1.cols()
            + self.b1.len()
            + self.w2.rows() * self.w2.cols()
            + self.b2.len()
    }

    /// Flatten ordering: w1 row-major, b1, w2 row-major, b2.
    pub fn to_params(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(&self.b2);
        ParamVector(out)
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        params.check_len(self.num_params())?;
        let p = params.as_slice();
        let mut off = 0;
        let len = self.w1.rows() * self.w1.cols();
        self.w1.as_mut_slice().copy_from_slice(&p[off..off + len]);
        off += len;
        let len = self.b1.len();
        self.b1.copy_from_slice(&p[off..off + len]);
        off += len;
        let len = self.w2.rows() * self.w2.cols();
        self.w2.as_mut_slice().copy_from_slice(&p[off..off + len]);
        off += len;
        let len = self.b2.len();
        self.b2.copy_from_slice(&p[off..off + len]);
        Ok(())
    }

    pub fn with_params(&self, params: &ParamVector) -> Result<Backbone> {
        let mut b = self.clone();
        b.set_params(params)?;
        Ok(b)
    }

    /// Map raw inputs to unit-norm embeddings.
    pub fn embed(&self, inputs: &Mat) -> Result<Mat> {
        Ok(self.forward(inputs)?.embeddings)
    }

    fn forward(&self, inputs: &Mat) -> Result<ForwardPass> {
        if inputs.cols() != self.input_dim() {
            return Err(LafrError::Shape(format!(
                "inputs have {} columns, backbone expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        let mut hidden_pre = inputs.matmul(&self.w1);
        for i in 0..hidden_pre.rows() {
            let row = hidden_pre.row_mut(i);
            for (v, b) in row.iter_mut().zip(&self.b1) {
                *v += b;
            }
        }
        let mut hidden = hidden_pre.clone();
        for v in hidden.as_mut_slice() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let mut raw = hidden.matmul(&self.w2);
        for i in 0..raw.rows() {
            let row = raw.row_mut(i);
            for (v, b) in row.iter_mut().zip(&self.b2) {
                *v += b;
            }
        }
        let mut norms = Vec::with_capacity(raw.rows());
        let mut embeddings = raw.clone();
        for i in 0..raw.rows() {
            let norm = l2_norm(raw.row(i));
            if norm < 1e-12 || !norm.is_finite() {
                return Err(LafrError::Numeric(format!(
                    "embedding row {i} has norm {norm}"
                )));
            }
            for v in embeddings.row_mut(i) {
                *v /= norm;
            }
            norms.push(norm);
        }
        Ok(ForwardPass {
            hidden_pre,
            hidden,
            norms,
            embeddings,
        })
    }

    /// Chain embedding gradients back to a flat parameter gradient.
    fn backward(&self, inputs: &Mat, pass: &ForwardPass, embed_grad: &Mat) -> ParamVector {
        let b = inputs.rows();
        let d = self.embed_dim();
        // Through the row normalization: dE = (g - (f . g) f) / norm.
        let mut raw_grad = Mat::zeros(b, d);
        for i in 0..b {
            let f = pass.embeddings.row(i);
            let g = embed_grad.row(i);
            let fg = crate::linalg::dot(f, g);
            let dst = raw_grad.row_mut(i);
            for j in 0..d {
                dst[j] = (g[j] - fg * f[j]) / pass.norms[i];
            }
        }
        let w2_grad = pass.hidden.transpose().matmul(&raw_grad);
        let mut b2_grad = vec![0.0; d];
        for i in 0..b {
            for (acc, v) in b2_grad.iter_mut().zip(raw_grad.row(i)) {
                *acc += v;
            }
        }
        let mut hidden_grad = raw_grad.matmul(&self.w2.transpose());
        for (g, &pre) in hidden_grad
            .as_mut_slice()
            .iter_mut()
            .zip(pass.hidden_pre.as_slice())
        {
            if pre <= 0.0 {
                *g = 0.0;
            }
        }
        let w1_grad = inputs.transpose().matmul(&hidden_grad);
        let mut b1_grad = vec![0.0; self.hidden_dim()];
        for i in 0..b {
            for (acc, v) in b1_grad.iter_mut().zip(hidden_grad.row(i)) {
                *acc += v;
            }
        }
        let mut flat = Vec::with_capacity(self.num_params());
        flat.extend_from_slice(w1_grad.as_slice());
        flat.extend_from_slice(&b1_grad);
        flat.extend_from_slice(w2_grad.as_slice());
        flat.extend_from_slice(&b2_grad);
        ParamVector(flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = BackboneHeader {
            kind: "backbone".into(),
            input_dim: self.input_dim(),
            hidden_dim: self.hidden_dim(),
            embed_dim: self.embed_dim(),
        };
        write_container(path, &header, &f64s_to_bytes(self.to_params().as_slice()))
    }

    pub fn load(path: &Path) -> Result<Backbone> {
        let (header, payload): (BackboneHeader, Vec<u8>) = read_container(path)?;
        if header.kind != "backbone" {
            return Err(LafrError::Format(format!(
                "{}: expected backbone checkpoint, found {}",
                path.display(),
                header.kind
            )));
        }
        let mut backbone = Backbone::init(&BackboneConfig {
            input_dim: header.input_dim,
            hidden_dim: header.hidden_dim,
            embed_dim: header.embed_dim,
            seed: 0,
        })?;
        backbone.set_params(&ParamVector(bytes_to_f64s(&payload)?))?;
        Ok(backbone)
    }
}

struct ForwardPass {
    hidden_pre: Mat,
    hidden: Mat,
    norms: Vec<f64>,
    embeddings: Mat,
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
struct BackboneHeader {
    kind: String,
    input_dim: usize,
    hidden_dim: usize,
    embed_dim: usize,
}

/// Unit-norm class vectors used as cosine classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBank {
    weights: Mat,
    frozen: bool,
}

impl ClassifierBank {
    pub fn from_unit_rows(weights: Mat, frozen: bool) -> Result<Self> {
        for i in 0..weights.rows() {
            let norm = l2_norm(weights.row(i));
            if (norm - 1.0).abs() > 1e-9 {
                return Err(LafrError::InvalidArgument(format!(
                    "classifier row {i} has norm {norm}, expected unit"
                )));
            }
        }
        Ok(ClassifierBank { weights, frozen })
    }

    pub fn random(num_classes: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = CounterRng::new(derive_seed(seed, 0x62616e6b)); // "bank"
        let mut weights = Mat::zeros(num_classes, embed_dim);
        for i in 0..num_classes {
            let row = weights.row_mut(i);
            loop {
                for v in row.iter_mut() {
                    *v = rng.next_gaussian();
                }
                let norm = l2_norm(row);
                if norm > 1e-9 {
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                    break;
                }
            }
        }
        ClassifierBank {
            weights,
            frozen: false,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// Per-class embedding centers under a fixed backbone. The raw mean is kept
/// alongside the normalized center used for classifier rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterSet {
    pub raw: Mat,
    pub normalized: Mat,
}

pub fn compute_class_centers(
    backbone: &Backbone,
    inputs: &Mat,
    labels: &[u32],
) -> Result<CenterSet> {
    if labels.len() != inputs.rows() {
        return Err(LafrError::Shape(format!(
            "{} labels for {} input rows",
            labels.len(),
            inputs.rows()
        )));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    if num_classes == 0 {
        return Err(LafrError::InvalidLabeling("no labels given".into()));
    }
    let embeddings = backbone.embed(inputs)?;
    let mut raw = Mat::zeros(num_classes, backbone.embed_dim());
    let mut counts = vec![0usize; num_classes];
    for (i, &label) in labels.iter().enumerate() {
        counts[label as usize] += 1;
        let dst = raw.row_mut(label as usize);
        for (a, b) in dst.iter_mut().zip(embeddings.row(i)) {
            *a += b;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(LafrError::InvalidLabeling(format!("class {c} is empty")));
        }
        for v in raw.row_mut(c) {
            *v /= count as f64;
        }
    }
    let mut normalized = raw.clone();
    for c in 0..num_classes {
        let norm = l2_norm(normalized.row(c));
        if norm < 1e-12 {
            return Err(LafrError::Numeric(format!(
                "class {c} center collapsed to zero norm"
            )));
        }
        for v in normalized.row_mut(c) {
            *v /= norm;
        }
    }
    Ok(CenterSet { raw, normalized })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginLossKind {
    AmSoftmax,
    Circle,
}

impl std::str::FromStr for MarginLossKind {
    type Err = LafrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "am-softmax" => Ok(MarginLossKind::AmSoftmax),
            "circle" => Ok(MarginLossKind::Circle),
            other => Err(LafrError::InvalidArgument(format!(
                "unknown loss kind '{other}', expected am-softmax | circle"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RctConfig {
    pub loss_kind: MarginLossKind,
    /// Logit scale.
    pub gamma: f64,
    pub margin: f64,
    /// Weight-anchor strength.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Pseudo-label classes smaller than this are dropped before training.
    pub min_class_size: usize,
    pub seed: u64,
}

impl RctConfig {
    pub fn am_softmax() -> Self {
        RctConfig {
            loss_kind: MarginLossKind::AmSoftmax,
            gamma: 30.0,
            margin: 0.35,
            lambda: 0.1,
            lr: 0.001,
            epochs: 50,
            batch_size: 32,
            min_class_size: 1,
            seed: 0,
        }
    }

    pub fn circle() -> Self {
        RctConfig {
            loss_kind: MarginLossKind::Circle,
            gamma: 32.0,
            margin: 0.25,
            ..RctConfig::am_softmax()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 {
            return Err(LafrError::Config(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(LafrError::Config(format!(
                "margin must be in [0, 1), got {}",
                self.margin
            )));
        }
        if self.lambda < 0.0 {
            return Err(LafrError::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.lr <= 0.0 {
            return Err(LafrError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(LafrError::Config("batch_size must be >= 1".into()));
        }
        if self.min_class_size == 0 {
            return Err(LafrError::Config("min_class_size must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for RctConfig {
    fn default() -> Self {
        RctConfig::am_softmax()
    }
}

#[derive(Debug, Clone)]
pub struct MarginLossOutput {
    pub loss: f64,
    /// Gradient with respect to the (unit) embeddings.
    pub embed_grad: Mat,
}

/// Margin loss over cosine logits between unit embeddings and bank rows.
pub fn margin_loss(
    embeddings: &Mat,
    labels: &[u32],
    bank: &ClassifierBank,
    kind: MarginLossKind,
    gamma: f64,
    margin: f64,
) -> Result<MarginLossOutput> {
    let (loss, embed_grad, _) =
        margin_loss_full(embeddings, labels, bank, kind, gamma, margin, false)?;
    Ok(MarginLossOutput { loss, embed_grad })
}

/// Full route that also produces the bank gradient when the classifier is
/// trainable.
fn margin_loss_full(
    embeddings: &Mat,
    labels: &[u32],
    bank: &ClassifierBank,
    kind: MarginLossKind,
    gamma: f64,
    margin: f64,
    want_bank_grad: bool,
) -> Result<(f64, Mat, Option<Mat>)> {
    let n = embeddings.rows();
    let c = bank.num_classes();
    if labels.len() != n {
        return Err(LafrError::Shape(format!(
            "{} labels for {} embeddings",
            labels.len(),
            n
        )));
    }
    if embeddings.cols() != bank.embed_dim() {
        return Err(LafrError::Shape(format!(
            "embedding dim {} vs bank dim {}",
            embeddings.cols(),
            bank.embed_dim()
        )));
    }
    if matches!(kind, MarginLossKind::Circle) && c < 2 {
        return Err(LafrError::Config(
            "circle loss needs at least 2 classes for its negative terms".into(),
        ));
    }
    for &l in labels {
        if l as usize >= c {
            return Err(LafrError::InvalidLabeling(format!(
                "label {l} out of range for {c} classes"
            )));
        }
    }

    let mut total = 0.0;
    let mut embed_grad = Mat::zeros(n, embeddings.cols());
    let mut bank_grad = if want_bank_grad {
        Some(Mat::zeros(c, bank.embed_dim()))
    } else {
        None
    };
    let mut cos = vec![0.0f64; c];
    // d(loss_i)/d(cos_j), reused per sample.
    let mut dcos = vec![0.0f64; c];

    for i in 0..n {
        let y = labels[i] as usize;
        let f = embeddings.row(i);
        for (j, cj) in cos.iter_mut().enumerate() {
            *cj = crate::linalg::dot(f, bank.weights().row(j));
        }
        for v in dcos.iter_mut() {
            *v = 0.0;
        }

        match kind {
            MarginLossKind::AmSoftmax => {
                // Adjusted logits: gamma*(cos_y - m) for the target class,
                // gamma*cos_j otherwise; loss is the negative log softmax of
                // the target, stabilized through log-sum-exp.
                let mut max_z = f64::NEG_INFINITY;
                for (j, &cj) in cos.iter().enumerate() {
                    let z = if j == y { gamma * (cj - margin) } else { gamma * cj };
                    max_z = max_z.max(z);
                }
                let mut sum = 0.0;
                for (j, &cj) in cos.iter().enumerate() {
                    let z = if j == y { gamma * (cj - margin) } else { gamma * cj };
                    sum += (z - max_z).exp();
                }
                let lse = max_z + sum.ln();
                let z_y = gamma * (cos[y] - margin);
                total += lse - z_y;
                for (j, &cj) in cos.iter().enumerate() {
                    let z = if j == y { gamma * (cj - margin) } else { gamma * cj };
                    let p = (z - lse).exp();
                    dcos[j] = gamma * (p - if j == y { 1.0 } else { 0.0 });
                }
            }
            MarginLossKind::Circle => {
                // Proxy-form circle loss. The self-paced weights are
                // differentiated through, so gradients agree with finite
                // differences away from the clamp kinks.
                let delta_p = 1.0 - margin;
                let delta_n = margin;
                let s_p = cos[y];
                let alpha_p = (1.0 + margin - s_p).max(0.0);
                let pos = gamma * alpha_p * (s_p - delta_p);

                let mut max_neg = f64::NEG_INFINITY;
                for (j, &s_n) in cos.iter().enumerate() {
                    if j == y {
                        continue;
                    }
                    let alpha_n = (s_n + margin).max(0.0);
                    max_neg = max_neg.max(gamma * alpha_n * (s_n - delta_n));
                }
                let mut sum = 0.0;
                for (j, &s_n) in cos.iter().enumerate() {
                    if j == y {
                        continue;
                    }
                    let alpha_n = (s_n + margin).max(0.0);
                    sum += (gamma * alpha_n * (s_n - delta_n) - max_neg).exp();
                }
                let lse_n = max_neg + sum.ln();
                let u = lse_n - pos;
                // softplus(u), stable on both tails.
                total += u.max(0.0) + (-u.abs()).exp().ln_1p();
                let sigma = 1.0 / (1.0 + (-u).exp());

                let dpos_dsp = gamma
                    * (if 1.0 + margin - s_p > 0.0 { -1.0 } else { 0.0 } * (s_p - delta_p)
                        + alpha_p);
                dcos[y] = -sigma * dpos_dsp;
                for (j, &s_n) in cos.iter().enumerate() {
                    if j == y {
                        continue;
                    }
                    let alpha_n = (s_n + margin).max(0.0);
                    let q = (gamma * alpha_n * (s_n - delta_n) - lse_n).exp();
                    let dneg_dsn = gamma
                        * (if s_n + margin > 0.0 { 1.0 } else { 0.0 } * (s_n - delta_n)
                            + alpha_n);
                    dcos[j] = sigma * q * dneg_dsn;
                }
            }
        }

        let gi = embed_grad.row_mut(i);
        for (j, &d) in dcos.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (g, &w) in gi.iter_mut().zip(bank.weights().row(j)) {
                *g += d * w;
            }
            if let Some(bg) = bank_grad.as_mut() {
                for (g, &fv) in bg.row_mut(j).iter_mut().zip(f) {
                    *g += d * fv;
                }
            }
        }
    }

    let scale = 1.0 / n as f64;
    total *= scale;
    embed_grad.scale(scale);
    if let Some(bg) = bank_grad.as_mut() {
        bg.scale(scale);
    }
    if !total.is_finite() {
        return Err(LafrError::Numeric(format!(
            "margin loss is not finite: {total}"
        )));
    }
    Ok((total, embed_grad, bank_grad))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub margin_loss: f64,
    pub anchor_penalty: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdaptLog {
    pub epochs: Vec<EpochRecord>,
}

impl AdaptLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,margin_loss,anchor_penalty,total_loss\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.17},{:.17},{:.17}\n",
                r.epoch, r.margin_loss, r.anchor_penalty, r.total_loss
            ));
        }
        out
    }
}

struct TrainSetup<'a> {
    config: &'a RctConfig,
    /// (reference parameters, lambda); when set, lambda * ||theta - ref||^2
    /// joins the loss at every optimization step.
    anchor: Option<(&'a ParamVector, f64)>,
    bank_trainable: bool,
}

/// Shared mini-batch SGD loop for pre-training, RCT, and the fine-tune
/// baseline. Batch order is seeded per epoch; all reductions run in fixed
/// order, so reruns are bit-identical.
fn train_backbone(
    init: &Backbone,
    mut bank: ClassifierBank,
    inputs: &Mat,
    labels: &[u32],
    setup: TrainSetup<'_>,
) -> Result<(Backbone, ClassifierBank, AdaptLog)> {
    let cfg = setup.config;
    cfg.validate()?;
    if inputs.rows() != labels.len() {
        return Err(LafrError::Shape(format!(
            "{} labels for {} input rows",
            labels.len(),
            inputs.rows()
        )));
    }
    if bank.embed_dim() != init.embed_dim() {
        return Err(LafrError::Shape(format!(
            "bank dim {} vs backbone embed dim {}",
            bank.embed_dim(),
            init.embed_dim()
        )));
    }

    let mut backbone = init.clone();
    let mut log = AdaptLog::default();
    let n = inputs.rows();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = CounterRng::new(derive_seed(cfg.seed, epoch as u64));
        for (i, v) in order.iter_mut().enumerate() {
            *v = i;
        }
        rng.shuffle(&mut order);

        let mut epoch_margin = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch_inputs = Mat::zeros(chunk.len(), inputs.cols());
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for (r, &src) in chunk.iter().enumerate() {
                batch_inputs.row_mut(r).copy_from_slice(inputs.row(src));
                batch_labels.push(labels[src]);
            }

            let pass = backbone
                .forward(&batch_inputs)
                .map_err(|e| LafrError::Numeric(format!("epoch {epoch}, batch {batch_idx}: {e}")))?;
            let (loss, embed_grad, bank_grad) = margin_loss_full(
                &pass.embeddings,
                &batch_labels,
                &bank,
                cfg.loss_kind,
                cfg.gamma,
                cfg.margin,
                setup.bank_trainable,
            )
            .map_err(|e| LafrError::Numeric(format!("epoch {epoch}, batch {batch_idx}: {e}")))?;
            if !loss.is_finite() {
                return Err(LafrError::Numeric(format!(
                    "epoch {epoch}, batch {batch_idx}: margin loss {loss}"
                )));
            }
            epoch_margin += loss;
            batches += 1;

            let mut param_grad = backbone.backward(&batch_inputs, &pass, &embed_grad);
            if let Some((anchor, lambda)) = setup.anchor {
                if lambda > 0.0 {
                    let params = backbone.to_params();
                    let mut drift = params.clone();
                    drift.add_scaled(anchor, -1.0);
                    param_grad.add_scaled(&drift, 2.0 * lambda);
                }
            }
            let mut params = backbone.to_params();
            params.add_scaled(&param_grad, -cfg.lr);
            if !params.all_finite() {
                return Err(LafrError::Numeric(format!(
                    "epoch {epoch}, batch {batch_idx}: parameters diverged"
                )));
            }
            backbone.set_params(&params)?;

            if setup.bank_trainable {
                let bg = bank_grad.expect("bank gradient requested");
                let mut weights = bank.weights().clone();
                for cidx in 0..weights.rows() {
                    let row = weights.row_mut(cidx);
                    for (w, g) in row.iter_mut().zip(bg.row(cidx)) {
                        *w -= cfg.lr * g;
                    }
                    let norm = l2_norm(row);
                    if norm < 1e-12 {
                        return Err(LafrError::Numeric(format!(
                            "epoch {epoch}: classifier row {cidx} collapsed"
                        )));
                    }
                    for w in row.iter_mut() {
                        *w /= norm;
                    }
                }
                bank = ClassifierBank {
                    weights,
                    frozen: false,
                };
            }
        }

        let anchor_penalty = match setup.anchor {
            Some((anchor, lambda)) => {
                let d = backbone.to_params().distance(anchor);
                lambda * d * d
            }
            None => 0.0,
        };
        let margin_mean = epoch_margin / batches.max(1) as f64;
        log.epochs.push(EpochRecord {
            epoch,
            margin_loss: margin_mean,
            anchor_penalty,
            total_loss: margin_mean + anchor_penalty,
        });
    }

    Ok((backbone, bank, log))
}

/// Drop classes smaller than `min_size` and relabel the rest contiguously.
/// Returns the kept row indices and their new labels.
fn filter_small_classes(labels: &[u32], min_size: usize) -> (Vec<usize>, Vec<u32>) {
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let mut remap = vec![u32::MAX; num_classes];
    let mut next = 0u32;
    for (c, &count) in counts.iter().enumerate() {
        if count >= min_size {
            remap[c] = next;
            next += 1;
        }
    }
    let mut keep = Vec::new();
    let mut new_labels = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if remap[l as usize] != u32::MAX {
            keep.push(i);
            new_labels.push(remap[l as usize]);
        }
    }
    (keep, new_labels)
}

fn select_rows(inputs: &Mat, keep: &[usize]) -> Mat {
    let mut out = Mat::zeros(keep.len(), inputs.cols());
    for (r, &src) in keep.iter().enumerate() {
        out.row_mut(r).copy_from_slice(inputs.row(src));
    }
    out
}

/// Pre-train a backbone from scratch: random unit classifier, trainable, no
/// anchor. This produces the "pre-trained model" adaptation starts from.
pub fn pretrain_backbone(
    backbone_config: &BackboneConfig,
    inputs: &Mat,
    labels: &[u32],
    config: &RctConfig,
) -> Result<(Backbone, AdaptLog)> {
    let init = Backbone::init(backbone_config)?;
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    if num_classes == 0 {
        return Err(LafrError::InvalidLabeling("no labels given".into()));
    }
    let bank = ClassifierBank::random(num_classes, backbone_config.embed_dim, config.seed);
    let (backbone, _, log) = train_backbone(
        &init,
        bank,
        inputs,
        labels,
        TrainSetup {
            config,
            anchor: None,
            bank_trainable: true,
        },
    )?;
    Ok((backbone, log))
}

/// Regularized center transfer: freeze the classifier at the normalized
/// pre-trained class centers and fine-tune only the backbone, pulled toward
/// the pre-trained parameters by the lambda anchor.
pub fn rct_adapt(
    theta0: &Backbone,
    inputs: &Mat,
    pseudo: &PseudoLabeling,
    config: &RctConfig,
) -> Result<(Backbone, AdaptLog)> {
    if pseudo.n() != inputs.rows() {
        return Err(LafrError::Shape(format!(
            "pseudo labeling covers {} rows, inputs have {}",
            pseudo.n(),
            inputs.rows()
        )));
    }
    let (keep, labels) = filter_small_classes(&pseudo.cluster_id, config.min_class_size);
    if keep.is_empty() {
        return Err(LafrError::InvalidLabeling(format!(
            "no classes of size >= {} remain",
            config.min_class_size
        )));
    }
    let kept_inputs = select_rows(inputs, &keep);
    let centers = compute_class_centers(theta0, &kept_inputs, &labels)?;
    let bank = ClassifierBank::from_unit_rows(centers.normalized, true)?;
    let anchor = theta0.to_params();
    rct_adapt_anchored(theta0, &anchor, &bank, &kept_inputs, &labels, config)
}

/// RCT with an explicit starting point, anchor, and frozen bank; the
/// federated loop drives this directly.
pub fn rct_adapt_anchored(
    init: &Backbone,
    anchor: &ParamVector,
    bank: &ClassifierBank,
    inputs: &Mat,
    labels: &[u32],
    config: &RctConfig,
) -> Result<(Backbone, AdaptLog)> {
    anchor.check_len(init.num_params())?;
    let (backbone, bank_after, log) = train_backbone(
        init,
        bank.clone(),
        inputs,
        labels,
        TrainSetup {
            config,
            anchor: Some((anchor, config.lambda)),
            bank_trainable: false,
        },
    )?;
    debug_assert_eq!(bank_after.weights(), bank.weights());
    Ok((backbone, log))
}

/// Standard fine-tuning baseline: same center initialization, but the
/// classifier stays trainable (renormalized each step) and the anchor term
/// is dropped regardless of the configured lambda.
pub fn finetune_baseline(
    theta0: &Backbone,
    inputs: &Mat,
    pseudo: &PseudoLabeling,
    config: &RctConfig,
) -> Result<(Backbone, AdaptLog)> {
    if pseudo.n() != inputs.rows() {
        return Err(LafrError::Shape(format!(
            "pseudo labeling covers {} rows, inputs have {}",
            pseudo.n(),
            inputs.rows()
        )));
    }
    let (keep, labels) = filter_small_classes(&pseudo.cluster_id, config.min_class_size);
    if keep.is_empty() {
        return Err(LafrError::InvalidLabeling(format!(
            "no classes of size >= {} remain",
            config.min_class_size
        )));
    }
    let kept_inputs = select_rows(inputs, &keep);
    let centers = compute_class_centers(theta0, &kept_inputs, &labels)?;
    let bank = ClassifierBank::from_unit_rows(centers.normalized, false)?;
    let (backbone, _, log) = train_backbone(
        theta0,
        bank,
        &kept_inputs,
        &labels,
        TrainSetup {
            config,
            anchor: None,
            bank_trainable: true,
        },
    )?;
    Ok((backbone, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub genuine: bool,
}

/// Sample genuine and impostor index pairs from a labeled set.
pub fn sample_verification_pairs(
    labels: &[u32],
    num_genuine: usize,
    num_impostor: usize,
    seed: u64,
) -> Result<Vec<VerificationPair>> {
    let n = labels.len();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l as usize].push(i);
    }
    let multi: Vec<usize> = (0..num_classes).filter(|&c| members[c].len() >= 2).collect();
    if multi.is_empty() && num_genuine > 0 {
        return Err(LafrError::InvalidArgument(
            "no class has two members; cannot sample genuine pairs".into(),
        ));
    }
    if num_classes < 2 && num_impostor > 0 {
        return Err(LafrError::InvalidArgument(
            "need at least two classes to sample impostor pairs".into(),
        ));
    }
    let mut rng = CounterRng::new(derive_seed(seed, 0x70616972)); // "pair"
    let mut pairs = Vec::with_capacity(num_genuine + num_impostor);
    for _ in 0..num_genuine {
        let c = multi[rng.next_below(multi.len() as u64) as usize];
        let group = &members[c];
        let a = group[rng.next_below(group.len() as u64) as usize];
        let b = loop {
            let cand = group[rng.next_below(group.len() as u64) as usize];
            if cand != a {
                break cand;
            }
        };
        pairs.push(VerificationPair { a, b, genuine: true });
    }
    for _ in 0..num_impostor {
        let a = rng.next_below(n as u64) as usize;
        let b = loop {
            let cand = rng.next_below(n as u64) as usize;
            if labels[cand] != labels[a] {
                break cand;
            }
        };
        pairs.push(VerificationPair { a, b, genuine: false });
    }
    Ok(pairs)
}

pub fn pairs_to_csv(pairs: &[VerificationPair], source_ids: &[String]) -> Result<String> {
    let mut out = String::from("id_a,id_b,same_flag\n");
    for p in pairs {
        let ida = source_ids
            .get(p.a)
            .ok_or_else(|| LafrError::InvalidArgument(format!("pair index {} out of range", p.a)))?;
        let idb = source_ids
            .get(p.b)
            .ok_or_else(|| LafrError::InvalidArgument(format!("pair index {} out of range", p.b)))?;
        out.push_str(&format!("{ida},{idb},{}\n", u8::from(p.genuine)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnmrAtFmr {
    pub target: f64,
    pub fnmr: f64,
    /// Empirical FMR actually realized at the chosen threshold.
    pub achieved_fmr: f64,
    pub threshold: f64,
    /// True when the impostor count cannot resolve the target rate, so the
    /// reported FNMR is the value at FMR = 0 and only lower-bounds the ideal.
    pub resolution_limited: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub accuracy: f64,
    pub best_threshold: f64,
    pub num_genuine: usize,
    pub num_impostor: usize,
    pub roc: Vec<RocPoint>,
    pub fnmr_at_fmr: Vec<FnmrAtFmr>,
}

impl VerificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn fnmr_at(&self, target: f64) -> Option<f64> {
        self.fnmr_at_fmr
            .iter()
            .find(|e| e.target == target)
            .map(|e| e.fnmr)
    }
}

/// Score every pair by embedding cosine, then sweep thresholds. A pair is
/// declared genuine when its score >= threshold.
pub fn evaluate_verification(
    backbone: &Backbone,
    inputs: &Mat,
    pairs: &[VerificationPair],
    fmr_targets: &[f64],
) -> Result<VerificationReport> {
    if pairs.is_empty() {
        return Err(LafrError::InvalidArgument("empty pair list".into()));
    }
    let embeddings = backbone.embed(inputs)?;
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for p in pairs {
        if p.a >= inputs.rows() || p.b >= inputs.rows() {
            return Err(LafrError::InvalidArgument(format!(
                "pair ({}, {}) out of range for {} rows",
                p.a,
                p.b,
                inputs.rows()
            )));
        }
        let score = cosine(embeddings.row(p.a), embeddings.row(p.b));
        if p.genuine {
            genuine.push(score);
        } else {
            impostor.push(score);
        }
    }
    if genuine.is_empty() || impostor.is_empty() {
        return Err(LafrError::InvalidArgument(
            "need at least one genuine and one impostor pair".into(),
        ));
    }
    Ok(score_verification(&genuine, &impostor, fmr_targets))
}

/// Threshold sweep over precomputed scores; exposed for oracles and tests.
pub fn score_verification(
    genuine: &[f64],
    impostor: &[f64],
    fmr_targets: &[f64],
) -> VerificationReport {
    let mut gen_sorted = genuine.to_vec();
    let mut imp_sorted = impostor.to_vec();
    gen_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    imp_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (ng, ni) = (gen_sorted.len(), imp_sorted.len());

    // Candidate thresholds: every distinct score plus one above the maximum.
    let mut candidates: Vec<f64> = gen_sorted.iter().chain(imp_sorted.iter()).copied().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let top = candidates.last().copied().unwrap_or(0.0);
    candidates.push(top + 1.0);

    let matches_ge = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&s| s < t);

    let mut best_acc = -1.0;
    let mut best_threshold = candidates[0];
    let mut roc = Vec::with_capacity(candidates.len());
    for &t in &candidates {
        let true_match = matches_ge(&gen_sorted, t);
        let false_match = matches_ge(&imp_sorted, t);
        let acc = (true_match + (ni - false_match)) as f64 / (ng + ni) as f64;
        if acc > best_acc {
            best_acc = acc;
            best_threshold = t;
        }
        roc.push(RocPoint {
            threshold: t,
            fmr: false_match as f64 / ni as f64,
            fnmr: (ng - true_match) as f64 / ng as f64,
        });
    }

    let mut fnmr_at_fmr = Vec::with_capacity(fmr_targets.len());
    for &target in fmr_targets {
        let allowed = (target * ni as f64).floor() as usize;
        let entry = if allowed >= ni {
            FnmrAtFmr {
                target,
                fnmr: 0.0,
                achieved_fmr: 1.0,
                threshold: f64::NEG_INFINITY,
                resolution_limited: false,
            }
        } else {
            // Smallest threshold admitting at most `allowed` impostor
            // matches sits just above the (allowed+1)-th largest impostor
            // score; no interpolation.
            let cut = imp_sorted[ni - 1 - allowed];
            let threshold = cut.next_up();
            let false_match = matches_ge(&imp_sorted, threshold);
            let true_match = matches_ge(&gen_sorted, threshold);
            FnmrAtFmr {
                target,
                fnmr: (ng - true_match) as f64 / ng as f64,
                achieved_fmr: false_match as f64 / ni as f64,
                threshold,
                resolution_limited: target > 0.0 && target * (ni as f64) < 1.0,
            }
        };
        fnmr_at_fmr.push(entry);
    }

    VerificationReport {
        accuracy: best_acc,
        best_threshold,
        num_genuine: ng,
        num_impostor: ni,
        roc,
        fnmr_at_fmr,
    }
}
