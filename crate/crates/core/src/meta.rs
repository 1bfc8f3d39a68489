//! Meta-training for the confidence GCN.
//!
//! Each outer iteration holds one labeled domain out as meta-test, takes an
//! inner gradient step on the remaining domains, evaluates the stepped model
//! on the held-out domain, and updates the parameters from the combined
//! gradient. The meta-test gradient is first-order: it is evaluated at the
//! stepped parameters without differentiating through the inner step.

use crate::error::{LafrError, Result};
use crate::gcn::{gcn_backward, GcnModel};
use crate::graph::KnnGraph;
use crate::linalg::Mat;
use crate::params::ParamVector;
use crate::rng::CounterRng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner-loop step size.
    pub alpha: f64,
    /// Outer-loop step size.
    pub beta: f64,
    /// Meta-test loss weight.
    pub xi: f64,
    pub max_iter: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.1,
            beta: 0.1,
            xi: 1.0,
            max_iter: 2000,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(LafrError::Config(format!(
                "alpha and beta must be positive, got alpha={}, beta={}",
                self.alpha, self.beta
            )));
        }
        if self.xi < 0.0 {
            return Err(LafrError::Config(format!("xi must be >= 0, got {}", self.xi)));
        }
        if self.max_iter == 0 {
            return Err(LafrError::Config("max_iter must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LafrError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// One labeled domain prepared for GCN training.
#[derive(Debug, Clone)]
pub struct MetaDomain {
    pub tag: String,
    pub features: Mat,
    pub graph: KnnGraph,
    /// Ground-truth confidences.
    pub target: Vec<f64>,
}

impl MetaDomain {
    pub fn from_labeled_features(tag: &str, features: Mat, labels: &[u32], k: usize) -> Result<Self> {
        let graph = crate::graph::build_knn_graph_from_mat(&features, k)?;
        let target = crate::graph::ground_truth_confidence(&graph, labels)?;
        Ok(MetaDomain {
            tag: tag.to_string(),
            features,
            graph,
            target,
        })
    }

    pub fn from_set(set: &crate::data::EmbeddingSet, k: usize) -> Result<Self> {
        let labels = set.labels().ok_or_else(|| {
            LafrError::InvalidLabeling(format!("domain {} has no labels", set.domain_tag()))
        })?;
        Self::from_labeled_features(set.domain_tag(), set.to_mat(), labels, k)
    }
}

/// Labeled domains available for meta-training. At least two are required so
/// one can always be held out.
#[derive(Debug, Clone)]
pub struct DomainBundle {
    domains: Vec<MetaDomain>,
}

impl DomainBundle {
    pub fn new(domains: Vec<MetaDomain>) -> Result<Self> {
        if domains.len() < 2 {
            return Err(LafrError::InsufficientDomains {
                needed: 2,
                got: domains.len(),
            });
        }
        Ok(DomainBundle { domains })
    }

    pub fn domains(&self) -> &[MetaDomain] {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }
}

/// Hold one domain out uniformly at random; the rest become meta-train.
pub fn split_meta<'a>(
    bundle: &'a DomainBundle,
    rng: &mut CounterRng,
) -> (Vec<&'a MetaDomain>, &'a MetaDomain) {
    let held = rng.next_below(bundle.len() as u64) as usize;
    let train = bundle
        .domains
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != held)
        .map(|(_, d)| d)
        .collect();
    (train, &bundle.domains[held])
}

#[derive(Debug, Clone, Copy)]
pub struct MetaStepDiagnostics {
    pub loss_mtr: f64,
    pub loss_mte: f64,
}

/// Average loss and gradient over a group of domains.
fn domains_backward(model: &GcnModel, domains: &[&MetaDomain]) -> Result<(f64, ParamVector)> {
    let mut total_loss = 0.0;
    let mut total_grad = ParamVector::zeros(model.num_params());
    for dom in domains {
        let (loss, grad) = gcn_backward(model, &dom.graph, &dom.features, &dom.target)?;
        total_loss += loss;
        total_grad.add_scaled(&grad, 1.0);
    }
    let scale = 1.0 / domains.len() as f64;
    total_grad.scale(scale);
    Ok((total_loss * scale, total_grad))
}

/// One meta-optimization step. The caller owns the momentum buffer so the
/// outer loop can keep it across iterations.
pub fn meta_step(
    model: &mut GcnModel,
    momentum_buf: &mut ParamVector,
    meta_train: &[&MetaDomain],
    meta_test: &MetaDomain,
    config: &MetaConfig,
) -> Result<MetaStepDiagnostics> {
    let (loss_mtr, grad_mtr) = domains_backward(model, meta_train)?;
    if !loss_mtr.is_finite() {
        return Err(LafrError::Numeric(format!(
            "meta-train loss is not finite: {loss_mtr}"
        )));
    }

    // Inner step on a detached copy of the parameters.
    let mut stepped = model.to_params();
    stepped.add_scaled(&grad_mtr, -config.alpha);
    let stepped_model = model.with_params(&stepped)?;
    let (loss_mte, grad_mte) =
        gcn_backward(&stepped_model, &meta_test.graph, &meta_test.features, &meta_test.target)?;
    if !loss_mte.is_finite() {
        return Err(LafrError::Numeric(format!(
            "meta-test loss is not finite: {loss_mte}"
        )));
    }

    let mut direction = grad_mtr;
    direction.add_scaled(&grad_mte, config.xi);
    momentum_buf.scale(config.momentum);
    momentum_buf.add_scaled(&direction, 1.0);

    let mut params = model.to_params();
    params.add_scaled(momentum_buf, -config.beta);
    model.set_params(&params)?;
    Ok(MetaStepDiagnostics { loss_mtr, loss_mte })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub train: f64,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss_mtr,loss_mte\n");
        for r in &self.records {
            match r.test {
                Some(t) => out.push_str(&format!("{},{:.17},{:.17}\n", r.iter, r.train, t)),
                None => out.push_str(&format!("{},{:.17},\n", r.iter, r.train)),
            }
        }
        out
    }
}

/// Full meta-training loop: fresh random split per iteration, deterministic
/// under the config seed.
pub fn train_meta_gcn(
    bundle: &DomainBundle,
    model: GcnModel,
    config: &MetaConfig,
) -> Result<(GcnModel, LossHistory)> {
    config.validate()?;
    let mut model = model;
    let mut rng = CounterRng::new(config.seed);
    let mut momentum_buf = ParamVector::zeros(model.num_params());
    let mut history = LossHistory::default();
    for iter in 0..config.max_iter {
        let (meta_train, meta_test) = split_meta(bundle, &mut rng);
        let diag =
            meta_step(&mut model, &mut momentum_buf, &meta_train, meta_test, config).map_err(
                |e| LafrError::Numeric(format!("meta iteration {iter} aborted: {e}")),
            )?;
        history.records.push(LossRecord {
            iter,
            train: diag.loss_mtr,
            test: Some(diag.loss_mte),
        });
    }
    Ok((model, history))
}

/// Conventional baseline: momentum SGD on the pooled loss over all domains,
/// no meta split. Uses `beta`, `momentum`, and `max_iter` from the config.
pub fn train_pooled_gcn(
    domains: &[MetaDomain],
    model: GcnModel,
    config: &MetaConfig,
) -> Result<(GcnModel, LossHistory)> {
    config.validate()?;
    if domains.is_empty() {
        return Err(LafrError::InsufficientDomains { needed: 1, got: 0 });
    }
    let mut model = model;
    let refs: Vec<&MetaDomain> = domains.iter().collect();
    let mut momentum_buf = ParamVector::zeros(model.num_params());
    let mut history = LossHistory::default();
    for iter in 0..config.max_iter {
        let (loss, grad) = domains_backward(&model, &refs)?;
        if !loss.is_finite() {
            return Err(LafrError::Numeric(format!(
                "pooled iteration {iter}: loss is not finite"
            )));
        }
        momentum_buf.scale(config.momentum);
        momentum_buf.add_scaled(&grad, 1.0);
        let mut params = model.to_params();
        params.add_scaled(&momentum_buf, -config.beta);
        model.set_params(&params)?;
        history.records.push(LossRecord {
            iter,
            train: loss,
            test: None,
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, separated_prototypes, SyntheticDomainSpec};
    use crate::gcn::{gcn_forward, gcn_loss, GcnConfig};

    fn toy_domain(tag: &str, rotation: u64, sample: u64) -> MetaDomain {
        let protos = separated_prototypes(5, 8, 0.5, 99);
        let spec = SyntheticDomainSpec {
            domain_tag: tag.into(),
            num_classes: 5,
            items_per_class: (6, 6),
            rotation_seed: Some(rotation),
            noise_sigma: 0.12,
            contrast_shift: 0.1,
            sample_seed: sample,
        };
        let set = generate_domain(&spec, &protos).unwrap();
        MetaDomain::from_set(&set, 4).unwrap()
    }

    fn toy_bundle(n: usize) -> DomainBundle {
        let domains = (0..n)
            .map(|i| toy_domain(&format!("d{i}"), 100 + i as u64, 200 + i as u64))
            .collect();
        DomainBundle::new(domains).unwrap()
    }

    #[test]
    fn one_domain_is_insufficient() {
        let domains = vec![toy_domain("a", 1, 2)];
        assert!(matches!(
            DomainBundle::new(domains),
            Err(LafrError::InsufficientDomains { .. })
        ));
    }

    #[test]
    fn two_domains_force_the_split() {
        let bundle = toy_bundle(2);
        let mut rng = CounterRng::new(0);
        let (train, _test) = split_meta(&bundle, &mut rng);
        assert_eq!(train.len(), 1);
    }

    #[test]
    fn split_is_deterministic_under_seed() {
        let bundle = toy_bundle(4);
        let mut a = CounterRng::new(5);
        let mut b = CounterRng::new(5);
        for _ in 0..20 {
            let (_, ta) = split_meta(&bundle, &mut a);
            let (_, tb) = split_meta(&bundle, &mut b);
            assert_eq!(ta.tag, tb.tag);
        }
    }

    #[test]
    fn split_frequencies_are_uniform() {
        let bundle = toy_bundle(3);
        let mut rng = CounterRng::new(17);
        let mut counts = [0u32; 3];
        for _ in 0..10_000 {
            let (_, test) = split_meta(&bundle, &mut rng);
            let idx = bundle
                .domains()
                .iter()
                .position(|d| d.tag == test.tag)
                .unwrap();
            counts[idx] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn xi_zero_reduces_to_momentum_sgd_on_meta_train() {
        let bundle = toy_bundle(2);
        let model = GcnModel::init(&GcnConfig::new(8, 3)).unwrap();
        let config = MetaConfig {
            xi: 0.0,
            max_iter: 1,
            momentum: 0.0,
            ..Default::default()
        };
        let mut meta_model = model.clone();
        let mut buf = ParamVector::zeros(model.num_params());
        let (train, test) = split_meta(&bundle, &mut CounterRng::new(config.seed));
        meta_step(&mut meta_model, &mut buf, &train, test, &config).unwrap();

        // Plain SGD step on the same meta-train selection.
        let (_, grad) = gcn_backward(&model, &train[0].graph, &train[0].features, &train[0].target)
            .unwrap();
        let mut want = model.to_params();
        want.add_scaled(&grad, -config.beta);
        assert_eq!(meta_model.to_params(), want);
    }

    #[test]
    fn tiny_alpha_matches_both_gradients_at_phi() {
        // With alpha pushed to the underflow floor the stepped parameters
        // equal the originals, so the update direction must equal
        // grad_mtr + xi * grad_mte both evaluated at phi.
        let bundle = toy_bundle(2);
        let model = GcnModel::init(&GcnConfig::new(8, 4)).unwrap();
        let (train, test) = split_meta(&bundle, &mut CounterRng::new(1));
        let (_, g_mtr) = gcn_backward(&model, &train[0].graph, &train[0].features, &train[0].target)
            .unwrap();
        let (_, g_mte) =
            gcn_backward(&model, &test.graph, &test.features, &test.target).unwrap();

        let config = MetaConfig {
            alpha: 1e-300,
            xi: 1.0,
            max_iter: 1,
            momentum: 0.0,
            ..Default::default()
        };
        let mut stepped = model.clone();
        let mut buf = ParamVector::zeros(model.num_params());
        meta_step(&mut stepped, &mut buf, &train, test, &config).unwrap();

        let mut want = model.to_params();
        let mut dir = g_mtr.clone();
        dir.add_scaled(&g_mte, config.xi);
        want.add_scaled(&dir, -config.beta);
        let got = stepped.to_params();
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn inner_machinery_does_not_mutate_caller_model() {
        let bundle = toy_bundle(3);
        let model = GcnModel::init(&GcnConfig::new(8, 7)).unwrap();
        let before = model.to_params();
        let (train, test) = split_meta(&bundle, &mut CounterRng::new(2));
        let _ = domains_backward(&model, &train).unwrap();
        let _ = gcn_backward(&model, &test.graph, &test.features, &test.target).unwrap();
        assert_eq!(model.to_params(), before);
    }

    #[test]
    fn max_iter_one_runs_exactly_one_step() {
        let bundle = toy_bundle(2);
        let model = GcnModel::init(&GcnConfig::new(8, 5)).unwrap();
        let config = MetaConfig {
            max_iter: 1,
            ..Default::default()
        };
        let (_, history) = train_meta_gcn(&bundle, model, &config).unwrap();
        assert_eq!(history.records.len(), 1);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let bundle = toy_bundle(3);
        let config = MetaConfig {
            max_iter: 15,
            ..Default::default()
        };
        let run = |seed| {
            let model = GcnModel::init(&GcnConfig::new(8, seed)).unwrap();
            train_meta_gcn(&bundle, model, &config).unwrap().0.to_params()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn losses_stay_finite_and_meta_training_learns() {
        let bundle = toy_bundle(2);
        let model = GcnModel::init(&GcnConfig::new(8, 21)).unwrap();
        let config = MetaConfig {
            max_iter: 200,
            ..Default::default()
        };
        let holdout = toy_domain("holdout", 900, 901);
        let init_pred = gcn_forward(&model, &holdout.graph, &holdout.features).unwrap();
        let init_loss = gcn_loss(&init_pred, &holdout.target);
        let (trained, history) = train_meta_gcn(&bundle, model, &config).unwrap();
        for r in &history.records {
            assert!(r.train.is_finite());
            assert!(r.test.unwrap().is_finite());
        }
        let pred = gcn_forward(&trained, &holdout.graph, &holdout.features).unwrap();
        let final_loss = gcn_loss(&pred, &holdout.target);
        assert!(
            final_loss < init_loss,
            "held-out loss did not improve: {init_loss} -> {final_loss}"
        );
    }
}
