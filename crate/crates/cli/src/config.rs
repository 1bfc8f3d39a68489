//! Experiment configuration: one JSON file drives every command. Unknown
//! keys are rejected so typos fail fast, and `--set key.path=value` overrides
//! individual entries before validation.

use anyhow::{anyhow, bail, Context, Result};
use lafr_core::cluster::LinkingRule;
use lafr_core::data::SyntheticDomainSpec;
use lafr_core::federated::AnchorMode;
use lafr_core::meta::MetaConfig;
use lafr_core::recognition::{BackboneConfig, MarginLossKind, RctConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainRole {
    /// Pre-training data for the backbone.
    Base,
    /// Labeled domains for meta-clustering training.
    Train,
    /// The unlabeled-by-convention target the pipeline adapts to.
    Adapt,
    /// Held-out verification split of the target environment.
    Test,
    /// Federated client shard.
    Client,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub tag: String,
    pub role: DomainRole,
    pub num_classes: usize,
    pub items_per_class: (usize, usize),
    pub rotation_seed: Option<u64>,
    pub noise_sigma: f64,
    pub contrast_shift: f64,
    pub sample_seed: u64,
    /// Half-open range into the shared prototype matrix; defaults to
    /// [0, num_classes).
    #[serde(default)]
    pub class_range: Option<(usize, usize)>,
}

impl DomainEntry {
    pub fn spec(&self) -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            domain_tag: self.tag.clone(),
            num_classes: self.num_classes,
            items_per_class: self.items_per_class,
            rotation_seed: self.rotation_seed,
            noise_sigma: self.noise_sigma,
            contrast_shift: self.contrast_shift,
            sample_seed: self.sample_seed,
        }
    }

    pub fn range(&self) -> (usize, usize) {
        self.class_range.unwrap_or((0, self.num_classes))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dim: usize,
    pub num_prototypes: usize,
    /// Maximum pairwise cosine allowed between prototypes.
    pub prototype_max_cos: f64,
    pub prototype_seed: u64,
    pub domains: Vec<DomainEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcnSection {
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    pub alpha: f64,
    pub beta: f64,
    pub xi: f64,
    pub max_iter: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl MetaSection {
    pub fn to_config(&self) -> MetaConfig {
        MetaConfig {
            alpha: self.alpha,
            beta: self.beta,
            xi: self.xi,
            max_iter: self.max_iter,
            momentum: self.momentum,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub tau: f64,
    pub linking: LinkingRule,
    pub distance_threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub backbone_seed: u64,
    pub loss_kind: MarginLossKind,
    pub gamma: f64,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl PretrainSection {
    pub fn backbone_config(&self, input_dim: usize) -> BackboneConfig {
        BackboneConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            seed: self.backbone_seed,
        }
    }

    pub fn train_config(&self) -> RctConfig {
        RctConfig {
            loss_kind: self.loss_kind,
            gamma: self.gamma,
            margin: self.margin,
            lambda: 0.0,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            min_class_size: 1,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RctSection {
    pub loss_kind: MarginLossKind,
    pub gamma: f64,
    pub margin: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub min_class_size: usize,
    pub seed: u64,
}

impl RctSection {
    pub fn to_config(&self) -> RctConfig {
        RctConfig {
            loss_kind: self.loss_kind,
            gamma: self.gamma,
            margin: self.margin,
            lambda: self.lambda,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            min_class_size: self.min_class_size,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedSection {
    pub rounds: usize,
    pub anchor: AnchorMode,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub fmr_targets: Vec<f64>,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    pub pair_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub graph: GraphSection,
    pub gcn: GcnSection,
    pub meta: MetaSection,
    pub cluster: ClusterSection,
    pub pretrain: PretrainSection,
    pub rct: RctSection,
    pub federated: FederatedSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("config {} is not valid JSON", path.display()))?;
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }
        let mut config: RunConfig = serde_json::from_value(value)
            .with_context(|| format!("config {} failed validation", path.display()))?;
        if let Some(seed) = seed {
            config.remap_seeds(seed);
        }
        config.validate()?;
        Ok(config)
    }

    /// Replace every section seed with a stream derived from one master
    /// seed, so `--seed` reproducibly re-randomizes the whole run.
    fn remap_seeds(&mut self, master: u64) {
        use lafr_core::rng::derive_seed;
        self.data.prototype_seed = derive_seed(master, 1);
        for (i, d) in self.data.domains.iter_mut().enumerate() {
            if d.rotation_seed.is_some() {
                d.rotation_seed = Some(derive_seed(master, 100 + i as u64));
            }
            d.sample_seed = derive_seed(master, 200 + i as u64);
        }
        self.gcn.seed = derive_seed(master, 2);
        self.meta.seed = derive_seed(master, 3);
        self.pretrain.backbone_seed = derive_seed(master, 4);
        self.pretrain.seed = derive_seed(master, 5);
        self.rct.seed = derive_seed(master, 6);
        self.federated.seed = derive_seed(master, 7);
        self.eval.pair_seed = derive_seed(master, 8);
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.dim < 2 {
            bail!("data.dim must be >= 2");
        }
        if self.data.domains.is_empty() {
            bail!("data.domains must not be empty");
        }
        for d in &self.data.domains {
            d.spec()
                .validate()
                .with_context(|| format!("domain {}", d.tag))?;
            let (start, end) = d.range();
            if end <= start || end > self.data.num_prototypes {
                bail!(
                    "domain {}: class_range [{start}, {end}) outside prototype pool of {}",
                    d.tag,
                    self.data.num_prototypes
                );
            }
            if end - start != d.num_classes {
                bail!(
                    "domain {}: class_range spans {} classes but num_classes is {}",
                    d.tag,
                    end - start,
                    d.num_classes
                );
            }
        }
        let mut tags: Vec<&str> = self.data.domains.iter().map(|d| d.tag.as_str()).collect();
        tags.sort_unstable();
        tags.dedup();
        if tags.len() != self.data.domains.len() {
            bail!("domain tags must be unique");
        }
        self.meta.to_config().validate().map_err(|e| anyhow!("meta: {e}"))?;
        self.rct.to_config().validate().map_err(|e| anyhow!("rct: {e}"))?;
        self.pretrain
            .train_config()
            .validate()
            .map_err(|e| anyhow!("pretrain: {e}"))?;
        if self.graph.k == 0 {
            bail!("graph.k must be >= 1");
        }
        if self.federated.rounds == 0 {
            bail!("federated.rounds must be >= 1");
        }
        if self.eval.genuine_pairs == 0 || self.eval.impostor_pairs == 0 {
            bail!("eval needs at least one genuine and one impostor pair");
        }
        Ok(())
    }

    pub fn domains_with_role(&self, role: DomainRole) -> Vec<&DomainEntry> {
        self.data.domains.iter().filter(|d| d.role == role).collect()
    }

    pub fn single_domain(&self, role: DomainRole, what: &str) -> Result<&DomainEntry> {
        let found = self.domains_with_role(role);
        match found.len() {
            1 => Ok(found[0]),
            0 => bail!("config declares no {what} domain"),
            n => bail!("config declares {n} {what} domains, expected exactly one"),
        }
    }
}

/// Apply one `key.path=value` override onto the raw JSON. Array elements are
/// addressed by index; values parse as JSON first and fall back to strings.
fn apply_override(root: &mut serde_json::Value, entry: &str) -> Result<()> {
    let (path, raw_value) = entry
        .split_once('=')
        .ok_or_else(|| anyhow!("override '{entry}' must look like key.path=value"))?;
    let value: serde_json::Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if last {
            match cursor {
                serde_json::Value::Object(map) => {
                    map.insert(segment.to_string(), value);
                    return Ok(());
                }
                serde_json::Value::Array(arr) => {
                    let idx: usize = segment
                        .parse()
                        .map_err(|_| anyhow!("override '{entry}': '{segment}' is not an index"))?;
                    let slot = arr
                        .get_mut(idx)
                        .ok_or_else(|| anyhow!("override '{entry}': index {idx} out of range"))?;
                    *slot = value;
                    return Ok(());
                }
                _ => bail!("override '{entry}': cannot set '{segment}' on a scalar"),
            }
        }
        cursor = match cursor {
            serde_json::Value::Object(map) => map
                .get_mut(*segment)
                .ok_or_else(|| anyhow!("override '{entry}': unknown key '{segment}'"))?,
            serde_json::Value::Array(arr) => {
                let idx: usize = segment
                    .parse()
                    .map_err(|_| anyhow!("override '{entry}': '{segment}' is not an index"))?;
                arr.get_mut(idx)
                    .ok_or_else(|| anyhow!("override '{entry}': index {idx} out of range"))?
            }
            _ => bail!("override '{entry}': '{segment}' descends into a scalar"),
        };
    }
    Ok(())
}
