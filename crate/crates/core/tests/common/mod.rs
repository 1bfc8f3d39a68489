//! Shared builders for the integration and acceptance suites: synthetic
//! multi-domain protocols at desk scale.

#![allow(dead_code)]

use lafr_core::data::{generate_domain, separated_prototypes, EmbeddingSet, SyntheticDomainSpec};
use lafr_core::gcn::{GcnConfig, GcnModel};
use lafr_core::linalg::Mat;
use lafr_core::meta::{DomainBundle, MetaConfig, MetaDomain};
use lafr_core::recognition::{
    pretrain_backbone, Backbone, BackboneConfig, MarginLossKind, RctConfig,
};
use lafr_core::rng::derive_seed;

pub const EMBED_DIM: usize = 16;
pub const GRAPH_K: usize = 10;
pub const TAU: f64 = 0.8;
pub const DISTANCE_THRESHOLD: f64 = 0.3;

/// Clustering protocol: several rotated/rescaled views of one class set.
pub struct ClusterProtocol {
    pub prototypes: Mat,
    pub domains: Vec<EmbeddingSet>,
}

pub fn cluster_domain_spec(tag: &str, rotation: u64, sample: u64) -> SyntheticDomainSpec {
    SyntheticDomainSpec {
        domain_tag: tag.into(),
        num_classes: 12,
        items_per_class: (12, 18),
        rotation_seed: Some(rotation),
        noise_sigma: 0.10,
        contrast_shift: 0.3,
        sample_seed: sample,
    }
}

/// `num_domains` leave-one-out clustering domains over shared prototypes.
/// Prototypes sit close enough that threshold clustering at 0.3 cosine
/// distance bleeds across the nearest class pairs.
pub fn build_cluster_protocol(num_domains: usize, seed: u64) -> ClusterProtocol {
    let prototypes = separated_prototypes(12, EMBED_DIM, 0.62, derive_seed(seed, 1));
    let domains = (0..num_domains)
        .map(|i| {
            let spec = cluster_domain_spec(
                &format!("domain-{i}"),
                derive_seed(seed, 100 + i as u64),
                derive_seed(seed, 200 + i as u64),
            );
            generate_domain(&spec, &prototypes).expect("domain generation")
        })
        .collect();
    ClusterProtocol { prototypes, domains }
}

pub fn bundle_from_sets(sets: &[&EmbeddingSet], k: usize) -> DomainBundle {
    let domains: Vec<MetaDomain> = sets
        .iter()
        .map(|s| MetaDomain::from_set(s, k).expect("meta domain"))
        .collect();
    DomainBundle::new(domains).expect("bundle")
}

pub fn desk_gcn(seed: u64) -> GcnModel {
    GcnModel::init(&GcnConfig {
        input_dim: EMBED_DIM,
        hidden_dims: vec![32],
        seed,
    })
    .expect("gcn init")
}

pub fn desk_meta_config(max_iter: usize, seed: u64) -> MetaConfig {
    MetaConfig {
        max_iter,
        seed,
        ..MetaConfig::default()
    }
}

/// Recognition protocol: a pre-trained backbone from a base domain plus a
/// shifted target domain with disjoint adaptation/test identity ranges.
pub struct RecognitionProtocol {
    pub theta0: Backbone,
    pub base_set: EmbeddingSet,
    pub adapt_set: EmbeddingSet,
    pub test_set: EmbeddingSet,
}

pub const RAW_DIM: usize = 16;
pub const BACKBONE_EMBED_DIM: usize = 12;
pub const ADAPT_CLASSES: usize = 12;
pub const TEST_CLASSES: usize = 16;
const BASE_CLASSES: usize = 24;
const TOTAL_PROTOTYPES: usize = ADAPT_CLASSES + TEST_CLASSES + BASE_CLASSES;

fn slice_prototypes(all: &Mat, start: usize, count: usize) -> Mat {
    let mut out = Mat::zeros(count, all.cols());
    for i in 0..count {
        out.row_mut(i).copy_from_slice(all.row(start + i));
    }
    out
}

pub fn pretrain_config(seed: u64) -> RctConfig {
    RctConfig {
        loss_kind: MarginLossKind::AmSoftmax,
        gamma: 30.0,
        margin: 0.35,
        lambda: 0.0,
        lr: 0.02,
        epochs: 150,
        batch_size: 32,
        min_class_size: 1,
        seed,
    }
}

pub fn adapt_config(seed: u64) -> RctConfig {
    RctConfig {
        loss_kind: MarginLossKind::Circle,
        gamma: 32.0,
        margin: 0.25,
        lambda: 0.1,
        lr: 0.08,
        epochs: 400,
        batch_size: 512,
        min_class_size: 1,
        seed,
    }
}

/// Build the full recognition protocol for one seed: pre-train on the base
/// domain, then emit the shifted target's adaptation and test splits.
pub fn build_recognition_protocol(seed: u64) -> RecognitionProtocol {
    build_recognition_protocol_with(seed, 6, false)
}

/// Same protocol with a chosen adaptation-set size per class. With
/// `related_test` the test identities lean toward adaptation identities
/// (one shared population); otherwise they are independent.
pub fn build_recognition_protocol_with(
    seed: u64,
    adapt_items: usize,
    related_test: bool,
) -> RecognitionProtocol {
    let prototypes =
        separated_prototypes(TOTAL_PROTOTYPES, RAW_DIM, 0.45, derive_seed(seed, 11));

    let base_spec = SyntheticDomainSpec {
        domain_tag: "base".into(),
        num_classes: BASE_CLASSES,
        items_per_class: (12, 12),
        rotation_seed: None,
        noise_sigma: 0.08,
        contrast_shift: 0.0,
        sample_seed: derive_seed(seed, 21),
    };
    let base_protos = slice_prototypes(&prototypes, ADAPT_CLASSES + TEST_CLASSES, BASE_CLASSES);
    let base_set = generate_domain(&base_spec, &base_protos).expect("base domain");
    let (theta0, _) = pretrain_backbone(
        &BackboneConfig {
            input_dim: RAW_DIM,
            hidden_dim: 32,
            embed_dim: BACKBONE_EMBED_DIM,
            seed: derive_seed(seed, 31),
        },
        &base_set.to_mat(),
        base_set.labels().unwrap(),
        &pretrain_config(derive_seed(seed, 41)),
    )
    .expect("pretrain");

    let rotation = derive_seed(seed, 51);
    let adapt_spec = SyntheticDomainSpec {
        domain_tag: "target-adapt".into(),
        num_classes: ADAPT_CLASSES,
        items_per_class: (adapt_items, adapt_items),
        rotation_seed: Some(rotation),
        noise_sigma: 0.22,
        contrast_shift: 1.4,
        sample_seed: derive_seed(seed, 61),
    };
    let adapt_protos = slice_prototypes(&prototypes, 0, ADAPT_CLASSES);
    let adapt_set = generate_domain(&adapt_spec, &adapt_protos).expect("adapt domain");

    let test_spec = SyntheticDomainSpec {
        domain_tag: "target-test".into(),
        num_classes: TEST_CLASSES,
        items_per_class: (8, 8),
        rotation_seed: Some(rotation),
        noise_sigma: 0.22,
        contrast_shift: 1.4,
        sample_seed: derive_seed(seed, 71),
    };
    // With related_test, test identities are fresh but lean toward the
    // adaptation identities, the way unseen subjects share appearance
    // statistics with the population the adapter saw.
    let fresh = slice_prototypes(&prototypes, ADAPT_CLASSES, TEST_CLASSES);
    let test_protos = if related_test {
        let mut protos = Mat::zeros(TEST_CLASSES, RAW_DIM);
        for j in 0..TEST_CLASSES {
            let parent = prototypes.row(j % ADAPT_CLASSES);
            let row = protos.row_mut(j);
            for ((t, &p), &q) in row.iter_mut().zip(parent).zip(fresh.row(j)) {
                *t = 0.75 * p + 0.66 * q;
            }
            let norm = lafr_core::linalg::l2_norm(row);
            for t in row.iter_mut() {
                *t /= norm;
            }
        }
        protos
    } else {
        fresh
    };
    let test_set = generate_domain(&test_spec, &test_protos).expect("test domain");

    RecognitionProtocol {
        theta0,
        base_set,
        adapt_set,
        test_set,
    }
}

/// Every unordered pair of the set, labeled genuine/impostor from GT.
pub fn exhaustive_pairs(labels: &[u32]) -> Vec<lafr_core::recognition::VerificationPair> {
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            pairs.push(lafr_core::recognition::VerificationPair {
                a: i,
                b: j,
                genuine: labels[i] == labels[j],
            });
        }
    }
    pairs
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
