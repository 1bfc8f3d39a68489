//! Command implementations. Every command reads and writes only declared
//! files under the output directory, writes atomically, and is bit-identical
//! on rerun with the same config and inputs.

use crate::config::{DomainRole, RunConfig};
use anyhow::{anyhow, bail, Context, Result};
use lafr_core::cluster::{
    cluster_score, distance_baseline_from_mat, extract_pseudo_labels, ClusterMethod,
    PseudoLabeling,
};
use lafr_core::data::{generate_domain, separated_prototypes, EmbeddingSet};
use lafr_core::federated::{run_dual_loop, Client, ClientEval, FederationConfig};
use lafr_core::gcn::{gcn_forward, GcnConfig, GcnModel};
use lafr_core::graph::build_knn_graph_from_mat;
use lafr_core::linalg::Mat;
use lafr_core::meta::{train_meta_gcn, train_pooled_gcn, DomainBundle, MetaDomain};
use lafr_core::recognition::{
    evaluate_verification, finetune_baseline, pairs_to_csv, pretrain_backbone, rct_adapt,
    sample_verification_pairs, Backbone, VerificationReport,
};
use lafr_core::rng::derive_seed;
use std::fs;
use std::path::{Path, PathBuf};

pub struct Workspace {
    pub out: PathBuf,
}

impl Workspace {
    pub fn new(out: &Path) -> Workspace {
        Workspace { out: out.to_path_buf() }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn domain_file(&self, tag: &str) -> PathBuf {
        self.path(&format!("data/{tag}.emb"))
    }

    fn pretrained_file(&self) -> PathBuf {
        self.path("models/pretrained.ckpt")
    }

    fn gcn_file(&self, method: ClusterMethod) -> PathBuf {
        self.path(&format!("models/gcn-{method}.ckpt"))
    }

    fn labeling_file(&self, method: ClusterMethod) -> PathBuf {
        self.path(&format!("cluster/{method}.csv"))
    }

    fn require(&self, path: PathBuf, producer: &str) -> Result<PathBuf> {
        if !path.exists() {
            bail!(
                "missing {}: run `lafr {producer}` against this output directory first",
                path.display()
            );
        }
        Ok(path)
    }

    fn load_domain(&self, tag: &str, producer: &str) -> Result<EmbeddingSet> {
        let path = self.require(self.domain_file(tag), producer)?;
        EmbeddingSet::load(&path).with_context(|| format!("loading {}", path.display()))
    }

    fn load_pretrained(&self) -> Result<Backbone> {
        let path = self.require(self.pretrained_file(), "gen")?;
        Backbone::load(&path).with_context(|| format!("loading {}", path.display()))
    }
}

fn write_text_atomic(path: &Path, content: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn prototype_slice(config: &RunConfig, range: (usize, usize)) -> Mat {
    let all = separated_prototypes(
        config.data.num_prototypes,
        config.data.dim,
        config.data.prototype_max_cos,
        config.data.prototype_seed,
    );
    let (start, end) = range;
    let mut out = Mat::zeros(end - start, all.cols());
    for i in start..end {
        out.row_mut(i - start).copy_from_slice(all.row(i));
    }
    out
}

/// `gen`: materialize every configured domain and pre-train the backbone on
/// the base domain.
pub fn cmd_gen(config: &RunConfig, ws: &Workspace) -> Result<()> {
    for entry in &config.data.domains {
        let protos = prototype_slice(config, entry.range());
        let set = generate_domain(&entry.spec(), &protos)
            .with_context(|| format!("generating domain {}", entry.tag))?;
        let path = ws.domain_file(&entry.tag);
        set.save(&path)?;
        println!("wrote {} ({} rows)", path.display(), set.n());
    }

    let base = config.single_domain(DomainRole::Base, "base")?;
    let base_set = ws.load_domain(&base.tag, "gen")?;
    let labels = base_set
        .labels()
        .ok_or_else(|| anyhow!("base domain {} has no labels", base.tag))?;
    let (backbone, log) = pretrain_backbone(
        &config.pretrain.backbone_config(config.data.dim),
        &base_set.to_mat(),
        labels,
        &config.pretrain.train_config(),
    )?;
    backbone.save(&ws.pretrained_file())?;
    write_text_atomic(&ws.path("logs/pretrain.csv"), &log.to_csv())?;
    println!("wrote {}", ws.pretrained_file().display());
    Ok(())
}

fn embedded_meta_domains(
    config: &RunConfig,
    ws: &Workspace,
    backbone: &Backbone,
) -> Result<Vec<MetaDomain>> {
    let train_entries = config.domains_with_role(DomainRole::Train);
    if train_entries.len() < 2 {
        bail!(
            "meta-clustering needs at least 2 domains with role \"train\", config has {}",
            train_entries.len()
        );
    }
    let mut domains = Vec::with_capacity(train_entries.len());
    for entry in train_entries {
        let set = ws.load_domain(&entry.tag, "gen")?;
        let labels = set
            .labels()
            .ok_or_else(|| anyhow!("train domain {} has no labels", entry.tag))?;
        let embedded = backbone.embed(&set.to_mat())?;
        domains.push(MetaDomain::from_labeled_features(
            &entry.tag,
            embedded,
            labels,
            config.graph.k,
        )?);
    }
    Ok(domains)
}

/// `train-gcn`: fit the confidence model on the embedded train domains,
/// either with the episodic meta loop or with pooled conventional SGD.
pub fn cmd_train_gcn(config: &RunConfig, ws: &Workspace, method: ClusterMethod) -> Result<()> {
    if method == ClusterMethod::Distance {
        bail!("the distance baseline has no trained model; use `lafr cluster --method distance`");
    }
    let backbone = ws.load_pretrained()?;
    let domains = embedded_meta_domains(config, ws, &backbone)?;
    let model = GcnModel::init(&GcnConfig {
        input_dim: config.pretrain.embed_dim,
        hidden_dims: config.gcn.hidden_dims.clone(),
        seed: config.gcn.seed,
    })?;
    let meta_config = config.meta.to_config();
    let (trained, history) = match method {
        ClusterMethod::MetaGcn => {
            let bundle = DomainBundle::new(domains)?;
            train_meta_gcn(&bundle, model, &meta_config)?
        }
        ClusterMethod::Gcn => train_pooled_gcn(&domains, model, &meta_config)?,
        ClusterMethod::Distance => unreachable!(),
    };
    trained.save(&ws.gcn_file(method))?;
    write_text_atomic(&ws.path(&format!("logs/train-gcn-{method}.csv")), &history.to_csv())?;
    println!("wrote {}", ws.gcn_file(method).display());
    Ok(())
}

fn cluster_adapt_set(
    config: &RunConfig,
    ws: &Workspace,
    method: ClusterMethod,
) -> Result<(EmbeddingSet, PseudoLabeling)> {
    let adapt = config.single_domain(DomainRole::Adapt, "adapt")?;
    let set = ws.load_domain(&adapt.tag, "gen")?;
    let backbone = ws.load_pretrained()?;
    let embedded = backbone.embed(&set.to_mat())?;
    let labeling = match method {
        ClusterMethod::Distance => {
            distance_baseline_from_mat(&embedded, config.cluster.distance_threshold)
        }
        _ => {
            let path = ws.require(ws.gcn_file(method), &format!("train-gcn --method {method}"))?;
            let model = GcnModel::load(&path)?;
            let graph = build_knn_graph_from_mat(&embedded, config.graph.k)?;
            let confidences = gcn_forward(&model, &graph, &embedded)?;
            extract_pseudo_labels(
                &graph,
                &confidences,
                config.cluster.tau,
                config.cluster.linking,
                method,
            )?
        }
    };
    Ok((set, labeling))
}

/// `cluster`: pseudo-label the adaptation domain and score against its
/// ground truth.
pub fn cmd_cluster(config: &RunConfig, ws: &Workspace, method: ClusterMethod) -> Result<()> {
    let (set, labeling) = cluster_adapt_set(config, ws, method)?;
    let csv = labeling.to_csv(set.source_ids())?;
    write_text_atomic(&ws.labeling_file(method), &csv)?;
    println!(
        "wrote {} ({} clusters over {} rows)",
        ws.labeling_file(method).display(),
        labeling.num_clusters,
        labeling.n()
    );

    if let Some(truth) = set.labels() {
        let score = cluster_score(&labeling, truth);
        let metrics = format!(
            "method,num_clusters,pairwise_precision,pairwise_recall,pairwise_f,bcubed_precision,bcubed_recall,bcubed_f\n{},{},{:.17},{:.17},{:.17},{:.17},{:.17},{:.17}\n",
            method,
            labeling.num_clusters,
            score.pairwise.precision,
            score.pairwise.recall,
            score.pairwise.f,
            score.bcubed.precision,
            score.bcubed.recall,
            score.bcubed.f,
        );
        let path = ws.path(&format!("cluster/{method}_metrics.csv"));
        write_text_atomic(&path, &metrics)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    GroundTruth,
    Clustered(ClusterMethod),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptTechnique {
    Rct,
    Finetune,
}

pub struct AdaptMethod {
    pub labels: LabelSource,
    pub technique: AdaptTechnique,
}

impl AdaptMethod {
    pub fn parse(s: &str) -> Result<AdaptMethod> {
        let (labels, technique) = s.split_once('+').ok_or_else(|| {
            anyhow!("adapt method '{s}' must look like <labels>+<technique>, e.g. gt+rct")
        })?;
        let labels = match labels {
            "gt" => LabelSource::GroundTruth,
            other => LabelSource::Clustered(other.parse()?),
        };
        let technique = match technique {
            "rct" => AdaptTechnique::Rct,
            "finetune" => AdaptTechnique::Finetune,
            other => bail!("unknown adaptation technique '{other}', expected rct | finetune"),
        };
        Ok(AdaptMethod { labels, technique })
    }

    pub fn tag(&self) -> String {
        let labels = match self.labels {
            LabelSource::GroundTruth => "gt".to_string(),
            LabelSource::Clustered(m) => m.to_string(),
        };
        let technique = match self.technique {
            AdaptTechnique::Rct => "rct",
            AdaptTechnique::Finetune => "finetune",
        };
        format!("{labels}+{technique}")
    }
}

/// Read a labeling CSV back, checking it matches the set's source ids.
fn load_labeling(path: &Path, set: &EmbeddingSet) -> Result<PseudoLabeling> {
    let text = fs::read_to_string(path)?;
    let mut ids = Vec::new();
    let mut raw = Vec::new();
    let mut method = ClusterMethod::MetaGcn;
    let mut tau = 0.0;
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            bail!("{}: line {} malformed", path.display(), i + 1);
        }
        ids.push(fields[0].to_string());
        raw.push(fields[1].parse::<u32>().with_context(|| {
            format!("{}: line {} has a bad cluster id", path.display(), i + 1)
        })?);
        method = fields[2].parse()?;
        tau = fields[3].parse()?;
    }
    if ids.len() != set.n() {
        bail!(
            "{}: {} rows for a set of {}",
            path.display(),
            ids.len(),
            set.n()
        );
    }
    for (got, want) in ids.iter().zip(set.source_ids()) {
        if got != want {
            bail!(
                "{}: labeling row for '{got}' does not match set row '{want}'",
                path.display()
            );
        }
    }
    Ok(PseudoLabeling::from_raw_assignments(&raw, method, tau))
}

/// `adapt`: specialize the pre-trained backbone on the adaptation domain.
pub fn cmd_adapt(config: &RunConfig, ws: &Workspace, method: &AdaptMethod) -> Result<()> {
    let adapt = config.single_domain(DomainRole::Adapt, "adapt")?;
    let set = ws.load_domain(&adapt.tag, "gen")?;
    let backbone = ws.load_pretrained()?;

    let labeling = match method.labels {
        LabelSource::GroundTruth => {
            let truth = set
                .labels()
                .ok_or_else(|| anyhow!("adapt domain {} has no labels for gt mode", adapt.tag))?;
            PseudoLabeling::from_raw_assignments(truth, ClusterMethod::MetaGcn, config.cluster.tau)
        }
        LabelSource::Clustered(m) => {
            let path = ws.require(ws.labeling_file(m), &format!("cluster --method {m}"))?;
            load_labeling(&path, &set)?
        }
    };

    let inputs = set.to_mat();
    let rct_config = config.rct.to_config();
    let (adapted, log) = match method.technique {
        AdaptTechnique::Rct => rct_adapt(&backbone, &inputs, &labeling, &rct_config)?,
        AdaptTechnique::Finetune => finetune_baseline(&backbone, &inputs, &labeling, &rct_config)?,
    };
    let tag = method.tag();
    let path = ws.path(&format!("models/backbone-{tag}.ckpt"));
    adapted.save(&path)?;
    write_text_atomic(&ws.path(&format!("logs/adapt-{tag}.csv")), &log.to_csv())?;
    println!("wrote {}", path.display());
    Ok(())
}

/// `federate`: run the dual loop over the client domains.
pub fn cmd_federate(config: &RunConfig, ws: &Workspace, labels: &LabelSource) -> Result<()> {
    let client_entries = config.domains_with_role(DomainRole::Client);
    if client_entries.is_empty() {
        bail!("config declares no domains with role \"client\"");
    }
    let backbone = ws.load_pretrained()?;

    let gcn_model = match labels {
        LabelSource::Clustered(m @ (ClusterMethod::MetaGcn | ClusterMethod::Gcn)) => {
            let path = ws.require(ws.gcn_file(*m), &format!("train-gcn --method {m}"))?;
            Some(GcnModel::load(&path)?)
        }
        _ => None,
    };

    let mut clients = Vec::with_capacity(client_entries.len());
    for (idx, entry) in client_entries.iter().enumerate() {
        let set = ws.load_domain(&entry.tag, "gen")?;
        let inputs = set.to_mat();
        let pseudo_labels: Vec<u32> = match labels {
            LabelSource::GroundTruth => set
                .labels()
                .ok_or_else(|| anyhow!("client domain {} has no labels", entry.tag))?
                .to_vec(),
            LabelSource::Clustered(m) => {
                let embedded = backbone.embed(&inputs)?;
                match m {
                    ClusterMethod::Distance => {
                        distance_baseline_from_mat(&embedded, config.cluster.distance_threshold)
                            .cluster_id
                    }
                    _ => {
                        let graph = build_knn_graph_from_mat(&embedded, config.graph.k)?;
                        let conf =
                            gcn_forward(gcn_model.as_ref().expect("gcn loaded"), &graph, &embedded)?;
                        extract_pseudo_labels(
                            &graph,
                            &conf,
                            config.cluster.tau,
                            config.cluster.linking,
                            *m,
                        )?
                        .cluster_id
                    }
                }
            }
        };

        // Per-client evaluation split: same domain, fresh samples.
        let eval_spec = lafr_core::data::SyntheticDomainSpec {
            sample_seed: derive_seed(entry.sample_seed, 0x6576616c), // "eval"
            ..entry.spec()
        };
        let protos = prototype_slice(config, entry.range());
        let eval_set = generate_domain(&eval_spec, &protos)?;
        let eval_labels = eval_set.labels().expect("synthetic sets are labeled");
        let pairs = sample_verification_pairs(
            eval_labels,
            config.eval.genuine_pairs,
            config.eval.impostor_pairs,
            derive_seed(config.eval.pair_seed, idx as u64),
        )?;
        clients.push(Client::new(
            &entry.tag,
            inputs,
            pseudo_labels,
            Some(ClientEval {
                inputs: eval_set.to_mat(),
                pairs,
                fmr_targets: config.eval.fmr_targets.clone(),
            }),
        )?);
    }

    let fed_config = FederationConfig {
        rounds: config.federated.rounds,
        rct: config.rct.to_config(),
        anchor_mode: config.federated.anchor,
        seed: config.federated.seed,
    };
    let outcome = run_dual_loop(&backbone, &clients, &fed_config)?;
    write_text_atomic(&ws.path("federate/rounds.csv"), &outcome.records_csv())?;
    for (round, params) in outcome.server_checkpoints.iter().enumerate() {
        let server = backbone.with_params(params)?;
        server.save(&ws.path(&format!("federate/server-round-{round}.ckpt")))?;
    }
    println!(
        "wrote {} and {} server checkpoints",
        ws.path("federate/rounds.csv").display(),
        outcome.server_checkpoints.len()
    );
    Ok(())
}

/// `eval`: verification metrics on the test domain for the pre-trained model
/// and every adapted checkpoint present (or one model via --method).
pub fn cmd_eval(config: &RunConfig, ws: &Workspace, only: Option<&str>) -> Result<()> {
    let test = config.single_domain(DomainRole::Test, "test")?;
    let set = ws.load_domain(&test.tag, "gen")?;
    let labels = set
        .labels()
        .ok_or_else(|| anyhow!("test domain {} has no labels", test.tag))?;
    let pairs = sample_verification_pairs(
        labels,
        config.eval.genuine_pairs,
        config.eval.impostor_pairs,
        config.eval.pair_seed,
    )?;
    write_text_atomic(&ws.path("eval/pairs.csv"), &pairs_to_csv(&pairs, set.source_ids())?)?;

    let mut models: Vec<(String, PathBuf)> = vec![("pretrained".into(), ws.pretrained_file())];
    let models_dir = ws.path("models");
    if models_dir.exists() {
        let mut names: Vec<String> = fs::read_dir(&models_dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.starts_with("backbone-") && n.ends_with(".ckpt"))
            .collect();
        names.sort();
        for name in names {
            let tag = name
                .trim_start_matches("backbone-")
                .trim_end_matches(".ckpt")
                .to_string();
            models.push((tag, models_dir.join(&name)));
        }
    }
    if let Some(only) = only {
        models.retain(|(tag, _)| tag == only);
        if models.is_empty() {
            bail!("no checkpoint matches --method {only}; run `lafr adapt` first");
        }
    }
    if models[0].1 == ws.pretrained_file() {
        ws.require(ws.pretrained_file(), "gen")?;
    }

    let inputs = set.to_mat();
    for (tag, path) in models {
        let backbone = Backbone::load(&path)?;
        let report = evaluate_verification(&backbone, &inputs, &pairs, &config.eval.fmr_targets)?;
        let out = ws.path(&format!("eval/{tag}.json"));
        write_text_atomic(&out, &report.to_json())?;
        println!(
            "wrote {} (accuracy {:.4})",
            out.display(),
            report.accuracy
        );
    }
    Ok(())
}

/// `report`: join the metric files into one summary table.
pub fn cmd_report(_config: &RunConfig, ws: &Workspace) -> Result<()> {
    let mut long_rows: Vec<(String, String, String, String)> = Vec::new();
    let mut text = String::new();

    // Clustering metrics.
    let cluster_dir = ws.path("cluster");
    let mut cluster_lines = Vec::new();
    if cluster_dir.exists() {
        let mut files: Vec<PathBuf> = fs::read_dir(&cluster_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.ends_with("_metrics.csv"))
            })
            .collect();
        files.sort();
        for file in files {
            let content = fs::read_to_string(&file)?;
            let mut lines = content.lines();
            let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
            for line in lines {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != header.len() {
                    continue;
                }
                cluster_lines.push(fields.iter().map(|s| s.to_string()).collect::<Vec<_>>());
                for (k, v) in header.iter().zip(&fields).skip(1) {
                    long_rows.push((
                        "clustering".into(),
                        fields[0].to_string(),
                        k.to_string(),
                        v.to_string(),
                    ));
                }
            }
        }
    }
    text.push_str("== clustering on the adaptation domain ==\n");
    text.push_str(&format!(
        "{:<12} {:>9} {:>11} {:>11}\n",
        "method", "clusters", "pairwise_f", "bcubed_f"
    ));
    for row in &cluster_lines {
        let fp: f64 = row[4].parse().unwrap_or(f64::NAN);
        let fb: f64 = row[7].parse().unwrap_or(f64::NAN);
        text.push_str(&format!("{:<12} {:>9} {:>11.4} {:>11.4}\n", row[0], row[1], fp, fb));
    }

    // Verification metrics.
    let eval_dir = ws.path("eval");
    text.push_str("\n== verification on the test domain ==\n");
    let mut eval_header_written = false;
    if eval_dir.exists() {
        let mut files: Vec<PathBuf> = fs::read_dir(&eval_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        files.sort();
        for file in files {
            let name = file.file_stem().unwrap().to_string_lossy().to_string();
            let report: VerificationReport = serde_json::from_str(&fs::read_to_string(&file)?)
                .with_context(|| format!("parsing {}", file.display()))?;
            if !eval_header_written {
                let mut header = format!("{:<22} {:>9}", "model", "accuracy");
                for entry in &report.fnmr_at_fmr {
                    header.push_str(&format!(" {:>16}", format!("fnmr@{}", entry.target)));
                }
                text.push_str(&header);
                text.push('\n');
                eval_header_written = true;
            }
            let mut line = format!("{:<22} {:>9.4}", name, report.accuracy);
            long_rows.push((
                "verification".into(),
                name.clone(),
                "accuracy".into(),
                format!("{:.17}", report.accuracy),
            ));
            for entry in &report.fnmr_at_fmr {
                line.push_str(&format!(" {:>16.4}", entry.fnmr));
                long_rows.push((
                    "verification".into(),
                    name.clone(),
                    format!("fnmr@{}", entry.target),
                    format!("{:.17}", entry.fnmr),
                ));
            }
            text.push_str(&line);
            text.push('\n');
        }
    }

    // Federated rounds.
    let rounds_path = ws.path("federate/rounds.csv");
    if rounds_path.exists() {
        text.push_str("\n== federated rounds (mean over clients) ==\n");
        text.push_str(&format!("{:<7} {:>9} {:>9}\n", "round", "accuracy", "fnmr"));
        let content = fs::read_to_string(&rounds_path)?;
        let mut by_round: std::collections::BTreeMap<usize, Vec<(f64, f64)>> = Default::default();
        for line in content.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 || fields[2].is_empty() {
                continue;
            }
            let round: usize = fields[0].parse().unwrap_or(0);
            let acc: f64 = fields[2].parse().unwrap_or(f64::NAN);
            let fnmr: f64 = fields[3].parse().unwrap_or(f64::NAN);
            by_round.entry(round).or_default().push((acc, fnmr));
        }
        for (round, vals) in &by_round {
            let acc = vals.iter().map(|v| v.0).sum::<f64>() / vals.len() as f64;
            let fnmr = vals.iter().map(|v| v.1).sum::<f64>() / vals.len() as f64;
            text.push_str(&format!("{:<7} {:>9.4} {:>9.4}\n", round, acc, fnmr));
            long_rows.push((
                "federated".into(),
                format!("round-{round}"),
                "mean_accuracy".into(),
                format!("{acc:.17}"),
            ));
            long_rows.push((
                "federated".into(),
                format!("round-{round}"),
                "mean_fnmr".into(),
                format!("{fnmr:.17}"),
            ));
        }
    }

    let mut csv = String::from("section,name,metric,value\n");
    for (section, name, metric, value) in &long_rows {
        csv.push_str(&format!("{section},{name},{metric},{value}\n"));
    }
    write_text_atomic(&ws.path("report/summary.csv"), &csv)?;
    write_text_atomic(&ws.path("report/summary.txt"), &text)?;
    print!("{text}");
    println!("wrote {}", ws.path("report/summary.csv").display());
    Ok(())
}
