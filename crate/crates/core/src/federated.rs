//! Dual-loop federated adaptation: clients run regularized center transfer
//! on private shards, the server averages only backbone parameters.
//!
//! The simulation is in-process but every client/server exchange crosses an
//! explicit serialized message boundary. The message types physically hold
//! nothing but round numbers, parameter vectors, and metrics; shards, labels,
//! and classifier banks never leave a client.

use crate::error::{LafrError, Result};
use crate::linalg::Mat;
use crate::params::ParamVector;
use crate::recognition::{
    compute_class_centers, evaluate_verification, rct_adapt_anchored, Backbone, ClassifierBank,
    RctConfig, VerificationPair,
};
use crate::rng::derive_seed;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorMode {
    /// Anchor each round's adaptation to the broadcast server model.
    Round,
    /// Anchor every round to the original pre-trained model.
    Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    /// Dual-loop rounds T.
    pub rounds: usize,
    /// Per-round local adaptation settings.
    pub rct: RctConfig,
    pub anchor_mode: AnchorMode,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(LafrError::Config("rounds must be >= 1".into()));
        }
        self.rct.validate()
    }
}

/// Per-client evaluation data; optional, used only for round metrics.
#[derive(Debug, Clone)]
pub struct ClientEval {
    pub inputs: Mat,
    pub pairs: Vec<VerificationPair>,
    pub fmr_targets: Vec<f64>,
}

/// One simulated client: a private shard with cached pseudo labels. Pseudo
/// labels are produced once (clustering on pre-trained embeddings) and reused
/// across rounds.
#[derive(Debug, Clone)]
pub struct Client {
    pub id: String,
    shard: Mat,
    pseudo_labels: Vec<u32>,
    eval: Option<ClientEval>,
}

impl Client {
    pub fn new(id: &str, shard: Mat, pseudo_labels: Vec<u32>, eval: Option<ClientEval>) -> Result<Self> {
        if pseudo_labels.len() != shard.rows() {
            return Err(LafrError::Shape(format!(
                "client {id}: {} pseudo labels for {} shard rows",
                pseudo_labels.len(),
                shard.rows()
            )));
        }
        Ok(Client {
            id: id.to_string(),
            shard,
            pseudo_labels,
            eval,
        })
    }
}

/// Server-to-client broadcast. Carries only the round index and backbone
/// parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerBroadcast {
    pub round: usize,
    pub backbone: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub accuracy: f64,
    pub fnmr: f64,
}

/// Client-to-server update. Carries only the adapted backbone parameters and
/// aggregate metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub round: usize,
    pub client_id: String,
    pub backbone: Vec<f64>,
    pub metrics: Option<RoundMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageDirection {
    ServerToClient,
    ClientToServer,
}

/// A captured boundary crossing, kept for auditability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryMessage {
    pub direction: MessageDirection,
    pub round: usize,
    pub payload_json: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundClientRecord {
    pub round: usize,
    pub client_id: String,
    pub metrics: Option<RoundMetrics>,
}

#[derive(Debug, Clone)]
pub struct DualLoopOutcome {
    /// Server parameters after each round's aggregation.
    pub server_checkpoints: Vec<ParamVector>,
    pub records: Vec<RoundClientRecord>,
    /// Every serialized message that crossed the client/server boundary.
    pub messages: Vec<BoundaryMessage>,
}

impl DualLoopOutcome {
    pub fn records_csv(&self) -> String {
        let mut out = String::from("round,client_id,accuracy,fnmr\n");
        for r in &self.records {
            match r.metrics {
                Some(m) => out.push_str(&format!(
                    "{},{},{:.17},{:.17}\n",
                    r.round, r.client_id, m.accuracy, m.fnmr
                )),
                None => out.push_str(&format!("{},{},,\n", r.round, r.client_id)),
            }
        }
        out
    }
}

/// Element-wise mean of backbone parameter vectors, summed in input order.
pub fn fedpav_average(backbones: &[ParamVector]) -> Result<ParamVector> {
    if backbones.is_empty() {
        return Err(LafrError::InvalidArgument("no backbones to average".into()));
    }
    let len = backbones[0].len();
    for (i, b) in backbones.iter().enumerate() {
        if b.len() != len {
            return Err(LafrError::Shape(format!(
                "backbone {i} has {} parameters, expected {len}",
                b.len()
            )));
        }
    }
    let k = backbones.len() as f64;
    let mut out = vec![0.0f64; len];
    for b in backbones {
        for (acc, &v) in out.iter_mut().zip(b.as_slice()) {
            *acc += v;
        }
    }
    for v in &mut out {
        *v /= k;
    }
    Ok(ParamVector(out))
}

/// Deterministic per-(round, client) seed for the local RCT run.
pub fn client_round_seed(base: u64, round: usize, client_index: usize) -> u64 {
    derive_seed(derive_seed(base, round as u64), client_index as u64)
}

struct ClientWorkspace {
    bank: Option<ClassifierBank>,
}

/// One client's round: deserialize the broadcast, adapt locally, serialize
/// the update. The classifier bank is built on the first round from the
/// broadcast (pre-trained) model and reused afterwards.
fn client_round(
    client: &Client,
    client_index: usize,
    workspace: &mut ClientWorkspace,
    broadcast_json: &str,
    template: &Backbone,
    origin_anchor: &ParamVector,
    config: &FederationConfig,
) -> Result<String> {
    let broadcast: ServerBroadcast = serde_json::from_str(broadcast_json)
        .map_err(|e| LafrError::Format(format!("broadcast decode: {e}")))?;
    let server_params = ParamVector(broadcast.backbone);
    let server_model = template.with_params(&server_params)?;

    if workspace.bank.is_none() {
        let centers = compute_class_centers(&server_model, &client.shard, &client.pseudo_labels)?;
        workspace.bank = Some(ClassifierBank::from_unit_rows(centers.normalized, true)?);
    }
    let bank = workspace.bank.as_ref().expect("bank initialized");

    let anchor = match config.anchor_mode {
        AnchorMode::Round => &server_params,
        AnchorMode::Origin => origin_anchor,
    };
    let mut rct = config.rct.clone();
    rct.seed = client_round_seed(config.seed, broadcast.round, client_index);
    let (adapted, _log) = rct_adapt_anchored(
        &server_model,
        anchor,
        bank,
        &client.shard,
        &client.pseudo_labels,
        &rct,
    )?;

    let metrics = match &client.eval {
        Some(eval) => {
            let report =
                evaluate_verification(&adapted, &eval.inputs, &eval.pairs, &eval.fmr_targets)?;
            let fnmr = report
                .fnmr_at_fmr
                .first()
                .map(|e| e.fnmr)
                .unwrap_or(f64::NAN);
            Some(RoundMetrics {
                accuracy: report.accuracy,
                fnmr,
            })
        }
        None => None,
    };

    let update = ClientUpdate {
        round: broadcast.round,
        client_id: client.id.clone(),
        backbone: adapted.to_params().0,
        metrics,
    };
    serde_json::to_string(&update).map_err(|e| LafrError::Format(format!("update encode: {e}")))
}

/// Run T dual-loop rounds: broadcast the server backbone, let every client
/// adapt concurrently, then average the returned parameters. Deterministic
/// under the config seed regardless of thread scheduling.
pub fn run_dual_loop(
    server_init: &Backbone,
    clients: &[Client],
    config: &FederationConfig,
) -> Result<DualLoopOutcome> {
    config.validate()?;
    if clients.is_empty() {
        return Err(LafrError::InvalidArgument("need at least one client".into()));
    }
    for c in clients {
        if c.shard.cols() != server_init.input_dim() {
            return Err(LafrError::Shape(format!(
                "client {}: shard dim {} vs backbone input dim {}",
                c.id,
                c.shard.cols(),
                server_init.input_dim()
            )));
        }
    }

    let origin_anchor = server_init.to_params();
    let mut server_params = server_init.to_params();
    let mut workspaces: Vec<ClientWorkspace> =
        clients.iter().map(|_| ClientWorkspace { bank: None }).collect();
    let mut outcome = DualLoopOutcome {
        server_checkpoints: Vec::with_capacity(config.rounds),
        records: Vec::new(),
        messages: Vec::new(),
    };

    for round in 0..config.rounds {
        let broadcast = ServerBroadcast {
            round,
            backbone: server_params.0.clone(),
        };
        let broadcast_json = serde_json::to_string(&broadcast)
            .map_err(|e| LafrError::Format(format!("broadcast encode: {e}")))?;
        outcome.messages.push(BoundaryMessage {
            direction: MessageDirection::ServerToClient,
            round,
            payload_json: broadcast_json.clone(),
        });

        // Clients run concurrently; results are collected by index, so the
        // aggregation order never depends on scheduling.
        let origin_ref = &origin_anchor;
        let update_jsons: Vec<Result<String>> = std::thread::scope(|scope| {
            let handles: Vec<_> = clients
                .iter()
                .zip(workspaces.iter_mut())
                .enumerate()
                .map(|(idx, (client, workspace))| {
                    let broadcast_json = broadcast_json.as_str();
                    scope.spawn(move || {
                        client_round(
                            client,
                            idx,
                            workspace,
                            broadcast_json,
                            server_init,
                            origin_ref,
                            config,
                        )
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("client thread")).collect()
        });

        let mut client_params = Vec::with_capacity(clients.len());
        for (client, update_json) in clients.iter().zip(update_jsons) {
            let update_json = update_json.map_err(|e| LafrError::ClientFailure {
                client_id: client.id.clone(),
                source: Box::new(e),
            })?;
            let update: ClientUpdate = serde_json::from_str(&update_json)
                .map_err(|e| LafrError::Format(format!("update decode: {e}")))?;
            outcome.messages.push(BoundaryMessage {
                direction: MessageDirection::ClientToServer,
                round,
                payload_json: update_json,
            });
            outcome.records.push(RoundClientRecord {
                round,
                client_id: update.client_id.clone(),
                metrics: update.metrics,
            });
            client_params.push(ParamVector(update.backbone));
        }

        server_params = fedpav_average(&client_params)?;
        outcome.server_checkpoints.push(server_params.clone());
    }

    Ok(outcome)
}
