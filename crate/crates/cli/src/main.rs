//! `lafr` — config-driven driver for the local-adaptation pipeline:
//! synthetic data generation, meta-clustering training, pseudo-labeling,
//! backbone adaptation, federated aggregation, and evaluation.

mod config;
mod pipeline;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use lafr_core::cluster::ClusterMethod;
use pipeline::{AdaptMethod, LabelSource, Workspace};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "lafr", about = "Local-adaptive recognition pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override every seed in the config from one master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override individual config keys, e.g. --set rct.lr=0.01
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl CommonArgs {
    fn load(&self) -> Result<(RunConfig, Workspace)> {
        let config = RunConfig::load(&self.config, &self.set, self.seed)?;
        Ok((config, Workspace::new(&self.out)))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate every configured domain and pre-train the backbone.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the confidence GCN (meta-gcn or the pooled gcn baseline).
    TrainGcn {
        #[command(flatten)]
        common: CommonArgs,
        /// meta-gcn | gcn
        #[arg(long, default_value = "meta-gcn")]
        method: String,
    },
    /// Pseudo-label the adaptation domain.
    Cluster {
        #[command(flatten)]
        common: CommonArgs,
        /// meta-gcn | gcn | distance
        #[arg(long, default_value = "meta-gcn")]
        method: String,
    },
    /// Adapt the backbone to the adaptation domain.
    Adapt {
        #[command(flatten)]
        common: CommonArgs,
        /// <labels>+<technique>: labels in {gt, meta-gcn, gcn, distance},
        /// technique in {rct, finetune}
        #[arg(long, default_value = "gt+rct")]
        method: String,
    },
    /// Run the federated dual loop over the client domains.
    Federate {
        #[command(flatten)]
        common: CommonArgs,
        /// Label source for clients: gt | meta-gcn | gcn | distance
        #[arg(long, default_value = "gt")]
        method: String,
    },
    /// Verification metrics on the test domain for available checkpoints.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Evaluate one checkpoint only (pretrained or an adapt method tag).
        #[arg(long)]
        method: Option<String>,
    },
    /// Join metric files into one summary table.
    Report {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn parse_cluster_method(s: &str) -> Result<ClusterMethod> {
    Ok(s.parse()?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen { common } => {
            let (config, ws) = common.load()?;
            pipeline::cmd_gen(&config, &ws)
        }
        Command::TrainGcn { common, method } => {
            let (config, ws) = common.load()?;
            pipeline::cmd_train_gcn(&config, &ws, parse_cluster_method(method)?)
        }
        Command::Cluster { common, method } => {
            let (config, ws) = common.load()?;
            pipeline::cmd_cluster(&config, &ws, parse_cluster_method(method)?)
        }
        Command::Adapt { common, method } => {
            let (config, ws) = common.load()?;
            let method = AdaptMethod::parse(method)?;
            pipeline::cmd_adapt(&config, &ws, &method)
        }
        Command::Federate { common, method } => {
            let (config, ws) = common.load()?;
            let labels = match method.as_str() {
                "gt" => LabelSource::GroundTruth,
                other => LabelSource::Clustered(parse_cluster_method(other)?),
            };
            pipeline::cmd_federate(&config, &ws, &labels)
        }
        Command::Eval { common, method } => {
            let (config, ws) = common.load()?;
            pipeline::cmd_eval(&config, &ws, method.as_deref())
        }
        Command::Report { common } => {
            let (config, ws) = common.load()?;
            pipeline::cmd_report(&config, &ws)
        }
    }
}
