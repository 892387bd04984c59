use clap::{Parser, Subcommand};
use sbbv_core::artifact::ArtifactError;
use sbbv_core::config::RunConfig;
use sbbv_core::phases::FeatureKind;
use sbbv_core::pipeline::{load_config, EstimateMode, Pipeline, PipelineError};
use std::path::PathBuf;
use std::process::ExitCode;

/// Semantic basic block vectors: train, sign, cluster and estimate CPI.
#[derive(Parser, Debug)]
#[command(name = "sbbv", version)]
struct Cli {
    /// Run configuration (TOML); defaults apply to anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the small smoke-test configuration instead of the defaults.
    #[arg(long, global = true, conflicts_with = "config")]
    quick: bool,
    /// Overrides the root seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Working directory holding every artifact.
    #[arg(long, global = true, env = "SBBV_WORKDIR", default_value = "sbbv-work")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate workloads, execute them, record traces and oracle CPI.
    Gen,
    /// Split traces into basic blocks and intervals; write BBVs.
    Ingest,
    /// Build the vocabulary and pre-train the block encoder.
    Pretrain,
    /// Triplet fine-tuning of the encoder on transformed functions.
    FinetuneEncoder,
    /// Embed every stored basic block.
    Embed,
    /// Train the set aggregator on the training programs.
    TrainAggregator,
    /// Compute interval signatures.
    Sign,
    /// Cluster the eval programs' intervals.
    Cluster {
        #[arg(long, default_value = "semantic")]
        feature: FeatureKind,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Estimate per-program CPI from cluster representatives.
    Estimate {
        #[arg(long, default_value = "cross")]
        mode: EstimateMode,
        #[arg(long, default_value = "semantic")]
        feature: FeatureKind,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Fine-tune the aggregator for the second cost model.
    Adapt,
    /// Function retrieval on held-out transformed functions.
    EvalBcsd,
    /// Finite-difference gradient checks of both models.
    Gradcheck,
    /// Summarize completed stages and reports.
    Report,
    /// Run every stage in order.
    All,
    /// Print the effective configuration as TOML.
    Config,
}

fn exit_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(_) => 2,
        PipelineError::Artifact(ArtifactError::Missing { .. }) => 3,
        PipelineError::Artifact(ArtifactError::HashMismatch { .. }) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut config = if cli.quick { RunConfig::quick() } else { load_config(cli.config.as_deref())? };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let p = Pipeline::new(cli.workdir, config)?;
    match cli.command {
        Command::Gen => {
            let suite = p.gen()?;
            println!("generated {} programs", suite.len());
        }
        Command::Ingest => {
            let (blocks, intervals) = p.ingest()?;
            println!("{blocks} blocks, {intervals} intervals");
        }
        Command::Pretrain => {
            let r = p.pretrain()?;
            println!("pre-trained {} steps; last {}", r.steps, r.last);
        }
        Command::FinetuneEncoder => {
            let r = p.finetune_encoder()?;
            println!("fine-tuned {} steps; last {}", r.steps, r.last);
        }
        Command::Embed => println!("embedded {} blocks", p.embed()?),
        Command::TrainAggregator => {
            let r = p.train_aggregator()?;
            println!("trained {} steps; last {}", r.steps, r.last);
        }
        Command::Sign => println!("signed {} intervals", p.sign()?),
        Command::Cluster { feature, k } => {
            let r = p.cluster(feature, k)?;
            println!("k {} over {} points: inertia {:.4}, silhouette {:.3}", r.k, r.points, r.inertia, r.silhouette);
        }
        Command::Estimate { mode, feature, k } => print!("{}", p.estimate(mode, feature, k)?.table()),
        Command::Adapt => {
            let r = p.adapt()?;
            println!(
                "zero-shot {:.2}% → adapted {:.2}% ({:+.2} pp) on {} held-out programs",
                100.0 * r.zero_shot_mean,
                100.0 * r.adapted_mean,
                r.improvement_pp,
                r.held_out.len()
            );
        }
        Command::EvalBcsd => {
            let r = p.eval_bcsd()?;
            println!(
                "MRR {:.4}, recall@1 {:.4} (pretrained only {:.4}, random {:.4}) over pool {}",
                r.finetuned.mrr, r.finetuned.recall_at_1, r.pretrained_only.mrr, r.random_baseline_mrr, r.finetuned.pool_size
            );
        }
        Command::Gradcheck => println!("max relative error {:.3e}", p.gradcheck()?.max_rel_err),
        Command::Report => print!("{}", p.report()?),
        Command::Config => print!("{}", p.config.to_toml()),
        Command::All => {
            p.run_all()?;
            print!("{}", p.report()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
