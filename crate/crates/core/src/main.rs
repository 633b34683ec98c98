use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qamix::pipeline::{
    cmd_adapter_tune, cmd_gen_data, cmd_train, cmd_transfer, cmd_zero_shot, load_corpus,
    ExperimentConfig, TrainMode, TransferMethod, ZeroShotMethod,
};

#[derive(Parser)]
#[command(name = "qamix", about = "Multi-adapter extractive QA experiments", version)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true, default_value = "configs/desk.json")]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Override the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic JSONL corpora for every configured dataset.
    GenData,
    /// Train one regime over the source datasets.
    Train(TrainArgs),
    /// Refine one dataset's expert with the backbone frozen.
    AdapterTune(AdapterTuneArgs),
    /// Evaluate composed experts on a target dataset without target labels.
    ZeroShot(ZeroShotArgs),
    /// Few-shot transfer to a target dataset with K labeled examples.
    Transfer(TransferArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// single:<dataset>, multi, multi-dynamic, or made-joint.
    #[arg(long)]
    mode: String,
    /// Continue from a checkpoint holding training state.
    #[arg(long)]
    resume_from: Option<PathBuf>,
}

#[derive(Args)]
struct AdapterTuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: String,
}

#[derive(Args)]
struct ZeroShotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target dataset name (not needed for --method grid).
    #[arg(long)]
    target: Option<String>,
    /// avg, ensemble, grid, or expert:<id>.
    #[arg(long)]
    method: String,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    target: String,
    /// Number of labeled target examples.
    #[arg(long)]
    k: usize,
    /// pre-avg, post-avg, or finetune.
    #[arg(long)]
    method: String,
    /// Comma-separated seed list.
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    seeds: Vec<u64>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.echo()?;

    match cli.command {
        Command::GenData => {
            let files = cmd_gen_data(&cfg)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Train(args) => {
            let mode = TrainMode::parse(&args.mode)?;
            let corpus = load_corpus(&cfg)?;
            let art = cmd_train(&cfg, &corpus, &mode, args.resume_from.as_deref())?;
            println!("checkpoint: {}", art.checkpoint.display());
            println!("metrics: {}", art.metrics.display());
            println!("best dev F1: {}", art.outcome.best_score);
        }
        Command::AdapterTune(args) => {
            let corpus = load_corpus(&cfg)?;
            let art = cmd_adapter_tune(&cfg, &corpus, &args.checkpoint, &args.dataset)?;
            println!("checkpoint: {}", art.checkpoint.display());
            println!("metrics: {}", art.metrics.display());
            println!("best dev F1: {}", art.outcome.best_score);
        }
        Command::ZeroShot(args) => {
            let method = ZeroShotMethod::parse(&args.method)?;
            let corpus = load_corpus(&cfg)?;
            let path = cmd_zero_shot(&cfg, &corpus, &args.checkpoint, args.target.as_deref(), &method)?;
            println!("report: {}", path.display());
        }
        Command::Transfer(args) => {
            let method = TransferMethod::parse(&args.method)?;
            let corpus = load_corpus(&cfg)?;
            let (path, summary) = cmd_transfer(
                &cfg,
                &corpus,
                &args.checkpoint,
                &args.target,
                args.k,
                method,
                &args.seeds,
            )?;
            println!("report: {}", path.display());
            println!(
                "mean EM {} / mean F1 {} / median F1 {}",
                summary.mean_em, summary.mean_f1, summary.median_f1
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
