use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clipdistill::dataset::{make_synthetic_dataset, save_dataset};
use clipdistill::harness::{emit_plots, resume, run_eval, run_pretrain, Protocol, RunConfig};

#[derive(Parser)]
#[command(name = "clipdistill", version, about = "Distill frozen per-frame targets into a video encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the online encoder.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set optim.total_epochs=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from a checkpoint instead of starting fresh; the
        /// checkpoint's own config is used.
        #[arg(long, conflicts_with_all = ["config", "set"])]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or a random encoder when omitted).
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Protocol,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Render loss, learning-rate and accuracy plots from a metrics log.
    Plots {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic corpus and write it to `data.path`.
    MakeData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: clipdistill::Error| e.to_string())
}

fn load_config(path: Option<PathBuf>, set: &[String]) -> clipdistill::Result<RunConfig> {
    RunConfig::load(&path.unwrap_or_default(), set)
}

fn run(cli: Cli) -> clipdistill::Result<()> {
    match cli.command {
        Command::Pretrain { config, set, resume: from } => {
            let outcome = match from {
                Some(ckpt) => resume(&ckpt)?,
                None => run_pretrain(load_config(config, &set)?)?,
            };
            println!("finished at step {}", outcome.final_step);
            println!("metrics: {}", outcome.metrics.display());
            for c in &outcome.checkpoints {
                println!("checkpoint: {}", c.display());
            }
        }
        Command::Eval {
            config,
            checkpoint,
            protocol,
            set,
        } => {
            let cfg = load_config(config, &set)?;
            for r in run_eval(&cfg, checkpoint.as_deref(), protocol)? {
                println!("{}: top1={:.4} ({:.1}s)", r.protocol, r.top1, r.wall_clock_secs);
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::Plots { log, out } => {
            for p in emit_plots(&log, &out)? {
                println!("{}", p.display());
            }
        }
        Command::MakeData { config, set } => {
            let mut cfg = load_config(config, &set)?;
            if cfg.data.path.is_empty() {
                cfg.data.path = cfg.output_path().join("data.bin").to_string_lossy().into_owned();
            }
            let videos = make_synthetic_dataset(&cfg.data.synthetic)?;
            let path = PathBuf::from(&cfg.data.path);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            save_dataset(&path, &videos)?;
            println!("{} videos -> {}", videos.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
