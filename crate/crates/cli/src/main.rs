mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gadmore::sweep::SweepConfig;
use gadmore::synth::SynthKind;
use gadmore::Error;

#[derive(Parser)]
#[command(name = "gadmore", version, about = "Zero-shot graph anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic graph.
    Synth {
        #[arg(long, default_value = "clique_injection")]
        kind: SynthKind,
        #[arg(long, default_value_t = 600)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Raw feature width.
        #[arg(long, default_value_t = 8)]
        d0: usize,
        #[arg(long, default_value_t = 0.05)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the multi-curvature aligned features of a graph.
    Align {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the configured source graphs and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON-lines run log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score every node of an unseen graph.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config whose alignment settings replace the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Compute AUROC and AUPRC of a score file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-curvature AUROC of a k-NN distance detector.
    Sweep {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, allow_hyphen_values = true, default_value = "-1,-0.5,0,0.5,1")]
        curvatures: String,
        #[arg(long, default_value_t = 10)]
        knn: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn parse_curvatures(s: &str) -> gadmore::Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad curvature {t:?}: {e}")))
        })
        .collect()
}

fn configure_threads() -> gadmore::Result<()> {
    let Ok(v) = std::env::var("GADMORE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("GADMORE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> gadmore::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth { kind, n, seed, d0, fraction, out } => commands::synth(kind, n, seed, d0, fraction, &out),
        Command::Align { config, graph, out } => commands::align(&config, &graph, &out),
        Command::Train { config, out, seed, log } => {
            commands::train_cmd(&config, out.as_deref(), seed, log.as_deref())
        }
        Command::Score { model, graph, out, config, bins } => {
            commands::score(&model, &graph, &out, config.as_deref(), bins).map(|_| ())
        }
        Command::Eval { scores, labels, out } => commands::eval(&scores, &labels, out.as_deref()).map(|_| ()),
        Command::Sweep { graph, curvatures, knn, dim, out } => {
            let cfg = SweepConfig {
                curvatures: parse_curvatures(&curvatures)?,
                knn,
                dim,
                ..SweepConfig::default()
            };
            commands::sweep_cmd(&graph, &cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
