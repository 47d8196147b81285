use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use landmark_cli::commands::{self, Protocol};
use landmark_cli::config::{FeatureSource, RunConfig};
use landmark_cli::exit_code;
use landmark_core::Result;

#[derive(Parser)]
#[command(name = "landmark", version, about = "Self-supervised landmark pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run_name`.
    #[arg(long)]
    run: Option<String>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `dataset.root`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic face dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        canvas: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        renders_per_identity: usize,
        #[arg(long, default_value_t = 0)]
        n_same: usize,
        #[arg(long, default_value_t = 0)]
        n_diff: usize,
    },
    /// Instance-level pretraining.
    Stage1 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Dense distillation from the stage-1 hypercolumns.
    Stage2 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        epochs: Option<usize>,
        /// Named schedule: `main` or `short`.
        #[arg(long, conflicts_with = "epochs")]
        preset: Option<String>,
    },
    /// Fit the landmark regressor on frozen features.
    Regress {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        features: Option<FeatureSource>,
        #[arg(long)]
        n_annotations: Option<usize>,
    },
    /// Run an evaluation protocol.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[arg(long, value_enum)]
        features: Option<FeatureSource>,
    },
    /// Similarity heatmap of one reference point over a query image.
    MatchViz {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        query: PathBuf,
        /// Pixel `x,y` in the reference image.
        #[arg(long, value_parser = parse_point)]
        point: (f64, f64),
        /// Stage-2 dense or stage-1 encoder checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_point(s: &str) -> std::result::Result<(f64, f64), String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    Ok((x.trim().parse().map_err(|e| format!("{e}"))?, y.trim().parse().map_err(|e| format!("{e}"))?))
}

fn base_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(r) = &args.run {
        cfg.run_name = r.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = &args.data {
        cfg.dataset.root = Some(d.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Synth { out, n, canvas, seed, renders_per_identity, n_same, n_diff } => {
            commands::cmd_synth(&out, n, canvas, seed, renders_per_identity, n_same, n_diff)
        }
        Command::Stage1 { run, epochs } => {
            let mut cfg = base_config(&run)?;
            if let Some(e) = epochs {
                cfg.stage1.epochs = e;
            }
            commands::cmd_stage1(&cfg.resolve()?)
        }
        Command::Stage2 { run, epochs, preset } => {
            let mut cfg = base_config(&run)?;
            if let Some(e) = epochs {
                cfg.stage2.epochs = e;
            }
            if let Some(p) = preset {
                cfg.stage2.epochs = landmark_core::stage2::Stage2Config::epochs_preset(&p)?;
            }
            commands::cmd_stage2(&cfg.resolve()?)
        }
        Command::Regress { run, features, n_annotations } => {
            let mut cfg = base_config(&run)?;
            if let Some(f) = features {
                cfg.eval.features = f;
            }
            if let Some(n) = n_annotations {
                cfg.eval.n_annotations = n;
            }
            commands::cmd_regress(&cfg.resolve()?)
        }
        Command::Eval { run, protocol, features } => {
            let mut cfg = base_config(&run)?;
            if let Some(f) = features {
                cfg.eval.features = f;
            }
            commands::cmd_eval(&cfg.resolve()?, protocol)
        }
        Command::MatchViz { reference, query, point, checkpoint, out } => {
            commands::cmd_match_viz(&reference, &query, point, &checkpoint, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            println!("{}", serde_json::json!({ "error": e.to_string(), "exit_code": code }));
            ExitCode::from(code as u8)
        }
    }
}
