use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scv2_cli::config::RunConfig;
use scv2_cli::stages::{self, Ctx, EvalArgs};
use scv2_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "scv2", version, about = "Surfel reconstruction pipeline: train, tune, trim, quantize, mesh, evaluate")]
struct Cli {
    /// Configuration file (JSON or key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set densify.omega=0.3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true, env = "SCV2_SEED")]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "SCV2_THREADS")]
    threads: Option<usize>,
    /// Record wall-clock times in metrics.csv (otherwise 0).
    #[arg(long, global = true)]
    timing: bool,
    /// Directory for stage artifacts.
    #[arg(long, global = true, default_value = "run")]
    work: PathBuf,
    /// Dataset directory (default: <work>/data).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene into the data directory.
    Gen,
    /// Optimize the whole scene from the initial point cloud.
    Pretrain,
    /// Split the pretrained model into blocks and assign views.
    Partition,
    /// Fine-tune blocks (all of them, or one).
    Tune {
        #[arg(long)]
        block: Option<usize>,
    },
    /// Concatenate tuned blocks.
    Merge,
    /// Remove the lowest-contribution surfels.
    Trim,
    /// Vector-quantize low-contribution SH coefficients.
    Quantize,
    /// TSDF-fuse rendered depth and extract a mesh.
    Mesh,
    /// Score a mesh against ground-truth points.
    Eval {
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        cameras: Option<PathBuf>,
        /// File with a row-major 4x4 similarity mapping the mesh into the
        /// ground-truth frame.
        #[arg(long)]
        transform: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        vis_threshold: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        /// Pair points exhaustively instead of through the kd-tree.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        no_crop: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render a checkpoint to PNGs.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write surfel centers, normals and base colors as a PLY point cloud.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage, skipping those already up to date.
    Pipeline,
    /// Compare densification gradient sources.
    Ablate,
    /// Print the effective configuration.
    Config,
}

fn build_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = build_config(&cli)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    if let Cmd::Config = cli.cmd {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let data = cli.data.clone().unwrap_or_else(|| cli.work.join("data"));
    let ctx = Ctx::new(cfg, cli.work.clone(), data, cli.timing)?;
    let rows = match cli.cmd {
        Cmd::Gen => stages::gen(&ctx)?,
        Cmd::Pretrain => stages::pretrain(&ctx)?,
        Cmd::Partition => stages::partition(&ctx)?,
        Cmd::Tune { block } => stages::tune(&ctx, block)?,
        Cmd::Merge => stages::merge(&ctx)?,
        Cmd::Trim => stages::trim_stage(&ctx)?,
        Cmd::Quantize => stages::quantize(&ctx)?,
        Cmd::Mesh => stages::mesh(&ctx)?,
        Cmd::Eval {
            mesh,
            gt,
            cameras,
            transform,
            tau,
            vis_threshold,
            alpha,
            samples,
            oracle,
            no_crop,
            report,
        } => {
            let args = EvalArgs { mesh, gt, cameras, transform, tau, vis_threshold, alpha, samples, oracle, no_crop, report };
            let (rep, rows) = stages::eval(&ctx, &args)?;
            println!("precision {:.4} recall {:.4} f1 {:.4} tau {:.4}", rep.precision, rep.recall, rep.f1, rep.tau);
            rows
        }
        Cmd::Render { checkpoint, out, split } => stages::render(&ctx, &checkpoint, &out, &split)?,
        Cmd::Export { checkpoint, out } => {
            let model = scv2_core::compression::load_any(&checkpoint)?;
            scv2_core::compression::export_ply(&model, &out)?;
            return Ok(());
        }
        Cmd::Pipeline => {
            let rep = stages::run_pipeline(&ctx)?;
            println!("f1 {:.4}", rep.f1);
            return Ok(());
        }
        Cmd::Ablate => stages::ablate(&ctx)?,
        Cmd::Config => unreachable!(),
    };
    for r in &rows {
        log::info!("{}", r.to_csv());
    }
    ctx.emit(&rows)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
