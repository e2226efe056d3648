use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coninfer::cli::{self, InferConfig, Mode, SynthLayout};
use coninfer::gmm::{CovMode, GmmConfig, RegEps};
use coninfer::prior::{PriorConfig, SynonymMode};
use coninfer::synth::SynthSpec;
use coninfer::Result;

#[derive(Parser)]
#[command(name = "coninfer", version, about = "Training-free consensus inference for patch segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine priors into per-tile label masks.
    Infer(InferArgs),
    /// Score predicted masks against the manifest's ground truth.
    Eval(EvalArgs),
    /// Write a seeded synthetic scene.
    Synth(SynthArgs),
    /// Compare prior-only, decoupled and joint inference.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[arg(long, default_value = "max", value_parser = cli::parse_synonym_mode)]
    synonym_mode: SynonymMode,
    #[arg(long, default_value = "full", value_parser = cli::parse_cov_mode)]
    cov_mode: CovMode,
    /// Absolute value, or `rel:F` for F times the mean feature variance.
    #[arg(long, value_parser = cli::parse_reg_eps)]
    reg_eps: Option<RegEps>,
    #[arg(long)]
    l2_normalize_features: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "joint")]
    mode: Mode,
    /// CSV of objective and step size per batch and iteration.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<tile id>.pgm` predictions.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 255)]
    ignore_label: u8,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 6.0)]
    center_spread: f64,
    #[arg(long, default_value_t = 1.0)]
    cluster_cov: f64,
    #[arg(long, default_value_t = 0.0)]
    prior_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    prior_flip: f64,
    #[arg(long, default_value_t = 20)]
    tiles: usize,
    #[arg(long, default_value_t = 10)]
    grid_rows: usize,
    #[arg(long, default_value_t = 10)]
    grid_cols: usize,
    #[arg(long, default_value_t = 4)]
    patch_px: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, default_value_t = 255)]
    ignore_label: u8,
}

fn infer_config(engine: EngineArgs, out: PathBuf) -> InferConfig {
    let mut cfg = InferConfig::new(engine.manifest, out);
    cfg.batch_size = engine.batch_size;
    cfg.iters = engine.iters;
    cfg.prior = PriorConfig {
        tau: engine.tau,
        synonym_mode: engine.synonym_mode,
    };
    let mut gmm = GmmConfig {
        cov_mode: engine.cov_mode,
        ..GmmConfig::default()
    };
    if let Some(eps) = engine.reg_eps {
        gmm.reg_eps = eps;
    }
    cfg.gmm = gmm;
    cfg.l2_normalize_features = engine.l2_normalize_features;
    cfg.threads = engine.threads;
    cfg
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Infer(args) => {
            let mut cfg = infer_config(args.engine, args.out);
            cfg.mode = args.mode;
            cfg.trace = args.trace;
            let summary = cli::cmd_infer(&cfg)?;
            println!(
                "{} masks written in {} batches",
                summary.masks_written,
                summary.batches.len()
            );
        }
        Command::Eval(args) => {
            let report = cli::cmd_eval(
                &args.pred,
                &args.manifest,
                args.report.as_deref(),
                Some(args.ignore_label),
            )?;
            for c in &report.per_class {
                match c.iou {
                    Some(iou) => println!("{:<24} {iou:.4}", c.class),
                    None => println!("{:<24} -", c.class),
                }
            }
            println!("{:<24} {:.4}", "mIoU", report.miou);
        }
        Command::Synth(args) => {
            let spec = SynthSpec {
                clusters: args.clusters,
                dim: args.dim,
                n_per_cluster: 1,
                center_spread: args.center_spread,
                cluster_cov: args.cluster_cov,
                prior_noise: args.prior_noise,
                prior_flip: args.prior_flip,
                seed: args.seed,
            };
            let layout = SynthLayout {
                tiles: args.tiles,
                grid_rows: args.grid_rows,
                grid_cols: args.grid_cols,
                patch_px: args.patch_px,
            };
            let manifest = cli::cmd_synth(&args.out, &spec, &layout)?;
            println!(
                "wrote {} tiles to {}",
                manifest.tiles.len(),
                args.out.join("manifest.json").display()
            );
        }
        Command::Ablate(args) => {
            let cfg = infer_config(args.engine, PathBuf::new());
            let rows = cli::cmd_ablate(&cfg, Some(args.ignore_label))?;
            print!("{}", cli::format_ablation(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONINFER_LOG", "warn")).init();
    let parsed = match Cli::try_parse() {
        Ok(p) => p,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(parsed.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
