use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand};

use uierl::cli;
use uierl::config::RunConfig;
use uierl::network::Variant;
use uierl::{Error, Result};

/// Underwater image enhancement with internal and external representation learning.
#[derive(Parser, Debug)]
#[command(name = "uierl", version)]
struct Args {
    /// TOML run configuration ([model], [train], [data], [metrics]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed` (and the synthesis seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `model.variant` (M0..M9 or full).
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scene directories.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long)]
        force: bool,
    },
    /// Train on scene directories with references.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Enhance every view of one scene directory, or of every scene under a root.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score images, optionally against references.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train several variants with one seed and budget and compare them on held-out scenes.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "M0,M1,M2")]
        variants: String,
        #[arg(long)]
        force: bool,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("UIERL_NUM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("UIERL_NUM_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn run(args: Args) -> Result<()> {
    configure_threads()?;
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(v) = args.variant {
        cfg.model.variant = v;
    }
    cfg.validate()?;
    match args.command {
        Command::Synth { out, scenes, force } => {
            let m = cli::cmd_synth(&cfg, &out, scenes, cfg.train.seed, force)?;
            println!("wrote {scenes} scenes to {} (seed {})", out.display(), m.seed);
        }
        Command::Train { data, out, resume, force } => {
            let every = (cfg.train.iterations / 100).max(1);
            let m = cli::cmd_train(&cfg, &data, &out, resume.as_deref(), force, |r| {
                if r.iteration % every == 0 {
                    eprintln!(
                        "iter {:>6}  content {:.5}  perceptual {:.5}  total {:.5}",
                        r.iteration, r.content, r.perceptual, r.total
                    );
                }
            })?;
            println!("{}", serde_json::to_string_pretty(&m.details)?);
        }
        Command::Enhance { checkpoint, scenes, out, force } => {
            let m = cli::cmd_enhance(&checkpoint, &scenes, &out, force)?;
            let n = m.details["outputs"].as_array().map_or(0, |a| a.len());
            println!("wrote {n} images to {}", out.display());
        }
        Command::Eval { input, reference, out } => {
            let report = cli::cmd_eval(&cfg, &input, reference.as_deref(), &out)?;
            let m = report.means();
            println!(
                "{} images  uiqm {:.4}  uciqe {:.4}  ccf {:.4}  edge {:.4}{}",
                report.rows.len(),
                m.uiqm,
                m.uciqe,
                m.ccf,
                m.edge,
                match (m.angular_error, m.psnr) {
                    (Some(a), Some(p)) => format!("  angular {a:.4}  psnr {p:.4}"),
                    _ => String::new(),
                }
            );
        }
        Command::Ablate { data, out, variants, force } => {
            let variants = cli::parse_variants(&variants)?;
            let every = (cfg.train.iterations / 20).max(1);
            let table = cli::cmd_ablate(&cfg, &data, &out, &variants, force, |v, r| {
                if r.iteration % every == 0 {
                    eprintln!("{v} iter {:>6}  total {:.5}", r.iteration, r.total);
                }
            })?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
