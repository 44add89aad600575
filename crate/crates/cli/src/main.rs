use anyhow::{Context, Result};
use cagn_cli::commands::{self, Ctx};
use cagn_cli::config::ExperimentConfig;
use cagn_cli::{exit_code, threads_from_env};
use cagn_core::data::Family;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "cagn", about = "Continual GAN adaptation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Serial execution for byte-identical artifacts.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train θ, φ^0 and the discriminator on task 0.
    TrainBase(Common),
    /// Train adapters for task T on the frozen base.
    TrainTask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: usize,
    },
    /// Write N images of one task.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Latent seed; defaults to the run seed.
        #[arg(long)]
        sample_seed: Option<u64>,
        /// Image directory; defaults to <out>/samples.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Sample sheet interpolating between two tasks' adapters.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task_i: usize,
        #[arg(long)]
        task_j: usize,
        /// Comma-separated λ values; defaults to 0.0, 0.1, ..., 1.0.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        sample_seed: Option<u64>,
    },
    /// Proxy-FID of every trained task.
    Eval(Common),
    /// Parameter and FLOPs report.
    Cost(Common),
    /// Class-incremental replay vs. no-replay accuracy curves.
    Replay(Common),
    /// Write a procedural dataset as PPM files.
    SynthData {
        #[arg(long)]
        family: String,
        #[arg(long, default_value_t = 0)]
        palette_seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn ctx(c: &Common) -> Result<Ctx> {
    let cfg = ExperimentConfig::load(&c.config)?;
    let base = c.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut ctx = Ctx::new(cfg, base, c.out.clone(), c.seed)?;
    ctx.deterministic = c.deterministic;
    ctx.threads = if c.deterministic { 1 } else { threads_from_env(std::env::var("CAGN_THREADS").ok().as_deref())? };
    Ok(ctx)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainBase(c) => {
            let s = commands::train_base(&ctx(&c)?)?;
            println!("task {}: {} iterations, proxy-FID {:.4}", s.task, s.iterations, s.proxy_fid);
        }
        Cmd::TrainTask { common, task } => {
            let s = commands::train_task(&ctx(&common)?, task)?;
            println!("task {}: {} iterations, proxy-FID {:.4}", s.task, s.iterations, s.proxy_fid);
        }
        Cmd::Generate { common, task, n, sample_seed, dest } => {
            let c = ctx(&common)?;
            let dest = dest.unwrap_or_else(|| c.out.join("samples"));
            let files = commands::generate(&c, task, n, sample_seed.unwrap_or(c.seed), &dest)?;
            println!("wrote {} images to {}", files.len(), dest.display());
        }
        Cmd::Interpolate { common, task_i, task_j, lambdas, n, sample_seed } => {
            let c = ctx(&common)?;
            let grid = lambdas.unwrap_or_else(commands::default_lambdas);
            let p = commands::interpolate(&c, task_i, task_j, &grid, n, sample_seed.unwrap_or(c.seed))?;
            println!("wrote {}", p.display());
        }
        Cmd::Eval(c) => {
            let p = commands::eval(&ctx(&c)?)?;
            print!("{}", std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?);
        }
        Cmd::Cost(c) => print!("{}", commands::cost(&ctx(&c)?)?),
        Cmd::Replay(c) => {
            let p = commands::replay(&ctx(&c)?)?;
            print!("{}", std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?);
        }
        Cmd::SynthData { family, palette_seed, n, size, out } => {
            let fam: Family = family.parse()?;
            let files = commands::synth_data(fam, palette_seed, n, size, &out)?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {:#}", e);
        std::process::exit(exit_code(&e));
    }
}
