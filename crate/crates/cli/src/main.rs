use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lsa_core::config::{DatasetKind, RunConfig};
use lsa_core::data::{fetch_mnist, mnist_present, MNIST_MIRROR_ENV};
use lsa_core::pipeline::{self, ReproOptions, Suite};
use lsa_core::{Error, Result};

/// Layer sustainability analysis and layer-wise regularized adversarial
/// training.
#[derive(Parser)]
#[command(name = "lsa", version)]
struct Cli {
    /// INI run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// One seed for data, initialization, training, LSA and evaluation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Models trained concurrently by `repro`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write model.ckpt, train_log.csv, resolved.cfg.
    Train,
    /// Per-layer comparison measures and the MVL list for a checkpoint.
    Lsa { checkpoint: PathBuf },
    /// Robust accuracy grids and the R&G leaderboard.
    Eval {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Decision-boundary lattice and adversarial points of a 2-D model.
    Boundary { checkpoint: PathBuf },
    /// Full experiment suite: moon or mnist.
    Repro {
        suite: String,
        /// MNIST: all 60000 training samples for 100 epochs.
        #[arg(long)]
        full: bool,
    },
    /// Download the MNIST IDX files into `dataset.path`.
    FetchMnist {
        /// Base URL; defaults to $LSA_MNIST_MIRROR.
        #[arg(long)]
        mirror: Option<String>,
    },
}

fn load_config(cli: &Cli, default_kind: DatasetKind) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::defaults(default_kind),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

fn mirror_url(explicit: Option<&str>) -> Result<String> {
    match explicit {
        Some(m) => Ok(m.to_string()),
        None => std::env::var(MNIST_MIRROR_ENV)
            .map_err(|_| Error::config("dataset.path", format!("MNIST files missing; set {MNIST_MIRROR_ENV} or pass --mirror"))),
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli, DatasetKind::Moon)?;
            let out = pipeline::cmd_train(&cfg)?;
            if let Some(last) = out.log.epochs.last() {
                println!("{}  {last}", out.tag);
            }
            println!("wrote {}", out.checkpoint.display());
        }
        Command::Lsa { checkpoint } => {
            let cfg = load_config(cli, DatasetKind::Moon)?;
            for rep in pipeline::cmd_lsa(&cfg, checkpoint)? {
                println!("{}", rep.mvl_text());
            }
        }
        Command::Eval { checkpoints } => {
            let cfg = load_config(cli, DatasetKind::Moon)?;
            let board = pipeline::cmd_eval(&cfg, checkpoints)?;
            print!("{}", board.to_text());
            println!("wrote {}", cfg.output.join(pipeline::LEADERBOARD).display());
        }
        Command::Boundary { checkpoint } => {
            let cfg = load_config(cli, DatasetKind::Moon)?;
            let grid = pipeline::cmd_boundary(&cfg, checkpoint)?;
            let fooled = grid.adversarial.iter().filter(|p| p.fooled).count();
            println!(
                "{}x{} lattice, {} adversarial points ({} misclassified); wrote {}",
                grid.resolution,
                grid.resolution,
                grid.adversarial.len(),
                fooled,
                cfg.output.join(pipeline::BOUNDARY_SVG).display()
            );
        }
        Command::Repro { suite, full } => {
            let suite = Suite::parse(suite)
                .ok_or_else(|| Error::config("repro", format!("unknown suite `{suite}` (moon, mnist)")))?;
            let mut base = load_config(cli, suite.dataset())?;
            if base.dataset.kind != suite.dataset() {
                return Err(Error::config("dataset.kind", format!("the {suite:?} suite needs dataset.kind = {}", suite.dataset().name())));
            }
            if suite == Suite::Mnist && !mnist_present(&base.dataset.path) {
                fetch_mnist(&mirror_url(None)?, &base.dataset.path)?;
            }
            let opts = ReproOptions {
                out: cli.out.clone().unwrap_or_else(|| base.output.clone()),
                seed: cli.seed.unwrap_or(base.trainer.seed),
                jobs: cli.jobs,
                full: *full,
                verbose: true,
            };
            base.output = opts.out.clone();
            let outcome = pipeline::cmd_repro(suite, &base, &opts)?;
            if let Some(normal) = outcome.run("Normal") {
                for rep in &normal.lsa {
                    println!("Normal {}", rep.mvl_text());
                }
            }
            print!("{}", outcome.leaderboard.to_text());
            println!("wrote {}", opts.out.join(pipeline::LEADERBOARD).display());
        }
        Command::FetchMnist { mirror } => {
            let cfg = load_config(cli, DatasetKind::Mnist)?;
            let files = fetch_mnist(&mirror_url(mirror.as_deref())?, &cfg.dataset.path)?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
