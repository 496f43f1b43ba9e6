use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scaling_lab::runner;

#[derive(Parser)]
#[command(name = "scaling-lab", version, about = "Desk-scale transformer scaling experiments")]
struct Cli {
    /// Worker pool width; defaults to the number of CPUs.
    #[arg(long, global = true, env = "SCALING_LAB_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment config (TOML) or rerun a manifest.json.
    Run {
        config: PathBuf,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root for the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip SVG rendering.
        #[arg(long)]
        no_plots: bool,
    },
    /// Validate a config without running any compute.
    Validate { config: PathBuf },
    /// Re-render plots for an existing run directory.
    Plot { run_dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(2);
        }
        // Parallelism only affects scheduling; results are derived
        // from per-cell seeds and never depend on the pool width.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: could not size the worker pool: {e}");
            return ExitCode::from(3);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> scaling_lab::Result<()> {
    match command {
        Command::Run {
            config,
            seed,
            out,
            no_plots,
        } => {
            let mut cfg = runner::load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if no_plots {
                cfg.plots = false;
            }
            let out = out
                .or_else(|| cfg.out.clone().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("runs"));
            let dir = runner::run(&cfg, &out)?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = runner::load_config(&config)?;
            cfg.validate()?;
            println!("ok");
            Ok(())
        }
        Command::Plot { run_dir } => {
            for path in runner::render_plots(&run_dir)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}
