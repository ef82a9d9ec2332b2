//! `purilab`: command-line experiment runner.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "purilab",
    version,
    about = "Diffusion purification and certified robustness experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Certify test points under randomized smoothing and write accuracy curves.
    Certify,
    /// Distill a consistency network from the exact PF-ODE.
    Distill,
    /// Fine-tune a consistency network checkpoint.
    Finetune,
    /// Estimate purification transport and check the Markov bound.
    Transport,
    /// Emit PF-ODE trajectories and field samples for a 1D distribution.
    OdeDemo,
    /// Aggregate results in the output directory into one summary.
    Report,
}

/// Flags override the configuration file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Preset name (two-dirac, four-cluster) or a TOML distribution file.
    #[arg(long, global = true)]
    distribution: Option<String>,
    /// onestep, pfode, sde, cm-oracle or cm-net.
    #[arg(long, global = true)]
    purifier: Option<String>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Where distill/finetune write the trained network.
    #[arg(long, global = true)]
    checkpoint_out: Option<PathBuf>,
    #[arg(long, global = true)]
    solver: Option<String>,
    #[arg(long, global = true)]
    ode_steps: Option<usize>,
    #[arg(long, global = true)]
    t_eps: Option<f64>,
    #[arg(long, global = true)]
    t_max: Option<f64>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    grid_n: Option<usize>,
    /// Monte Carlo draws per (purifier, σ) for transport.
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    n0: Option<usize>,
    #[arg(long, global = true)]
    n_cert: Option<usize>,
    #[arg(long, global = true)]
    num_points: Option<usize>,
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// l1, l2 or feature.
    #[arg(long, global = true)]
    loss: Option<String>,
    #[arg(long, global = true, hide = true)]
    inject_mean_scale: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = &self.distribution {
            if matches!(v.as_str(), "two-dirac" | "four-cluster") {
                cfg.distribution.preset = v.clone();
                cfg.distribution.file = None;
                cfg.distribution.components.clear();
            } else {
                cfg.distribution.file = Some(PathBuf::from(v));
            }
        }
        if let Some(v) = &self.purifier {
            cfg.purifier.kind = v.clone();
        }
        if let Some(v) = &self.checkpoint {
            cfg.purifier.checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.solver {
            cfg.purifier.solver = v.clone();
        }
        if let Some(v) = self.ode_steps {
            cfg.purifier.ode_steps = v;
        }
        if let Some(v) = self.t_eps {
            cfg.grid.eps = v;
        }
        if let Some(v) = self.t_max {
            cfg.grid.t_max = v;
        }
        if let Some(v) = self.rho {
            cfg.grid.rho = v;
        }
        if let Some(v) = self.grid_n {
            cfg.grid.n = v;
        }
        if let Some(v) = self.n {
            cfg.transport.n = v;
        }
        if let Some(v) = self.n0 {
            cfg.smoothing.n0 = v;
        }
        if let Some(v) = self.n_cert {
            cfg.smoothing.n_cert = v;
        }
        if let Some(v) = self.num_points {
            cfg.smoothing.num_points = v;
        }
        if let Some(v) = self.iters {
            cfg.training.iters = v;
            cfg.finetune.iters = v;
        }
        if let Some(v) = &self.loss {
            cfg.training.loss = v.clone();
            cfg.finetune.loss = v.clone();
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.opts.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cli.opts.apply(&mut cfg);
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    }
    let extra = commands::Extra {
        checkpoint_out: cli.opts.checkpoint_out.clone(),
        inject_mean_scale: cli.opts.inject_mean_scale,
    };
    match cli.command {
        Command::Report => commands::report(&cfg),
        cmd => {
            let ctx = commands::Context::new(cfg, extra)?;
            match cmd {
                Command::Certify => commands::certify(&ctx),
                Command::Distill => commands::distill(&ctx),
                Command::Finetune => commands::finetune(&ctx),
                Command::Transport => commands::transport(&ctx),
                Command::OdeDemo => commands::ode_demo(&ctx),
                Command::Report => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
