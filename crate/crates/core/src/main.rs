use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use mhd_ensemble::io::config::{parse_config, Experiment};
use mhd_ensemble::io::driver::{exit_code, run_experiment};
use mhd_ensemble::Error;

#[derive(Parser, Debug)]
#[command(version, about = "Ensemble MHD simulations with a shared-matrix BDF2 Elsasser scheme")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Manufactured-solution convergence study.
    Converge(Flags),
    /// Channel flow over a step.
    Channel(Flags),
    /// Energy inequality check on one manufactured-solution level.
    Energy(Flags),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SolverArg {
    Direct,
    Iterative,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConvectionArg {
    Standard,
    Skew,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BootstrapArg {
    Be,
    Exact,
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nu: Option<f64>,
    /// Magnetic diffusivity.
    #[arg(long)]
    num: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Final time.
    #[arg(long = "T")]
    t_end: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    levels: Option<usize>,
    /// Ensemble size.
    #[arg(long = "J")]
    members: Option<usize>,
    /// Cells per side of the unit square.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    cells_per_unit: Option<usize>,
    #[arg(long)]
    snapshot_interval: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    #[arg(long, value_enum)]
    convection: Option<ConvectionArg>,
    #[arg(long, value_enum)]
    bootstrap: Option<BootstrapArg>,
    /// Assemble and factor per member instead of sharing one matrix.
    #[arg(long)]
    naive: bool,
}

impl Flags {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        put("nu", self.nu.map(|x| x.to_string()));
        put("nu_m", self.num.map(|x| x.to_string()));
        put("dt", self.dt.map(|x| x.to_string()));
        put("T", self.t_end.map(|x| x.to_string()));
        put("eps", self.eps.map(|x| x.to_string()));
        put("levels", self.levels.map(|x| x.to_string()));
        put("J", self.members.map(|x| x.to_string()));
        put("n", self.n.map(|x| x.to_string()));
        put("cells_per_unit", self.cells_per_unit.map(|x| x.to_string()));
        put("snapshot_interval", self.snapshot_interval.map(|x| x.to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        put("threads", self.threads.map(|x| x.to_string()));
        put("solver", self.solver.map(|s| format!("{s:?}").to_lowercase()));
        put("convection", self.convection.map(|s| format!("{s:?}").to_lowercase()));
        put("bootstrap", self.bootstrap.map(|s| format!("{s:?}").to_lowercase()));
        put("naive", self.naive.then(|| "true".to_string()));
        kv
    }
}

fn run(cli: Cli) -> mhd_ensemble::Result<()> {
    let (experiment, flags) = match cli.command {
        Command::Converge(f) => (Experiment::Converge, f),
        Command::Channel(f) => (Experiment::Channel, f),
        Command::Energy(f) => (Experiment::Energy, f),
    };
    let text = match &flags.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let cfg = parse_config(Some(experiment), &text, &flags.overrides())?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let out = run_experiment(&cfg)?;
    for f in &out.files {
        log::debug!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // bad flags are configuration errors, not solver failures
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                error!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
