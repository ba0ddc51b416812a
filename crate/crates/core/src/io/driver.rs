//! Experiment drivers behind the command-line subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use log::{info, warn};

use crate::channel::{run_channel, ChannelConfig};
use crate::error::{Error, Result};
use crate::io::config::{Experiment, RunConfig};
use crate::io::output::{emit_rate_table, format_rate_table};
use crate::linsolve::SolverSettings;
use crate::mms::{convergence_study, refinement_levels, run_mms, MmsConfig, RateTable};
use crate::scheme::{EnergyReport, MatrixSharing, MonitorConstants, RunSummary, SchemeOptions};

/// Files written by a run.
#[derive(Debug, Default)]
pub struct RunOutput {
    pub files: Vec<PathBuf>,
    pub table: Option<RateTable>,
    pub energy: Option<EnergyReport>,
}

fn scheme_options(cfg: &RunConfig) -> SchemeOptions {
    SchemeOptions {
        convection: cfg.convection,
        sharing: if cfg.naive { MatrixSharing::Naive } else { MatrixSharing::Shared },
        solver: SolverSettings { kind: cfg.solver, parallel_solves: cfg.threads != 1, ..Default::default() },
        parallel: cfg.threads != 1,
        monitor: MonitorConstants { c: cfg.c, c_i: cfg.c_i },
        ..Default::default()
    }
}

fn mms_config(cfg: &RunConfig) -> MmsConfig {
    MmsConfig {
        n: cfg.n,
        t_end: cfg.t_end,
        eps: cfg.eps,
        members: cfg.members,
        nu: cfg.nu,
        nu_m: cfg.nu_m,
        bootstrap: cfg.bootstrap,
        options: scheme_options(cfg),
        ..Default::default()
    }
}

/// Per-run instrumentation lines: assemblies, factorizations, solves, divergence.
fn counters_text(label: &str, summary: &RunSummary) -> String {
    let rec = &summary.records;
    let sum = |f: fn(&crate::scheme::StepRecord) -> usize| rec.iter().map(f).sum::<usize>();
    let rho = rec.iter().map(|r| r.rho).fold(0.0, f64::max);
    format!(
        "{label}: steps={} assemblies={} factorizations={} solves={} max_div_ratio={:.3e} max_rho={:.3e}\n",
        rec.len(),
        sum(|r| r.matrix_assemblies),
        sum(|r| r.counters.factorizations),
        sum(|r| r.counters.solves),
        summary.max_divergence_ratio(),
        rho
    )
}

fn energy_csv(report: &EnergyReport) -> String {
    let mut s = String::from("member,final_norms,dissipation,initial_norms,forcing,lhs,rhs,holds\n");
    for (j, m) in report.members.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{}",
            j + 1,
            m.final_norms,
            m.dissipation,
            m.initial_norms,
            m.forcing,
            m.lhs(),
            m.rhs(),
            m.holds()
        );
    }
    s
}

/// Runs the configured experiment and writes its outputs under `cfg.out`,
/// starting with the resolved config echo.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    fs::create_dir_all(&cfg.out)?;
    let echo = cfg.out.join("config.txt");
    fs::write(&echo, cfg.echo())?;
    let mut out = RunOutput { files: vec![echo], ..Default::default() };
    match cfg.experiment {
        Experiment::Converge => converge(cfg, &mut out)?,
        Experiment::Channel => channel(cfg, &mut out)?,
        Experiment::Energy => energy(cfg, &mut out)?,
    }
    Ok(out)
}

fn converge(cfg: &RunConfig, out: &mut RunOutput) -> Result<()> {
    if cfg.levels == 0 {
        return Err(Error::Config("levels must be at least 1".into()));
    }
    let levels = refinement_levels(cfg.levels, cfg.steps()?);
    let study = convergence_study(&mms_config(cfg), &levels);
    let mut counters = String::new();
    for (r, &(n, steps)) in study.results.iter().zip(&levels) {
        counters.push_str(&counters_text(&format!("n={n} M={steps}"), &r.summary));
    }
    let path = cfg.out.join("counters.txt");
    fs::write(&path, counters)?;
    out.files.push(path);
    if !study.table.is_empty() {
        let path = cfg.out.join("rates.csv");
        emit_rate_table(&study.table, &path)?;
        out.files.push(path);
        print!("{}", format_rate_table(&study.table));
    }
    out.table = Some(study.table);
    match study.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn energy(cfg: &RunConfig, out: &mut RunOutput) -> Result<()> {
    let mut mcfg = MmsConfig { steps: cfg.steps()?, ..mms_config(cfg) };
    mcfg.options.track_energy = true;
    let res = run_mms(&mcfg)?;
    let report = res.summary.energy.clone().ok_or_else(|| Error::MissingHistory("energy was not tracked".into()))?;
    let path = cfg.out.join("energy.csv");
    fs::write(&path, energy_csv(&report))?;
    out.files.push(path);
    let path = cfg.out.join("counters.txt");
    fs::write(&path, counters_text("energy", &res.summary))?;
    out.files.push(path);
    println!("energy inequality holds: {}", report.holds());
    if !report.holds() {
        warn!("energy inequality violated ({:?} convection)", cfg.convection);
    }
    out.energy = Some(report);
    Ok(())
}

fn channel(cfg: &RunConfig, out: &mut RunOutput) -> Result<()> {
    let mut options = scheme_options(cfg);
    options.track_energy = true;
    let ccfg = ChannelConfig {
        cells_per_unit: cfg.cells_per_unit,
        dt: cfg.dt,
        t_end: cfg.t_end,
        eps: cfg.eps,
        nu: cfg.nu,
        nu_m: cfg.nu_m,
        members: cfg.members,
        snapshot_interval: cfg.snapshot_interval,
        out_dir: Some(cfg.out.clone()),
        bootstrap: cfg.bootstrap,
        options,
        ..Default::default()
    };
    let res = run_channel(&ccfg)?;
    info!("inflow flux {:.6}, outflow flux {:.6}", res.inflow_flux, res.outflow_flux);
    let mut summary = counters_text("channel", &res.summary);
    let _ = writeln!(summary, "inflow_flux={:.6e} outflow_flux={:.6e}", res.inflow_flux, res.outflow_flux);
    let _ = writeln!(summary, "boundary_constant={} reconstruction_error={:.3e}", res.boundary_constant, res.reconstruction_error);
    let path = cfg.out.join("counters.txt");
    fs::write(&path, summary)?;
    out.files.push(path);
    if let Some(report) = &res.summary.energy {
        let path = cfg.out.join("energy.csv");
        fs::write(&path, energy_csv(report))?;
        out.files.push(path);
    }
    out.files.extend(res.snapshots);
    out.energy = res.summary.energy;
    Ok(())
}

/// Process exit code for an error: 2 for solver failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_solver_failure() {
        2
    } else {
        1
    }
}
