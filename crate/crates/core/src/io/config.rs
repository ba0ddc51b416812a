//! `key=value` run configuration.
//!
//! Resolution order: experiment defaults, then the config file, then flags.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fem::ConvectionForm;
use crate::linsolve::SolverKind;
use crate::scheme::Bootstrap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Converge,
    Channel,
    Energy,
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "converge" => Ok(Self::Converge),
            "channel" => Ok(Self::Channel),
            "energy" => Ok(Self::Energy),
            _ => Err(Error::Config(format!("unknown experiment {s:?}"))),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Converge => "converge",
            Self::Channel => "channel",
            Self::Energy => "energy",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub nu: f64,
    pub nu_m: f64,
    /// Time step; for `converge` the step of the coarsest level.
    pub dt: f64,
    pub t_end: f64,
    pub eps: f64,
    pub levels: usize,
    pub members: usize,
    /// Cells per side of the unit square (`energy`).
    pub n: usize,
    pub cells_per_unit: usize,
    pub out: PathBuf,
    /// 0 lets rayon pick.
    pub threads: usize,
    pub solver: SolverKind,
    pub convection: ConvectionForm,
    pub bootstrap: Bootstrap,
    pub naive: bool,
    pub snapshot_interval: usize,
    pub c: f64,
    pub c_i: f64,
}

impl RunConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let base = Self {
            experiment,
            nu: 0.01,
            nu_m: 0.001,
            dt: 0.00025,
            t_end: 0.001,
            eps: 0.001,
            levels: 5,
            members: 4,
            n: 8,
            cells_per_unit: 1,
            out: PathBuf::from("out"),
            threads: 1,
            solver: SolverKind::Direct,
            convection: ConvectionForm::Standard,
            bootstrap: Bootstrap::Exact,
            naive: false,
            snapshot_interval: 100,
            c: 1.0,
            c_i: 1.0,
        };
        match experiment {
            Experiment::Converge => base,
            Experiment::Channel => Self {
                nu: 0.001,
                nu_m: 1.0,
                dt: 0.001,
                t_end: 2.0,
                bootstrap: Bootstrap::BackwardEuler,
                ..base
            },
            Experiment::Energy => Self { dt: 0.001 / 16.0, convection: ConvectionForm::Skew, ..base },
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "experiment" => self.experiment = value.parse()?,
            "nu" => self.nu = parse(key, value)?,
            "nu_m" | "num" => self.nu_m = parse(key, value)?,
            "dt" => self.dt = parse(key, value)?,
            "T" => self.t_end = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "levels" => self.levels = parse(key, value)?,
            "J" => self.members = parse(key, value)?,
            "n" => self.n = parse(key, value)?,
            "cells_per_unit" => self.cells_per_unit = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "threads" => self.threads = parse(key, value)?,
            "solver" => {
                self.solver = match value {
                    "direct" => SolverKind::Direct,
                    "iterative" => SolverKind::Iterative,
                    _ => return Err(mismatch(key, value, "direct|iterative")),
                }
            }
            "convection" => {
                self.convection = match value {
                    "standard" => ConvectionForm::Standard,
                    "skew" => ConvectionForm::Skew,
                    _ => return Err(mismatch(key, value, "standard|skew")),
                }
            }
            "bootstrap" => {
                self.bootstrap = match value {
                    "be" => Bootstrap::BackwardEuler,
                    "exact" => Bootstrap::Exact,
                    _ => return Err(mismatch(key, value, "be|exact")),
                }
            }
            "naive" => self.naive = parse(key, value)?,
            "snapshot_interval" => self.snapshot_interval = parse(key, value)?,
            "c" => self.c = parse(key, value)?,
            "c_i" => self.c_i = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Number of coarse-level steps, `T / dt`, which must be an integer.
    pub fn steps(&self) -> Result<usize> {
        let m = self.t_end / self.dt;
        if !(m.is_finite() && m >= 0.5 && (m - m.round()).abs() <= 1e-9 * m.max(1.0)) {
            return Err(Error::Config(format!("T / dt = {m} is not a positive integer")));
        }
        Ok(m.round() as usize)
    }

    /// Every resolved key, one `key = value` line each.
    pub fn echo(&self) -> String {
        let solver = match self.solver {
            SolverKind::Direct => "direct",
            SolverKind::Iterative => "iterative",
        };
        let convection = match self.convection {
            ConvectionForm::Standard => "standard",
            ConvectionForm::Skew => "skew",
        };
        let bootstrap = match self.bootstrap {
            Bootstrap::BackwardEuler => "be",
            Bootstrap::Exact => "exact",
        };
        let pairs: [(&str, String); 19] = [
            ("experiment", self.experiment.to_string()),
            ("nu", self.nu.to_string()),
            ("nu_m", self.nu_m.to_string()),
            ("dt", self.dt.to_string()),
            ("T", self.t_end.to_string()),
            ("eps", self.eps.to_string()),
            ("levels", self.levels.to_string()),
            ("J", self.members.to_string()),
            ("n", self.n.to_string()),
            ("cells_per_unit", self.cells_per_unit.to_string()),
            ("out", self.out.display().to_string()),
            ("threads", self.threads.to_string()),
            ("solver", solver.into()),
            ("convection", convection.into()),
            ("bootstrap", bootstrap.into()),
            ("naive", self.naive.to_string()),
            ("snapshot_interval", self.snapshot_interval.to_string()),
            ("c", self.c.to_string()),
            ("c_i", self.c_i.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| mismatch(key, value, std::any::type_name::<T>()))
}

fn mismatch(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("bad value {value:?} for key {key:?}: expected {want}"))
}

/// `key=value` pairs of a config file, with `#` comments and blank lines dropped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter_map(|(i, line)| {
            let line = line.split('#').next().unwrap_or("").trim();
            (!line.is_empty()).then_some((i + 1, line))
        })
        .map(|(lineno, line)| {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {lineno}: expected key=value, got {line:?}")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Resolves a configuration from an optional experiment (the subcommand), the
/// config file text and flag overrides.
pub fn parse_config(experiment: Option<Experiment>, file: &str, flags: &[(String, String)]) -> Result<RunConfig> {
    let pairs = parse_pairs(file)?;
    let from_file = pairs.iter().rev().find(|(k, _)| k == "experiment").map(|(_, v)| v.parse()).transpose()?;
    let experiment = experiment.or(from_file).ok_or_else(|| Error::Config("missing experiment".into()))?;
    let mut cfg = RunConfig::defaults(experiment);
    for (k, v) in pairs.iter().chain(flags).filter(|(k, _)| k != "experiment") {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}
