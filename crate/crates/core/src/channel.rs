//! MHD channel flow over a forward-facing step.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;

use crate::error::{Error, Result};
use crate::fem::MixedSpace;
use crate::io::output::{write_vtk, VtkField};
use crate::mesh::{BoundaryTag, Mesh};
use crate::mms::PerturbationEnsemble;
use crate::scheme::{
    from_elsasser, Bootstrap, EnsembleProblem, EnsembleState, EnsembleStepper, PhysParams, RunSummary,
    SchemeOptions, TimeParams,
};

/// Channel height; the parabolic profile vanishes at `y = 0` and `y = H`.
pub const CHANNEL_HEIGHT: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct ChannelConfig {
    pub cells_per_unit: usize,
    pub dt: f64,
    pub t_end: f64,
    pub eps: f64,
    pub nu: f64,
    pub nu_m: f64,
    pub members: usize,
    /// Also scale the magnetic data by the member factors.
    pub perturb_magnetic: bool,
    /// Steps between snapshots; 0 disables intermediate snapshots.
    pub snapshot_interval: usize,
    pub out_dir: Option<PathBuf>,
    pub bootstrap: Bootstrap,
    pub options: SchemeOptions,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            cells_per_unit: 1,
            dt: 0.001,
            t_end: 2.0,
            eps: 0.001,
            nu: 0.001,
            nu_m: 1.0,
            members: 4,
            perturb_magnetic: false,
            snapshot_interval: 100,
            out_dir: None,
            bootstrap: Bootstrap::BackwardEuler,
            options: SchemeOptions { track_energy: true, ..Default::default() },
        }
    }
}

/// Inflow profile `y (10 - y) / 25`.
pub fn inflow_profile(y: f64) -> f64 {
    y * (CHANNEL_HEIGHT - y) / 25.0
}

/// Unperturbed physical boundary data `(u, B)`.
pub fn channel_bc(tag: BoundaryTag, x: [f64; 2]) -> Result<([f64; 2], [f64; 2])> {
    match tag {
        BoundaryTag::Wall | BoundaryTag::Step => Ok(([0.0, 0.0], [0.0, 1.0])),
        BoundaryTag::Inlet | BoundaryTag::Outlet => Ok(([inflow_profile(x[1]), 0.0], [0.0, 1.0])),
        BoundaryTag::Interior => Err(Error::MissingBoundaryData(tag)),
    }
}

fn elsasser(u: [f64; 2], b: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    ([u[0] + b[0], u[1] + b[1]], [u[0] - b[0], u[1] - b[1]])
}

#[derive(Clone, Debug)]
pub struct ChannelProblem {
    pub ensemble: PerturbationEnsemble,
    pub perturb_magnetic: bool,
}

impl ChannelProblem {
    fn scale(&self, j: usize, (u, b): ([f64; 2], [f64; 2])) -> ([f64; 2], [f64; 2]) {
        let s = self.ensemble.factors()[j];
        let sb = if self.perturb_magnetic { s } else { 1.0 };
        elsasser(u.map(|c| s * c), b.map(|c| sb * c))
    }
}

impl EnsembleProblem for ChannelProblem {
    fn members(&self) -> usize {
        self.ensemble.len()
    }

    fn initial(&self, j: usize, x: [f64; 2]) -> ([f64; 2], [f64; 2]) {
        self.scale(j, ([inflow_profile(x[1]), 0.0], [0.0, 1.0]))
    }

    fn forcing(&self, _: usize, _: [f64; 2], _: f64) -> ([f64; 2], [f64; 2]) {
        ([0.0; 2], [0.0; 2])
    }

    fn boundary(&self, j: usize, tag: BoundaryTag, x: [f64; 2], _: f64) -> Result<([f64; 2], [f64; 2])> {
        channel_bc(tag, x).map(|d| self.scale(j, d))
    }

    fn has_forcing(&self) -> bool {
        false
    }
}

/// `integral u_x dy` over the facets tagged `tag`, using the Q2 trace (exact for it).
pub fn boundary_flux(space: &MixedSpace, u: &[f64], tag: BoundaryTag) -> f64 {
    let mesh = space.mesh();
    let nv = mesh.num_vertices();
    mesh.boundary_facets()
        .filter(|(_, f)| f.tag == tag)
        .map(|(k, f)| {
            let [a, b] = f.vertices;
            let (pa, pb) = (mesh.vertices()[a], mesh.vertices()[b]);
            let len = (pb[1] - pa[1]).abs();
            // Simpson's rule integrates the quadratic trace exactly
            len / 6.0 * (u[a] + 4.0 * u[nv + k] + u[b])
        })
        .sum()
}

/// Output of a channel run.
#[derive(Debug)]
pub struct ChannelResult {
    pub summary: RunSummary,
    pub snapshots: Vec<PathBuf>,
    /// Inflow flux of the ensemble-mean velocity at the final step.
    pub inflow_flux: f64,
    pub outflow_flux: f64,
    /// Boundary values of every member never changed after the first step.
    pub boundary_constant: bool,
    /// Largest `|(v + w)/2 - u|` over members and DOFs, recomputed from the
    /// written physical fields.
    pub reconstruction_error: f64,
}

pub fn run_channel(cfg: &ChannelConfig) -> Result<ChannelResult> {
    let mesh = Arc::new(Mesh::step_channel(cfg.cells_per_unit)?);
    let space = Arc::new(MixedSpace::new(mesh));
    let phys = PhysParams::new(cfg.nu, cfg.nu_m)?;
    let time = TimeParams::new(cfg.dt, cfg.t_end)?;
    let problem =
        ChannelProblem { ensemble: PerturbationEnsemble::new(cfg.eps, cfg.members)?, perturb_magnetic: cfg.perturb_magnetic };
    let stepper = EnsembleStepper::new(space.clone(), phys, time, cfg.options.clone())?;
    info!(
        "channel: {} cells, {} velocity and {} pressure unknowns, {} steps",
        space.mesh().num_cells(),
        space.n_u(),
        space.n_p(),
        time.steps()
    );

    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut snapshots = Vec::new();
    let write = |state: &EnsembleState, snapshots: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = &cfg.out_dir {
            snapshots.extend(write_snapshots(dir, &space, state)?);
        }
        Ok(())
    };
    write(&stepper.initial_state(&problem)?, &mut snapshots)?;

    let constrained = space.constrained_dofs();
    let mut first_boundary: Option<Vec<Vec<f64>>> = None;
    let mut boundary_constant = true;
    let mut reconstruction_error: f64 = 0.0;
    let steps = time.steps();
    let summary = stepper.run(&problem, cfg.bootstrap, |state, _| {
        let bvals: Vec<Vec<f64>> = state
            .members
            .iter()
            .flat_map(|m| [&m.v, &m.w])
            .map(|f| constrained.iter().map(|&d| f[d]).collect())
            .collect();
        match &first_boundary {
            None => first_boundary = Some(bvals),
            Some(b0) => boundary_constant &= *b0 == bvals,
        }
        for m in &state.members {
            let (u, b) = m.physical();
            let (v, w) = crate::scheme::to_elsasser(&u, &b)?;
            let (u2, _) = from_elsasser(&v, &w)?;
            let err = u.iter().zip(&u2).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
            reconstruction_error = reconstruction_error.max(err);
        }
        let due = cfg.snapshot_interval > 0 && state.step % cfg.snapshot_interval == 0;
        if due || state.step == steps {
            write(state, &mut snapshots)?;
        }
        Ok(())
    })?;

    let (mean_u, _) = mean_physical(&summary.final_state);
    Ok(ChannelResult {
        inflow_flux: boundary_flux(&space, &mean_u, BoundaryTag::Inlet),
        outflow_flux: boundary_flux(&space, &mean_u, BoundaryTag::Outlet),
        summary,
        snapshots,
        boundary_constant,
        reconstruction_error,
    })
}

/// Ensemble means of `u` and `B` at the current level.
pub fn mean_physical(state: &EnsembleState) -> (Vec<f64>, Vec<f64>) {
    let v = state.mean_of(|m| &m.v);
    let w = state.mean_of(|m| &m.w);
    from_elsasser(&v, &w).expect("fields share a length")
}

fn magnitude(space: &MixedSpace, b: &[f64]) -> Vec<f64> {
    let n = space.n_nodes();
    (0..n).map(|i| b[i].hypot(b[n + i])).collect()
}

/// Writes `channel_mean_<step>.vtk` and `channel_member<j>_<step>.vtk`, each with
/// point fields `u`, `B` and `B_mag`.
pub fn write_snapshots(dir: &Path, space: &MixedSpace, state: &EnsembleState) -> Result<Vec<PathBuf>> {
    let mut files = Vec::with_capacity(state.members.len() + 1);
    let mut emit = |label: String, u: &[f64], b: &[f64]| -> Result<()> {
        let path = dir.join(format!("channel_{label}_{:06}.vtk", state.step));
        let mag = magnitude(space, b);
        write_vtk(
            &path,
            space,
            &format!("{label} t={}", state.time),
            &[("u", VtkField::Velocity(u)), ("B", VtkField::Velocity(b)), ("B_mag", VtkField::Scalar(&mag))],
        )?;
        files.push(path);
        Ok(())
    };
    let (u, b) = mean_physical(state);
    emit("mean".into(), &u, &b)?;
    for (j, m) in state.members.iter().enumerate() {
        let (u, b) = m.physical();
        emit(format!("member{}", j + 1), &u, &b)?;
    }
    Ok(files)
}
