//! Decoupled BDF2 ensemble scheme in Elsasser variables.
//!
//! Each time step solves two Oseen problems, one for `v = u + B` and one for
//! `w = u - B`. The implicit convecting field is the ensemble mean of the
//! extrapolated other variable, so within a sub-step every member sees the same
//! matrix: it is factored once and applied to `J` right-hand sides. Member
//! deviations from the mean are treated explicitly.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{
    assemble_convection, assemble_div, assemble_mass, assemble_rhs, assemble_stiffness, convection_action,
    integrate_squared, ConvectionForm, CsrMatrix, MixedSpace, SaddleLayout,
};
use crate::linsolve::{CounterSnapshot, Factorization, LinearSolver, SolverSettings};
use crate::mesh::BoundaryTag;

/// Largest accepted `|B v| / |v|` after a solve.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysParams {
    nu: f64,
    nu_m: f64,
    alpha: f64,
}

impl PhysParams {
    pub fn new(nu: f64, nu_m: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) || !(nu_m > 0.0 && nu_m.is_finite()) {
            return Err(Error::InvalidArgument(format!("viscosities must be positive, got nu={nu}, nu_m={nu_m}")));
        }
        Ok(Self { nu, nu_m, alpha: nu + nu_m - (nu - nu_m).abs() })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn nu_m(&self) -> f64 {
        self.nu_m
    }

    /// `nu + nu_m - |nu - nu_m|`, i.e. twice the smaller viscosity.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Coefficient of the implicit Laplacian.
    pub fn diffusion(&self) -> f64 {
        0.5 * (self.nu + self.nu_m)
    }

    /// Coefficient of the explicit cross-diffusion term.
    pub fn cross_diffusion(&self) -> f64 {
        0.5 * (self.nu - self.nu_m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeParams {
    dt: f64,
    t_end: f64,
    steps: usize,
}

impl TimeParams {
    /// Requires `t_end / dt` to be an integer up to `1e-12` relative.
    pub fn new(dt: f64, t_end: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) || !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::InvalidArgument(format!("need dt > 0 and T > 0, got dt={dt}, T={t_end}")));
        }
        let m = (t_end / dt).round();
        if m < 1.0 || ((m * dt - t_end) / t_end).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("T={t_end} is not an integer multiple of dt={dt}")));
        }
        Ok(Self { dt, t_end, steps: m as usize })
    }

    pub fn from_steps(t_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("step count must be positive".into()));
        }
        Self::new(t_end / steps as f64, t_end)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    Ok(())
}

/// `(v, w) = (u + B, u - B)`.
pub fn to_elsasser(u: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_same_len(u, b)?;
    Ok((u.iter().zip(b).map(|(x, y)| x + y).collect(), u.iter().zip(b).map(|(x, y)| x - y).collect()))
}

/// `(u, B) = ((v + w) / 2, (v - w) / 2)`.
pub fn from_elsasser(v: &[f64], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_same_len(v, w)?;
    Ok((
        v.iter().zip(w).map(|(x, y)| 0.5 * (x + y)).collect(),
        v.iter().zip(w).map(|(x, y)| 0.5 * (x - y)).collect(),
    ))
}

/// `2 cur - prev`.
pub fn extrapolate(cur: &[f64], prev: &[f64]) -> Vec<f64> {
    cur.iter().zip(prev).map(|(c, p)| 2.0 * c - p).collect()
}

/// Mean of the given member fields and each member's deviation from it.
pub fn mean_and_fluctuations(fields: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let first = fields.first().ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))?;
    for f in fields {
        check_same_len(first, f)?;
    }
    let inv = 1.0 / fields.len() as f64;
    let mut mean = vec![0.0; first.len()];
    for f in fields {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv);
    let fluct = fields.iter().map(|f| f.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    Ok((mean, fluct))
}

/// Ensemble mean of the extrapolants `2 u_j^n - u_j^{n-1}` and the member fluctuations.
pub fn ensemble_mean_fluct(current: &[Vec<f64>], previous: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if current.len() != previous.len() {
        return Err(Error::DimensionMismatch { expected: current.len(), got: previous.len() });
    }
    let ex = current
        .iter()
        .zip(previous)
        .map(|(c, p)| check_same_len(c, p).map(|_| extrapolate(c, p)))
        .collect::<Result<Vec<_>>>()?;
    mean_and_fluctuations(&ex)
}

/// Data of one ensemble problem, given pointwise in Elsasser variables.
/// Member indices are zero based.
pub trait EnsembleProblem: Sync {
    fn members(&self) -> usize;

    /// `(v, w)` at `t = 0`.
    fn initial(&self, member: usize, x: [f64; 2]) -> ([f64; 2], [f64; 2]);

    /// `(f1, f2)`.
    fn forcing(&self, member: usize, x: [f64; 2], t: f64) -> ([f64; 2], [f64; 2]);

    /// Dirichlet data `(v, w)` on a boundary node carrying `tag`.
    fn boundary(&self, member: usize, tag: BoundaryTag, x: [f64; 2], t: f64) -> Result<([f64; 2], [f64; 2])>;

    /// Exact solution, when known.
    fn exact(&self, _member: usize, _x: [f64; 2], _t: f64) -> Option<([f64; 2], [f64; 2])> {
        None
    }

    /// False when the forcing vanishes identically, which skips its assembly.
    fn has_forcing(&self) -> bool {
        true
    }
}

/// Which Elsasser variable a sub-step solves for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variable {
    V,
    W,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Bootstrap {
    /// One decoupled backward-Euler step.
    #[default]
    BackwardEuler,
    /// Interpolate the exact solution at `t = dt`.
    Exact,
}

/// Treatment of the explicit convection data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Extrapolation {
    /// `2 u^n - u^{n-1}`, second order.
    #[default]
    Second,
    /// `u^n`, first order; only useful as a negative control.
    Lagged,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MatrixSharing {
    /// One matrix and factorization per sub-step, shared by all members.
    #[default]
    Shared,
    /// Every member assembles and factors its own matrix.
    Naive,
}

/// Constants of the time-step restriction monitor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonitorConstants {
    pub c: f64,
    pub c_i: f64,
}

impl Default for MonitorConstants {
    fn default() -> Self {
        Self { c: 1.0, c_i: 1.0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SchemeOptions {
    pub convection: ConvectionForm,
    pub extrapolation: Extrapolation,
    pub sharing: MatrixSharing,
    pub solver: SolverSettings,
    /// Run the two sub-steps and the member right-hand sides on the rayon pool.
    pub parallel: bool,
    pub monitor: MonitorConstants,
    /// Steps at which member-wise matrices are rebuilt and compared bitwise.
    pub audit_steps: Vec<usize>,
    pub track_energy: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemberState {
    pub v: Vec<f64>,
    pub v_prev: Vec<f64>,
    pub w: Vec<f64>,
    pub w_prev: Vec<f64>,
    /// Pressures of the v and w sub-problems at the current level.
    pub q: Vec<f64>,
    pub r: Vec<f64>,
}

impl MemberState {
    fn own(&self, var: Variable) -> (&[f64], &[f64]) {
        match var {
            Variable::V => (&self.v, &self.v_prev),
            Variable::W => (&self.w, &self.w_prev),
        }
    }

    fn other(&self, var: Variable) -> (&[f64], &[f64]) {
        match var {
            Variable::V => (&self.w, &self.w_prev),
            Variable::W => (&self.v, &self.v_prev),
        }
    }

    /// Physical fields `(u, B)` at the current level.
    pub fn physical(&self) -> (Vec<f64>, Vec<f64>) {
        from_elsasser(&self.v, &self.w).expect("member fields share a length")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleState {
    pub members: Vec<MemberState>,
    /// Index `n` of the current level.
    pub step: usize,
    pub time: f64,
}

impl EnsembleState {
    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    /// Plain mean of a member field at the current level.
    pub fn mean_of<F: Fn(&MemberState) -> &[f64]>(&self, field: F) -> Vec<f64> {
        let fields: Vec<Vec<f64>> = self.members.iter().map(|m| field(m).to_vec()).collect();
        mean_and_fluctuations(&fields).expect("nonempty ensemble").0
    }
}

/// Instrumentation for one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub matrix_assemblies: usize,
    pub counters: CounterSnapshot,
    /// Largest `|B u| / |u|` over all members and both variables.
    pub max_divergence_ratio: f64,
    /// Time-step restriction ratio at the level the step started from.
    pub rho: f64,
    /// Result of the member-wise matrix audit, when requested for this step.
    pub matrices_identical: Option<bool>,
}

struct SubstepOutput {
    fields: Vec<(Vec<f64>, Vec<f64>)>,
    max_divergence_ratio: f64,
    matrices_identical: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StepKind {
    BackwardEuler,
    Bdf2,
}

/// Per-member energy balance of the scheme. The dual forcing norm is replaced
/// by the L2 norm.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberEnergy {
    /// `|v^M|^2 + |w^M|^2 + |2v^M - v^{M-1}|^2 + |2w^M - w^{M-1}|^2`
    pub final_norms: f64,
    /// `alpha dt sum_{n=2}^{M} (|grad v^n|^2 + |grad w^n|^2)`
    pub dissipation: f64,
    /// The same norm combination as `final_norms`, at level 1.
    pub initial_norms: f64,
    /// `(12 dt / alpha) sum_{n=2}^{M} (|f1(t^n)|^2 + |f2(t^n)|^2)`
    pub forcing: f64,
}

impl MemberEnergy {
    pub fn lhs(&self) -> f64 {
        self.final_norms + self.dissipation
    }

    pub fn rhs(&self) -> f64 {
        self.initial_norms + self.forcing
    }

    pub fn holds(&self) -> bool {
        self.lhs() <= self.rhs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub members: Vec<MemberEnergy>,
}

impl EnergyReport {
    pub fn holds(&self) -> bool {
        self.members.iter().all(MemberEnergy::holds)
    }

    pub fn is_finite(&self) -> bool {
        self.members.iter().all(|m| {
            [m.final_norms, m.dissipation, m.initial_norms, m.forcing].iter().all(|v| v.is_finite() && *v >= 0.0)
        })
    }
}

#[derive(Clone, Debug)]
struct EnergyTracker {
    members: Vec<MemberEnergy>,
}

/// Outcome of a complete run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<StepRecord>,
    pub energy: Option<EnergyReport>,
    pub final_state: EnsembleState,
}

impl RunSummary {
    pub fn max_divergence_ratio(&self) -> f64 {
        self.records.iter().map(|r| r.max_divergence_ratio).fold(0.0, f64::max)
    }

    pub fn total_factorizations(&self) -> usize {
        self.records.iter().map(|r| r.counters.factorizations).sum()
    }
}

/// Assembled operators and solver shared across the steps of one run.
pub struct EnsembleStepper {
    space: Arc<MixedSpace>,
    layout: SaddleLayout,
    mass: CsrMatrix,
    stiffness: CsrMatrix,
    phys: PhysParams,
    time: TimeParams,
    options: SchemeOptions,
    solver: LinearSolver,
    assemblies: AtomicUsize,
}

impl std::fmt::Debug for EnsembleStepper {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnsembleStepper")
            .field("n_u", &self.space.n_u())
            .field("n_p", &self.space.n_p())
            .field("phys", &self.phys)
            .field("time", &self.time)
            .field("options", &self.options)
            .finish()
    }
}

impl EnsembleStepper {
    pub fn new(space: Arc<MixedSpace>, phys: PhysParams, time: TimeParams, options: SchemeOptions) -> Result<Self> {
        let layout = SaddleLayout::new(&space, assemble_div(&space))?;
        let mass = assemble_mass(&space);
        let stiffness = assemble_stiffness(&space);
        let solver = LinearSolver::new(options.solver);
        Ok(Self { space, layout, mass, stiffness, phys, time, options, solver, assemblies: AtomicUsize::new(0) })
    }

    pub fn space(&self) -> &Arc<MixedSpace> {
        &self.space
    }

    pub fn phys(&self) -> &PhysParams {
        &self.phys
    }

    pub fn time(&self) -> &TimeParams {
        &self.time
    }

    pub fn options(&self) -> &SchemeOptions {
        &self.options
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    pub fn solver(&self) -> &LinearSolver {
        &self.solver
    }

    /// Level-0 state from the problem's initial data (both stored levels equal).
    pub fn initial_state<P: EnsembleProblem>(&self, problem: &P) -> Result<EnsembleState> {
        if problem.members() == 0 {
            return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
        }
        let members = (0..problem.members())
            .map(|j| {
                let v = self.space.interpolate(|x| problem.initial(j, x).0);
                let w = self.space.interpolate(|x| problem.initial(j, x).1);
                MemberState {
                    v_prev: v.clone(),
                    w_prev: w.clone(),
                    v,
                    w,
                    q: vec![0.0; self.space.n_p()],
                    r: vec![0.0; self.space.n_p()],
                }
            })
            .collect();
        Ok(EnsembleState { members, step: 0, time: 0.0 })
    }

    /// `(cross-diffusion coefficient) * K x`, the explicit coupling load.
    pub fn cross_diffusion_term(&self, x: &[f64]) -> Vec<f64> {
        let c = self.phys.cross_diffusion();
        self.stiffness.matvec(x).into_iter().map(|v| c * v).collect()
    }

    /// Time-step restriction ratio for the current level; above 1 the stability
    /// condition is violated for the chosen constants.
    pub fn monitor_dt(&self, state: &EnsembleState) -> Result<f64> {
        let cur_v: Vec<Vec<f64>> = state.members.iter().map(|m| m.v.clone()).collect();
        let prev_v: Vec<Vec<f64>> = state.members.iter().map(|m| m.v_prev.clone()).collect();
        let cur_w: Vec<Vec<f64>> = state.members.iter().map(|m| m.w.clone()).collect();
        let prev_w: Vec<Vec<f64>> = state.members.iter().map(|m| m.w_prev.clone()).collect();
        let (_, fv) = ensemble_mean_fluct(&cur_v, &prev_v)?;
        let (_, fw) = ensemble_mean_fluct(&cur_w, &prev_w)?;
        let max_grad = fv
            .iter()
            .chain(&fw)
            .map(|f| self.stiffness.inner(f, f).max(0.0).sqrt())
            .fold(0.0, f64::max);
        let MonitorConstants { c, c_i } = self.options.monitor;
        let diff = self.phys.nu - self.phys.nu_m;
        let h = self.space.mesh().max_edge_length();
        Ok(self.time.dt * (3.0 * diff * diff * c_i + 12.0 * c * c * c_i * c_i * max_grad)
            / (self.phys.alpha * h * h))
    }

    /// Level-1 state from level 0.
    pub fn bootstrap<P: EnsembleProblem>(
        &self,
        state: &mut EnsembleState,
        problem: &P,
        mode: Bootstrap,
    ) -> Result<StepRecord> {
        if state.step != 0 {
            return Err(Error::InvalidArgument(format!("bootstrap from level {}", state.step)));
        }
        match mode {
            Bootstrap::BackwardEuler => self.step(state, problem, StepKind::BackwardEuler),
            Bootstrap::Exact => {
                let t1 = self.time.time(1);
                for (j, m) in state.members.iter_mut().enumerate() {
                    let exact = |x| {
                        problem.exact(j, x, t1).ok_or_else(|| {
                            Error::InvalidArgument("exact bootstrap needs a problem with a known solution".into())
                        })
                    };
                    // probe once so a missing solution is an error, not a panic
                    exact(self.space.node_coords()[0])?;
                    let v = self.space.interpolate(|x| exact(x).map(|e| e.0).unwrap_or_default());
                    let w = self.space.interpolate(|x| exact(x).map(|e| e.1).unwrap_or_default());
                    m.v_prev = std::mem::replace(&mut m.v, v);
                    m.w_prev = std::mem::replace(&mut m.w, w);
                }
                state.step = 1;
                state.time = t1;
                Ok(StepRecord {
                    step: 1,
                    time: t1,
                    matrix_assemblies: 0,
                    counters: CounterSnapshot::default(),
                    max_divergence_ratio: 0.0,
                    rho: 0.0,
                    matrices_identical: None,
                })
            }
        }
    }

    /// One BDF2 step from levels `n, n-1` to `n+1`.
    pub fn advance<P: EnsembleProblem>(&self, state: &mut EnsembleState, problem: &P) -> Result<StepRecord> {
        if state.step == 0 {
            return Err(Error::MissingHistory("BDF2 step needs two levels; bootstrap first".into()));
        }
        self.step(state, problem, StepKind::Bdf2)
    }

    fn step<P: EnsembleProblem>(&self, state: &mut EnsembleState, problem: &P, kind: StepKind) -> Result<StepRecord> {
        if state.members.len() != problem.members() {
            return Err(Error::DimensionMismatch { expected: problem.members(), got: state.members.len() });
        }
        let step = state.step + 1;
        let rho = if kind == StepKind::Bdf2 { self.monitor_dt(state)? } else { 0.0 };
        if rho > 1.0 {
            warn!("step {step}: time-step restriction ratio {rho:.3} exceeds 1");
        }
        let before = self.solver.counters().snapshot();
        let assemblies_before = self.assemblies.load(Ordering::Relaxed);

        let wrap = |e: Error| if e.is_solver_failure() { Error::StepFailed { step, source: Box::new(e) } } else { e };
        let snapshot: &EnsembleState = state;
        let (out_v, out_w) = if self.options.parallel {
            rayon::join(
                || self.substep(snapshot, Variable::V, problem, kind),
                || self.substep(snapshot, Variable::W, problem, kind),
            )
        } else {
            (self.substep(snapshot, Variable::V, problem, kind), self.substep(snapshot, Variable::W, problem, kind))
        };
        let (out_v, out_w) = (out_v.map_err(wrap)?, out_w.map_err(wrap)?);

        let matrices_identical = match (out_v.matrices_identical, out_w.matrices_identical) {
            (Some(a), Some(b)) => Some(a && b),
            _ => None,
        };
        let max_div = out_v.max_divergence_ratio.max(out_w.max_divergence_ratio);
        if max_div > DIVERGENCE_TOLERANCE {
            warn!("step {step}: divergence residual ratio {max_div:.3e}");
        }
        for (m, ((v, q), (w, r))) in state.members.iter_mut().zip(out_v.fields.into_iter().zip(out_w.fields)) {
            m.v_prev = std::mem::replace(&mut m.v, v);
            m.w_prev = std::mem::replace(&mut m.w, w);
            m.q = q;
            m.r = r;
        }
        state.step = step;
        state.time = self.time.time(step);
        Ok(StepRecord {
            step,
            time: state.time,
            matrix_assemblies: self.assemblies.load(Ordering::Relaxed) - assemblies_before,
            counters: self.solver.counters().snapshot() - before,
            max_divergence_ratio: max_div,
            rho,
            matrices_identical,
        })
    }

    /// Velocity block `c0 M + diff K + N(a)`.
    fn velocity_block(&self, c0: f64, convecting: &[f64]) -> Result<CsrMatrix> {
        self.assemblies.fetch_add(1, Ordering::Relaxed);
        let n = assemble_convection(&self.space, convecting, self.options.convection)?;
        CsrMatrix::linear_combination(&[(c0, &self.mass), (self.phys.diffusion(), &self.stiffness), (1.0, &n)])
    }

    fn system(&self, c0: f64, convecting: &[f64]) -> Result<(CsrMatrix, CsrMatrix)> {
        let block = self.velocity_block(c0, convecting)?;
        let system = self.layout.system_matrix(&block)?;
        Ok((block, system))
    }

    fn substep<P: EnsembleProblem>(
        &self,
        state: &EnsembleState,
        var: Variable,
        problem: &P,
        kind: StepKind,
    ) -> Result<SubstepOutput> {
        let dt = self.time.dt;
        let t_new = self.time.time(state.step + 1);
        let lagged = kind == StepKind::BackwardEuler || self.options.extrapolation == Extrapolation::Lagged;
        let conv_extrap = |(cur, prev): (&[f64], &[f64])| if lagged { cur.to_vec() } else { extrapolate(cur, prev) };

        let other_ex: Vec<Vec<f64>> = state.members.iter().map(|m| conv_extrap(m.other(var))).collect();
        let (mean, fluct) = mean_and_fluctuations(&other_ex)?;

        let c0 = match kind {
            StepKind::BackwardEuler => 1.0 / dt,
            StepKind::Bdf2 => 1.5 / dt,
        };

        let member_rhs = |j: usize| -> Result<(Vec<f64>, Vec<f64>)> {
            let m = &state.members[j];
            let (own, own_prev) = m.own(var);
            let (other, other_prev) = m.other(var);
            let history: Vec<f64> = match kind {
                StepKind::BackwardEuler => own.iter().map(|x| x / dt).collect(),
                StepKind::Bdf2 => own.iter().zip(own_prev).map(|(a, b)| (4.0 * a - b) / (2.0 * dt)).collect(),
            };
            let mut rhs = self.mass.matvec(&history);
            let cross_arg = match kind {
                StepKind::BackwardEuler => other.to_vec(),
                StepKind::Bdf2 => extrapolate(other, other_prev),
            };
            let cross = self.cross_diffusion_term(&cross_arg);
            let own_ex = conv_extrap((own, own_prev));
            let fluct_conv = convection_action(&self.space, &fluct[j], &own_ex, self.options.convection)?;
            for ((r, c), n) in rhs.iter_mut().zip(&cross).zip(&fluct_conv) {
                *r -= c + n;
            }
            if problem.has_forcing() {
                let f = assemble_rhs(&self.space, |x| pick(var, problem.forcing(j, x, t_new)));
                rhs.iter_mut().zip(&f).for_each(|(r, f)| *r += f);
            }
            let g = self
                .space
                .boundary_values(|tag, x| problem.boundary(j, tag, x, t_new).map(|b| pick(var, b)))?;
            Ok((rhs, g))
        };
        let j_count = state.members.len();
        let loads: Vec<(Vec<f64>, Vec<f64>)> = if self.options.parallel {
            (0..j_count).into_par_iter().map(member_rhs).collect::<Result<_>>()?
        } else {
            (0..j_count).map(member_rhs).collect::<Result<_>>()?
        };

        let audit = self.options.audit_steps.contains(&(state.step + 1));
        let mut matrices_identical = None;
        let solutions: Vec<Vec<f64>> = match self.options.sharing {
            MatrixSharing::Shared => {
                let (block, system) = self.system(c0, &mean)?;
                if audit {
                    // Rebuild what each member would assemble on its own.
                    let mut same = true;
                    for _ in 0..j_count {
                        let n = assemble_convection(&self.space, &mean, self.options.convection)?;
                        let b = CsrMatrix::linear_combination(&[
                            (c0, &self.mass),
                            (self.phys.diffusion(), &self.stiffness),
                            (1.0, &n),
                        ])?;
                        same &= self.layout.system_matrix(&b)?.bit_eq(&system);
                    }
                    matrices_identical = Some(same);
                }
                let fact = self.solver.factor(&system)?;
                let rhs = loads
                    .iter()
                    .map(|(f, g)| self.layout.system_rhs(&block, f, g))
                    .collect::<Result<Vec<_>>>()?;
                fact.solve_many(&rhs)?
            }
            MatrixSharing::Naive => {
                let mut systems: Vec<CsrMatrix> = Vec::with_capacity(j_count);
                let mut out = Vec::with_capacity(j_count);
                for (f, g) in &loads {
                    let (block, system) = self.system(c0, &mean)?;
                    let fact: Factorization = self.solver.factor(&system)?;
                    out.push(fact.solve(&self.layout.system_rhs(&block, f, g)?)?);
                    if audit {
                        systems.push(system);
                    }
                }
                if audit {
                    matrices_identical = Some(systems.windows(2).all(|w| w[0].bit_eq(&w[1])));
                }
                out
            }
        };

        let mut max_ratio: f64 = 0.0;
        let fields = solutions
            .iter()
            .map(|x| {
                let (u, mut p) = self.layout.split_solution(x)?;
                self.space.remove_pressure_mean(&mut p);
                max_ratio = max_ratio.max(self.divergence_ratio(&u));
                Ok((u, p))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SubstepOutput { fields, max_divergence_ratio: max_ratio, matrices_identical })
    }

    /// `|B u| / |u|` in the Euclidean DOF norm (0 for a zero field).
    pub fn divergence_ratio(&self, u: &[f64]) -> f64 {
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 {
            return 0.0;
        }
        self.layout.div().matvec(u).iter().map(|x| x * x).sum::<f64>().sqrt() / nu
    }

    fn energy_start(&self, state: &EnsembleState) -> EnergyTracker {
        let members = state
            .members
            .iter()
            .map(|m| MemberEnergy {
                final_norms: 0.0,
                dissipation: 0.0,
                initial_norms: self.level_norms(m),
                forcing: 0.0,
            })
            .collect();
        EnergyTracker { members }
    }

    fn level_norms(&self, m: &MemberState) -> f64 {
        let sq = |x: &[f64]| self.mass.inner(x, x);
        sq(&m.v) + sq(&m.w) + sq(&extrapolate(&m.v, &m.v_prev)) + sq(&extrapolate(&m.w, &m.w_prev))
    }

    fn energy_record<P: EnsembleProblem>(&self, tracker: &mut EnergyTracker, state: &EnsembleState, problem: &P) {
        let (dt, alpha) = (self.time.dt, self.phys.alpha);
        for (j, (e, m)) in tracker.members.iter_mut().zip(&state.members).enumerate() {
            let grad = self.stiffness.inner(&m.v, &m.v) + self.stiffness.inner(&m.w, &m.w);
            e.dissipation += alpha * dt * grad;
            if problem.has_forcing() {
                let f1 = integrate_squared(&self.space, |x| problem.forcing(j, x, state.time).0);
                let f2 = integrate_squared(&self.space, |x| problem.forcing(j, x, state.time).1);
                e.forcing += 12.0 * dt / alpha * (f1 + f2);
            }
            e.final_norms = self.level_norms(m);
        }
    }

    /// Bootstraps and advances to the final time. `observer` sees the state
    /// after every step, starting with level 1.
    pub fn run<P, F>(&self, problem: &P, bootstrap: Bootstrap, mut observer: F) -> Result<RunSummary>
    where
        P: EnsembleProblem,
        F: FnMut(&EnsembleState, &StepRecord) -> Result<()>,
    {
        let mut state = self.initial_state(problem)?;
        let mut records = Vec::with_capacity(self.time.steps);
        let first = self.bootstrap(&mut state, problem, bootstrap)?;
        observer(&state, &first)?;
        records.push(first);
        let mut energy = self.options.track_energy.then(|| self.energy_start(&state));
        if let Some(e) = energy.as_mut() {
            // with a single step the final level is level 1
            for (me, m) in e.members.iter_mut().zip(&state.members) {
                me.final_norms = self.level_norms(m);
            }
        }
        while state.step < self.time.steps {
            let rec = self.advance(&mut state, problem)?;
            if let Some(e) = energy.as_mut() {
                self.energy_record(e, &state, problem);
            }
            observer(&state, &rec)?;
            records.push(rec);
        }
        Ok(RunSummary {
            records,
            energy: energy.map(|e| EnergyReport { members: e.members }),
            final_state: state,
        })
    }
}

/// Relative defect of the BDF2 energy identity in the inner product of `m`:
/// `(3a - 4b + c, a) = (|a|^2 + |2a - b|^2)/2 - (|b|^2 + |2b - c|^2)/2 + |a - 2b + c|^2/2`.
pub fn bdf2_identity_defect(m: &CsrMatrix, a: &[f64], b: &[f64], c: &[f64]) -> Result<f64> {
    let n = m.nrows();
    for x in [a, b, c] {
        if x.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: x.len() });
        }
    }
    let comb = |f: &dyn Fn(usize) -> f64| (0..n).map(f).collect::<Vec<f64>>();
    let sq = |x: &[f64]| m.inner(x, x);
    let lhs = m.inner(&comb(&|i| 3.0 * a[i] - 4.0 * b[i] + c[i]), a);
    let rhs = 0.5 * (sq(a) + sq(&extrapolate(a, b))) - 0.5 * (sq(b) + sq(&extrapolate(b, c)))
        + 0.5 * sq(&comb(&|i| a[i] - 2.0 * b[i] + c[i]));
    let scale = lhs.abs().max(sq(a)).max(sq(b)).max(sq(c));
    Ok(if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale })
}

fn pick(var: Variable, pair: ([f64; 2], [f64; 2])) -> [f64; 2] {
    match var {
        Variable::V => pair.0,
        Variable::W => pair.1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Mesh;
    use proptest::prelude::*;

    #[test]
    fn elsasser_examples() {
        let (v, w) = to_elsasser(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!((v.clone(), w.clone()), (vec![1.0, 1.0], vec![1.0, -1.0]));
        assert_eq!(from_elsasser(&v, &w).unwrap(), (vec![1.0, 0.0], vec![0.0, 1.0]));
        let (v, w) = to_elsasser(&[3.0, -2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(v, w);
        assert_eq!(from_elsasser(&v, &v).unwrap().1, vec![0.0, 0.0]);
        assert!(to_elsasser(&[1.0], &[1.0, 2.0]).is_err());
        assert!(from_elsasser(&[1.0], &[]).is_err());
    }

    #[test]
    fn mean_fluct_examples() {
        let (mean, fl) = ensemble_mean_fluct(&[vec![2.0], vec![0.0]], &[vec![1.0], vec![0.0]]).unwrap();
        assert_eq!(mean, vec![1.5]);
        assert_eq!(fl, vec![vec![1.5], vec![-1.5]]);
        let (_, fl) = ensemble_mean_fluct(&[vec![0.3, 4.0]], &[vec![1.0, -2.0]]).unwrap();
        assert!(fl[0].iter().all(|&x| x == 0.0));
        assert!(ensemble_mean_fluct(&[], &[]).is_err());
    }

    #[test]
    fn params_validation() {
        let p = PhysParams::new(0.01, 0.001).unwrap();
        assert!((p.alpha() - 0.002).abs() < 1e-15);
        assert!(PhysParams::new(0.0, 1.0).is_err());
        let t = TimeParams::new(0.001 / 8.0, 0.001).unwrap();
        assert_eq!(t.steps(), 8);
        assert!(TimeParams::new(0.3, 1.0).is_err());
        assert!(TimeParams::new(-1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn elsasser_round_trip(u in prop::collection::vec(-1e3f64..1e3, 1..20), seed in 0u64..1000) {
            let b: Vec<f64> = u.iter().enumerate().map(|(i, x)| x * 0.37 - (i as f64 + seed as f64)).collect();
            let (v, w) = to_elsasser(&u, &b).unwrap();
            let (u2, b2) = from_elsasser(&v, &w).unwrap();
            for (a, c) in u.iter().zip(&u2) { prop_assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0)); }
            for (a, c) in b.iter().zip(&b2) { prop_assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0)); }
        }

        #[test]
        fn fluctuations_sum_to_zero(
            fields in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 6), 1..6),
            shift in -5.0f64..5.0,
        ) {
            let prev: Vec<Vec<f64>> = fields.iter().map(|f| f.iter().map(|x| x * 0.5 + shift).collect()).collect();
            let (_, fl) = ensemble_mean_fluct(&fields, &prev).unwrap();
            for k in 0..6 {
                let s: f64 = fl.iter().map(|f| f[k]).sum();
                prop_assert!(s.abs() < 1e-12);
            }
        }
    }

    /// Zero data except for a member-dependent initial rotation.
    struct Rotating {
        scales: Vec<f64>,
        forcing: bool,
    }

    impl EnsembleProblem for Rotating {
        fn members(&self) -> usize {
            self.scales.len()
        }
        fn initial(&self, j: usize, x: [f64; 2]) -> ([f64; 2], [f64; 2]) {
            let s = self.scales[j];
            let psi = |x: [f64; 2]| [x[0] * x[0] * x[1], -x[0] * x[1] * x[1]];
            let a = psi(x);
            ([s * a[0], s * a[1]], [0.5 * s * a[0], 0.5 * s * a[1]])
        }
        fn forcing(&self, j: usize, x: [f64; 2], t: f64) -> ([f64; 2], [f64; 2]) {
            if !self.forcing {
                return ([0.0; 2], [0.0; 2]);
            }
            let s = self.scales[j];
            ([s * x[1] * (1.0 + t), s], [x[0], -s * x[0]])
        }
        fn boundary(&self, j: usize, _: BoundaryTag, x: [f64; 2], _: f64) -> Result<([f64; 2], [f64; 2])> {
            Ok(self.initial(j, x))
        }
        fn has_forcing(&self) -> bool {
            self.forcing
        }
    }

    fn stepper(n: usize, options: SchemeOptions) -> EnsembleStepper {
        let space = Arc::new(MixedSpace::new(Arc::new(Mesh::unit_square(n).unwrap())));
        EnsembleStepper::new(space, PhysParams::new(0.1, 0.05).unwrap(), TimeParams::new(0.01, 0.04).unwrap(), options)
            .unwrap()
    }

    #[test]
    fn two_factorizations_per_step_and_shared_matrices() {
        let s = stepper(3, SchemeOptions { audit_steps: vec![1, 2, 4], ..Default::default() });
        let p = Rotating { scales: vec![1.0, 1.1, 0.9, 1.2], forcing: true };
        let summary = s.run(&p, Bootstrap::BackwardEuler, |_, _| Ok(())).unwrap();
        assert_eq!(summary.records.len(), 4);
        for r in &summary.records {
            assert_eq!(r.counters.factorizations, 2);
            assert_eq!(r.counters.solves, 8);
            assert_eq!(r.matrix_assemblies, 2);
            assert!(r.max_divergence_ratio <= DIVERGENCE_TOLERANCE);
        }
        for k in [0, 1, 3] {
            assert_eq!(summary.records[k].matrices_identical, Some(true));
        }
        assert_eq!(summary.records[2].matrices_identical, None);
    }

    #[test]
    fn naive_mode_matches_shared() {
        let p = Rotating { scales: vec![1.0, 0.8, 1.3], forcing: true };
        let shared = stepper(2, SchemeOptions::default()).run(&p, Bootstrap::BackwardEuler, |_, _| Ok(())).unwrap();
        let naive = stepper(2, SchemeOptions { sharing: MatrixSharing::Naive, ..Default::default() })
            .run(&p, Bootstrap::BackwardEuler, |_, _| Ok(()))
            .unwrap();
        assert_eq!(naive.total_factorizations(), 2 * 3 * 4);
        assert_eq!(shared.total_factorizations(), 2 * 4);
        assert_eq!(shared.final_state, naive.final_state);
    }

    #[test]
    fn parallel_matches_sequential() {
        let p = Rotating { scales: vec![1.0, 0.8, 1.3, 1.1], forcing: true };
        let seq = stepper(2, SchemeOptions::default()).run(&p, Bootstrap::BackwardEuler, |_, _| Ok(())).unwrap();
        let mut opts = SchemeOptions { parallel: true, ..Default::default() };
        opts.solver.parallel_solves = true;
        let par = stepper(2, opts).run(&p, Bootstrap::BackwardEuler, |_, _| Ok(())).unwrap();
        assert_eq!(seq.final_state, par.final_state);
    }

    #[test]
    fn substeps_are_independent_of_order() {
        let s = stepper(2, SchemeOptions::default());
        let p = Rotating { scales: vec![1.0, 1.5], forcing: true };
        let mut state = s.initial_state(&p).unwrap();
        s.bootstrap(&mut state, &p, Bootstrap::BackwardEuler).unwrap();
        let v_first = s.substep(&state, Variable::V, &p, StepKind::Bdf2).unwrap();
        let w_after = s.substep(&state, Variable::W, &p, StepKind::Bdf2).unwrap();
        let w_first = s.substep(&state, Variable::W, &p, StepKind::Bdf2).unwrap();
        let v_after = s.substep(&state, Variable::V, &p, StepKind::Bdf2).unwrap();
        assert_eq!(v_first.fields, v_after.fields);
        assert_eq!(w_first.fields, w_after.fields);
    }

    #[test]
    fn zero_data_stays_zero() {
        let s = stepper(2, SchemeOptions { track_energy: true, ..Default::default() });
        let p = Rotating { scales: vec![0.0, 0.0], forcing: false };
        let summary = s.run(&p, Bootstrap::BackwardEuler, |_, _| Ok(())).unwrap();
        for m in &summary.final_state.members {
            assert!(m.v.iter().chain(&m.w).all(|&x| x == 0.0));
        }
        let e = summary.energy.unwrap();
        for m in &e.members {
            assert_eq!((m.lhs(), m.rhs()), (0.0, 0.0));
        }
        assert!(e.holds());
    }

    #[test]
    fn identical_members_stay_bit_identical() {
        let s = stepper(2, SchemeOptions::default());
        let p = Rotating { scales: vec![1.2, 1.2, 1.2], forcing: true };
        let summary = s.run(&p, Bootstrap::BackwardEuler, |st, _| {
            assert!(st.members.windows(2).all(|w| w[0] == w[1]));
            Ok(())
        });
        summary.unwrap();
    }

    #[test]
    fn permuting_members_permutes_results() {
        let s = stepper(2, SchemeOptions::default());
        let a = Rotating { scales: vec![1.0, 0.7, 1.4], forcing: true };
        let b = Rotating { scales: vec![1.4, 1.0, 0.7], forcing: true };
        let ra = s.run(&a, Bootstrap::BackwardEuler, |_, _| Ok(())).unwrap().final_state;
        let rb = s.run(&b, Bootstrap::BackwardEuler, |_, _| Ok(())).unwrap().final_state;
        // mean accumulation order differs, so compare to roundoff
        for (i, k) in [(0, 1), (1, 2), (2, 0)] {
            let (x, y) = (&ra.members[i], &rb.members[k]);
            let d = x.v.iter().zip(&y.v).chain(x.w.iter().zip(&y.w)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(d < 1e-12, "member {i}: {d}");
        }
    }

    #[test]
    fn single_member_has_no_fluctuation() {
        let s = stepper(2, SchemeOptions::default());
        let p = Rotating { scales: vec![1.3], forcing: true };
        let mut state = s.initial_state(&p).unwrap();
        s.bootstrap(&mut state, &p, Bootstrap::BackwardEuler).unwrap();
        let cur: Vec<Vec<f64>> = state.members.iter().map(|m| m.w.clone()).collect();
        let prev: Vec<Vec<f64>> = state.members.iter().map(|m| m.w_prev.clone()).collect();
        let (_, fl) = ensemble_mean_fluct(&cur, &prev).unwrap();
        assert!(fl[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn equal_viscosities_remove_cross_diffusion() {
        let space = Arc::new(MixedSpace::new(Arc::new(Mesh::unit_square(2).unwrap())));
        let s = EnsembleStepper::new(
            space.clone(),
            PhysParams::new(0.02, 0.02).unwrap(),
            TimeParams::new(0.1, 0.2).unwrap(),
            SchemeOptions::default(),
        )
        .unwrap();
        let x = space.interpolate(|p| [p[0].sin(), p[1] * p[0]]);
        assert!(s.cross_diffusion_term(&x).iter().all(|&v| v == 0.0));
        assert!((s.phys().alpha() - 0.04).abs() < 1e-15);
    }

    #[test]
    fn monitor_examples() {
        // equal viscosities and no fluctuation: rho = 0
        let space = Arc::new(MixedSpace::new(Arc::new(Mesh::unit_square(2).unwrap())));
        let make = |dt: f64, nu_m: f64| {
            EnsembleStepper::new(
                space.clone(),
                PhysParams::new(0.02, nu_m).unwrap(),
                TimeParams::new(dt, 1.0).unwrap(),
                SchemeOptions::default(),
            )
            .unwrap()
        };
        let p = Rotating { scales: vec![1.0, 1.0], forcing: false };
        let s = make(0.1, 0.02);
        let state = s.initial_state(&p).unwrap();
        assert_eq!(s.monitor_dt(&state).unwrap(), 0.0);
        // linear in dt with the state fixed
        let q = Rotating { scales: vec![1.0, 2.0], forcing: false };
        let state = make(0.1, 0.01).initial_state(&q).unwrap();
        let r1 = make(0.1, 0.01).monitor_dt(&state).unwrap();
        let r2 = make(0.05, 0.01).monitor_dt(&state).unwrap();
        assert!(r1 > 0.0 && (r1 - 2.0 * r2).abs() < 1e-12 * r1);
    }

    #[test]
    fn missing_history_and_exact_bootstrap_errors() {
        let s = stepper(1, SchemeOptions::default());
        let p = Rotating { scales: vec![1.0], forcing: false };
        let mut state = s.initial_state(&p).unwrap();
        assert!(matches!(s.advance(&mut state, &p), Err(Error::MissingHistory(_))));
        assert!(s.bootstrap(&mut state, &p, Bootstrap::Exact).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn bdf2_identity_mass_inner_product(seed in 0u64..u64::MAX) {
            use rand::{Rng, SeedableRng};
            let space = MixedSpace::new(Arc::new(Mesh::unit_square(1).unwrap()));
            let m = assemble_mass(&space);
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let mut vec = || (0..space.n_u()).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let (a, b, c) = (vec(), vec(), vec());
            prop_assert!(bdf2_identity_defect(&m, &a, &b, &c).unwrap() <= 1e-12);
        }
    }
}
