//! Manufactured solutions, perturbed ensembles and convergence studies.

use std::sync::Arc;

use log::info;

use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, Mesh};
use crate::scheme::{
    Bootstrap, EnsembleProblem, EnsembleState, EnsembleStepper, PhysParams, RunSummary, SchemeOptions, TimeParams,
};
use crate::fem::MixedSpace;

type Vec2 = [f64; 2];
/// `grad[c][d] = d u_c / d x_d`.
type Grad = [[f64; 2]; 2];

/// Closed-form divergence-free Elsasser fields with the derivatives the forcing needs.
pub trait ManufacturedFields: Sync + Send {
    fn v(&self, x: Vec2, t: f64) -> Vec2;
    fn w(&self, x: Vec2, t: f64) -> Vec2;
    fn grad_v(&self, x: Vec2, t: f64) -> Grad;
    fn grad_w(&self, x: Vec2, t: f64) -> Grad;
    fn v_t(&self, x: Vec2, t: f64) -> Vec2;
    fn w_t(&self, x: Vec2, t: f64) -> Vec2;
    fn lap_v(&self, x: Vec2, t: f64) -> Vec2;
    fn lap_w(&self, x: Vec2, t: f64) -> Vec2;
    /// Pressure of both sub-problems (the Lagrange multiplier of the magnetic
    /// constraint is zero, so `q = r = p`).
    fn p(&self, x: Vec2, t: f64) -> f64;
    fn grad_p(&self, x: Vec2, t: f64) -> Vec2;
}

/// Trigonometric solution on the unit square with `p = (x - y)(1 + t)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrigSolution;

impl ManufacturedFields for TrigSolution {
    fn v(&self, [x, y]: Vec2, t: f64) -> Vec2 {
        [y.cos() + (1.0 + t) * y.sin(), x.sin() + (1.0 + t) * x.cos()]
    }
    fn w(&self, [x, y]: Vec2, t: f64) -> Vec2 {
        [y.cos() - (1.0 + t) * y.sin(), x.sin() - (1.0 + t) * x.cos()]
    }
    fn grad_v(&self, [x, y]: Vec2, t: f64) -> Grad {
        [[0.0, -y.sin() + (1.0 + t) * y.cos()], [x.cos() - (1.0 + t) * x.sin(), 0.0]]
    }
    fn grad_w(&self, [x, y]: Vec2, t: f64) -> Grad {
        [[0.0, -y.sin() - (1.0 + t) * y.cos()], [x.cos() + (1.0 + t) * x.sin(), 0.0]]
    }
    fn v_t(&self, [x, y]: Vec2, _: f64) -> Vec2 {
        [y.sin(), x.cos()]
    }
    fn w_t(&self, [x, y]: Vec2, _: f64) -> Vec2 {
        [-y.sin(), -x.cos()]
    }
    fn lap_v(&self, x: Vec2, t: f64) -> Vec2 {
        let v = self.v(x, t);
        [-v[0], -v[1]]
    }
    fn lap_w(&self, x: Vec2, t: f64) -> Vec2 {
        let w = self.w(x, t);
        [-w[0], -w[1]]
    }
    fn p(&self, [x, y]: Vec2, t: f64) -> f64 {
        (x - y) * (1.0 + t)
    }
    fn grad_p(&self, _: Vec2, t: f64) -> Vec2 {
        [1.0 + t, -(1.0 + t)]
    }
}

/// Fields that lie in the Q2 velocity space at every time, so the discrete
/// error is purely temporal:
/// `v = (1, 0) + cos t (2x^2 y, -2x y^2)`, `w = (0, 1) + sin t (x^2, -2xy)`, `p = x - y`.
#[derive(Clone, Copy, Debug, Default)]
pub struct PolynomialSolution;

impl ManufacturedFields for PolynomialSolution {
    fn v(&self, [x, y]: Vec2, t: f64) -> Vec2 {
        [1.0 + t.cos() * 2.0 * x * x * y, -t.cos() * 2.0 * x * y * y]
    }
    fn w(&self, [x, y]: Vec2, t: f64) -> Vec2 {
        [t.sin() * x * x, 1.0 - t.sin() * 2.0 * x * y]
    }
    fn grad_v(&self, [x, y]: Vec2, t: f64) -> Grad {
        let c = t.cos();
        [[4.0 * c * x * y, 2.0 * c * x * x], [-2.0 * c * y * y, -4.0 * c * x * y]]
    }
    fn grad_w(&self, [x, y]: Vec2, t: f64) -> Grad {
        let s = t.sin();
        [[2.0 * s * x, 0.0], [-2.0 * s * y, -2.0 * s * x]]
    }
    fn v_t(&self, [x, y]: Vec2, t: f64) -> Vec2 {
        [-t.sin() * 2.0 * x * x * y, t.sin() * 2.0 * x * y * y]
    }
    fn w_t(&self, [x, y]: Vec2, t: f64) -> Vec2 {
        [t.cos() * x * x, -t.cos() * 2.0 * x * y]
    }
    fn lap_v(&self, [x, y]: Vec2, t: f64) -> Vec2 {
        [t.cos() * 4.0 * y, -t.cos() * 4.0 * x]
    }
    fn lap_w(&self, _: Vec2, t: f64) -> Vec2 {
        [t.sin() * 2.0, 0.0]
    }
    fn p(&self, [x, y]: Vec2, _: f64) -> f64 {
        x - y
    }
    fn grad_p(&self, _: Vec2, _: f64) -> Vec2 {
        [1.0, -1.0]
    }
}

/// Member scale factors `1 + (-1)^(j-1) ceil(j/2) eps`, `j = 1..J`. For
/// `J = 4` these are `1 + eps, 1 - eps, 1 + 2 eps, 1 - 2 eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationEnsemble {
    eps: f64,
    factors: Vec<f64>,
}

impl PerturbationEnsemble {
    pub fn new(eps: f64, members: usize) -> Result<Self> {
        if members == 0 || !eps.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid ensemble: J={members}, eps={eps}")));
        }
        let factors = (1..=members)
            .map(|j| {
                let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
                1.0 + sign * j.div_ceil(2) as f64 * eps
            })
            .collect();
        Ok(Self { eps, factors })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn mean_factor(&self) -> f64 {
        self.factors.iter().sum::<f64>() / self.factors.len() as f64
    }
}

/// The pieces of one forcing component, split by how they scale with the member factor `s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForcingParts {
    /// `v_t - (nu+nu_m)/2 lap v - (nu-nu_m)/2 lap w`, multiplied by `s`.
    pub linear: Vec2,
    /// `w . grad v`, multiplied by `s^2`.
    pub advective: Vec2,
    /// `grad p`, not scaled.
    pub pressure: Vec2,
}

impl ForcingParts {
    pub fn combine(&self, s: f64) -> Vec2 {
        std::array::from_fn(|c| s * self.linear[c] + s * s * self.advective[c] + self.pressure[c])
    }
}

fn advect(a: Vec2, g: Grad) -> Vec2 {
    [a[0] * g[0][0] + a[1] * g[0][1], a[0] * g[1][0] + a[1] * g[1][1]]
}

/// Unscaled parts of `(f1, f2)`.
pub fn forcing_parts<F: ManufacturedFields + ?Sized>(
    fields: &F,
    phys: &PhysParams,
    x: Vec2,
    t: f64,
) -> (ForcingParts, ForcingParts) {
    let (d, c) = (phys.diffusion(), phys.cross_diffusion());
    let (lv, lw) = (fields.lap_v(x, t), fields.lap_w(x, t));
    let (vt, wt) = (fields.v_t(x, t), fields.w_t(x, t));
    let gp = fields.grad_p(x, t);
    let f1 = ForcingParts {
        linear: std::array::from_fn(|k| vt[k] - d * lv[k] - c * lw[k]),
        advective: advect(fields.w(x, t), fields.grad_v(x, t)),
        pressure: gp,
    };
    let f2 = ForcingParts {
        linear: std::array::from_fn(|k| wt[k] - d * lw[k] - c * lv[k]),
        advective: advect(fields.v(x, t), fields.grad_w(x, t)),
        pressure: gp,
    };
    (f1, f2)
}

/// Forcing of a member with scale factor `s` (velocities scaled, pressure not).
pub fn forcing<F: ManufacturedFields + ?Sized>(fields: &F, phys: &PhysParams, s: f64, x: Vec2, t: f64) -> (Vec2, Vec2) {
    let (f1, f2) = forcing_parts(fields, phys, x, t);
    (f1.combine(s), f2.combine(s))
}

/// A manufactured solution perturbed into an ensemble, with exact Dirichlet data.
#[derive(Clone, Debug)]
pub struct ManufacturedProblem<F> {
    pub fields: F,
    pub ensemble: PerturbationEnsemble,
    pub phys: PhysParams,
}

impl<F: ManufacturedFields> ManufacturedProblem<F> {
    fn scaled(&self, j: usize, x: Vec2, t: f64) -> (Vec2, Vec2) {
        let s = self.ensemble.factors[j];
        let (v, w) = (self.fields.v(x, t), self.fields.w(x, t));
        ([s * v[0], s * v[1]], [s * w[0], s * w[1]])
    }
}

impl<F: ManufacturedFields> EnsembleProblem for ManufacturedProblem<F> {
    fn members(&self) -> usize {
        self.ensemble.len()
    }

    fn initial(&self, j: usize, x: Vec2) -> (Vec2, Vec2) {
        self.scaled(j, x, 0.0)
    }

    fn forcing(&self, j: usize, x: Vec2, t: f64) -> (Vec2, Vec2) {
        forcing(&self.fields, &self.phys, self.ensemble.factors[j], x, t)
    }

    fn boundary(&self, j: usize, _: BoundaryTag, x: Vec2, t: f64) -> Result<(Vec2, Vec2)> {
        Ok(self.scaled(j, x, t))
    }

    fn exact(&self, j: usize, x: Vec2, t: f64) -> Option<(Vec2, Vec2)> {
        Some(self.scaled(j, x, t))
    }
}

/// What the discrete ensemble mean is compared against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ErrorReference {
    /// The exact mean, evaluated at quadrature points.
    #[default]
    Exact,
    /// The nodal interpolant of the exact mean.
    Interpolant,
}

/// Ensemble-mean errors of one run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorNorms {
    /// `(dt sum_{n=1}^{M} |grad(<v_h>^n - <v>(t^n))|^2)^(1/2)`
    pub err_v: f64,
    pub err_w: f64,
    /// L2 errors of the means at the final time.
    pub final_l2_v: f64,
    pub final_l2_w: f64,
}

/// Accumulates the space-time error norms level by level.
#[derive(Debug)]
pub struct ErrorAccumulator<'a, F> {
    space: &'a MixedSpace,
    problem: &'a ManufacturedProblem<F>,
    reference: ErrorReference,
    dt: f64,
    sum_v: f64,
    sum_w: f64,
    last_l2: Option<(f64, f64)>,
}

impl<'a, F: ManufacturedFields> ErrorAccumulator<'a, F> {
    pub fn new(space: &'a MixedSpace, problem: &'a ManufacturedProblem<F>, dt: f64, reference: ErrorReference) -> Self {
        Self { space, problem, reference, dt, sum_v: 0.0, sum_w: 0.0, last_l2: None }
    }

    /// Adds the errors of the current level of `state`.
    pub fn record(&mut self, state: &EnsembleState) {
        let mean_v = state.mean_of(|m| &m.v);
        let mean_w = state.mean_of(|m| &m.w);
        let (gv, lv) = self.level_errors(&mean_v, state.time, |f, x, t| f.v(x, t), |f, x, t| f.grad_v(x, t));
        let (gw, lw) = self.level_errors(&mean_w, state.time, |f, x, t| f.w(x, t), |f, x, t| f.grad_w(x, t));
        self.sum_v += self.dt * gv;
        self.sum_w += self.dt * gw;
        self.last_l2 = Some((lv.sqrt(), lw.sqrt()));
    }

    /// Squared H1-seminorm and L2 errors of one discrete mean field.
    fn level_errors(
        &self,
        u_h: &[f64],
        t: f64,
        val: impl Fn(&F, Vec2, f64) -> Vec2,
        grad: impl Fn(&F, Vec2, f64) -> Grad,
    ) -> (f64, f64) {
        let s = self.problem.ensemble.mean_factor();
        let f = &self.problem.fields;
        let qc = self.space.load_quad();
        let interp = match self.reference {
            ErrorReference::Exact => None,
            ErrorReference::Interpolant => Some(self.space.interpolate(|x| val(f, x, t).map(|c| s * c))),
        };
        let (mut g_err, mut l_err) = (0.0, 0.0);
        let (mut buf, mut ref_buf) = (Vec::new(), Vec::new());
        for cell in 0..self.space.mesh().num_cells() {
            self.space.eval_velocity(qc, u_h, cell, &mut buf);
            if let Some(i) = &interp {
                self.space.eval_velocity(qc, i, cell, &mut ref_buf);
            }
            for (q, (uv, ug)) in buf.iter().enumerate() {
                let idx = cell * qc.n_qp + q;
                let (ev, eg) = match &interp {
                    Some(_) => ref_buf[q],
                    None => {
                        let x = qc.points[idx];
                        (val(f, x, t).map(|c| s * c), grad(f, x, t).map(|r| r.map(|c| s * c)))
                    }
                };
                let jxw = qc.jxw[idx];
                for c in 0..2 {
                    l_err += jxw * (uv[c] - ev[c]).powi(2);
                    for d in 0..2 {
                        g_err += jxw * (ug[c][d] - eg[c][d]).powi(2);
                    }
                }
            }
        }
        (g_err, l_err)
    }

    pub fn finish(&self) -> Result<ErrorNorms> {
        let (final_l2_v, final_l2_w) =
            self.last_l2.ok_or_else(|| Error::MissingHistory("no time levels were recorded".into()))?;
        Ok(ErrorNorms { err_v: self.sum_v.sqrt(), err_w: self.sum_w.sqrt(), final_l2_v, final_l2_w })
    }
}

/// Which manufactured fields to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SolutionKind {
    #[default]
    Trig,
    Polynomial,
}

/// One manufactured-solution run on the unit square.
#[derive(Clone, Debug)]
pub struct MmsConfig {
    /// Cells per side.
    pub n: usize,
    pub steps: usize,
    pub t_end: f64,
    pub eps: f64,
    pub members: usize,
    pub nu: f64,
    pub nu_m: f64,
    pub solution: SolutionKind,
    pub bootstrap: Bootstrap,
    pub reference: ErrorReference,
    pub options: SchemeOptions,
}

impl Default for MmsConfig {
    fn default() -> Self {
        Self {
            n: 4,
            steps: 8,
            t_end: 0.001,
            eps: 0.001,
            members: 4,
            nu: 0.01,
            nu_m: 0.001,
            solution: SolutionKind::Trig,
            bootstrap: Bootstrap::Exact,
            reference: ErrorReference::Exact,
            options: SchemeOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MmsResult {
    pub h: f64,
    pub dt: f64,
    pub errors: ErrorNorms,
    pub summary: RunSummary,
}

pub fn run_mms(cfg: &MmsConfig) -> Result<MmsResult> {
    match cfg.solution {
        SolutionKind::Trig => run_with(cfg, TrigSolution),
        SolutionKind::Polynomial => run_with(cfg, PolynomialSolution),
    }
}

fn run_with<F: ManufacturedFields>(cfg: &MmsConfig, fields: F) -> Result<MmsResult> {
    let phys = PhysParams::new(cfg.nu, cfg.nu_m)?;
    let time = TimeParams::from_steps(cfg.t_end, cfg.steps)?;
    let space = Arc::new(MixedSpace::new(Arc::new(Mesh::unit_square(cfg.n)?)));
    let problem = ManufacturedProblem { fields, ensemble: PerturbationEnsemble::new(cfg.eps, cfg.members)?, phys };
    let stepper = EnsembleStepper::new(space.clone(), phys, time, cfg.options.clone())?;
    let mut acc = ErrorAccumulator::new(&space, &problem, time.dt(), cfg.reference);
    let summary = stepper.run(&problem, cfg.bootstrap, |state, _| {
        acc.record(state);
        Ok(())
    })?;
    let errors = acc.finish()?;
    Ok(MmsResult { h: space.mesh().max_edge_length(), dt: time.dt(), errors, summary })
}

/// One row of a convergence table; rates are absent on the first row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateRow {
    pub h: f64,
    pub dt: f64,
    pub err_v: f64,
    pub rate_v: Option<f64>,
    pub err_w: f64,
    pub rate_w: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
}

/// Observed order between two errors over a refinement ratio.
pub fn observed_rate(e_coarse: f64, e_fine: f64, ratio: f64) -> f64 {
    (e_coarse / e_fine).ln() / ratio.ln()
}

impl RateTable {
    /// Appends a row, computing rates against the previous one. The refinement
    /// ratio is taken from `h`, or from `dt` when `h` is unchanged.
    pub fn push(&mut self, h: f64, dt: f64, err_v: f64, err_w: f64) {
        let (rate_v, rate_w) = match self.rows.last() {
            None => (None, None),
            Some(prev) => {
                let ratio = if (prev.h - h).abs() > 1e-14 * h { prev.h / h } else { prev.dt / dt };
                (Some(observed_rate(prev.err_v, err_v, ratio)), Some(observed_rate(prev.err_w, err_w, ratio)))
            }
        };
        self.rows.push(RateRow { h, dt, err_v, rate_v, err_w, rate_w });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rates of the last `k` rows.
    pub fn last_rates(&self, k: usize) -> Vec<(f64, f64)> {
        self.rows.iter().rev().take(k).rev().filter_map(|r| Some((r.rate_v?, r.rate_w?))).collect()
    }
}

/// A study that may have stopped early; `table` holds the finished levels.
#[derive(Debug)]
pub struct StudyOutcome {
    pub table: RateTable,
    pub results: Vec<MmsResult>,
    pub failure: Option<Error>,
}

/// Runs `base` at each `(n, steps)` level.
pub fn convergence_study(base: &MmsConfig, levels: &[(usize, usize)]) -> StudyOutcome {
    let mut table = RateTable::default();
    let mut results = Vec::new();
    for &(n, steps) in levels {
        let cfg = MmsConfig { n, steps, ..base.clone() };
        match run_mms(&cfg) {
            Ok(r) => {
                info!("level n={n} steps={steps}: err_v={:.4e} err_w={:.4e}", r.errors.err_v, r.errors.err_w);
                table.push(r.h, r.dt, r.errors.err_v, r.errors.err_w);
                results.push(r);
            }
            Err(e) => return StudyOutcome { table, results, failure: Some(e) },
        }
    }
    StudyOutcome { table, results, failure: None }
}

/// Levels `n = 2, 4, ..., 2^count` cells per side with `2n` steps.
pub fn standard_levels(count: usize) -> Vec<(usize, usize)> {
    refinement_levels(count, 4)
}

/// Halves `h` and `dt` together, starting from `n = 2` and `coarse_steps`.
pub fn refinement_levels(count: usize, coarse_steps: usize) -> Vec<(usize, usize)> {
    (1..=count).map(|k| (1 << k, coarse_steps << (k - 1))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn phys() -> PhysParams {
        PhysParams::new(0.01, 0.001).unwrap()
    }

    #[test]
    fn factors() {
        let e = PerturbationEnsemble::new(0.1, 4).unwrap();
        let want = [1.1, 0.9, 1.2, 0.8];
        for (a, b) in e.factors().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((e.factors()[0] + e.factors()[1] - 2.0).abs() < 1e-15);
        assert!((e.mean_factor() - 1.0).abs() < 1e-15);
        assert!(PerturbationEnsemble::new(0.1, 0).is_err());
    }

    #[test]
    fn forcing_at_origin() {
        let (f1, _) = forcing(&TrigSolution, &phys(), 1.0, [0.0, 0.0], 0.0);
        assert!((f1[0] - 0.01).abs() < 1e-15, "{f1:?}");
        assert!((f1[1] - 1.001).abs() < 1e-15, "{f1:?}");
        let s = TrigSolution;
        assert_eq!(s.v([0.0, 0.0], 0.0), [1.0, 1.0]);
        assert_eq!(s.w([0.0, 0.0], 0.0), [1.0, -1.0]);
    }

    /// PDE residual of the scaled fields with every derivative by finite differences.
    fn fd_residual<F: ManufacturedFields>(f: &F, ph: &PhysParams, s: f64, x: Vec2, t: f64) -> (Vec2, Vec2) {
        let h1 = 1e-6;
        let d1 = |g: &dyn Fn(Vec2, f64) -> Vec2, dir: usize| -> Vec2 {
            let mut xp = x;
            let mut xm = x;
            xp[dir] += h1;
            xm[dir] -= h1;
            let (a, b) = (g(xp, t), g(xm, t));
            [(a[0] - b[0]) / (2.0 * h1), (a[1] - b[1]) / (2.0 * h1)]
        };
        let dt = |g: &dyn Fn(Vec2, f64) -> Vec2| -> Vec2 {
            let (a, b) = (g(x, t + h1), g(x, t - h1));
            [(a[0] - b[0]) / (2.0 * h1), (a[1] - b[1]) / (2.0 * h1)]
        };
        // Laplacian: 5-point stencil with one Richardson step
        let lap = |g: &dyn Fn(Vec2, f64) -> Vec2| -> Vec2 {
            let at = |h: f64| -> Vec2 {
                let c = g(x, t);
                let mut out = [0.0; 2];
                for dir in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[dir] += h;
                    xm[dir] -= h;
                    let (a, b) = (g(xp, t), g(xm, t));
                    for k in 0..2 {
                        out[k] += (a[k] - 2.0 * c[k] + b[k]) / (h * h);
                    }
                }
                out
            };
            let (coarse, fine) = (at(2e-3), at(1e-3));
            [(4.0 * fine[0] - coarse[0]) / 3.0, (4.0 * fine[1] - coarse[1]) / 3.0]
        };
        let v = |x: Vec2, t: f64| f.v(x, t).map(|c| s * c);
        let w = |x: Vec2, t: f64| f.w(x, t).map(|c| s * c);
        let p = |x: Vec2, t: f64| [f.p(x, t), 0.0];
        let (vx, vy, wx, wy) = (d1(&v, 0), d1(&v, 1), d1(&w, 0), d1(&w, 1));
        let gp = [d1(&p, 0)[0], d1(&p, 1)[0]];
        let (vv, ww) = (v(x, t), w(x, t));
        let (lv, lw) = (lap(&v), lap(&w));
        let (vt, wt) = (dt(&v), dt(&w));
        let (d, c) = (ph.diffusion(), ph.cross_diffusion());
        let f1 = std::array::from_fn(|k| vt[k] + ww[0] * vx[k] + ww[1] * vy[k] + gp[k] - d * lv[k] - c * lw[k]);
        let f2 = std::array::from_fn(|k| wt[k] + vv[0] * wx[k] + vv[1] * wy[k] + gp[k] - d * lw[k] - c * lv[k]);
        (f1, f2)
    }

    #[test]
    fn forcing_matches_finite_difference_residual() {
        let ph = phys();
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let mut points = vec![([0.0, 0.0], 0.0)];
        points.extend((0..20).map(|_| ([rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)], rng.gen_range(0.0..1.0))));
        for (x, t) in points {
            for s in [1.0, 1.1, 0.8] {
                let want = forcing(&TrigSolution, &ph, s, x, t);
                let got = fd_residual(&TrigSolution, &ph, s, x, t);
                let want_p = forcing(&PolynomialSolution, &ph, s, x, t);
                let got_p = fd_residual(&PolynomialSolution, &ph, s, x, t);
                for (a, b) in [(want, got), (want_p, got_p)] {
                    for k in 0..2 {
                        assert!((a.0[k] - b.0[k]).abs() < 1e-8, "f1 at {x:?},{t}: {a:?} vs {b:?}");
                        assert!((a.1[k] - b.1[k]).abs() < 1e-8, "f2 at {x:?},{t}: {a:?} vs {b:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn forcing_scaling_in_member_factor() {
        let ph = phys();
        let (x, t) = ([0.3, 0.7], 0.4);
        let (p1, _) = forcing_parts(&TrigSolution, &ph, x, t);
        // three factors determine the quadratic s -> f(s) exactly
        let f = |s: f64| forcing(&TrigSolution, &ph, s, x, t).0;
        let (f0, f1, f2) = (f(0.0), f(1.0), f(2.0));
        for k in 0..2 {
            let a = 0.5 * (f2[k] - 2.0 * f1[k] + f0[k]);
            let b = f1[k] - f0[k] - a;
            assert!((a - p1.advective[k]).abs() < 1e-14);
            assert!((b - p1.linear[k]).abs() < 1e-14);
            assert!((f0[k] - p1.pressure[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn manufactured_fields_are_solenoidal() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(17);
        for _ in 0..50 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let t = rng.gen_range(0.0..2.0);
            for g in [TrigSolution.grad_v(x, t), TrigSolution.grad_w(x, t), PolynomialSolution.grad_v(x, t), PolynomialSolution.grad_w(x, t)] {
                assert!((g[0][0] + g[1][1]).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn interpolant_divergence_vanishes() {
        // Each component depends only on the other coordinate, so the
        // interpolant is discretely solenoidal up to roundoff on any mesh.
        for n in [4, 8, 16] {
            let space = MixedSpace::new(Arc::new(Mesh::unit_square(n).unwrap()));
            let b = crate::fem::assemble_div(&space);
            for u in [space.interpolate(|x| TrigSolution.v(x, 0.3)), space.interpolate(|x| TrigSolution.w(x, 0.3))] {
                assert!(b.matvec(&u).iter().all(|r| r.abs() < 1e-14));
            }
        }
    }

    #[test]
    fn identity_run_has_interpolation_error_only() {
        // With an exact bootstrap and a discrete solution equal to the
        // interpolant, the error is the interpolation error.
        let space = MixedSpace::new(Arc::new(Mesh::unit_square(4).unwrap()));
        let problem =
            ManufacturedProblem { fields: TrigSolution, ensemble: PerturbationEnsemble::new(0.01, 4).unwrap(), phys: phys() };
        let mut acc = ErrorAccumulator::new(&space, &problem, 0.5, ErrorReference::Exact);
        assert!(acc.finish().is_err());
        let members = (0..4)
            .map(|j| {
                let v = space.interpolate(|x| problem.exact(j, x, 1.0).unwrap().0);
                let w = space.interpolate(|x| problem.exact(j, x, 1.0).unwrap().1);
                crate::scheme::MemberState { v_prev: v.clone(), w_prev: w.clone(), v, w, q: vec![], r: vec![] }
            })
            .collect();
        let state = EnsembleState { members, step: 1, time: 1.0 };
        acc.record(&state);
        let e = acc.finish().unwrap();
        assert!(e.err_v > 0.0 && e.err_v < 1e-2, "{e:?}");
        let mut exact_ref = ErrorAccumulator::new(&space, &problem, 0.5, ErrorReference::Interpolant);
        exact_ref.record(&state);
        assert!(exact_ref.finish().unwrap().err_v < 1e-14);
    }

    #[test]
    fn rate_table_arithmetic() {
        let mut t = RateTable::default();
        t.push(0.5, 0.25, 3.650e-4, 7.168e-4);
        t.push(0.25, 0.125, 1.008e-4, 1.930e-4);
        assert_eq!(t.rows[0].rate_v, None);
        assert!((t.rows[1].rate_v.unwrap() - 1.857).abs() < 1e-3);
        assert!((t.rows[1].rate_w.unwrap() - 1.893).abs() < 1e-3);
        assert_eq!(t.last_rates(1).len(), 1);
        assert_eq!(standard_levels(3), vec![(2, 4), (4, 8), (8, 16)]);
    }

    #[test]
    fn zero_eps_members_identical_and_mean_error_equals_member_error() {
        let cfg = MmsConfig { n: 2, steps: 4, eps: 0.0, ..Default::default() };
        let r = run_mms(&cfg).unwrap();
        let m = &r.summary.final_state.members;
        assert!(m.windows(2).all(|w| w[0] == w[1]));
        let single = run_mms(&MmsConfig { members: 1, ..cfg }).unwrap();
        assert_eq!(single.errors.err_v.to_bits(), r.errors.err_v.to_bits());
        assert_eq!(single.errors.err_w.to_bits(), r.errors.err_w.to_bits());
    }
}
