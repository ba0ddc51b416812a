//! Factor-once, solve-many linear solvers for the constrained saddle-point systems.
//!
//! The direct backend is faer's sparse LU. The symbolic analysis is cached per
//! sparsity pattern, so refactoring a matrix with the same structure only
//! repeats the numeric phase. The iterative backend is restarted GMRES with an
//! ILU(0) preconditioner built once per factorization.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::lu::{factorize_symbolic_lu, LuRef, NumericLu, SymbolicLu};
use faer::sparse::linalg::LuError;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{CsrMatrix, CsrPattern};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SolverKind {
    #[default]
    Direct,
    Iterative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverSettings {
    pub kind: SolverKind,
    /// Relative residual target of the iterative backend.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub restart: usize,
    /// Run the independent solves of `solve_many` on the rayon pool.
    pub parallel_solves: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { kind: SolverKind::Direct, tolerance: 1e-10, max_iterations: 500, restart: 60, parallel_solves: false }
    }
}

/// Work counters shared by every factorization created from one solver.
#[derive(Debug, Default)]
pub struct SolverCounters {
    factorizations: AtomicUsize,
    symbolic_analyses: AtomicUsize,
    solves: AtomicUsize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub factorizations: usize,
    pub symbolic_analyses: usize,
    pub solves: usize,
}

impl SolverCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            factorizations: self.factorizations.load(Ordering::Relaxed),
            symbolic_analyses: self.symbolic_analyses.load(Ordering::Relaxed),
            solves: self.solves.load(Ordering::Relaxed),
        }
    }
}

impl std::ops::Sub for CounterSnapshot {
    type Output = CounterSnapshot;
    fn sub(self, rhs: Self) -> Self {
        CounterSnapshot {
            factorizations: self.factorizations - rhs.factorizations,
            symbolic_analyses: self.symbolic_analyses - rhs.symbolic_analyses,
            solves: self.solves - rhs.solves,
        }
    }
}

/// Size information about a factorization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FactorStats {
    pub n: usize,
    pub nnz_matrix: usize,
    /// Stored entries of the factors (L + U for ILU(0); not reported by the direct backend).
    pub nnz_factors: Option<usize>,
}

struct CachedSymbolic {
    pattern: Arc<CsrPattern>,
    symbolic: Arc<SymbolicLu<usize>>,
}

/// Creates factorizations and keeps the symbolic analysis of the last pattern.
pub struct LinearSolver {
    settings: SolverSettings,
    counters: Arc<SolverCounters>,
    cache: Mutex<Option<CachedSymbolic>>,
}

impl std::fmt::Debug for LinearSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearSolver").field("settings", &self.settings).field("counters", &self.counters).finish()
    }
}

impl Default for LinearSolver {
    fn default() -> Self {
        Self::new(SolverSettings::default())
    }
}

impl LinearSolver {
    pub fn new(settings: SolverSettings) -> Self {
        Self { settings, counters: Arc::default(), cache: Mutex::new(None) }
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    pub fn counters(&self) -> &Arc<SolverCounters> {
        &self.counters
    }

    pub fn factor(&self, a: &CsrMatrix) -> Result<Factorization> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch { expected: a.nrows(), got: a.ncols() });
        }
        let fact = match self.settings.kind {
            SolverKind::Direct => Backend::Direct(Box::new(self.factor_direct(a)?)),
            SolverKind::Iterative => Backend::Iterative(IterativeFactor::new(a, &self.settings)?),
        };
        self.counters.factorizations.fetch_add(1, Ordering::Relaxed);
        Ok(Factorization { inner: fact, counters: self.counters.clone(), parallel: self.settings.parallel_solves })
    }

    fn symbolic_for(&self, pattern: &Arc<CsrPattern>) -> Result<Arc<SymbolicLu<usize>>> {
        let mut cache = self.cache.lock().expect("symbolic cache poisoned");
        if let Some(c) = cache.as_ref() {
            if Arc::ptr_eq(&c.pattern, pattern) || *c.pattern == **pattern {
                return Ok(c.symbolic.clone());
            }
        }
        let n = pattern.nrows();
        // CSR of A is the CSC of A^T; solves use the transposed LU.
        let sym = SymbolicSparseColMatRef::new_checked(n, n, pattern.row_ptr(), None, pattern.col_idx());
        let symbolic = Arc::new(factorize_symbolic_lu(sym, Default::default()).map_err(|e| lu_error(LuError::Generic(e)))?);
        self.counters.symbolic_analyses.fetch_add(1, Ordering::Relaxed);
        *cache = Some(CachedSymbolic { pattern: pattern.clone(), symbolic: symbolic.clone() });
        Ok(symbolic)
    }

    fn factor_direct(&self, a: &CsrMatrix) -> Result<DirectFactor> {
        let symbolic = self.symbolic_for(a.pattern())?;
        let n = a.nrows();
        let p = a.pattern();
        let sym = SymbolicSparseColMatRef::new_checked(n, n, p.row_ptr(), None, p.col_idx());
        let mut numeric = NumericLu::<usize, f64>::new();
        let mut buf = MemBuffer::new(symbolic.factorize_numeric_lu_scratch::<f64>(Par::Seq, Default::default()));
        symbolic
            .factorize_numeric_lu(
                &mut numeric,
                SparseColMatRef::new(sym, a.values()),
                Par::Seq,
                MemStack::new(&mut buf),
                Default::default(),
            )
            .map_err(lu_error)?;
        let fact = DirectFactor { symbolic, numeric, stats: FactorStats { n, nnz_matrix: a.nnz(), nnz_factors: None } };
        // A zero pivot does not stop the numeric phase; it shows up as
        // non-finite values in a solve.
        let probe = fact.solve(&vec![1.0; n]);
        if let Some(pivot) = probe.iter().position(|v| !v.is_finite()) {
            return Err(Error::SingularMatrix { pivot });
        }
        Ok(fact)
    }
}

fn lu_error(e: LuError) -> Error {
    match e {
        LuError::SymbolicSingular { index } => Error::SingularMatrix { pivot: index },
        LuError::Generic(g) => Error::InvalidArgument(format!("sparse LU failed: {g:?}")),
    }
}

struct DirectFactor {
    symbolic: Arc<SymbolicLu<usize>>,
    numeric: NumericLu<usize, f64>,
    stats: FactorStats,
}

impl DirectFactor {
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.stats.n;
        let mut x = b.to_vec();
        let mut buf = MemBuffer::new(self.symbolic.solve_transpose_in_place_scratch::<f64>(1, Par::Seq));
        LuRef::new_unchecked(&self.symbolic, &self.numeric).solve_transpose_in_place_with_conj(
            Conj::No,
            MatMut::from_column_major_slice_mut(&mut x, n, 1),
            Par::Seq,
            MemStack::new(&mut buf),
        );
        x
    }
}

/// ILU(0) factors stored in the matrix pattern, with GMRES as the solve.
struct IterativeFactor {
    matrix: CsrMatrix,
    lu: Vec<f64>,
    diag: Vec<usize>,
    tolerance: f64,
    max_iterations: usize,
    restart: usize,
}

impl IterativeFactor {
    fn new(a: &CsrMatrix, s: &SolverSettings) -> Result<Self> {
        let p = a.pattern().clone();
        let n = a.nrows();
        let diag = (0..n)
            .map(|r| p.index_of(r, r).ok_or(Error::SingularMatrix { pivot: r }))
            .collect::<Result<Vec<_>>>()?;
        let (rp, ci) = (p.row_ptr(), p.col_idx());
        let mut lu = a.values().to_vec();
        for i in 0..n {
            for kk in rp[i]..diag[i] {
                let k = ci[kk];
                let pivot = lu[diag[k]];
                if pivot == 0.0 || !pivot.is_finite() {
                    return Err(Error::SingularMatrix { pivot: k });
                }
                lu[kk] /= pivot;
                let l_ik = lu[kk];
                // a_ij -= l_ik u_kj for j > k present in row i
                let mut jj = kk + 1;
                for kj in diag[k] + 1..rp[k + 1] {
                    let j = ci[kj];
                    while jj < rp[i + 1] && ci[jj] < j {
                        jj += 1;
                    }
                    if jj < rp[i + 1] && ci[jj] == j {
                        lu[jj] -= l_ik * lu[kj];
                    }
                }
            }
            if lu[diag[i]] == 0.0 || !lu[diag[i]].is_finite() {
                return Err(Error::SingularMatrix { pivot: i });
            }
        }
        Ok(Self {
            matrix: a.clone(),
            lu,
            diag,
            tolerance: s.tolerance,
            max_iterations: s.max_iterations,
            restart: s.restart.max(1),
        })
    }

    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        let p = self.matrix.pattern();
        let (rp, ci) = (p.row_ptr(), p.col_idx());
        let n = r.len();
        let mut y = r.to_vec();
        for i in 0..n {
            let s: f64 = (rp[i]..self.diag[i]).map(|k| self.lu[k] * y[ci[k]]).sum();
            y[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (self.diag[i] + 1..rp[i + 1]).map(|k| self.lu[k] * y[ci[k]]).sum();
            y[i] = (y[i] - s) / self.lu[self.diag[i]];
        }
        y
    }

    /// Right-preconditioned restarted GMRES, so the monitored residual is the true one.
    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = b.len();
        let b_norm = norm(b);
        let mut x = vec![0.0; n];
        if b_norm == 0.0 {
            return Ok(x);
        }
        let m = self.restart.min(n.max(1));
        let mut iterations = 0;
        let mut residual;
        while iterations < self.max_iterations {
            let ax = self.matrix.matvec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(a, c)| a - c).collect();
            let beta = norm(&r);
            residual = beta / b_norm;
            if residual <= self.tolerance {
                return Ok(x);
            }
            let mut v: Vec<Vec<f64>> = vec![r.iter().map(|a| a / beta).collect()];
            let mut h = vec![vec![0.0; m]; m + 1];
            let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
            let mut g = vec![0.0; m + 1];
            g[0] = beta;
            let mut k_used = 0;
            for k in 0..m {
                let z = self.precondition(&v[k]);
                let mut w = self.matrix.matvec(&z);
                for (i, vi) in v.iter().enumerate() {
                    h[i][k] = dot(&w, vi);
                    for (wj, vj) in w.iter_mut().zip(vi) {
                        *wj -= h[i][k] * vj;
                    }
                }
                h[k + 1][k] = norm(&w);
                for i in 0..k {
                    let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                    h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                    h[i][k] = t;
                }
                let d = h[k][k].hypot(h[k + 1][k]);
                (cs[k], sn[k]) = if d == 0.0 { (1.0, 0.0) } else { (h[k][k] / d, h[k + 1][k] / d) };
                h[k][k] = d;
                h[k + 1][k] = 0.0;
                g[k + 1] = -sn[k] * g[k];
                g[k] *= cs[k];
                iterations += 1;
                k_used = k + 1;
                if (g[k + 1].abs() / b_norm) <= self.tolerance * 0.5 || iterations >= self.max_iterations {
                    break;
                }
                let wn = norm(&w);
                if wn == 0.0 {
                    break;
                }
                v.push(w.iter().map(|a| a / wn).collect());
            }
            // back substitution for the Krylov coefficients
            let mut y = vec![0.0; k_used];
            for i in (0..k_used).rev() {
                let s: f64 = (i + 1..k_used).map(|j| h[i][j] * y[j]).sum();
                y[i] = (g[i] - s) / h[i][i];
            }
            let mut update = vec![0.0; n];
            for (yi, vi) in y.iter().zip(&v) {
                for (u, a) in update.iter_mut().zip(vi) {
                    *u += yi * a;
                }
            }
            for (xi, zi) in x.iter_mut().zip(self.precondition(&update)) {
                *xi += zi;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NotConverged { iterations, residual: f64::NAN });
            }
        }
        let ax = self.matrix.matvec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(a, c)| a - c).collect();
        let final_residual = norm(&r) / b_norm;
        if final_residual <= self.tolerance {
            Ok(x)
        } else {
            Err(Error::NotConverged { iterations, residual: final_residual })
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

enum Backend {
    Direct(Box<DirectFactor>),
    Iterative(IterativeFactor),
}

/// A factored matrix, reusable for any number of right-hand sides.
pub struct Factorization {
    inner: Backend,
    counters: Arc<SolverCounters>,
    parallel: bool,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization").field("stats", &self.stats()).finish()
    }
}

impl Factorization {
    pub fn n(&self) -> usize {
        self.stats().n
    }

    pub fn stats(&self) -> FactorStats {
        match &self.inner {
            Backend::Direct(d) => d.stats,
            Backend::Iterative(it) => FactorStats {
                n: it.matrix.nrows(),
                nnz_matrix: it.matrix.nnz(),
                nnz_factors: Some(it.lu.len()),
            },
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: b.len() });
        }
        self.counters.solves.fetch_add(1, Ordering::Relaxed);
        match &self.inner {
            Backend::Direct(d) => Ok(d.solve(b)),
            Backend::Iterative(it) => it.solve(b),
        }
    }

    /// Solves for every right-hand side; results equal those of sequential `solve` calls bit for bit.
    pub fn solve_many(&self, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if let Some(bad) = rhs.iter().find(|b| b.len() != self.n()) {
            return Err(Error::DimensionMismatch { expected: self.n(), got: bad.len() });
        }
        if self.parallel {
            rhs.par_iter().map(|b| self.solve(b)).collect()
        } else {
            rhs.iter().map(|b| self.solve(b)).collect()
        }
    }
}
