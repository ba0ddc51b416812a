//! Saddle-point system `[[A, B^T], [B, 0]]` with Dirichlet velocity data and a
//! pinned pressure DOF eliminated symmetrically.
//!
//! Constrained velocity rows and the pinned pressure row become identity rows;
//! their columns are dropped and moved to the right-hand side. The resulting
//! sparsity pattern depends only on the mesh, never on boundary values, so one
//! symbolic factorization serves every system built from the same layout.

use std::sync::Arc;

use super::space::MixedSpace;
use super::sparse::{CsrMatrix, CsrPattern};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Velocity(usize),
    Div(usize),
    DivT(usize),
    One,
    Zero,
}

/// Structure of the constrained saddle-point system for one space.
#[derive(Debug)]
pub struct SaddleLayout {
    n_u: usize,
    n_p: usize,
    pinned: usize,
    constrained: Vec<bool>,
    velocity_pattern: Arc<CsrPattern>,
    div: CsrMatrix,
    pattern: Arc<CsrPattern>,
    sources: Vec<Source>,
}

impl SaddleLayout {
    /// `div` is the `n_p x n_u` coupling from `assemble_div`.
    pub fn new(space: &MixedSpace, div: CsrMatrix) -> Result<Self> {
        let (n_u, n_p) = (space.n_u(), space.n_p());
        if div.nrows() != n_p || div.ncols() != n_u {
            return Err(Error::DimensionMismatch { expected: n_p * n_u, got: div.nrows() * div.ncols() });
        }
        let constrained = space.constrained().to_vec();
        let pinned = space.pinned_pressure();
        let vp = space.velocity_pattern().clone();
        let div_t = div.pattern().transpose_with_map();

        let mut rows: Vec<Vec<(usize, Source)>> = Vec::with_capacity(n_u + n_p);
        for r in 0..n_u {
            if constrained[r] {
                rows.push(vec![(r, Source::One)]);
                continue;
            }
            let mut row: Vec<(usize, Source)> = (vp.row_ptr()[r]..vp.row_ptr()[r + 1])
                .map(|k| (vp.col_idx()[k], Source::Velocity(k)))
                .filter(|&(c, _)| !constrained[c])
                .collect();
            let (tp, map) = &div_t;
            row.extend(
                (tp.row_ptr()[r]..tp.row_ptr()[r + 1])
                    .map(|k| (tp.col_idx()[k], map[k]))
                    .filter(|&(p, _)| p != pinned)
                    .map(|(p, src)| (n_u + p, Source::DivT(src))),
            );
            rows.push(row);
        }
        let dp = div.pattern();
        for p in 0..n_p {
            if p == pinned {
                rows.push(vec![(n_u + p, Source::One)]);
                continue;
            }
            let mut row: Vec<(usize, Source)> = (dp.row_ptr()[p]..dp.row_ptr()[p + 1])
                .map(|k| (dp.col_idx()[k], Source::Div(k)))
                .filter(|&(c, _)| !constrained[c])
                .collect();
            // explicit diagonal keeps incomplete factorizations well defined
            row.push((n_u + p, Source::Zero));
            rows.push(row);
        }

        let mut sources = Vec::new();
        let cols = rows
            .into_iter()
            .map(|mut row| {
                row.sort_unstable_by_key(|&(c, _)| c);
                sources.extend(row.iter().map(|&(_, s)| s));
                row.into_iter().map(|(c, _)| c).collect()
            })
            .collect();
        let pattern = Arc::new(CsrPattern::from_rows(n_u + n_p, cols));
        debug_assert_eq!(pattern.nnz(), sources.len());
        Ok(Self { n_u, n_p, pinned, constrained, velocity_pattern: vp, div, pattern, sources })
    }

    pub fn size(&self) -> usize {
        self.n_u + self.n_p
    }

    pub fn pattern(&self) -> &Arc<CsrPattern> {
        &self.pattern
    }

    pub fn div(&self) -> &CsrMatrix {
        &self.div
    }

    fn check_block(&self, a: &CsrMatrix) -> Result<()> {
        if !Arc::ptr_eq(a.pattern(), &self.velocity_pattern) && **a.pattern() != *self.velocity_pattern {
            return Err(Error::InvalidArgument("velocity block does not use the space's pattern".into()));
        }
        Ok(())
    }

    /// Constrained system matrix for the velocity block `a`.
    pub fn system_matrix(&self, a: &CsrMatrix) -> Result<CsrMatrix> {
        self.check_block(a)?;
        let (av, bv) = (a.values(), self.div.values());
        let values = self
            .sources
            .iter()
            .map(|s| match *s {
                Source::Velocity(k) => av[k],
                Source::Div(k) | Source::DivT(k) => bv[k],
                Source::One => 1.0,
                Source::Zero => 0.0,
            })
            .collect();
        CsrMatrix::from_parts(self.pattern.clone(), values)
    }

    /// Right-hand side for velocity load `f` and Dirichlet data `g` (values on
    /// constrained DOFs; other entries ignored).
    pub fn system_rhs(&self, a: &CsrMatrix, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        self.check_block(a)?;
        for v in [f, g] {
            if v.len() != self.n_u {
                return Err(Error::DimensionMismatch { expected: self.n_u, got: v.len() });
            }
        }
        let g_c: Vec<f64> = g.iter().zip(&self.constrained).map(|(&x, &c)| if c { x } else { 0.0 }).collect();
        let ag = a.matvec(&g_c);
        let bg = self.div.matvec(&g_c);
        let mut rhs = Vec::with_capacity(self.size());
        rhs.extend((0..self.n_u).map(|r| if self.constrained[r] { g[r] } else { f[r] - ag[r] }));
        rhs.extend((0..self.n_p).map(|p| if p == self.pinned { 0.0 } else { -bg[p] }));
        Ok(rhs)
    }

    /// Splits a system solution into velocity and pressure (pressure not yet normalized).
    pub fn split_solution(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.size() {
            return Err(Error::DimensionMismatch { expected: self.size(), got: x.len() });
        }
        Ok((x[..self.n_u].to_vec(), x[self.n_u..].to_vec()))
    }
}
