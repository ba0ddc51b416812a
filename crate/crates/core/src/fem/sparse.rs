//! Compressed sparse row storage with shareable patterns.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Row offsets and sorted, duplicate-free column indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsrPattern {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl CsrPattern {
    /// Builds a pattern from per-row column lists (sorted and deduplicated here).
    pub fn from_rows(ncols: usize, mut rows: Vec<Vec<usize>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            debug_assert!(row.last().is_none_or(|&c| c < ncols));
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        Self { nrows: rows.len(), ncols, row_ptr, col_idx }
    }

    pub fn identity(n: usize) -> Self {
        Self { nrows: n, ncols: n, row_ptr: (0..=n).collect(), col_idx: (0..n).collect() }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    /// Position of entry `(r, c)` in the value array.
    pub fn index_of(&self, r: usize, c: usize) -> Option<usize> {
        let start = self.row_ptr[r];
        self.row(r).binary_search(&c).ok().map(|k| start + k)
    }

    /// Transposed pattern together with, for each transposed entry, the index
    /// of the source entry in this pattern.
    pub fn transpose_with_map(&self) -> (CsrPattern, Vec<usize>) {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for k in 0..self.ncols {
            counts[k + 1] += counts[k];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0; self.nnz()];
        let mut map = vec![0; self.nnz()];
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                let dst = next[c];
                col_idx[dst] = r;
                map[dst] = k;
                next[c] += 1;
            }
        }
        (CsrPattern { nrows: self.ncols, ncols: self.nrows, row_ptr, col_idx }, map)
    }
}

#[derive(Clone, Debug)]
pub struct CsrMatrix {
    pattern: Arc<CsrPattern>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(pattern: Arc<CsrPattern>) -> Self {
        let values = vec![0.0; pattern.nnz()];
        Self { pattern, values }
    }

    pub fn from_parts(pattern: Arc<CsrPattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::DimensionMismatch { expected: pattern.nnz(), got: values.len() });
        }
        Ok(Self { pattern, values })
    }

    /// Dense row-major input; exact zeros are dropped.
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let ncols = rows.first().map_or(0, Vec::len);
        let cols = rows
            .iter()
            .map(|row| (0..ncols).filter(|&c| row[c] != 0.0).collect())
            .collect();
        let pattern = Arc::new(CsrPattern::from_rows(ncols, cols));
        let values = (0..rows.len())
            .flat_map(|r| pattern.row(r).iter().map(move |&c| rows[r][c]).collect::<Vec<_>>())
            .collect();
        Self { pattern, values }
    }

    pub fn identity(n: usize) -> Self {
        Self { pattern: Arc::new(CsrPattern::identity(n)), values: vec![1.0; n] }
    }

    pub fn pattern(&self) -> &Arc<CsrPattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn nrows(&self) -> usize {
        self.pattern.nrows
    }

    pub fn ncols(&self) -> usize {
        self.pattern.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pattern.index_of(r, c).map_or(0.0, |k| self.values[k])
    }

    /// Adds to an existing entry. Panics if `(r, c)` is not in the pattern.
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let k = self
            .pattern
            .index_of(r, c)
            .unwrap_or_else(|| panic!("entry ({r}, {c}) outside sparsity pattern"));
        self.values[k] += v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows()];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols(), "matvec input length");
        assert_eq!(y.len(), self.nrows(), "matvec output length");
        let p = &self.pattern;
        for (r, out) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in p.row_ptr[r]..p.row_ptr[r + 1] {
                s += self.values[k] * x[p.col_idx[k]];
            }
            *out = s;
        }
    }

    /// `x^T A y`.
    pub fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        let ay = self.matvec(y);
        x.iter().zip(&ay).map(|(a, b)| a * b).sum()
    }

    pub fn transpose(&self) -> CsrMatrix {
        let (pattern, map) = self.pattern.transpose_with_map();
        let values = map.iter().map(|&k| self.values[k]).collect();
        CsrMatrix { pattern: Arc::new(pattern), values }
    }

    /// `sum_i coeffs[i] * mats[i]`; all matrices must share one pattern.
    pub fn linear_combination(terms: &[(f64, &CsrMatrix)]) -> Result<CsrMatrix> {
        let (_, first) = terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty linear combination".into()))?;
        let mut values = vec![0.0; first.nnz()];
        for (a, m) in terms {
            if !Arc::ptr_eq(&m.pattern, &first.pattern) && *m.pattern != *first.pattern {
                return Err(Error::InvalidArgument("linear combination of different patterns".into()));
            }
            for (v, x) in values.iter_mut().zip(&m.values) {
                *v += a * x;
            }
        }
        Ok(CsrMatrix { pattern: first.pattern.clone(), values })
    }

    /// Largest absolute entry of `self - other`, over the union of patterns.
    pub fn max_abs_diff(&self, other: &CsrMatrix) -> f64 {
        let mut m: f64 = 0.0;
        for r in 0..self.nrows() {
            for &c in self.pattern.row(r).iter().chain(other.pattern.row(r)) {
                m = m.max((self.get(r, c) - other.get(r, c)).abs());
            }
        }
        m
    }

    /// Same pattern and bitwise-equal values.
    pub fn bit_eq(&self, other: &CsrMatrix) -> bool {
        *self.pattern == *other.pattern
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols()]; self.nrows()];
        for (r, row) in d.iter_mut().enumerate() {
            for k in self.pattern.row_ptr[r]..self.pattern.row_ptr[r + 1] {
                row[self.pattern.col_idx[k]] = self.values[k];
            }
        }
        d
    }
}
