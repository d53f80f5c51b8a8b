//! Compressed sparse row matrices with real values.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many output elements the serial loop wins.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from raw CSR arrays. Column indices within a row must be strictly increasing.
    pub fn from_raw(
        nrows: usize,
        ncols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != nrows + 1 || indptr[0] != 0 {
            return Err(Error::Shape(format!(
                "indptr length {} for {} rows",
                indptr.len(),
                nrows
            )));
        }
        if indices.len() != values.len() || *indptr.last().unwrap() != indices.len() {
            return Err(Error::Shape("indices/values/indptr disagree".into()));
        }
        for row in 0..nrows {
            let (lo, hi) = (indptr[row], indptr[row + 1]);
            if lo > hi {
                return Err(Error::Shape(format!("indptr decreases at row {row}")));
            }
            for w in indices[lo..hi].windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::Shape(format!("row {row} columns not strictly sorted")));
                }
            }
            if let Some(&c) = indices[lo..hi].last() {
                if c >= ncols {
                    return Err(Error::out_of_range("column", c, ncols));
                }
            }
        }
        Ok(Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from a row-major dense matrix, keeping nonzeros only.
    pub fn from_dense(nrows: usize, ncols: usize, dense: &[f64]) -> Self {
        assert_eq!(dense.len(), nrows * ncols);
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for i in 0..nrows {
            for j in 0..ncols {
                let v = dense[i * ncols + j];
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    /// Entry (i, j), zero when not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.nrows * self.ncols];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[i * self.ncols + j] = v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &j in &self.indices {
            counts[j + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let p = next[j];
                indices[p] = i;
                values[p] = v;
                next[j] += 1;
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            indptr,
            indices,
            values,
        }
    }

    /// Keeps only the listed rows, in the listed order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for &r in rows {
            if r >= self.nrows {
                return Err(Error::out_of_range("row", r, self.nrows));
            }
            let (cols, vals) = self.row(r);
            indices.extend_from_slice(cols);
            values.extend_from_slice(vals);
            indptr.push(indices.len());
        }
        Ok(Self {
            nrows: rows.len(),
            ncols: self.ncols,
            indptr,
            indices,
            values,
        })
    }

    pub fn is_symmetric(&self) -> bool {
        self.nrows == self.ncols && self.transpose() == *self
    }

    /// `self · dense` where `dense` is row-major `ncols × width`.
    pub fn mul_dense(&self, dense: &[f64], width: usize) -> Result<Vec<f64>> {
        if dense.len() != self.ncols * width {
            return Err(Error::Shape(format!(
                "spmm: sparse {}x{} times dense with {} values (width {})",
                self.nrows,
                self.ncols,
                dense.len(),
                width
            )));
        }
        let mut out = vec![0.0; self.nrows * width];
        if width == 0 {
            return Ok(out);
        }
        let body = |(i, out_row): (usize, &mut [f64])| {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let src = &dense[j * width..(j + 1) * width];
                for (o, s) in out_row.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        };
        if out.len() >= PAR_THRESHOLD {
            out.par_chunks_mut(width).enumerate().for_each(body);
        } else {
            out.chunks_mut(width).enumerate().for_each(body);
        }
        Ok(out)
    }
}
