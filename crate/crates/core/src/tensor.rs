//! Dense row-major feature matrices.
//!
//! A [`FeatureArray`] holds one row per sparse entity (point, voxel, group) and
//! doubles as the storage for weight matrices.

use serde::{Deserialize, Serialize};

use crate::error::{FsdError, Result};

/// N×C row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureArray {
    n: usize,
    c: usize,
    data: Vec<f64>,
}

impl FeatureArray {
    pub fn zeros(n: usize, c: usize) -> Self {
        Self {
            n,
            c,
            data: vec![0.0; n * c],
        }
    }

    pub fn filled(n: usize, c: usize, value: f64) -> Self {
        Self {
            n,
            c,
            data: vec![value; n * c],
        }
    }

    pub fn from_vec(n: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c {
            return Err(FsdError::contract(format!(
                "feature array of shape {n}x{c} needs {} values, got {}",
                n * c,
                data.len()
            )));
        }
        Ok(Self { n, c, data })
    }

    /// Builds from nested rows; all rows must share a width.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let c = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * c);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != c {
                return Err(FsdError::contract(format!(
                    "row {i} has {} channels, expected {c}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { n: rows.len(), c, data })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.c)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.c..(i + 1) * self.c]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.c..(i + 1) * self.c]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.c + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.c + j] = v;
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let c = self.c.max(1);
        self.data.chunks_exact(c).take(if self.c == 0 { 0 } else { self.n })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &FeatureArray) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn dot(&self, other: &FeatureArray) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `self (n×k) · w (k×m)`.
    pub fn matmul(&self, w: &FeatureArray) -> FeatureArray {
        assert_eq!(self.c, w.n, "matmul inner dimension");
        let m = w.c;
        let mut out = FeatureArray::zeros(self.n, m);
        if m == 0 {
            return out;
        }
        for (x, o) in self.rows().zip(out.data.chunks_exact_mut(m)) {
            for (k, &xk) in x.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let wr = &w.data[k * m..(k + 1) * m];
                for (oj, wj) in o.iter_mut().zip(wr) {
                    *oj += xk * wj;
                }
            }
        }
        out
    }

    /// Accumulates `selfᵀ · dy` into `acc` (k×m), the weight gradient of a matmul.
    pub fn matmul_tn_acc(&self, dy: &FeatureArray, acc: &mut FeatureArray) {
        assert_eq!(self.n, dy.n);
        assert_eq!(acc.shape(), (self.c, dy.c));
        let m = dy.c;
        if m == 0 {
            return;
        }
        for (x, d) in self.rows().zip(dy.rows()) {
            for (k, &xk) in x.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let a = &mut acc.data[k * m..(k + 1) * m];
                for (aj, dj) in a.iter_mut().zip(d) {
                    *aj += xk * dj;
                }
            }
        }
    }

    /// `dy (n×m) · wᵀ` where `w` is k×m; the input gradient of a matmul.
    pub fn matmul_nt(&self, w: &FeatureArray) -> FeatureArray {
        assert_eq!(self.c, w.c);
        let k = w.n;
        let mut out = FeatureArray::zeros(self.n, k);
        if k == 0 {
            return out;
        }
        for (d, o) in self.rows().zip(out.data.chunks_exact_mut(k)) {
            for (oj, wr) in o.iter_mut().zip(w.rows()) {
                *oj = d.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        out
    }

    /// Column-wise concatenation `[a | b | ...]`.
    pub fn concat_cols(parts: &[&FeatureArray]) -> Result<FeatureArray> {
        let n = parts.first().map_or(0, |p| p.n);
        if let Some(p) = parts.iter().find(|p| p.n != n) {
            return Err(FsdError::contract(format!("concat row mismatch: {} vs {n}", p.n)));
        }
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut out = FeatureArray::zeros(n, c);
        for i in 0..n {
            let mut off = 0;
            let row = out.row_mut(i);
            for p in parts {
                row[off..off + p.c].copy_from_slice(p.row(i));
                off += p.c;
            }
        }
        Ok(out)
    }

    /// Columns `[start, start + width)` as a new array.
    pub fn slice_cols(&self, start: usize, width: usize) -> FeatureArray {
        assert!(start + width <= self.c);
        let mut out = FeatureArray::zeros(self.n, width);
        for i in 0..self.n {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    /// Gathers rows by index.
    pub fn gather_rows(&self, idx: &[usize]) -> FeatureArray {
        let mut out = FeatureArray::zeros(idx.len(), self.c);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// `self[idx[r]] += src[r]`, the adjoint of [`gather_rows`](Self::gather_rows).
    pub fn scatter_add_rows(&mut self, idx: &[usize], src: &FeatureArray) {
        assert_eq!(idx.len(), src.n);
        assert_eq!(self.c, src.c);
        for (r, &i) in idx.iter().enumerate() {
            for (a, b) in self.row_mut(i).iter_mut().zip(src.row(r)) {
                *a += b;
            }
        }
    }
}
