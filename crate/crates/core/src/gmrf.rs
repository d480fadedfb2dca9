//! Symmetric sparse precision matrices and their Cholesky factorization.
//!
//! Storage is triplet-based (upper triangle only); the factor is dense
//! triangular, which is adequate at the scale this crate targets (a few
//! thousand latent variables). The interface keeps the factorization behind
//! `CholeskyFactor` so a sparse backend could replace it without touching
//! callers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Symmetric matrix stored as deduplicated upper-triangle entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricSparseMatrix {
    dim: usize,
    entries: BTreeMap<(usize, usize), f64>, // row <= col
}

impl SymmetricSparseMatrix {
    /// Build from (row, col, value) triplets. Duplicate keys are summed;
    /// entries are stored canonically with row <= col.
    pub fn build<I>(dim: usize, entry_list: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        if dim == 0 {
            return Err(Error::Domain("matrix dimension must be at least 1".into()));
        }
        let mut entries = BTreeMap::new();
        for (r, c, v) in entry_list {
            if r >= dim || c >= dim {
                return Err(Error::IndexOutOfRange { row: r, col: c, dim });
            }
            let key = if r <= c { (r, c) } else { (c, r) };
            *entries.entry(key).or_insert(0.0) += v;
        }
        Ok(SymmetricSparseMatrix { dim, entries })
    }

    pub fn zeros(dim: usize) -> Self {
        SymmetricSparseMatrix { dim, entries: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let key = if r <= c { (r, c) } else { (c, r) };
        *self.entries.get(&key).unwrap_or(&0.0)
    }

    /// Upper-triangle entries (row <= col) in sorted order.
    pub fn iter_upper(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().map(|(&(r, c), &v)| (r, c, v))
    }

    pub fn add_entry(&mut self, r: usize, c: usize, v: f64) -> Result<()> {
        if r >= self.dim || c >= self.dim {
            return Err(Error::IndexOutOfRange { row: r, col: c, dim: self.dim });
        }
        let key = if r <= c { (r, c) } else { (c, r) };
        *self.entries.entry(key).or_insert(0.0) += v;
        Ok(())
    }

    /// Accumulate `other` into `self` with its (0,0) placed at `offset`.
    pub fn add_block(&mut self, offset: usize, other: &SymmetricSparseMatrix) -> Result<()> {
        for (r, c, v) in other.iter_upper() {
            self.add_entry(offset + r, offset + c, v)?;
        }
        Ok(())
    }

    /// y = M x using the implied symmetric structure.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let mut y = vec![0.0; self.dim];
        for (&(r, c), &v) in &self.entries {
            y[r] += v * x[c];
            if r != c {
                y[c] += v * x[r];
            }
        }
        Ok(y)
    }

    /// x^T M x.
    pub fn quadratic_form(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let mut q = 0.0;
        for (&(r, c), &v) in &self.entries {
            if r == c {
                q += v * x[r] * x[r];
            } else {
                q += 2.0 * v * x[r] * x[c];
            }
        }
        Ok(q)
    }

    /// Dense row-major copy (tests and small-matrix paths).
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim;
        let mut d = vec![0.0; n * n];
        for (&(r, c), &v) in &self.entries {
            d[r * n + c] = v;
            d[c * n + r] = v;
        }
        d
    }

    /// Scale every entry by `s`.
    pub fn scaled(&self, s: f64) -> SymmetricSparseMatrix {
        let entries = self.entries.iter().map(|(&k, &v)| (k, v * s)).collect();
        SymmetricSparseMatrix { dim: self.dim, entries }
    }
}

/// Conditional regression coefficients and variances for one anchor index,
/// taken under the Gaussian with the factored matrix as precision.
#[derive(Debug, Clone)]
pub struct ConditionalStats {
    pub anchor_index: usize,
    /// a[j] = corr(x_anchor, x_j); a[anchor] = 1 by convention.
    pub a: Vec<f64>,
    /// var(x_j | x_anchor) = sigma_j^2 (1 - a[j]^2); zero at the anchor.
    pub conditional_variances: Vec<f64>,
}

/// Dense lower-triangular Cholesky factor of M + jitter*I.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    dim: usize,
    /// Packed row-major lower triangle: row i occupies l[i(i+1)/2 .. i(i+1)/2 + i + 1].
    l: Vec<f64>,
    log_det: f64,
}

#[inline]
fn row_start(i: usize) -> usize {
    i * (i + 1) / 2
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// log det of the factored matrix (M + jitter*I) = 2 sum log diag(L).
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn l_entry(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.l[row_start(i) + j]
        }
    }

    /// Solve (M + jitter*I) x = b.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: b.len() });
        }
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        Ok(x)
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.dim;
        // forward: L z = b
        for i in 0..n {
            let row = &self.l[row_start(i)..row_start(i) + i];
            let mut s = x[i];
            for (k, lik) in row.iter().enumerate() {
                s -= lik * x[k];
            }
            x[i] = s / self.l[row_start(i) + i];
        }
        // backward: L^T x = z
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[row_start(k) + i] * x[k];
            }
            x[i] = s / self.l[row_start(i) + i];
        }
    }

    /// Diagonal of the inverse of the factored matrix.
    ///
    /// Uses Sigma_ii = || L^{-1} e_i ||^2; the forward solve for e_i only
    /// touches rows i..n.
    pub fn marginal_variances(&self) -> Vec<f64> {
        let n = self.dim;
        let mut out = vec![0.0; n];
        let mut z = vec![0.0; n];
        for i in 0..n {
            for zk in z[i..n].iter_mut() {
                *zk = 0.0;
            }
            z[i] = 1.0;
            for r in i..n {
                let row = &self.l[row_start(r) + i..row_start(r) + r];
                let mut s = z[r];
                for (off, lrk) in row.iter().enumerate() {
                    s -= lrk * z[i + off];
                }
                z[r] = s / self.l[row_start(r) + r];
            }
            out[i] = z[i..n].iter().map(|v| v * v).sum();
        }
        out
    }

    /// Column `anchor` of the inverse (one solve against a unit vector).
    pub fn covariance_column(&self, anchor: usize) -> Result<Vec<f64>> {
        if anchor >= self.dim {
            return Err(Error::IndexOutOfRange { row: anchor, col: anchor, dim: self.dim });
        }
        let mut e = vec![0.0; self.dim];
        e[anchor] = 1.0;
        self.solve(&e)
    }

    /// Conditional regression coefficients a_ij = corr(x_i, x_j) and the
    /// conditional variances var(x_j|x_i), from one solve against e_i.
    /// `marginal_sds` must come from `marginal_variances` of this factor.
    pub fn conditional_stats(&self, anchor: usize, marginal_sds: &[f64]) -> Result<ConditionalStats> {
        if marginal_sds.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: marginal_sds.len() });
        }
        let col = self.covariance_column(anchor)?;
        let mut a = vec![0.0; self.dim];
        let mut cond_var = vec![0.0; self.dim];
        for j in 0..self.dim {
            if j == anchor {
                a[j] = 1.0;
                cond_var[j] = 0.0;
            } else {
                let corr = col[j] / (marginal_sds[anchor] * marginal_sds[j]);
                a[j] = corr;
                cond_var[j] = (marginal_sds[j] * marginal_sds[j] * (1.0 - corr * corr)).max(0.0);
            }
        }
        Ok(ConditionalStats { anchor_index: anchor, a, conditional_variances: cond_var })
    }
}

/// Factor M + jitter*I. Fails with the pivot index when a non-positive pivot
/// is hit; intrinsic (rank-deficient) priors must receive likelihood or
/// constraint contributions before factorizing rather than silent jitter.
pub fn cholesky(m: &SymmetricSparseMatrix, jitter: f64) -> Result<CholeskyFactor> {
    let n = m.dim();
    let mut a = vec![0.0; n * (n + 1) / 2]; // packed lower
    for (r, c, v) in m.iter_upper() {
        a[row_start(c) + r] = v; // (r,c) with r<=c lands in lower row c
    }
    if jitter != 0.0 {
        for i in 0..n {
            a[row_start(i) + i] += jitter;
        }
    }
    let mut log_det = 0.0;
    for i in 0..n {
        let (done, rest) = a.split_at_mut(row_start(i));
        let row_i = &mut rest[..i + 1];
        for j in 0..i {
            let mut s = row_i[j];
            if j > 0 {
                let row_j = &done[row_start(j)..row_start(j) + j];
                s -= row_i[..j].iter().zip(row_j.iter()).map(|(x, y)| x * y).sum::<f64>();
            }
            row_i[j] = s / done[row_start(j) + j];
        }
        let s = row_i[i] - row_i[..i].iter().map(|x| x * x).sum::<f64>();
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: i });
        }
        row_i[i] = s.sqrt();
        log_det += s.ln();
    }
    Ok(CholeskyFactor { dim: n, l: a, log_det })
}
