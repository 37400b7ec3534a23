//! Sparse storage, preconditioned Krylov solvers and a damped Newton iteration.

use crate::error::{Error, Result};
use crate::exec::{self, Strategy};

/// Compressed sparse row matrix with sorted, duplicate-free column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != n_rows + 1 || row_offsets[0] != 0 {
            return Err(Error::Shape(format!(
                "row_offsets must have length {} and start at 0",
                n_rows + 1
            )));
        }
        if col_indices.len() != values.len() || *row_offsets.last().unwrap() != values.len() {
            return Err(Error::Shape(
                "col_indices/values length does not match row_offsets".into(),
            ));
        }
        for r in 0..n_rows {
            let (lo, hi) = (row_offsets[r], row_offsets[r + 1]);
            if hi < lo {
                return Err(Error::Shape(format!("row_offsets decrease at row {r}")));
            }
            let cols = &col_indices[lo..hi];
            if cols.iter().any(|&c| c >= n_cols) {
                return Err(Error::Shape(format!("column index out of bounds in row {r}")));
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Shape(format!(
                    "column indices not strictly increasing in row {r}"
                )));
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        if sorted.iter().any(|&(i, j, _)| i >= n_rows || j >= n_cols) {
            return Err(Error::Shape("triplet index out of bounds".into()));
        }
        sorted.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_offsets = vec![0; n_rows + 1];
        let mut col_indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in sorted {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_indices.push(j);
                values.push(v);
                row_offsets[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for r in 0..n_rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        Self::new(n_rows, n_cols, row_offsets, col_indices, values)
    }

    /// Stores every nonzero of a dense row-major matrix.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut triplets = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::Shape("ragged dense matrix".into()));
            }
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    triplets.push((i, j, v));
                }
            }
        }
        Self::from_triplets(rows.len(), n_cols, &triplets)
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: d.to_vec(),
        }
    }

    pub(crate) fn from_parts_unchecked(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(row_offsets.len(), n_rows + 1);
        debug_assert_eq!(col_indices.len(), values.len());
        Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |k| vals[k])
    }

    pub fn diagonal_values(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (i, row) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                row[j] = v;
            }
        }
        out
    }

    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_cols {
            return Err(Error::Shape(format!(
                "spmv: matrix has {} columns, vector has {} entries",
                self.n_cols,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.n_rows];
        self.spmv_into(x, &mut y);
        Ok(y)
    }

    /// `y = A x` without allocation. Lengths must match.
    pub fn spmv_into(&self, x: &[f64], y: &mut [f64]) {
        self.spmv_with(Strategy::current(), x, y);
    }

    pub fn spmv_with(&self, strategy: Strategy, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols);
        assert_eq!(y.len(), self.n_rows);
        exec::for_each_chunk_mut(strategy, y, 1024, |off, ys| {
            for (k, yv) in ys.iter_mut().enumerate() {
                let r = off + k;
                let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
                let mut acc = 0.0;
                for p in lo..hi {
                    acc += self.values[p] * x[self.col_indices[p]];
                }
                *yv = acc;
            }
        });
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|v| *v *= a);
    }

    pub fn scale_rows(&mut self, d: &[f64]) {
        assert_eq!(d.len(), self.n_rows);
        for (r, &dr) in d.iter().enumerate() {
            for v in &mut self.values[self.row_offsets[r]..self.row_offsets[r + 1]] {
                *v *= dr;
            }
        }
    }

    pub fn same_pattern(&self, other: &CsrMatrix) -> bool {
        self.n_rows == other.n_rows
            && self.n_cols == other.n_cols
            && self.row_offsets == other.row_offsets
            && self.col_indices == other.col_indices
    }

    /// `Σ c_k A_k` for matrices sharing one sparsity pattern.
    pub fn linear_combination(terms: &[(f64, &CsrMatrix)]) -> Result<CsrMatrix> {
        let (_, first) = terms
            .first()
            .ok_or_else(|| Error::Shape("empty linear combination".into()))?;
        if terms.iter().any(|(_, m)| !m.same_pattern(first)) {
            return Err(Error::Shape(
                "linear combination requires a shared sparsity pattern".into(),
            ));
        }
        let mut out = (*first).clone();
        out.values.iter_mut().for_each(|v| *v = 0.0);
        for (c, m) in terms {
            for (o, v) in out.values.iter_mut().zip(&m.values) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    /// Stacks four blocks into `[[a11, a12], [a21, a22]]`.
    pub fn block_2x2(a11: &CsrMatrix, a12: &CsrMatrix, a21: &CsrMatrix, a22: &CsrMatrix) -> Result<CsrMatrix> {
        let (n1, n2) = (a11.n_rows, a21.n_rows);
        let (m1, m2) = (a11.n_cols, a12.n_cols);
        if a12.n_rows != n1 || a22.n_rows != n2 || a21.n_cols != m1 || a22.n_cols != m2 {
            return Err(Error::Shape("inconsistent block dimensions".into()));
        }
        let nnz = a11.nnz() + a12.nnz() + a21.nnz() + a22.nnz();
        let mut row_offsets = Vec::with_capacity(n1 + n2 + 1);
        let mut col_indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_offsets.push(0);
        for (left, right) in [(a11, a12), (a21, a22)] {
            for r in 0..left.n_rows {
                let (c, v) = left.row(r);
                col_indices.extend_from_slice(c);
                values.extend_from_slice(v);
                let (c, v) = right.row(r);
                col_indices.extend(c.iter().map(|&j| j + m1));
                values.extend_from_slice(v);
                row_offsets.push(values.len());
            }
        }
        Ok(Self::from_parts_unchecked(n1 + n2, m1 + m2, row_offsets, col_indices, values))
    }

    /// Largest `|a_ij - a_ji|` relative to the largest `|a_ij|`.
    pub fn symmetry_defect(&self) -> f64 {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst / scale
    }
}

/// Approximate inverse applied inside the Krylov iterations.
pub trait Preconditioner: Send + Sync {
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

/// Diagonal scaling; zero diagonal entries are left unscaled.
pub struct Jacobi {
    inv_diag: Vec<f64>,
}

impl Jacobi {
    pub fn new(a: &CsrMatrix) -> Self {
        let inv_diag = a
            .diagonal_values()
            .into_iter()
            .map(|d| if d != 0.0 && d.is_finite() { 1.0 / d } else { 1.0 })
            .collect();
        Self { inv_diag }
    }
}

impl Preconditioner for Jacobi {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        for ((zi, ri), di) in z.iter_mut().zip(r).zip(&self.inv_diag) {
            *zi = ri * di;
        }
    }
}

/// LU factorization with partial pivoting of a symmetrically permuted band
/// matrix. `perm[new] = old`; the bandwidth is taken from the permuted pattern.
pub struct BandLu {
    n: usize,
    kl: usize,
    width: usize,
    perm: Vec<usize>,
    // row i stores columns i - kl ..= i + kl + ku
    ab: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandLu {
    /// Lower and upper bandwidth of `a` under `perm`.
    pub fn bandwidth(a: &CsrMatrix, perm: &[usize]) -> (usize, usize) {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let (mut kl, mut ku) = (0, 0);
        for old_r in 0..a.n_rows {
            let r = inv[old_r];
            for &old_c in a.row(old_r).0 {
                let c = inv[old_c];
                if c < r {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        (kl, ku)
    }

    pub fn new(a: &CsrMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = a.n_rows;
        if a.n_cols != n || perm.len() != n {
            return Err(Error::Shape("band factorization needs a square matrix and a full permutation".into()));
        }
        let mut inv = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inv[old] != usize::MAX {
                return Err(Error::Shape("invalid permutation".into()));
            }
            inv[old] = new;
        }
        let (kl, ku) = Self::bandwidth(a, &perm);
        let width = 2 * kl + ku + 1;
        let mut lu = Self {
            n,
            kl,
            width,
            perm,
            ab: vec![0.0; n * width],
            pivots: vec![0; n],
        };
        for old_r in 0..n {
            let r = inv[old_r];
            let (cols, vals) = a.row(old_r);
            for (&old_c, &v) in cols.iter().zip(vals) {
                *lu.at(r, inv[old_c]) += v;
            }
        }
        let ku_fill = kl + ku;
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = lu.get(k, k).abs();
            for r in k + 1..=last {
                let v = lu.get(r, k).abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if !(best > 0.0) {
                return Err(Error::Solver {
                    method: "band LU",
                    iterations: k,
                    residual: f64::NAN,
                });
            }
            lu.pivots[k] = p;
            let cmax = (k + ku_fill).min(n - 1);
            if p != k {
                for c in k..=cmax {
                    let t = lu.get(k, c);
                    *lu.at(k, c) = lu.get(p, c);
                    *lu.at(p, c) = t;
                }
            }
            let d = lu.get(k, k);
            for r in k + 1..=last {
                let l = lu.get(r, k) / d;
                *lu.at(r, k) = l;
                if l != 0.0 {
                    for c in k + 1..=cmax {
                        let u = lu.get(k, c);
                        *lu.at(r, c) -= l * u;
                    }
                }
            }
        }
        Ok(lu)
    }

    fn at(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.ab[r * self.width + (c + self.kl - r)]
    }

    fn get(&self, r: usize, c: usize) -> f64 {
        self.ab[r * self.width + (c + self.kl - r)]
    }

    /// Solves `A x = b` in place (original ordering).
    pub fn solve(&self, b: &[f64], x: &mut [f64]) {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        let ku_fill = self.width - 1 - self.kl;
        for k in 0..n {
            let p = self.pivots[k];
            y.swap(k, p);
            let yk = y[k];
            for r in k + 1..=(k + self.kl).min(n - 1) {
                y[r] -= self.get(r, k) * yk;
            }
        }
        for k in (0..n).rev() {
            let mut acc = y[k];
            for c in k + 1..=(k + ku_fill).min(n - 1) {
                acc -= self.get(k, c) * y[c];
            }
            y[k] = acc / self.get(k, k);
        }
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
    }
}

impl Preconditioner for BandLu {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        self.solve(r, z);
    }
}

/// Block-diagonal scaling for a two-field system `[x; y]` of equal halves:
/// the 2×2 blocks coupling unknowns `i` and `i + n/2` are inverted exactly.
pub struct PairJacobi {
    half: usize,
    inv: Vec<[f64; 4]>,
}

impl PairJacobi {
    pub fn new(a: &CsrMatrix) -> Self {
        let half = a.n_rows / 2;
        let inv = (0..half)
            .map(|i| {
                let j = i + half;
                let (a11, a12, a21, a22) = (a.get(i, i), a.get(i, j), a.get(j, i), a.get(j, j));
                let det = a11 * a22 - a12 * a21;
                if det != 0.0 && det.is_finite() {
                    [a22 / det, -a12 / det, -a21 / det, a11 / det]
                } else {
                    [1.0, 0.0, 0.0, 1.0]
                }
            })
            .collect();
        Self { half, inv }
    }
}

impl Preconditioner for PairJacobi {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let h = self.half;
        for (i, [b11, b12, b21, b22]) in self.inv.iter().enumerate() {
            let (u, v) = (r[i], r[i + h]);
            z[i] = b11 * u + b12 * v;
            z[i + h] = b21 * u + b22 * v;
        }
        z[2 * h..].copy_from_slice(&r[2 * h..]);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KrylovSettings {
    /// Relative residual target `‖b − Ax‖ ≤ tol ‖b‖`.
    pub tol: f64,
    /// `None` means ten times the system size.
    pub max_iter: Option<usize>,
}

impl Default for KrylovSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: None,
        }
    }
}

impl KrylovSettings {
    fn limit(&self, n: usize) -> usize {
        self.max_iter.unwrap_or(10 * n.max(1))
    }
}

#[derive(Clone, Debug)]
pub struct KrylovOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

impl KrylovOutcome {
    fn into_result(self, method: &'static str) -> Result<Vec<f64>> {
        if self.converged {
            Ok(self.x)
        } else {
            Err(Error::Solver {
                method,
                iterations: self.iterations,
                residual: self.relative_residual,
            })
        }
    }
}

fn check_square(a: &CsrMatrix, b: &[f64], x0: Option<&[f64]>) -> Result<()> {
    if a.n_rows != a.n_cols || b.len() != a.n_rows || x0.is_some_and(|x| x.len() != a.n_cols) {
        return Err(Error::Shape(format!(
            "solver expects a square system; got {}x{} with rhs of length {}",
            a.n_rows,
            a.n_cols,
            b.len()
        )));
    }
    Ok(())
}

fn residual(a: &CsrMatrix, x: &[f64], b: &[f64], r: &mut [f64]) {
    a.spmv_into(x, r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
}

/// Preconditioned conjugate gradients for symmetric positive (semi)definite systems.
pub fn cg(
    a: &CsrMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    pc: &dyn Preconditioner,
    settings: KrylovSettings,
) -> Result<KrylovOutcome> {
    check_square(a, b, x0)?;
    let n = b.len();
    let mut x = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let b_norm = exec::norm2(b);
    if b_norm == 0.0 {
        return Ok(KrylovOutcome {
            x: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        });
    }
    let target = settings.tol * b_norm;
    let mut r = vec![0.0; n];
    residual(a, &x, b, &mut r);
    let mut r_norm = exec::norm2(&r);
    let mut z = vec![0.0; n];
    pc.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = exec::dot(&r, &z);
    let mut ap = vec![0.0; n];
    let limit = settings.limit(n);
    let mut it = 0;
    while r_norm > target && it < limit {
        it += 1;
        a.spmv_into(&p, &mut ap);
        let pap = exec::dot(&p, &ap);
        if !(pap > 0.0) || !(rz.abs() > 0.0) {
            break;
        }
        let alpha = rz / pap;
        exec::axpy(alpha, &p, &mut x);
        exec::axpy(-alpha, &ap, &mut r);
        r_norm = exec::norm2(&r);
        if r_norm <= target {
            break;
        }
        pc.apply(&r, &mut z);
        let rz_new = exec::dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    // guard against drift of the recursive residual
    residual(a, &x, b, &mut r);
    let rel = exec::norm2(&r) / b_norm;
    Ok(KrylovOutcome {
        x,
        iterations: it,
        relative_residual: rel,
        converged: rel <= settings.tol * 10.0 && r_norm <= target,
    })
}

/// Right-preconditioned BiCGStab with restarts on breakdown.
pub fn bicgstab(
    a: &CsrMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    pc: &dyn Preconditioner,
    settings: KrylovSettings,
) -> Result<KrylovOutcome> {
    check_square(a, b, x0)?;
    let n = b.len();
    let mut x = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let b_norm = exec::norm2(b);
    if b_norm == 0.0 {
        return Ok(KrylovOutcome {
            x: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        });
    }
    let target = settings.tol * b_norm;
    let limit = settings.limit(n);

    let mut r = vec![0.0; n];
    residual(a, &x, b, &mut r);
    let mut r_norm = exec::norm2(&r);
    let mut best = (r_norm, x.clone());
    let mut r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut it = 0;
    let mut restarts = 0;

    while it < limit {
        if r_norm <= target {
            // confirm with the true residual before returning
            residual(a, &x, b, &mut r);
            r_norm = exec::norm2(&r);
            if r_norm <= target {
                break;
            }
        }
        it += 1;
        let rho_new = exec::dot(&r_hat, &r);
        if rho_new.abs() <= 1e-30 * exec::norm2(&r_hat) * r_norm {
            restarts += 1;
            if restarts > 20 {
                break;
            }
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            p.iter_mut().for_each(|e| *e = 0.0);
            v.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        pc.apply(&p, &mut p_hat);
        a.spmv_into(&p_hat, &mut v);
        let rv = exec::dot(&r_hat, &v);
        if rv == 0.0 || !rv.is_finite() {
            restarts += 1;
            if restarts > 20 {
                break;
            }
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            p.iter_mut().for_each(|e| *e = 0.0);
            v.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        alpha = rho / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        let s_norm = exec::norm2(&s);
        if s_norm <= target {
            exec::axpy(alpha, &p_hat, &mut x);
            r.copy_from_slice(&s);
            r_norm = s_norm;
            if r_norm < best.0 {
                best = (r_norm, x.clone());
            }
            continue;
        }
        pc.apply(&s, &mut s_hat);
        a.spmv_into(&s_hat, &mut t);
        let tt = exec::dot(&t, &t);
        omega = if tt > 0.0 { exec::dot(&t, &s) / tt } else { 0.0 };
        exec::axpy(alpha, &p_hat, &mut x);
        exec::axpy(omega, &s_hat, &mut x);
        for i in 0..n {
            r[i] = s[i] - omega * t[i];
        }
        r_norm = exec::norm2(&r);
        if !r_norm.is_finite() {
            break;
        }
        if r_norm < best.0 {
            best = (r_norm, x.clone());
        }
        if omega == 0.0 {
            restarts += 1;
            if restarts > 20 {
                break;
            }
            residual(a, &x, b, &mut r);
            r_hat.copy_from_slice(&r);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            p.iter_mut().for_each(|e| *e = 0.0);
            v.iter_mut().for_each(|e| *e = 0.0);
        }
    }

    residual(a, &x, b, &mut r);
    let mut true_norm = exec::norm2(&r);
    if !(true_norm <= best.0) || !true_norm.is_finite() {
        x = best.1;
        residual(a, &x, b, &mut r);
        true_norm = exec::norm2(&r);
    }
    let rel = true_norm / b_norm;
    Ok(KrylovOutcome {
        x,
        iterations: it,
        relative_residual: rel,
        converged: true_norm <= target,
    })
}

/// Jacobi-preconditioned CG; non-convergence is an error carrying the final residual.
pub fn cg_solve(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let settings = KrylovSettings {
        tol,
        max_iter: Some(max_iter),
    };
    cg(a, b, None, &Jacobi::new(a), settings)?.into_result("CG")
}

/// Jacobi-preconditioned BiCGStab; non-convergence is an error carrying the final residual.
pub fn bicgstab_solve(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let settings = KrylovSettings {
        tol,
        max_iter: Some(max_iter),
    };
    bicgstab(a, b, None, &Jacobi::new(a), settings)?.into_result("BiCGStab")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonSettings {
    /// Converged when `‖F(x)‖ ≤ tol · max(1, ‖F(x0)‖)`.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub krylov: KrylovSettings,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
            max_halvings: 10,
            krylov: KrylovSettings::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NewtonOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    /// `‖F‖` at the initial guess and after every accepted step.
    pub history: Vec<f64>,
    pub krylov_iterations: usize,
}

/// A square nonlinear system `F(x) = 0` with a sparse Jacobian.
pub trait NewtonProblem {
    fn residual(&mut self, x: &[f64], out: &mut [f64]) -> Result<()>;

    fn jacobian(&mut self, x: &[f64]) -> Result<CsrMatrix>;

    fn preconditioner(&mut self, _x: &[f64], jacobian: &CsrMatrix) -> Box<dyn Preconditioner> {
        Box::new(Jacobi::new(jacobian))
    }

    /// A second Jacobian, e.g. the exact one behind an approximate
    /// `jacobian`, used when the line search stalls or convergence is slow.
    fn fallback_jacobian(&mut self, _x: &[f64]) -> Option<Result<CsrMatrix>> {
        None
    }
}

/// Undamped steps reducing `‖F‖` by less than this factor move Newton to
/// the fallback Jacobian.
const SLOW_CONTRACTION: f64 = 0.5;

/// Newton's method with backtracking: the step is halved (up to
/// `max_halvings` times) until the residual norm decreases. A stalled line
/// search is retried once with the other Jacobian.
pub fn newton<P: NewtonProblem + ?Sized>(
    problem: &mut P,
    x0: &[f64],
    settings: &NewtonSettings,
) -> Result<NewtonOutcome> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut f = vec![0.0; n];
    problem.residual(&x, &mut f)?;
    let mut f_norm = exec::norm2(&f);
    if !f_norm.is_finite() {
        return Err(Error::Newton {
            reason: "non-finite residual at the initial guess".into(),
            iterations: 0,
            history: vec![f_norm],
        });
    }
    let threshold = settings.tol * f_norm.max(1.0);
    let mut history = vec![f_norm];
    let mut krylov_iterations = 0;
    let mut x_try = vec![0.0; n];
    let mut f_try = vec![0.0; n];
    let mut use_fallback = false;

    for k in 1..=settings.max_iter {
        if f_norm <= threshold {
            return Ok(NewtonOutcome {
                x,
                iterations: k - 1,
                residual_norm: f_norm,
                history,
                krylov_iterations,
            });
        }
        let preferred = if use_fallback { problem.fallback_jacobian(&x) } else { None };
        let mut jac = Some(preferred.unwrap_or_else(|| problem.jacobian(&x)));
        let mut accepted = false;
        let mut switched = false;
        let mut full_step = false;
        let f_prev = f_norm;
        while let Some(j) = jac.take() {
            let j = j?;
            let pc = problem.preconditioner(&x, &j);
            let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
            let lin = bicgstab(&j, &rhs, None, pc.as_ref(), settings.krylov)?;
            krylov_iterations += lin.iterations;
            // inexact steps are still descent directions when the linear residual is small
            if !lin.converged && !(lin.relative_residual < 1e-2) {
                return Err(Error::Newton {
                    reason: format!(
                        "linear solve failed (relative residual {:.3e} after {} iterations)",
                        lin.relative_residual, lin.iterations
                    ),
                    iterations: k,
                    history,
                });
            }
            let step = lin.x;
            let mut lambda = 1.0;
            for _ in 0..=settings.max_halvings {
                for i in 0..n {
                    x_try[i] = x[i] + lambda * step[i];
                }
                problem.residual(&x_try, &mut f_try)?;
                let n_try = exec::norm2(&f_try);
                if n_try.is_finite() && (n_try < f_norm || n_try <= threshold) {
                    std::mem::swap(&mut x, &mut x_try);
                    std::mem::swap(&mut f, &mut f_try);
                    f_norm = n_try;
                    accepted = true;
                    full_step = lambda == 1.0;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted && !switched {
                switched = true;
                jac = if use_fallback {
                    Some(problem.jacobian(&x))
                } else {
                    problem.fallback_jacobian(&x)
                };
            }
        }
        if !accepted {
            return Err(Error::Newton {
                reason: "line search stalled".into(),
                iterations: k,
                history,
            });
        }
        history.push(f_norm);
        if switched {
            use_fallback = false;
        } else if full_step && f_norm > SLOW_CONTRACTION * f_prev {
            use_fallback = true;
        }
    }
    if f_norm <= threshold {
        return Ok(NewtonOutcome {
            x,
            iterations: settings.max_iter,
            residual_norm: f_norm,
            history,
            krylov_iterations,
        });
    }
    Err(Error::Newton {
        reason: "iteration limit exceeded".into(),
        iterations: settings.max_iter,
        history,
    })
}

struct ClosureProblem<R, J> {
    residual: R,
    jacobian: J,
}

impl<R, J> NewtonProblem for ClosureProblem<R, J>
where
    R: FnMut(&[f64]) -> Vec<f64>,
    J: FnMut(&[f64]) -> CsrMatrix,
{
    fn residual(&mut self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let f = (self.residual)(x);
        if f.len() != out.len() {
            return Err(Error::Shape("residual length differs from state length".into()));
        }
        out.copy_from_slice(&f);
        Ok(())
    }

    fn jacobian(&mut self, x: &[f64]) -> Result<CsrMatrix> {
        Ok((self.jacobian)(x))
    }
}

/// Closure front end to [`newton`] with default Krylov settings.
pub fn newton_solve<R, J>(residual: R, jacobian: J, x0: &[f64], tol: f64, max_iter: usize) -> Result<NewtonOutcome>
where
    R: FnMut(&[f64]) -> Vec<f64>,
    J: FnMut(&[f64]) -> CsrMatrix,
{
    let settings = NewtonSettings {
        tol,
        max_iter,
        ..NewtonSettings::default()
    };
    newton(&mut ClosureProblem { residual, jacobian }, x0, &settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_mv(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn laplacian_1d_neumann(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            let mut d = 0.0;
            if i > 0 {
                t.push((i, i - 1, -1.0));
                d += 1.0;
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                d += 1.0;
            }
            t.push((i, i, d));
        }
        CsrMatrix::from_triplets(n, n, &t).unwrap()
    }

    #[test]
    fn invariants_are_checked() {
        assert!(CsrMatrix::new(2, 2, vec![0, 1, 2], vec![0, 0], vec![1.0, 1.0]).is_ok());
        assert!(CsrMatrix::new(2, 2, vec![0, 2, 2], vec![1, 0], vec![1.0, 1.0]).is_err());
        assert!(CsrMatrix::new(2, 2, vec![0, 1, 2], vec![0, 2], vec![1.0, 1.0]).is_err());
        assert!(CsrMatrix::new(2, 2, vec![0, 2, 1], vec![0, 1], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn triplets_sum_duplicates() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, 4.0)]).unwrap();
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.get(1, 0), 4.0);
        assert_eq!(a.nnz(), 2);
    }

    #[test]
    fn spmv_identity_zero_and_dense() {
        let x = vec![1.0, -2.0, 3.5];
        assert_eq!(CsrMatrix::identity(3).spmv(&x).unwrap(), x);
        let z = CsrMatrix::from_triplets(3, 3, &[]).unwrap();
        assert_eq!(z.spmv(&x).unwrap(), vec![0.0; 3]);
        let dense = vec![
            vec![2.0, 0.0, -1.0],
            vec![0.5, 3.0, 0.0],
            vec![0.0, -4.0, 1.25],
        ];
        let a = CsrMatrix::from_dense(&dense).unwrap();
        assert_eq!(a.spmv(&x).unwrap(), dense_mv(&dense, &x));
        assert!(matches!(a.spmv(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn cg_identity_one_iteration() {
        let b = vec![1.0, 2.0, 3.0];
        let out = cg(&CsrMatrix::identity(3), &b, None, &Jacobi::new(&CsrMatrix::identity(3)), KrylovSettings::default()).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.x, b);
    }

    #[test]
    fn cg_diagonal() {
        let a = CsrMatrix::diagonal(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = vec![1.0, 1.0, 1.0, 1.0, 1.0];
        let x = cg_solve(&a, &b, 1e-12, 50).unwrap();
        for (i, xi) in x.iter().enumerate() {
            assert!((xi - 1.0 / (i as f64 + 1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn cg_singular_neumann_mean_zero() {
        let n = 12;
        let a = laplacian_1d_neumann(n);
        let b: Vec<f64> = (0..n).map(|i| (i as f64 - 5.5) * 0.1).collect();
        let x = cg_solve(&a, &b, 1e-12, 200).unwrap();
        let r = a.spmv(&x).unwrap();
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-10);
        }
    }

    #[test]
    fn krylov_reports_nonconvergence() {
        // singular with incompatible rhs
        let a = CsrMatrix::from_dense(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let err = bicgstab_solve(&a, &[1.0, -1.0], 1e-10, 50).unwrap_err();
        match err {
            Error::Solver { residual, .. } => assert!(residual > 1e-3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bicgstab_nonsymmetric() {
        let dense = vec![
            vec![4.0, 1.0, 0.0, 0.3],
            vec![-2.0, 5.0, 1.0, 0.0],
            vec![0.0, -1.0, 3.0, 1.0],
            vec![0.5, 0.0, -2.0, 6.0],
        ];
        let a = CsrMatrix::from_dense(&dense).unwrap();
        let x_true = vec![1.0, -2.0, 0.5, 3.0];
        let b = dense_mv(&dense, &x_true);
        let x = bicgstab_solve(&a, &b, 1e-13, 100).unwrap();
        for (xi, ti) in x.iter().zip(&x_true) {
            assert!((xi - ti).abs() < 1e-11);
        }
    }

    #[test]
    fn krylov_stationary_on_exact_solution() {
        let a = laplacian_1d_neumann(6);
        assert!(CsrMatrix::linear_combination(&[(1.0, &a), (1.0, &CsrMatrix::identity(6))]).is_err());
        let spd = CsrMatrix::from_triplets(
            6,
            6,
            &(0..6)
                .flat_map(|i| {
                    let (c, v) = a.row(i);
                    c.iter()
                        .zip(v)
                        .map(move |(&j, &val)| (i, j, val + if i == j { 1.0 } else { 0.0 }))
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let x = vec![0.3, -1.0, 2.0, 0.0, 1.5, -0.25];
        let b = spd.spmv(&x).unwrap();
        for solver in [cg, bicgstab] {
            let out = solver(&spd, &b, Some(&x), &Jacobi::new(&spd), KrylovSettings::default()).unwrap();
            assert!(out.iterations <= 1);
            assert_eq!(out.x, x);
        }
    }

    #[test]
    fn band_lu_matches_dense_solve() {
        // nonsymmetric, needs pivoting: zero in the (0,0) slot
        let dense = vec![
            vec![0.0, 2.0, 0.0, 0.0, 0.0],
            vec![1.0, 1.0, 3.0, 0.0, 0.0],
            vec![0.0, -1.0, 4.0, 1.0, 0.0],
            vec![0.0, 0.0, 2.0, -5.0, 1.0],
            vec![0.0, 0.0, 0.0, 1.0, 2.0],
        ];
        let a = CsrMatrix::from_dense(&dense).unwrap();
        let b = [1.0, -2.0, 0.5, 3.0, 1.0];
        for perm in [vec![0, 1, 2, 3, 4], vec![4, 2, 0, 1, 3]] {
            let lu = BandLu::new(&a, perm).unwrap();
            let mut x = [0.0; 5];
            lu.solve(&b, &mut x);
            let r = dense_mv(&dense, &x);
            for (ri, bi) in r.iter().zip(&b) {
                assert!((ri - bi).abs() < 1e-12);
            }
        }
        assert_eq!(BandLu::bandwidth(&a, &[0, 1, 2, 3, 4]), (1, 1));
        let singular = CsrMatrix::from_dense(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(BandLu::new(&singular, vec![0, 1]).is_err());
    }

    #[test]
    fn block_assembly() {
        let i2 = CsrMatrix::identity(2);
        let z = CsrMatrix::from_triplets(2, 2, &[(0, 1, 5.0)]).unwrap();
        let b = CsrMatrix::block_2x2(&i2, &z, &z, &i2).unwrap();
        assert_eq!(b.get(0, 3), 5.0);
        assert_eq!(b.get(2, 1), 5.0);
        assert_eq!(b.get(3, 3), 1.0);
        assert_eq!(b.nnz(), 6);
    }

    #[test]
    fn newton_linear_one_iteration() {
        let dense = vec![vec![3.0, 1.0], vec![-1.0, 2.0]];
        let a = CsrMatrix::from_dense(&dense).unwrap();
        let b = vec![1.0, 4.0];
        let out = newton_solve(
            |x| {
                let ax = a.spmv(x).unwrap();
                ax.iter().zip(&b).map(|(p, q)| p - q).collect()
            },
            |_| a.clone(),
            &[0.0, 0.0],
            1e-8,
            20,
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
        let expect = bicgstab_solve(&a, &b, 1e-12, 20).unwrap();
        for (p, q) in out.x.iter().zip(&expect) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn newton_cubic_nodes() {
        let n = 4;
        let out = newton_solve(
            |x| x.iter().map(|v| v * v * v - v).collect(),
            |x| CsrMatrix::diagonal(&x.iter().map(|v| 3.0 * v * v - 1.0).collect::<Vec<_>>()),
            &vec![2.0; n],
            1e-12,
            50,
        )
        .unwrap();
        // scalar oracle: Newton on x^3 - x from 2
        let mut s: f64 = 2.0;
        for _ in 0..out.iterations {
            s -= (s * s * s - s) / (3.0 * s * s - 1.0);
        }
        for v in &out.x {
            assert!((v - 1.0).abs() < 1e-10);
            assert!((v - s).abs() < 1e-12);
        }
        // quadratic convergence: the last ratios shrink
        let h = &out.history;
        let k = h.len();
        assert!(h[k - 1] / h[k - 2] < h[k - 2] / h[k - 3]);
    }

    #[test]
    fn newton_zero_residual_returns_immediately() {
        let out = newton_solve(
            |x| vec![0.0; x.len()],
            |x| CsrMatrix::identity(x.len()),
            &[1.0, 2.0],
            1e-8,
            5,
        )
        .unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.x, vec![1.0, 2.0]);
    }

    #[test]
    fn newton_reports_iteration_limit() {
        // no real root: x^2 + 1
        let err = newton_solve(
            |x| x.iter().map(|v| v * v + 1.0).collect(),
            |x| CsrMatrix::diagonal(&x.iter().map(|v| 2.0 * v).collect::<Vec<_>>()),
            &[0.5],
            1e-10,
            8,
        )
        .unwrap_err();
        match err {
            Error::Newton { history, .. } => assert!(!history.is_empty()),
            e => panic!("unexpected {e}"),
        }
    }

    struct Uphill {
        fallbacks: usize,
    }

    impl NewtonProblem for Uphill {
        fn residual(&mut self, x: &[f64], out: &mut [f64]) -> Result<()> {
            out[0] = x[0] * x[0] + 1.0;
            Ok(())
        }

        fn jacobian(&mut self, x: &[f64]) -> Result<CsrMatrix> {
            Ok(CsrMatrix::diagonal(&[-2.0 * x[0]]))
        }

        fn fallback_jacobian(&mut self, x: &[f64]) -> Option<Result<CsrMatrix>> {
            self.fallbacks += 1;
            Some(self.jacobian(x))
        }
    }

    #[test]
    fn newton_stalled_fallback_is_tried_once() {
        let mut p = Uphill { fallbacks: 0 };
        let err = newton(&mut p, &[1.0], &NewtonSettings::default()).unwrap_err();
        assert!(matches!(err, Error::Newton { .. }), "{err}");
        assert_eq!(p.fallbacks, 1);
    }
}
