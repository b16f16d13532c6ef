//! Real Schur decomposition and dominant invariant subspaces for small
//! dense matrices.
//!
//! The Hessenberg reduction and the Francis double-shift iteration follow the
//! classical EISPACK `orthes`/`hqr2` routines (Schur part only). Reordering
//! swaps adjacent diagonal blocks by solving a small Sylvester equation and
//! applying the orthogonal factor of `[-X; I]`.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sphere::{dot, UnitVector};

pub const MAX_DIM: usize = 32;

/// An eigenvalue `re + i·im`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

/// `A = Z T Zᵀ` with `Z` orthogonal and `T` quasi upper triangular.
#[derive(Debug, Clone)]
pub struct RealSchur {
    pub z: Matrix,
    pub t: Matrix,
    /// Start index and size (1 or 2) of each diagonal block of `T`.
    pub blocks: Vec<(usize, usize)>,
}

impl RealSchur {
    pub fn eigenvalues(&self) -> Vec<Eigenvalue> {
        let mut out = Vec::with_capacity(self.t.rows());
        for &(s, size) in &self.blocks {
            out.extend(block_eigenvalues(&self.t, s, size));
        }
        out
    }

    /// Max-abs entry of `Z T Zᵀ - A`.
    pub fn residual(&self, a: &Matrix) -> f64 {
        self.z
            .matmul(&self.t)
            .matmul(&self.z.transpose())
            .sub(a)
            .max_abs()
    }
}

fn block_eigenvalues(t: &Matrix, s: usize, size: usize) -> Vec<Eigenvalue> {
    if size == 1 {
        return vec![Eigenvalue {
            re: t[(s, s)],
            im: 0.0,
        }];
    }
    let (a, b, c, d) = (t[(s, s)], t[(s, s + 1)], t[(s + 1, s)], t[(s + 1, s + 1)]);
    let p = 0.5 * (a - d);
    let disc = p * p + b * c;
    let mid = 0.5 * (a + d);
    if disc >= 0.0 {
        let r = disc.sqrt();
        vec![
            Eigenvalue {
                re: mid + r,
                im: 0.0,
            },
            Eigenvalue {
                re: mid - r,
                im: 0.0,
            },
        ]
    } else {
        let r = (-disc).sqrt();
        vec![
            Eigenvalue { re: mid, im: r },
            Eigenvalue { re: mid, im: -r },
        ]
    }
}

fn check_square(a: &Matrix) -> Result<usize> {
    if !a.is_square() {
        return Err(Error::InvalidInput(format!(
            "expected a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    if n == 0 || n > MAX_DIM {
        return Err(Error::InvalidInput(format!(
            "matrix dimension {n} outside 1..={MAX_DIM}"
        )));
    }
    Ok(n)
}

/// Orthogonal reduction to upper Hessenberg form, returning `(H, V)` with
/// `A = V H Vᵀ`.
fn hessenberg(a: &Matrix) -> (Matrix, Matrix) {
    let n = a.rows();
    let mut h = a.clone();
    let mut v = Matrix::identity(n);
    let mut ort = vec![0.0; n];
    if n < 3 {
        return (h, v);
    }
    let high = n - 1;
    for m in 1..high {
        let scale: f64 = (m..=high).map(|i| h[(i, m - 1)].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[(i, m - 1)] / scale;
            hh += ort[i] * ort[i];
        }
        let mut g = hh.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hh -= ort[m] * g;
        ort[m] -= g;
        for j in m..n {
            let mut f = 0.0;
            for i in (m..=high).rev() {
                f += ort[i] * h[(i, j)];
            }
            f /= hh;
            for i in m..=high {
                h[(i, j)] -= f * ort[i];
            }
        }
        for i in 0..=high {
            let mut f = 0.0;
            for j in (m..=high).rev() {
                f += ort[j] * h[(i, j)];
            }
            f /= hh;
            for j in m..=high {
                h[(i, j)] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[(m, m - 1)] = scale * g;
    }
    for m in (1..high).rev() {
        if h[(m, m - 1)] != 0.0 {
            for i in m + 1..=high {
                ort[i] = h[(i, m - 1)];
            }
            for j in m..=high {
                let mut g = 0.0;
                for i in m..=high {
                    g += ort[i] * v[(i, j)];
                }
                g = (g / ort[m]) / h[(m, m - 1)];
                for i in m..=high {
                    v[(i, j)] += g * ort[i];
                }
            }
        }
    }
    for i in 0..n {
        for j in 0..i.saturating_sub(1) {
            h[(i, j)] = 0.0;
        }
    }
    (h, v)
}

/// Real Schur form `A = Z T Zᵀ`.
///
/// Fails if the QR iteration needs more than `100·d` sweeps.
pub fn real_schur(a: &Matrix) -> Result<RealSchur> {
    let nn = check_square(a)?;
    let (mut h, mut v) = hessenberg(a);
    let eps = f64::EPSILON;
    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[(i, j)].abs();
        }
    }
    let max_sweeps = 100 * nn;
    let mut sweeps = 0usize;
    let mut exshift = 0.0;
    let mut iter = 0;
    let mut n = nn as isize - 1;
    let (mut p, mut q, mut r, mut s, mut z);
    let (mut w, mut x, mut y);

    while n >= 0 {
        let nu = n as usize;
        // Look for a single small subdiagonal element.
        let mut l = nu;
        while l > 0 {
            s = h[(l - 1, l - 1)].abs() + h[(l, l)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[(l, l - 1)].abs() < eps * s {
                h[(l, l - 1)] = 0.0;
                break;
            }
            l -= 1;
        }

        if l == nu {
            h[(nu, nu)] += exshift;
            n -= 1;
            iter = 0;
        } else if l + 1 == nu {
            w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            p = (h[(nu - 1, nu - 1)] - h[(nu, nu)]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[(nu, nu)] += exshift;
            h[(nu - 1, nu - 1)] += exshift;
            if q >= 0.0 {
                // Real pair: rotate to upper triangular.
                z = if p >= 0.0 { p + z } else { p - z };
                x = h[(nu, nu - 1)];
                s = x.abs() + z.abs();
                p = x / s;
                q = z / s;
                r = (p * p + q * q).sqrt();
                p /= r;
                q /= r;
                for j in nu - 1..nn {
                    z = h[(nu - 1, j)];
                    h[(nu - 1, j)] = q * z + p * h[(nu, j)];
                    h[(nu, j)] = q * h[(nu, j)] - p * z;
                }
                for i in 0..=nu {
                    z = h[(i, nu - 1)];
                    h[(i, nu - 1)] = q * z + p * h[(i, nu)];
                    h[(i, nu)] = q * h[(i, nu)] - p * z;
                }
                for i in 0..nn {
                    z = v[(i, nu - 1)];
                    v[(i, nu - 1)] = q * z + p * v[(i, nu)];
                    v[(i, nu)] = q * v[(i, nu)] - p * z;
                }
                h[(nu, nu - 1)] = 0.0;
            }
            n -= 2;
            iter = 0;
        } else {
            sweeps += 1;
            if sweeps > max_sweeps {
                let residual = (1..nn).map(|i| h[(i, i - 1)].abs()).fold(0.0, f64::max);
                return Err(Error::SchurNoConvergence { sweeps, residual });
            }
            x = h[(nu, nu)];
            y = 0.0;
            w = 0.0;
            if l < nu {
                y = h[(nu - 1, nu - 1)];
                w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            }
            // Wilkinson's exceptional shift.
            if iter == 10 {
                exshift += x;
                for i in 0..=nu {
                    h[(i, i)] -= x;
                }
                s = h[(nu, nu - 1)].abs() + h[(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            // MATLAB's exceptional shift.
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in 0..=nu {
                        h[(i, i)] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;

            // Look for two consecutive small subdiagonal elements.
            let mut m = nu - 2;
            loop {
                z = h[(m, m)];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[(m + 1, m)] + h[(m, m + 1)];
                q = h[(m + 1, m + 1)] - z - r - s;
                r = h[(m + 2, m + 1)];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[(m, m - 1)].abs() * (q.abs() + r.abs())
                    < eps
                        * (p.abs() * (h[(m - 1, m - 1)].abs() + z.abs() + h[(m + 1, m + 1)].abs()))
                {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                h[(i, i - 2)] = 0.0;
                if i > m + 2 {
                    h[(i, i - 3)] = 0.0;
                }
            }

            // Double QR step on rows l..=n and columns m..=n.
            let mut k = m;
            while k < nu {
                let notlast = k != nu - 1;
                if k != m {
                    p = h[(k, k - 1)];
                    q = h[(k + 1, k - 1)];
                    r = if notlast { h[(k + 2, k - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        k += 1;
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        h[(k, k - 1)] = -s * x;
                    } else if l != m {
                        h[(k, k - 1)] = -h[(k, k - 1)];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..nn {
                        p = h[(k, j)] + q * h[(k + 1, j)];
                        if notlast {
                            p += r * h[(k + 2, j)];
                            h[(k + 2, j)] -= p * z;
                        }
                        h[(k, j)] -= p * x;
                        h[(k + 1, j)] -= p * y;
                    }
                    for i in 0..=nu.min(k + 3) {
                        p = x * h[(i, k)] + y * h[(i, k + 1)];
                        if notlast {
                            p += z * h[(i, k + 2)];
                            h[(i, k + 2)] -= p * r;
                        }
                        h[(i, k)] -= p;
                        h[(i, k + 1)] -= p * q;
                    }
                    for i in 0..nn {
                        p = x * v[(i, k)] + y * v[(i, k + 1)];
                        if notlast {
                            p += z * v[(i, k + 2)];
                            v[(i, k + 2)] -= p * r;
                        }
                        v[(i, k)] -= p;
                        v[(i, k + 1)] -= p * q;
                    }
                }
                k += 1;
            }
        }
    }

    // Clean below the block diagonal and record the block structure.
    for i in 0..nn {
        for j in 0..i.saturating_sub(1) {
            h[(i, j)] = 0.0;
        }
    }
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < nn {
        if i + 1 < nn && h[(i + 1, i)] != 0.0 {
            blocks.push((i, 2));
            i += 2;
        } else {
            if i + 1 < nn {
                h[(i + 1, i)] = 0.0;
            }
            blocks.push((i, 1));
            i += 1;
        }
    }
    Ok(RealSchur { z: v, t: h, blocks })
}

/// Solves the `m×m` linear system `a x = b` by Gaussian elimination with
/// partial pivoting (`m ≤ 4` here).
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let m = b.len();
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col] == 0.0 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..m {
            let f = a[row][col] / a[col][col];
            for c in col..m {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; m];
    for row in (0..m).rev() {
        let mut s = b[row];
        for c in row + 1..m {
            s -= a[row][c] * x[c];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// Householder QR of a tall `rows × cols` matrix; returns the full
/// orthogonal factor `rows × rows`.
fn householder_q(mut a: Vec<Vec<f64>>, cols: usize) -> Vec<Vec<f64>> {
    let rows = a.len();
    let mut q: Vec<Vec<f64>> = (0..rows)
        .map(|i| (0..rows).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for k in 0..cols {
        let alpha: f64 = (k..rows).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
        if alpha == 0.0 {
            continue;
        }
        let sign = if a[k][k] >= 0.0 { 1.0 } else { -1.0 };
        let mut u: Vec<f64> = vec![0.0; rows];
        for i in k..rows {
            u[i] = a[i][k];
        }
        u[k] += sign * alpha;
        let un: f64 = u.iter().map(|x| x * x).sum();
        if un == 0.0 {
            continue;
        }
        // a ← (I - 2uuᵀ/uᵀu) a
        for j in 0..cols {
            let f: f64 = (k..rows).map(|i| u[i] * a[i][j]).sum::<f64>() * 2.0 / un;
            for i in k..rows {
                a[i][j] -= f * u[i];
            }
        }
        // q ← q (I - 2uuᵀ/uᵀu)
        for row in q.iter_mut() {
            let f: f64 = (k..rows).map(|i| row[i] * u[i]).sum::<f64>() * 2.0 / un;
            for i in k..rows {
                row[i] -= f * u[i];
            }
        }
    }
    q
}

/// Swaps the adjacent diagonal blocks of sizes `p` (at `j`) and `q` (at
/// `j + p`), updating `schur` in place.
fn swap_blocks(schur: &mut RealSchur, j: usize, p: usize, q: usize) -> Result<()> {
    let n = schur.t.rows();
    let t = &schur.t;
    // Solve T11 X - X T22 = T12 for X (p×q), column-major unknowns.
    let dim = p * q;
    let mut sys = vec![vec![0.0; dim]; dim];
    let mut rhs = vec![0.0; dim];
    for c in 0..q {
        for r in 0..p {
            let row = c * p + r;
            rhs[row] = t[(j + r, j + p + c)];
            for k in 0..p {
                sys[row][c * p + k] += t[(j + r, j + k)];
            }
            for k in 0..q {
                sys[row][k * p + r] -= t[(j + p + k, j + p + c)];
            }
        }
    }
    let xs = solve_small(sys, rhs).ok_or_else(|| {
        Error::InvalidInput("cannot reorder Schur blocks with identical eigenvalues".into())
    })?;
    // Column space of [-X; I] is invariant for the T22 eigenvalues.
    let m = p + q;
    let mut basis = vec![vec![0.0; q]; m];
    for c in 0..q {
        for r in 0..p {
            basis[r][c] = -xs[c * p + r];
        }
        basis[p + c][c] = 1.0;
    }
    let u = householder_q(basis, q);

    // T ← Uᵀ T U on the affected rows/columns, Z ← Z U.
    let t = &mut schur.t;
    for col in 0..n {
        let old: Vec<f64> = (0..m).map(|r| t[(j + r, col)]).collect();
        for r in 0..m {
            t[(j + r, col)] = (0..m).map(|k| u[k][r] * old[k]).sum();
        }
    }
    for row in 0..n {
        let old: Vec<f64> = (0..m).map(|c| t[(row, j + c)]).collect();
        for c in 0..m {
            t[(row, j + c)] = (0..m).map(|k| old[k] * u[k][c]).sum();
        }
    }
    let z = &mut schur.z;
    for row in 0..n {
        let old: Vec<f64> = (0..m).map(|c| z[(row, j + c)]).collect();
        for c in 0..m {
            z[(row, j + c)] = (0..m).map(|k| old[k] * u[k][c]).sum();
        }
    }
    // The block below the new leading q×q block is zero up to rounding.
    let scale = t.frobenius_norm().max(f64::MIN_POSITIVE);
    let mut leak = 0.0f64;
    for r in q..m {
        for c in 0..q {
            leak = leak.max(t[(j + r, j + c)].abs());
            t[(j + r, j + c)] = 0.0;
        }
    }
    if leak > 1e-8 * scale {
        return Err(Error::InvalidInput(format!(
            "ill-conditioned Schur block swap (leak {leak:e})"
        )));
    }
    // Complex pairs stay 2×2 blocks; 1×1 blocks are kept strictly triangular.
    for &(start, size) in &[(j, q), (j + q, p)] {
        if size == 1 && start + 1 < j + m {
            t[(start + 1, start)] = 0.0;
        }
    }
    Ok(())
}

/// Reorders `schur` so the blocks flagged by `select` come first, keeping
/// the relative order inside each group.
pub fn reorder_schur(schur: &mut RealSchur, select: &[bool]) -> Result<()> {
    assert_eq!(select.len(), schur.blocks.len());
    let mut sizes: Vec<usize> = schur.blocks.iter().map(|b| b.1).collect();
    let mut flags = select.to_vec();
    let mut placed = 0;
    for idx in 0..flags.len() {
        if !flags[idx] {
            continue;
        }
        // Bubble block idx up to position `placed`.
        let mut cur = idx;
        while cur > placed {
            let start: usize = sizes[..cur - 1].iter().sum();
            swap_blocks(schur, start, sizes[cur - 1], sizes[cur])?;
            sizes.swap(cur - 1, cur);
            flags.swap(cur - 1, cur);
            cur -= 1;
        }
        placed += 1;
    }
    let mut start = 0;
    schur.blocks = sizes
        .iter()
        .map(|&s| {
            let b = (start, s);
            start += s;
            b
        })
        .collect();
    Ok(())
}

/// Orthonormal basis of a `k`-dimensional subspace of `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    d: usize,
    basis: Vec<Vec<f64>>,
}

impl Subspace {
    /// Orthonormalizes `vectors` (modified Gram–Schmidt, twice).
    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let d = vectors
            .first()
            .map(|v| v.len())
            .ok_or_else(|| Error::InvalidInput("empty subspace".into()))?;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for v in vectors {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
            let mut w = v.clone();
            let n0 = dot(&w, &w).sqrt();
            for _ in 0..2 {
                for b in &basis {
                    let c = dot(&w, b);
                    for (wi, bi) in w.iter_mut().zip(b) {
                        *wi -= c * bi;
                    }
                }
            }
            let n = dot(&w, &w).sqrt();
            if n <= 1e-10 * n0.max(1.0) {
                return Err(Error::InvalidInput(
                    "linearly dependent subspace basis".into(),
                ));
            }
            basis.push(w.iter().map(|x| x / n).collect());
        }
        Ok(Subspace { d, basis })
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.d
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    /// Orthogonal projection of `x` onto the span.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for b in &self.basis {
            let c = dot(x, b);
            for (o, bi) in out.iter_mut().zip(b) {
                *o += c * bi;
            }
        }
        out
    }
}

/// `|x - Π_S x|`.
pub fn subspace_distance(x: &UnitVector, s: &Subspace) -> f64 {
    distance_raw(x.coords(), s)
}

pub(crate) fn distance_raw(x: &[f64], s: &Subspace) -> f64 {
    let p = s.project(x);
    // |x|² - |Πx|² loses accuracy near 0, so subtract explicitly.
    x.iter()
        .zip(&p)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
        .min(1.0)
}

/// Invariant subspace of all eigenvalues whose real part is within
/// `group_tol` of the largest real part.
pub fn dominant_invariant_subspace(a: &Matrix, group_tol: f64) -> Result<Subspace> {
    if !(group_tol > 0.0) {
        return Err(Error::InvalidInput("group_tol must be positive".into()));
    }
    let mut schur = real_schur(a)?;
    let reals: Vec<f64> = schur
        .blocks
        .iter()
        .map(|&(s, size)| {
            block_eigenvalues(&schur.t, s, size)
                .iter()
                .map(|e| e.re)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let top = reals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let select: Vec<bool> = reals.iter().map(|&r| r >= top - group_tol).collect();
    let k: usize = schur
        .blocks
        .iter()
        .zip(&select)
        .filter(|(_, &s)| s)
        .map(|(b, _)| b.1)
        .sum();
    reorder_schur(&mut schur, &select)?;
    let vectors: Vec<Vec<f64>> = (0..k).map(|c| schur.z.column(c)).collect();
    Subspace::from_vectors(&vectors)
}

/// Default grouping tolerance `1e-8·‖A‖_F`.
pub fn default_group_tol(a: &Matrix) -> f64 {
    (1e-8 * a.frobenius_norm()).max(f64::MIN_POSITIVE)
}
