//! Dense symmetric linear algebra: storage, jittered Cholesky, triangular
//! solves and symmetric eigenvalues.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng;

/// First jitter tried when a plain Cholesky factorization fails.
pub const FIRST_JITTER: f64 = 1e-12;

/// Square symmetric matrix stored densely in row-major order.
///
/// Symmetry is exact: constructors either mirror the upper triangle or
/// average the two triangles and write the same value to both.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    order: usize,
    entries: Vec<f64>,
}

impl SymMatrix {
    /// Build from row-major entries, averaging `a[i][j]` and `a[j][i]`.
    pub fn from_row_major(order: usize, mut entries: Vec<f64>) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidSpec("matrix order must be at least 1".into()));
        }
        if entries.len() != order * order {
            return Err(Error::dims("SymMatrix entries", order * order, entries.len()));
        }
        for i in 0..order {
            for j in (i + 1)..order {
                let avg = 0.5 * (entries[i * order + j] + entries[j * order + i]);
                entries[i * order + j] = avg;
                entries[j * order + i] = avg;
            }
        }
        Ok(Self { order, entries })
    }

    /// Build from a function evaluated on the upper triangle (`j >= i`) only.
    pub fn from_upper_fn(order: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(order >= 1, "matrix order must be at least 1");
        let mut entries = vec![0.0; order * order];
        for i in 0..order {
            for j in i..order {
                let v = f(i, j);
                entries[i * order + j] = v;
                entries[j * order + i] = v;
            }
        }
        Self { order, entries }
    }

    /// Wrap entries that the caller guarantees are exactly symmetric.
    pub(crate) fn from_symmetric_unchecked(order: usize, entries: Vec<f64>) -> Self {
        debug_assert_eq!(entries.len(), order * order);
        debug_assert!((0..order)
            .all(|i| (0..i).all(|j| entries[i * order + j] == entries[j * order + i])));
        Self { order, entries }
    }

    pub fn identity(order: usize) -> Self {
        Self::diagonal(&vec![1.0; order])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_upper_fn(n, |i, j| if i == j { diag[i] } else { 0.0 })
    }

    /// `AᵀA` for a row-major `rows × cols` matrix `a`; order is `cols`.
    pub fn gram(rows: usize, cols: usize, a: &[f64]) -> Self {
        assert_eq!(a.len(), rows * cols);
        Self::from_upper_fn(cols, |i, j| (0..rows).map(|r| a[r * cols + i] * a[r * cols + j]).sum())
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.order + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.order..(i + 1) * self.order]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.order).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.order {
            return Err(Error::dims("SymMatrix::matvec", self.order, v.len()));
        }
        Ok((0..self.order).map(|i| dot(self.row(i), v)).collect())
    }

    /// `self + c·I`.
    pub fn add_diagonal(&self, c: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.order {
            out.entries[i * self.order + i] += c;
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            order: self.order,
            entries: self.entries.iter().map(|x| x * c).collect(),
        }
    }

    pub fn add(&self, other: &SymMatrix) -> Result<Self> {
        if other.order != self.order {
            return Err(Error::dims("SymMatrix::add", self.order, other.order));
        }
        Ok(Self {
            order: self.order,
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Quadratic form `vᵀ·M·v`.
    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        Ok(dot(&self.matvec(v)?, v))
    }
}

/// Lower-triangular Cholesky factor of `source + jitter_used·I`.
#[derive(Debug, Clone)]
pub struct PsdFactorization {
    source: SymMatrix,
    factor: Vec<f64>,
    jitter_used: f64,
}

impl PsdFactorization {
    pub fn source(&self) -> &SymMatrix {
        &self.source
    }

    pub fn order(&self) -> usize {
        self.source.order
    }

    /// Row-major `order × order` lower-triangular factor (upper part zero).
    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// Solve `L·y = b` in place.
    fn forward_substitute(&self, y: &mut [f64]) {
        let n = self.order();
        for i in 0..n {
            let row = &self.factor[i * n..i * n + i];
            let s = y[i] - dot(row, &y[..i]);
            y[i] = s / self.factor[i * n + i];
        }
    }

    /// Solve `Lᵀ·x = y` in place.
    fn backward_substitute(&self, x: &mut [f64]) {
        let n = self.order();
        for i in (0..n).rev() {
            x[i] /= self.factor[i * n + i];
            let xi = x[i];
            for k in 0..i {
                x[k] -= self.factor[i * n + k] * xi;
            }
        }
    }

    /// `bᵀ(source + jitter·I)⁻¹b` computed as `‖L⁻¹b‖²`, which is never negative.
    pub fn inverse_quad_form(&self, b: &[f64]) -> Result<f64> {
        if b.len() != self.order() {
            return Err(Error::dims("inverse_quad_form", self.order(), b.len()));
        }
        let mut y = b.to_vec();
        self.forward_substitute(&mut y);
        Ok(dot(&y, &y))
    }
}

/// Cholesky-factor a symmetric matrix, escalating diagonal jitter by decades
/// from [`FIRST_JITTER`] up to `max_jitter` when the plain factorization fails.
pub fn factor_psd(m: &SymMatrix, max_jitter: f64) -> Result<PsdFactorization> {
    assert!(max_jitter >= 0.0, "max_jitter must be non-negative");
    if let Some(factor) = cholesky(m, 0.0) {
        return Ok(PsdFactorization {
            source: m.clone(),
            factor,
            jitter_used: 0.0,
        });
    }
    for jitter in jitter_ladder(max_jitter) {
        if let Some(factor) = cholesky(m, jitter) {
            log::debug!("cholesky succeeded with jitter {jitter:e} (order {})", m.order);
            return Ok(PsdFactorization {
                source: m.clone(),
                factor,
                jitter_used: jitter,
            });
        }
    }
    Err(Error::NotPositiveDefinite { max_jitter })
}

fn jitter_ladder(max_jitter: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut j = FIRST_JITTER;
    while j <= max_jitter * (1.0 + 1e-12) {
        out.push(j);
        j *= 10.0;
    }
    if max_jitter > 0.0 && out.last().is_none_or(|&last| last < max_jitter * (1.0 - 1e-12)) {
        out.push(max_jitter);
    }
    out
}

/// Plain Cholesky of `m + jitter·I`; `None` when a pivot is not safely positive.
fn cholesky(m: &SymMatrix, jitter: f64) -> Option<Vec<f64>> {
    let n = m.order;
    let max_diag = (0..n).fold(0.0f64, |acc, i| acc.max(m.get(i, i) + jitter));
    let tol = (n as f64) * f64::EPSILON * max_diag;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let (head, tail) = l.split_at_mut(j * n);
        let row_j = &mut tail[..n];
        for k in 0..j {
            let row_k = &head[k * n..k * n + k];
            let s = m.get(j, k) - dot(&row_j[..k], row_k);
            row_j[k] = s / head[k * n + k];
        }
        let pivot = m.get(j, j) + jitter - dot(&row_j[..j], &row_j[..j]);
        if !pivot.is_finite() || pivot <= tol {
            return None;
        }
        row_j[j] = pivot.sqrt();
    }
    Some(l)
}

/// Solve `(source + jitter·I)·x = rhs` using a factorization.
pub fn solve_psd(f: &PsdFactorization, rhs: &[f64]) -> Result<Vec<f64>> {
    if rhs.len() != f.order() {
        return Err(Error::dims("solve_psd rhs", f.order(), rhs.len()));
    }
    let mut x = rhs.to_vec();
    f.forward_substitute(&mut x);
    f.backward_substitute(&mut x);
    Ok(x)
}

pub fn trace(m: &SymMatrix) -> f64 {
    (0..m.order).map(|i| m.get(i, i)).sum()
}

/// Eigenvalues in ascending order.
pub fn symmetric_eigenvalues(m: &SymMatrix) -> Vec<f64> {
    let dm = DMatrix::from_row_slice(m.order, m.order, &m.entries);
    let mut ev: Vec<f64> = SymmetricEigen::new(dm).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Eigenvalues in ascending order with matching unit eigenvectors.
pub fn symmetric_eigen(m: &SymMatrix) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dm = DMatrix::from_row_slice(m.order, m.order, &m.entries);
    let e = SymmetricEigen::new(dm);
    let mut idx: Vec<usize> = (0..m.order).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let values = idx.iter().map(|&i| e.eigenvalues[i]).collect();
    let vectors = idx.iter().map(|&i| e.eigenvectors.column(i).iter().copied().collect()).collect();
    (values, vectors)
}

/// `λ_max / λ_min`; `+∞` when `λ_min ≤ 1e-14·λ_max`.
pub fn condition_number(m: &SymMatrix) -> f64 {
    let ev = symmetric_eigenvalues(m);
    let lo = ev[0];
    let hi = ev[ev.len() - 1];
    if hi <= 0.0 || lo <= 1e-14 * hi {
        return f64::INFINITY;
    }
    hi / lo
}

/// Largest eigenvalue of a PSD operator by power iteration with a seeded start.
pub fn power_iteration_max(
    n: usize,
    iters: usize,
    seed: u64,
    mut apply: impl FnMut(&[f64]) -> Vec<f64>,
) -> f64 {
    let mut rng = rng::seeded(seed);
    let mut v = rng::normal_vec(&mut rng, n);
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..iters.max(1) {
        let w = apply(&v);
        lambda = dot(&v, &w);
        let norm = norm2(&w);
        if norm == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / norm).collect();
    }
    let w = apply(&v);
    lambda.max(dot(&v, &w))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_gram(n: usize, seed: u64, ridge: f64) -> SymMatrix {
        let mut r = rng::seeded(seed);
        let a = rng::normal_vec(&mut r, n * n);
        SymMatrix::gram(n, n, &a).add_diagonal(ridge)
    }

    /// Independent Gauss-Jordan inverse used as an oracle.
    fn gauss_jordan_inverse(m: &SymMatrix) -> Vec<f64> {
        let n = m.order();
        let mut a = m.entries().to_vec();
        let mut inv = SymMatrix::identity(n).entries().to_vec();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
                .unwrap();
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
                inv.swap(col * n + k, piv * n + k);
            }
            let p = a[col * n + col];
            for k in 0..n {
                a[col * n + k] /= p;
                inv[col * n + k] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = a[r * n + col];
                    for k in 0..n {
                        a[r * n + k] -= f * a[col * n + k];
                        inv[r * n + k] -= f * inv[col * n + k];
                    }
                }
            }
        }
        inv
    }

    fn reconstruct(f: &PsdFactorization) -> Vec<f64> {
        let n = f.order();
        let l = f.factor();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..n).map(|k| l[i * n + k] * l[j * n + k]).sum();
            }
        }
        out
    }

    #[test]
    fn symmetrizes_on_construction() {
        let m = SymMatrix::from_row_major(2, vec![1.0, 2.0, 4.0, 3.0]).unwrap();
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 0), 3.0);
        assert_eq!(trace(&m), 4.0);
        assert!(SymMatrix::from_row_major(0, vec![]).is_err());
        assert!(SymMatrix::from_row_major(2, vec![1.0]).is_err());
    }

    #[test]
    fn factor_identity() {
        let f = factor_psd(&SymMatrix::identity(3), 0.0).unwrap();
        assert_eq!(f.factor(), SymMatrix::identity(3).entries());
        assert_eq!(f.jitter_used(), 0.0);
    }

    #[test]
    fn factor_diagonal() {
        let f = factor_psd(&SymMatrix::diagonal(&[4.0, 9.0]), 0.0).unwrap();
        assert_eq!(f.factor(), &[2.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn factor_random_gram_reconstructs() {
        let m = random_gram(4, 11, 0.0);
        let f = factor_psd(&m, 0.0).unwrap();
        let rec = reconstruct(&f);
        let err = rec.iter().zip(m.entries()).fold(0.0f64, |e, (a, b)| e.max((a - b).abs()));
        assert!(err < 1e-10, "reconstruction error {err}");
    }

    #[test]
    fn singular_matrix_needs_jitter() {
        // rank one
        let m = SymMatrix::from_upper_fn(3, |_, _| 1.0);
        assert!(matches!(
            factor_psd(&m, 0.0),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let f = factor_psd(&m, 1e-3).unwrap();
        assert!(f.jitter_used() >= FIRST_JITTER && f.jitter_used() <= 1e-3);
        let rec = reconstruct(&f);
        let shifted = m.add_diagonal(f.jitter_used());
        let err = rec.iter().zip(shifted.entries()).fold(0.0f64, |e, (a, b)| e.max((a - b).abs()));
        assert!(err <= 1e-8 * m.max_abs());
    }

    #[test]
    fn indefinite_matrix_fails() {
        let m = SymMatrix::diagonal(&[1.0, -1.0]);
        assert!(factor_psd(&m, 1e-2).is_err());
    }

    #[test]
    fn jitter_ladder_is_decades() {
        let l = jitter_ladder(1e-9);
        assert_eq!(l.len(), 4);
        assert_eq!(l[0], 1e-12);
        assert!(jitter_ladder(0.0).is_empty());
        assert_eq!(jitter_ladder(5e-12), vec![1e-12, 5e-12]);
    }

    #[test]
    fn solve_trivial_cases() {
        let f = factor_psd(&SymMatrix::identity(3), 0.0).unwrap();
        assert_eq!(solve_psd(&f, &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let f = factor_psd(&SymMatrix::diagonal(&[2.0, 2.0]), 0.0).unwrap();
        let x = solve_psd(&f, &[2.0, 4.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
        assert!(matches!(
            solve_psd(&f, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn solve_matches_gauss_jordan() {
        let m = random_gram(5, 3, 0.5);
        let mut r = rng::seeded(4);
        let b = rng::normal_vec(&mut r, 5);
        let x = solve_psd(&factor_psd(&m, 0.0).unwrap(), &b).unwrap();
        let inv = gauss_jordan_inverse(&m);
        for i in 0..5 {
            let oracle: f64 = (0..5).map(|k| inv[i * 5 + k] * b[k]).sum();
            assert!((x[i] - oracle).abs() <= 1e-8 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn trace_matches_eigen_sum() {
        assert_eq!(trace(&SymMatrix::identity(5)), 5.0);
        assert_eq!(trace(&SymMatrix::diagonal(&[1.0, 2.0, 3.0])), 6.0);
        let m = random_gram(4, 8, 0.0);
        let s: f64 = symmetric_eigenvalues(&m).iter().sum();
        assert!((trace(&m) - s).abs() < 1e-9 * trace(&m).max(1.0));
    }

    #[test]
    fn condition_numbers() {
        assert!((condition_number(&SymMatrix::identity(8)) - 1.0).abs() < 1e-12);
        assert!((condition_number(&SymMatrix::diagonal(&[10.0, 1.0])) - 10.0).abs() < 1e-12);
        assert_eq!(condition_number(&SymMatrix::diagonal(&[1.0, 0.0])), f64::INFINITY);
    }

    #[test]
    fn condition_matches_power_iteration() {
        let m = random_gram(6, 21, 0.1);
        let hi = power_iteration_max(6, 5000, 1, |v| m.matvec(v).unwrap());
        // inverse iteration via the factorization
        let f = factor_psd(&m, 0.0).unwrap();
        let inv_hi = power_iteration_max(6, 5000, 2, |v| solve_psd(&f, v).unwrap());
        let oracle = hi * inv_hi;
        let cond = condition_number(&m);
        assert!((cond - oracle).abs() / oracle < 0.01, "{cond} vs {oracle}");
    }

    #[test]
    fn inverse_quad_form_matches_solve() {
        let m = random_gram(7, 5, 0.2);
        let f = factor_psd(&m, 0.0).unwrap();
        let b: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
        let x = solve_psd(&f, &b).unwrap();
        let q = f.inverse_quad_form(&b).unwrap();
        assert!((q - dot(&x, &b)).abs() < 1e-10 * q);
    }
}
