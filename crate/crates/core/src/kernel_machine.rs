//! Regularized kernel regression and supervision complexity metrics.
//!
//! The regression objective over coefficient vectors `α` is
//!
//! ```text
//! J(α) = (1/n)·‖Kα − Y‖² + (λ/2)·αᵀKα
//! ```
//!
//! where `n` counts examples (not `n·d` coordinates). Setting the gradient
//! `K·[(2/n)(Kα − Y) + λα]` to zero gives `(K + (nλ/2)·I)·α = Y`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, factor_psd, solve_psd, PsdFactorization, SymMatrix};
use crate::ntk::{CrossKernel, NtkMatrix};

/// Largest jitter tried before a kernel counts as non-invertible.
pub const DEFAULT_MAX_JITTER: f64 = 1e-6;

/// A kernel matrix together with the number of examples it covers.
pub trait KernelInput {
    fn matrix(&self) -> &SymMatrix;
    fn num_examples(&self) -> usize;
}

impl KernelInput for SymMatrix {
    fn matrix(&self) -> &SymMatrix {
        self
    }
    fn num_examples(&self) -> usize {
        self.order()
    }
}

impl KernelInput for NtkMatrix {
    fn matrix(&self) -> &SymMatrix {
        &self.base
    }
    fn num_examples(&self) -> usize {
        self.batch_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelRidgeConfig {
    pub lambda: f64,
    pub max_jitter: f64,
}

impl KernelRidgeConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidSpec(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self {
            lambda,
            max_jitter: DEFAULT_MAX_JITTER,
        })
    }

    /// `λ = 1e-8·trace(K)/order`: a unitless "small λ" for interpolating solves.
    pub fn interpolating(k: &SymMatrix) -> Self {
        let lambda = (1e-8 * linalg::trace(k) / k.order() as f64).max(f64::MIN_POSITIVE);
        Self {
            lambda,
            max_jitter: DEFAULT_MAX_JITTER,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KernelSolution {
    pub alpha: Vec<f64>,
    pub rkhs_norm_sq: f64,
    /// `K·α` (without any offset), flattened example-major.
    pub train_predictions: Vec<f64>,
    /// Predictions of the anchor function at the training points when the
    /// problem was solved in residual form.
    pub offset: Option<Vec<f64>>,
    pub lambda: f64,
    pub jitter_used: f64,
    pub num_examples: usize,
}

impl KernelSolution {
    /// Value of the regression objective at this solution against `targets`.
    pub fn objective(&self, targets: &[f64]) -> f64 {
        objective(&self.train_predictions, &self.alpha, targets, self.lambda, self.num_examples)
    }

    /// Training predictions including the offset.
    pub fn fitted(&self) -> Vec<f64> {
        match &self.offset {
            Some(off) => self.train_predictions.iter().zip(off).map(|(a, b)| a + b).collect(),
            None => self.train_predictions.clone(),
        }
    }
}

/// `(1/n)‖Kα − Y‖² + (λ/2)·αᵀKα` given `Kα`.
pub fn objective(k_alpha: &[f64], alpha: &[f64], targets: &[f64], lambda: f64, n: usize) -> f64 {
    let fit: f64 = k_alpha.iter().zip(targets).map(|(p, y)| (p - y).powi(2)).sum();
    fit / n as f64 + 0.5 * lambda * linalg::dot(alpha, k_alpha)
}

pub fn ridge_solve<K: KernelInput + ?Sized>(k: &K, targets: &[f64], cfg: &KernelRidgeConfig) -> Result<KernelSolution> {
    let m = k.matrix();
    if targets.len() != m.order() {
        return Err(Error::dims("ridge targets", m.order(), targets.len()));
    }
    if !(cfg.lambda > 0.0) {
        return Err(Error::InvalidSpec(format!("lambda must be positive, got {}", cfg.lambda)));
    }
    let n = k.num_examples();
    let shift = 0.5 * n as f64 * cfg.lambda;
    let f = factor_psd(&m.add_diagonal(shift), cfg.max_jitter)?;
    let alpha = solve_psd(&f, targets)?;
    let train_predictions = m.matvec(&alpha)?;
    let rkhs_norm_sq = linalg::dot(&alpha, &train_predictions);
    Ok(KernelSolution {
        alpha,
        rkhs_norm_sq,
        train_predictions,
        offset: None,
        lambda: cfg.lambda,
        jitter_used: f.jitter_used(),
        num_examples: n,
    })
}

/// Solve on residual targets `Y − f₀(X)` and remember `f₀(X)` as the offset.
pub fn ridge_solve_residual<K: KernelInput + ?Sized>(
    k: &K,
    targets: &[f64],
    initial_predictions: &[f64],
    cfg: &KernelRidgeConfig,
) -> Result<KernelSolution> {
    if initial_predictions.len() != targets.len() {
        return Err(Error::dims("initial predictions", targets.len(), initial_predictions.len()));
    }
    let residual: Vec<f64> = targets.iter().zip(initial_predictions).map(|(y, f)| y - f).collect();
    let mut sol = ridge_solve(k, &residual, cfg)?;
    sol.offset = Some(initial_predictions.to_vec());
    Ok(sol)
}

/// Predictions `offset + K_cross·α` at new points. `new_offset` carries the
/// anchor predictions at the new points for residual-form solutions.
pub fn evaluate(sol: &KernelSolution, k_cross: &CrossKernel, new_offset: Option<&[f64]>) -> Result<Vec<f64>> {
    if k_cross.cols != sol.alpha.len() {
        return Err(Error::dims("cross kernel columns", sol.alpha.len(), k_cross.cols));
    }
    let mut out = k_cross.matvec(&sol.alpha)?;
    if let Some(off) = new_offset {
        if off.len() != out.len() {
            return Err(Error::dims("prediction offset", out.len(), off.len()));
        }
        out.iter_mut().zip(off).for_each(|(p, o)| *p += o);
    }
    Ok(out)
}

/// `YᵀK⁻¹Y`; `+∞` when `K` cannot be factored within `max_jitter`.
pub fn supervision_complexity_with(k: &SymMatrix, targets: &[f64], max_jitter: f64) -> Result<f64> {
    if targets.len() != k.order() {
        return Err(Error::dims("complexity targets", k.order(), targets.len()));
    }
    match factor_psd(k, max_jitter) {
        Ok(f) => f.inverse_quad_form(targets),
        Err(Error::NotPositiveDefinite { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

pub fn supervision_complexity(k: &SymMatrix, targets: &[f64]) -> Result<f64> {
    supervision_complexity_with(k, targets, DEFAULT_MAX_JITTER)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    /// `YᵀK⁻¹Y` of the raw targets.
    pub raw: f64,
    /// `(Y − f₀)ᵀK⁻¹(Y − f₀)`.
    pub residual: f64,
    /// `(1/m)·√(residual · trace K)`.
    pub adjusted: f64,
    /// `(1/m)·√(raw · trace K)`.
    pub adjusted_star: f64,
    /// `adjusted / normalizer`.
    pub normalized: f64,
    /// `√m·‖Y − f₀‖₂`.
    pub normalizer: f64,
    pub trace_k: f64,
    pub jitter_used: f64,
    pub m: usize,
}

/// Fill the adjusted/normalized complexity family from one factorization of `K`.
pub fn adjusted_complexity(
    k: &SymMatrix,
    targets: &[f64],
    initial_predictions: &[f64],
    m: usize,
) -> Result<ComplexityReport> {
    adjusted_complexity_with(k, targets, initial_predictions, m, DEFAULT_MAX_JITTER)
}

pub fn adjusted_complexity_with(
    k: &SymMatrix,
    targets: &[f64],
    initial_predictions: &[f64],
    m: usize,
    max_jitter: f64,
) -> Result<ComplexityReport> {
    if targets.len() != k.order() {
        return Err(Error::dims("complexity targets", k.order(), targets.len()));
    }
    if initial_predictions.len() != targets.len() {
        return Err(Error::dims("initial predictions", targets.len(), initial_predictions.len()));
    }
    if m == 0 {
        return Err(Error::InvalidSpec("evaluation set size m must be positive".into()));
    }
    let residual_vec: Vec<f64> = targets.iter().zip(initial_predictions).map(|(y, f)| y - f).collect();
    let trace_k = linalg::trace(k);
    let (raw, residual, jitter_used) = match factor_psd(k, max_jitter) {
        Ok(f) => (f.inverse_quad_form(targets)?, f.inverse_quad_form(&residual_vec)?, f.jitter_used()),
        Err(Error::NotPositiveDefinite { .. }) => (f64::INFINITY, f64::INFINITY, max_jitter),
        Err(e) => return Err(e),
    };
    let mf = m as f64;
    let adjusted = (residual * trace_k).sqrt() / mf;
    let adjusted_star = (raw * trace_k).sqrt() / mf;
    let normalizer = mf.sqrt() * linalg::norm2(&residual_vec);
    let normalized = if normalizer > 0.0 { adjusted / normalizer } else { 0.0 };
    Ok(ComplexityReport {
        raw,
        residual,
        adjusted,
        adjusted_star,
        normalized,
        normalizer,
        trace_k,
        jitter_used,
        m,
    })
}

/// Factor once and report the quadratic form for several target vectors.
pub fn complexity_many(f: &PsdFactorization, targets: &[&[f64]]) -> Result<Vec<f64>> {
    targets.iter().map(|t| f.inverse_quad_form(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_pd(n: usize, seed: u64) -> SymMatrix {
        let mut r = rng::seeded(seed);
        let a = rng::normal_vec(&mut r, n * n);
        SymMatrix::gram(n, n, &a).scaled(1.0 / n as f64).add_diagonal(0.5)
    }

    fn gauss_jordan_quad(k: &SymMatrix, y: &[f64]) -> f64 {
        let n = k.order();
        let mut a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row = k.row(i).to_vec();
                row.push(y[i]);
                row
            })
            .collect();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            let piv = a[c][c];
            a[c].iter_mut().for_each(|x| *x /= piv);
            for r in 0..n {
                if r != c {
                    let f = a[r][c];
                    let src = a[c].clone();
                    a[r].iter_mut().zip(&src).for_each(|(x, s)| *x -= f * s);
                }
            }
        }
        (0..n).map(|i| y[i] * a[i][n]).sum()
    }

    #[test]
    fn interpolates_for_tiny_lambda() {
        let k = random_pd(10, 1);
        let mut r = rng::seeded(2);
        let y = rng::normal_vec(&mut r, 10);
        let sol = ridge_solve(&k, &y, &KernelRidgeConfig::new(1e-10).unwrap()).unwrap();
        for (p, t) in sol.train_predictions.iter().zip(&y) {
            assert!((p - t).abs() < 1e-4);
        }
        assert!((sol.rkhs_norm_sq - linalg::dot(&sol.alpha, &k.matvec(&sol.alpha).unwrap())).abs() <= 1e-8 * sol.rkhs_norm_sq);
    }

    #[test]
    fn identity_kernel_closed_form() {
        let n = 4;
        let lambda = 0.3;
        let y = [1.0, -2.0, 0.5, 3.0];
        let sol = ridge_solve(&SymMatrix::identity(n), &y, &KernelRidgeConfig::new(lambda).unwrap()).unwrap();
        let c = n as f64 * lambda / 2.0;
        for (a, t) in sol.alpha.iter().zip(&y) {
            assert!((a - t / (1.0 + c)).abs() < 1e-15);
        }
    }

    #[test]
    fn objective_matches_gradient_descent_oracle() {
        let k = random_pd(8, 5);
        let mut r = rng::seeded(6);
        let y = rng::normal_vec(&mut r, 8);
        let lambda = 0.05;
        let sol = ridge_solve(&k, &y, &KernelRidgeConfig::new(lambda).unwrap()).unwrap();
        // plain gradient descent on J(α), 1e5 steps of size 1e-3
        let n = 8.0;
        let mut alpha = vec![0.0; 8];
        for _ in 0..100_000 {
            let ka = k.matvec(&alpha).unwrap();
            let inner: Vec<f64> = ka.iter().zip(&y).zip(&alpha).map(|((p, t), a)| 2.0 / n * (p - t) + lambda * a).collect();
            let g = k.matvec(&inner).unwrap();
            alpha.iter_mut().zip(&g).for_each(|(a, gi)| *a -= 1e-3 * gi);
        }
        let ka = k.matvec(&alpha).unwrap();
        let oracle = objective(&ka, &alpha, &y, lambda, 8);
        let got = sol.objective(&y);
        assert!(got <= oracle * (1.0 + 1e-5));
        assert!((got - oracle).abs() <= 1e-5 * oracle, "{got} vs {oracle}");
    }

    #[test]
    fn stationarity_residual() {
        let k = random_pd(12, 7);
        let mut r = rng::seeded(8);
        let y = rng::normal_vec(&mut r, 12);
        let lambda = 1e-3;
        let sol = ridge_solve(&k, &y, &KernelRidgeConfig::new(lambda).unwrap()).unwrap();
        let inner: Vec<f64> = sol
            .train_predictions
            .iter()
            .zip(&y)
            .zip(&sol.alpha)
            .map(|((p, t), a)| 2.0 / 12.0 * (p - t) + lambda * a)
            .collect();
        let g = k.matvec(&inner).unwrap();
        assert!(linalg::norm2(&g) <= 1e-8 * linalg::norm2(&y));
    }

    #[test]
    fn evaluate_reproduces_training_predictions() {
        let k = random_pd(6, 9);
        let y = [1.0, 0.0, -1.0, 2.0, 0.5, 0.25];
        let sol = ridge_solve(&k, &y, &KernelRidgeConfig::new(0.01).unwrap()).unwrap();
        let cross = CrossKernel::from(&k);
        let p = evaluate(&sol, &cross, None).unwrap();
        for (a, b) in p.iter().zip(&sol.train_predictions) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = KernelSolution {
            alpha: vec![0.0; 6],
            ..sol.clone()
        };
        let off = [3.0; 6];
        assert_eq!(evaluate(&zero, &cross, Some(&off)).unwrap(), off.to_vec());
        // direct-sum oracle on a rectangular cross kernel
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let ck = CrossKernel { rows: 2, cols: 6, data };
        let p = evaluate(&sol, &ck, None).unwrap();
        for r in 0..2 {
            let mut s = 0.0;
            for i in 0..6 {
                s += sol.alpha[i] * ck.data[r * 6 + i];
            }
            assert!((p[r] - s).abs() < 1e-10);
        }
    }

    #[test]
    fn complexity_trivial_cases() {
        assert_eq!(supervision_complexity(&SymMatrix::identity(7), &[1.0; 7]).unwrap(), 7.0);
        let half = supervision_complexity(&SymMatrix::diagonal(&[2.0, 2.0]), &[1.0, 1.0]).unwrap();
        assert!((half - 1.0).abs() < 1e-15);
        let k = random_pd(6, 10);
        let mut r = rng::seeded(11);
        let y = rng::normal_vec(&mut r, 6);
        let q = supervision_complexity(&k, &y).unwrap();
        let oracle = gauss_jordan_quad(&k, &y);
        assert!((q - oracle).abs() <= 1e-8 * oracle);
    }

    #[test]
    fn non_invertible_is_infinite() {
        let k = SymMatrix::diagonal(&[1.0, -1.0]);
        assert_eq!(supervision_complexity(&k, &[1.0, 1.0]).unwrap(), f64::INFINITY);
        let zero = SymMatrix::diagonal(&[0.0, 0.0]);
        assert_eq!(supervision_complexity_with(&zero, &[1.0, 1.0], 0.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn adjusted_cases() {
        let k = random_pd(5, 12);
        let y = [1.0, -1.0, 0.5, 0.0, 2.0];
        let same = adjusted_complexity(&k, &y, &y, 5).unwrap();
        assert_eq!(same.adjusted, 0.0);
        assert_eq!(same.normalized, 0.0);
        let zero = adjusted_complexity(&k, &y, &[0.0; 5], 5).unwrap();
        assert_eq!(zero.adjusted, zero.adjusted_star);
        let recomputed = (supervision_complexity(&k, &y).unwrap() * linalg::trace(&k)).sqrt() / 5.0;
        assert!((zero.adjusted - recomputed).abs() < 1e-12 * recomputed);
        assert!((zero.normalizer - 5f64.sqrt() * linalg::norm2(&y)).abs() < 1e-12);
    }

    #[test]
    fn uninformative_features_inequality() {
        let k = SymMatrix::diagonal(&[1.0, 4.0]);
        let r = adjusted_complexity(&k, &[1.0, 1.0], &[0.0, 0.0], 2).unwrap();
        assert!((r.adjusted - 1.25).abs() < 1e-15);
        assert!(r.adjusted >= 1.0);
    }
}
