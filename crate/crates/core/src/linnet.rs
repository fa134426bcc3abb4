//! Linearized networks `f_lin(x) = f_{θ₀}(x) + J_{θ₀}(x)·ω` and their
//! gradient-flow dynamics under the squared loss `(1/2n)·Σ‖f(xᵢ) − yᵢ‖²`.
//!
//! In function space the flow reads `ḟ(x′) = −(η/n)·K₀(x′, X)·(f(X) − Y)`.
//! Explicit Euler with step `h` multiplies the training residual by
//! `I − (hη/n)·K₀` per step, which is stable when `hη·λ_max/n < 2`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel_machine::{evaluate, ridge_solve_residual, KernelRidgeConfig};
use crate::linalg::{self, power_iteration_max, symmetric_eigen, SymMatrix};
use crate::model::{Checkpoint, ParamVector, TangentModel};
use crate::ntk::{batch_kernel, cross_kernel, jacobians, CrossKernel};

const POWER_ITERATIONS: usize = 50;

#[derive(Debug, Clone)]
pub struct LinearizedModel {
    pub anchor: Checkpoint,
    delta: ParamVector,
}

pub fn linearize(c: &Checkpoint) -> LinearizedModel {
    LinearizedModel {
        delta: ParamVector::zeros(c.num_params()),
        anchor: c.clone(),
    }
}

impl LinearizedModel {
    pub fn delta(&self) -> &ParamVector {
        &self.delta
    }

    pub fn set_delta(&mut self, delta: ParamVector) -> Result<()> {
        if delta.len() != self.anchor.num_params() {
            return Err(Error::dims("linearized delta", self.anchor.num_params(), delta.len()));
        }
        self.delta = delta;
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut f = self.anchor.forward(x)?;
        let lin = self.anchor.jvp(x, self.delta.as_slice())?;
        f.iter_mut().zip(lin).for_each(|(a, b)| *a += b);
        Ok(f)
    }

    /// Predictions for a batch, flattened example-major.
    pub fn predict_batch(&self, xs: &[&[f64]]) -> Result<Vec<f64>> {
        let per = crate::par::map_slice(xs, |x| self.predict(x));
        let mut out = Vec::with_capacity(xs.len() * self.anchor.output_dim());
        for p in per {
            out.extend(p?);
        }
        Ok(out)
    }
}

impl TangentModel for LinearizedModel {
    fn input_dim(&self) -> usize {
        self.anchor.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.anchor.output_dim()
    }
    fn num_params(&self) -> usize {
        self.anchor.num_params()
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.predict(x)
    }
    // The Jacobian of a linear model is constant: the anchor's.
    fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.anchor.jacobian(x)
    }
    fn vjp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.anchor.vjp(x, v)
    }
    fn jvp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.anchor.jvp(x, u)
    }
    fn step_index(&self) -> u64 {
        self.anchor.step_index
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub eta: f64,
    pub num_steps: usize,
    /// Euler step; `None` picks `n / (2·η·λ_max)`.
    pub step_size: Option<f64>,
    /// Record a snapshot every this many steps (the start and end are always kept).
    pub snapshot_every: usize,
}

impl FlowConfig {
    pub fn new(eta: f64, num_steps: usize) -> Self {
        Self {
            eta,
            num_steps,
            step_size: None,
            snapshot_every: num_steps.max(1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub step_size: f64,
    pub lambda_max: f64,
    pub steps: Vec<usize>,
    pub train: Vec<Vec<f64>>,
    pub test: Vec<Vec<f64>>,
}

impl FlowTrajectory {
    pub fn final_train(&self) -> &[f64] {
        self.train.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn final_test(&self) -> &[f64] {
        self.test.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Everything the function-space dynamics need, computed once at the anchor.
struct FlowProblem {
    k: SymMatrix,
    kx: Option<CrossKernel>,
    f_train: Vec<f64>,
    f_test: Vec<f64>,
    targets: Vec<f64>,
    /// `h·η/n`, the coefficient multiplying `K·(f − Y)` in one Euler step.
    coeff: f64,
    step_size: f64,
    lambda_max: f64,
}

fn prepare(
    lm: &LinearizedModel,
    train_xs: &[&[f64]],
    targets: &[f64],
    test_xs: &[&[f64]],
    eta: f64,
    step_size: Option<f64>,
) -> Result<FlowProblem> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidSpec(format!("learning rate eta must be positive, got {eta}")));
    }
    let n = train_xs.len();
    let d = lm.output_dim();
    if targets.len() != n * d {
        return Err(Error::dims("flow targets", n * d, targets.len()));
    }
    let k = batch_kernel(lm, train_xs)?.base;
    let kx = if test_xs.is_empty() {
        None
    } else {
        Some(cross_kernel(lm, test_xs, train_xs)?)
    };
    let lambda_max = power_iteration_max(k.order(), POWER_ITERATIONS, 0, |v| {
        k.matvec(v).expect("square operator")
    });
    let nf = n as f64;
    let h = match step_size {
        Some(h) if !(h > 0.0 && h.is_finite()) => {
            return Err(Error::InvalidSpec(format!("Euler step must be positive, got {h}")))
        }
        Some(h) => h,
        None if lambda_max > 0.0 => nf / (2.0 * eta * lambda_max),
        None => 1.0,
    };
    let ratio = h * eta * lambda_max / nf;
    if ratio >= 2.0 {
        return Err(Error::UnstableStep { ratio });
    }
    Ok(FlowProblem {
        f_train: lm.predict_batch(train_xs)?,
        f_test: lm.predict_batch(test_xs)?,
        targets: targets.to_vec(),
        k,
        kx,
        coeff: h * eta / nf,
        step_size: h,
        lambda_max,
    })
}

/// Explicit Euler integration of the function-space flow on the training
/// points, carrying held-out predictions along through the cross kernel.
pub fn gradient_flow(
    lm: &LinearizedModel,
    train_xs: &[&[f64]],
    targets: &[f64],
    test_xs: &[&[f64]],
    cfg: &FlowConfig,
) -> Result<FlowTrajectory> {
    let p = prepare(lm, train_xs, targets, test_xs, cfg.eta, cfg.step_size)?;
    let every = cfg.snapshot_every.max(1);
    let mut f = p.f_train.clone();
    let mut g = p.f_test.clone();
    let mut traj = FlowTrajectory {
        step_size: p.step_size,
        lambda_max: p.lambda_max,
        steps: vec![0],
        train: vec![f.clone()],
        test: vec![g.clone()],
    };
    for step in 1..=cfg.num_steps {
        let resid: Vec<f64> = f.iter().zip(&p.targets).map(|(a, y)| a - y).collect();
        let kr = p.k.matvec(&resid)?;
        f.iter_mut().zip(&kr).for_each(|(a, b)| *a -= p.coeff * b);
        if let Some(kx) = &p.kx {
            let kxr = kx.matvec(&resid)?;
            g.iter_mut().zip(&kxr).for_each(|(a, b)| *a -= p.coeff * b);
        }
        if step % every == 0 || step == cfg.num_steps {
            traj.steps.push(step);
            traj.train.push(f.clone());
            traj.test.push(g.clone());
        }
    }
    Ok(traj)
}

/// The Euler iterate after `num_steps` steps, evaluated in the eigenbasis of
/// the anchor kernel instead of by repeated multiplication. Each eigen-
/// component of the residual shrinks by `(1 − cλ)^T`, and held-out points
/// accumulate the geometric sum of the residuals they were driven by.
pub fn gradient_flow_closed_form(
    lm: &LinearizedModel,
    train_xs: &[&[f64]],
    targets: &[f64],
    test_xs: &[&[f64]],
    eta: f64,
    step_size: Option<f64>,
    num_steps: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = prepare(lm, train_xs, targets, test_xs, eta, step_size)?;
    Ok(closed_form(&p, num_steps))
}

fn closed_form(p: &FlowProblem, num_steps: f64) -> (Vec<f64>, Vec<f64>) {
    let (vals, vecs) = symmetric_eigen(&p.k);
    let r0: Vec<f64> = p.f_train.iter().zip(&p.targets).map(|(a, y)| a - y).collect();
    let order = r0.len();
    let mut train = p.targets.clone();
    // Σ_t r_t expressed back in the standard basis, scaled by c
    let mut driven = vec![0.0; order];
    for (lam, q) in vals.iter().zip(&vecs) {
        let coef = linalg::dot(q, &r0);
        let cl = p.coeff * lam;
        let log_rho = (-cl).ln_1p();
        let decay = (num_steps * log_rho).exp();
        let sum = if cl.abs() > 1e-300 {
            -(num_steps * log_rho).exp_m1() / lam
        } else {
            p.coeff * num_steps
        };
        for i in 0..order {
            train[i] += decay * coef * q[i];
            driven[i] += sum * coef * q[i];
        }
    }
    let mut test = p.f_test.clone();
    if let Some(kx) = &p.kx {
        let pushed = kx.matvec(&driven).expect("cross kernel width");
        test.iter_mut().zip(&pushed).for_each(|(a, b)| *a -= b);
    }
    (train, test)
}

/// Full-batch gradient descent on `ω` for the same loss: `ω ← ω − hη·∇_ω L`.
pub fn parameter_gradient_descent(
    lm: &LinearizedModel,
    train_xs: &[&[f64]],
    targets: &[f64],
    eta: f64,
    step_size: f64,
    num_steps: usize,
) -> Result<LinearizedModel> {
    let n = train_xs.len();
    let d = lm.output_dim();
    if targets.len() != n * d {
        return Err(Error::dims("descent targets", n * d, targets.len()));
    }
    let np = lm.num_params();
    let jac = jacobians(&lm.anchor, train_xs)?.concat();
    let f0 = crate::par::map_slice(train_xs, |x| lm.anchor.forward(x))
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .concat();
    let mut out = lm.clone();
    let scale = step_size * eta / n as f64;
    for _ in 0..num_steps {
        let delta = out.delta.as_slice();
        let resid: Vec<f64> = (0..n * d)
            .map(|r| f0[r] + linalg::dot(&jac[r * np..(r + 1) * np], delta) - targets[r])
            .collect();
        let mut grad = vec![0.0; np];
        for (r, res) in resid.iter().enumerate() {
            grad.iter_mut().zip(&jac[r * np..(r + 1) * np]).for_each(|(g, j)| *g += res * j);
        }
        out.delta.0.iter_mut().zip(&grad).for_each(|(w, g)| *w -= scale * g);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub max_train_gap: f64,
    pub max_test_gap: f64,
    pub lambda: f64,
    pub num_steps: f64,
    pub step_size: f64,
    pub jitter_used: f64,
}

/// Residual floor `(1 − cλ)^T` the flow is run to for the ridge shift's eigenvalue.
const CONVERGED_DECAY: f64 = 1e-12;

/// Compare the converged gradient flow with the residual-form ridge solution
/// (targets `Y − f_{θ₀}(X)`, offset `f_{θ₀}`) at regularization `lambda`.
///
/// The flow is run to interpolation (in closed form, see
/// [`gradient_flow_closed_form`]): long enough for the slowest eigencomponent
/// of the anchor NTK to decay by `1e-12`. Eigenvalues are floored at
/// `1e-12·λ_max` so a numerically singular kernel still gives a finite run.
pub fn equivalence_check(
    lm: &LinearizedModel,
    train_xs: &[&[f64]],
    targets: &[f64],
    test_xs: &[&[f64]],
    lambda: f64,
) -> Result<EquivalenceReport> {
    let cfg = KernelRidgeConfig::new(lambda)?;
    let p = prepare(lm, train_xs, targets, test_xs, 1.0, None)?;
    let n = train_xs.len();
    let slowest = linalg::symmetric_eigenvalues(&p.k)
        .first()
        .copied()
        .unwrap_or(0.0)
        .max(linalg::FIRST_JITTER * p.lambda_max);
    let rate = (-(p.coeff * slowest).min(0.5)).ln_1p();
    let num_steps = (CONVERGED_DECAY.ln() / rate).ceil().max(1.0);
    let (flow_train, flow_test) = closed_form(&p, num_steps);

    let ntk = crate::ntk::NtkMatrix {
        base: p.k.clone(),
        batch_size: n,
        output_dim: lm.output_dim(),
        source_step: lm.step_index(),
    };
    let sol = ridge_solve_residual(&ntk, targets, &p.f_train, &cfg)?;
    let ridge_train = sol.fitted();
    let max_gap = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let max_test_gap = match &p.kx {
        Some(kx) => {
            let ridge_test = evaluate(&sol, kx, Some(&p.f_test))?;
            max_gap(&ridge_test, &flow_test)
        }
        None => 0.0,
    };
    Ok(EquivalenceReport {
        max_train_gap: max_gap(&ridge_train, &flow_train),
        max_test_gap,
        lambda,
        num_steps,
        step_size: p.step_size,
        jitter_used: sol.jitter_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, Activation, MlpSpec};
    use crate::rng;

    fn points(n: usize, p: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| rng::normal_vec(&mut r, p)).collect()
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(|x| x.as_slice()).collect()
    }

    fn anchor(widths: Vec<usize>, seed: u64) -> Checkpoint {
        init(&MlpSpec::new(widths, Activation::Tanh, seed)).unwrap()
    }

    #[test]
    fn fresh_linearization_matches_anchor() {
        let c = anchor(vec![3, 8, 2], 1);
        let lm = linearize(&c);
        for x in points(5, 3, 2) {
            assert_eq!(lm.predict(&x).unwrap(), c.forward(&x).unwrap());
        }
    }

    #[test]
    fn delta_moves_along_jacobian_column() {
        let c = anchor(vec![3, 8, 2], 3);
        let np = c.num_params();
        let x = &points(1, 3, 4)[0];
        let jac = c.jacobian(x).unwrap();
        let base = c.forward(x).unwrap();
        for k in [0, 7, np - 1] {
            let mut lm = linearize(&c);
            let mut delta = ParamVector::zeros(np);
            delta.0[k] = 0.37;
            lm.set_delta(delta).unwrap();
            let p = lm.predict(x).unwrap();
            for a in 0..2 {
                assert!((p[a] - base[a] - jac[a * np + k] * 0.37).abs() < 1e-10);
            }
        }
        assert!(linearize(&c).set_delta(ParamVector::zeros(np + 1)).is_err());
    }

    #[test]
    fn flow_is_constant_at_targets() {
        let c = anchor(vec![2, 6, 1], 5);
        let lm = linearize(&c);
        let xs = points(6, 2, 6);
        let y = lm.predict_batch(&refs(&xs)).unwrap();
        let traj = gradient_flow(&lm, &refs(&xs), &y, &[], &FlowConfig::new(1.0, 50)).unwrap();
        assert_eq!(traj.final_train(), y.as_slice());
    }

    #[test]
    fn scalar_flow_matches_exponential() {
        // one example, one output: k = ‖J‖², f_t − y = (f_0 − y)·exp(−ηkt)
        let c = anchor(vec![1, 3, 1], 7);
        let lm = linearize(&c);
        let x = [0.8];
        let k = c.jacobian(&x).unwrap().iter().map(|v| v * v).sum::<f64>();
        let eta = 0.5;
        let t_end = 1.0 / (eta * k);
        let f0 = lm.predict(&x).unwrap()[0];
        let y = f0 + 1.0;
        let exact = y + (f0 - y) * (-eta * k * t_end).exp();
        let mut err = f64::INFINITY;
        for steps in [100usize, 1000, 10_000] {
            let cfg = FlowConfig {
                eta,
                num_steps: steps,
                step_size: Some(t_end / steps as f64),
                snapshot_every: steps,
            };
            let traj = gradient_flow(&lm, &[&x], &[y], &[], &cfg).unwrap();
            let e = (traj.final_train()[0] - exact).abs();
            assert!(e < err);
            err = e;
        }
        assert!(err < 1e-4);
    }

    #[test]
    fn unstable_step_is_rejected() {
        let c = anchor(vec![2, 4, 1], 8);
        let lm = linearize(&c);
        let xs = points(4, 2, 9);
        let y = vec![0.0; 4];
        let auto = gradient_flow(&lm, &refs(&xs), &y, &[], &FlowConfig::new(1.0, 1)).unwrap();
        let cfg = FlowConfig {
            step_size: Some(auto.step_size * 4.5),
            ..FlowConfig::new(1.0, 1)
        };
        assert!(matches!(
            gradient_flow(&lm, &refs(&xs), &y, &[], &cfg),
            Err(Error::UnstableStep { .. })
        ));
    }

    #[test]
    fn train_predictions_converge() {
        let c = anchor(vec![2, 32, 1], 10);
        let lm = linearize(&c);
        let xs = points(6, 2, 11);
        let y: Vec<f64> = (0..6).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let f0 = lm.predict_batch(&refs(&xs)).unwrap();
        let start: f64 = linalg::norm2(&f0.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
        let traj = gradient_flow(&lm, &refs(&xs), &y, &[], &FlowConfig::new(1.0, 200_000)).unwrap();
        let end = linalg::norm2(&traj.final_train().iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
        assert!(end <= 1e-3 * start, "{end} vs {start}");
    }

    #[test]
    fn closed_form_matches_stepping() {
        let c = anchor(vec![2, 8, 2], 12);
        let lm = linearize(&c);
        let xs = points(5, 2, 13);
        let test = points(3, 2, 14);
        let y: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let traj = gradient_flow(&lm, &refs(&xs), &y, &refs(&test), &FlowConfig::new(0.7, 300)).unwrap();
        let (tr, te) = gradient_flow_closed_form(&lm, &refs(&xs), &y, &refs(&test), 0.7, None, 300.0).unwrap();
        for (a, b) in tr.iter().zip(traj.final_train()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in te.iter().zip(traj.final_test()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn function_and_parameter_views_agree() {
        let c = anchor(vec![2, 8, 1], 15);
        let lm = linearize(&c);
        let xs = points(7, 2, 16);
        let y: Vec<f64> = (0..7).map(|i| (i as f64 * 0.7).cos()).collect();
        let traj = gradient_flow(
            &lm,
            &refs(&xs),
            &y,
            &[],
            &FlowConfig {
                snapshot_every: 1,
                ..FlowConfig::new(0.9, 20)
            },
        )
        .unwrap();
        let mut cur = lm.clone();
        for step in 1..=20 {
            cur = parameter_gradient_descent(&cur, &refs(&xs), &y, 0.9, traj.step_size, 1).unwrap();
            let pred = cur.predict_batch(&refs(&xs)).unwrap();
            for (a, b) in pred.iter().zip(&traj.train[step]) {
                assert!((a - b).abs() < 1e-8, "step {step}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn scalar_equivalence() {
        let c = anchor(vec![1, 4, 1], 17);
        let lm = linearize(&c);
        let r = equivalence_check(&lm, &[&[0.3]], &[2.0], &[&[-0.4]], 1e-10).unwrap();
        assert!(r.max_train_gap < 1e-6);
        assert!(r.max_test_gap < 1e-6);
    }

    #[test]
    fn regularization_pulls_off_interpolation() {
        let c = anchor(vec![2, 16, 1], 18);
        let lm = linearize(&c);
        let xs = points(12, 2, 19);
        let test = points(6, 2, 20);
        let y: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let mut prev = -1.0;
        for lambda in [1e-8, 1e-5, 1e-3, 1e-1] {
            let r = equivalence_check(&lm, &refs(&xs), &y, &refs(&test), lambda).unwrap();
            assert!(r.max_train_gap > prev, "lambda {lambda}: {} <= {prev}", r.max_train_gap);
            prev = r.max_train_gap;
        }
    }

    #[test]
    fn descent_limit_is_min_norm() {
        // P = 25 parameters, 4 examples: many interpolating deltas exist
        let c = anchor(vec![2, 6, 1], 21);
        let lm = linearize(&c);
        let xs = points(4, 2, 22);
        let y = vec![1.0, -1.0, 0.5, -0.5];
        let k = batch_kernel(&c, &refs(&xs)).unwrap().base;
        let lmax = linalg::symmetric_eigenvalues(&k)[3];
        let h = 4.0 / (2.0 * lmax);
        let fitted = parameter_gradient_descent(&lm, &refs(&xs), &y, 1.0, h, 200_000).unwrap();
        let f0 = lm.predict_batch(&refs(&xs)).unwrap();
        let resid: Vec<f64> = y.iter().zip(&f0).map(|(a, b)| a - b).collect();
        let min_norm_sq = crate::kernel_machine::supervision_complexity(&k, &resid).unwrap();
        let got = fitted.delta().norm().powi(2);
        assert!((got - min_norm_sq).abs() <= 1e-6 * min_norm_sq, "{got} vs {min_norm_sq}");

        // adding any null-space direction keeps interpolation but grows the norm
        let jac = jacobians(&c, &refs(&xs)).unwrap().concat();
        let np = c.num_params();
        let mut r = rng::seeded(23);
        for _ in 0..5 {
            let v = rng::normal_vec(&mut r, np);
            let jv: Vec<f64> = (0..4).map(|i| linalg::dot(&jac[i * np..(i + 1) * np], &v)).collect();
            let f = linalg::factor_psd(&k, 0.0).unwrap();
            let coef = linalg::solve_psd(&f, &jv).unwrap();
            let mut null = v.clone();
            for i in 0..4 {
                null.iter_mut().zip(&jac[i * np..(i + 1) * np]).for_each(|(a, j)| *a -= coef[i] * j);
            }
            let other: Vec<f64> = fitted.delta().0.iter().zip(&null).map(|(a, b)| a + b).collect();
            let mut alt = lm.clone();
            alt.set_delta(ParamVector(other.clone())).unwrap();
            let p = alt.predict_batch(&refs(&xs)).unwrap();
            for (a, b) in p.iter().zip(&y) {
                assert!((a - b).abs() < 1e-6);
            }
            assert!(linalg::norm2(&other) >= fitted.delta().norm());
        }
    }
}
