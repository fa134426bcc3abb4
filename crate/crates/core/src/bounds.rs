//! Margin losses and margin-based generalization bounds for kernel
//! classifiers, including the bound for a student distilled from a teacher.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::report::serialize_float;
use crate::model::TangentModel;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginParams {
    pub gamma: f64,
    pub delta: f64,
}

impl MarginParams {
    pub fn new(gamma: f64, delta: f64) -> Result<Self> {
        let p = Self { gamma, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidSpec(format!("margin gamma must be positive, got {}", self.gamma)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidSpec(format!("confidence delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub gamma: f64,
    pub empirical_margin_term: f64,
    #[serde(serialize_with = "serialize_float")]
    pub complexity_term: f64,
    pub confidence_term: f64,
    #[serde(serialize_with = "serialize_float")]
    pub total: f64,
    /// Sample maximum of the kernel diagonal, a lower estimate of the supremum.
    pub kappa: f64,
    pub m0: u64,
    /// Set when the ceiling produced zero and `m0` was raised to 1.
    pub m0_clamped: bool,
    pub teacher_risk_term: Option<f64>,
}

/// Ramp loss: 1 for `α ≤ 0`, `1 − α/γ` on `(0, γ]`, 0 beyond `γ`.
pub fn margin_loss(alpha: f64, gamma: f64) -> f64 {
    if alpha <= 0.0 {
        1.0
    } else if alpha <= gamma {
        1.0 - alpha / gamma
    } else {
        0.0
    }
}

/// Logit of the labelled class minus the largest other logit.
pub fn prediction_margin(logits: &[f64], label: usize) -> Result<f64> {
    let d = logits.len();
    if label >= d {
        return Err(Error::InvalidLabel { label, num_classes: d });
    }
    if d < 2 {
        return Err(Error::InvalidSpec("prediction margin needs at least two classes".into()));
    }
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[label] - other)
}

fn check_common(complexity: f64, trace_k: f64, kappa: f64, n: usize, params: &MarginParams) -> Result<()> {
    params.validate()?;
    if n == 0 {
        return Err(Error::InvalidSpec("bound needs at least one training point".into()));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidSpec(format!("kappa must be positive and finite, got {kappa}")));
    }
    if !(trace_k >= 0.0 && trace_k.is_finite()) {
        return Err(Error::InvalidSpec(format!("kernel trace must be non-negative, got {trace_k}")));
    }
    if !(complexity >= 0.0) {
        return Err(Error::InvalidSpec(format!("complexity must be non-negative, got {complexity}")));
    }
    Ok(())
}

fn grid_size(gamma: f64, n: usize, kappa: f64, denom: f64) -> (u64, bool) {
    let raw = (gamma * (n as f64).sqrt() / (denom * kappa.sqrt())).ceil();
    if raw < 1.0 {
        log::warn!("margin grid size rounds to {raw}; using 1");
        (1, true)
    } else {
        (raw as u64, false)
    }
}

fn confidence(m0: u64, delta: f64, n: usize) -> f64 {
    3.0 * ((2.0 * m0 as f64 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// Binary kernel-classifier bound. `targets` are the real-valued regression
/// targets whose signs act as labels; `predictions` are the solution's
/// values at the same points.
#[allow(clippy::too_many_arguments)]
pub fn binary_bound(
    predictions: &[f64],
    targets: &[f64],
    complexity: f64,
    trace_k: f64,
    kappa: f64,
    n: usize,
    params: &MarginParams,
) -> Result<BoundReport> {
    check_common(complexity, trace_k, kappa, n, params)?;
    if predictions.len() != n {
        return Err(Error::dims("bound predictions", n, predictions.len()));
    }
    if targets.len() != n {
        return Err(Error::dims("bound targets", n, targets.len()));
    }
    let gamma = params.gamma;
    let nf = n as f64;
    let empirical = predictions
        .iter()
        .zip(targets)
        .map(|(f, y)| margin_loss(signum(*y) * f, gamma))
        .sum::<f64>()
        / nf;
    let complexity_term = (2.0 * complexity.sqrt() + 2.0) * trace_k.sqrt() / (gamma * nf);
    let (m0, m0_clamped) = grid_size(gamma, n, kappa, 2.0);
    let confidence_term = confidence(m0, params.delta, n);
    Ok(BoundReport {
        gamma,
        empirical_margin_term: empirical,
        complexity_term,
        confidence_term,
        total: empirical + complexity_term + confidence_term,
        kappa,
        m0,
        m0_clamped,
        teacher_risk_term: None,
    })
}

/// `sign` with `sign(0) = 0`, so a zero target never certifies a margin.
fn signum(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else if y < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Multiclass bound over prediction margins `ρᵢ` with `d` classes.
#[allow(clippy::too_many_arguments)]
pub fn multiclass_bound(
    margins: &[f64],
    complexity: f64,
    trace_k: f64,
    kappa: f64,
    n: usize,
    d: usize,
    params: &MarginParams,
) -> Result<BoundReport> {
    check_common(complexity, trace_k, kappa, n, params)?;
    if d < 2 {
        return Err(Error::InvalidSpec(format!("multiclass bound needs d >= 2, got {d}")));
    }
    if margins.len() != n {
        return Err(Error::dims("bound margins", n, margins.len()));
    }
    let gamma = params.gamma;
    let nf = n as f64;
    let df = d as f64;
    let empirical = margins.iter().filter(|&&r| r <= gamma).count() as f64 / nf;
    let complexity_term = 4.0 * df * (complexity + 1.0) * trace_k.sqrt() / (gamma * nf);
    let (m0, m0_clamped) = grid_size(gamma, n, kappa, 4.0 * df);
    let confidence_term = confidence(m0, params.delta, n);
    Ok(BoundReport {
        gamma,
        empirical_margin_term: empirical,
        complexity_term,
        confidence_term,
        total: empirical + complexity_term + confidence_term,
        kappa,
        m0,
        m0_clamped,
        teacher_risk_term: None,
    })
}

/// Student bound under distillation: held-out teacher risk plus the binary
/// bound against the soft teacher targets `2σ(g/τ) − 1`.
#[allow(clippy::too_many_arguments)]
pub fn distillation_bound(
    teacher_risk_estimate: f64,
    student_predictions: &[f64],
    soft_teacher_targets: &[f64],
    complexity_of_teacher_targets: f64,
    trace_k: f64,
    kappa: f64,
    n: usize,
    params: &MarginParams,
) -> Result<BoundReport> {
    if !(0.0..=1.0).contains(&teacher_risk_estimate) {
        return Err(Error::InvalidSpec(format!(
            "teacher risk must lie in [0, 1], got {teacher_risk_estimate}"
        )));
    }
    let mut r = binary_bound(
        student_predictions,
        soft_teacher_targets,
        complexity_of_teacher_targets,
        trace_k,
        kappa,
        n,
        params,
    )?;
    r.total += teacher_risk_estimate;
    r.teacher_risk_term = Some(teacher_risk_estimate);
    Ok(r)
}

/// Largest diagonal NTK entry `k(x,x)_{y,y}` over the given examples.
pub fn estimate_kappa<M: TangentModel>(m: &M, xs: &[&[f64]]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::InvalidSpec("kappa estimate needs at least one example".into()));
    }
    let d = m.output_dim();
    let np = m.num_params();
    let per_example = par::map_slice(xs, |x| -> Result<f64> {
        let j = m.jacobian(x)?;
        Ok((0..d)
            .map(|a| {
                let row = &j[a * np..(a + 1) * np];
                crate::linalg::dot(row, row)
            })
            .fold(f64::NEG_INFINITY, f64::max))
    });
    let mut best = f64::NEG_INFINITY;
    for v in per_example {
        best = best.max(v?);
    }
    Ok(best)
}

/// Margins `2⁻⁶, 2⁻⁵, …, 2³`.
pub fn gamma_grid() -> Vec<f64> {
    (-6..=3).map(|e| 2f64.powi(e)).collect()
}

/// Evaluate `bound` at every margin of `gammas` and keep the smallest total.
/// Ties keep the smaller margin.
pub fn best_over_gammas(
    gammas: &[f64],
    delta: f64,
    mut bound: impl FnMut(&MarginParams) -> Result<BoundReport>,
) -> Result<BoundReport> {
    let mut best: Option<BoundReport> = None;
    for &g in gammas {
        let r = bound(&MarginParams::new(g, delta)?)?;
        if best.as_ref().is_none_or(|b| r.total < b.total) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::InvalidSpec("empty margin grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, Activation, MlpSpec};
    use crate::ntk::batch_kernel;

    #[test]
    fn margin_loss_cases() {
        assert_eq!(margin_loss(-0.5, 0.3), 1.0);
        assert_eq!(margin_loss(0.0, 0.3), 1.0);
        assert_eq!(margin_loss(0.5, 1.0), 0.5);
        assert_eq!(margin_loss(2.0, 1.0), 0.0);
        let grid: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.05).collect();
        for g in [0.25, 1.0, 3.0] {
            for w in grid.windows(2) {
                let (a, b) = (margin_loss(w[0], g), margin_loss(w[1], g));
                assert!(b <= a);
                assert!((a - b).abs() <= (w[1] - w[0]) / g + 1e-12);
            }
        }
    }

    #[test]
    fn prediction_margin_cases() {
        assert_eq!(prediction_margin(&[2.0, 0.0, 1.0], 0).unwrap(), 1.0);
        assert_eq!(prediction_margin(&[2.0, 0.0, 1.0], 1).unwrap(), -2.0);
        assert_eq!(prediction_margin(&[1.0, 1.0], 0).unwrap(), 0.0);
        assert!(matches!(prediction_margin(&[1.0, 1.0], 2), Err(Error::InvalidLabel { .. })));
    }

    #[test]
    fn binary_worked_example() {
        let p = MarginParams::new(1.0, 0.05).unwrap();
        let preds = vec![1.5; 100];
        let r = binary_bound(&preds, &preds, 10.0, 100.0, 4.0, 100, &p).unwrap();
        assert_eq!(r.empirical_margin_term, 0.0);
        assert!((r.complexity_term - (2.0 * 10f64.sqrt() + 2.0) / 10.0).abs() < 1e-12);
        assert!((r.complexity_term - 0.8325).abs() < 1e-4);
        assert_eq!(r.m0, 3);
        assert!((r.confidence_term - 3.0 * (120f64.ln() / 200.0).sqrt()).abs() < 1e-12);
        assert!((r.confidence_term - 0.4640).abs() < 5e-4);
        assert!((r.total - (r.empirical_margin_term + r.complexity_term + r.confidence_term)).abs() < 1e-12);
    }

    #[test]
    fn binary_scale_covariance_and_monotone_n() {
        let preds = [0.3, -0.2, 0.9, 0.05];
        let ys = [1.0, -1.0, -1.0, 1.0];
        let a = binary_bound(&preds, &ys, 3.0, 4.0, 1.0, 4, &MarginParams::new(0.5, 0.1).unwrap()).unwrap();
        let scaled: Vec<f64> = preds.iter().map(|p| p * 3.0).collect();
        let ys3: Vec<f64> = ys.iter().map(|y| y * 3.0).collect();
        let b = binary_bound(&scaled, &ys3, 3.0, 4.0, 1.0, 4, &MarginParams::new(1.5, 0.1).unwrap()).unwrap();
        assert!((a.empirical_margin_term - b.empirical_margin_term).abs() < 1e-15);

        let p = MarginParams::new(0.5, 0.05).unwrap();
        let mut prev = f64::INFINITY;
        for n in [10usize, 20, 40, 80, 160, 320] {
            let r = binary_bound(&vec![1.0; n], &vec![1.0; n], 5.0, 10.0, 1.0, n, &p).unwrap();
            assert!(r.total <= prev);
            prev = r.total;
        }
    }

    #[test]
    fn multiclass_worked_example() {
        let p = MarginParams::new(0.5, 0.1).unwrap();
        let r = multiclass_bound(&vec![1.0; 64], 2.0, 64.0, 1.0, 64, 4, &p).unwrap();
        assert!((r.complexity_term - 12.0).abs() < 1e-12);
        assert_eq!(r.m0, 1);
        assert!(!r.m0_clamped);
        assert!((r.confidence_term - 3.0 * (20f64.ln() / 128.0).sqrt()).abs() < 1e-12);
        assert!((r.confidence_term - 0.459).abs() < 1e-3);
        assert_eq!(r.empirical_margin_term, 0.0);
        let all_wrong = multiclass_bound(&vec![-0.1; 64], 2.0, 64.0, 1.0, 64, 4, &p).unwrap();
        assert_eq!(all_wrong.empirical_margin_term, 1.0);
    }

    #[test]
    fn distillation_decomposes() {
        let p = MarginParams::new(0.25, 0.05).unwrap();
        let preds = [0.4, -0.3, 0.2];
        let soft = [0.5, -0.6, 0.1];
        let base = binary_bound(&preds, &soft, 2.0, 3.0, 1.5, 3, &p).unwrap();
        let zero = distillation_bound(0.0, &preds, &soft, 2.0, 3.0, 1.5, 3, &p).unwrap();
        assert_eq!(zero.total, base.total);
        let one = distillation_bound(1.0, &preds, &soft, 2.0, 3.0, 1.5, 3, &p).unwrap();
        assert!(one.total >= 1.0);
        let mid = distillation_bound(0.3, &preds, &soft, 2.0, 3.0, 1.5, 3, &p).unwrap();
        assert!((mid.total - (0.3 + base.total)).abs() < 1e-12);
        assert!(distillation_bound(1.5, &preds, &soft, 2.0, 3.0, 1.5, 3, &p).is_err());
    }

    #[test]
    fn invalid_params() {
        assert!(MarginParams::new(0.0, 0.1).is_err());
        assert!(MarginParams::new(1.0, 1.0).is_err());
    }

    #[test]
    fn kappa_for_linear_model() {
        let spec = MlpSpec::new(vec![3, 1], Activation::Relu, 4);
        let c = init(&spec).unwrap();
        let s = 1.0 / 3f64.sqrt();
        let xs: Vec<Vec<f64>> = vec![vec![1.0, 0.0, 0.0], vec![s, s, s], vec![0.0, -1.0, 0.0]];
        let rows: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        assert!((estimate_kappa(&c, &rows).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_matches_dense_diagonal_and_is_monotone() {
        let spec = MlpSpec::new(vec![2, 6, 3], Activation::Tanh, 8);
        let c = init(&spec).unwrap();
        let xs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.3 - 0.5, 1.0 - i as f64 * 0.2]).collect();
        let rows: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let k = batch_kernel(&c, &rows).unwrap();
        let dense = k.base.diag().into_iter().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(estimate_kappa(&c, &rows).unwrap(), dense);
        let mut prev = 0.0;
        for m in 1..=5 {
            let v = estimate_kappa(&c, &rows[..m]).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn gamma_search_picks_minimum() {
        let g = gamma_grid();
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], 1.0 / 64.0);
        assert_eq!(g[9], 8.0);
        let preds = [1.0, -1.0, 2.0, -0.5];
        let ys = [1.0, -1.0, 1.0, -1.0];
        let best = best_over_gammas(&g, 0.05, |p| binary_bound(&preds, &ys, 1.0, 4.0, 1.0, 4, p)).unwrap();
        for &gm in &g {
            let r = binary_bound(&preds, &ys, 1.0, 4.0, 1.0, 4, &MarginParams::new(gm, 0.05).unwrap()).unwrap();
            assert!(best.total <= r.total);
        }
    }
}
