//! Per-example training losses and their logit gradients.
//!
//! Networks with a single output are treated as binary classifiers: the
//! cross-entropy kinds see the two-class logits `(0, f)`, and the squared
//! error kinds regress onto signed targets (`±1` for labels,
//! `2σ(g/τ) − 1` for a teacher logit `g`).

use serde::{Deserialize, Serialize};

use crate::data::{sigmoid, softmax_scaled};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    /// Softmax cross-entropy against hard labels.
    Ce,
    /// `τ²`-scaled cross-entropy between `softmax(g/τ)` and `softmax(f/τ)`.
    KdCe { tau: f64 },
    /// `½‖y − f‖²` against one-hot (or signed binary) labels.
    Mse,
    /// `(τ/2)‖softmax(g/τ) − f‖²`.
    KdMse { tau: f64 },
    /// `(1 − α)·ce + α·kd_ce`.
    Mixture { tau: f64, alpha: f64 },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::KdCe { .. } => "kd_ce",
            LossKind::Mse => "mse",
            LossKind::KdMse { .. } => "kd_mse",
            LossKind::Mixture { .. } => "mixture",
        }
    }

    pub fn needs_teacher(&self) -> bool {
        !matches!(self, LossKind::Ce | LossKind::Mse)
    }

    pub fn needs_labels(&self) -> bool {
        matches!(self, LossKind::Ce | LossKind::Mse | LossKind::Mixture { .. })
    }

    pub fn tau(&self) -> Option<f64> {
        match *self {
            LossKind::KdCe { tau } | LossKind::KdMse { tau } | LossKind::Mixture { tau, .. } => Some(tau),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(tau) = self.tau() {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::InvalidSpec(format!("temperature must be positive, got {tau}")));
            }
        }
        if let LossKind::Mixture { alpha, .. } = *self {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::InvalidSpec(format!("mixture alpha must lie in [0,1], got {alpha}")));
            }
        }
        Ok(())
    }

    /// Loss of one example and its gradient with respect to the logits.
    pub fn value_and_grad(
        &self,
        logits: &[f64],
        teacher: Option<&[f64]>,
        label: Option<usize>,
    ) -> Result<(f64, Vec<f64>)> {
        let d = logits.len();
        let need_teacher = || {
            teacher.ok_or(Error::MissingTargets {
                loss: self.name(),
                what: "teacher logits",
            })
        };
        let need_label = || {
            let l = label.ok_or(Error::MissingTargets {
                loss: self.name(),
                what: "hard labels",
            })?;
            let classes = d.max(2);
            if l >= classes {
                return Err(Error::InvalidLabel {
                    label: l,
                    num_classes: classes,
                });
            }
            Ok(l)
        };
        match *self {
            LossKind::Ce => Ok(cross_entropy_hard(logits, need_label()?)),
            LossKind::KdCe { tau } => Ok(kd_cross_entropy(logits, need_teacher()?, tau)),
            LossKind::Mse => {
                let y = label_target(need_label()?, d);
                Ok(squared_error(logits, &y, 1.0))
            }
            LossKind::KdMse { tau } => {
                let y = teacher_soft_target(need_teacher()?, tau);
                Ok(squared_error(logits, &y, tau))
            }
            LossKind::Mixture { tau, alpha } => {
                let (ce, gce) = cross_entropy_hard(logits, need_label()?);
                let (kd, gkd) = kd_cross_entropy(logits, need_teacher()?, tau);
                let g = gce.iter().zip(&gkd).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect();
                Ok(((1.0 - alpha) * ce + alpha * kd, g))
            }
        }
    }
}

/// Two-class view of a single logit.
fn expand(logits: &[f64]) -> Vec<f64> {
    if logits.len() == 1 {
        vec![0.0, logits[0]]
    } else {
        logits.to_vec()
    }
}

/// Inverse of [`expand`] for gradients.
fn contract(grad: Vec<f64>, d: usize) -> Vec<f64> {
    if d == 1 {
        vec![grad[1]]
    } else {
        grad
    }
}

fn log_softmax_scaled(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / tau;
    let lse = m + z.iter().map(|&x| (x / tau - m).exp()).sum::<f64>().ln();
    z.iter().map(|&x| x / tau - lse).collect()
}

fn cross_entropy_hard(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let z = expand(logits);
    let logp = log_softmax_scaled(&z, 1.0);
    let mut g: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    g[label] -= 1.0;
    (-logp[label], contract(g, logits.len()))
}

fn kd_cross_entropy(logits: &[f64], teacher: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let z = expand(logits);
    let pt = softmax_scaled(&expand(teacher), tau);
    let logp = log_softmax_scaled(&z, tau);
    let loss = -tau * tau * pt.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
    // d/dz of −τ² Σ p_t log softmax(z/τ) = τ·(softmax(z/τ) − p_t)
    let g = logp.iter().zip(&pt).map(|(l, p)| tau * (l.exp() - p)).collect();
    (loss, contract(g, logits.len()))
}

fn squared_error(logits: &[f64], target: &[f64], scale: f64) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = logits.iter().zip(target).map(|(f, y)| f - y).collect();
    let loss = 0.5 * scale * diff.iter().map(|x| x * x).sum::<f64>();
    (loss, diff.into_iter().map(|x| scale * x).collect())
}

/// Regression target for a hard label: one-hot, or `±1` for one output.
pub fn label_target(label: usize, d: usize) -> Vec<f64> {
    if d == 1 {
        vec![if label == 1 { 1.0 } else { -1.0 }]
    } else {
        let mut y = vec![0.0; d];
        y[label] = 1.0;
        y
    }
}

/// Regression target for teacher logits: `softmax(g/τ)`, or `2σ(g/τ) − 1`
/// for one output.
pub fn teacher_soft_target(teacher: &[f64], tau: f64) -> Vec<f64> {
    if teacher.len() == 1 {
        vec![2.0 * sigmoid(teacher[0] / tau) - 1.0]
    } else {
        softmax_scaled(teacher, tau)
    }
}

/// Auxiliary supervision for a batch: flattened teacher logits and/or labels.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTargets<'a> {
    pub teacher_logits: Option<&'a [f64]>,
    pub hard_labels: Option<&'a [usize]>,
    /// Output width; rows of `teacher_logits` have this length.
    pub d: usize,
}

impl<'a> LossTargets<'a> {
    pub fn labels(labels: &'a [usize], d: usize) -> Self {
        Self {
            teacher_logits: None,
            hard_labels: Some(labels),
            d,
        }
    }

    pub fn teacher(logits: &'a [f64], d: usize) -> Self {
        Self {
            teacher_logits: Some(logits),
            hard_labels: None,
            d,
        }
    }

    pub fn both(logits: &'a [f64], labels: &'a [usize], d: usize) -> Self {
        Self {
            teacher_logits: Some(logits),
            hard_labels: Some(labels),
            d,
        }
    }

    pub(crate) fn check(&self, n: usize, d: usize) -> Result<()> {
        if self.d != d {
            return Err(Error::dims("loss targets output width", d, self.d));
        }
        if let Some(t) = self.teacher_logits {
            if t.len() != n * d {
                return Err(Error::dims("teacher logits", n * d, t.len()));
            }
        }
        if let Some(l) = self.hard_labels {
            if l.len() != n {
                return Err(Error::dims("hard labels", n, l.len()));
            }
        }
        Ok(())
    }

    pub(crate) fn teacher_row(&self, i: usize) -> Option<&'a [f64]> {
        self.teacher_logits.map(|t| &t[i * self.d..(i + 1) * self.d])
    }

    pub(crate) fn label(&self, i: usize) -> Option<usize> {
        self.hard_labels.map(|l| l[i])
    }
}

/// Batch-mean loss over `n × d` student logits.
pub fn compute_loss(
    kind: &LossKind,
    student_logits: &[f64],
    d: usize,
    teacher_logits: Option<&[f64]>,
    hard_targets: Option<&[usize]>,
) -> Result<f64> {
    kind.validate()?;
    if d == 0 || student_logits.len() % d != 0 || student_logits.is_empty() {
        return Err(Error::dims("student logits", d, student_logits.len()));
    }
    let n = student_logits.len() / d;
    if kind.needs_teacher() && teacher_logits.is_none() {
        return Err(Error::MissingTargets {
            loss: kind.name(),
            what: "teacher logits",
        });
    }
    if kind.needs_labels() && hard_targets.is_none() {
        return Err(Error::MissingTargets {
            loss: kind.name(),
            what: "hard labels",
        });
    }
    let targets = LossTargets {
        teacher_logits,
        hard_labels: hard_targets,
        d,
    };
    targets.check(n, d)?;
    let mut total = 0.0;
    for i in 0..n {
        let (l, _) = kind.value_and_grad(&student_logits[i * d..(i + 1) * d], targets.teacher_row(i), targets.label(i))?;
        total += l;
    }
    Ok(total / n as f64)
}
