//! Minibatch SGD training, offline and online knowledge distillation, and
//! teacher/student diagnostics.

pub mod loss;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{self, argmax, LabeledDataset, TargetKind, TargetMatrix};
use crate::error::{Error, Result};
use crate::harness::report::{Cell, Table};
use crate::model::{self, Checkpoint, MlpSpec};
use crate::par;
use crate::rng;

pub use loss::{compute_loss, LossKind, LossTargets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    /// `(epoch, divisor)` pairs: from `epoch` on the rate is divided by `divisor`.
    #[serde(default)]
    pub schedule: Vec<(usize, f64)>,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Scaled-down defaults: Nesterov momentum 0.9, batch `min(128, n/4)`.
    pub fn with_defaults(n: usize, epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: (n / 4).clamp(1, 128),
            lr,
            momentum: 0.9,
            nesterov: true,
            schedule: Vec::new(),
            warmup_epochs: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidSpec(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidSpec(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidSpec("schedule epochs must be strictly increasing".into()));
        }
        if self.schedule.iter().any(|&(_, f)| !(f > 0.0)) {
            return Err(Error::InvalidSpec("schedule divisors must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Learning rate for global step `step` (0-based) within `epoch` (0-based):
    /// linear warmup over the first `warmup_epochs`, then step decay.
    pub fn lr_at(&self, step: usize, epoch: usize, steps_per_epoch: usize) -> f64 {
        let mut lr = self.lr;
        for &(e, div) in &self.schedule {
            if epoch >= e {
                lr /= div;
            }
        }
        let warmup_steps = self.warmup_epochs * steps_per_epoch;
        if step < warmup_steps {
            lr *= (step + 1) as f64 / warmup_steps as f64;
        }
        lr
    }
}

/// Teacher checkpoints at strictly increasing step indices.
#[derive(Debug, Clone)]
pub struct TeacherTrajectory {
    checkpoints: Vec<Checkpoint>,
    times: Vec<u64>,
}

impl TeacherTrajectory {
    pub fn new(checkpoints: Vec<Checkpoint>, times: Vec<u64>) -> Result<Self> {
        if checkpoints.is_empty() {
            return Err(Error::InvalidSpec("teacher trajectory must be nonempty".into()));
        }
        if checkpoints.len() != times.len() {
            return Err(Error::dims("trajectory times", checkpoints.len(), times.len()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec("trajectory times must be strictly increasing".into()));
        }
        let d = checkpoints[0].output_dim();
        if checkpoints.iter().any(|c| c.output_dim() != d) {
            return Err(Error::InvalidSpec("trajectory checkpoints disagree on output width".into()));
        }
        Ok(Self { checkpoints, times })
    }

    /// Trajectory keyed by each checkpoint's `step_index`.
    pub fn from_checkpoints(checkpoints: Vec<Checkpoint>) -> Result<Self> {
        let times = checkpoints.iter().map(|c| c.step_index).collect();
        Self::new(checkpoints, times)
    }

    pub fn single(c: Checkpoint) -> Self {
        let t = c.step_index;
        Self {
            checkpoints: vec![c],
            times: vec![t],
        }
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    pub fn times(&self) -> &[u64] {
        &self.times
    }

    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("nonempty trajectory")
    }

    pub fn output_dim(&self) -> usize {
        self.checkpoints[0].output_dim()
    }

    /// Index of the checkpoint with the smallest time strictly greater than
    /// `t`; the final checkpoint when `t >= t_m`.
    pub fn nearest_index(&self, t: u64) -> usize {
        self.times.partition_point(|&ti| ti <= t).min(self.len() - 1)
    }

    /// Keep the checkpoints whose epoch is a multiple of `period`, plus the
    /// final one.
    pub fn thinned(&self, period_epochs: usize) -> Result<Self> {
        if period_epochs == 0 {
            return Err(Error::InvalidSpec("update period must be >= 1".into()));
        }
        let last = self.len() - 1;
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| i == last || self.checkpoints[i].epoch_index % period_epochs as u64 == 0)
            .collect();
        Ok(Self {
            checkpoints: keep.iter().map(|&i| self.checkpoints[i].clone()).collect(),
            times: keep.iter().map(|&i| self.times[i]).collect(),
        })
    }
}

pub fn nearest_checkpoint(traj: &TeacherTrajectory, t: u64) -> &Checkpoint {
    &traj.checkpoints[traj.nearest_index(t)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    /// Time of the supervising teacher checkpoint at the epoch's last step; −1 without a teacher.
    pub teacher_time: i64,
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub final_checkpoint: Checkpoint,
    /// One checkpoint per epoch, `epoch_index` 1..=epochs.
    pub epoch_checkpoints: Vec<Checkpoint>,
    pub log: Vec<MetricRow>,
}

impl RunArtifact {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.log.last().and_then(|r| r.test_acc)
    }

    pub fn metrics_table(&self) -> Table {
        metrics_table(&self.log)
    }

    pub fn trajectory(&self) -> Result<TeacherTrajectory> {
        TeacherTrajectory::from_checkpoints(self.epoch_checkpoints.clone())
    }

    /// Write `{prefix}_epoch{e:04}.kdcl` checkpoints and `{prefix}_metrics.csv`.
    pub fn persist(&self, dir: &Path, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for c in &self.epoch_checkpoints {
            model::save(c, &dir.join(format!("{prefix}_epoch{:04}.kdcl", c.epoch_index)))?;
        }
        self.metrics_table().write_csv(&dir.join(format!("{prefix}_metrics.csv")))
    }
}

pub fn metrics_table(log: &[MetricRow]) -> Table {
    let mut t = Table::new("metrics", &["epoch", "step", "loss", "train_acc", "test_acc", "teacher_time"]);
    for r in log {
        t.push(vec![
            Cell::Int(r.epoch as i64),
            Cell::Int(r.step as i64),
            Cell::Float(r.loss),
            Cell::Float(r.train_acc),
            r.test_acc.map_or(Cell::Empty, Cell::Float),
            Cell::Int(r.teacher_time),
        ]);
    }
    t
}

/// Fraction of examples whose predicted class matches the label.
pub fn accuracy(c: &Checkpoint, ds: &LabeledDataset) -> Result<f64> {
    let logits = c.forward_batch(&ds.rows())?;
    let preds = predicted_classes(&logits, c.output_dim());
    let hits = preds.iter().zip(ds.labels()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Argmax per row (lowest index wins ties); sign for a single output.
pub fn predicted_classes(logits: &[f64], d: usize) -> Vec<usize> {
    logits
        .chunks(d)
        .map(|r| if d == 1 { usize::from(r[0] > 0.0) } else { argmax(r) })
        .collect()
}

/// Minibatch SGD with (Nesterov) momentum, linear warmup and step decay.
///
/// When a teacher trajectory is given, the step with global index `t`
/// (0-based count of completed updates) is supervised by
/// [`nearest_checkpoint`]`(traj, t)`.
pub fn train(
    model: Checkpoint,
    ds: &LabeledDataset,
    test: Option<&LabeledDataset>,
    kind: &LossKind,
    teacher: Option<&TeacherTrajectory>,
    cfg: &TrainConfig,
) -> Result<RunArtifact> {
    cfg.validate()?;
    kind.validate()?;
    if kind.needs_teacher() && teacher.is_none() {
        return Err(Error::MissingTeacher);
    }
    if ds.input_dim() != model.input_dim() {
        return Err(Error::dims("training inputs", model.input_dim(), ds.input_dim()));
    }
    let d = model.output_dim();
    if let Some(traj) = teacher {
        if traj.output_dim() != d {
            return Err(Error::dims("teacher output width", d, traj.output_dim()));
        }
    }
    if let Some(t) = test {
        if t.input_dim() != model.input_dim() {
            return Err(Error::dims("test inputs", model.input_dim(), t.input_dim()));
        }
    }
    let n = ds.len();
    let rows = ds.rows();
    let spe = cfg.steps_per_epoch(n);
    let mut rng = rng::seeded(cfg.seed);
    let mut model = model;
    let mut velocity = vec![0.0; model.num_params()];
    // teacher logits over the whole training set, computed once per checkpoint
    let mut teacher_cache: Vec<Option<Vec<f64>>> = teacher.map_or(Vec::new(), |t| vec![None; t.len()]);
    let mut step: u64 = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut epoch_checkpoints = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let perm = data::shuffled_indices(n, &mut rng);
        let mut loss_sum = 0.0;
        let mut teacher_time = -1i64;
        for batch in perm.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| rows[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| ds.labels()[i]).collect();
            let teacher_rows: Option<Vec<f64>> = match teacher {
                Some(traj) => {
                    let idx = traj.nearest_index(step);
                    teacher_time = traj.times()[idx] as i64;
                    if teacher_cache[idx].is_none() {
                        teacher_cache[idx] = Some(traj.checkpoints()[idx].forward_batch(&rows)?);
                    }
                    let all = teacher_cache[idx].as_ref().expect("filled above");
                    Some(batch.iter().flat_map(|&i| all[i * d..(i + 1) * d].iter().copied()).collect())
                }
                None => None,
            };
            let targets = LossTargets {
                teacher_logits: teacher_rows.as_deref(),
                hard_labels: if kind.needs_labels() { Some(&labels) } else { None },
                d,
            };
            let (loss, grad) = model.loss_and_grad(&xs, kind, &targets)?;
            loss_sum += loss * batch.len() as f64;
            let lr = cfg.lr_at(step as usize, epoch, spe);
            let params = &mut model.params.0;
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad.0) {
                *v = cfg.momentum * *v + g;
                let dir = if cfg.nesterov { g + cfg.momentum * *v } else { *v };
                *p -= lr * dir;
            }
            step += 1;
        }
        model.step_index = step;
        model.epoch_index = epoch as u64 + 1;
        let row = MetricRow {
            epoch: epoch + 1,
            step,
            loss: loss_sum / n as f64,
            train_acc: accuracy(&model, ds)?,
            test_acc: test.map(|t| accuracy(&model, t)).transpose()?,
            teacher_time,
        };
        log::debug!(
            "epoch {} step {} loss {:.6} train_acc {:.4}",
            row.epoch,
            row.step,
            row.loss,
            row.train_acc
        );
        log.push(row);
        epoch_checkpoints.push(model.clone());
    }
    Ok(RunArtifact {
        final_checkpoint: model,
        epoch_checkpoints,
        log,
    })
}

/// Train a fresh student against a fixed, fully trained teacher.
pub fn run_offline_kd(
    student_spec: &MlpSpec,
    teacher_final: &Checkpoint,
    ds: &LabeledDataset,
    test: Option<&LabeledDataset>,
    kind: &LossKind,
    cfg: &TrainConfig,
) -> Result<RunArtifact> {
    let student = model::init(student_spec)?;
    let traj = TeacherTrajectory::single(teacher_final.clone());
    train(student, ds, test, kind, Some(&traj), cfg)
}

/// Train a fresh student supervised by the teacher trajectory thinned to one
/// checkpoint every `update_period_epochs` epochs.
pub fn run_online_kd(
    student_spec: &MlpSpec,
    traj: &TeacherTrajectory,
    ds: &LabeledDataset,
    test: Option<&LabeledDataset>,
    kind: &LossKind,
    cfg: &TrainConfig,
    update_period_epochs: usize,
) -> Result<RunArtifact> {
    let thinned = traj.thinned(update_period_epochs)?;
    let student = model::init(student_spec)?;
    train(student, ds, test, kind, Some(&thinned), cfg)
}

/// Mean of τ-softened predictions of the last `window` checkpoints at or
/// before step `t` (the first checkpoint if none precede `t`). Averaging is
/// done on probabilities (or `2σ(g/τ) − 1` for a single output), not logits.
pub fn average_teacher_predictions(
    traj: &TeacherTrajectory,
    t: u64,
    window: usize,
    xs: &[&[f64]],
    tau: f64,
) -> Result<TargetMatrix> {
    if window == 0 {
        return Err(Error::InvalidSpec("averaging window must be >= 1".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidSpec(format!("temperature must be positive, got {tau}")));
    }
    let available = traj.times().partition_point(|&ti| ti <= t).max(1);
    let start = available.saturating_sub(window);
    let d = traj.output_dim();
    let mut acc = vec![0.0; xs.len() * d];
    for c in &traj.checkpoints()[start..available] {
        let logits = c.forward_batch(xs)?;
        for (i, row) in logits.chunks(d).enumerate() {
            for (a, s) in acc[i * d..(i + 1) * d].iter_mut().zip(loss::teacher_soft_target(row, tau)) {
                *a += s;
            }
        }
    }
    let k = (available - start) as f64;
    acc.iter_mut().for_each(|x| *x /= k);
    TargetMatrix::new(acc, xs.len(), d, TargetKind::Soft)
}

/// Rate at which student and teacher predict the same class.
pub fn fidelity(student: &Checkpoint, teacher: &Checkpoint, xs: &[&[f64]]) -> Result<f64> {
    if student.output_dim() != teacher.output_dim() {
        return Err(Error::dims("teacher output width", student.output_dim(), teacher.output_dim()));
    }
    if xs.is_empty() {
        return Err(Error::InvalidSpec("fidelity needs at least one input".into()));
    }
    let d = student.output_dim();
    let s = predicted_classes(&student.forward_batch(xs)?, d);
    let t = predicted_classes(&teacher.forward_batch(xs)?, d);
    Ok(s.iter().zip(&t).filter(|(a, b)| a == b).count() as f64 / xs.len() as f64)
}

/// Soft targets of a teacher on `xs` (see [`loss::teacher_soft_target`]).
pub fn teacher_soft_targets(teacher: &Checkpoint, xs: &[&[f64]], tau: f64) -> Result<TargetMatrix> {
    let d = teacher.output_dim();
    let logits = teacher.forward_batch(xs)?;
    let rows = par::map_range(xs.len(), |i| loss::teacher_soft_target(&logits[i * d..(i + 1) * d], tau));
    TargetMatrix::new(rows.concat(), xs.len(), d, TargetKind::Soft)
}
