use crate::bounds::{self, BoundReport};
use crate::data::{self, encode_targets, make_split, random_targets, LabeledDataset, TargetKind};
use crate::distill::{self, LossKind, RunArtifact, TeacherTrajectory};
use crate::error::{Error, Result};
use crate::kernel_machine::{
    adjusted_complexity, evaluate, ridge_solve, supervision_complexity, ComplexityReport, KernelRidgeConfig,
};
use crate::linalg;
use crate::model::{self, Checkpoint};
use crate::ntk::{batch_kernel, cross_kernel, ntk_similarity as ntk_sim};
use crate::par;
use crate::rng;

use super::config::ExperimentConfig;
use super::report::{Cell, Table};
use super::RunReport;

const COMPLEXITY_COLUMNS: [&str; 8] = [
    "epoch",
    "target_kind",
    "raw",
    "adjusted",
    "adjusted_star",
    "normalized",
    "trace_k",
    "jitter",
];

fn seed_for(cfg: &ExperimentConfig, label: &str, index: u64) -> u64 {
    rng::derive_index(rng::derive_seed(cfg.seed, label), index)
}

fn datasets(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    make_split(&cfg.synthetic_spec(), cfg.data.n_test)
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub run: RunArtifact,
    pub trajectory: TeacherTrajectory,
}

impl TeacherRun {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        &self.run.final_checkpoint
    }

    /// Checkpoint after `epoch` epochs, clamped to `1..=epochs`.
    pub fn at_epoch(&self, epoch: usize) -> &Checkpoint {
        let e = epoch.clamp(1, self.run.epoch_checkpoints.len());
        &self.run.epoch_checkpoints[e - 1]
    }
}

/// Train the `index`-th teacher of a config on labels with cross-entropy.
pub fn train_teacher(
    cfg: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    index: u64,
) -> Result<TeacherRun> {
    let spec = cfg.teacher.spec(seed_for(cfg, "teacher/init", index));
    let tc = cfg
        .teacher_train_section()
        .to_train_config(train.len(), seed_for(cfg, "teacher/order", index));
    let run = distill::train(model::init(&spec)?, train, Some(test), &LossKind::Ce, None, &tc)?;
    let trajectory = run.trajectory()?;
    Ok(TeacherRun { run, trajectory })
}

struct Student {
    spec: model::MlpSpec,
    train_cfg: distill::TrainConfig,
}

fn student(cfg: &ExperimentConfig, n: usize, index: u64) -> Student {
    Student {
        spec: cfg.student.spec(seed_for(cfg, "student/init", index)),
        train_cfg: cfg.train.to_train_config(n, seed_for(cfg, "student/order", index)),
    }
}

/// Loss of the label-only baseline that matches the distillation loss family.
fn baseline_loss(kd: &LossKind) -> LossKind {
    match kd {
        LossKind::KdMse { .. } => LossKind::Mse,
        _ => LossKind::Ce,
    }
}

fn with_tau(kind: &LossKind, tau: f64) -> LossKind {
    match *kind {
        LossKind::KdCe { .. } => LossKind::KdCe { tau },
        LossKind::KdMse { .. } => LossKind::KdMse { tau },
        LossKind::Mixture { alpha, .. } => LossKind::Mixture { tau, alpha },
        other => other,
    }
}

fn label_targets(ds: &LabeledDataset, d_out: usize) -> Result<Vec<f64>> {
    let kind = if d_out == 1 { TargetKind::SignedBinary } else { TargetKind::OneHot };
    Ok(encode_targets(ds, kind)?.into_values())
}

fn soft_targets(teacher: &Checkpoint, xs: &[&[f64]], tau: f64) -> Result<Vec<f64>> {
    Ok(distill::teacher_soft_targets(teacher, xs, tau)?.into_values())
}

fn named_metrics(run: &RunArtifact, name: &str) -> Table {
    let mut t = run.metrics_table();
    t.name = name.to_string();
    t
}

fn complexity_row(table: &mut Table, epoch: usize, kind: &str, r: &ComplexityReport) {
    table.push(vec![
        Cell::Int(epoch as i64),
        Cell::Text(kind.to_string()),
        Cell::Float(r.raw),
        Cell::Float(r.adjusted),
        Cell::Float(r.adjusted_star),
        Cell::Float(r.normalized),
        Cell::Float(r.trace_k),
        Cell::Float(r.jitter_used),
    ]);
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub(super) fn complexity_curve(cfg: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
    let p = &cfg.params;
    let (train, test) = datasets(cfg)?;
    let teacher = train_teacher(cfg, &train, &test, 0)?;
    let st = student(cfg, train.len(), 0);
    let init = model::init(&st.spec)?;
    let run = distill::train(init.clone(), &train, Some(&test), &p.student_loss, None, &st.train_cfg)?;

    let eval = test.head(p.complexity_examples)?;
    let xs = eval.rows();
    let m = xs.len();
    let d_out = cfg.student.output_dim();
    let random_kind = if d_out == 1 { TargetKind::SignedBinary } else { TargetKind::OneHot };
    let random = random_targets(m, d_out, random_kind, seed_for(cfg, "random_labels", 0))?.into_values();
    let labels = label_targets(&eval, d_out)?;
    let offline = soft_targets(teacher.final_checkpoint(), &xs, p.tau)?;

    let epochs: Vec<usize> = if p.eval_epochs.is_empty() {
        (0..=cfg.train.epochs).collect()
    } else {
        p.eval_epochs.clone()
    };
    let mut table = Table::new("complexity", &COMPLEXITY_COLUMNS);
    let mut cond = Table::new("ntk_condition", &["epoch", "condition_number"]);
    let mut random_ge_labels = true;
    let mut online_le_offline_epoch1 = None;
    for &e in &epochs {
        let ckpt = if e == 0 { &init } else { &run.epoch_checkpoints[e - 1] };
        let k = batch_kernel(ckpt, &xs)?.base;
        let f0 = ckpt.forward_batch(&xs)?;
        let online = soft_targets(teacher.at_epoch(e), &xs, p.tau)?;
        let mut targets: Vec<(&str, Vec<f64>)> = vec![
            ("random_labels", random.clone()),
            ("dataset_labels", labels.clone()),
            ("offline_teacher", offline.clone()),
            ("online_teacher", online),
        ];
        if p.average_window > 0 {
            let te = e.clamp(1, teacher.trajectory.len());
            let t = teacher.trajectory.times()[te - 1];
            let avg = distill::average_teacher_predictions(&teacher.trajectory, t, p.average_window, &xs, p.tau)?;
            targets.push(("averaged_teacher", avg.into_values()));
        }
        let reports: Vec<(&str, ComplexityReport)> = targets
            .iter()
            .map(|(name, y)| Ok((*name, adjusted_complexity(&k, y, &f0, m)?)))
            .collect::<Result<_>>()?;
        for (name, r) in &reports {
            complexity_row(&mut table, e, name, r);
        }
        let get = |name: &str| reports.iter().find(|(n, _)| *n == name).map(|(_, r)| r.adjusted).unwrap_or(f64::NAN);
        random_ge_labels &= get("random_labels") >= get("dataset_labels");
        if e == 1 {
            online_le_offline_epoch1 = Some(get("online_teacher") <= get("offline_teacher"));
        }
        cond.push(vec![Cell::Int(e as i64), Cell::Float(linalg::condition_number(&k))]);
    }
    report.note("random_ge_labels_every_epoch", random_ge_labels);
    if let Some(v) = online_le_offline_epoch1 {
        report.note("online_le_offline_epoch1", v);
    }
    report.tables.push(table);
    report.tables.push(cond);
    report.tables.push(named_metrics(&teacher.run, "teacher_metrics"));
    report.tables.push(named_metrics(&run, "student_metrics"));
    Ok(())
}

pub(super) fn temperature_sweep(cfg: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
    let p = &cfg.params;
    let (train, test) = datasets(cfg)?;
    let teacher = train_teacher(cfg, &train, &test, 0)?;
    let st = student(cfg, train.len(), 0);
    let init = model::init(&st.spec)?;
    let run = distill::train(init.clone(), &train, Some(&test), &p.student_loss, None, &st.train_cfg)?;
    let epoch = p.temperature_epoch.unwrap_or(cfg.train.epochs);
    let ckpt = if epoch == 0 { &init } else { &run.epoch_checkpoints[epoch - 1] };

    let eval = test.head(p.complexity_examples)?;
    let xs = eval.rows();
    let k = batch_kernel(ckpt, &xs)?.base;
    let f0 = ckpt.forward_batch(&xs)?;
    let mut table = Table::new(
        "temperature",
        &["tau", "target_norm", "raw", "adjusted", "adjusted_star", "normalized", "trace_k", "jitter"],
    );
    let mut taus = p.taus.clone();
    taus.sort_by(f64::total_cmp);
    let mut norms = Vec::with_capacity(taus.len());
    let mut adjusted = Vec::with_capacity(taus.len());
    for &tau in &taus {
        let y = soft_targets(teacher.final_checkpoint(), &xs, tau)?;
        let r = adjusted_complexity(&k, &y, &f0, xs.len())?;
        let norm = linalg::norm2(&y);
        norms.push(norm);
        adjusted.push(r.adjusted);
        table.push(vec![
            Cell::Float(tau),
            Cell::Float(norm),
            Cell::Float(r.raw),
            Cell::Float(r.adjusted),
            Cell::Float(r.adjusted_star),
            Cell::Float(r.normalized),
            Cell::Float(r.trace_k),
            Cell::Float(r.jitter_used),
        ]);
    }
    report.note("epoch", epoch);
    report.note("target_norm_strictly_decreasing", norms.windows(2).all(|w| w[1] < w[0]));
    report.note("adjusted_non_increasing", adjusted.windows(2).all(|w| w[1] <= w[0]));
    report.tables.push(table);
    report.tables.push(named_metrics(&teacher.run, "teacher_metrics"));
    report.tables.push(named_metrics(&run, "student_metrics"));
    Ok(())
}

struct SeedRuns {
    teacher_acc: f64,
    no_kd: RunArtifact,
    offline: RunArtifact,
    online: RunArtifact,
}

pub(super) fn online_vs_offline(cfg: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
    let p = &cfg.params;
    let (train, test) = datasets(cfg)?;
    let results = par::map_range(p.num_seeds, |s| -> Result<SeedRuns> {
        let s64 = s as u64;
        let teacher = train_teacher(cfg, &train, &test, s64)?;
        let st = student(cfg, train.len(), s64);
        let no_kd = distill::train(
            model::init(&st.spec)?,
            &train,
            Some(&test),
            &baseline_loss(&p.kd_loss),
            None,
            &st.train_cfg,
        )?;
        let offline =
            distill::run_offline_kd(&st.spec, teacher.final_checkpoint(), &train, Some(&test), &p.kd_loss, &st.train_cfg)?;
        let online =
            distill::run_online_kd(&st.spec, &teacher.trajectory, &train, Some(&test), &p.kd_loss, &st.train_cfg, 1)?;
        Ok(SeedRuns {
            teacher_acc: teacher.run.final_test_acc().unwrap_or(f64::NAN),
            no_kd,
            offline,
            online,
        })
    });
    let mut table = Table::new("online_vs_offline", &["seed", "teacher", "no_kd", "offline", "online"]);
    let mut cols: [Vec<f64>; 3] = Default::default();
    let mut metrics = Vec::new();
    for (s, r) in results.into_iter().enumerate() {
        let r = r?;
        let accs = [&r.no_kd, &r.offline, &r.online].map(|a| a.final_test_acc().unwrap_or(f64::NAN));
        for (c, a) in cols.iter_mut().zip(accs) {
            c.push(a);
        }
        table.push(vec![
            Cell::Int(s as i64),
            Cell::Float(r.teacher_acc),
            Cell::Float(accs[0]),
            Cell::Float(accs[1]),
            Cell::Float(accs[2]),
        ]);
        for (name, run) in [("no_kd", &r.no_kd), ("offline", &r.offline), ("online", &r.online)] {
            metrics.push(named_metrics(run, &format!("metrics_seed{s}_{name}")));
        }
    }
    report.note_float("mean_no_kd", mean(&cols[0]));
    report.note_float("mean_offline", mean(&cols[1]));
    report.note_float("mean_online", mean(&cols[2]));
    report.note("online_ge_offline", mean(&cols[2]) >= mean(&cols[1]));
    report.tables.push(table);
    report.tables.extend(metrics);
    Ok(())
}

pub(super) fn ntk_similarity(cfg: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
    let p = &cfg.params;
    let (train, test) = datasets(cfg)?;
    let xs_ds = train.head(p.similarity_examples)?;
    let xs = xs_ds.rows();
    let mut variants: Vec<(String, LossKind, Option<bool>)> = vec![("no_kd".into(), baseline_loss(&p.kd_loss), None)];
    for &tau in &p.taus {
        variants.push((format!("offline_tau{tau}"), with_tau(&p.kd_loss, tau), Some(false)));
        variants.push((format!("online_tau{tau}"), with_tau(&p.kd_loss, tau), Some(true)));
    }
    let teachers: Vec<TeacherRun> = par::map_range(p.num_seeds, |s| train_teacher(cfg, &train, &test, s as u64))
        .into_iter()
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..p.num_seeds)
        .flat_map(|s| (0..variants.len()).map(move |v| (s, v)))
        .collect();
    let rows = par::map_slice(&jobs, |&(s, v)| -> Result<Vec<Cell>> {
        let teacher = &teachers[s];
        let st = student(cfg, train.len(), s as u64);
        let (name, kind, online) = &variants[v];
        let run = match online {
            None => distill::train(model::init(&st.spec)?, &train, Some(&test), kind, None, &st.train_cfg)?,
            Some(false) => {
                distill::run_offline_kd(&st.spec, teacher.final_checkpoint(), &train, Some(&test), kind, &st.train_cfg)?
            }
            Some(true) => {
                distill::run_online_kd(&st.spec, &teacher.trajectory, &train, Some(&test), kind, &st.train_cfg, 1)?
            }
        };
        let est = ntk_sim(
            &run.final_checkpoint,
            teacher.final_checkpoint(),
            &xs,
            p.num_probes,
            seed_for(cfg, "probe", s as u64),
        )?;
        let fid = distill::fidelity(&run.final_checkpoint, teacher.final_checkpoint(), &xs)?;
        Ok(vec![
            Cell::Text(format!("seed{s}/{name}")),
            Cell::Float(est.mean),
            Cell::Float(est.std_error),
            Cell::Float(fid),
            Cell::Float(run.final_test_acc().unwrap_or(f64::NAN)),
        ])
    });
    let mut table = Table::new("similarity", &["run_id", "ntk_sim_mean", "ntk_sim_se", "fidelity", "test_acc"]);
    for r in rows {
        table.push(r?);
    }
    report.note("runs", table.len());
    report.tables.push(table);
    Ok(())
}

/// One resampled dataset of the bound validity experiment.
#[derive(Debug, Clone)]
pub struct BoundTrial {
    pub trial: u64,
    pub bound: BoundReport,
    pub complexity: f64,
    pub train_error: f64,
    pub test_error: f64,
}

impl BoundTrial {
    pub fn valid(&self) -> bool {
        self.bound.total >= self.test_error
    }
}

fn sign_error(predictions: &[f64], labels: &[usize]) -> f64 {
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(f, &l)| (**f > 0.0) != (l == 1))
        .count();
    wrong as f64 / labels.len() as f64
}

struct KernelFit {
    k: linalg::SymMatrix,
    train_predictions: Vec<f64>,
    test_predictions: Vec<f64>,
    complexity: f64,
    trace: f64,
    kappa: f64,
}

fn fit_kernel_machine(
    cfg: &ExperimentConfig,
    anchor: &Checkpoint,
    xs: &[&[f64]],
    targets: &[f64],
    test_xs: &[&[f64]],
) -> Result<KernelFit> {
    let k = batch_kernel(anchor, xs)?.base;
    let ridge = match cfg.params.lambda {
        Some(l) => KernelRidgeConfig::new(l)?,
        None => KernelRidgeConfig::interpolating(&k),
    };
    let sol = ridge_solve(&k, targets, &ridge)?;
    let test_predictions = evaluate(&sol, &cross_kernel(anchor, test_xs, xs)?, None)?;
    let pooled: Vec<&[f64]> = xs.iter().chain(test_xs).copied().collect();
    Ok(KernelFit {
        complexity: supervision_complexity(&k, targets)?,
        trace: linalg::trace(&k),
        kappa: bounds::estimate_kappa(anchor, &pooled)?,
        train_predictions: sol.train_predictions,
        test_predictions,
        k,
    })
}

/// Fit the anchor-NTK kernel machine to `±1` labels of a freshly sampled
/// dataset and compare the best margin bound over the γ grid with the
/// held-out error.
pub fn bound_trial(cfg: &ExperimentConfig, anchor: &Checkpoint, trial: u64) -> Result<BoundTrial> {
    let spec = cfg.synthetic_spec_for(seed_for(cfg, "bound/data", trial));
    let (train, test) = make_split(&spec, cfg.data.n_test)?;
    let y = label_targets(&train, 1)?;
    let xs = train.rows();
    let fit = fit_kernel_machine(cfg, anchor, &xs, &y, &test.rows())?;
    let n = xs.len();
    let bound = bounds::best_over_gammas(&bounds::gamma_grid(), cfg.params.delta, |mp| {
        bounds::binary_bound(&fit.train_predictions, &y, fit.complexity, fit.trace, fit.kappa, n, mp)
    })?;
    Ok(BoundTrial {
        trial,
        bound,
        complexity: fit.complexity,
        train_error: sign_error(&fit.train_predictions, train.labels()),
        test_error: sign_error(&fit.test_predictions, test.labels()),
    })
}

pub(super) fn bound_check(cfg: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
    let p = &cfg.params;
    let anchor = model::init(&cfg.student.spec(seed_for(cfg, "anchor", 0)))?;
    let trials = par::map_range(p.trials, |i| bound_trial(cfg, &anchor, i as u64));
    let mut table = Table::new(
        "bound_trials",
        &[
            "trial",
            "gamma",
            "empirical_margin_term",
            "complexity_term",
            "confidence_term",
            "total",
            "kappa",
            "m0",
            "complexity",
            "train_error",
            "test_error",
            "valid",
        ],
    );
    let (mut valid, mut finite) = (0usize, 0usize);
    for t in trials {
        let t = t?;
        valid += usize::from(t.valid());
        finite += usize::from(t.bound.total.is_finite());
        let b = &t.bound;
        table.push(vec![
            Cell::Int(t.trial as i64),
            Cell::Float(b.gamma),
            Cell::Float(b.empirical_margin_term),
            Cell::Float(b.complexity_term),
            Cell::Float(b.confidence_term),
            Cell::Float(b.total),
            Cell::Float(b.kappa),
            Cell::Int(b.m0 as i64),
            Cell::Float(t.complexity),
            Cell::Float(t.train_error),
            Cell::Float(t.test_error),
            Cell::Int(i64::from(t.valid())),
        ]);
    }
    report.note("trials", p.trials);
    report.note("valid", valid);
    report.note("finite_bounds", finite);
    report.note_float("valid_fraction", valid as f64 / p.trials as f64);
    report.tables.push(table);
    if p.distillation_bound {
        let t = distillation_bound_table(cfg, &anchor, report)?;
        report.tables.push(t);
    }
    Ok(())
}

/// The distillation bound on the first trial's data: a trained teacher
/// network supplies soft targets, the anchor-NTK kernel machine is the
/// student. One half of the held-out set estimates the teacher risk, the
/// other half the student risk.
fn distillation_bound_table(cfg: &ExperimentConfig, anchor: &Checkpoint, report: &mut RunReport) -> Result<Table> {
    let p = &cfg.params;
    let spec = cfg.synthetic_spec_for(seed_for(cfg, "bound/data", 0));
    let (train, test) = make_split(&spec, cfg.data.n_test)?;
    let half = test.len() / 2;
    if half == 0 {
        return Err(Error::InvalidSpec("distillation bound needs at least two held-out examples".into()));
    }
    let risk_split = test.subset(&(0..half).collect::<Vec<_>>())?;
    let eval_split = test.subset(&(half..test.len()).collect::<Vec<_>>())?;
    let teacher = train_teacher(cfg, &train, &risk_split, 0)?;
    let g = teacher.final_checkpoint();
    let teacher_risk = 1.0 - distill::accuracy(g, &risk_split)?;
    let xs = train.rows();
    let soft = data::soft_binary_targets(&g.forward_batch(&xs)?, p.tau)?.into_values();
    let fit = fit_kernel_machine(cfg, anchor, &xs, &soft, &eval_split.rows())?;
    let n = xs.len();
    let bound = bounds::best_over_gammas(&bounds::gamma_grid(), p.delta, |mp| {
        bounds::distillation_bound(teacher_risk, &fit.train_predictions, &soft, fit.complexity, fit.trace, fit.kappa, n, mp)
    })?;
    let student_risk = sign_error(&fit.test_predictions, eval_split.labels());
    debug_assert_eq!(fit.k.order(), n);
    let mut t = Table::new(
        "distillation_bound",
        &[
            "gamma",
            "teacher_risk",
            "empirical_margin_term",
            "complexity_term",
            "confidence_term",
            "total",
            "student_risk",
            "holds",
        ],
    );
    let holds = student_risk <= bound.total;
    t.push(vec![
        Cell::Float(bound.gamma),
        Cell::Float(teacher_risk),
        Cell::Float(bound.empirical_margin_term),
        Cell::Float(bound.complexity_term),
        Cell::Float(bound.confidence_term),
        Cell::Float(bound.total),
        Cell::Float(student_risk),
        Cell::Int(i64::from(holds)),
    ]);
    report.note("distillation_bound_holds", holds);
    Ok(t)
}

pub(super) fn checkpoint_frequency(cfg: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
    let p = &cfg.params;
    let (train, test) = datasets(cfg)?;
    let teachers: Vec<TeacherRun> = par::map_range(p.num_seeds, |s| train_teacher(cfg, &train, &test, s as u64))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut periods = p.periods.clone();
    periods.sort_unstable();
    periods.dedup();
    let jobs: Vec<(usize, usize)> = periods
        .iter()
        .flat_map(|&per| (0..p.num_seeds).map(move |s| (per, s)))
        .collect();
    let rows = par::map_slice(&jobs, |&(per, s)| -> Result<(usize, usize, usize, f64)> {
        let st = student(cfg, train.len(), s as u64);
        let traj = &teachers[s].trajectory;
        let run = distill::run_online_kd(&st.spec, traj, &train, Some(&test), &p.kd_loss, &st.train_cfg, per)?;
        Ok((per, s, traj.thinned(per)?.len(), run.final_test_acc().unwrap_or(f64::NAN)))
    });
    let mut table = Table::new("checkpoint_frequency", &["period", "seed", "num_checkpoints", "test_acc"]);
    let mut by_period: Vec<(usize, Vec<f64>)> = periods.iter().map(|&p| (p, Vec::new())).collect();
    for r in rows {
        let (per, s, count, acc) = r?;
        table.push(vec![
            Cell::Int(per as i64),
            Cell::Int(s as i64),
            Cell::Int(count as i64),
            Cell::Float(acc),
        ]);
        if let Some((_, v)) = by_period.iter_mut().find(|(q, _)| *q == per) {
            v.push(acc);
        }
    }
    for (per, accs) in &by_period {
        report.note_float(&format!("mean_test_acc_period_{per}"), mean(accs));
    }
    report.tables.push(table);
    Ok(())
}

pub(super) fn alpha_sweep(cfg: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
    let p = &cfg.params;
    let (train, test) = datasets(cfg)?;
    let tau = p.kd_loss.tau().unwrap_or(p.tau);
    let teachers: Vec<TeacherRun> = par::map_range(p.num_seeds, |s| train_teacher(cfg, &train, &test, s as u64))
        .into_iter()
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..p.alphas.len())
        .flat_map(|a| (0..p.num_seeds).map(move |s| (a, s)))
        .collect();
    let rows = par::map_slice(&jobs, |&(a, s)| -> Result<Vec<Cell>> {
        let alpha = p.alphas[a];
        let st = student(cfg, train.len(), s as u64);
        let kind = LossKind::Mixture { tau, alpha };
        let run =
            distill::run_offline_kd(&st.spec, teachers[s].final_checkpoint(), &train, Some(&test), &kind, &st.train_cfg)?;
        Ok(vec![
            Cell::Float(alpha),
            Cell::Int(s as i64),
            Cell::Float(run.final_test_acc().unwrap_or(f64::NAN)),
        ])
    });
    let mut table = Table::new("alpha_sweep", &["alpha", "seed", "test_acc"]);
    for r in rows {
        table.push(r?);
    }
    for (a, &alpha) in p.alphas.iter().enumerate() {
        let accs: Vec<f64> = table
            .rows
            .iter()
            .skip(a * p.num_seeds)
            .take(p.num_seeds)
            .filter_map(|r| r[2].as_f64())
            .collect();
        report.note_float(&format!("mean_test_acc_alpha_{alpha}"), mean(&accs));
    }
    report.tables.push(table);
    Ok(())
}
