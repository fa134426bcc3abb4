//! Seeded synthetic classification tasks and label/target transformations.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianBlobs,
    TwoRings,
    XorGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub family: Family,
    /// Number of examples.
    pub n: usize,
    /// Number of classes.
    pub d: usize,
    /// Input dimension.
    pub p: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Inputs (row-major `n × p`) with hard labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<f64>,
    n: usize,
    p: usize,
    hard_labels: Vec<usize>,
    num_classes: usize,
    pub split_tag: Split,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn new(
        inputs: Vec<f64>,
        p: usize,
        hard_labels: Vec<usize>,
        num_classes: usize,
        split_tag: Split,
        seed: u64,
    ) -> Result<Self> {
        let n = hard_labels.len();
        if n == 0 {
            return Err(Error::InvalidSpec("dataset must contain at least one example".into()));
        }
        if p == 0 {
            return Err(Error::InvalidSpec("input dimension must be positive".into()));
        }
        if inputs.len() != n * p {
            return Err(Error::dims("dataset inputs", n * p, inputs.len()));
        }
        if let Some(&bad) = hard_labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                num_classes,
            });
        }
        Ok(Self {
            inputs,
            n,
            p,
            hard_labels,
            num_classes,
            split_tag,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn input_dim(&self) -> usize {
        self.p
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.p..(i + 1) * self.p]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    /// Inputs as a vector of row slices.
    pub fn rows(&self) -> Vec<&[f64]> {
        self.inputs.chunks(self.p).collect()
    }

    pub fn labels(&self) -> &[usize] {
        &self.hard_labels
    }

    /// Sub-dataset holding the given example indices, in order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(idx.len() * self.p);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            inputs.extend_from_slice(self.input(i));
            labels.push(self.hard_labels[i]);
        }
        Self::new(inputs, self.p, labels, self.num_classes, self.split_tag, self.seed)
    }

    /// First `k` examples (or all, if fewer).
    pub fn head(&self, k: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..k.min(self.n)).collect();
        self.subset(&idx)
    }

    /// Write as CSV with header `x0,...,x{p-1},label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.p).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.n {
            let mut rec: Vec<String> = self.input(i).iter().map(|x| x.to_string()).collect();
            rec.push(self.hard_labels[i].to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    /// Read a CSV written by [`LabeledDataset::write_csv`].
    pub fn read_csv(path: &Path, num_classes: usize, split_tag: Split, seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let p = header.len().saturating_sub(1);
        let well_formed = header.iter().last() == Some("label")
            && header.iter().take(p).enumerate().all(|(j, h)| h == format!("x{j}"));
        if !well_formed {
            return Err(Error::Format(format!("unexpected dataset header in {}", path.display())));
        }
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for j in 0..p {
                inputs.push(parse_field::<f64>(&rec[j], path)?);
            }
            labels.push(parse_field::<usize>(&rec[p], path)?);
        }
        Self::new(inputs, p, labels, num_classes, split_tag, seed)
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, path: &Path) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad field `{s}` in {}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    OneHot,
    SignedBinary,
    Soft,
    Random,
}

/// Row-major `n × d` target values (`d = 1` for signed binary targets).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    values: Vec<f64>,
    n: usize,
    d: usize,
    pub kind: TargetKind,
}

impl TargetMatrix {
    pub fn new(values: Vec<f64>, n: usize, d: usize, kind: TargetKind) -> Result<Self> {
        if values.len() != n * d {
            return Err(Error::dims("target values", n * d, values.len()));
        }
        Ok(Self { values, n, d, kind })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    /// Flattened example-major values, the layout used by block kernels.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Row-wise argmax, ties broken toward the lowest index. For one column,
    /// positive values map to class 1.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.n)
            .map(|i| {
                let r = self.row(i);
                if self.d == 1 {
                    usize::from(r[0] > 0.0)
                } else {
                    argmax(r)
                }
            })
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Generate a seeded synthetic task. Labels are stratified (class of the
/// `i`-th draw is `i mod d`) and then shuffled; inputs are standardized per
/// coordinate.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    if spec.p < 2 {
        return Err(Error::InvalidSpec(format!("input dimension p={} must be >= 2", spec.p)));
    }
    if spec.d < 2 || spec.n < spec.d {
        return Err(Error::InvalidSpec(format!(
            "need n >= d >= 2, got n={}, d={}",
            spec.n, spec.d
        )));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::InvalidSpec("noise must be non-negative".into()));
    }
    if spec.family == Family::TwoRings && spec.d != 2 {
        return Err(Error::InvalidSpec(format!("two_rings requires d=2, got d={}", spec.d)));
    }
    let mut rng = rng::seeded(spec.seed);
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.d).collect();
    labels.shuffle(&mut rng);
    let mut inputs = vec![0.0; spec.n * spec.p];
    match spec.family {
        Family::GaussianBlobs => {
            let means: Vec<Vec<f64>> = (0..spec.d)
                .map(|_| rng::normal_vec(&mut rng, spec.p).into_iter().map(|x| 2.0 * x).collect())
                .collect();
            for (i, &c) in labels.iter().enumerate() {
                for j in 0..spec.p {
                    inputs[i * spec.p + j] = means[c][j] + spec.noise * rng::normal(&mut rng);
                }
            }
        }
        Family::TwoRings => {
            for (i, &c) in labels.iter().enumerate() {
                let angle = rng.random::<f64>() * std::f64::consts::TAU;
                let radius = (1.0 + c as f64) + spec.noise * rng::normal(&mut rng);
                inputs[i * spec.p] = radius * angle.cos();
                inputs[i * spec.p + 1] = radius * angle.sin();
                for j in 2..spec.p {
                    inputs[i * spec.p + j] = spec.noise * rng::normal(&mut rng);
                }
            }
        }
        Family::XorGrid => {
            // g×g checkerboard, cell (a, b) has class (a + b) mod d; every
            // grid row contains each class once.
            let g = spec.d;
            for (i, &c) in labels.iter().enumerate() {
                let a = rng.random_range(0..g);
                let b = (c + g - a) % g;
                let u: f64 = rng.random_range(-0.4..0.4);
                let v: f64 = rng.random_range(-0.4..0.4);
                inputs[i * spec.p] = a as f64 + 0.5 + u + spec.noise * rng::normal(&mut rng);
                inputs[i * spec.p + 1] = b as f64 + 0.5 + v + spec.noise * rng::normal(&mut rng);
                for j in 2..spec.p {
                    inputs[i * spec.p + j] = spec.noise * rng::normal(&mut rng);
                }
            }
        }
    }
    standardize(&mut inputs, spec.n, spec.p);
    LabeledDataset::new(inputs, spec.p, labels, spec.d, Split::Train, spec.seed)
}

/// Generate one task and split it into `(train, test)` with `n_test` held-out
/// examples drawn from the same distribution.
pub fn make_split(spec: &SyntheticSpec, n_test: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    let full = make_synthetic(&SyntheticSpec {
        n: spec.n + n_test,
        ..spec.clone()
    })?;
    let train_idx: Vec<usize> = (0..spec.n).collect();
    let test_idx: Vec<usize> = (spec.n..spec.n + n_test).collect();
    let train = full.subset(&train_idx)?;
    let mut test = full.subset(&test_idx)?;
    test.split_tag = Split::Test;
    Ok((train, test))
}

fn standardize(inputs: &mut [f64], n: usize, p: usize) {
    for j in 0..p {
        let mean = (0..n).map(|i| inputs[i * p + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (inputs[i * p + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        let scale = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
        for i in 0..n {
            inputs[i * p + j] = (inputs[i * p + j] - mean) * scale;
        }
    }
}

/// Merge classes: labels below `boundary` become 0, the rest 1.
pub fn binarize_labels(ds: &LabeledDataset, boundary: usize) -> Result<LabeledDataset> {
    if boundary == 0 || boundary >= ds.num_classes {
        return Err(Error::InvalidSpec(format!(
            "boundary {boundary} must lie in (0, {})",
            ds.num_classes
        )));
    }
    let labels = ds.hard_labels.iter().map(|&l| usize::from(l >= boundary)).collect();
    LabeledDataset::new(ds.inputs.clone(), ds.p, labels, 2, ds.split_tag, ds.seed)
}

pub fn encode_targets(ds: &LabeledDataset, kind: TargetKind) -> Result<TargetMatrix> {
    let n = ds.len();
    match kind {
        TargetKind::OneHot => {
            let d = ds.num_classes;
            let mut v = vec![0.0; n * d];
            for (i, &l) in ds.hard_labels.iter().enumerate() {
                v[i * d + l] = 1.0;
            }
            TargetMatrix::new(v, n, d, TargetKind::OneHot)
        }
        TargetKind::SignedBinary => {
            if ds.num_classes != 2 {
                return Err(Error::InvalidSpec(format!(
                    "signed binary targets need 2 classes, dataset has {}",
                    ds.num_classes
                )));
            }
            let v = ds.hard_labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
            TargetMatrix::new(v, n, 1, TargetKind::SignedBinary)
        }
        other => Err(Error::InvalidSpec(format!("cannot encode labels as {other:?}"))),
    }
}

/// Labels drawn independently of any inputs.
pub fn random_targets(n: usize, d: usize, kind: TargetKind, seed: u64) -> Result<TargetMatrix> {
    let mut rng = rng::seeded(seed);
    match kind {
        TargetKind::SignedBinary => {
            let v = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            Ok(TargetMatrix::new(v, n, 1, TargetKind::Random)?)
        }
        TargetKind::OneHot => {
            if d == 0 {
                return Err(Error::InvalidSpec("one-hot targets need d >= 1".into()));
            }
            let mut v = vec![0.0; n * d];
            for i in 0..n {
                v[i * d + rng.random_range(0..d)] = 1.0;
            }
            Ok(TargetMatrix::new(v, n, d, TargetKind::Random)?)
        }
        other => Err(Error::InvalidSpec(format!("cannot draw random {other:?} targets"))),
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `2·sigmoid(logit/τ) − 1` per example.
pub fn soft_binary_targets(logits: &[f64], tau: f64) -> Result<TargetMatrix> {
    if !(tau > 0.0) {
        return Err(Error::InvalidSpec(format!("temperature must be positive, got {tau}")));
    }
    // tanh(z/2) == 2σ(z) − 1, without cancellation near zero
    let v = logits.iter().map(|&g| (g / (2.0 * tau)).tanh()).collect();
    TargetMatrix::new(v, logits.len(), 1, TargetKind::Soft)
}

/// Row-wise `softmax(logits/τ)` for `n × d` logits.
pub fn soft_multiclass_targets(logits: &[f64], d: usize, tau: f64) -> Result<TargetMatrix> {
    if !(tau > 0.0) {
        return Err(Error::InvalidSpec(format!("temperature must be positive, got {tau}")));
    }
    if d == 0 || logits.len() % d != 0 {
        return Err(Error::dims("soft targets logits", d, logits.len()));
    }
    let mut v = Vec::with_capacity(logits.len());
    for row in logits.chunks(d) {
        v.extend(softmax_scaled(row, tau));
    }
    TargetMatrix::new(v, logits.len() / d, d, TargetKind::Soft)
}

/// Numerically stable `softmax(z/τ)`.
pub fn softmax_scaled(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|&x| ((x - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub(crate) fn shuffled_indices(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
