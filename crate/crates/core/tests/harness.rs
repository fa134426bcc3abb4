//! Config errors, CSV emission and the teacher artifact directory.

use std::fs;

use kdlab::data::{LabeledDataset, Split};
use kdlab::harness::{self, Cell, Recipe, Table};
use kdlab::model;
use kdlab::Error;

const SMALL: &str = r#"
recipe = "complexity_curve"
seed = 5

[data]
family = "gaussian_blobs"
n = 48
n_test = 40
d = 3
p = 4
noise = 0.4

[teacher]
layer_widths = [4, 24, 3]
activation = "tanh"

[student]
layer_widths = [4, 8, 3]
activation = "tanh"

[train]
epochs = 3
lr = 0.05
batch_size = 16

[params]
complexity_examples = 12
"#;

#[test]
fn config_errors_are_classified() {
    let cases = [
        SMALL.replace("seed = 5", "seed = \"five\""),
        SMALL.replace("epochs = 3", "epoch = 3"),
        SMALL.replace("lr = 0.05", "lr = 0.0"),
        SMALL.replace("layer_widths = [4, 8, 3]", "layer_widths = [4, 8, 2]"),
        SMALL.replace("family = \"gaussian_blobs\"", "family = \"spirals\""),
        SMALL.replace("complexity_examples = 12", "complexity_examples = 0"),
        SMALL.replace("[params]", "[paramz]"),
        "recipe = \"bound_check\"".to_string(),
    ];
    for text in &cases {
        let err = harness::parse_config(text).expect_err(text);
        assert!(err.is_config_error(), "{err}");
        assert!(matches!(err, Error::Parse { .. } | Error::Validation { .. }), "{err}");
    }
    assert!(harness::parse_config(SMALL).is_ok());
}

#[test]
fn empty_table_emits_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let t = Table::new("empty", &["epoch", "target_kind", "raw"]);
    let path = dir.path().join("empty.csv");
    harness::emit_csv(&t, &path).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "epoch,target_kind,raw\n");
}

#[test]
fn infinities_reparse() {
    let mut t = Table::new("t", &["kind", "raw"]);
    t.push(vec![Cell::Text("random".into()), Cell::Float(f64::INFINITY)]);
    t.push(vec![Cell::Text("labels".into()), Cell::Float(0.1 + 0.2)]);
    let text = t.to_csv_string().unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let parsed: Vec<f64> = r.records().map(|rec| rec.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(parsed, vec![f64::INFINITY, 0.1 + 0.2]);
}

#[test]
fn recipe_emission_is_reproducible() {
    let cfg = harness::parse_config(SMALL).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    harness::emit(&harness::run_recipe(&cfg).unwrap(), a.path()).unwrap();
    harness::emit(&harness::run_recipe(&cfg).unwrap(), b.path()).unwrap();
    let complexity = fs::read_to_string(a.path().join("complexity.csv")).unwrap();
    assert!(complexity.starts_with("epoch,target_kind,raw,adjusted,adjusted_star,normalized,trace_k,jitter\n"));
    assert!(complexity.lines().count() > 1);
    for entry in fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let x = fs::read(a.path().join(&name)).unwrap();
        let y = fs::read(b.path().join(&name)).unwrap();
        assert_eq!(x, y, "{name:?}");
    }
    // emitting again into the same directory leaves the bytes unchanged
    harness::emit(&harness::run_recipe(&cfg).unwrap(), a.path()).unwrap();
    assert_eq!(fs::read_to_string(a.path().join("complexity.csv")).unwrap(), complexity);
}

#[test]
fn teacher_artifacts_load() {
    let cfg = harness::parse_config(SMALL).unwrap();
    assert_eq!(cfg.recipe, Recipe::ComplexityCurve);
    let dir = tempfile::tempdir().unwrap();
    let report = harness::train_teacher_artifacts(&cfg, dir.path()).unwrap();
    harness::emit(&report, dir.path()).unwrap();

    let metrics = fs::read_to_string(dir.path().join("teacher_metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,step,loss,train_acc,test_acc,teacher_time\n"));

    let train = LabeledDataset::read_csv(&dir.path().join("train.csv"), 3, Split::Train, cfg.seed).unwrap();
    assert_eq!((train.len(), train.input_dim()), (48, 4));
    let header = fs::read_to_string(dir.path().join("test.csv")).unwrap();
    assert!(header.starts_with("x0,x1,x2,x3,label\n"));

    let manifest = fs::read_to_string(dir.path().join("teacher_trajectory.csv")).unwrap();
    let mut r = csv::Reader::from_reader(manifest.as_bytes());
    let rows: Vec<_> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    let mut last_step = 0u64;
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), i + 1);
        let step: u64 = row[1].parse().unwrap();
        assert!(step > last_step);
        last_step = step;
        let c = model::load(&dir.path().join(&row[2])).unwrap();
        assert_eq!(c.spec.layer_widths, vec![4, 24, 3]);
        let out = c.forward_batch(&train.rows()).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }
}
