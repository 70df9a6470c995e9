//! Training loop, checkpoint files and dataset loading.

mod common;

use std::fs;

use common::{rng, uniform};
use leafnet::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC};
use leafnet::data::{load_dataset, synth_dataset, Dataset, Sample};
use leafnet::image::write_netpbm;
use leafnet::layers::{ArchitectureBuilder, Graph, Mode, Op};
use leafnet::models::{ModelName, ModelSpec};
use leafnet::optim::{OptimizerConfig, Variant};
use leafnet::train::{
    evaluate, evaluate_graph, run_kfold, sweep, sweep_csv, train, train_on, EarlyStopping, Monitor,
    SweepGrid, TrainConfig, Trainer,
};
use leafnet::{Error, Image, Tensor};

fn toy_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelSpec::new(ModelName::Beannet, 3)
            .with_scales(vec![(32, 32)])
            .with_width(0.5),
        optimizer: OptimizerConfig::new(Variant::Adam, 1e-3),
        batch_size: 8,
        epochs,
        deterministic: true,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn toy_data() -> Dataset {
    synth_dataset(3, 10, (32, 32), 1).unwrap()
}

fn relative_drift(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / b.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn trained_checkpoint() -> (Checkpoint, Dataset) {
    let ds = toy_data();
    let all: Vec<usize> = (0..ds.len()).collect();
    let out = train_on(&toy_config(2), &ds, &all, &[]).unwrap();
    (out.last, ds)
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let (ckpt, ds) = trained_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.class_names, ckpt.class_names);
    assert_eq!(loaded.epoch, 2);
    assert!(loaded.restore_optimizer().unwrap().is_some());

    let x = leafnet::image::stack(&ds.samples()[..6].iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    let run = |c: &Checkpoint| {
        let mut g = c.graph().unwrap();
        g.set_mode(Mode::Infer);
        g.forward(&[("input_32x32", &x)]).unwrap()
    };
    // The saved tensors are f32, so compare against the f32-rounded original.
    let mut rounded = ckpt.clone();
    rounded.state.iter_mut().for_each(|t| *t = t.map(|v| v as f32 as f64));
    assert!(relative_drift(&run(&loaded), &run(&rounded)) <= 1e-12);
    assert!(relative_drift(&run(&loaded), &run(&ckpt)) <= 1e-6);
}

#[test]
fn checkpoint_errors_are_distinct() {
    let (ckpt, _) = trained_checkpoint();
    let bytes = ckpt.to_bytes().unwrap();

    let truncated = &bytes[..bytes.len() - 7];
    assert!(matches!(Checkpoint::from_bytes(truncated), Err(Error::CorruptHeader(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..5]), Err(Error::CorruptHeader(_))));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::CorruptHeader(_))));

    let mut version = bytes.clone();
    version[4..6].copy_from_slice(&9u16.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::UnknownVersion(9))));

    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[10..10 + len].to_vec()).unwrap();
    let entry = r#""name":"conv1.weight","shape":["#;
    let at = header.find(entry).unwrap() + entry.len();
    let mut tampered = header.clone();
    tampered.replace_range(at..at + 1, "7");
    let mut shaped = bytes[..6].to_vec();
    shaped.extend_from_slice(&(tampered.len() as u32).to_le_bytes());
    shaped.extend_from_slice(tampered.as_bytes());
    shaped.extend_from_slice(&bytes[10 + len..]);
    assert!(matches!(Checkpoint::from_bytes(&shaped), Err(Error::ShapeMismatch { .. })));

    let mut garbage = bytes[..10].to_vec();
    garbage[6..10].copy_from_slice(&3u32.to_le_bytes());
    garbage.extend_from_slice(b"{{{");
    assert!(matches!(Checkpoint::from_bytes(&garbage), Err(Error::CorruptHeader(_))));
    assert_eq!(&bytes[..4], MAGIC);
}

#[test]
fn one_epoch_runs_ceil_n_over_b_steps() {
    let ds = toy_data();
    let idx: Vec<usize> = (0..27).collect();
    let mut t = Trainer::new(&toy_config(1), &ds, &idx, &[27, 28, 29]).unwrap();
    let rec = t.run_epoch().unwrap().clone();
    assert_eq!(rec.epoch, 1);
    assert_eq!(rec.steps, 4);
    assert_eq!(rec.seconds, 0.0);
    assert!(rec.val_loss.is_some() && rec.val_acc.is_some());
    assert!(t.is_done());
    assert!(t.run_epoch().is_err());
    let out = t.finish();
    assert_eq!(out.history.len(), 1);
    let csv = out.history.to_csv().unwrap();
    assert!(csv.starts_with("epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds\n"));
}

#[test]
fn diverging_learning_rate_stops_early() {
    let ds = toy_data();
    let mut cfg = toy_config(40);
    cfg.optimizer.lr = 10.0;
    cfg.early_stopping = EarlyStopping { metric: Monitor::ValLoss, patience: 3 };
    let run = train(&cfg, &ds).unwrap();
    let h = &run.outcome.history;
    let stop = h.stopped_at.expect("early stopping should fire");
    assert!(stop < 40);
    assert_eq!(h.len(), stop);
    let best = h.best_epoch.unwrap();
    assert_eq!(stop - best, 3);
}

#[test]
fn training_is_deterministic() {
    let ds = toy_data();
    let mut cfg = toy_config(3);
    cfg.augment = leafnet::augment::AugmentConfig::standard(4);
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    assert_eq!(a.outcome.history, b.outcome.history);
    assert_eq!(a.outcome.last.to_bytes().unwrap(), b.outcome.last.to_bytes().unwrap());
}

#[test]
fn constant_model_confusion_matrix_matches_hand_count() {
    let mut b = ArchitectureBuilder::new();
    let x = b.input("input_2x2", &[1, 2, 2]).unwrap();
    let f = b.add("flatten", Op::Flatten, &[x]).unwrap();
    let d = b.add("classifier", Op::Dense { units: 3 }, &[f]).unwrap();
    let s = b.add("softmax", Op::Softmax, &[d]).unwrap();
    let mut g = Graph::new(b.build(s).unwrap(), 0).unwrap();
    g.set_param("classifier.weight", Tensor::zeros(vec![4, 3])).unwrap();
    g.set_param("classifier.bias", Tensor::new(vec![3], vec![0.0, 2.0, 1.0]).unwrap()).unwrap();
    let labels = [0, 1, 1, 2, 0];
    let mut r = rng(3);
    let samples = labels
        .iter()
        .map(|&label| Sample {
            image: Image::new(1, 2, 2, uniform(&mut r, &[4], 0.0, 1.0).into_data()).unwrap(),
            label,
            source: None,
        })
        .collect();
    let ds = Dataset::new(vec!["a".into(), "b".into(), "c".into()], samples).unwrap();
    let ev = evaluate_graph(&mut g, &ds, &[0, 1, 2, 3, 4], 2).unwrap();
    assert_eq!(ev.confusion.rows(), vec![vec![0, 2, 0], vec![0, 2, 0], vec![0, 1, 0]]);
    assert_eq!(ev.predictions, vec![1; 5]);
    assert!(ev.report.undefined.iter().any(|u| u.class == "a" && u.metric == "precision"));
}

#[test]
fn evaluate_rejects_class_mismatch() {
    let (ckpt, _) = trained_checkpoint();
    let other = synth_dataset(4, 2, (32, 32), 0).unwrap();
    assert!(evaluate(&ckpt, &other, &[0]).is_err());
}

#[test]
fn kfold_runs_every_fold() {
    let ds = toy_data();
    let mut cfg = toy_config(1);
    cfg.kfold = Some(2);
    let summary = run_kfold(&cfg, &ds, 2).unwrap();
    assert_eq!(summary.folds.len(), 2);
    let held: usize = summary.folds.iter().map(|f| f.evaluation.confusion.total() as usize).sum();
    assert_eq!(held, ds.len());
    assert!(summary.std.accuracy >= 0.0);
}

#[test]
fn single_cell_sweep_matches_plain_training() {
    let ds = toy_data();
    let cfg = toy_config(2);
    let grid = SweepGrid { optimizer: vec![Variant::Adam], lr: vec![1e-3], batch_size: vec![] };
    let rows = sweep(&cfg, &grid, &ds, 1).unwrap();
    assert_eq!(rows.len(), 1);
    let plain = train(&cfg, &ds).unwrap();
    assert_eq!(rows[0].history.as_ref(), Some(&plain.outcome.history));
    let csv = sweep_csv(&rows).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().contains(",ok,"));
}

#[test]
fn sweep_marks_failed_cells() {
    let ds = toy_data();
    let grid = SweepGrid { optimizer: vec![Variant::Sgd, Variant::Adam], lr: vec![], batch_size: vec![0, 8] };
    let rows = sweep(&toy_config(1), &grid, &ds, 2).unwrap();
    assert_eq!(rows.len(), 4);
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    assert_eq!(failed, 2);
    assert_eq!(sweep_csv(&rows).unwrap().matches("FAILED").count(), 2);
    assert!(sweep(&toy_config(1), &SweepGrid::default(), &ds, 1).is_err());
}

fn write_tree(root: &std::path::Path, counts: &[(&str, usize)]) {
    for (k, (name, n)) in counts.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..*n {
            let img = Image::filled(3, 4, 4, (k as f64 + 1.0) / 8.0);
            write_netpbm(&img, &dir.join(format!("{i:04}.ppm"))).unwrap();
        }
    }
}

#[test]
fn loads_folder_tree_with_bean_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), &[("healthy", 428), ("angular_leaf_spot", 432), ("bean_rust", 436)]);
    fs::write(dir.path().join("bean_rust/.hidden"), b"x").unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.class_names(), ["angular_leaf_spot", "bean_rust", "healthy"]);
    assert_eq!(ds.counts(), vec![432, 436, 428]);
}

#[test]
fn loads_manifest_and_keeps_empty_classes() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), &[("imgs", 3)]);
    fs::write(dir.path().join("manifest.csv"), "path,class\nimgs/0000.ppm,b\nimgs/0001.ppm,a\nimgs/0002.ppm,b\n").unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.class_names(), ["a", "b"]);
    assert_eq!(ds.counts(), vec![1, 2]);

    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), &[("a", 2), ("b", 0)]);
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.counts(), vec![2, 0]);
}

#[test]
fn undecodable_image_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), &[("a", 1)]);
    fs::write(dir.path().join("a/broken.ppm"), b"P6\nnot an image").unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Decode { path, .. }) => assert!(path.ends_with("broken.ppm")),
        other => panic!("expected a decode error, got {other:?}"),
    }
}

#[test]
fn history_csv_round_trip() {
    let ds = toy_data();
    let idx: Vec<usize> = (0..24).collect();
    let out = train_on(&toy_config(3), &ds, &idx, &[24, 25, 26, 27, 28, 29]).unwrap();
    let csv = out.history.to_csv().unwrap();
    let back = leafnet::train::History::from_csv(&csv).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in back.records.iter().zip(&out.history.records) {
        assert_eq!((a.epoch, a.train_loss, a.train_acc, a.val_loss, a.val_acc, a.lr), (b.epoch, b.train_loss, b.train_acc, b.val_loss, b.val_acc, b.lr));
    }
    assert_eq!(back.to_csv().unwrap(), csv);
    assert!(leafnet::train::History::from_csv("epoch,loss\n1,2\n").is_err());
}
