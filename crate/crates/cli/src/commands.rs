//! The subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use leafnet::checkpoint::{load_checkpoint, Checkpoint};
use leafnet::data::{load_dataset, split_dataset, synth_dataset, Dataset};
use leafnet::gradcam::gradcam;
use leafnet::image::{load_image, save_image, write_netpbm};
use leafnet::layers::Mode;
use leafnet::metrics::Report;
use leafnet::models::{as_feed, batch_inputs};
use leafnet::optim::Variant;
use leafnet::tensor::argmax;
use leafnet::train::{
    evaluate, prepare_dataset, run_kfold, sweep_csv, sweep_with, train, Evaluation, History, SweepGrid,
    SweepRow, TrainConfig,
};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::config::{parse_flag_value, RunConfig, Values};
use crate::error::{CliResult, Failure, IoContext};
use crate::outputs::{write_run, Outputs, CURVES, HISTORY, MANIFEST};
use crate::plot::curves_svg;

/// Environment variable that forces single-threaded, zero-timing runs.
pub const DETERMINISTIC_ENV: &str = "LEAFNET_DETERMINISTIC";

pub fn deterministic_env() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"))
}

/// Flags shared by `train` and `sweep`.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Sets `train.seed`, `model.seed` and `augment.seed`.
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    /// Raw `KEY=VALUE` pairs.
    pub set: Vec<String>,
}

impl Overrides {
    fn entries(&self) -> CliResult<Vec<(String, Value)>> {
        let mut e = Vec::new();
        for raw in &self.set {
            let (k, v) = raw.split_once('=').ok_or_else(|| {
                Failure::user("config", format!("--set expects KEY=VALUE, got `{raw}`"))
            })?;
            e.push((k.trim().to_string(), parse_flag_value(v.trim())));
        }
        let path = |p: &Path| Value::String(p.to_string_lossy().into_owned());
        if let Some(d) = &self.data {
            e.push(("data.root".into(), path(d)));
        }
        if let Some(o) = &self.out {
            e.push(("output.dir".into(), path(o)));
        }
        if let Some(s) = self.seed {
            let s = i64::try_from(s)
                .map_err(|_| Failure::user("config", format!("--seed {s} exceeds {}", i64::MAX)))?;
            for k in ["train.seed", "model.seed", "augment.seed"] {
                e.push((k.into(), Value::Integer(s)));
            }
        }
        if let Some(n) = self.epochs {
            e.push(("train.epochs".into(), Value::Integer(n as i64)));
        }
        Ok(e)
    }
}

/// Defaults, then the file, then the flags.
pub fn load_config(path: Option<&Path>, ov: &Overrides) -> CliResult<RunConfig> {
    let mut v = Values::defaults();
    if let Some(p) = path {
        v.apply_file(p)?;
    }
    v.apply_flags(ov.entries()?)?;
    let mut cfg = RunConfig::resolve(&v)?;
    if deterministic_env() {
        cfg.train.deterministic = true;
    }
    Ok(cfg)
}

fn effective_jobs(jobs: usize) -> usize {
    if deterministic_env() {
        1
    } else {
        jobs.max(1)
    }
}

fn load_data(root: &Path) -> CliResult<Dataset> {
    if !root.is_dir() {
        return Err(Failure::user(
            "data",
            format!("data directory {} does not exist", root.display()),
        ));
    }
    let ds = load_dataset(root)?;
    if ds.is_empty() {
        return Err(Failure::user("data", format!("no images under {}", root.display())));
    }
    Ok(ds)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

#[derive(Serialize)]
struct EvalJson<'a> {
    split: &'a str,
    samples: usize,
    loss: f64,
    report: &'a Report,
    confusion_matrix: Vec<Vec<u64>>,
}

fn eval_json(split: &str, ev: &Evaluation) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(&EvalJson {
        split,
        samples: ev.predictions.len(),
        loss: ev.loss,
        report: &ev.report,
        confusion_matrix: ev.confusion.rows(),
    })?)
}

pub fn cmd_train(config: &Path, ov: &Overrides, jobs: usize) -> CliResult<()> {
    let mut cfg = load_config(Some(config), ov)?;
    let ds = load_data(&cfg.data_root)?;
    cfg.bind_classes(ds.num_classes())?;
    let out = Outputs::create(&cfg.out_dir)?;
    let tc = &cfg.train;

    if tc.kfold.is_some() {
        let summary = run_kfold(tc, &ds, effective_jobs(jobs))?;
        let mut text = String::from("fold,accuracy,macro_f1,loss,best_epoch,epochs\n");
        for f in &summary.folds {
            let sub = format!("fold_{}", f.fold + 1);
            out.dir(&out.root().join(&sub))?;
            f.history.write_csv(&out.file(Path::new(&sub).join(HISTORY)))?;
            leafnet::checkpoint::save_checkpoint(&f.best, &out.file(Path::new(&sub).join("best.ckpt")))?;
            out.write(Path::new(&sub).join(CURVES), curves_svg(&f.history))?;
            let _ = writeln!(
                text,
                "{},{:.4},{:.4},{:.4},{},{}",
                f.fold + 1,
                f.evaluation.report.accuracy,
                f.evaluation.report.macro_avg.f1,
                f.evaluation.loss,
                f.history.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                f.history.len()
            );
        }
        let manifest = &summary.folds[0].best.manifest;
        out.write(MANIFEST, manifest.to_json()?)?;
        out.write("kfold.csv", &text)?;
        out.write(
            "kfold.json",
            serde_json::to_string_pretty(&serde_json::json!({
                "folds": summary.folds.len(),
                "mean": summary.mean,
                "std": summary.std,
            }))?,
        )?;
        print!("{text}");
        println!(
            "accuracy {:.4} ± {:.4} over {} folds",
            summary.mean.accuracy,
            summary.std.accuracy,
            summary.folds.len()
        );
        out.commit();
        return Ok(());
    }

    let run = train(tc, &ds)?;
    let o = &run.outcome;
    write_run(&out, "", &o.history, &o.best, &o.last)?;
    if !run.split.test.is_empty() {
        let ev = evaluate(&o.best, &run.dataset, &run.split.test)?;
        out.write("test_report.json", eval_json("test", &ev)?)?;
        out.write("test_report.txt", ev.report.to_text())?;
        println!("test accuracy {:.4} on {} images", ev.accuracy(), run.split.test.len());
    }
    let last = o.history.last().expect("at least one epoch ran");
    println!(
        "trained {} epochs{}: train acc {:.4} loss {:.4}, val acc {} loss {}",
        o.history.len(),
        o.history
            .stopped_at
            .map(|e| format!(" (early stop at {e})"))
            .unwrap_or_default(),
        last.train_acc,
        last.train_loss,
        fmt_opt(last.val_acc),
        fmt_opt(last.val_loss)
    );
    println!("artifacts in {}", out.root().display());
    out.commit();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

/// Indices of `which` under the split recorded in the checkpoint.
fn split_indices(ckpt: &Checkpoint, ds: &Dataset, which: SplitChoice) -> CliResult<(Dataset, Vec<usize>)> {
    if which == SplitChoice::All {
        return Ok((ds.clone(), (0..ds.len()).collect()));
    }
    let cfg: TrainConfig = serde_json::from_value(ckpt.config.clone()).map_err(|e| {
        Failure::user(
            "checkpoint",
            format!("checkpoint does not record its training configuration: {e}"),
        )
    })?;
    let ds = prepare_dataset(&cfg, ds)?.into_owned();
    let split = split_dataset(&ds, cfg.split, cfg.seed)?;
    let idx = match which {
        SplitChoice::Train => split.train,
        SplitChoice::Val => split.val,
        _ => split.test,
    };
    if idx.is_empty() {
        return Err(Failure::user(
            "data",
            format!("the {which:?} split is empty for this data").to_lowercase(),
        ));
    }
    Ok((ds, idx))
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, which: SplitChoice, format: Format, out: Option<&Path>) -> CliResult<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = load_data(data)?;
    if ckpt.num_classes() != ds.num_classes() {
        return Err(Failure::user(
            "data",
            format!(
                "checkpoint has {} classes but {} has {}",
                ckpt.num_classes(),
                data.display(),
                ds.num_classes()
            ),
        ));
    }
    if ckpt.class_names != ds.class_names() {
        log::warn!(
            "class names differ: checkpoint {:?}, data {:?}",
            ckpt.class_names,
            ds.class_names()
        );
    }
    let (ds, idx) = split_indices(&ckpt, &ds, which)?;
    let ev = evaluate(&ckpt, &ds, &idx)?;
    let split = format!("{which:?}").to_lowercase();
    let text = match format {
        Format::Json => eval_json(&split, &ev)? + "\n",
        Format::Csv => ev.confusion.to_csv(ds.class_names()),
        Format::Text => {
            let mut s = format!("split: {split} ({} images), loss {:.4}\n\n", idx.len(), ev.loss);
            s.push_str(&ev.report.to_text());
            s.push_str("\nconfusion matrix (rows: true, columns: predicted)\n");
            s.push_str(&ev.confusion.to_csv(ds.class_names()));
            s
        }
    };
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).at(parent)?;
            }
            std::fs::write(p, text).at(p)?
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Grid file: lists of settings, each empty list keeping the base value.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GridFile {
    optimizer: Vec<String>,
    lr: Vec<f64>,
    batch_size: Vec<usize>,
}

fn load_grid(path: &Path) -> CliResult<SweepGrid> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::user("config", format!("{}: {e}", path.display())))?;
    let g: GridFile = toml::from_str(&text)
        .map_err(|e| Failure::user("config", format!("{}: {}", path.display(), e.message())))?;
    let optimizer = g
        .optimizer
        .iter()
        .map(|s| s.parse::<Variant>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::user("config", e.to_string()))?;
    let grid = SweepGrid {
        optimizer,
        lr: g.lr,
        batch_size: g.batch_size,
    };
    if grid.optimizer.is_empty() && grid.lr.is_empty() && grid.batch_size.is_empty() {
        return Err(Failure::user(
            "config",
            format!("sweep grid {} is empty", path.display()),
        ));
    }
    Ok(grid)
}

fn cell_dir(i: usize, row: &leafnet::train::SweepCell) -> String {
    format!("cell_{:02}_{}_lr{}_bs{}", i + 1, row.optimizer, row.lr, row.batch_size)
}

/// Best row by validation accuracy, then validation loss, then training
/// accuracy; earlier rows win ties.
pub fn best_row(rows: &[SweepRow]) -> Option<usize> {
    let key = |r: &SweepRow| {
        (
            r.val_acc.unwrap_or(f64::NEG_INFINITY),
            -r.val_loss.unwrap_or(f64::INFINITY),
            r.train_acc.unwrap_or(f64::NEG_INFINITY),
        )
    };
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate().filter(|(_, r)| r.error.is_none()) {
        if best.is_none_or(|b| key(r).partial_cmp(&key(&rows[b])) == Some(std::cmp::Ordering::Greater)) {
            best = Some(i);
        }
    }
    best
}

pub fn cmd_sweep(config: &Path, grid: &Path, ov: &Overrides, jobs: usize) -> CliResult<()> {
    let mut cfg = load_config(Some(config), ov)?;
    let grid = load_grid(grid)?;
    let cells = grid.cells(&cfg.train)?;
    let ds = load_data(&cfg.data_root)?;
    cfg.bind_classes(ds.num_classes())?;
    let out = Outputs::create(&cfg.out_dir)?;
    for (i, c) in cells.iter().enumerate() {
        out.file(cell_dir(i, c));
    }
    let rows = sweep_with(&cfg.train, &grid, &ds, effective_jobs(jobs), |i, cell, o| {
        write_run(&out, cell_dir(i, cell), &o.history, &o.best, &o.last)
            .map_err(|f| leafnet::Error::Io(std::io::Error::other(f.message)))
    })?;
    out.write("sweep.csv", sweep_csv(&rows)?)?;
    for r in &rows {
        match &r.error {
            None => println!(
                "{:<48} train acc {} val acc {} train loss {} val loss {}",
                r.setting,
                fmt_opt(r.train_acc),
                fmt_opt(r.val_acc),
                fmt_opt(r.train_loss),
                fmt_opt(r.val_loss)
            ),
            Some(e) => println!("{:<48} FAILED: {e}", r.setting),
        }
    }
    match best_row(&rows) {
        Some(b) => {
            println!("best setting: {}", rows[b].setting);
            out.commit();
            Ok(())
        }
        None => Err(Failure::user("sweep", "every sweep cell failed")),
    }
}

pub struct GradcamArgs<'a> {
    pub checkpoint: &'a Path,
    pub image: &'a Path,
    pub class: Option<usize>,
    pub layer: Option<&'a str>,
    pub alpha: f64,
    pub out: &'a Path,
}

pub fn cmd_gradcam(a: &GradcamArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(Failure::user("invalid", format!("--alpha {} is outside [0, 1]", a.alpha)));
    }
    let ckpt = load_checkpoint(a.checkpoint)?;
    let img = load_image(a.image)?;
    let k = ckpt.num_classes();
    if let Some(c) = a.class.filter(|&c| c >= k) {
        return Err(Failure::user(
            "invalid",
            format!("--class {c} is out of range for {k} classes"),
        ));
    }
    let mut graph = ckpt.graph()?;
    graph.set_mode(Mode::Infer);
    let inputs = batch_inputs(graph.arch(), &[&img])?;
    let probs = graph.forward(&as_feed(&inputs))?;
    let predicted = argmax(probs.data()).unwrap_or(0);
    let hm = gradcam(&mut graph, &img, a.class, a.layer)?;
    let name = |i: usize| ckpt.class_names.get(i).cloned().unwrap_or_else(|| i.to_string());

    let out = Outputs::create(a.out)?;
    write_netpbm(&hm.to_image(), &out.file("heatmap.pgm"))?;
    let overlay = hm.overlay(&img, a.alpha)?;
    let overlay_name = if cfg!(feature = "codecs") { "overlay.png" } else { "overlay.ppm" };
    save_image(&overlay, &out.file(overlay_name))?;
    out.write(
        "gradcam.json",
        serde_json::to_string_pretty(&serde_json::json!({
            "image": a.image,
            "predicted": predicted,
            "predicted_name": name(predicted),
            "probability": probs.data()[predicted],
            "target": hm.target,
            "target_name": name(hm.target),
            "target_probability": probs.data()[hm.target],
            "layer": hm.layer,
            "gradient_of": hm.gradient_of,
            "height": hm.height,
            "width": hm.width,
        }))? + "\n",
    )?;
    println!("predicted class {} ({predicted}) probability {:.4}", name(predicted), probs.data()[predicted]);
    if hm.target != predicted {
        println!(
            "target class {} ({}) probability {:.4}",
            name(hm.target),
            hm.target,
            probs.data()[hm.target]
        );
    }
    println!("heat map from layer `{}` at {}x{}", hm.layer, hm.height, hm.width);
    out.commit();
    Ok(())
}

pub fn cmd_synth(out_dir: &Path, classes: usize, per_class: usize, size: usize, seed: u64) -> CliResult<()> {
    if out_dir.read_dir().is_ok_and(|mut d| d.next().is_some()) {
        return Err(Failure::user(
            "io",
            format!("{} exists and is not empty", out_dir.display()),
        ));
    }
    let ds = synth_dataset(classes, per_class, (size, size), seed)?;
    let out = Outputs::create(out_dir)?;
    let mut counters = vec![0usize; ds.num_classes()];
    for s in ds.samples() {
        let class = &ds.class_names()[s.label];
        out.dir(&out.root().join(class))?;
        let n = counters[s.label];
        counters[s.label] += 1;
        write_netpbm(&s.image, &out.file(Path::new(class).join(format!("{n:04}.ppm"))))?;
    }
    println!(
        "wrote {} images in {} classes to {}",
        ds.len(),
        ds.num_classes(),
        out_dir.display()
    );
    out.commit();
    Ok(())
}

pub fn cmd_report(run: &Path) -> CliResult<()> {
    let path = run.join(HISTORY);
    let history = History::read_csv(&path).map_err(|e| {
        Failure::user("data", format!("{}: {e}", path.display()))
    })?;
    if history.is_empty() {
        return Err(Failure::user("data", format!("{} has no epochs", path.display())));
    }
    std::fs::write(run.join(CURVES), curves_svg(&history)).at(&run.join(CURVES))?;
    let best = history
        .records
        .iter()
        .filter(|r| r.val_loss.is_some())
        .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).expect("finite losses"));
    let last = history.last().expect("non-empty");
    println!(
        "{} epochs; final train acc {:.4} loss {:.4}, val acc {} loss {}",
        history.len(),
        last.train_acc,
        last.train_loss,
        fmt_opt(last.val_acc),
        fmt_opt(last.val_loss)
    );
    if let Some(b) = best {
        println!(
            "lowest val loss {} at epoch {} (val acc {})",
            fmt_opt(b.val_loss),
            b.epoch,
            fmt_opt(b.val_acc)
        );
    }
    println!("curves written to {}", run.join(CURVES).display());
    Ok(())
}
