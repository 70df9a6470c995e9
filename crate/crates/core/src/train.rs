//! Training loop with early stopping, evaluation, the k-fold driver and the
//! hyperparameter sweep.

use std::borrow::Cow;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_sample, sample_rng, AugmentConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{balance_by_augmentation, kfold_split, split_dataset, BatchIter, Dataset};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::layers::{cross_entropy, Graph, Mode};
use crate::metrics::{classification_report_named, ConfusionMatrix, Report};
use crate::models::{as_feed, batch_inputs, build, ModelName, ModelSpec};
use crate::optim::{Optimizer, OptimizerConfig, Schedule, ScheduleKind, Variant};
use crate::tensor::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValLoss,
    ValAccuracy,
}

impl Monitor {
    fn improves(self, value: f64, best: f64) -> bool {
        match self {
            Monitor::ValLoss => value < best,
            Monitor::ValAccuracy => value > best,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopping {
    pub metric: Monitor,
    /// Consecutive epochs without improvement before stopping.
    pub patience: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping {
            metric: Monitor::ValLoss,
            patience: 3,
        }
    }
}

/// Patience bookkeeping, separated from the loop so it can be driven by
/// scripted metric sequences.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    rule: EarlyStopping,
    best: Option<f64>,
    bad_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(rule: EarlyStopping) -> Self {
        EarlyStopper {
            rule,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn update(&mut self, value: f64) -> Verdict {
        let improved = match self.best {
            None => !value.is_nan(),
            Some(b) => self.rule.metric.improves(value, b),
        };
        if improved {
            self.best = Some(value);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        Verdict {
            improved,
            stop: self.bad_epochs >= self.rule.patience,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub eta_min: f64,
    /// Annealing period in epochs; defaults to the epoch budget.
    pub period: Option<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Constant,
            eta_min: 0.0,
            period: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stopping: EarlyStopping,
    /// Applied on the fly to training batches.
    pub augment: AugmentConfig,
    /// Equalize class counts with augmented copies before splitting.
    pub balance: bool,
    /// `(train, val, test)` fractions.
    pub split: [f64; 3],
    pub kfold: Option<usize>,
    pub seed: u64,
    /// Record zero wall time so histories compare bitwise.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelSpec::new(ModelName::Beannet, 3),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            batch_size: 32,
            epochs: 100,
            early_stopping: EarlyStopping::default(),
            augment: AugmentConfig::identity(),
            balance: false,
            split: [0.8, 0.1, 0.1],
            kfold: None,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.early_stopping.patience == 0 {
            return Err(Error::invalid("early_stopping.patience must be at least 1"));
        }
        if self.kfold.is_some_and(|k| k < 2) {
            return Err(Error::invalid("kfold must be at least 2"));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(
            self.schedule.kind,
            self.optimizer.lr,
            self.schedule.eta_min,
            self.schedule.period.unwrap_or(self.epochs),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch at which early stopping fired.
    pub stopped_at: Option<usize>,
    pub best_epoch: Option<usize>,
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds`; missing
    /// validation values are empty fields.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "epoch",
            "train_loss",
            "train_acc",
            "val_loss",
            "val_acc",
            "lr",
            "seconds",
        ])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                opt_field(r.val_loss),
                opt_field(r.val_acc),
                r.lr.to_string(),
                r.seconds.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    /// Parses the output of [`History::to_csv`]. Step counts, the stop epoch
    /// and the best epoch are not part of the file and come back empty.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let expected = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr", "seconds"];
        if rdr.headers()?.iter().ne(expected) {
            return Err(Error::invalid(format!(
                "history header must be `{}`",
                expected.join(",")
            )));
        }
        let num = |row: &csv::StringRecord, i: usize| -> Result<Option<f64>> {
            match &row[i] {
                "" => Ok(None),
                v => v.parse().map(Some).map_err(|_| {
                    Error::invalid(format!("history field `{}` is not a number: `{v}`", expected[i]))
                }),
            }
        };
        let req = |row: &csv::StringRecord, i: usize| -> Result<f64> {
            num(row, i)?.ok_or_else(|| Error::invalid(format!("history field `{}` is empty", expected[i])))
        };
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            records.push(EpochRecord {
                epoch: row[0]
                    .parse()
                    .map_err(|_| Error::invalid(format!("history epoch `{}` is not an integer", &row[0])))?,
                train_loss: req(&row, 1)?,
                train_acc: req(&row, 2)?,
                val_loss: num(&row, 3)?,
                val_acc: num(&row, 4)?,
                lr: req(&row, 5)?,
                seconds: req(&row, 6)?,
                steps: 0,
            });
        }
        Ok(History {
            records,
            stopped_at: None,
            best_epoch: None,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    /// Median wall time per epoch.
    pub fn median_epoch_seconds(&self) -> f64 {
        let mut t: Vec<f64> = self.records.iter().map(|r| r.seconds).collect();
        if t.is_empty() {
            return 0.0;
        }
        t.sort_by(f64::total_cmp);
        let m = t.len() / 2;
        if t.len() % 2 == 1 {
            t[m]
        } else {
            0.5 * (t[m - 1] + t[m])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub report: Report,
    pub loss: f64,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.report.accuracy
    }
}

fn check_classes(graph: &Graph, ds: &Dataset) -> Result<()> {
    let out = &graph.arch().shapes()[graph.arch().output()];
    if out != &[ds.num_classes()] {
        return Err(Error::invalid(format!(
            "model predicts {out:?} classes but the dataset has {}",
            ds.num_classes()
        )));
    }
    Ok(())
}

/// Inference-mode pass over `indices` in order.
pub fn evaluate_graph(
    graph: &mut Graph,
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Evaluation> {
    check_classes(graph, ds)?;
    if indices.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty index set"));
    }
    let prev = graph.mode();
    graph.set_mode(Mode::Infer);
    let result = (|| {
        let mut cm = ConfusionMatrix::new(ds.num_classes());
        let mut predictions = Vec::with_capacity(indices.len());
        let mut loss_sum = 0.0;
        for batch in BatchIter::sequential(indices, batch_size)? {
            let images: Vec<&Image> = batch.iter().map(|&i| &ds.samples()[i].image).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| ds.samples()[i].label).collect();
            let inputs = batch_inputs(graph.arch(), &images)?;
            let probs = graph.forward(&as_feed(&inputs))?;
            let (loss, _) = cross_entropy(&probs, &labels)?;
            loss_sum += loss * batch.len() as f64;
            let k = probs.shape()[1];
            for (row, &t) in probs.data().chunks_exact(k).zip(&labels) {
                let p = argmax(row).unwrap_or(0);
                cm.record(t, p)?;
                predictions.push(p);
            }
        }
        let report = classification_report_named(&cm, ds.class_names())?;
        Ok(Evaluation {
            confusion: cm,
            report,
            loss: loss_sum / indices.len() as f64,
            predictions,
        })
    })();
    graph.set_mode(prev);
    result
}

/// Evaluates a checkpoint on `indices` of `ds`.
pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    if ckpt.num_classes() != ds.num_classes() {
        return Err(Error::invalid(format!(
            "checkpoint has {} classes but the dataset has {}",
            ckpt.num_classes(),
            ds.num_classes()
        )));
    }
    let mut graph = ckpt.graph()?;
    evaluate_graph(&mut graph, ds, indices, 32)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn at_batch(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFiniteValues(what) => Error::NonFinite { what, epoch, batch },
        e => e,
    }
}

/// One training run, advanced an epoch at a time.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    config_echo: serde_json::Value,
    ds: &'a Dataset,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    graph: Graph,
    opt: Optimizer,
    schedule: Schedule,
    stopper: EarlyStopper,
    history: History,
    best: Option<Checkpoint>,
    epoch: usize,
    stopped: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, ds: &'a Dataset, train_idx: &[usize], val_idx: &[usize]) -> Result<Self> {
        cfg.validate()?;
        if cfg.model.num_classes != ds.num_classes() {
            return Err(Error::invalid(format!(
                "model.num_classes is {} but the dataset has {} classes",
                cfg.model.num_classes,
                ds.num_classes()
            )));
        }
        if train_idx.is_empty() {
            return Err(Error::invalid("the training split is empty"));
        }
        let graph = build(&cfg.model)?;
        Ok(Trainer {
            config_echo: serde_json::to_value(cfg)?,
            cfg: cfg.clone(),
            ds,
            train_idx: train_idx.to_vec(),
            val_idx: val_idx.to_vec(),
            graph,
            opt: Optimizer::new(cfg.optimizer.clone())?,
            schedule: cfg.schedule()?,
            stopper: EarlyStopper::new(cfg.early_stopping),
            history: History::default(),
            best: None,
            epoch: 0,
            stopped: false,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.opt
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// True once the epoch budget is spent or early stopping fired.
    pub fn is_done(&self) -> bool {
        self.stopped || self.epoch >= self.cfg.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.graph,
            &self.cfg.model,
            self.ds.class_names(),
            Some(&self.opt),
            self.epoch,
            self.config_echo.clone(),
        )
    }

    fn batch_images(&self, batch: &[usize], epoch: usize) -> Result<Vec<Cow<'a, Image>>> {
        let aug = &self.cfg.augment;
        batch
            .iter()
            .map(|&i| {
                let img = &self.ds.samples()[i].image;
                if aug.is_identity() {
                    Ok(Cow::Borrowed(img))
                } else {
                    let mut rng = sample_rng(epoch_seed(aug.seed, epoch), i as u64);
                    Ok(Cow::Owned(augment_sample(img, aug, &mut rng)?))
                }
            })
            .collect()
    }

    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        if self.is_done() {
            return Err(Error::invalid("training already finished"));
        }
        let e = self.epoch;
        let number = e + 1;
        let lr = self.schedule.lr_at(e);
        let started = Instant::now();
        let steps_before = self.opt.steps();
        self.graph.set_mode(Mode::Train);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let batches = BatchIter::new(&self.train_idx, self.cfg.batch_size, self.cfg.seed, e as u64)?;
        for (b, batch) in batches.enumerate() {
            let bn = b + 1;
            let images = self.batch_images(&batch, e)?;
            let refs: Vec<&Image> = images.iter().map(|c| c.as_ref()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| self.ds.samples()[i].label).collect();
            let inputs = batch_inputs(self.graph.arch(), &refs)?;
            let probs = self
                .graph
                .forward(&as_feed(&inputs))
                .map_err(|err| at_batch(err, number, bn))?;
            let (loss, dlogits) = cross_entropy(&probs, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    epoch: number,
                    batch: bn,
                });
            }
            loss_sum += loss * batch.len() as f64;
            let k = probs.shape()[1];
            correct += probs
                .data()
                .chunks_exact(k)
                .zip(&labels)
                .filter(|(row, &t)| argmax(row) == Some(t))
                .count();
            let grads = self.graph.backward_logits(&dlogits)?;
            if !grads.params.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite {
                    what: "gradients",
                    epoch: number,
                    batch: bn,
                });
            }
            self.opt.step(&mut self.graph.params_mut(), &grads.params, lr)?;
            if !self.graph.params().iter().all(|p| p.is_finite()) {
                return Err(Error::NonFinite {
                    what: "parameters",
                    epoch: number,
                    batch: bn,
                });
            }
        }
        let n = self.train_idx.len() as f64;
        let (train_loss, train_acc) = (loss_sum / n, correct as f64 / n);

        let (val_loss, val_acc) = if self.val_idx.is_empty() {
            (None, None)
        } else {
            let batch = self.cfg.batch_size;
            let ev = evaluate_graph(&mut self.graph, self.ds, &self.val_idx, batch)
                .map_err(|err| at_batch(err, number, 0))?;
            (Some(ev.loss), Some(ev.accuracy()))
        };
        let monitored = match self.cfg.early_stopping.metric {
            Monitor::ValLoss => val_loss.unwrap_or(train_loss),
            Monitor::ValAccuracy => val_acc.unwrap_or(train_acc),
        };
        let verdict = self.stopper.update(monitored);
        let seconds = if self.cfg.deterministic {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        };
        self.epoch = number;
        self.history.records.push(EpochRecord {
            epoch: number,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            lr,
            seconds,
            steps: self.opt.steps() - steps_before,
        });
        if verdict.improved || self.best.is_none() {
            self.best = Some(self.checkpoint());
            self.history.best_epoch = Some(number);
        }
        if verdict.stop && number < self.cfg.epochs {
            self.stopped = true;
            self.history.stopped_at = Some(number);
        }
        log::info!(
            "epoch {number}: train loss {train_loss:.4} acc {train_acc:.4}{}",
            match (val_loss, val_acc) {
                (Some(l), Some(a)) => format!(", val loss {l:.4} acc {a:.4}"),
                _ => String::new(),
            }
        );
        Ok(self.history.records.last().expect("record just pushed"))
    }

    pub fn finish(self) -> TrainOutcome {
        let last = self.checkpoint();
        TrainOutcome {
            best: self.best.unwrap_or_else(|| last.clone()),
            last,
            history: self.history,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights at the best monitored epoch.
    pub best: Checkpoint,
    /// Weights after the final epoch.
    pub last: Checkpoint,
    pub history: History,
}

/// Trains on `train_idx`, validating on `val_idx`, until the epoch budget
/// or early stopping ends the run.
pub fn train_on(cfg: &TrainConfig, ds: &Dataset, train_idx: &[usize], val_idx: &[usize]) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg, ds, train_idx, val_idx)?;
    while !t.is_done() {
        t.run_epoch()?;
    }
    Ok(t.finish())
}

/// Dataset after optional balancing, as every driver below sees it.
pub fn prepare_dataset<'a>(cfg: &TrainConfig, ds: &'a Dataset) -> Result<Cow<'a, Dataset>> {
    if cfg.balance {
        Ok(Cow::Owned(balance_by_augmentation(ds, &cfg.augment, None)?))
    } else {
        Ok(Cow::Borrowed(ds))
    }
}

#[derive(Debug, Clone)]
pub struct SplitRun {
    pub outcome: TrainOutcome,
    pub split: crate::data::Split,
    /// The dataset the split indexes into (balanced when configured).
    pub dataset: Dataset,
}

/// Balances if configured, splits by `cfg.split` and trains on the train
/// part with the validation part for early stopping.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<SplitRun> {
    let ds = prepare_dataset(cfg, ds)?;
    let split = split_dataset(&ds, cfg.split, cfg.seed)?;
    let outcome = train_on(cfg, &ds, &split.train, &split.val)?;
    Ok(SplitRun {
        outcome,
        split,
        dataset: ds.into_owned(),
    })
}

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
pub fn parallel_map<T, R, F>(items: Vec<T>, jobs: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    if jobs <= 1 || n <= 1 {
        return items.into_iter().map(f).collect();
    }
    let queue: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let results: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let item = queue[i].lock().expect("queue lock").take().expect("item taken once");
                let r = f(item);
                *results[i].lock().expect("result lock") = Some(r);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().expect("result lock").expect("every item ran"))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub loss: f64,
}

impl MetricSummary {
    pub fn of(ev: &Evaluation) -> Self {
        MetricSummary {
            accuracy: ev.report.accuracy,
            macro_precision: ev.report.macro_avg.precision,
            macro_recall: ev.report.macro_avg.recall,
            macro_f1: ev.report.macro_avg.f1,
            weighted_f1: ev.report.weighted_avg.f1,
            loss: ev.loss,
        }
    }

    fn fields(&self) -> [f64; 6] {
        [
            self.accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.weighted_f1,
            self.loss,
        ]
    }

    fn from_fields(f: [f64; 6]) -> Self {
        MetricSummary {
            accuracy: f[0],
            macro_precision: f[1],
            macro_recall: f[2],
            macro_f1: f[3],
            weighted_f1: f[4],
            loss: f[5],
        }
    }
}

/// Per-metric mean and population standard deviation.
pub fn aggregate(items: &[MetricSummary]) -> (MetricSummary, MetricSummary) {
    if items.is_empty() {
        return (MetricSummary::default(), MetricSummary::default());
    }
    // Shifted by the first item so identical inputs give exactly zero spread.
    let n = items.len() as f64;
    let origin = items[0].fields();
    let mut shift = [0.0; 6];
    let mut square = [0.0; 6];
    for it in items {
        for (k, v) in it.fields().into_iter().enumerate() {
            let d = v - origin[k];
            shift[k] += d;
            square[k] += d * d;
        }
    }
    let mut mean = [0.0; 6];
    let mut var = [0.0; 6];
    for k in 0..6 {
        let m = shift[k] / n;
        mean[k] = origin[k] + m;
        var[k] = (square[k] / n - m * m).max(0.0);
    }
    (
        MetricSummary::from_fields(mean),
        MetricSummary::from_fields(var.map(f64::sqrt)),
    )
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub history: History,
    pub evaluation: Evaluation,
    pub best: Checkpoint,
}

#[derive(Debug, Clone)]
pub struct KfoldSummary {
    pub folds: Vec<FoldResult>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

/// Seed of fold `fold` derived from the run seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    epoch_seed(seed ^ 0xF01D_F01D, fold)
}

/// Stratified k-fold cross-validation: one independent run per fold,
/// evaluated on the fold's held-out part with its best weights.
pub fn run_kfold(cfg: &TrainConfig, ds: &Dataset, jobs: usize) -> Result<KfoldSummary> {
    let k = cfg
        .kfold
        .ok_or_else(|| Error::invalid("kfold is not set in the configuration"))?;
    cfg.validate()?;
    let ds = prepare_dataset(cfg, ds)?;
    let folds = kfold_split(&ds, k, cfg.seed)?;
    let ds: &Dataset = &ds;
    let runs = parallel_map(folds.into_iter().enumerate().collect(), jobs, |(f, fold)| {
        let mut fc = cfg.clone();
        fc.seed = fold_seed(cfg.seed, f);
        fc.model.seed = fold_seed(cfg.model.seed, f);
        let run = || -> Result<FoldResult> {
            let out = train_on(&fc, ds, &fold.train, &fold.val)?;
            let evaluation = evaluate(&out.best, ds, &fold.val)?;
            Ok(FoldResult {
                fold: f,
                seed: fc.seed,
                history: out.history,
                evaluation,
                best: out.best,
            })
        };
        run().map_err(|e| Error::Fold {
            fold: f,
            source: Box::new(e),
        })
    });
    let folds = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let metrics: Vec<MetricSummary> = folds.iter().map(|f| MetricSummary::of(&f.evaluation)).collect();
    let (mean, std) = aggregate(&metrics);
    Ok(KfoldSummary { folds, mean, std })
}

/// Settings varied by a sweep; an empty list keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub optimizer: Vec<Variant>,
    pub lr: Vec<f64>,
    pub batch_size: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub optimizer: Variant,
    pub lr: f64,
    pub batch_size: usize,
}

impl fmt::Display for SweepCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "optimizer={} lr={} batch_size={}",
            self.optimizer, self.lr, self.batch_size
        )
    }
}

impl SweepGrid {
    /// Cartesian product in optimizer, lr, batch-size order.
    pub fn cells(&self, base: &TrainConfig) -> Result<Vec<SweepCell>> {
        if self.optimizer.is_empty() && self.lr.is_empty() && self.batch_size.is_empty() {
            return Err(Error::invalid("sweep grid is empty"));
        }
        let or_base = |v: &[Variant]| if v.is_empty() { vec![base.optimizer.variant] } else { v.to_vec() };
        let lrs = if self.lr.is_empty() { vec![base.optimizer.lr] } else { self.lr.clone() };
        let bss = if self.batch_size.is_empty() {
            vec![base.batch_size]
        } else {
            self.batch_size.clone()
        };
        let mut cells = Vec::new();
        for optimizer in or_base(&self.optimizer) {
            for &lr in &lrs {
                for &batch_size in &bss {
                    cells.push(SweepCell {
                        optimizer,
                        lr,
                        batch_size,
                    });
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub cell: SweepCell,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    /// Median seconds per epoch.
    pub epoch_time: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub history: Option<History>,
}

/// One training run per grid cell with everything else held fixed. A failed
/// cell is recorded in its row and the sweep continues.
pub fn sweep(base: &TrainConfig, grid: &SweepGrid, ds: &Dataset, jobs: usize) -> Result<Vec<SweepRow>> {
    sweep_with(base, grid, ds, jobs, |_, _, _| Ok(()))
}

/// [`sweep`] that hands every finished run to `on_cell` together with its
/// cell index and the shared split; an error from `on_cell` fails the row.
pub fn sweep_with<F>(
    base: &TrainConfig,
    grid: &SweepGrid,
    ds: &Dataset,
    jobs: usize,
    on_cell: F,
) -> Result<Vec<SweepRow>>
where
    F: Fn(usize, &SweepCell, &TrainOutcome) -> Result<()> + Sync,
{
    let cells = grid.cells(base)?;
    let prepared = prepare_dataset(base, ds)?;
    let ds: &Dataset = &prepared;
    let split = split_dataset(ds, base.split, base.seed)?;
    let split = &split;
    let on_cell = &on_cell;
    Ok(parallel_map(cells.into_iter().enumerate().collect(), jobs, |(i, cell)| {
        let mut cfg = base.clone();
        cfg.optimizer.variant = cell.optimizer;
        cfg.optimizer.lr = cell.lr;
        cfg.batch_size = cell.batch_size;
        let setting = cell.to_string();
        let run = train_on(&cfg, ds, &split.train, &split.val)
            .and_then(|out| on_cell(i, &cell, &out).map(|()| out));
        match run {
            Ok(out) => {
                let last = out.history.last().cloned();
                SweepRow {
                    setting,
                    cell,
                    train_acc: last.as_ref().map(|r| r.train_acc),
                    val_acc: last.as_ref().and_then(|r| r.val_acc),
                    train_loss: last.as_ref().map(|r| r.train_loss),
                    val_loss: last.as_ref().and_then(|r| r.val_loss),
                    epoch_time: Some(out.history.median_epoch_seconds()),
                    error: None,
                    history: Some(out.history),
                }
            }
            Err(e) => {
                log::warn!("sweep cell `{setting}` failed: {e}");
                SweepRow {
                    setting,
                    cell,
                    train_acc: None,
                    val_acc: None,
                    train_loss: None,
                    val_loss: None,
                    epoch_time: None,
                    error: Some(e.to_string()),
                    history: None,
                }
            }
        }
    }))
}

/// `setting,train_acc,val_acc,train_loss,val_loss,epoch_time,status,error`
/// with `status` either `ok` or `FAILED`.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "setting",
        "train_acc",
        "val_acc",
        "train_loss",
        "val_loss",
        "epoch_time",
        "status",
        "error",
    ])?;
    for r in rows {
        w.write_record([
            r.setting.clone(),
            opt_field(r.train_acc),
            opt_field(r.val_acc),
            opt_field(r.train_loss),
            opt_field(r.val_loss),
            opt_field(r.epoch_time),
            if r.error.is_some() { "FAILED" } else { "ok" }.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(metric: Monitor, patience: usize, values: &[f64]) -> Option<usize> {
        let mut s = EarlyStopper::new(EarlyStopping { metric, patience });
        values
            .iter()
            .position(|&v| s.update(v).stop)
            .map(|i| i + 1)
    }

    #[test]
    fn early_stopping_fires_at_the_earliest_epoch() {
        assert_eq!(run(Monitor::ValLoss, 3, &[1.0, 1.1, 1.2, 1.3, 0.5]), Some(4));
        assert_eq!(run(Monitor::ValLoss, 3, &[1.0, 0.9, 0.8, 0.7]), None);
        assert_eq!(run(Monitor::ValLoss, 1, &[1.0, 1.0]), Some(2));
        assert_eq!(run(Monitor::ValAccuracy, 2, &[0.5, 0.6, 0.6, 0.55]), Some(4));
        assert_eq!(run(Monitor::ValLoss, 2, &[1.0, 1.1, 0.9, 1.0, 1.0]), Some(5));
    }

    #[test]
    fn aggregate_of_identical_items_has_zero_spread() {
        let m = MetricSummary {
            accuracy: 0.9,
            macro_precision: 0.8,
            macro_recall: 0.7,
            macro_f1: 0.75,
            weighted_f1: 0.85,
            loss: 0.3,
        };
        let (mean, std) = aggregate(&[m, m, m]);
        assert_eq!(mean.accuracy, 0.9);
        assert_eq!(std, MetricSummary::default());
    }

    #[test]
    fn sweep_grid_products() {
        let base = TrainConfig::default();
        let g = SweepGrid {
            optimizer: Variant::ALL.to_vec(),
            ..Default::default()
        };
        assert_eq!(g.cells(&base).unwrap().len(), 5);
        let g = SweepGrid {
            batch_size: vec![32, 64, 128],
            ..Default::default()
        };
        assert_eq!(g.cells(&base).unwrap().len(), 3);
        assert!(SweepGrid::default().cells(&base).is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let out = parallel_map((0..10).collect(), 3, |x: i32| x * x);
        assert_eq!(out, (0..10).map(|x| x * x).collect::<Vec<_>>());
    }
}
