//! Training recipe, evaluation, metrics, throughput and ablation suites.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, EmotionClass, Sample};
use crate::error::{Error, Result};
use crate::model::{flops_estimate, param_count, Dbfem, InputShape, ModelConfig, Variant};
use crate::optim::AdamState;
use crate::tensor::{Precision, Real, Tensor};

/// Evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Per-class seeded shuffle, a fixed fraction held out.
    #[default]
    HoldoutStratified,
    /// Leave one subject out; confusion matrices are summed over folds.
    Loso,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holdout_stratified" | "holdout" => Ok(Split::HoldoutStratified),
            "loso" | "LOSO" => Ok(Split::Loso),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected holdout_stratified or loso)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub decay_step: usize,
    pub gamma: f64,
    pub seed: u64,
    pub split: Split,
    pub precision: Precision,
    /// Held-out share of each class for the holdout split.
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 500,
            lr0: 1e-3,
            decay_step: 100,
            gamma: 0.9,
            seed: 0,
            split: Split::HoldoutStratified,
            precision: Precision::Single,
            test_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, why: &str| Err(Error::Config(format!("train.{f}: {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", "must be positive");
        }
        if self.decay_step == 0 {
            return bad("decay_step", "must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma", "must be positive");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction", "must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Step-decayed learning rate: `lr0 * gamma^floor(epoch / decay_step)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.decay_step.max(1)) as i32;
    cfg.lr0 * cfg.gamma.powi(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the epoch's samples.
    pub loss: f64,
    /// Accuracy of the pre-update predictions seen during the epoch.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Dbfem<T>,
    pub history: Vec<EpochStats>,
    /// Loss of the very first mini-batch, before any update.
    pub first_batch_loss: Option<f64>,
}

fn inputs<T>(variant: Variant, batch: &Batch<T>) -> (Option<&Tensor<T>>, Option<&Tensor<T>>) {
    (
        variant.uses_global().then_some(&batch.global),
        variant.uses_local().then_some(&batch.regions),
    )
}

fn check_labels(data: &[Sample], classes: usize) -> Result<()> {
    if let Some(s) = data.iter().find(|s| s.label.index() >= classes) {
        return Err(Error::InvalidArgument(format!(
            "sample `{}` has class {} but the model has {classes} classes",
            s.sample_id,
            s.label.index()
        )));
    }
    Ok(())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains a freshly initialised model (seeded by `cfg.seed`) with Adam and
/// the step schedule.
pub fn train<T: Real>(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &[Sample]) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    check_labels(data, model_cfg.num_classes)?;
    let mut model = Dbfem::<T>::new(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(model.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let variant = model_cfg.variant;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut first_batch_loss = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::<T>::gather(data, chunk)?;
            let (g, r) = inputs(variant, &batch);
            let (loss, logits, grads) = model.loss_and_grads(g, r, &batch.labels)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            first_batch_loss.get_or_insert(loss);
            loss_sum += loss * chunk.len() as f64;
            let k = logits.shape()[1];
            correct += logits
                .data()
                .chunks(k)
                .zip(&batch.labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            adam.step(model.params_mut().tensors_mut(), &grads, lr)?;
        }
        history.push(EpochStats {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(TrainOutcome {
        model,
        history,
        first_batch_loss,
    })
}

const EVAL_BATCH: usize = 32;

/// Predicted class per sample.
pub fn predict<T: Real>(model: &Dbfem<T>, data: &[Sample]) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = Batch::<T>::gather(data, chunk)?;
        let (g, r) = inputs(model.config().variant, &batch);
        let logits = model.logits(g, r)?;
        let k = logits.shape()[1];
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

/// Confusion matrix of `model` on `data`.
pub fn evaluate<T: Real>(model: &Dbfem<T>, data: &[Sample]) -> Result<ConfusionMatrix> {
    let classes = model.config().num_classes;
    check_labels(data, classes)?;
    let mut cm = ConfusionMatrix::new(classes);
    for (s, p) in data.iter().zip(predict(model, data)?) {
        cm.record(s.label.index(), p);
    }
    Ok(cm)
}

/// Counts with rows indexed by the true class and columns by the prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if classes == 0 || counts.len() != classes * classes {
            return Err(Error::InvalidArgument(format!(
                "{classes}x{classes} confusion matrix needs {} counts, got {}",
                classes * classes,
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        Self::from_counts(rows.len(), rows.concat())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|j| self.get(c, j)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, c)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::InvalidArgument(
                "confusion matrices differ in class count".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// CSV with class names as the header row and first column.
    pub fn to_csv(&self, names: &[&str]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = std::iter::once("true\\pred").chain(names.iter().copied()).collect();
        let csv_err = |e: csv::Error| Error::InvalidArgument(e.to_string());
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.rows().iter().enumerate() {
            let mut rec = vec![names.get(i).copied().unwrap_or("?").to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Class names in index order.
pub fn class_names() -> Vec<&'static str> {
    EmotionClass::ALL.iter().map(|c| c.name()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Unweighted mean of per-class F1.
    pub uf1: f64,
    /// Unweighted mean of per-class recall.
    pub uar: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Accuracy, UF1, UAR and macro precision/recall. Classes with a zero
/// denominator score 0.
pub fn metrics_from(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("metrics of an empty confusion matrix".into()));
    }
    let k = cm.classes();
    let (mut f1, mut rec, mut prec, mut trace) = (0.0, 0.0, 0.0, 0u64);
    for c in 0..k {
        let tp = cm.get(c, c);
        trace += tp;
        let (row, col) = (cm.row_sum(c), cm.col_sum(c));
        let (fn_, fp) = (row - tp, col - tp);
        rec += ratio(tp as f64, row as f64);
        prec += ratio(tp as f64, col as f64);
        f1 += ratio(2.0 * tp as f64, (2 * tp + fp + fn_) as f64);
    }
    let k = k as f64;
    Ok(Metrics {
        accuracy: trace as f64 / total as f64,
        uf1: f1 / k,
        uar: rec / k,
        macro_precision: prec / k,
        macro_recall: rec / k,
    })
}

/// One train/test partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions `data` according to `cfg.split`.
pub fn split_folds(data: &[Sample], cfg: &TrainConfig) -> Result<Vec<Fold>> {
    match cfg.split {
        Split::HoldoutStratified => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(2);
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for class in EmotionClass::ALL {
                let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == class).collect();
                idx.shuffle(&mut rng);
                let held = if idx.len() < 2 {
                    0
                } else {
                    ((idx.len() as f64 * cfg.test_fraction).round() as usize).clamp(1, idx.len() - 1)
                };
                test.extend_from_slice(&idx[..held]);
                train.extend_from_slice(&idx[held..]);
            }
            train.sort_unstable();
            test.sort_unstable();
            if train.is_empty() || test.is_empty() {
                return Err(Error::InvalidArgument(
                    "dataset too small to hold out a test split".into(),
                ));
            }
            Ok(vec![Fold {
                name: "holdout".into(),
                train,
                test,
            }])
        }
        Split::Loso => {
            let mut subjects: Vec<&str> = data.iter().map(|s| s.subject.as_str()).collect();
            subjects.sort_unstable();
            subjects.dedup();
            if subjects.len() < 2 {
                return Err(Error::InvalidArgument(
                    "leave-one-subject-out needs at least two subjects".into(),
                ));
            }
            Ok(subjects
                .into_iter()
                .map(|subj| {
                    let (test, train): (Vec<usize>, Vec<usize>) =
                        (0..data.len()).partition(|&i| data[i].subject == subj);
                    Fold {
                        name: subj.to_string(),
                        train,
                        test,
                    }
                })
                .collect())
        }
    }
}

fn subset(data: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

/// Result of training and testing one configuration under a split.
#[derive(Debug, Clone)]
pub struct EvalRun<T> {
    /// Model trained on the last fold.
    pub model: Dbfem<T>,
    /// History of the first fold.
    pub history: Vec<EpochStats>,
    pub first_batch_loss: Option<f64>,
    /// Summed over folds.
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Trains on each fold's training part and evaluates on its test part.
pub fn fit_and_evaluate<T: Real>(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &[Sample]) -> Result<EvalRun<T>> {
    let folds = split_folds(data, cfg)?;
    let mut confusion = ConfusionMatrix::new(model_cfg.num_classes);
    let mut first = None;
    let mut last = None;
    for fold in &folds {
        let out = train::<T>(model_cfg, cfg, &subset(data, &fold.train))?;
        confusion.merge(&evaluate(&out.model, &subset(data, &fold.test))?)?;
        if first.is_none() {
            first = Some((out.history.clone(), out.first_batch_loss));
        }
        last = Some(out.model);
    }
    let (history, first_batch_loss) = first.expect("at least one fold");
    Ok(EvalRun {
        model: last.expect("at least one fold"),
        history,
        first_batch_loss,
        metrics: metrics_from(&confusion)?,
        confusion,
    })
}

/// Anything that maps a batch of inputs to logits, for throughput timing.
pub trait Infer<T>: Sync {
    fn input_shape(&self) -> InputShape;
    fn infer(&self, global: &Tensor<T>, regions: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Real> Infer<T> for Dbfem<T> {
    fn input_shape(&self) -> InputShape {
        InputShape::of(self.config())
    }

    fn infer(&self, global: &Tensor<T>, regions: &Tensor<T>) -> Result<Tensor<T>> {
        let v = self.config().variant;
        self.logits(v.uses_global().then_some(global), v.uses_local().then_some(regions))
    }
}

/// A model with no layers: returns zero logits. Bounds the timing overhead.
#[derive(Debug, Clone, Copy)]
pub struct Passthrough {
    pub shape: InputShape,
    pub classes: usize,
}

impl<T: Real> Infer<T> for Passthrough {
    fn input_shape(&self) -> InputShape {
        self.shape
    }

    fn infer(&self, global: &Tensor<T>, _regions: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Tensor::zeros(&[global.shape()[0], self.classes]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    /// Single-image forwards per second at the median iteration time.
    pub fps: f64,
    pub median_seconds: f64,
    pub iters: usize,
}

/// Times `iters` batch-1 forwards after `warmup` untimed ones and reports
/// the median.
pub fn fps_benchmark<T: Real>(model: &dyn Infer<T>, warmup: usize, iters: usize) -> Result<FpsReport> {
    if iters < 10 {
        return Err(Error::InvalidArgument(format!(
            "fps benchmark needs at least 10 iterations, got {iters}"
        )));
    }
    let shape = model.input_shape();
    let with_batch = |s: [usize; 3]| [1, s[0], s[1], s[2]];
    let global = Tensor::<T>::full(&with_batch(shape.global), T::from_f64(0.5));
    let regions = Tensor::<T>::full(&with_batch(shape.regions), T::from_f64(0.5));
    for _ in 0..warmup {
        std::hint::black_box(model.infer(&global, &regions)?);
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        std::hint::black_box(model.infer(&global, &regions)?);
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = if iters % 2 == 1 {
        times[iters / 2]
    } else {
        0.5 * (times[iters / 2 - 1] + times[iters / 2])
    };
    Ok(FpsReport {
        fps: 1.0 / median.max(1e-12),
        median_seconds: median,
        iters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    /// GFEM with ResNet depth 12, 18 and 34.
    Table5,
    /// Every branch and fusion variant.
    Table7,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table5" => Ok(Suite::Table5),
            "table7" => Ok(Suite::Table7),
            other => Err(Error::InvalidArgument(format!(
                "unknown suite `{other}` (expected table5 or table7)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Table5 => "table5",
            Suite::Table7 => "table7",
        })
    }
}

/// Row labels and configurations of a suite, in report order.
pub fn suite_configs(suite: Suite, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    match suite {
        Suite::Table5 => [12, 18, 34]
            .into_iter()
            .map(|d| {
                let cfg = ModelConfig {
                    resnet_depth: d,
                    ..base.with_variant(Variant::Gfem)
                };
                (format!("ResNet_{d}"), cfg)
            })
            .collect(),
        Suite::Table7 => Variant::ALL
            .into_iter()
            .map(|v| (v.table_label().to_string(), base.with_variant(v)))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub accuracy: f64,
    pub uf1: f64,
    pub uar: f64,
    pub params: u64,
    pub macs: u64,
    /// `None` when throughput timing is disabled.
    pub fps: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRun {
    pub variant: String,
    pub model_config: ModelConfig,
    pub history: Vec<EpochStats>,
    pub confusion: Vec<Vec<u64>>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub suite: Suite,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FpsOptions {
    pub warmup: usize,
    /// 0 disables timing; otherwise at least 10.
    pub iters: usize,
}

/// Trains and evaluates every configuration of `suite`.
pub fn run_ablation<T: Real>(
    suite: Suite,
    base: &ModelConfig,
    cfg: &TrainConfig,
    data: &[Sample],
    fps: FpsOptions,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (label, model_cfg) in suite_configs(suite, base) {
        let run = fit_and_evaluate::<T>(&model_cfg, cfg, data)?;
        let fps_value = if fps.iters > 0 {
            Some(fps_benchmark(&run.model, fps.warmup, fps.iters)?.fps)
        } else {
            None
        };
        rows.push(AblationRow {
            variant: label.clone(),
            accuracy: run.metrics.accuracy,
            uf1: run.metrics.uf1,
            uar: run.metrics.uar,
            params: param_count(&model_cfg)?,
            macs: flops_estimate(&model_cfg, &InputShape::of(&model_cfg))?,
            fps: fps_value,
        });
        runs.push(AblationRun {
            variant: label,
            model_config: model_cfg,
            history: run.history,
            confusion: run.confusion.rows(),
            metrics: run.metrics,
        });
    }
    Ok(AblationReport {
        suite,
        seed: cfg.seed,
        train_config: *cfg,
        rows,
        runs,
    })
}

/// Ablation rows as CSV: `variant,accuracy,uf1,uar,params,macs,fps`.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let csv_err = |e: csv::Error| Error::InvalidArgument(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "accuracy", "uf1", "uar", "params", "macs", "fps"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.uf1),
            format!("{:.6}", r.uar),
            r.params.to_string(),
            r.macs.to_string(),
            r.fps.map(|f| format!("{f:.2}")).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
