//! Per-task MLP heads over ECG embeddings, plus R², AUROC and class
//! balancing.

use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{derive_seed, Split, OUTCOME_NAMES, PHENOTYPE_NAMES};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::scalar::{DType, Scalar};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{Direction, TrainConfig, Trainer};

/// Coefficient of determination about the target mean.
pub fn r_squared(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() || targets.len() < 2 {
        return Err(Error::invalid(format!(
            "r_squared needs two equal-length vectors of at least 2, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::invalid("r_squared is undefined for constant targets"));
    }
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auroc score is NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auroc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney statistic, accumulated over tie groups.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        let neg = (j - i) as u128 - pos;
        twice_u += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    // The smaller side is rounded to a multiple of 2^-53, where `1 - x` is
    // exact, so swapped labels give exactly the complementary value.
    let total = 2 * n_pos * n_neg;
    let small = twice_u.min(total - twice_u);
    let grid = (1u64 << 53) as f64;
    let q = (small as f64 / total as f64 * grid).round() / grid;
    Ok(if 2 * twice_u <= total { q } else { 1.0 - q })
}

/// Indices (ascending) of a subsample with equal class counts; the majority
/// class is undersampled at random.
pub fn balance_classes(labels: &[bool], seed: u64) -> Result<Vec<usize>> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid(format!(
            "cannot balance {} positives against {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    let (minority, majority) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, majority.len(), minority.len());
    let mut out: Vec<usize> = minority;
    out.extend(picked.iter().map(|i| majority[i]));
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    R2,
    Auroc,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Regression => "regression",
            TaskKind::Binary => "binary",
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::R2 => "r2",
            Metric::Auroc => "auroc",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    /// Column of the cohort table holding the target.
    pub target: String,
    pub metric: Metric,
}

impl TaskSpec {
    pub fn regression(column: &str) -> Self {
        Self {
            task_id: column.to_string(),
            kind: TaskKind::Regression,
            target: column.to_string(),
            metric: Metric::R2,
        }
    }

    pub fn binary(column: &str) -> Self {
        Self {
            task_id: column.to_string(),
            kind: TaskKind::Binary,
            target: column.to_string(),
            metric: Metric::Auroc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.metric) {
            (TaskKind::Regression, Metric::R2) | (TaskKind::Binary, Metric::Auroc) => Ok(()),
            (k, m) => Err(Error::Config(format!(
                "task {}: {k} task cannot report {m}",
                self.task_id
            ))),
        }
    }
}

/// Every phenotype as a regression and every outcome as a binary task.
pub fn default_tasks() -> Vec<TaskSpec> {
    PHENOTYPE_NAMES
        .iter()
        .map(|n| TaskSpec::regression(n))
        .chain(OUTCOME_NAMES.iter().map(|n| TaskSpec::binary(n)))
        .collect()
}

/// Probe tasks read from the ECG generator itself.
pub fn probe_tasks() -> Vec<TaskSpec> {
    ["qrs_count", "qrs_ms", "heart_rate"]
        .iter()
        .map(|n| TaskSpec::regression(n))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: [usize; 2],
    /// Train the ECG encoder together with the head.
    pub fine_tune: bool,
    pub train: TrainConfig,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: [256, 64],
            fine_tune: false,
            train: TrainConfig {
                warmup_epochs: 5,
                max_epochs: 100,
                ..TrainConfig::default()
            },
        }
    }
}

/// Three affine layers with GELUs between, one output.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub prefix: String,
    layers: [Linear; 3],
}

impl MlpHead {
    pub fn new(prefix: &str, input_dim: usize, hidden: [usize; 2]) -> Self {
        Self {
            prefix: prefix.to_string(),
            layers: [
                Linear::new(&format!("{prefix}.fc1"), input_dim, hidden[0]),
                Linear::new(&format!("{prefix}.fc2"), hidden[0], hidden[1]),
                Linear::new(&format!("{prefix}.fc3"), hidden[1], 1),
            ],
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let mut init = Init::new(seed);
        for l in &self.layers {
            l.init(store, &mut init, 1.0);
        }
    }

    /// `[rows, input_dim]` to `[rows]`.
    pub fn forward<T: Scalar>(&self, g: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, p, x)?;
        let h = g.gelu(h)?;
        let h = self.layers[1].forward(g, p, h)?;
        let h = g.gelu(h)?;
        let out = self.layers[2].forward(g, p, h)?;
        let rows = g.shape(out)[0];
        g.reshape(out, &[rows])
    }
}

/// Mean binary cross-entropy of logits against 0/1 targets.
pub fn bce_with_logits<T: Scalar>(g: &mut Tape<T>, logits: Var, labels: Var) -> Result<Var> {
    let sp = g.softplus(logits)?;
    let yz = g.mul(labels, logits)?;
    let per = g.sub(sp, yz)?;
    g.mean(per)
}

/// Head inputs per split. `rows` builds a `[idx.len(), width]` input on the
/// tape; fine-tuning sources run the encoder there.
pub trait Features<T: Scalar> {
    fn width(&self) -> usize;
    fn len(&self, split: Split) -> usize;
    fn rows(&self, g: &mut Tape<T>, p: &Bound, split: Split, idx: &[usize]) -> Result<Var>;
}

/// Precomputed embeddings, z-scored per dimension with training statistics.
pub struct FrozenFeatures<T: Scalar> {
    train: Tensor<T>,
    val: Tensor<T>,
    test: Tensor<T>,
}

impl<T: Scalar> FrozenFeatures<T> {
    pub fn new(train: &Tensor<T>, val: &Tensor<T>, test: &Tensor<T>) -> Result<Self> {
        let d = train.shape()[1];
        if val.shape()[1] != d || test.shape()[1] != d {
            return Err(Error::shape(
                "features",
                format!("{:?} / {:?} / {:?}", train.shape(), val.shape(), test.shape()),
            ));
        }
        let n = train.shape()[0] as f64;
        let mut mean = vec![0.0; d];
        let mut sd = vec![0.0; d];
        for r in 0..train.shape()[0] {
            for (m, v) in mean.iter_mut().zip(train.row(r)) {
                *m += v.as_f64() / n;
            }
        }
        for r in 0..train.shape()[0] {
            for ((s, v), m) in sd.iter_mut().zip(train.row(r)).zip(&mean) {
                *s += (v.as_f64() - m).powi(2) / n;
            }
        }
        let sd: Vec<f64> = sd.into_iter().map(|s| if s > 0.0 { s.sqrt() } else { 1.0 }).collect();
        let norm =
            |t: &Tensor<T>| Tensor::from_fn(t.shape(), |i| T::of((t.data()[i].as_f64() - mean[i % d]) / sd[i % d]));
        Ok(Self {
            train: norm(train),
            val: norm(val),
            test: norm(test),
        })
    }

    fn table(&self, split: Split) -> &Tensor<T> {
        match split {
            Split::Val => &self.val,
            Split::Test => &self.test,
            _ => &self.train,
        }
    }
}

impl<T: Scalar> Features<T> for FrozenFeatures<T> {
    fn width(&self) -> usize {
        self.train.shape()[1]
    }

    fn len(&self, split: Split) -> usize {
        self.table(split).shape()[0]
    }

    fn rows(&self, g: &mut Tape<T>, _: &Bound, split: Split, idx: &[usize]) -> Result<Var> {
        let t = self.table(split);
        let data = idx.iter().flat_map(|&i| t.row(i).to_vec()).collect();
        Ok(g.constant(Tensor::new(vec![idx.len(), t.shape()[1]], data)?))
    }
}

/// Targets per split in original units (0/1 for binary tasks).
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub test: Vec<f64>,
}

impl Targets {
    fn get(&self, split: Split) -> &[f64] {
        match split {
            Split::Val => &self.val,
            Split::Test => &self.test,
            _ => &self.train,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutcome {
    pub test_metric: f64,
    pub best_val: f64,
    pub epochs: usize,
    pub test_predictions: Vec<f64>,
}

fn predict<T: Scalar>(
    head: &MlpHead,
    store: &ParamStore<T>,
    features: &dyn Features<T>,
    split: Split,
) -> Result<Vec<f64>> {
    let n = features.len(split);
    let mut out = Vec::with_capacity(n);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(256) {
        let mut g = Tape::new();
        let p = store.bind(&mut g, false);
        let x = features.rows(&mut g, &p, split, chunk)?;
        let y = head.forward(&mut g, &p, x)?;
        out.extend(g.value(y).data().iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

fn score(task: &TaskSpec, preds: &[f64], targets: &[f64]) -> Result<f64> {
    match task.metric {
        Metric::R2 => r_squared(preds, targets),
        Metric::Auroc => auroc(preds, &targets.iter().map(|&t| t > 0.5).collect::<Vec<_>>()),
    }
}

/// Trains one head with the trainer recipe, restores the best validation
/// checkpoint and scores the test split. `store` may already hold encoder
/// parameters that should train with the head.
#[allow(clippy::too_many_arguments)]
pub fn train_head<T: Scalar>(
    task: &TaskSpec,
    cfg: &HeadConfig,
    features: &dyn Features<T>,
    targets: &Targets,
    mut store: ParamStore<T>,
    dir: &Path,
    dtype: DType,
    seed: u64,
) -> Result<(HeadOutcome, ParamStore<T>)> {
    task.validate()?;
    for split in [Split::Train, Split::Val, Split::Test] {
        if features.len(split) != targets.get(split).len() {
            return Err(Error::invalid(format!(
                "task {}: {} {split} rows for {} targets",
                task.task_id,
                features.len(split),
                targets.get(split).len()
            )));
        }
    }
    let head = MlpHead::new(&format!("head.{}", task.task_id), features.width(), cfg.hidden);
    head.init(&mut store, derive_seed(seed, 0));
    let train_idx: Vec<usize> = match task.kind {
        TaskKind::Binary => {
            let labels: Vec<bool> = targets.train.iter().map(|&t| t > 0.5).collect();
            balance_classes(&labels, derive_seed(seed, 1))?
        }
        TaskKind::Regression => (0..targets.train.len()).collect(),
    };
    let (y_mean, y_sd) = match task.kind {
        TaskKind::Regression => {
            let ys: Vec<f64> = train_idx.iter().map(|&i| targets.train[i]).collect();
            let m = ys.iter().sum::<f64>() / ys.len() as f64;
            let v = ys.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / ys.len() as f64;
            (m, if v > 0.0 { v.sqrt() } else { 1.0 })
        }
        TaskKind::Binary => (0.0, 1.0),
    };
    let batch = cfg.train.batch_size.max(1);
    let steps = train_idx.len().div_ceil(batch);
    let mut trainer = Trainer::new(
        dir,
        &task.task_id,
        &cfg.train,
        steps,
        Direction::Maximize,
        dtype,
        seed,
        format!("{task:?}"),
    )?;
    let mut epochs = 0;
    for epoch in 0..cfg.train.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 100 + epoch as u64)));
        let mut loss_sum = 0.0;
        for idx in order.chunks(batch) {
            let mut g = Tape::new();
            let p = store.bind(&mut g, true);
            let x = features.rows(&mut g, &p, Split::Train, idx)?;
            let out = head.forward(&mut g, &p, x)?;
            let y = Tensor::vector(idx.iter().map(|&i| T::of((targets.train[i] - y_mean) / y_sd)).collect());
            let y = g.constant(y);
            let loss = match task.kind {
                TaskKind::Regression => g.mse(out, y)?,
                TaskKind::Binary => bce_with_logits(&mut g, out, y)?,
            };
            loss_sum += g.value(loss).item().as_f64() * idx.len() as f64;
            let grads = g.backward(loss)?.into_named();
            trainer.step(&mut store, &grads)?;
        }
        let val_preds: Vec<f64> = predict(&head, &store, features, Split::Val)?
            .into_iter()
            .map(|p| p * y_sd + y_mean)
            .collect();
        let val = score(task, &val_preds, &targets.val)?;
        epochs = epoch + 1;
        if trainer.end_epoch(&store, epoch, loss_sum / train_idx.len() as f64, val)? {
            break;
        }
    }
    trainer.restore_best(&mut store)?;
    let test_predictions: Vec<f64> = predict(&head, &store, features, Split::Test)?
        .into_iter()
        .map(|p| p * y_sd + y_mean)
        .collect();
    let test_metric = score(task, &test_predictions, &targets.test)?;
    Ok((
        HeadOutcome {
            test_metric,
            best_val: trainer.early_stop.best.unwrap_or(f64::NAN),
            epochs,
            test_predictions,
        },
        store,
    ))
}

/// One results row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task_id: String,
    pub kind: TaskKind,
    pub metric_name: Metric,
    pub value: f64,
    pub n_test: usize,
    pub seed: u64,
    pub embedding_source: String,
}

/// Results table writer.
pub struct ResultsWriter {
    writer: csv::Writer<File>,
    path: PathBuf,
}

impl ResultsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, row: &ResultRow) -> Result<()> {
        self.writer
            .serialize(row)
            .map_err(|e| Error::format(&self.path, e.to_string()))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(TaskKind::Regression),
            "binary" => Ok(TaskKind::Binary),
            _ => Err(Error::invalid(format!("unknown task kind {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_many;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn r_squared_examples() {
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(r_squared(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(r_squared(&[1.0, 2.0, 4.0], &[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert!(r_squared(&[1.0, 2.0], &[3.0, 3.0]).is_err());
        assert!(r_squared(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn auroc_examples() {
        let labels = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn balancing_examples() {
        let labels: Vec<bool> = (0..500).map(|i| i < 100).collect();
        let kept = balance_classes(&labels, 4).unwrap();
        assert_eq!(kept.iter().filter(|&&i| labels[i]).count(), 100);
        assert_eq!(kept.len(), 200);
        assert_eq!(kept, balance_classes(&labels, 4).unwrap());
        let even = [true, false, true, false];
        assert_eq!(balance_classes(&even, 1).unwrap(), vec![0, 1, 2, 3]);
        assert!(balance_classes(&[true, true], 0).is_err());
    }

    #[test]
    fn tasks_pair_kind_and_metric() {
        assert!(default_tasks().iter().all(|t| t.validate().is_ok()));
        let bad = TaskSpec {
            metric: Metric::Auroc,
            ..TaskSpec::regression("lv_ef")
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn head_gradient() {
        let head = MlpHead::new("head.t", 4, [5, 3]);
        let mut store = ParamStore::<f64>::new();
        head.init(&mut store, 2);
        let names: Vec<String> = store.names().map(String::from).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut values: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        values.push(Tensor::from_fn(&[6, 4], |_| rng.random_range(-1.0..1.0)));
        let y_reg = Tensor::from_fn(&[6], |i| i as f64 * 0.3 - 0.5);
        let y_bin = Tensor::from_fn(&[6], |i| (i % 2) as f64);
        for binary in [false, true] {
            let err = finite_diff_check_many(
                |g, xs| {
                    let p = Bound::from_pairs(names.iter().cloned().zip(xs.iter().copied()));
                    let out = head.forward(g, &p, xs[names.len()])?;
                    if binary {
                        let y = g.constant(y_bin.clone());
                        bce_with_logits(g, out, y)
                    } else {
                        let y = g.constant(y_reg.clone());
                        g.mse(out, y)
                    }
                },
                &values,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{err:e}");
        }
    }

    fn synthetic(n: usize, seed: u64, f: impl Fn(&[f64], &mut ChaCha8Rng) -> f64) -> (Tensor<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            y.push(f(&row, &mut rng));
            x.extend(row);
        }
        (Tensor::new(vec![n, 6], x).unwrap(), y)
    }

    fn run(task: TaskSpec, f: impl Fn(&[f64], &mut ChaCha8Rng) -> f64 + Copy) -> HeadOutcome {
        let (xtr, ytr) = synthetic(400, 1, f);
        let (xva, yva) = synthetic(150, 2, f);
        let (xte, yte) = synthetic(150, 3, f);
        let feats = FrozenFeatures::new(&xtr, &xva, &xte).unwrap();
        let targets = Targets {
            train: ytr,
            val: yva,
            test: yte,
        };
        let cfg = HeadConfig {
            hidden: [32, 16],
            train: TrainConfig {
                max_epochs: 40,
                warmup_epochs: 2,
                batch_size: 32,
                base_lr: 3e-3,
                ..TrainConfig::default()
            },
            ..HeadConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        train_head(
            &task,
            &cfg,
            &feats,
            &targets,
            ParamStore::new(),
            dir.path(),
            DType::F64,
            9,
        )
        .unwrap()
        .0
    }

    #[test]
    fn noise_target_is_not_learned() {
        let out = run(TaskSpec::regression("noise"), |_, rng| rng.random_range(-1.0..1.0));
        assert!(out.test_metric < 0.1, "{}", out.test_metric);
    }

    #[test]
    fn threshold_label_is_learned() {
        let out = run(TaskSpec::binary("thresh"), |x, _| f64::from(x[0] + 0.5 * x[1] > 0.2));
        assert!(out.test_metric > 0.95, "{}", out.test_metric);
    }

    #[test]
    fn smooth_target_is_learned() {
        let out = run(TaskSpec::regression("smooth"), |x, _| 3.0 * x[0] - x[2] * x[3] + 10.0);
        assert!(out.test_metric > 0.8, "{}", out.test_metric);
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let row = ResultRow {
            task_id: "lv_ef".into(),
            kind: TaskKind::Regression,
            metric_name: Metric::R2,
            value: 0.25,
            n_test: 30,
            seed: 7,
            embedding_source: "dual_phase".into(),
        };
        let mut w = ResultsWriter::create(&path).unwrap();
        w.write(&row).unwrap();
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("task_id,kind,metric_name,value,n_test,seed,embedding_source\n"));
        assert_eq!(read_results(&path).unwrap(), vec![row]);
    }

    fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(prop_oneof![(-5i32..5).prop_map(f64::from), -5.0f64..5.0], n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_complement_is_exact((s, l) in scores_and_labels()) {
            prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
            let flipped: Vec<bool> = l.iter().map(|&x| !x).collect();
            prop_assert_eq!(auroc(&s, &l).unwrap(), 1.0 - auroc(&s, &flipped).unwrap());
        }

        #[test]
        fn auroc_ignores_monotone_transforms((s, l) in scores_and_labels()) {
            prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
            let t: Vec<f64> = s.iter().map(|v| (0.7 * v).exp() * 3.0 - 1.0).collect();
            prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
        }

        #[test]
        fn auroc_matches_pair_counting((s, l) in scores_and_labels()) {
            prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if l[i] && !l[j] {
                        den += 1.0;
                        num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            prop_assert!((auroc(&s, &l).unwrap() - num / den).abs() < 1e-12);
        }

        #[test]
        fn r_squared_joint_affine_invariance(
            t in proptest::collection::vec(-10.0f64..10.0, 3..30),
            noise in proptest::collection::vec(-1.0f64..1.0, 30),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let spread = t.iter().cloned().fold(f64::MIN, f64::max) - t.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let p: Vec<f64> = t.iter().zip(&noise).map(|(x, e)| x + e).collect();
            let map = |v: &[f64]| v.iter().map(|x| a * x + b).collect::<Vec<_>>();
            let r = r_squared(&p, &t).unwrap();
            prop_assert!((r - r_squared(&map(&p), &map(&t)).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn balanced_counts_are_equal(l in proptest::collection::vec(any::<bool>(), 2..200), seed in any::<u64>()) {
            prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
            let kept = balance_classes(&l, seed).unwrap();
            let pos = kept.iter().filter(|&&i| l[i]).count();
            prop_assert_eq!(pos * 2, kept.len());
        }
    }
}
