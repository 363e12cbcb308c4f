//! Optimization recipe shared by every stage: AdamW, linear warm-up into a
//! half-cosine decay, early stopping, checkpoints and CSV logs.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::{read_tensor_from, write_tensor_to, Gradients, Tensor};

/// Named gradient sums, e.g. accumulated over the samples of a batch.
pub type GradMap<T> = HashMap<String, Tensor<T>>;

/// Adds `grads` into `acc`, scaled by `weight`.
pub fn accumulate<T: Scalar>(acc: &mut GradMap<T>, grads: Gradients<T>, weight: f64) {
    let w = T::of(weight);
    for (name, g) in grads.into_named() {
        match acc.get_mut(&name) {
            Some(slot) => slot.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += w * *b),
            None => {
                acc.insert(name, g.map(|v| v * w));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Defaults to `base_lr / 100` when absent.
    pub min_lr: Option<f64>,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            min_lr: None,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            eps: 1e-8,
            warmup_epochs: 40,
            max_epochs: 200,
            patience: 15,
            batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn min_lr(&self) -> f64 {
        self.min_lr.unwrap_or(self.base_lr / 100.0)
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Result<Schedule> {
        Schedule::new(
            self.base_lr,
            self.min_lr(),
            self.warmup_epochs * steps_per_epoch,
            self.max_epochs * steps_per_epoch,
        )
    }

    pub fn optimizer<T: Scalar>(&self) -> AdamW<T> {
        AdamW::new(self.betas, self.eps, self.weight_decay)
    }
}

/// Per-step learning rate: `base * (s + 1) / W` for `s < W`, then a half
/// cosine from `base` at step `W - 1` down to `min` at the final step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, min_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if total_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warm-up ({warmup_steps} steps) must be shorter than training ({total_steps} steps)"
            )));
        }
        if !(base_lr > 0.0) || !(min_lr >= 0.0) || min_lr > base_lr {
            return Err(Error::Config(format!(
                "need 0 <= min_lr <= base_lr, got {min_lr} and {base_lr}"
            )));
        }
        Ok(Self {
            base_lr,
            min_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps;
        if step < w {
            return self.base_lr * ((step + 1) as f64 / w as f64);
        }
        let start = w.saturating_sub(1);
        let span = (self.total_steps - 1 - start) as f64;
        let progress = if span > 0.0 {
            ((step - start) as f64 / span).min(1.0)
        } else {
            1.0
        };
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

/// Adam with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: HashMap<String, Vec<T>>,
    second: HashMap<String, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            weight_decay,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    /// Updates every parameter that has a gradient; others are untouched.
    /// Any non-finite gradient aborts before a single value changes.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>, lr: f64) -> Result<()> {
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in &names {
            let g = &grads[*name];
            let p = store
                .get(name)
                .ok_or_else(|| Error::Missing(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("{name}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {name} at optimizer step {}",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::of(1.0 - self.beta1.powi(t)), T::of(1.0 - self.beta2.powi(t)));
        let decay = T::of(1.0 - lr * self.weight_decay);
        let (lr_t, eps) = (T::of(lr), T::of(self.eps));
        for name in names {
            let g = grads[name].data();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let p = store.get_mut(name).expect("checked above").data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

/// Patience counter over strictly improving validation values; a value equal
/// to the best so far counts as no improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub direction: Direction,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub since_improve: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopCheck {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStop {
    pub fn new(patience: usize, direction: Direction) -> Self {
        Self {
            patience,
            direction,
            best: None,
            best_epoch: None,
            since_improve: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, value: f64) -> StopCheck {
        let improved = match self.best {
            None => !value.is_nan(),
            Some(b) => match self.direction {
                Direction::Minimize => value < b,
                Direction::Maximize => value > b,
            },
        };
        if improved {
            self.best = Some(value);
            self.best_epoch = Some(epoch);
            self.since_improve = 0;
        } else {
            self.since_improve += 1;
        }
        StopCheck {
            improved,
            stop: self.since_improve == self.patience,
        }
    }
}

const CKPT_MAGIC: &[u8; 4] = b"CKPT";

/// `{stage}-{epoch}-{metric}.ckpt`
pub fn checkpoint_name(stage: &str, epoch: usize, metric: f64) -> String {
    format!("{stage}-{epoch:03}-{metric:.6}.ckpt")
}

/// Entry count, then for each entry a length-prefixed name followed by one
/// tensor container record.
pub fn write_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>, dtype: DType) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CKPT_MAGIC).map_err(io)?;
    w.write_all(&(store.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        write_tensor_to(&mut w, t, dtype).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(format!("checkpoint {}", path.display())),
        _ => Error::io(path, e),
    })?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(path, "not a checkpoint"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io)?;
    let n = u32::from_le_bytes(u32buf);
    let mut store = ParamStore::new();
    for _ in 0..n {
        r.read_exact(&mut u32buf).map_err(io)?;
        let mut name = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let t = read_tensor_from(&mut r, path)?;
        store.insert(name, t);
    }
    Ok(store)
}

/// Text manifest beside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: String,
    pub epoch: usize,
    pub step: u64,
    pub metric: f64,
    pub rng_seed: u64,
    pub checksum: String,
    pub history: Vec<f64>,
    pub config: String,
}

/// Early-stopped epoch loop with logging and best-checkpoint tracking.
pub struct Trainer<T: Scalar> {
    pub schedule: Schedule,
    pub optimizer: AdamW<T>,
    pub early_stop: EarlyStop,
    pub global_step: usize,
    stage: String,
    dir: PathBuf,
    dtype: DType,
    log: csv::Writer<File>,
    log_path: PathBuf,
    history: Vec<f64>,
    best_file: Option<PathBuf>,
    config_echo: String,
    seed: u64,
}

impl<T: Scalar> Trainer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dir: &Path,
        stage: &str,
        cfg: &TrainConfig,
        steps_per_epoch: usize,
        direction: Direction,
        dtype: DType,
        seed: u64,
        config_echo: String,
    ) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join(format!("{stage}-log.csv"));
        let mut log = csv::Writer::from_path(&log_path).map_err(|e| Error::format(&log_path, e.to_string()))?;
        log.write_record(["step", "epoch", "lr", "train_loss", "val_metric"])
            .map_err(|e| Error::format(&log_path, e.to_string()))?;
        Ok(Self {
            schedule: cfg.schedule(steps_per_epoch)?,
            optimizer: cfg.optimizer(),
            early_stop: EarlyStop::new(cfg.patience, direction),
            global_step: 0,
            stage: stage.to_string(),
            dir: dir.to_path_buf(),
            dtype,
            log,
            log_path,
            history: Vec::new(),
            best_file: None,
            config_echo,
            seed,
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.global_step.min(self.schedule.total_steps - 1))
    }

    /// One optimizer update at the scheduled learning rate.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>) -> Result<f64> {
        let lr = self.current_lr();
        self.optimizer.update(store, grads, lr)?;
        self.global_step += 1;
        Ok(lr)
    }

    /// Logs the epoch, saves a checkpoint on improvement and reports whether
    /// to stop.
    pub fn end_epoch(&mut self, store: &ParamStore<T>, epoch: usize, train_loss: f64, val_metric: f64) -> Result<bool> {
        let lr = self.current_lr();
        let row = [
            self.global_step.to_string(),
            epoch.to_string(),
            lr.to_string(),
            train_loss.to_string(),
            val_metric.to_string(),
        ];
        let csv_err = |e: csv::Error| Error::format(&self.log_path, e.to_string());
        self.log.write_record(&row).map_err(csv_err)?;
        self.log.flush().map_err(|e| Error::io(&self.log_path, e))?;
        self.history.push(val_metric);
        let check = self.early_stop.update(epoch, val_metric);
        if check.improved {
            let name = checkpoint_name(&self.stage, epoch, val_metric);
            let path = self.dir.join(&name);
            write_checkpoint(&path, store, self.dtype)?;
            let manifest = CheckpointManifest {
                stage: self.stage.clone(),
                epoch,
                step: self.optimizer.step,
                metric: val_metric,
                rng_seed: self.seed,
                checksum: store.checksum(),
                history: self.history.clone(),
                config: self.config_echo.clone(),
            };
            let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
            let mpath = path.with_extension("manifest");
            fs::write(&mpath, text).map_err(|e| Error::io(mpath, e))?;
            if let Some(old) = self.best_file.replace(path) {
                let _ = fs::remove_file(old.with_extension("manifest"));
                let _ = fs::remove_file(old);
            }
            let best = self.dir.join(format!("{}.best", self.stage));
            fs::write(&best, format!("{name}\n")).map_err(|e| Error::io(best, e))?;
        }
        Ok(check.stop)
    }

    pub fn best_checkpoint(&self) -> Option<&Path> {
        self.best_file.as_deref()
    }

    /// Loads the best checkpoint back into `store`.
    pub fn restore_best(&self, store: &mut ParamStore<T>) -> Result<()> {
        let path = self
            .best_file
            .as_ref()
            .ok_or_else(|| Error::Missing(format!("{}: no checkpoint was written", self.stage)))?;
        store.load_from(&read_checkpoint(path)?)
    }
}

/// Path of the best checkpoint recorded for `stage` in `dir`.
pub fn best_checkpoint_path(dir: &Path, stage: &str) -> Result<PathBuf> {
    let pointer = dir.join(format!("{stage}.best"));
    let name = fs::read_to_string(&pointer)
        .map_err(|_| Error::Missing(format!("no {stage} checkpoint in {}", dir.display())))?;
    Ok(dir.join(name.trim()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(name: &str, value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::vector(vec![value]));
        s
    }

    fn grad(name: &str, g: f64) -> GradMap<f64> {
        HashMap::from([(name.to_string(), Tensor::vector(vec![g]))])
    }

    #[test]
    fn pure_decay_shrinks_by_lr_times_decay() {
        let mut opt = AdamW::<f64>::new([0.9, 0.999], 1e-8, 0.1);
        let mut store = single("w", 2.0);
        let mut expect = 2.0;
        for _ in 0..5 {
            opt.update(&mut store, &grad("w", 0.0), 0.01).unwrap();
            expect *= 1.0 - 0.001;
            assert_eq!(store.get("w").unwrap().data()[0], expect);
        }
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut opt = AdamW::<f64>::new([0.9, 0.999], 1e-8, 0.0);
        let mut store = single("x", 5.0);
        let sched = Schedule::new(0.5, 0.0, 0, 200).unwrap();
        for step in 0..200 {
            let x = store.get("x").unwrap().data()[0];
            opt.update(&mut store, &grad("x", 2.0 * (x - 1.5)), sched.lr_at(step))
                .unwrap();
        }
        let x = store.get("x").unwrap().data()[0];
        assert!((x - 1.5).abs() < 1e-3, "{x}");
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut opt = AdamW::<f64>::new([0.9, 0.999], 1e-8, 0.1);
        let mut store = single("w", 1.0);
        let err = opt.update(&mut store, &grad("w", f64::NAN), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(store.get("w").unwrap().data()[0], 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn trajectories_are_bitwise_repeatable() {
        let run = || {
            let mut opt = AdamW::<f64>::new([0.9, 0.999], 1e-8, 0.05);
            let mut store = single("x", -3.0);
            let mut out = Vec::new();
            for s in 0..50 {
                let x = store.get("x").unwrap().data()[0];
                opt.update(&mut store, &grad("x", (x - 0.2).sin()), 0.01 * (1.0 + s as f64).sqrt())
                    .unwrap();
                out.push(store.get("x").unwrap().data()[0].to_bits());
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_hits_its_anchor_points() {
        let s = Schedule::new(1e-3, 1e-5, 40 * 7, 200 * 7).unwrap();
        assert!((s.lr_at(0) - 1e-3 / 280.0).abs() < 1e-18);
        assert_eq!(s.lr_at(279), 1e-3);
        assert_eq!(s.lr_at(200 * 7 - 1), 1e-5);
        let after = s.lr_at(280);
        assert!(after < 1e-3 && (1e-3 - after) < 1e-7);
    }

    #[test]
    fn schedule_rejects_long_warmup() {
        assert!(Schedule::new(1e-3, 1e-5, 10, 10).is_err());
        let cfg = TrainConfig {
            warmup_epochs: 200,
            ..Default::default()
        };
        assert!(cfg.schedule(3).is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_monotone_after_warmup(w in 1usize..50, extra in 2usize..400) {
            let s = Schedule::new(1e-3, 1e-5, w, w + extra).unwrap();
            for step in w..w + extra - 1 {
                prop_assert!(s.lr_at(step + 1) <= s.lr_at(step));
            }
            for step in 0..w - 1 {
                prop_assert!(s.lr_at(step + 1) > s.lr_at(step));
            }
            prop_assert_eq!(s.lr_at(w - 1), 1e-3);
            prop_assert_eq!(s.lr_at(w + extra - 1), 1e-5);
        }
    }

    #[test]
    fn early_stop_never_fires_on_improvement() {
        let mut es = EarlyStop::new(15, Direction::Minimize);
        for e in 0..200 {
            assert!(!es.update(e, 100.0 - e as f64).stop);
        }
    }

    #[test]
    fn early_stop_fires_after_patience_flat_epochs() {
        let mut es = EarlyStop::new(15, Direction::Maximize);
        let mut stopped = None;
        for e in 0..100 {
            let v = if e <= 10 { e as f64 } else { 10.0 };
            if es.update(e, v).stop {
                stopped = Some(e);
                break;
            }
        }
        assert_eq!(es.best_epoch, Some(10));
        assert_eq!(stopped, Some(25));
    }

    #[test]
    fn equal_value_is_not_an_improvement() {
        let mut es = EarlyStop::new(2, Direction::Minimize);
        assert!(es.update(0, 1.0).improved);
        assert!(!es.update(1, 1.0).improved);
        assert!(es.update(2, 1.0).stop);
    }

    #[test]
    fn checkpoint_round_trip_and_best_reload() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            warmup_epochs: 1,
            max_epochs: 10,
            patience: 3,
            ..Default::default()
        };
        let mut t = Trainer::<f64>::new(
            dir.path(),
            "toy",
            &cfg,
            1,
            Direction::Minimize,
            DType::F64,
            0,
            String::new(),
        )
        .unwrap();
        let mut store = single("x", 4.0);
        let mut best = (f64::INFINITY, 0.0);
        for epoch in 0..10 {
            let x = store.get("x").unwrap().data()[0];
            t.step(&mut store, &grad("x", 2.0 * x)).unwrap();
            let x = store.get("x").unwrap().data()[0];
            let metric = (x - 3.0).powi(2);
            if metric < best.0 {
                best = (metric, x);
            }
            if t.end_epoch(&store, epoch, x * x, metric).unwrap() {
                break;
            }
        }
        t.restore_best(&mut store).unwrap();
        let x = store.get("x").unwrap().data()[0];
        assert!(((x - 3.0).powi(2) - best.0).abs() < 1e-9);
        let path = best_checkpoint_path(dir.path(), "toy").unwrap();
        assert_eq!(read_checkpoint::<f64>(&path).unwrap(), store);
        assert!(path.file_name().unwrap().to_str().unwrap().starts_with("toy-"));
        let log = fs::read_to_string(dir.path().join("toy-log.csv")).unwrap();
        assert!(log.starts_with("step,epoch,lr,train_loss,val_metric"));
    }
}
