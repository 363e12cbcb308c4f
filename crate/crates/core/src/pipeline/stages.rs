//! The experiment stages. Each reads its inputs from the output layout,
//! writes its artifacts and a frozen config into its own directory and
//! returns a small report.

use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::data::{ecg_tokens, labelled_splits, pretrain_pool, split_subjects, targets, volumes};
use super::layout::{create_dir, require, write_text, Layout, FINAL_PARAMS, FROZEN_CONFIG};
use crate::align::embed_ecg;
use crate::align::{
    align_epoch, steps_per_epoch, AlignConfig, AlignData, AlignLog, AlignMode, AlignModel, EpochStats, FrozenGuard,
};
use crate::cohort::{build_cohort, derive_seed, Cohort, Phase, Split, SubjectInfo};
use crate::downstream::{
    probe_tasks, read_results, train_head, Features, FrozenFeatures, HeadConfig, ResultRow, ResultsWriter, TaskKind,
};
use crate::encoders::cmr::{phenotype_regression_loss, CmrEncoder, TargetStats};
use crate::encoders::vit::{count_params, stack_rows, unpatchify, EcgVit, Mae, MaskPlan, VitConfig};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{read_checkpoint, write_checkpoint, Direction, TrainConfig, Trainer};

const SEED_PRETRAIN: u64 = 1;
const SEED_CMR_ED: u64 = 2;
const SEED_CMR_ES: u64 = 3;
const SEED_ALIGN: u64 = 4;
const SEED_HEADS: u64 = 5;
const SEED_ABLATE: u64 = 6;

/// Tasks whose mean R² summarizes functional phenotypes.
pub const FUNCTIONAL_TASKS: [&str; 4] = ["lv_ef", "gcs", "gls", "grs"];

fn freeze(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join(FROZEN_CONFIG), &cfg.to_toml()?)
}

fn write_report<R: Serialize>(path: &Path, report: &R) -> Result<()> {
    let text = toml::to_string(report).map_err(|e| Error::Config(e.to_string()))?;
    write_text(path, &text)
}

fn open_cohort(layout: &Layout) -> Result<Cohort> {
    let dir = layout.cohort();
    require(&dir.join("phenotypes.csv"), "cohort", "synth")?;
    Cohort::open(&dir)
}

fn load_params<T: Scalar>(dir: &Path, what: &str, producer: &str) -> Result<ParamStore<T>> {
    let path = dir.join(FINAL_PARAMS);
    require(&path, what, producer)?;
    read_checkpoint(&path)
}

pub fn cmd_synth(cfg: &RunConfig, layout: &Layout) -> Result<Vec<SubjectInfo>> {
    let dir = layout.cohort();
    create_dir(&dir)?;
    let subjects = build_cohort(&dir, &cfg.cohort, cfg.seed)?;
    freeze(cfg, &dir)?;
    Ok(subjects)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub pool: usize,
    pub epochs: usize,
    pub initial_val_mse: f64,
    pub best_val_mse: f64,
}

/// Mean masked reconstruction error with fixed mask plans.
pub fn masked_mse<T: Scalar>(
    mae: &Mae,
    store: &ParamStore<T>,
    tokens: &[&Tensor<T>],
    plans: &[MaskPlan],
    batch: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for (chunk, plan) in tokens.chunks(batch.max(1)).zip(plans.chunks(batch.max(1))) {
        let mut g = Tape::new();
        let p = store.bind(&mut g, false);
        let out = mae.forward(&mut g, &p, chunk, plan, &mae.decoder)?;
        sum += g.value(out.loss).item().as_f64() * chunk.len() as f64;
    }
    Ok(sum / tokens.len() as f64)
}

/// Masked-autoencoder training with early stopping on validation masked
/// MSE; returns the best parameters.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_mae<T: Scalar>(
    vit: &VitConfig,
    train_cfg: &TrainConfig,
    pool: &[&Tensor<T>],
    val: &[&Tensor<T>],
    dir: &Path,
    stage: &str,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(Mae, ParamStore<T>, PretrainReport)> {
    if pool.is_empty() || val.is_empty() {
        return Err(Error::invalid("pretraining needs training and validation ECGs"));
    }
    let mae = Mae::new(vit)?;
    let mut store = ParamStore::new();
    mae.init(&mut store, derive_seed(seed, 0));
    let val_plans: Vec<MaskPlan> = (0..val.len())
        .map(|i| mae.plan(derive_seed(derive_seed(seed, 1), i as u64)))
        .collect::<Result<_>>()?;
    let batch = train_cfg.batch_size.max(1);
    let initial = masked_mse(&mae, &store, val, &val_plans, batch)?;
    let mut trainer = Trainer::new(
        dir,
        stage,
        train_cfg,
        pool.len().div_ceil(batch),
        Direction::Minimize,
        cfg.precision,
        seed,
        cfg.to_toml()?,
    )?;
    let mut epochs = 0;
    for epoch in 0..train_cfg.max_epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + epoch as u64)));
        let plan_seed = derive_seed(seed, 100_000 + epoch as u64);
        let mut loss_sum = 0.0;
        for idx in order.chunks(batch) {
            let tokens: Vec<&Tensor<T>> = idx.iter().map(|&i| pool[i]).collect();
            let plans: Vec<MaskPlan> = idx
                .iter()
                .map(|&i| mae.plan(derive_seed(plan_seed, i as u64)))
                .collect::<Result<_>>()?;
            let mut g = Tape::new();
            let p = store.bind(&mut g, true);
            let out = mae.forward(&mut g, &p, &tokens, &plans, &mae.decoder)?;
            loss_sum += g.value(out.loss).item().as_f64() * idx.len() as f64;
            let grads = g.backward(out.loss)?.into_named();
            trainer.step(&mut store, &grads)?;
        }
        let val_mse = masked_mse(&mae, &store, val, &val_plans, batch)?;
        epochs = epoch + 1;
        if trainer.end_epoch(&store, epoch, loss_sum / pool.len() as f64, val_mse)? {
            break;
        }
    }
    trainer.restore_best(&mut store)?;
    let report = PretrainReport {
        pool: pool.len(),
        epochs,
        initial_val_mse: initial,
        best_val_mse: trainer.early_stop.best.unwrap_or(f64::NAN),
    };
    Ok((mae, store, report))
}

/// Original and reconstructed waveform of one ECG, sample by sample.
fn write_recon_panel<T: Scalar>(
    path: &Path,
    mae: &Mae,
    store: &ParamStore<T>,
    tokens: &Tensor<T>,
    plan: &MaskPlan,
) -> Result<()> {
    let patch_len = mae.encoder.cfg.patch_len;
    let mut g = Tape::new();
    let p = store.bind(&mut g, false);
    let out = mae.forward(&mut g, &p, &[tokens], std::slice::from_ref(plan), &mae.decoder)?;
    let recon = unpatchify(g.value(out.prediction), patch_len)?;
    let orig = unpatchify(tokens, patch_len)?;
    let mut masked = vec![false; plan.token_count];
    for &t in &plan.masked {
        masked[t] = true;
    }
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["lead", "sample", "original", "reconstruction", "masked"])
        .map_err(csv_err)?;
    let n = orig.shape()[1];
    for lead in 0..orig.shape()[0] {
        for s in 0..n {
            let i = lead * n + s;
            w.write_record([
                lead.to_string(),
                s.to_string(),
                orig.data()[i].as_f64().to_string(),
                recon.data()[i].as_f64().to_string(),
                u8::from(masked[s / patch_len]).to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_pretrain_ecg<T: Scalar>(cfg: &RunConfig, layout: &Layout) -> Result<PretrainReport> {
    let cohort = open_cohort(layout)?;
    let dir = layout.pretrain();
    freeze(cfg, &dir)?;
    let patch = cfg.vit.patch_len;
    let pool = ecg_tokens::<T>(&cohort, &pretrain_pool(&cohort)?, &cfg.preprocess, patch)?;
    let val_subjects = split_subjects(&cohort, Split::Val)?;
    let val = ecg_tokens::<T>(&cohort, &val_subjects, &cfg.preprocess, patch)?;
    let seed = derive_seed(cfg.seed, SEED_PRETRAIN);
    let pool_refs: Vec<&Tensor<T>> = pool.iter().collect();
    let val_refs: Vec<&Tensor<T>> = val.iter().collect();
    let (mae, store, report) = pretrain_mae(
        &cfg.vit,
        &cfg.pretrain,
        &pool_refs,
        &val_refs,
        &dir,
        "pretrain",
        cfg,
        seed,
    )?;
    write_checkpoint(&dir.join(FINAL_PARAMS), &store, cfg.precision)?;
    for (i, s) in val_subjects.iter().take(cfg.recon_panels).enumerate() {
        let plan = mae.plan(derive_seed(derive_seed(seed, 1), i as u64))?;
        write_recon_panel(&dir.join(format!("recon-{}.csv", s.id)), &mae, &store, &val[i], &plan)?;
    }
    write_report(&dir.join("report.toml"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CmrReport {
    pub phase: Phase,
    pub epochs: usize,
    pub initial_val_mse: f64,
    pub best_val_mse: f64,
    pub checksum: String,
}

fn cmr_val_mse<T: Scalar>(
    encoder: &CmrEncoder,
    store: &ParamStore<T>,
    vols: &[crate::cohort::CmrVolume<T>],
    subjects: &[&SubjectInfo],
    stats: &TargetStats,
    batch: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for (chunk, subj) in vols.chunks(batch).zip(subjects.chunks(batch)) {
        let mut g = Tape::new();
        let p = store.bind(&mut g, false);
        let refs: Vec<_> = chunk.iter().collect();
        let z = encoder.encode(&mut g, &p, &refs)?;
        let pred = encoder.predict(&mut g, &p, z)?;
        let ph: Vec<_> = subj.iter().map(|s| s.phenotypes).collect();
        let loss = phenotype_regression_loss(&mut g, pred, &ph, Some(stats))?;
        sum += g.value(loss).item().as_f64() * chunk.len() as f64;
    }
    Ok(sum / vols.len() as f64)
}

pub fn cmd_train_cmr<T: Scalar>(cfg: &RunConfig, layout: &Layout, phase: Phase) -> Result<CmrReport> {
    let cohort = open_cohort(layout)?;
    let dir = layout.cmr(phase);
    freeze(cfg, &dir)?;
    let train = split_subjects(&cohort, Split::Train)?;
    let val = split_subjects(&cohort, Split::Val)?;
    let train_vols = volumes::<T>(&cohort, &train, phase)?;
    let val_vols = volumes::<T>(&cohort, &val, phase)?;
    let encoder = CmrEncoder::new(&cfg.cmr.clone().with_phase(phase))?;
    let stats = TargetStats::fit(&train.iter().map(|s| s.phenotypes).collect::<Vec<_>>())?;
    write_report(&dir.join("target_stats.toml"), &stats)?;
    let seed = derive_seed(
        cfg.seed,
        match phase {
            Phase::Ed => SEED_CMR_ED,
            Phase::Es => SEED_CMR_ES,
        },
    );
    let mut store = ParamStore::new();
    encoder.init(&mut store, derive_seed(seed, 0));
    let tc = &cfg.cmr_train;
    let batch = tc.batch_size.max(1);
    let initial = cmr_val_mse(&encoder, &store, &val_vols, &val, &stats, batch)?;
    let mut trainer = Trainer::new(
        &dir,
        encoder.prefix(),
        tc,
        train.len().div_ceil(batch),
        Direction::Minimize,
        cfg.precision,
        seed,
        cfg.to_toml()?,
    )?;
    let mut epochs = 0;
    for epoch in 0..tc.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + epoch as u64)));
        let mut loss_sum = 0.0;
        for idx in order.chunks(batch) {
            let mut g = Tape::new();
            let p = store.bind(&mut g, true);
            let refs: Vec<_> = idx.iter().map(|&i| &train_vols[i]).collect();
            let z = encoder.encode(&mut g, &p, &refs)?;
            let pred = encoder.predict(&mut g, &p, z)?;
            let ph: Vec<_> = idx.iter().map(|&i| train[i].phenotypes).collect();
            let loss = phenotype_regression_loss(&mut g, pred, &ph, Some(&stats))?;
            loss_sum += g.value(loss).item().as_f64() * idx.len() as f64;
            let grads = g.backward(loss)?.into_named();
            trainer.step(&mut store, &grads)?;
        }
        let val_mse = cmr_val_mse(&encoder, &store, &val_vols, &val, &stats, batch)?;
        epochs = epoch + 1;
        if trainer.end_epoch(&store, epoch, loss_sum / train.len() as f64, val_mse)? {
            break;
        }
    }
    trainer.restore_best(&mut store)?;
    write_checkpoint(&dir.join(FINAL_PARAMS), &store, cfg.precision)?;
    let report = CmrReport {
        phase,
        epochs,
        initial_val_mse: initial,
        best_val_mse: trainer.early_stop.best.unwrap_or(f64::NAN),
        checksum: store.checksum(),
    };
    write_report(&dir.join("report.toml"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignReport {
    pub mode: AlignMode,
    pub epochs: usize,
    pub gallery: usize,
    pub chance_top1: f64,
    pub initial_top1: f64,
    pub initial_top5: f64,
    pub final_top1: f64,
    pub final_top5: f64,
    pub initial_val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub cmr_ed_checksum: String,
    pub cmr_es_checksum: String,
}

/// Validation loss over fixed consecutive batches, without gradients.
pub fn align_val_loss<T: Scalar>(
    model: &AlignModel,
    store: &ParamStore<T>,
    data: &AlignData<T>,
    batch: usize,
) -> Result<EpochStats> {
    let mut sums = [0.0; 4];
    let mut weight = 0.0;
    let mut steps = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch.max(2)).filter(|c| c.len() >= 2) {
        let mut g = Tape::new();
        let p = store.bind(&mut g, false);
        let tokens: Vec<&Tensor<T>> = idx.iter().map(|&i| &data.tokens[i]).collect();
        let l = model.batch_loss(
            &mut g,
            &p,
            &tokens,
            pick_rows(&data.ed, idx)?,
            pick_rows(&data.es, idx)?,
        )?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
        let w = idx.len() as f64;
        sums[0] += w * value(Some(l.total));
        sums[1] += w * value(Some(l.ecg_ed));
        sums[2] += w * value(l.ecg_es);
        sums[3] += w * value(l.ed_es);
        weight += w;
        steps += 1;
    }
    if steps == 0 {
        return Err(Error::invalid(format!(
            "{} validation subjects form no contrastive batch",
            data.len()
        )));
    }
    let dual = model.cfg.mode == AlignMode::DualPhase;
    Ok(EpochStats {
        steps,
        loss: sums[0] / weight,
        ecg_ed: sums[1] / weight,
        ecg_es: dual.then(|| sums[2] / weight),
        ed_es: dual.then(|| sums[3] / weight),
    })
}

fn pick_rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let w = t.shape()[1];
    Tensor::new(
        vec![idx.len(), w],
        idx.iter().flat_map(|&i| t.row(i).to_vec()).collect(),
    )
}

/// ECG tokens and frozen ED/ES embeddings for the given subjects.
fn align_data<T: Scalar>(
    cfg: &RunConfig,
    cohort: &Cohort,
    subjects: &[&SubjectInfo],
    encoders: [(&CmrEncoder, &ParamStore<T>); 2],
) -> Result<AlignData<T>> {
    let tokens = ecg_tokens::<T>(cohort, subjects, &cfg.preprocess, cfg.vit.patch_len)?;
    let [ed, es] = [Phase::Ed, Phase::Es].map(|phase| {
        let (enc, store) = encoders[usize::from(phase == Phase::Es)];
        let vols = volumes::<T>(cohort, subjects, phase)?;
        enc.embed_all(store, &vols, 16)
    });
    Ok(AlignData {
        tokens,
        ed: ed?,
        es: es?,
    })
}

pub fn cmd_align<T: Scalar>(cfg: &RunConfig, layout: &Layout, mode: AlignMode) -> Result<AlignReport> {
    let dir = layout.align(mode);
    let pretrained: ParamStore<T> = load_params(&layout.pretrain(), "pretrained ECG encoder", "pretrain-ecg")?;
    let ed_store: ParamStore<T> = load_params(&layout.cmr(Phase::Ed), "ED encoder", "train-cmr --phase ed")?;
    let es_store: ParamStore<T> = load_params(&layout.cmr(Phase::Es), "ES encoder", "train-cmr --phase es")?;
    let cohort = open_cohort(layout)?;
    freeze(cfg, &dir)?;
    let ed_enc = CmrEncoder::new(&cfg.cmr.clone().with_phase(Phase::Ed))?;
    let es_enc = CmrEncoder::new(&cfg.cmr.clone().with_phase(Phase::Es))?;
    let frozen = [("cmr_ed", &ed_store), ("cmr_es", &es_store)];
    let guard = FrozenGuard::new(&frozen);

    let encoders = [(&ed_enc, &ed_store), (&es_enc, &es_store)];
    let train = align_data(cfg, &cohort, &split_subjects(&cohort, Split::Train)?, encoders)?;
    let val = align_data(cfg, &cohort, &split_subjects(&cohort, Split::Val)?, encoders)?;
    let gallery = val.head(cfg.align.val_gallery)?;

    let align_cfg = AlignConfig {
        mode,
        ..cfg.align.clone()
    };
    let model = AlignModel::new(&align_cfg, EcgVit::new("ecg", &cfg.vit)?, cfg.cmr.embed_dim);
    let seed = derive_seed(cfg.seed, SEED_ALIGN);
    let mut store = pretrained.subset("ecg.");
    model.init_heads(&mut store, derive_seed(seed, 0));
    let (initial_top1, initial_top5) = model.retrieval(&store, &gallery.tokens, &gallery.ed)?;

    let tc = &cfg.align_train;
    let batch = tc.batch_size;
    let mut epochs = 0;
    let (mut initial_val_loss, mut best_val_loss) = (None, None);
    if mode != AlignMode::None {
        let mut log = AlignLog::create(&dir.join("align-metrics.csv"))?;
        let start = align_val_loss(&model, &store, &val, batch)?;
        initial_val_loss = Some(start.loss);
        log.record(0, &start, initial_top1, initial_top5)?;
        let mut trainer = Trainer::new(
            &dir,
            "align",
            tc,
            steps_per_epoch(train.len(), batch),
            Direction::Minimize,
            cfg.precision,
            seed,
            cfg.to_toml()?,
        )?;
        for epoch in 1..=tc.max_epochs {
            let stats = align_epoch(
                &model,
                &mut store,
                &mut trainer,
                &train,
                batch,
                derive_seed(seed, 1),
                epoch,
            )?;
            let val_stats = align_val_loss(&model, &store, &val, batch)?;
            let (t1, t5) = model.retrieval(&store, &gallery.tokens, &gallery.ed)?;
            log.record(epoch, &val_stats, t1, t5)?;
            epochs = epoch;
            if trainer.end_epoch(&store, epoch, stats.loss, val_stats.loss)? {
                break;
            }
        }
        trainer.restore_best(&mut store)?;
        best_val_loss = trainer.early_stop.best;
    }
    let (final_top1, final_top5) = model.retrieval(&store, &gallery.tokens, &gallery.ed)?;
    guard.verify(&frozen)?;
    let sums: Vec<String> = frozen
        .iter()
        .map(|(name, s)| format!("{name} {} unchanged\n", s.checksum()))
        .collect();
    write_text(&dir.join("frozen.log"), &sums.concat())?;
    write_checkpoint(&dir.join(FINAL_PARAMS), &store, cfg.precision)?;
    let report = AlignReport {
        mode,
        epochs,
        gallery: gallery.len(),
        chance_top1: 1.0 / gallery.len() as f64,
        initial_top1,
        initial_top5,
        final_top1,
        final_top5,
        initial_val_loss,
        best_val_loss,
        cmr_ed_checksum: ed_store.checksum(),
        cmr_es_checksum: es_store.checksum(),
    };
    write_report(&dir.join("report.toml"), &report)?;
    Ok(report)
}

/// Head inputs computed by a trainable ECG encoder from raw token tables.
pub struct FineTuneFeatures<'a, T: Scalar> {
    pub encoder: &'a EcgVit,
    pub tokens: [&'a [Tensor<T>]; 3],
}

impl<T: Scalar> FineTuneFeatures<'_, T> {
    fn table(&self, split: Split) -> &[Tensor<T>] {
        match split {
            Split::Val => self.tokens[1],
            Split::Test => self.tokens[2],
            _ => self.tokens[0],
        }
    }
}

impl<T: Scalar> Features<T> for FineTuneFeatures<'_, T> {
    fn width(&self) -> usize {
        self.encoder.cfg.embed_dim
    }

    fn len(&self, split: Split) -> usize {
        self.table(split).len()
    }

    fn rows(&self, g: &mut Tape<T>, p: &Bound, split: Split, idx: &[usize]) -> Result<Var> {
        let t = self.table(split);
        let refs: Vec<&Tensor<T>> = idx.iter().map(|&i| &t[i]).collect();
        let x = g.constant(stack_rows(&refs)?);
        self.encoder.encode(g, p, x, idx.len())
    }
}

/// Frozen trunk embeddings of every labelled split.
fn frozen_features<T: Scalar>(
    encoder: &EcgVit,
    store: &ParamStore<T>,
    tokens: &[Vec<Tensor<T>>; 3],
) -> Result<FrozenFeatures<T>> {
    let [a, b, c] = [0, 1, 2].map(|s| embed_ecg(encoder, store, &tokens[s], 64));
    FrozenFeatures::new(&a?, &b?, &c?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadsReport {
    pub rows: Vec<ResultRow>,
}

/// Trains every task head on one feature source and writes metrics and test
/// predictions into `dir`.
#[allow(clippy::too_many_arguments)]
fn run_heads<T: Scalar>(
    cfg: &RunConfig,
    head_cfg: &HeadConfig,
    tasks: &[crate::downstream::TaskSpec],
    features: &dyn Features<T>,
    base: &ParamStore<T>,
    splits: &[Vec<&SubjectInfo>; 3],
    dir: &Path,
    source: &str,
) -> Result<Vec<ResultRow>> {
    create_dir(dir)?;
    let mut metrics = ResultsWriter::create(&dir.join("metrics.csv"))?;
    let ppath = dir.join("predictions.csv");
    let csv_err = |e: csv::Error| Error::format(&ppath, e.to_string());
    let mut preds = csv::Writer::from_path(&ppath).map_err(csv_err)?;
    preds
        .write_record(["task_id", "subject_id", "prediction", "target"])
        .map_err(csv_err)?;
    let mut rows = Vec::new();
    for (k, task) in tasks.iter().enumerate() {
        let t = targets(splits, &task.target)?;
        if task.kind == TaskKind::Binary && !has_both_classes(&t) {
            eprintln!(
                "warning: {source}/{}: a split lacks one class, task skipped",
                task.task_id
            );
            continue;
        }
        let seed = derive_seed(derive_seed(cfg.seed, SEED_HEADS), k as u64);
        let (outcome, _) = train_head(task, head_cfg, features, &t, base.clone(), dir, cfg.precision, seed)?;
        let row = ResultRow {
            task_id: task.task_id.clone(),
            kind: task.kind,
            metric_name: task.metric,
            value: outcome.test_metric,
            n_test: t.test.len(),
            seed: cfg.seed,
            embedding_source: source.to_string(),
        };
        metrics.write(&row)?;
        for ((s, p), y) in splits[2].iter().zip(&outcome.test_predictions).zip(&t.test) {
            preds
                .write_record([task.task_id.clone(), s.id.clone(), p.to_string(), y.to_string()])
                .map_err(csv_err)?;
        }
        rows.push(row);
    }
    preds.flush().map_err(|e| Error::io(&ppath, e))?;
    Ok(rows)
}

fn has_both_classes(t: &crate::downstream::Targets) -> bool {
    [&t.train, &t.val, &t.test]
        .iter()
        .all(|ys| ys.iter().any(|&y| y > 0.5) && ys.iter().any(|&y| y <= 0.5))
}

pub fn cmd_train_heads<T: Scalar>(cfg: &RunConfig, layout: &Layout) -> Result<HeadsReport> {
    let mut stores = Vec::new();
    for &source in &cfg.sources {
        let producer = format!("align --mode {}", source.as_str());
        stores.push(load_params::<T>(
            &layout.align(source),
            "aligned ECG encoder",
            &producer,
        )?);
    }
    let cohort = open_cohort(layout)?;
    let splits = labelled_splits(&cohort)?;
    let tokens: [Vec<Tensor<T>>; 3] = {
        let [a, b, c] = [0, 1, 2].map(|s| ecg_tokens::<T>(&cohort, &splits[s], &cfg.preprocess, cfg.vit.patch_len));
        [a?, b?, c?]
    };
    let encoder = EcgVit::new("ecg", &cfg.vit)?;
    let mut rows = Vec::new();
    for (&source, store) in cfg.sources.iter().zip(&stores) {
        let dir = layout.heads(source);
        freeze(cfg, &dir)?;
        if cfg.heads.fine_tune {
            let features = FineTuneFeatures {
                encoder: &encoder,
                tokens: [&tokens[0], &tokens[1], &tokens[2]],
            };
            let base = store.subset("ecg.");
            rows.extend(run_heads(
                cfg,
                &cfg.heads,
                &cfg.tasks,
                &features,
                &base,
                &splits,
                &dir,
                source.as_str(),
            )?);
        } else {
            let features = frozen_features(&encoder, store, &tokens)?;
            rows.extend(run_heads(
                cfg,
                &cfg.heads,
                &cfg.tasks,
                &features,
                &ParamStore::new(),
                &splits,
                &dir,
                source.as_str(),
            )?);
        }
    }
    Ok(HeadsReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceSummary {
    pub source: AlignMode,
    pub functional_mean_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub sources: Vec<SourceSummary>,
    /// Functional mean R² of dual_phase minus that of none.
    pub functional_uplift: Option<f64>,
    /// The same uplift relative to |none|, in percent.
    pub functional_uplift_pct: Option<f64>,
}

pub fn cmd_eval(cfg: &RunConfig, layout: &Layout) -> Result<EvalSummary> {
    let mut all = Vec::new();
    for &source in &cfg.sources {
        let path = layout.heads(source).join("metrics.csv");
        require(&path, &format!("{} head metrics", source.as_str()), "train-heads")?;
        all.push((source, read_results(&path)?));
    }
    let dir = layout.eval();
    freeze(cfg, &dir)?;
    let mut writer = ResultsWriter::create(&dir.join("results.csv"))?;
    let mut sources = Vec::new();
    for (source, rows) in &all {
        for r in rows {
            writer.write(r)?;
        }
        let functional: Vec<f64> = rows
            .iter()
            .filter(|r| r.kind == TaskKind::Regression && FUNCTIONAL_TASKS.contains(&r.task_id.as_str()))
            .map(|r| r.value)
            .collect();
        let mean = functional.iter().sum::<f64>() / functional.len() as f64;
        sources.push(SourceSummary {
            source: *source,
            functional_mean_r2: mean,
        });
    }
    let find = |m: AlignMode| sources.iter().find(|s| s.source == m).map(|s| s.functional_mean_r2);
    let uplift = find(AlignMode::DualPhase).zip(find(AlignMode::None));
    let summary = EvalSummary {
        functional_uplift: uplift.map(|(d, b)| d - b),
        functional_uplift_pct: uplift.map(|(d, b)| 100.0 * (d - b) / b.abs()),
        sources,
    };
    write_report(&dir.join("summary.toml"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct AblateRow {
    pub preset: String,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub params: usize,
    pub qrs_count_r2: f64,
    pub qrs_ms_r2: f64,
    pub heart_rate_r2: f64,
}

pub fn cmd_ablate_vit<T: Scalar>(cfg: &RunConfig, layout: &Layout) -> Result<Vec<AblateRow>> {
    let cohort = open_cohort(layout)?;
    let dir = layout.ablate();
    freeze(cfg, &dir)?;
    let splits = labelled_splits(&cohort)?;
    let patch = cfg.vit.patch_len;
    let tokens: [Vec<Tensor<T>>; 3] = {
        let [a, b, c] = [0, 1, 2].map(|s| ecg_tokens::<T>(&cohort, &splits[s], &cfg.preprocess, patch));
        [a?, b?, c?]
    };
    let extra = ecg_tokens::<T>(&cohort, &cohort.split(Split::EcgOnly), &cfg.preprocess, patch)?;
    let pool: Vec<&Tensor<T>> = tokens[0].iter().chain(&extra).collect();
    let val: Vec<&Tensor<T>> = tokens[1].iter().collect();
    let tasks = probe_tasks();
    let path = dir.join("table.csv");
    let csv_err = |e: csv::Error| Error::format(&path, e.to_string());
    let mut table = csv::Writer::from_writer(File::create(&path).map_err(|e| Error::io(&path, e))?);
    let mut out = Vec::new();
    for (k, &preset) in cfg.ablate.presets.iter().enumerate() {
        let (layers, heads, embed_dim) = preset.dims();
        let vit = VitConfig {
            layers,
            heads,
            embed_dim,
            ..cfg.vit.clone()
        };
        let sub = dir.join(preset.to_string());
        create_dir(&sub)?;
        let seed = derive_seed(derive_seed(cfg.seed, SEED_ABLATE), k as u64);
        let (mae, store, _) = pretrain_mae(&vit, &cfg.ablate.pretrain, &pool, &val, &sub, "pretrain", cfg, seed)?;
        let features = frozen_features(&mae.encoder, &store, &tokens)?;
        let rows = run_heads(
            cfg,
            &cfg.ablate.probe,
            &tasks,
            &features,
            &ParamStore::new(),
            &splits,
            &sub,
            &preset.to_string(),
        )?;
        let r2 = |id: &str| rows.iter().find(|r| r.task_id == id).map_or(f64::NAN, |r| r.value);
        let row = AblateRow {
            preset: preset.to_string(),
            layers,
            heads,
            embed_dim,
            params: count_params(&vit),
            qrs_count_r2: r2("qrs_count"),
            qrs_ms_r2: r2("qrs_ms"),
            heart_rate_r2: r2("heart_rate"),
        };
        table.serialize(&row).map_err(csv_err)?;
        table.flush().map_err(|e| Error::io(&path, e))?;
        out.push(row);
    }
    Ok(out)
}
