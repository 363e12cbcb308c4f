//! Contrastive alignment of ECG embeddings with frozen ED/ES volume
//! embeddings in a shared unit-norm space.

use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::derive_seed;
use crate::encoders::vit::{stack_rows, EcgVit};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::Trainer;

/// Name of the learned log-temperature parameter.
pub const LOG_TAU: &str = "align.log_tau";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// No alignment; the pretrained ECG encoder is used as is.
    None,
    /// ECG to end-diastole only.
    EdOnly,
    /// ECG to ED, ECG to ES and ED to ES.
    DualPhase,
}

impl AlignMode {
    pub const ALL: [AlignMode; 3] = [AlignMode::None, AlignMode::EdOnly, AlignMode::DualPhase];

    pub fn as_str(self) -> &'static str {
        match self {
            AlignMode::None => "none",
            AlignMode::EdOnly => "ed_only",
            AlignMode::DualPhase => "dual_phase",
        }
    }
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown alignment mode {s:?} (none, ed_only, dual_phase)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub mode: AlignMode,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub temperature: f64,
    pub learn_temperature: bool,
    /// Average each pair over both directions.
    pub symmetric: bool,
    /// Subjects in the validation retrieval gallery.
    pub val_gallery: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            mode: AlignMode::DualPhase,
            hidden_dim: 512,
            output_dim: 128,
            temperature: 0.1,
            learn_temperature: false,
            symmetric: false,
            val_gallery: 200,
        }
    }
}

/// Two affine layers with a GELU between, followed by L2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub input_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl ProjectionHead {
    pub fn new(prefix: &str, input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            fc1: Linear::new(&format!("{prefix}.fc1"), input_dim, hidden_dim),
            fc2: Linear::new(&format!("{prefix}.fc2"), hidden_dim, output_dim),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        self.fc1.init(store, init, 1.0);
        self.fc2.init(store, init, 1.0);
    }

    /// `[rows, input_dim]` to unit rows `[rows, output_dim]`. A row whose
    /// pre-normalization vector is exactly zero is a `NonFinite` error.
    pub fn project<T: Scalar>(&self, g: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::shape(
                "project",
                format!("input {:?}, head expects width {}", s, self.input_dim),
            ));
        }
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, p, h)?;
        g.l2_normalize(h)
    }
}

/// Softmax temperature: a fixed constant or `exp` of a tape variable.
#[derive(Debug, Clone, Copy)]
pub enum Temperature {
    Fixed(f64),
    Learned(Var),
}

impl Temperature {
    fn divide<T: Scalar>(self, g: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Temperature::Fixed(tau) => g.scale(x, 1.0 / tau),
            Temperature::Learned(log_tau) => {
                let neg = g.scale(log_tau, -1.0)?;
                let inv = g.exp(neg)?;
                g.mul(x, inv)
            }
        }
    }
}

/// Directional contrastive loss of `za` against `zb`: row `i` of `za`
/// should pick row `i` of `zb` among all rows of `zb`.
pub fn info_nce<T: Scalar>(g: &mut Tape<T>, za: Var, zb: Var, tau: Temperature) -> Result<Var> {
    if let Temperature::Fixed(t) = tau {
        if !(t > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {t}")));
        }
    }
    let (sa, sb) = (g.shape(za), g.shape(zb));
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape("info_nce", format!("{sa:?} vs {sb:?}")));
    }
    let n = sa[0];
    let sim = g.matmul_t(za, zb)?;
    let logits = tau.divide(g, sim)?;
    let lse = g.logsumexp(logits)?;
    let flat = g.reshape(logits, &[n * n])?;
    let pos = g.index_rows(flat, &(0..n).map(|i| i * n + i).collect::<Vec<_>>())?;
    let per_row = g.sub(lse, pos)?;
    g.mean(per_row)
}

fn pair_loss<T: Scalar>(g: &mut Tape<T>, za: Var, zb: Var, tau: Temperature, symmetric: bool) -> Result<Var> {
    let forward = info_nce(g, za, zb, tau)?;
    if !symmetric {
        return Ok(forward);
    }
    let back = info_nce(g, zb, za, tau)?;
    let both = g.add(forward, back)?;
    g.scale(both, 0.5)
}

/// Total and per-pair terms; absent terms are not part of the mode.
#[derive(Debug, Clone, Copy)]
pub struct AlignLoss {
    pub total: Var,
    pub ecg_ed: Var,
    pub ecg_es: Option<Var>,
    pub ed_es: Option<Var>,
}

/// Mean of the ECG to ED, ECG to ES and ED to ES terms.
pub fn dual_phase_loss<T: Scalar>(
    g: &mut Tape<T>,
    z_ecg: Var,
    z_ed: Var,
    z_es: Var,
    tau: Temperature,
    symmetric: bool,
) -> Result<AlignLoss> {
    let ecg_ed = pair_loss(g, z_ecg, z_ed, tau, symmetric)?;
    let ecg_es = pair_loss(g, z_ecg, z_es, tau, symmetric)?;
    let ed_es = pair_loss(g, z_ed, z_es, tau, symmetric)?;
    let s = g.add(ecg_ed, ecg_es)?;
    let s = g.add(s, ed_es)?;
    Ok(AlignLoss {
        total: g.scale(s, 1.0 / 3.0)?,
        ecg_ed,
        ecg_es: Some(ecg_es),
        ed_es: Some(ed_es),
    })
}

/// Fraction of rows whose true partner is among the `k` most cosine-similar
/// rows of `gallery`. Ties with the partner count in its favour.
pub fn retrieval_eval<T: Scalar>(queries: &Tensor<T>, gallery: &Tensor<T>, k: usize) -> Result<f64> {
    if queries.rank() != 2 || queries.shape() != gallery.shape() {
        return Err(Error::shape(
            "retrieval_eval",
            format!("{:?} vs {:?}", queries.shape(), gallery.shape()),
        ));
    }
    let n = queries.shape()[0];
    if k == 0 || k > n {
        return Err(Error::invalid(format!("top-{k} retrieval over a gallery of {n}")));
    }
    let unit = |t: &Tensor<T>| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let row: Vec<f64> = t.row(i).iter().map(|v| v.as_f64()).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                row.into_iter().map(|v| v / norm).collect()
            })
            .collect()
    };
    let (q, gal) = (unit(queries), unit(gallery));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let hits = (0..n)
        .filter(|&i| {
            let own = dot(&q[i], &gal[i]);
            let ahead = (0..n).filter(|&j| j != i && dot(&q[i], &gal[j]) > own).count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// ECG trunk plus the three projection heads.
#[derive(Debug, Clone)]
pub struct AlignModel {
    pub cfg: AlignConfig,
    pub ecg: EcgVit,
    pub ecg_head: ProjectionHead,
    pub ed_head: ProjectionHead,
    pub es_head: ProjectionHead,
}

impl AlignModel {
    pub fn new(cfg: &AlignConfig, ecg: EcgVit, cmr_dim: usize) -> Self {
        let (h, o) = (cfg.hidden_dim, cfg.output_dim);
        Self {
            cfg: cfg.clone(),
            ecg_head: ProjectionHead::new("align.ecg", ecg.cfg.embed_dim, h, o),
            ed_head: ProjectionHead::new("align.ed", cmr_dim, h, o),
            es_head: ProjectionHead::new("align.es", cmr_dim, h, o),
            ecg,
        }
    }

    /// Adds head parameters (and the log temperature when learned) to a
    /// store that already holds the ECG encoder.
    pub fn init_heads<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let mut init = Init::new(seed);
        self.ecg_head.init(store, &mut init);
        self.ed_head.init(store, &mut init);
        self.es_head.init(store, &mut init);
        if self.cfg.learn_temperature {
            store.insert(LOG_TAU, Tensor::vector(vec![T::of(self.cfg.temperature.ln())]));
        }
    }

    fn temperature(&self, p: &Bound) -> Result<Temperature> {
        Ok(if self.cfg.learn_temperature {
            Temperature::Learned(p.get(LOG_TAU)?)
        } else {
            Temperature::Fixed(self.cfg.temperature)
        })
    }

    /// Loss for one batch. `tokens` are per-subject token tables; `ed` and
    /// `es` hold the frozen volume embeddings of the same subjects in order
    /// and enter the tape as constants.
    pub fn batch_loss<T: Scalar>(
        &self,
        g: &mut Tape<T>,
        p: &Bound,
        tokens: &[&Tensor<T>],
        ed: Tensor<T>,
        es: Tensor<T>,
    ) -> Result<AlignLoss> {
        let n = tokens.len();
        if ed.shape()[0] != n || es.shape()[0] != n {
            return Err(Error::shape(
                "align_batch",
                format!("{n} ECGs with {} ED and {} ES embeddings", ed.shape()[0], es.shape()[0]),
            ));
        }
        let tau = self.temperature(p)?;
        let x = g.constant(stack_rows(tokens)?);
        let h = self.ecg.encode(g, p, x, n)?;
        let z_ecg = self.ecg_head.project(g, p, h)?;
        let ed = g.constant(ed);
        let z_ed = self.ed_head.project(g, p, ed)?;
        match self.cfg.mode {
            AlignMode::None => Err(Error::Config("alignment mode none has no training objective".into())),
            AlignMode::EdOnly => {
                let l = pair_loss(g, z_ecg, z_ed, tau, self.cfg.symmetric)?;
                Ok(AlignLoss {
                    total: l,
                    ecg_ed: l,
                    ecg_es: None,
                    ed_es: None,
                })
            }
            AlignMode::DualPhase => {
                let es = g.constant(es);
                let z_es = self.es_head.project(g, p, es)?;
                dual_phase_loss(g, z_ecg, z_ed, z_es, tau, self.cfg.symmetric)
            }
        }
    }

    /// Pooled ECG trunk embeddings, `[n, embed_dim]`, without gradients.
    pub fn embed_ecg<T: Scalar>(&self, store: &ParamStore<T>, tokens: &[Tensor<T>], batch: usize) -> Result<Tensor<T>> {
        embed_ecg(&self.ecg, store, tokens, batch)
    }

    /// Unit-norm projections of precomputed embeddings through `head`.
    pub fn project_all<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        head: &ProjectionHead,
        embeddings: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Tape::new();
        let p = store.bind_prefix(&mut g, "align.", false);
        let x = g.constant(embeddings.clone());
        let z = head.project(&mut g, &p, x)?;
        Ok(g.value(z).clone())
    }

    /// Top-1 and top-5 ECG to ED retrieval over the given subjects.
    pub fn retrieval<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tokens: &[Tensor<T>],
        ed: &Tensor<T>,
    ) -> Result<(f64, f64)> {
        let h = self.embed_ecg(store, tokens, 64)?;
        let q = self.project_all(store, &self.ecg_head, &h)?;
        let gal = self.project_all(store, &self.ed_head, ed)?;
        let n = tokens.len();
        Ok((retrieval_eval(&q, &gal, 1)?, retrieval_eval(&q, &gal, 5.min(n))?))
    }
}

/// Pooled trunk embeddings of `encoder`, `[n, embed_dim]`, without gradients.
pub fn embed_ecg<T: Scalar>(
    encoder: &EcgVit,
    store: &ParamStore<T>,
    tokens: &[Tensor<T>],
    batch: usize,
) -> Result<Tensor<T>> {
    let d = encoder.cfg.embed_dim;
    let mut rows = Vec::with_capacity(tokens.len() * d);
    for chunk in tokens.chunks(batch.max(1)) {
        let mut g = Tape::new();
        let p = store.bind_prefix(&mut g, &format!("{}.", encoder.prefix()), false);
        let refs: Vec<&Tensor<T>> = chunk.iter().collect();
        let x = g.constant(stack_rows(&refs)?);
        let z = encoder.encode(&mut g, &p, x, chunk.len())?;
        rows.extend_from_slice(g.value(z).data());
    }
    Tensor::new(vec![tokens.len(), d], rows)
}

/// Frozen-encoder checksums taken before training.
#[derive(Debug, Clone)]
pub struct FrozenGuard {
    checksums: Vec<(String, String)>,
}

impl FrozenGuard {
    pub fn new<T: Scalar>(stores: &[(&str, &ParamStore<T>)]) -> Self {
        Self {
            checksums: stores.iter().map(|(n, s)| (n.to_string(), s.checksum())).collect(),
        }
    }

    pub fn verify<T: Scalar>(&self, stores: &[(&str, &ParamStore<T>)]) -> Result<()> {
        for ((name, before), (_, store)) in self.checksums.iter().zip(stores) {
            let now = store.checksum();
            if &now != before {
                return Err(Error::FrozenViolation(format!("{name} changed: {before} -> {now}")));
            }
        }
        Ok(())
    }
}

/// Token tables and frozen volume embeddings for one split, row-aligned.
pub struct AlignData<T: Scalar> {
    pub tokens: Vec<Tensor<T>>,
    pub ed: Tensor<T>,
    pub es: Tensor<T>,
}

impl<T: Scalar> AlignData<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn rows(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
        let w = t.shape()[1];
        Tensor::new(
            vec![idx.len(), w],
            idx.iter().flat_map(|&i| t.row(i).to_vec()).collect(),
        )
    }

    /// The first `n` subjects.
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Ok(Self {
            tokens: self.tokens[..idx.len()].to_vec(),
            ed: Self::rows(&self.ed, &idx)?,
            es: Self::rows(&self.es, &idx)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub steps: usize,
    pub loss: f64,
    pub ecg_ed: f64,
    pub ecg_es: Option<f64>,
    pub ed_es: Option<f64>,
}

/// Number of optimizer steps one epoch takes; a trailing batch of a single
/// subject has no negatives and is dropped.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    let full = n / batch;
    full + usize::from(n % batch >= 2)
}

/// One pass over `data` in a seeded shuffled order. Only parameters in
/// `store` (ECG trunk and heads) are updated.
pub fn align_epoch<T: Scalar>(
    model: &AlignModel,
    store: &mut ParamStore<T>,
    trainer: &mut Trainer<T>,
    data: &AlignData<T>,
    batch: usize,
    seed: u64,
    epoch: usize,
) -> Result<EpochStats> {
    if batch < 2 {
        return Err(Error::invalid(format!(
            "contrastive batch size must be at least 2, got {batch}"
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
    let mut sums = [0.0; 4];
    let mut weight = 0.0;
    let mut steps = 0;
    for idx in order.chunks(batch).filter(|c| c.len() >= 2) {
        let mut g = Tape::new();
        let p = store.bind(&mut g, true);
        let tokens: Vec<&Tensor<T>> = idx.iter().map(|&i| &data.tokens[i]).collect();
        let ed = AlignData::rows(&data.ed, idx)?;
        let es = AlignData::rows(&data.es, idx)?;
        let l = model.batch_loss(&mut g, &p, &tokens, ed, es)?;
        let value = |v: Option<Var>| v.map(|v| g.value(v).item().as_f64());
        let w = idx.len() as f64;
        sums[0] += w * value(Some(l.total)).unwrap_or(0.0);
        sums[1] += w * value(Some(l.ecg_ed)).unwrap_or(0.0);
        sums[2] += w * value(l.ecg_es).unwrap_or(0.0);
        sums[3] += w * value(l.ed_es).unwrap_or(0.0);
        weight += w;
        let grads = g.backward(l.total)?.into_named();
        trainer.step(store, &grads)?;
        steps += 1;
    }
    if steps == 0 {
        return Err(Error::invalid(format!(
            "{} subjects form no contrastive batch",
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

/// Per-epoch alignment metrics CSV.
pub struct AlignLog {
    writer: csv::Writer<File>,
    path: PathBuf,
}

impl AlignLog {
    pub const COLUMNS: [&'static str; 7] = [
        "epoch",
        "dual_loss",
        "ecg_ed",
        "ecg_es",
        "ed_es",
        "val_top1",
        "val_top5",
    ];

    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        writer
            .write_record(Self::COLUMNS)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn record(&mut self, epoch: usize, stats: &EpochStats, top1: f64, top5: f64) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let row = [
            epoch.to_string(),
            stats.loss.to_string(),
            stats.ecg_ed.to_string(),
            opt(stats.ecg_es),
            opt(stats.ed_es),
            top1.to_string(),
            top5.to_string(),
        ];
        self.writer
            .write_record(&row)
            .map_err(|e| Error::format(&self.path, e.to_string()))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}
