//! Phase-specific residual 3D convolutional encoders with a phenotype
//! regression head.

use serde::{Deserialize, Serialize};

use crate::cohort::cmr::{CmrVolume, Phase};
use crate::cohort::phenotype::{PhenotypeVector, PHENOTYPE_NAMES};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmrEncoderConfig {
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub embed_dim: usize,
    /// Stem kernel, stride and padding as (depth, height, width).
    pub stem_kernel: [usize; 3],
    pub stem_stride: [usize; 3],
    pub stem_padding: [usize; 3],
    /// Bottleneck blocks (1x1, 3x3x3, 1x1 with 4x expansion) instead of
    /// two 3x3x3 convolutions.
    pub bottleneck: bool,
    pub phase: Phase,
}

impl Default for CmrEncoderConfig {
    fn default() -> Self {
        Self {
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: vec![2, 2, 2, 2],
            embed_dim: 256,
            stem_kernel: [3, 7, 7],
            stem_stride: [1, 2, 2],
            stem_padding: [1, 3, 3],
            bottleneck: false,
            phase: Phase::Ed,
        }
    }
}

impl CmrEncoderConfig {
    /// 50-layer bottleneck layout with a 2048-wide embedding.
    pub fn full_scale(phase: Phase) -> Self {
        Self {
            stage_widths: vec![64, 128, 256, 512],
            blocks_per_stage: vec![3, 4, 6, 3],
            embed_dim: 2048,
            bottleneck: true,
            phase,
            ..Self::default()
        }
    }

    pub fn with_phase(mut self, phase: Phase) -> Self {
        self.phase = phase;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return Err(Error::Config(format!(
                "{} stage widths for {} stage block counts",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.stage_widths.contains(&0) || self.blocks_per_stage.contains(&0) || self.embed_dim == 0 {
            return Err(Error::Config(
                "stage widths, block counts and embed_dim must be positive".into(),
            ));
        }
        if self.stem_stride.contains(&0) || self.stem_kernel.contains(&0) {
            return Err(Error::Config("stem kernel and stride must be positive".into()));
        }
        Ok(())
    }

    /// Channels leaving the last stage.
    pub fn trunk_width(&self) -> usize {
        let last = *self.stage_widths.last().unwrap_or(&0);
        if self.bottleneck {
            4 * last
        } else {
            last
        }
    }
}

/// Parameter prefix of the encoder for `phase`.
pub fn cmr_prefix(phase: Phase) -> &'static str {
    match phase {
        Phase::Ed => "cmr_ed",
        Phase::Es => "cmr_es",
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: String,
    shape: [usize; 5],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Conv {
    fn new(
        name: String,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        Self {
            weight: format!("{name}.w"),
            shape: [c_out, c_in, kernel[0], kernel[1], kernel[2]],
            stride,
            padding,
        }
    }

    fn cube(name: String, c_in: usize, c_out: usize, stride: [usize; 3]) -> Self {
        Self::new(name, c_in, c_out, [3, 3, 3], stride, [1, 1, 1])
    }

    fn point(name: String, c_in: usize, c_out: usize, stride: [usize; 3]) -> Self {
        Self::new(name, c_in, c_out, [1, 1, 1], stride, [0, 0, 0])
    }

    fn fan_in(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// He-normal, or zeros for the last convolution of a residual branch.
    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init, zero: bool) {
        let t = if zero {
            Tensor::zeros(&self.shape)
        } else {
            init.normal(&self.shape, (2.0 / self.fan_in() as f64).sqrt())
        };
        store.insert(&self.weight, t);
    }

    fn forward<T: Scalar>(&self, g: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv3d(x, p.get(&self.weight)?, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    branch: Vec<Conv>,
    shortcut: Option<Conv>,
}

impl ResBlock {
    fn forward<T: Scalar>(&self, g: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.branch.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            if i + 1 < self.branch.len() {
                h = g.relu(h)?;
            }
        }
        let skip = match &self.shortcut {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        g.relu(sum)
    }
}

/// One phase's volume encoder.
#[derive(Debug, Clone)]
pub struct CmrEncoder {
    pub cfg: CmrEncoderConfig,
    prefix: String,
    stem: Conv,
    blocks: Vec<ResBlock>,
    proj: Option<Linear>,
    head: Linear,
}

impl CmrEncoder {
    pub fn new(cfg: &CmrEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let prefix = cmr_prefix(cfg.phase).to_string();
        let stem = Conv::new(
            format!("{prefix}.stem"),
            1,
            cfg.stage_widths[0],
            cfg.stem_kernel,
            cfg.stem_stride,
            cfg.stem_padding,
        );
        let expansion = if cfg.bottleneck { 4 } else { 1 };
        let mut c_in = cfg.stage_widths[0];
        let mut blocks = Vec::new();
        for (s, (&w, &n)) in cfg.stage_widths.iter().zip(&cfg.blocks_per_stage).enumerate() {
            for b in 0..n {
                let name = format!("{prefix}.stage{s}.block{b}");
                let stride = if s > 0 && b == 0 { [1, 2, 2] } else { [1, 1, 1] };
                let c_out = w * expansion;
                let branch = if cfg.bottleneck {
                    vec![
                        Conv::point(format!("{name}.conv1"), c_in, w, [1, 1, 1]),
                        Conv::cube(format!("{name}.conv2"), w, w, stride),
                        Conv::point(format!("{name}.conv3"), w, c_out, [1, 1, 1]),
                    ]
                } else {
                    vec![
                        Conv::cube(format!("{name}.conv1"), c_in, w, stride),
                        Conv::cube(format!("{name}.conv2"), w, c_out, [1, 1, 1]),
                    ]
                };
                let shortcut = (c_in != c_out || stride != [1, 1, 1])
                    .then(|| Conv::point(format!("{name}.shortcut"), c_in, c_out, stride));
                blocks.push(ResBlock { branch, shortcut });
                c_in = c_out;
            }
        }
        let width = cfg.trunk_width();
        let proj = (width != cfg.embed_dim).then(|| Linear::new(&format!("{prefix}.proj"), width, cfg.embed_dim));
        let head = Linear::new(&format!("{prefix}.pheno"), cfg.embed_dim, PHENOTYPE_NAMES.len());
        Ok(Self {
            cfg: cfg.clone(),
            prefix,
            stem,
            blocks,
            proj,
            head,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let mut init = Init::new(seed);
        self.stem.init(store, &mut init, false);
        for b in &self.blocks {
            let last = b.branch.len() - 1;
            for (i, c) in b.branch.iter().enumerate() {
                c.init(store, &mut init, i == last);
            }
            if let Some(s) = &b.shortcut {
                s.init(store, &mut init, false);
            }
        }
        if let Some(p) = &self.proj {
            p.init(store, &mut init, 1.0);
        }
        self.head.init(store, &mut init, 1.0);
    }

    fn check<T: Scalar>(&self, vol: &CmrVolume<T>) -> Result<()> {
        if vol.phase != self.cfg.phase {
            return Err(Error::invalid(format!(
                "{} volume given to the {} encoder",
                vol.phase, self.cfg.phase
            )));
        }
        if vol.intensities.rank() != 3 {
            return Err(Error::shape(
                "cmr_encode",
                format!("volume {:?}, expected [slices, H, W]", vol.intensities.shape()),
            ));
        }
        Ok(())
    }

    /// `[batch, embed_dim]`; each volume is its own subgraph on `g`.
    pub fn encode<T: Scalar>(&self, g: &mut Tape<T>, p: &Bound, volumes: &[&CmrVolume<T>]) -> Result<Var> {
        if volumes.is_empty() {
            return Err(Error::invalid("empty volume batch"));
        }
        let mut pooled = Vec::with_capacity(volumes.len());
        for vol in volumes {
            self.check(vol)?;
            let mut shape = vec![1];
            shape.extend_from_slice(vol.intensities.shape());
            let x = g.constant(vol.intensities.reshape(&shape)?);
            let mut h = self.stem.forward(g, p, x)?;
            h = g.relu(h)?;
            for b in &self.blocks {
                h = b.forward(g, p, h)?;
            }
            let s = g.shape(h).to_vec();
            let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
            let avg = g.mean_axis(flat, 1)?;
            pooled.push(g.reshape(avg, &[1, s[0]])?);
        }
        let feats = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat(&pooled)?
        };
        match &self.proj {
            Some(l) => l.forward(g, p, feats),
            None => Ok(feats),
        }
    }

    /// Linear phenotype predictions `[batch, 13]` in standardized units.
    pub fn predict<T: Scalar>(&self, g: &mut Tape<T>, p: &Bound, embedding: Var) -> Result<Var> {
        self.head.forward(g, p, embedding)
    }

    /// Embeddings of every volume without recording gradients, `[n, embed_dim]`.
    pub fn embed_all<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        volumes: &[CmrVolume<T>],
        batch: usize,
    ) -> Result<Tensor<T>> {
        let mut rows = Vec::with_capacity(volumes.len() * self.cfg.embed_dim);
        for chunk in volumes.chunks(batch.max(1)) {
            let mut g = Tape::new();
            let p = store.bind_prefix(&mut g, &self.prefix, false);
            let refs: Vec<&CmrVolume<T>> = chunk.iter().collect();
            let z = self.encode(&mut g, &p, &refs)?;
            rows.extend_from_slice(g.value(z).data());
        }
        Tensor::new(vec![volumes.len(), self.cfg.embed_dim], rows)
    }
}

/// Per-phenotype mean and standard deviation from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetStats {
    pub fn fit(train: &[PhenotypeVector]) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::invalid("target statistics need at least two training subjects"));
        }
        let n = train.len() as f64;
        let k = PHENOTYPE_NAMES.len();
        let mut mean = vec![0.0; k];
        for ph in train {
            for (m, v) in mean.iter_mut().zip(ph.values()) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; k];
        for ph in train {
            for ((s, v), m) in std.iter_mut().zip(ph.values()).zip(&mean) {
                *s += (v - m) * (v - m) / (n - 1.0);
            }
        }
        for s in &mut std {
            *s = s.sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, ph: &PhenotypeVector) -> Vec<f64> {
        ph.values()
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// `[n, 13]` standardized targets.
    pub fn table<T: Scalar>(&self, targets: &[PhenotypeVector]) -> Result<Tensor<T>> {
        let data = targets.iter().flat_map(|ph| self.standardize(ph)).map(T::of).collect();
        Tensor::new(vec![targets.len(), PHENOTYPE_NAMES.len()], data)
    }
}

/// MSE between linear-head predictions and standardized targets.
pub fn phenotype_regression_loss<T: Scalar>(
    g: &mut Tape<T>,
    predictions: Var,
    targets: &[PhenotypeVector],
    stats: Option<&TargetStats>,
) -> Result<Var> {
    let stats = stats.ok_or_else(|| Error::Missing("phenotype standardization statistics".into()))?;
    let table = g.constant(stats.table(targets)?);
    g.mse(predictions, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::cmr::{BBox, N_SLICES};
    use crate::cohort::phenotype::sample_phenotypes;
    use crate::tensor::finite_diff_check_many;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(phase: Phase) -> CmrEncoderConfig {
        CmrEncoderConfig {
            stage_widths: vec![2, 4],
            blocks_per_stage: vec![1, 1],
            embed_dim: 6,
            stem_kernel: [1, 4, 4],
            stem_stride: [1, 4, 4],
            stem_padding: [0, 0, 0],
            bottleneck: false,
            phase,
        }
    }

    fn volume(phase: Phase, hw: usize, seed: u64) -> CmrVolume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CmrVolume {
            intensities: Tensor::from_fn(&[N_SLICES, hw, hw], |_| rng.random_range(0.0..1.0)),
            phase,
            pixel_mm: 2.0,
            slice_mm: 20.0,
            bbox: BBox {
                y0: 0.0,
                y1: 1.0,
                x0: 0.0,
                x1: 1.0,
            },
        }
    }

    fn embed(enc: &CmrEncoder, store: &ParamStore<f64>, vols: &[CmrVolume<f64>]) -> Tensor<f64> {
        enc.embed_all(store, vols, 4).unwrap()
    }

    #[test]
    fn default_width_and_finite_on_zero_volume() {
        let enc = CmrEncoder::new(&CmrEncoderConfig::default()).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, 0);
        let mut zero = volume(Phase::Ed, 32, 0);
        zero.intensities = Tensor::zeros(&[N_SLICES, 32, 32]);
        let z = embed(&enc, &store, &[zero]);
        assert_eq!(z.shape(), &[1, 256]);
        assert!(z.all_finite());
    }

    #[test]
    fn full_scale_width() {
        let cfg = CmrEncoderConfig::full_scale(Phase::Es);
        assert_eq!(cfg.trunk_width(), 2048);
        assert_eq!(cfg.embed_dim, 2048);
        let enc = CmrEncoder::new(&cfg).unwrap();
        assert!(enc.proj.is_none());
        assert_eq!(enc.blocks.len(), 16);
    }

    #[test]
    #[ignore = "full 50-layer forward pass"]
    fn full_scale_forward() {
        let enc = CmrEncoder::new(&CmrEncoderConfig::full_scale(Phase::Ed)).unwrap();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, 0);
        let z = embed(&enc, &store, &[volume(Phase::Ed, 16, 1)]);
        assert_eq!(z.shape(), &[1, 2048]);
        assert!(z.all_finite());
    }

    #[test]
    fn rejects_other_phase() {
        let enc = CmrEncoder::new(&small_cfg(Phase::Ed)).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, 0);
        assert!(enc.embed_all(&store, &[volume(Phase::Es, 16, 0)], 1).is_err());
    }

    #[test]
    fn phases_own_disjoint_parameters() {
        let ed = CmrEncoder::new(&small_cfg(Phase::Ed)).unwrap();
        let es = CmrEncoder::new(&small_cfg(Phase::Es)).unwrap();
        let mut store = ParamStore::<f64>::new();
        ed.init(&mut store, 1);
        es.init(&mut store, 1);
        let es_before = store.extract("cmr_es").checksum();
        let ed_before = store.extract("cmr_ed").checksum();
        let name = "cmr_ed.stem.w";
        store.get_mut(name).unwrap().data_mut()[0] += 1.0;
        assert_eq!(store.extract("cmr_es").checksum(), es_before);
        assert_ne!(store.extract("cmr_ed").checksum(), ed_before);
    }

    #[test]
    fn batch_matches_single() {
        let enc = CmrEncoder::new(&small_cfg(Phase::Ed)).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, 3);
        let vols: Vec<_> = (0..3).map(|s| volume(Phase::Ed, 16, s)).collect();
        let all = embed(&enc, &store, &vols);
        let one = embed(&enc, &store, &vols[2..]);
        for (a, b) in all.row(2).iter().zip(one.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn stats() -> TargetStats {
        let train: Vec<_> = (0..50).map(sample_phenotypes).collect();
        TargetStats::fit(&train).unwrap()
    }

    #[test]
    fn loss_zero_when_predictions_match() {
        let s = stats();
        let targets: Vec<_> = (100..104).map(sample_phenotypes).collect();
        let mut g = Tape::<f64>::new();
        let pred = g.constant(s.table(&targets).unwrap());
        let loss = phenotype_regression_loss(&mut g, pred, &targets, Some(&s)).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        assert!(phenotype_regression_loss(&mut g, pred, &targets, None).is_err());
    }

    #[test]
    fn zero_predictions_cost_about_unit_variance() {
        let train: Vec<_> = (0..4000).map(sample_phenotypes).collect();
        let s = TargetStats::fit(&train).unwrap();
        let held: Vec<_> = (10_000..14_000).map(sample_phenotypes).collect();
        let mut g = Tape::<f64>::new();
        let pred = g.constant(Tensor::zeros(&[held.len(), 13]));
        let loss = phenotype_regression_loss(&mut g, pred, &held, Some(&s)).unwrap();
        assert!((g.value(loss).item() - 1.0).abs() < 0.1);
    }

    #[test]
    fn phenotype_loss_gradient() {
        let cfg = CmrEncoderConfig {
            stage_widths: vec![2, 2],
            blocks_per_stage: vec![1, 1],
            embed_dim: 3,
            ..small_cfg(Phase::Es)
        };
        let enc = CmrEncoder::new(&cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, 5);
        // Break the zero-initialized branch ends so every weight has signal.
        let mut init = Init::new(9);
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in &names {
            let shape = store.get(n).unwrap().shape().to_vec();
            let noise: Tensor<f64> = init.normal(&shape, 0.3);
            store.insert(n.clone(), noise);
        }
        let values: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        let vols = [volume(Phase::Es, 8, 1), volume(Phase::Es, 8, 2)];
        let targets = [sample_phenotypes(1), sample_phenotypes(2)];
        let s = stats();
        let err = finite_diff_check_many(
            |g, xs| {
                let p = Bound::from_pairs(names.iter().cloned().zip(xs.iter().copied()));
                let z = enc.encode(g, &p, &[&vols[0], &vols[1]])?;
                let pred = enc.predict(g, &p, z)?;
                phenotype_regression_loss(g, pred, &targets, Some(&s))
            },
            &values,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err:e}");
    }
}
