//! ECG transformer: time patches spanning all 12 leads, pre-norm blocks,
//! and a masked-autoencoder objective with a small transformer decoder.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::signal::{EcgRecord, N_LEADS, N_SAMPLES};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Mean,
    Cls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// Loss over masked tokens only.
    Masked,
    /// Loss over every token.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VitPreset {
    Tiny,
    Small,
    Medium,
    Base,
}

impl VitPreset {
    pub const ALL: [VitPreset; 4] = [VitPreset::Tiny, VitPreset::Small, VitPreset::Medium, VitPreset::Base];

    /// (layers, heads, embed_dim)
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            VitPreset::Tiny => (12, 3, 192),
            VitPreset::Small => (12, 6, 384),
            VitPreset::Medium => (12, 8, 576),
            VitPreset::Base => (12, 12, 768),
        }
    }
}

impl fmt::Display for VitPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VitPreset::Tiny => "tiny",
            VitPreset::Small => "small",
            VitPreset::Medium => "medium",
            VitPreset::Base => "base",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub patch_len: usize,
    pub mask_ratio: f64,
    pub pool: Pool,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub recon_target: ReconTarget,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::preset(VitPreset::Medium)
    }
}

impl VitConfig {
    pub fn preset(p: VitPreset) -> Self {
        let (layers, heads, embed_dim) = p.dims();
        Self {
            layers,
            heads,
            embed_dim,
            patch_len: 25,
            mask_ratio: 0.5,
            pool: Pool::Mean,
            mlp_ratio: 4,
            decoder_dim: 128,
            decoder_layers: 2,
            decoder_heads: 4,
            recon_target: ReconTarget::Masked,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return Err(Error::Config(format!(
                "decoder_dim {} not divisible by {} heads",
                self.decoder_dim, self.decoder_heads
            )));
        }
        if self.patch_len == 0 || !N_SAMPLES.is_multiple_of(self.patch_len) {
            return Err(Error::Config(format!(
                "patch_len {} does not divide {N_SAMPLES}",
                self.patch_len
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio {} must lie in (0, 1)",
                self.mask_ratio
            )));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        N_SAMPLES / self.patch_len
    }

    pub fn token_dim(&self) -> usize {
        N_LEADS * self.patch_len
    }
}

/// Trainable scalars of the encoder trunk: input projection, positional
/// table, optional class token, blocks and the final norm.
pub fn count_params(cfg: &VitConfig) -> usize {
    let d = cfg.embed_dim;
    let hidden = cfg.mlp_ratio * d;
    let input = cfg.token_dim() * d + d;
    let pos = cfg.n_tokens() * d;
    let cls = if cfg.pool == Pool::Cls { d } else { 0 };
    let block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
    input + pos + cls + cfg.layers * block + 2 * d
}

/// `[tokens, 12 * patch_len]`; token `t` concatenates every lead over samples
/// `t * patch_len .. (t + 1) * patch_len`.
pub fn patchify<T: Scalar>(rec: &EcgRecord<T>, patch_len: usize) -> Result<Tensor<T>> {
    if patch_len == 0 || !N_SAMPLES.is_multiple_of(patch_len) {
        return Err(Error::invalid(format!(
            "patch_len {patch_len} does not divide {N_SAMPLES}"
        )));
    }
    let n = N_SAMPLES / patch_len;
    let mut data = Vec::with_capacity(N_LEADS * N_SAMPLES);
    for t in 0..n {
        for l in 0..N_LEADS {
            data.extend_from_slice(&rec.lead(l)[t * patch_len..(t + 1) * patch_len]);
        }
    }
    Tensor::new(vec![n, N_LEADS * patch_len], data)
}

pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, patch_len: usize) -> Result<Tensor<T>> {
    let n = N_SAMPLES / patch_len.max(1);
    if patch_len == 0 || !N_SAMPLES.is_multiple_of(patch_len) || tokens.shape() != [n, N_LEADS * patch_len] {
        return Err(Error::shape(
            "unpatchify",
            format!("tokens {:?} do not match patch_len {patch_len}", tokens.shape()),
        ));
    }
    let mut data = vec![T::zero(); N_LEADS * N_SAMPLES];
    let src = tokens.data();
    for t in 0..n {
        for l in 0..N_LEADS {
            let s = t * N_LEADS * patch_len + l * patch_len;
            let d = l * N_SAMPLES + t * patch_len;
            data[d..d + patch_len].copy_from_slice(&src[s..s + patch_len]);
        }
    }
    Tensor::new(vec![N_LEADS, N_SAMPLES], data)
}

/// Stacks per-record token tables into `[batch * tokens, dim]`.
pub fn stack_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("stack of zero tensors"))?;
    let tail = &first.shape()[1..];
    let mut data = Vec::with_capacity(parts.len() * first.numel());
    let mut rows = 0;
    for p in parts {
        if &p.shape()[1..] != tail {
            return Err(Error::shape(
                "stack_rows",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
        rows += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![rows];
    shape.extend_from_slice(tail);
    Tensor::new(shape, data)
}

/// Which tokens the encoder never sees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub token_count: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    /// Masks `round(ratio * token_count)` distinct tokens chosen by `seed`.
    pub fn new(token_count: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::invalid(format!("mask_ratio {ratio} must lie in (0, 1)")));
        }
        let n_mask = (ratio * token_count as f64).round() as usize;
        if n_mask == 0 || n_mask >= token_count {
            return Err(Error::invalid(format!(
                "mask_ratio {ratio} masks {n_mask} of {token_count} tokens; need at least one masked and one visible"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masked = rand::seq::index::sample(&mut rng, token_count, n_mask).into_vec();
        masked.sort_unstable();
        let mut is_masked = vec![false; token_count];
        masked.iter().for_each(|&i| is_masked[i] = true);
        let visible = (0..token_count).filter(|&i| !is_masked[i]).collect();
        Ok(Self {
            token_count,
            masked,
            visible,
            seed,
        })
    }
}

/// Pre-norm transformer block: attention then a GELU MLP, each residual.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    dim: usize,
}

impl Block {
    pub fn new(prefix: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), dim),
            qkv: Linear::new(&format!("{prefix}.attn.qkv"), dim, 3 * dim),
            proj: Linear::new(&format!("{prefix}.attn.out"), dim, dim),
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), dim),
            fc1: Linear::new(&format!("{prefix}.mlp.fc1"), dim, mlp_ratio * dim),
            fc2: Linear::new(&format!("{prefix}.mlp.fc2"), mlp_ratio * dim, dim),
            heads,
            dim,
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init, depth: usize) {
        let residual_gain = 1.0 / (2.0 * depth as f64).sqrt();
        self.ln1.init(store);
        self.qkv.init(store, init, 1.0);
        self.proj.init(store, init, residual_gain);
        self.ln2.init(store);
        self.fc1.init(store, init, 1.0);
        self.fc2.init(store, init, residual_gain);
    }

    /// `x` is `[batch * seq, dim]`, sample-major.
    pub fn forward<T: Scalar>(&self, g: &mut Tape<T>, p: &Bound, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let (h, d) = (self.heads, self.dim);
        let dh = d / h;
        let bh = batch * h;
        let a = self.ln1.forward(g, p, x)?;
        let qkv = self.qkv.forward(g, p, a)?;
        let qkv = g.reshape(qkv, &[batch, seq, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3 * bh, seq, dh])?;
        let q = g.index_rows(qkv, &(0..bh).collect::<Vec<_>>())?;
        let k = g.index_rows(qkv, &(bh..2 * bh).collect::<Vec<_>>())?;
        let v = g.index_rows(qkv, &(2 * bh..3 * bh).collect::<Vec<_>>())?;
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let att = g.softmax(scores)?;
        let ctx = g.matmul(att, v)?;
        let ctx = g.reshape(ctx, &[batch, h, seq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch * seq, d])?;
        let out = self.proj.forward(g, p, ctx)?;
        let x = g.add(x, out)?;
        let m = self.ln2.forward(g, p, x)?;
        let m = self.fc1.forward(g, p, m)?;
        let m = g.gelu(m)?;
        let m = self.fc2.forward(g, p, m)?;
        g.add(x, m)
    }
}

/// The ECG encoder trunk.
#[derive(Debug, Clone)]
pub struct EcgVit {
    pub cfg: VitConfig,
    pub n_tokens: usize,
    pub token_dim: usize,
    prefix: String,
    embed: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl EcgVit {
    pub fn new(prefix: &str, cfg: &VitConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::with_geometry(prefix, cfg, cfg.n_tokens(), cfg.token_dim()))
    }

    /// Encoder over `n_tokens` tokens of width `token_dim`, independent of the
    /// ECG record geometry; used for toy-sized checks.
    pub fn with_geometry(prefix: &str, cfg: &VitConfig, n_tokens: usize, token_dim: usize) -> Self {
        let d = cfg.embed_dim;
        Self {
            cfg: cfg.clone(),
            n_tokens,
            token_dim,
            prefix: prefix.to_string(),
            embed: Linear::new(&format!("{prefix}.embed"), token_dim, d),
            blocks: (0..cfg.layers)
                .map(|i| Block::new(&format!("{prefix}.block{i}"), d, cfg.heads, cfg.mlp_ratio))
                .collect(),
            norm: LayerNorm::new(&format!("{prefix}.norm"), d),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn pos_name(&self) -> String {
        format!("{}.pos", self.prefix)
    }

    fn cls_name(&self) -> String {
        format!("{}.cls", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        let d = self.cfg.embed_dim;
        self.embed.init(store, init, 1.0);
        store.insert(self.pos_name(), init.normal(&[self.n_tokens, d], 0.02));
        if self.cfg.pool == Pool::Cls {
            store.insert(self.cls_name(), init.normal(&[1, d], 0.02));
        }
        for b in &self.blocks {
            b.init(store, init, self.cfg.layers);
        }
        self.norm.init(store);
    }

    /// Runs the trunk on `tokens` (`[batch * seq, token_dim]`, sample-major)
    /// whose original positions are `positions` (length `seq`, shared by the
    /// batch or length `batch * seq`). Returns `[batch * seq', dim]` where
    /// `seq' = seq + 1` in class-token mode (class row first per sample).
    pub fn trunk<T: Scalar>(
        &self,
        g: &mut Tape<T>,
        p: &Bound,
        tokens: Var,
        positions: &[usize],
        batch: usize,
    ) -> Result<(Var, usize)> {
        let rows = g.shape(tokens)[0];
        if g.shape(tokens).len() != 2 || g.shape(tokens)[1] != self.token_dim || !rows.is_multiple_of(batch) {
            return Err(Error::shape(
                "vit_encode",
                format!(
                    "tokens {:?} for batch {batch} and token width {}",
                    g.shape(tokens),
                    self.token_dim
                ),
            ));
        }
        let seq = rows / batch;
        let pos_rows: Vec<usize> = if positions.len() == seq {
            (0..batch).flat_map(|_| positions.iter().copied()).collect()
        } else if positions.len() == rows {
            positions.to_vec()
        } else {
            return Err(Error::invalid(format!(
                "{} positions for {rows} token rows",
                positions.len()
            )));
        };
        let x = self.embed.forward(g, p, tokens)?;
        let pos = g.index_rows(p.get(&self.pos_name())?, &pos_rows)?;
        let mut x = g.add(x, pos)?;
        let mut seq_len = seq;
        if self.cfg.pool == Pool::Cls {
            let cls = g.index_rows(p.get(&self.cls_name())?, &vec![0; batch])?;
            let joined = g.concat(&[cls, x])?;
            let order: Vec<usize> = (0..batch)
                .flat_map(|b| std::iter::once(b).chain((0..seq).map(move |s| batch + b * seq + s)))
                .collect();
            x = g.index_rows(joined, &order)?;
            seq_len += 1;
        }
        for b in &self.blocks {
            x = b.forward(g, p, x, batch, seq_len)?;
        }
        Ok((self.norm.forward(g, p, x)?, seq_len))
    }

    /// `[batch, dim]` from the trunk output.
    pub fn pool<T: Scalar>(&self, g: &mut Tape<T>, h: Var, batch: usize, seq_len: usize) -> Result<Var> {
        match self.cfg.pool {
            Pool::Mean => {
                let d = self.cfg.embed_dim;
                let h3 = g.reshape(h, &[batch, seq_len, d])?;
                g.mean_axis(h3, 1)
            }
            Pool::Cls => g.index_rows(h, &(0..batch).map(|b| b * seq_len).collect::<Vec<_>>()),
        }
    }

    /// Embeds full token tables (`[batch * n_tokens, token_dim]`).
    pub fn encode<T: Scalar>(&self, g: &mut Tape<T>, p: &Bound, tokens: Var, batch: usize) -> Result<Var> {
        let positions: Vec<usize> = (0..self.n_tokens).collect();
        let (h, s) = self.trunk(g, p, tokens, &positions, batch)?;
        self.pool(g, h, batch, s)
    }

    /// Drops the class rows from a trunk output, leaving token rows only.
    fn token_rows<T: Scalar>(&self, g: &mut Tape<T>, h: Var, batch: usize, seq_len: usize) -> Result<Var> {
        if self.cfg.pool != Pool::Cls {
            return Ok(h);
        }
        let keep: Vec<usize> = (0..batch)
            .flat_map(|b| (1..seq_len).map(move |s| b * seq_len + s))
            .collect();
        g.index_rows(h, &keep)
    }
}

/// Maps encoder latents of the visible tokens to a reconstruction of every
/// token, `[batch * n_tokens, token_dim]`.
pub trait Decoder<T: Scalar> {
    fn reconstruct(&self, g: &mut Tape<T>, p: &Bound, latent: Var, plans: &[MaskPlan]) -> Result<Var>;
}

/// Lightweight transformer decoder with a learned mask token.
#[derive(Debug, Clone)]
pub struct MaeDecoder {
    prefix: String,
    n_tokens: usize,
    dim: usize,
    embed: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl MaeDecoder {
    pub fn new(prefix: &str, cfg: &VitConfig, n_tokens: usize, token_dim: usize) -> Self {
        let d = cfg.decoder_dim;
        Self {
            prefix: prefix.to_string(),
            n_tokens,
            dim: d,
            embed: Linear::new(&format!("{prefix}.embed"), cfg.embed_dim, d),
            blocks: (0..cfg.decoder_layers)
                .map(|i| Block::new(&format!("{prefix}.block{i}"), d, cfg.decoder_heads, cfg.mlp_ratio))
                .collect(),
            norm: LayerNorm::new(&format!("{prefix}.norm"), d),
            head: Linear::new(&format!("{prefix}.head"), d, token_dim),
        }
    }

    fn mask_name(&self) -> String {
        format!("{}.mask_token", self.prefix)
    }

    fn pos_name(&self) -> String {
        format!("{}.pos", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        self.embed.init(store, init, 1.0);
        store.insert(self.mask_name(), init.normal(&[1, self.dim], 0.02));
        store.insert(self.pos_name(), init.normal(&[self.n_tokens, self.dim], 0.02));
        for b in &self.blocks {
            b.init(store, init, self.blocks.len());
        }
        self.norm.init(store);
        self.head.init(store, init, 1.0);
    }
}

impl<T: Scalar> Decoder<T> for MaeDecoder {
    fn reconstruct(&self, g: &mut Tape<T>, p: &Bound, latent: Var, plans: &[MaskPlan]) -> Result<Var> {
        let batch = plans.len();
        let n = self.n_tokens;
        let n_vis = plans[0].visible.len();
        let n_mask = n - n_vis;
        let z = self.embed.forward(g, p, latent)?;
        let masks = g.index_rows(p.get(&self.mask_name())?, &vec![0; batch * n_mask])?;
        let joined = g.concat(&[z, masks])?;
        let mut order = vec![0; batch * n];
        for (b, plan) in plans.iter().enumerate() {
            for (j, &t) in plan.visible.iter().enumerate() {
                order[b * n + t] = b * n_vis + j;
            }
            for (j, &t) in plan.masked.iter().enumerate() {
                order[b * n + t] = batch * n_vis + b * n_mask + j;
            }
        }
        let seq = g.index_rows(joined, &order)?;
        let pos_rows: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let pos = g.index_rows(p.get(&self.pos_name())?, &pos_rows)?;
        let mut x = g.add(seq, pos)?;
        for b in &self.blocks {
            x = b.forward(g, p, x, batch, n)?;
        }
        let x = self.norm.forward(g, p, x)?;
        self.head.forward(g, p, x)
    }
}

/// Encoder plus decoder, sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Mae {
    pub encoder: EcgVit,
    pub decoder: MaeDecoder,
}

/// Result of one masked-reconstruction pass.
pub struct MaeForward {
    pub loss: Var,
    /// `[batch * n_tokens, token_dim]`
    pub prediction: Var,
}

impl Mae {
    pub fn new(cfg: &VitConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::with_geometry(cfg, cfg.n_tokens(), cfg.token_dim()))
    }

    pub fn with_geometry(cfg: &VitConfig, n_tokens: usize, token_dim: usize) -> Self {
        Self {
            encoder: EcgVit::with_geometry("ecg", cfg, n_tokens, token_dim),
            decoder: MaeDecoder::new("mae.dec", cfg, n_tokens, token_dim),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let mut init = Init::new(seed);
        self.encoder.init(store, &mut init);
        self.decoder.init(store, &mut init);
    }

    pub fn plan(&self, seed: u64) -> Result<MaskPlan> {
        MaskPlan::new(self.encoder.n_tokens, self.encoder.cfg.mask_ratio, seed)
    }

    /// `tokens` holds one `[n_tokens, token_dim]` table per sample; `plans`
    /// one mask per sample.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Tape<T>,
        p: &Bound,
        tokens: &[&Tensor<T>],
        plans: &[MaskPlan],
        decoder: &dyn Decoder<T>,
    ) -> Result<MaeForward> {
        let batch = tokens.len();
        if batch == 0 || plans.len() != batch {
            return Err(Error::invalid(format!(
                "{batch} token tables with {} mask plans",
                plans.len()
            )));
        }
        let n = self.encoder.n_tokens;
        let width = self.encoder.token_dim;
        for t in tokens {
            if t.shape() != [n, width] {
                return Err(Error::shape(
                    "mae",
                    format!("token table {:?}, expected [{n}, {width}]", t.shape()),
                ));
            }
        }
        let gather = |rows: &dyn Fn(&MaskPlan) -> &Vec<usize>| -> Result<Tensor<T>> {
            let mut data = Vec::new();
            let mut count = 0;
            for (t, plan) in tokens.iter().zip(plans) {
                for &r in rows(plan) {
                    data.extend_from_slice(t.row(r));
                    count += 1;
                }
            }
            Tensor::new(vec![count, width], data)
        };
        let visible = gather(&|p| &p.visible)?;
        let positions: Vec<usize> = plans.iter().flat_map(|p| p.visible.iter().copied()).collect();
        let vis = g.constant(visible);
        let (h, seq_len) = self.encoder.trunk(g, p, vis, &positions, batch)?;
        let latent = self.encoder.token_rows(g, h, batch, seq_len)?;
        let prediction = decoder.reconstruct(g, p, latent, plans)?;
        let loss = match self.encoder.cfg.recon_target {
            ReconTarget::Masked => {
                let target = g.constant(gather(&|p| &p.masked)?);
                let rows: Vec<usize> = plans
                    .iter()
                    .enumerate()
                    .flat_map(|(b, p)| p.masked.iter().map(move |&t| b * n + t))
                    .collect();
                let picked = g.index_rows(prediction, &rows)?;
                g.mse(picked, target)?
            }
            ReconTarget::All => {
                let all = g.constant(stack_rows(tokens)?);
                g.mse(prediction, all)?
            }
        };
        Ok(MaeForward { loss, prediction })
    }

    /// Masked reconstruction of one record: loss value and the reconstructed
    /// waveform.
    pub fn step_record<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        rec: &EcgRecord<T>,
        seed: u64,
    ) -> Result<(f64, EcgRecord<T>)> {
        let tokens = patchify(rec, self.encoder.cfg.patch_len)?;
        let plan = self.plan(seed)?;
        let mut g = Tape::new();
        let p = store.bind(&mut g, false);
        let out = self.forward(&mut g, &p, &[&tokens], &[plan], &self.decoder)?;
        let loss = g.value(out.loss).item().as_f64();
        let wave = unpatchify(g.value(out.prediction), self.encoder.cfg.patch_len)?;
        let mut recon = EcgRecord::new(rec.subject_id.clone(), wave)?;
        recon.stages = rec.stages;
        Ok((loss, recon))
    }
}
