//! Experiment orchestration: configuration, output layout and stages.
//!
//! ```text
//! <out>/cohort                 synthetic cohort
//! <out>/pretrain               masked-autoencoder ECG encoder
//! <out>/cmr_ed, <out>/cmr_es   phenotype-supervised volume encoders
//! <out>/align/<mode>           aligned ECG encoder and projection heads
//! <out>/heads/<source>         downstream heads, metrics and predictions
//! <out>/eval                   results table and summary
//! <out>/ablate                 encoder size ladder with probe metrics
//! ```

pub mod config;
pub mod data;
pub mod layout;
pub mod stages;

use std::fmt;
use std::path::Path;

pub use config::{AblateConfig, RunConfig};
pub use layout::{Layout, FINAL_PARAMS, FROZEN_CONFIG};
pub use stages::{
    cmd_ablate_vit, cmd_align, cmd_eval, cmd_pretrain_ecg, cmd_synth, cmd_train_cmr, cmd_train_heads, AblateRow,
    AlignReport, CmrReport, EvalSummary, PretrainReport, FUNCTIONAL_TASKS,
};

use crate::align::AlignMode;
use crate::cohort::Phase;
use crate::error::Result;
use crate::scalar::{DType, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    PretrainEcg,
    TrainCmr(Phase),
    Align(AlignMode),
    TrainHeads,
    Eval,
    AblateVit,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Synth => f.write_str("synth"),
            Stage::PretrainEcg => f.write_str("pretrain-ecg"),
            Stage::TrainCmr(p) => write!(f, "train-cmr --phase {p}"),
            Stage::Align(m) => write!(f, "align --mode {}", m.as_str()),
            Stage::TrainHeads => f.write_str("train-heads"),
            Stage::Eval => f.write_str("eval"),
            Stage::AblateVit => f.write_str("ablate-vit"),
        }
    }
}

/// Runs one stage at the configured precision and returns a one-line
/// summary.
pub fn run_stage(stage: Stage, cfg: &RunConfig, out: &Path) -> Result<String> {
    match cfg.precision {
        DType::F64 => run::<f64>(stage, cfg, out),
        DType::F32 => run::<f32>(stage, cfg, out),
    }
}

fn run<T: Scalar>(stage: Stage, cfg: &RunConfig, out: &Path) -> Result<String> {
    let layout = Layout::new(out);
    Ok(match stage {
        Stage::Synth => {
            let subjects = cmd_synth(cfg, &layout)?;
            format!("wrote {} subjects to {}", subjects.len(), layout.cohort().display())
        }
        Stage::PretrainEcg => {
            let r = cmd_pretrain_ecg::<T>(cfg, &layout)?;
            format!(
                "pretrained on {} ECGs for {} epochs; val masked MSE {:.4} -> {:.4}",
                r.pool, r.epochs, r.initial_val_mse, r.best_val_mse
            )
        }
        Stage::TrainCmr(phase) => {
            let r = cmd_train_cmr::<T>(cfg, &layout, phase)?;
            format!(
                "{phase} encoder trained for {} epochs; val phenotype MSE {:.4} -> {:.4}",
                r.epochs, r.initial_val_mse, r.best_val_mse
            )
        }
        Stage::Align(mode) => {
            let r = cmd_align::<T>(cfg, &layout, mode)?;
            format!(
                "{} alignment over {} epochs; val top-1 {:.3} -> {:.3} (chance {:.3}); frozen encoders unchanged",
                mode.as_str(),
                r.epochs,
                r.initial_top1,
                r.final_top1,
                r.chance_top1
            )
        }
        Stage::TrainHeads => {
            let r = cmd_train_heads::<T>(cfg, &layout)?;
            format!("trained {} heads", r.rows.len())
        }
        Stage::Eval => {
            let s = cmd_eval(cfg, &layout)?;
            let mut line = s
                .sources
                .iter()
                .map(|x| format!("{} functional R2 {:.4}", x.source.as_str(), x.functional_mean_r2))
                .collect::<Vec<_>>()
                .join("; ");
            if let Some(u) = s.functional_uplift {
                line.push_str(&format!("; dual_phase uplift {u:+.4}"));
            }
            line
        }
        Stage::AblateVit => {
            let rows = cmd_ablate_vit::<T>(cfg, &layout)?;
            format!("probed {} encoder sizes", rows.len())
        }
    })
}
