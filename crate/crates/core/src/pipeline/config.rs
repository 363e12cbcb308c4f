//! Run configuration: defaults, file overlay and `key=value` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::align::{AlignConfig, AlignMode};
use crate::cohort::CohortConfig;
use crate::downstream::{default_tasks, HeadConfig, TaskSpec};
use crate::encoders::cmr::CmrEncoderConfig;
use crate::encoders::vit::{VitConfig, VitPreset};
use crate::error::{Error, Result};
use crate::scalar::DType;
use crate::signal::PreprocessConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub presets: Vec<VitPreset>,
    pub pretrain: TrainConfig,
    pub probe: HeadConfig,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            presets: VitPreset::ALL.to_vec(),
            pretrain: TrainConfig {
                warmup_epochs: 5,
                max_epochs: 50,
                ..TrainConfig::default()
            },
            probe: HeadConfig::default(),
        }
    }
}

/// Everything one experiment needs; each stage freezes a copy beside its
/// outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: DType,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub cohort: CohortConfig,
    pub preprocess: PreprocessConfig,
    pub vit: VitConfig,
    pub pretrain: TrainConfig,
    /// ECG reconstructions dumped after pretraining.
    pub recon_panels: usize,
    pub cmr: CmrEncoderConfig,
    pub cmr_train: TrainConfig,
    pub align: AlignConfig,
    pub align_train: TrainConfig,
    pub heads: HeadConfig,
    pub tasks: Vec<TaskSpec>,
    /// Alignment outputs that receive downstream heads.
    pub sources: Vec<AlignMode>,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            precision: DType::F64,
            threads: 0,
            cohort: CohortConfig::default(),
            preprocess: PreprocessConfig::default(),
            vit: VitConfig::default(),
            pretrain: TrainConfig::default(),
            recon_panels: 3,
            cmr: CmrEncoderConfig::default(),
            cmr_train: TrainConfig {
                warmup_epochs: 5,
                max_epochs: 100,
                ..TrainConfig::default()
            },
            align: AlignConfig::default(),
            align_train: TrainConfig {
                warmup_epochs: 5,
                max_epochs: 100,
                ..TrainConfig::default()
            },
            heads: HeadConfig::default(),
            tasks: default_tasks(),
            sources: AlignMode::ALL.to_vec(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.vit.validate()?;
        self.cmr.validate()?;
        for t in &self.tasks {
            t.validate()?;
        }
        if !(self.align.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.align.temperature
            )));
        }
        Ok(())
    }

    /// Defaults, overlaid with `file` when given, then with each `key=value`
    /// in `sets` (dotted keys, TOML literal values; bare words are strings).
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut root = Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let table: Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::format(path, e.to_string()))?;
            merge(&mut root, Value::Table(table));
        }
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
            set_path(&mut root, key.trim(), parse_literal(raw.trim()))?;
        }
        let cfg: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_literal(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("{key}: parent is not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 3\n[vit]\nlayers = 2\nheads = 4\nembed_dim = 32\n").unwrap();
        let sets = vec![
            "vit.layers=1".to_string(),
            "align.mode=ed_only".to_string(),
            "precision=f32".to_string(),
        ];
        let cfg = RunConfig::resolve(Some(&path), &sets).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!((cfg.vit.layers, cfg.vit.heads, cfg.vit.embed_dim), (1, 4, 32));
        assert_eq!(cfg.vit.patch_len, 25);
        assert_eq!(cfg.align.mode, AlignMode::EdOnly);
        assert_eq!(cfg.precision, DType::F32);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::resolve(None, &["vit.layerz=3".into()]).is_err());
        assert!(RunConfig::resolve(None, &["vit.heads=7".into()]).is_err());
        assert!(RunConfig::resolve(None, &["cohort.n_subjects=5".into()]).is_err());
        assert!(RunConfig::resolve(None, &["seed".into()]).is_err());
    }
}
