//! Synthetic paired ECG/CMR cohort: phenotypes, renderers, outcome labels,
//! subject-level splits and the on-disk layout.
//!
//! ```text
//! <dir>/manifest.txt         id split ecg-stem ed-stem es-stem
//! <dir>/phenotypes.csv       one row per subject, columns in COLUMN order
//! <dir>/ecg/<id>.calt|.meta  raw 12 x 5000 ECG
//! <dir>/cmr/<id>_ed.calt|.meta, <id>_es.calt|.meta   cropped volumes
//! ```

pub mod cmr;
pub mod ecg;
pub mod outcome;
pub mod phenotype;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cmr::{crop_and_pad, render_cmr, BBox, CmrRenderConfig, CmrVolume, Phase, N_SLICES};
pub use ecg::{ecg_traits, render_ecg, EcgRenderConfig, EcgTraits};
pub use outcome::{outcome_probability, outcome_scores, simulate_outcomes, OUTCOME_NAMES};
pub use phenotype::{sample_phenotypes, PhenotypeVector, PHENOTYPE_NAMES};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::signal::EcgRecord;

pub const MIN_SUBJECTS: usize = 10;
const MANIFEST_HEADER: &str = "# cardialign cohort v1: id split ecg ed es";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    /// ECG without imaging; used only for self-supervised pretraining.
    EcgOnly,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::EcgOnly => "ecg_only",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "ecg_only" => Ok(Split::EcgOnly),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_subjects: usize,
    /// Extra subjects with ECG only, added to the pretraining pool.
    pub n_ecg_only: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub dilation_mm: f64,
    pub target_hw: usize,
    /// Weight of the logistic noise in the outcome model.
    pub outcome_noise: f64,
    pub storage: DType,
    pub ecg: EcgRenderConfig,
    pub cmr: CmrRenderConfig,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_subjects: 2000,
            n_ecg_only: 0,
            split: [0.7, 0.15, 0.15],
            dilation_mm: 10.0,
            target_hw: 64,
            outcome_noise: 1.0,
            storage: DType::F32,
            ecg: EcgRenderConfig::default(),
            cmr: CmrRenderConfig::default(),
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < MIN_SUBJECTS {
            return Err(Error::invalid(format!(
                "cohort needs at least {MIN_SUBJECTS} subjects for non-degenerate splits, got {}",
                self.n_subjects
            )));
        }
        let sum: f64 = self.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split.iter().any(|r| *r < 0.0) {
            return Err(Error::invalid(format!(
                "split ratios {:?} must be non-negative and sum to 1",
                self.split
            )));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for stream `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn subject_id(index: usize) -> String {
    format!("S{index:06}")
}

fn ecg_only_id(index: usize) -> String {
    format!("E{index:06}")
}

fn split_key(id: &str, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Validation and test sizes are `floor(ratio * n)`; train takes the rest.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let val = (ratios[1] * n as f64 + 1e-9).floor() as usize;
    let test = (ratios[2] * n as f64 + 1e-9).floor() as usize;
    [n - val - test, val, test]
}

/// Orders subjects by a keyed hash of their id and cuts the order into
/// validation, test and train blocks.
pub fn assign_splits(ids: &[String], ratios: [f64; 3], seed: u64) -> Vec<Split> {
    let [_, n_val, n_test] = split_sizes(ids.len(), ratios);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (split_key(&ids[i], seed), i));
    let mut out = vec![Split::Train; ids.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_val {
            Split::Val
        } else if rank < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectInfo {
    pub id: String,
    pub split: Split,
    pub phenotypes: PhenotypeVector,
    pub outcomes: [bool; 6],
    pub qrs_count: usize,
    pub qrs_ms: f64,
}

impl SubjectInfo {
    pub fn has_imaging(&self) -> bool {
        self.split != Split::EcgOnly
    }

    /// Value of a phenotype, outcome (0/1) or ECG-derived column by name.
    pub fn target(&self, column: &str) -> Option<f64> {
        if let Some(v) = self.phenotypes.get(column) {
            return Some(v);
        }
        if let Some(k) = OUTCOME_NAMES.iter().position(|n| *n == column) {
            return Some(if self.outcomes[k] { 1.0 } else { 0.0 });
        }
        match column {
            "qrs_count" => Some(self.qrs_count as f64),
            "qrs_ms" => Some(self.qrs_ms),
            _ => None,
        }
    }
}

/// Header of `phenotypes.csv`.
pub fn csv_columns() -> Vec<&'static str> {
    let mut cols = vec!["subject_id", "split"];
    cols.extend(PHENOTYPE_NAMES);
    cols.extend(OUTCOME_NAMES);
    cols.extend(["qrs_count", "qrs_ms"]);
    cols
}

fn generate_subject(
    dir: &Path,
    cfg: &CohortConfig,
    master_seed: u64,
    index: u64,
    id: &str,
    split: Split,
) -> Result<SubjectInfo> {
    let seed = derive_seed(master_seed, index);
    let ph = sample_phenotypes(derive_seed(seed, 0));
    let outcomes = simulate_outcomes(&ph, derive_seed(seed, 1), cfg.outcome_noise);
    let ecg = render_ecg::<f64>(id, &ph, derive_seed(seed, 2), &cfg.ecg);
    ecg.save(&dir.join("ecg"), id, cfg.storage)?;
    if split != Split::EcgOnly {
        let cmr_seed = derive_seed(seed, 3);
        for phase in Phase::BOTH {
            let raw = render_cmr::<f64>(&ph, phase, cmr_seed, &cfg.cmr)
                .map_err(|e| Error::Generation(format!("{id}: {e}")))?;
            let vol = crop_and_pad(&raw, cfg.dilation_mm, cfg.target_hw)?;
            vol.save(&dir.join("cmr"), &format!("{id}_{phase}"), cfg.storage)?;
        }
    }
    let tr = ecg_traits(&ph);
    Ok(SubjectInfo {
        id: id.to_string(),
        split,
        phenotypes: ph,
        outcomes,
        qrs_count: tr.beats,
        qrs_ms: tr.qrs_ms,
    })
}

/// Writes the full cohort under `dir` and returns its subjects.
pub fn build_cohort(dir: &Path, cfg: &CohortConfig, master_seed: u64) -> Result<Vec<SubjectInfo>> {
    cfg.validate()?;
    for sub in ["ecg", "cmr"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(p, e))?;
    }
    let paired: Vec<String> = (0..cfg.n_subjects).map(subject_id).collect();
    let splits = assign_splits(&paired, cfg.split, master_seed);
    let mut jobs: Vec<(u64, String, Split)> = paired
        .into_iter()
        .zip(splits)
        .enumerate()
        .map(|(i, (id, s))| (i as u64, id, s))
        .collect();
    jobs.extend((0..cfg.n_ecg_only).map(|i| ((cfg.n_subjects + i) as u64, ecg_only_id(i), Split::EcgOnly)));

    let subjects: Vec<SubjectInfo> = jobs
        .par_iter()
        .map(|(i, id, s)| generate_subject(dir, cfg, master_seed, *i, id, *s))
        .collect::<Result<_>>()?;

    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for s in &subjects {
        let (ed, es) = if s.has_imaging() {
            (format!("cmr/{}_ed", s.id), format!("cmr/{}_es", s.id))
        } else {
            ("-".into(), "-".into())
        };
        manifest.push_str(&format!("{} {} ecg/{} {ed} {es}\n", s.id, s.split, s.id));
    }
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath, e))?;
    write_phenotype_csv(&dir.join("phenotypes.csv"), &subjects)?;
    Ok(subjects)
}

fn write_phenotype_csv(path: &Path, subjects: &[SubjectInfo]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(csv_columns()).map_err(csv_err)?;
    for s in subjects {
        let mut row = vec![s.id.clone(), s.split.to_string()];
        row.extend(s.phenotypes.values().iter().map(f64::to_string));
        row.extend(s.outcomes.iter().map(|&o| (o as u8).to_string()));
        row.push(s.qrs_count.to_string());
        row.push(s.qrs_ms.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read access to a cohort directory.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub dir: PathBuf,
    pub subjects: Vec<SubjectInfo>,
}

impl Cohort {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("phenotypes.csv");
        let csv_err = |e: csv::Error| Error::format(&path, e.to_string());
        let mut r = csv::Reader::from_path(&path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Missing(format!("cohort table {}", path.display())),
            _ => Error::format(&path, e.to_string()),
        })?;
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        if header != csv_columns() {
            return Err(Error::format(&path, "unexpected column layout"));
        }
        let mut subjects = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::format(&path, format!("bad number {:?} in column {}", &rec[i], header[i])))
            };
            let mut ph = [0.0; 13];
            for (k, v) in ph.iter_mut().enumerate() {
                *v = num(2 + k)?;
            }
            let mut outcomes = [false; 6];
            for (k, o) in outcomes.iter_mut().enumerate() {
                *o = num(15 + k)? != 0.0;
            }
            subjects.push(SubjectInfo {
                id: rec[0].to_string(),
                split: rec[1].parse()?,
                phenotypes: PhenotypeVector::from_values(&ph),
                outcomes,
                qrs_count: num(21)? as usize,
                qrs_ms: num(22)?,
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            subjects,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&SubjectInfo> {
        self.subjects.iter().filter(|s| s.split == split).collect()
    }

    pub fn load_ecg<T: Scalar>(&self, id: &str) -> Result<EcgRecord<T>> {
        EcgRecord::load(&self.dir.join("ecg"), id)
    }

    pub fn load_volume<T: Scalar>(&self, id: &str, phase: Phase) -> Result<CmrVolume<T>> {
        CmrVolume::load(&self.dir.join("cmr"), &format!("{id}_{phase}"))
    }
}
