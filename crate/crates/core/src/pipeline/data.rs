//! Loading cohort subjects into model inputs.

use rayon::prelude::*;

use crate::cohort::{CmrVolume, Cohort, Phase, Split, SubjectInfo};
use crate::downstream::Targets;
use crate::encoders::vit::patchify;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::{preprocess, PreprocessConfig};
use crate::tensor::Tensor;

/// Preprocessed, patchified ECG of each subject, in order.
pub fn ecg_tokens<T: Scalar>(
    cohort: &Cohort,
    subjects: &[&SubjectInfo],
    pre: &PreprocessConfig,
    patch_len: usize,
) -> Result<Vec<Tensor<T>>> {
    subjects
        .par_iter()
        .map(|s| {
            let rec = cohort.load_ecg::<T>(&s.id)?;
            patchify(&preprocess(&rec, pre)?, patch_len)
        })
        .collect()
}

pub fn volumes<T: Scalar>(cohort: &Cohort, subjects: &[&SubjectInfo], phase: Phase) -> Result<Vec<CmrVolume<T>>> {
    subjects
        .par_iter()
        .map(|s| cohort.load_volume::<T>(&s.id, phase))
        .collect()
}

/// Subjects of `split`, erroring when the split is empty.
pub fn split_subjects(cohort: &Cohort, split: Split) -> Result<Vec<&SubjectInfo>> {
    let out = cohort.split(split);
    if out.is_empty() && split != Split::EcgOnly {
        return Err(Error::invalid(format!(
            "cohort at {} has an empty {split} split",
            cohort.dir.display()
        )));
    }
    Ok(out)
}

/// Pretraining pool: training subjects plus ECG-only subjects.
pub fn pretrain_pool(cohort: &Cohort) -> Result<Vec<&SubjectInfo>> {
    let mut pool = split_subjects(cohort, Split::Train)?;
    pool.extend(cohort.split(Split::EcgOnly));
    Ok(pool)
}

pub fn column(subjects: &[&SubjectInfo], name: &str) -> Result<Vec<f64>> {
    subjects
        .iter()
        .map(|s| {
            s.target(name)
                .ok_or_else(|| Error::Config(format!("unknown target column {name:?}")))
        })
        .collect()
}

pub fn targets(splits: &[Vec<&SubjectInfo>; 3], name: &str) -> Result<Targets> {
    Ok(Targets {
        train: column(&splits[0], name)?,
        val: column(&splits[1], name)?,
        test: column(&splits[2], name)?,
    })
}

/// Train, validation and test subjects.
pub fn labelled_splits(cohort: &Cohort) -> Result<[Vec<&SubjectInfo>; 3]> {
    Ok([
        split_subjects(cohort, Split::Train)?,
        split_subjects(cohort, Split::Val)?,
        split_subjects(cohort, Split::Test)?,
    ])
}
