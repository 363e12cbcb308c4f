//! Directory layout under the output root.

use std::fs;
use std::path::{Path, PathBuf};

use crate::align::AlignMode;
use crate::cohort::Phase;
use crate::encoders::cmr::cmr_prefix;
use crate::error::{Error, Result};

/// File holding the final parameters of a stage.
pub const FINAL_PARAMS: &str = "final.ckpt";
/// Frozen copy of the resolved configuration written by every stage.
pub const FROZEN_CONFIG: &str = "config.toml";

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn cohort(&self) -> PathBuf {
        self.root.join("cohort")
    }

    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn cmr(&self, phase: Phase) -> PathBuf {
        self.root.join(cmr_prefix(phase))
    }

    pub fn align(&self, mode: AlignMode) -> PathBuf {
        self.root.join("align").join(mode.as_str())
    }

    pub fn heads(&self, source: AlignMode) -> PathBuf {
        self.root.join("heads").join(source.as_str())
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn ablate(&self) -> PathBuf {
        self.root.join("ablate")
    }
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fails with a stage-order error unless `path` exists.
pub(crate) fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Stage(format!(
            "{what} not found at {}; run `{producer}` first",
            path.display()
        )))
    }
}
