//! Modality encoders.

pub mod cmr;
pub mod vit;

pub use cmr::{CmrEncoder, CmrEncoderConfig};
pub use vit::{count_params, patchify, unpatchify, EcgVit, Mae, MaskPlan, Pool, VitConfig, VitPreset};
