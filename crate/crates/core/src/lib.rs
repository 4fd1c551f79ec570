//! Unpaired T1ce synthesis from T1/T2/FLAIR with per-modality contrastive
//! encoders and modality-level attention fusion, trained jointly with a
//! four-class brain tumor segmenter.
//!
//! The crate is organised along the pipeline:
//!
//! - [`niftio`]: single-file NIfTI-1 reading and writing
//! - [`data`]: cases, axial slicing, labels, splits, synthetic phantoms
//! - [`models`]: encoders, attention fusion, decoder, discriminator,
//!   projection heads, segmentation UNet
//! - [`losses`]: adversarial, PatchNCE, cross-entropy and the combined
//!   objectives
//! - [`metrics`]: SSIM, PSNR, Dice, ASSD, largest-component cleanup
//! - [`training`]: two-phase optimisation, checkpoints, history

pub mod data;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod niftio;
pub mod training;
