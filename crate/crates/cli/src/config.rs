//! Run configuration: a TOML document layered over full-scale or
//! desk-scale defaults, echoed next to every run's outputs.

use std::fs;
use std::path::Path;

use mafnet::data::{split_cases, DatasetSplit, CROP_SIZE};
use mafnet::models::ModelConfig;
use mafnet::training::TrainConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const RUN_CONFIG_FILE: &str = "run_config.toml";
pub const SPLIT_FILE: &str = "split.json";

/// In-plane crop used at desk scale.
pub const DESK_CROP: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Side of the centered in-plane crop.
    pub crop: usize,
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn full_scale() -> Self {
        Self {
            data: DataConfig {
                crop: CROP_SIZE,
                split_seed: 0,
            },
            model: ModelConfig::full_scale(),
            train: TrainConfig::default(),
        }
    }

    /// Width 16, 64 patches, 32×32 crops, 2 + 3 epochs.
    pub fn desk_scale() -> Self {
        Self {
            data: DataConfig {
                crop: DESK_CROP,
                split_seed: 0,
            },
            model: ModelConfig::desk_scale(),
            train: TrainConfig::desk_scale(),
        }
    }

    /// Overlays `text` (possibly partial) on the chosen defaults. Keys that
    /// match nothing are rejected.
    pub fn resolve(text: Option<&str>, desk_scale: bool) -> Result<Self> {
        let base = if desk_scale {
            Self::desk_scale()
        } else {
            Self::full_scale()
        };
        let Some(text) = text else {
            base.validate()?;
            return Ok(base);
        };
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, desk_scale: bool) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
        Self::resolve(Some(&text), desk_scale)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(CliError::io(format!("writing {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let m = self.model.spatial_multiple();
        let min = self.model.min_image_side();
        if self.data.crop < min || self.data.crop % m != 0 {
            return Err(CliError::Config(format!(
                "crop {} must be a multiple of {m} and at least {min}",
                self.data.crop
            )));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Case-level split. Ten or more cases use the 7:1:2 rule; smaller
/// (desk-scale) datasets hold out one case for validation and one for
/// testing, sharing the held-out case when only two exist.
pub fn resolve_split(case_ids: &[String], seed: u64) -> Result<DatasetSplit> {
    let n = case_ids.len();
    if n >= 10 {
        return Ok(split_cases(case_ids, seed)?);
    }
    if n < 2 {
        return Err(CliError::Data(format!("need at least 2 cases, found {n}")));
    }
    let mut ids = case_ids.to_vec();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val, test) = if n == 2 {
        let held = ids.pop().expect("two ids");
        (vec![held.clone()], vec![held])
    } else {
        let test = ids.pop().expect("at least three ids");
        let val = ids.pop().expect("at least two ids");
        (vec![val], vec![test])
    };
    Ok(DatasetSplit {
        train: ids,
        val,
        test,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_overlay_keeps_defaults() {
        let cfg = RunConfig::resolve(Some("[train]\nseed = 7\n[model.generator]\nbase_width = 8\n"), true).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.model.generator.base_width, 8);
        assert_eq!(cfg.train.epochs_joint, TrainConfig::desk_scale().epochs_joint);
        assert_eq!(cfg.data.crop, DESK_CROP);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[train]\nlearning_rate = 1.0", "[model.unet]\nchannels = 4"] {
            assert!(matches!(RunConfig::resolve(Some(text), false), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::resolve(Some("[data]\ncrop = 64"), true).unwrap();
        let again = RunConfig::resolve(Some(&cfg.to_toml().unwrap()), false).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn crop_must_fit_the_networks() {
        assert!(matches!(RunConfig::resolve(Some("[data]\ncrop = 30"), true), Err(CliError::Config(_))));
    }

    #[test]
    fn small_splits_hold_out_cases() {
        let ids = |n: usize| (0..n).map(|i| format!("c{i}")).collect::<Vec<_>>();
        let s = resolve_split(&ids(8), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 1, 1));
        assert_ne!(s.val, s.test);
        let s = resolve_split(&ids(2), 1).unwrap();
        assert_eq!((s.train.len(), s.val, s.test.clone()), (1, s.test.clone(), s.test));
        let s = resolve_split(&ids(10), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        assert!(resolve_split(&ids(1), 0).is_err());
    }
}
