mod evaluate;
mod phantom;
mod report;
mod synthesize;
mod train;

use std::path::Path;

use mafnet::data::{load_dataset, make_slices, Case, SliceSample};
use mafnet::models::Mafnet;
use mafnet::training::{load_checkpoint, TrainState};

use crate::config::{RunConfig, RUN_CONFIG_FILE};
use crate::error::{CliError, Result};

pub use evaluate::{cmd_evaluate, markdown_tables, EvalArgs, SplitChoice, METRICS_CSV, SUMMARY_JSON, TABLE_MD};
pub use phantom::{cmd_phantom, ensure_empty_dir};
pub use report::{cmd_report, loss_terms, ReportSummary};
pub use synthesize::{cmd_synthesize, read_attention, AttentionDump, SynthArgs, SynthSummary, ATTENTION_JSON};
pub use train::{cmd_train, TrainArgs, TrainSummary};

pub(crate) fn load_cases(dir: &Path) -> Result<Vec<Case>> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{} is not a directory", dir.display())));
    }
    let cases = load_dataset(dir)?;
    if cases.is_empty() {
        return Err(CliError::Data(format!("no case directories under {}", dir.display())));
    }
    Ok(cases)
}

/// Tumor slices of the listed cases, in case order.
pub(crate) fn slices_for(cases: &[Case], ids: &[String], crop: usize) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for case in cases.iter().filter(|c| ids.contains(&c.case_id)) {
        out.extend(make_slices(case, crop)?);
    }
    Ok(out)
}

/// A checkpoint with the configuration it was trained under.
pub struct Trained {
    pub model: Mafnet,
    pub state: TrainState,
    pub config: RunConfig,
}

/// `config` defaults to the `run_config.toml` beside the checkpoint.
pub fn load_trained(ckpt: &Path, config: Option<&Path>) -> Result<Trained> {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => ckpt
            .parent()
            .map(|d| d.join(RUN_CONFIG_FILE))
            .ok_or_else(|| CliError::Usage("cannot locate the run configuration; pass --config".into()))?,
    };
    if !config_path.exists() {
        return Err(CliError::Usage(format!(
            "{} not found; pass --config",
            config_path.display()
        )));
    }
    let config = RunConfig::load(&config_path, false)?;
    let state = load_checkpoint(ckpt)?;
    if state.model_config != config.model {
        return Err(CliError::Config(format!(
            "{} was not trained with the model in {}",
            ckpt.display(),
            config_path.display()
        )));
    }
    Ok(Trained {
        model: Mafnet::new(config.model.clone())?,
        state,
        config,
    })
}
