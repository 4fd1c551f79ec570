use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use mafnet::models::Mafnet;
use mafnet::training::{
    fit, load_matching, reset_logs, FitOptions, StepLosses, TrainState, LAST_CHECKPOINT,
};
use serde::{Deserialize, Serialize};

use super::{load_cases, slices_for};
use crate::config::{resolve_split, RunConfig, RUN_CONFIG_FILE, SPLIT_FILE};
use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub desk_scale: bool,
    /// Continue from `out/last.ckpt`.
    pub resume: bool,
    pub stop_after_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub finished: bool,
    pub epochs_completed: usize,
    pub steps: u64,
    pub best_val_dice: Option<f64>,
    pub last_losses: Option<StepLosses>,
}

pub fn cmd_train(args: &TrainArgs, interrupt: Option<Arc<AtomicBool>>) -> Result<TrainSummary> {
    let text = match &args.config {
        Some(p) => Some(
            fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let cfg = RunConfig::resolve(text.as_deref(), args.desk_scale)?;
    let model = Mafnet::new(cfg.model.clone())?;
    let out = &args.out;
    let last = out.join(LAST_CHECKPOINT);

    let state = if last.exists() {
        if !args.resume {
            return Err(CliError::Usage(format!(
                "{} already holds a run; pass --resume to continue it",
                out.display()
            )));
        }
        let echoed = RunConfig::load(out.join(RUN_CONFIG_FILE), false)?;
        if echoed != cfg {
            return Err(CliError::Config(format!(
                "configuration differs from the one recorded in {}",
                out.join(RUN_CONFIG_FILE).display()
            )));
        }
        load_matching(&last, &cfg.model, Some(&cfg.train))?
    } else {
        if args.resume {
            return Err(CliError::Usage(format!("no checkpoint to resume in {}", out.display())));
        }
        fs::create_dir_all(out).map_err(CliError::io(format!("creating {}", out.display())))?;
        cfg.save(out.join(RUN_CONFIG_FILE))?;
        reset_logs(out)?;
        TrainState::new(&model, cfg.train.clone())?
    };

    let cases = load_cases(&args.data)?;
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let split = resolve_split(&ids, cfg.data.split_seed)?;
    write_json(&out.join(SPLIT_FILE), &split)?;
    let train = slices_for(&cases, &split.train, cfg.data.crop)?;
    let val = slices_for(&cases, &split.val, cfg.data.crop)?;
    if train.is_empty() {
        return Err(CliError::Data("training cases contain no tumor slices".into()));
    }
    if train.iter().all(|s| s.y_t1ce.is_none()) {
        return Err(CliError::Data("training cases provide no T1ce targets".into()));
    }
    log::info!(
        "{} train / {} val slices; {} + {} epochs",
        train.len(),
        val.len(),
        cfg.train.epochs_synthesis,
        cfg.train.epochs_joint
    );

    let opts = FitOptions {
        out_dir: Some(out.clone()),
        interrupt,
        stop_after_epoch: args.stop_after_epoch,
    };
    let outcome = fit(&model, state, &train, &val, &opts)?;
    Ok(TrainSummary {
        finished: outcome.finished,
        epochs_completed: outcome.state.progress.epoch,
        steps: outcome.state.progress.step,
        best_val_dice: outcome.state.best_val_dice,
        last_losses: outcome.history.steps.last().map(|r| r.losses.clone()),
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(CliError::io(format!("writing {}", path.display())))
}
