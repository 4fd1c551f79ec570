//! Two-phase optimisation: synthesis-only epochs, then joint synthesis and
//! segmentation epochs, with a discriminator update before every
//! generator update.
//!
//! All randomness (epoch order, unpaired targets, patch positions) comes
//! from the one ChaCha stream stored in [`TrainState`], so a run resumed
//! from a checkpoint replays the same sequence as an uninterrupted one.

mod adam;
mod checkpoint;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use mafnet_autograd::{Graph, ParamStore, Tensor};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{unpaired_targets, DataError, Region, SliceSample};
use crate::losses::{
    adversarial_loss, patch_nce_identity, patch_nce_modality, sample_nce_positions, segmentation_ce,
    synthesis_objective, total_objective, LossError, LossWeights, NceOptions, Side,
};
use crate::metrics::{evaluate_slice, MetricsError, MetricsReport, SynthesisPair};
use crate::models::{Mafnet, ModelConfig, ModelError};

pub use adam::{Adam, GroupRates, Moments, ParamGroup};
pub use checkpoint::{from_bytes, load_checkpoint, load_matching, save_checkpoint, to_bytes, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite loss at step {step}: {dump}")]
    NonFiniteLoss { step: u64, dump: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("checkpoint mismatch: {0}")]
    VersionMismatch(String),
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("no training slices")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_h: f64,
    pub lr_d: f64,
    pub lr_seg: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs_synthesis: usize,
    pub epochs_joint: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Block the segmentation gradient from reaching the generator.
    pub detach_synthesis: bool,
    /// Stop gradients through the real-stream PatchNCE embeddings.
    pub detach_nce_keys: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_g: 4e-4,
            lr_h: 4e-4,
            lr_d: 2e-4,
            lr_seg: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            epochs_synthesis: 10,
            epochs_joint: 100,
            seed: 0,
            weights: LossWeights::default(),
            detach_synthesis: false,
            detach_nce_keys: true,
        }
    }
}

impl TrainConfig {
    pub fn desk_scale() -> Self {
        Self {
            epochs_synthesis: 2,
            epochs_joint: 3,
            ..Self::default()
        }
    }

    pub fn rates(&self) -> GroupRates {
        GroupRates {
            generator: self.lr_g,
            head: self.lr_h,
            discriminator: self.lr_d,
            segmentor: self.lr_seg,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_synthesis + self.epochs_joint
    }

    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch < self.epochs_synthesis {
            Phase::Synthesis
        } else {
            Phase::Joint
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_g, self.lr_h, self.lr_d, self.lr_seg];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(TrainError::BadConfig("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(TrainError::BadConfig("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        self.weights.validate(false)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Synthesis,
    Joint,
}

/// Position within the schedule. `order` and `cursor` describe the epoch in
/// progress; both are empty/zero between epochs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps over the whole run.
    pub step: u64,
    pub order: Vec<usize>,
    pub cursor: usize,
}

/// Everything a run needs to continue: parameters, optimizer moments,
/// schedule position, random stream and the configuration it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model_config: ModelConfig,
    pub config: TrainConfig,
    /// Generator, projection-head and segmentor parameters.
    pub gen: ParamStore,
    /// Discriminator parameters.
    pub disc: ParamStore,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub progress: Progress,
    pub best_val_dice: Option<f64>,
}

impl TrainState {
    pub fn new(model: &Mafnet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let all = model.init_params(config.seed);
        let (disc, gen): (Vec<_>, Vec<_>) = all
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .partition(|(n, _)| ParamGroup::of(n) == Some(ParamGroup::Discriminator));
        Ok(Self {
            model_config: model.config.clone(),
            adam: Adam::new(config.rates(), config.beta1, config.beta2, config.adam_eps),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            config,
            gen: gen.into_iter().collect(),
            disc: disc.into_iter().collect(),
            progress: Progress::default(),
            best_val_dice: None,
        })
    }

    /// All parameters in one store.
    pub fn params(&self) -> ParamStore {
        self.gen
            .iter()
            .chain(self.disc.iter())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    pub fn phase(&self) -> Phase {
        self.config.phase_of(self.progress.epoch)
    }

    pub fn is_finished(&self) -> bool {
        self.progress.epoch >= self.config.total_epochs()
    }
}

/// Stacked network inputs for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B×3×H×W` T1, T2, FLAIR.
    pub x: Tensor,
    /// `B×1×H×W` T1ce targets, unpaired with `x`.
    pub y: Tensor,
    /// Class per pixel, `(b, h, w)` order.
    pub seg: Vec<usize>,
}

fn stack_planes<'a>(planes: impl Iterator<Item = ArrayView2<'a, f64>>, batch: usize, channels: usize, size: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch * channels * size * size);
    for p in planes {
        data.extend(p.iter());
    }
    Tensor::new(vec![batch, channels, size, size], data).expect("planes match the declared shape")
}

fn stack_inputs(samples: &[&SliceSample]) -> Tensor {
    let size = samples[0].size();
    let planes = samples.iter().flat_map(|s| s.x.outer_iter());
    stack_planes(planes, samples.len(), 3, size)
}

/// `sources` index the source triples and labels; `targets` the T1ce slices.
pub fn make_batch(samples: &[SliceSample], sources: &[usize], targets: &[usize]) -> Batch {
    let src: Vec<&SliceSample> = sources.iter().map(|&i| &samples[i]).collect();
    let size = src[0].size();
    let y = stack_planes(
        targets.iter().map(|&i| samples[i].y_t1ce.as_ref().expect("target has a T1ce").view()),
        targets.len(),
        1,
        size,
    );
    Batch {
        x: stack_inputs(&src),
        y,
        seg: src.iter().flat_map(|s| s.seg.iter().map(|&c| c as usize)).collect(),
    }
}

/// Per-term values of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub d: f64,
    pub gan: f64,
    /// One PatchNCE value per source modality; empty when λ_X = 0.
    pub nce_x: Vec<f64>,
    pub nce_y: Option<f64>,
    pub syn: f64,
    pub seg: Option<f64>,
    /// The quantity the generator-side update minimised.
    pub total: f64,
}

impl StepLosses {
    fn all_finite(&self) -> bool {
        let mut v = vec![self.d, self.gan, self.syn, self.total];
        v.extend(&self.nce_x);
        v.extend(self.nce_y);
        v.extend(self.seg);
        v.iter().all(|x| x.is_finite())
    }
}

fn discriminator_update(model: &Mafnet, disc: &mut ParamStore, adam: &mut Adam, real: &Tensor, fake: &Tensor) -> Result<f64> {
    let (value, grads) = {
        let g = Graph::with_params(disc);
        let d_real = model.discriminate(&g, g.constant(real.clone()))?;
        let d_fake = model.discriminate(&g, g.constant(fake.clone()))?;
        let loss = adversarial_loss(Some(d_real), d_fake, Side::Discriminator)?;
        (loss.item(), g.backward(loss).into_params())
    };
    adam.step(disc, &grads);
    Ok(value)
}

fn step(model: &Mafnet, state: &mut TrainState, batch: &Batch, joint: bool) -> Result<StepLosses> {
    let cfg = state.config.clone();
    let w = cfg.weights;
    let opts = NceOptions {
        tau: w.tau,
        detach_keys: cfg.detach_nce_keys,
    };
    let num_patches = model.config.generator.num_patches;
    let step_no = state.progress.step;
    let TrainState {
        gen, disc, adam, rng, ..
    } = state;

    let (losses, grads) = {
        let g = Graph::with_params(gen);
        let x = g.constant(batch.x.clone());
        let synth = model.synthesize(&g, x)?;

        let d = discriminator_update(model, disc, adam, &batch.y, &synth.image.value())?;
        g.bind_params(disc, false);

        let gan = adversarial_loss(None, model.discriminate(&g, synth.image)?, Side::Generator)?;
        let mut nce_x = Vec::new();
        if w.lambda_x > 0.0 {
            for (n, real) in synth.pyramids.iter().enumerate() {
                let fake = model.encode(&g, synth.image, n)?;
                let positions = sample_nce_positions(real, num_patches, rng)?;
                nce_x.push(patch_nce_modality(&g, model, n, real, &fake, &positions, opts)?);
            }
        }
        let nce_y = if w.lambda_y > 0.0 {
            Some(patch_nce_identity(&g, model, g.constant(batch.y.clone()), rng, opts)?)
        } else {
            None
        };
        let syn = synthesis_objective(gan, &nce_x, nce_y, &w)?;
        let (total, seg) = if joint {
            let y_hat = if cfg.detach_synthesis { synth.image.detach() } else { synth.image };
            let logits = model.unet_forward(&g, g.concat(&[x, y_hat], 1))?;
            let seg = segmentation_ce(logits, &batch.seg)?;
            (total_objective(syn, seg, w.lambda)?, Some(seg))
        } else {
            (syn, None)
        };
        let losses = StepLosses {
            d,
            gan: gan.item(),
            nce_x: nce_x.iter().map(|v| v.item()).collect(),
            nce_y: nce_y.map(|v| v.item()),
            syn: syn.item(),
            seg: seg.map(|v| v.item()),
            total: total.item(),
        };
        if !losses.all_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: step_no,
                dump: serde_json::to_string(&losses)?,
            });
        }
        (losses, g.backward(total).into_params())
    };
    adam.step(gen, &grads);
    state.progress.step += 1;
    Ok(losses)
}

/// One discriminator update, then one generator + head update on
/// `L_GAN + λ_X·mean_i L_X_i + λ_Y·L_Y`.
pub fn train_step_synthesis(model: &Mafnet, state: &mut TrainState, batch: &Batch) -> Result<StepLosses> {
    step(model, state, batch, false)
}

/// One discriminator update, then one update of generator, heads and
/// segmentor on `λ·L_syn + L_seg`, with the segmentor fed `[x, ŷ]`.
pub fn train_step_joint(model: &Mafnet, state: &mut TrainState, batch: &Batch) -> Result<StepLosses> {
    step(model, state, batch, true)
}

/// Synthesized T1ce, attention maps and predicted classes for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `B×1×H×W` in [-1, 1].
    pub synthesized: Tensor,
    /// `B×3×H/4×W/4`.
    pub attention: Tensor,
    /// `B` class maps.
    pub classes: Vec<Array2<u8>>,
}

/// Per-pixel argmax over the channel axis of `B×C×H×W` logits; earlier
/// classes win ties.
pub fn argmax_classes(logits: &Tensor) -> Vec<Array2<u8>> {
    let (b, c, h, w) = logits.nchw();
    let d = logits.data();
    (0..b)
        .map(|bi| {
            Array2::from_shape_fn((h, w), |(i, j)| {
                let at = |k: usize| d[((bi * c + k) * h + i) * w + j];
                (1..c).fold(0usize, |best, k| if at(k) > at(best) { k } else { best }) as u8
            })
        })
        .collect()
}

/// Forward pass only. `params` needs the generator and segmentor entries.
pub fn predict(model: &Mafnet, params: &ParamStore, x: &Tensor) -> Result<Prediction> {
    let g = Graph::with_params(params);
    let xv = g.constant(x.clone());
    let synth = model.synthesize(&g, xv)?;
    let logits = model.unet_forward(&g, g.concat(&[xv, synth.image], 1))?;
    Ok(Prediction {
        synthesized: (*synth.image.value()).clone(),
        attention: (*synth.attention.value()).clone(),
        classes: argmax_classes(&logits.value()),
    })
}

/// Runs [`predict`] over `samples` in chunks and scores every slice.
pub fn evaluate(model: &Mafnet, params: &ParamStore, samples: &[SliceSample], batch_size: usize) -> Result<MetricsReport> {
    let mut report = MetricsReport::new("pixel");
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let pred = predict(model, params, &stack_inputs(&refs))?;
        let size = chunk[0].size();
        for (k, s) in chunk.iter().enumerate() {
            let plane = &pred.synthesized.data()[k * size * size..(k + 1) * size * size];
            let synth = ArrayView2::from_shape((size, size), plane).expect("plane size");
            let pair = s.y_t1ce.as_ref().map(|real| SynthesisPair {
                synthesized: synth,
                real: real.view(),
            });
            report.rows.push(evaluate_slice(
                &s.case_id,
                s.slice_index,
                pred.classes[k].view(),
                s.seg.view(),
                pair,
                (1.0, 1.0),
            )?);
        }
    }
    Ok(report)
}

/// Mean over slices of the mean Dice across WT, ET and TC.
pub fn mean_dice(report: &MetricsReport) -> f64 {
    let per_slice = report
        .rows
        .iter()
        .map(|r| Region::ALL.iter().map(|&g| r.region(g).dice).sum::<f64>() / 3.0);
    per_slice.sum::<f64>() / report.rows.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub losses: StepLosses,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_syn: f64,
    pub mean_seg: Option<f64>,
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Reads a JSON-lines step log.
pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const STEP_LOG: &str = "history.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Checkpoints and logs go here when set; logs are appended.
    pub out_dir: Option<PathBuf>,
    /// Polled after every step; when raised, the run stops with a resumable
    /// checkpoint.
    pub interrupt: Option<Arc<AtomicBool>>,
    /// Stop once this many epochs are complete.
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    /// Snapshot with the highest validation mean Dice seen during phase 2.
    pub best: Option<TrainState>,
    /// Records produced by this call only.
    pub history: History,
    pub finished: bool,
}

fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, record)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n.max(1) as f64
}

/// Runs (or resumes) the schedule on `train`, validating on `val` after
/// every joint epoch.
pub fn fit(
    model: &Mafnet,
    mut state: TrainState,
    train: &[SliceSample],
    val: &[SliceSample],
    opts: &FitOptions,
) -> Result<FitOutcome> {
    state.config.validate()?;
    if state.model_config != model.config {
        return Err(TrainError::VersionMismatch("model configuration differs from the state's".into()));
    }
    let mut history = History::default();
    let mut best = None;
    if state.is_finished() {
        return Ok(FitOutcome {
            state,
            best,
            history,
            finished: true,
        });
    }
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let out = |name: &str| opts.out_dir.as_ref().map(|d| d.join(name));
    let interrupted = || opts.interrupt.as_ref().is_some_and(|f| f.load(Ordering::SeqCst));

    while !state.is_finished() {
        let epoch = state.progress.epoch;
        let phase = state.phase();
        if state.progress.order.is_empty() {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut state.rng);
            state.progress.order = order;
            state.progress.cursor = 0;
        }
        let mut epoch_losses = Vec::new();
        while state.progress.cursor < train.len() {
            let end = (state.progress.cursor + state.config.batch_size).min(train.len());
            let sources = state.progress.order[state.progress.cursor..end].to_vec();
            let targets = unpaired_targets(train, &sources, &mut state.rng);
            let batch = make_batch(train, &sources, &targets);
            let losses = match phase {
                Phase::Synthesis => train_step_synthesis(model, &mut state, &batch)?,
                Phase::Joint => train_step_joint(model, &mut state, &batch)?,
            };
            state.progress.cursor = end;
            let record = StepRecord {
                phase,
                epoch,
                step: state.progress.step,
                losses,
            };
            log::debug!("{}", serde_json::to_string(&record)?);
            if let Some(p) = out(STEP_LOG) {
                append_jsonl(&p, &record)?;
            }
            epoch_losses.push(record.losses.clone());
            history.steps.push(record);
            if interrupted() && state.progress.cursor < train.len() {
                if let Some(p) = out(LAST_CHECKPOINT) {
                    save_checkpoint(&state, &p)?;
                }
                return Ok(FitOutcome {
                    state,
                    best,
                    history,
                    finished: false,
                });
            }
        }

        let val_dice = if phase == Phase::Joint && !val.is_empty() {
            let report = evaluate(model, &state.gen, val, state.config.batch_size)?;
            Some(mean_dice(&report))
        } else {
            None
        };
        state.progress.epoch += 1;
        state.progress.order.clear();
        state.progress.cursor = 0;
        let record = EpochRecord {
            phase,
            epoch,
            steps: epoch_losses.len(),
            mean_total: mean(epoch_losses.iter().map(|l| l.total)),
            mean_syn: mean(epoch_losses.iter().map(|l| l.syn)),
            mean_seg: (phase == Phase::Joint).then(|| mean(epoch_losses.iter().filter_map(|l| l.seg))),
            val_dice,
        };
        log::info!(
            "epoch {epoch} ({phase:?}): total {:.5}, val dice {:?}",
            record.mean_total,
            record.val_dice
        );
        if let Some(p) = out(EPOCH_LOG) {
            append_jsonl(&p, &record)?;
        }
        history.epochs.push(record);
        if let Some(v) = val_dice {
            if state.best_val_dice.is_none_or(|b| v > b) {
                state.best_val_dice = Some(v);
                if let Some(p) = out(BEST_CHECKPOINT) {
                    save_checkpoint(&state, &p)?;
                }
                best = Some(state.clone());
            }
        }
        if let Some(p) = out(LAST_CHECKPOINT) {
            save_checkpoint(&state, &p)?;
        }
        let stop = opts.stop_after_epoch.is_some_and(|k| state.progress.epoch >= k);
        if (stop || interrupted()) && !state.is_finished() {
            return Ok(FitOutcome {
                state,
                best,
                history,
                finished: false,
            });
        }
    }
    if let Some(p) = out(LAST_CHECKPOINT) {
        save_checkpoint(&state, &p)?;
    }
    Ok(FitOutcome {
        state,
        best,
        history,
        finished: true,
    })
}

/// Creates an empty file so a later [`append_jsonl`] starts fresh.
pub fn reset_logs(dir: impl AsRef<Path>) -> Result<()> {
    for name in [STEP_LOG, EPOCH_LOG] {
        File::create(dir.as_ref().join(name))?;
    }
    Ok(())
}
