//! Objective terms: adversarial, PatchNCE (per modality and identity),
//! segmentation cross-entropy, and the synthesis and joint totals.
//!
//! Everything except [`nce_loss`] builds on the autograd graph so the
//! training loop can differentiate through it.

use mafnet_autograd::{Graph, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::NUM_CLASSES;
use crate::models::{sample_patch_positions, FeaturePyramid, Mafnet, ModelError, PatchPositions};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_LAMBDA: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("NCE needs at least one negative")]
    ZeroNegatives,
    #[error("class {class} at pixel {index} is outside 0..{NUM_CLASSES}")]
    BadClass { class: usize, index: usize },
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub tau: f64,
    /// Weight of the synthesis objective inside the joint total.
    pub lambda: f64,
}

impl LossWeights {
    /// `(λ_X, λ_Y) = (1, 1)` with the identity term, `(10, 0)` without.
    pub fn new(use_identity: bool) -> Self {
        let (lambda_x, lambda_y) = if use_identity { (1.0, 1.0) } else { (10.0, 0.0) };
        Self {
            lambda_x,
            lambda_y,
            tau: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
        }
    }

    pub fn use_identity(&self) -> bool {
        self.lambda_y > 0.0
    }

    /// `strict` additionally restricts `(λ_X, λ_Y)` to the two standard pairs.
    pub fn validate(&self, strict: bool) -> Result<()> {
        let all = [self.lambda_x, self.lambda_y, self.tau, self.lambda];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(LossError::BadWeights("weights must be finite".into()));
        }
        if self.tau <= 0.0 {
            return Err(LossError::BadWeights(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda < 0.0 || self.lambda_x < 0.0 || self.lambda_y < 0.0 {
            return Err(LossError::BadWeights("lambdas must be non-negative".into()));
        }
        let pair = (self.lambda_x, self.lambda_y);
        if strict && pair != (1.0, 1.0) && pair != (10.0, 0.0) {
            return Err(LossError::BadWeights(format!(
                "(lambda_x, lambda_y) = {pair:?} is neither (1, 1) nor (10, 0)"
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::new(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

fn check_finite(v: &Var<'_>, what: &'static str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(LossError::NonFinite(what))
    }
}

/// Discriminator side: `-(E log D(y) + E log(1 - D(ŷ)))`. Generator side
/// (non-saturating): `-E log D(ŷ)`; `d_real` is ignored and may be `None`.
pub fn adversarial_loss<'g>(d_real: Option<Var<'g>>, d_fake: Var<'g>, side: Side) -> Result<Var<'g>> {
    check_finite(&d_fake, "discriminator logits")?;
    match side {
        Side::Generator => Ok(d_fake.bce_with_logits(1.0)),
        Side::Discriminator => {
            let d_real = d_real.ok_or_else(|| LossError::BadWeights("discriminator side needs real logits".into()))?;
            check_finite(&d_real, "discriminator logits")?;
            Ok(d_real.bce_with_logits(1.0).add(d_fake.bce_with_logits(0.0)))
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// InfoNCE for one query: cross-entropy of the positive among
/// `{positive} ∪ negatives` with logits `ẑ·z / τ`.
pub fn nce_loss(z_hat: &[f64], z_pos: &[f64], z_negs: &[&[f64]], tau: f64) -> Result<f64> {
    if z_negs.is_empty() {
        return Err(LossError::ZeroNegatives);
    }
    // log(1 + Σ exp(neg - pos)), shifted so the largest exponent is zero
    let pos = dot(z_hat, z_pos) / tau;
    let diffs: Vec<f64> = z_negs.iter().map(|z| dot(z_hat, z) / tau - pos).collect();
    let m = diffs.iter().copied().fold(0.0, f64::max);
    let rest: f64 = diffs.iter().map(|d| (d - m).exp()).sum();
    let loss = if m == 0.0 { rest.ln_1p() } else { m + ((-m).exp() + rest).ln() };
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(LossError::NonFinite("NCE loss"))
    }
}

/// Matrix form over one image's sampled positions: query row `s` of
/// `z_hat` (`P×D`) against all rows of `z` (`P×D`), positive on the
/// diagonal. Mean over the `P` queries.
pub fn patch_nce_block<'g>(z_hat: Var<'g>, z: Var<'g>, tau: f64) -> Result<Var<'g>> {
    let p = z.shape()[0];
    if p < 2 {
        return Err(LossError::ZeroNegatives);
    }
    let logits = z_hat.matmul_t(z).scale(1.0 / tau);
    let targets: Vec<usize> = (0..p).collect();
    Ok(logits.cross_entropy(&targets))
}

/// One position set per NCE layer, sized from a pyramid's tap shapes.
pub fn sample_nce_positions<R: Rng>(
    pyramid: &FeaturePyramid<'_>,
    num_patches: usize,
    rng: &mut R,
) -> Result<Vec<PatchPositions>> {
    pyramid
        .taps
        .iter()
        .map(|(_, v)| {
            let s = v.shape();
            let n = num_patches.min(s[2] * s[3]);
            Ok(sample_patch_positions((s[2], s[3]), n, rng)?)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NceOptions {
    pub tau: f64,
    /// Stop gradients through the real-stream (key) embeddings.
    pub detach_keys: bool,
}

impl Default for NceOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            detach_keys: true,
        }
    }
}

/// PatchNCE for encoder `n`: mean over layers, batch images and positions.
/// Keys come from the real pyramid.
pub fn patch_nce_modality<'g>(
    g: &'g Graph<'g>,
    model: &Mafnet,
    n: usize,
    real: &FeaturePyramid<'g>,
    fake: &FeaturePyramid<'g>,
    positions: &[PatchPositions],
    opts: NceOptions,
) -> Result<Var<'g>> {
    if positions.len() != real.taps.len() || real.taps.len() != fake.taps.len() {
        return Err(LossError::Model(ModelError::BadConfig(
            "one position set per NCE layer required".into(),
        )));
    }
    let mut terms = Vec::new();
    for (i, pos) in positions.iter().enumerate() {
        let mut z = model.project(g, n, i, real.taps[i].1, pos)?;
        if opts.detach_keys {
            z = z.detach();
        }
        let z_hat = model.project(g, n, i, fake.taps[i].1, pos)?;
        let p = pos.len();
        let batch = z.shape()[0] / p;
        for b in 0..batch {
            terms.push(patch_nce_block(z_hat.narrow(0, b * p, p), z.narrow(0, b * p, p), opts.tau)?);
        }
    }
    let total = mean_of(&terms);
    check_finite(&total, "PatchNCE")?;
    Ok(total)
}

/// Identity term from precomputed pyramids: `real[n]` is encoder `n` on the
/// real T1ce, `fake[n]` encoder `n` on `G(y, y, y)`. Averaged over encoders.
pub fn patch_nce_identity_from<'g>(
    g: &'g Graph<'g>,
    model: &Mafnet,
    real: &[FeaturePyramid<'g>],
    fake: &[FeaturePyramid<'g>],
    positions: &[Vec<PatchPositions>],
    opts: NceOptions,
) -> Result<Var<'g>> {
    let terms = (0..real.len())
        .map(|n| patch_nce_modality(g, model, n, &real[n], &fake[n], &positions[n], opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of(&terms))
}

/// Identity term: `y_real` (`B×1×H×W`) replicated into all three inputs.
pub fn patch_nce_identity<'g, R: Rng>(
    g: &'g Graph<'g>,
    model: &Mafnet,
    y_real: Var<'g>,
    rng: &mut R,
    opts: NceOptions,
) -> Result<Var<'g>> {
    let y3 = g.concat(&[y_real, y_real, y_real], 1);
    let synth = model.synthesize(g, y3)?;
    let fake = (0..model.encoders.len())
        .map(|n| model.encode(g, synth.image, n))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let positions = synth
        .pyramids
        .iter()
        .map(|p| sample_nce_positions(p, model.config.generator.num_patches, rng))
        .collect::<Result<Vec<_>>>()?;
    patch_nce_identity_from(g, model, &synth.pyramids, &fake, &positions, opts)
}

/// Arithmetic mean of scalar terms; `terms` must be non-empty.
pub fn mean_of<'g>(terms: &[Var<'g>]) -> Var<'g> {
    terms
        .iter()
        .skip(1)
        .fold(terms[0], |acc, t| acc.add(*t))
        .scale(1.0 / terms.len() as f64)
}

/// `L_GAN + λ_X · mean(nce_x) + λ_Y · nce_y`. `nce_y` is only read when
/// `λ_Y > 0`.
pub fn synthesis_objective<'g>(
    gan: Var<'g>,
    nce_x: &[Var<'g>],
    nce_y: Option<Var<'g>>,
    w: &LossWeights,
) -> Result<Var<'g>> {
    let mut total = gan;
    if w.lambda_x > 0.0 {
        if nce_x.is_empty() {
            return Err(LossError::BadWeights("lambda_x > 0 needs the per-modality PatchNCE terms".into()));
        }
        total = total.add(mean_of(nce_x).scale(w.lambda_x));
    }
    if w.lambda_y > 0.0 {
        let y = nce_y.ok_or_else(|| LossError::BadWeights("lambda_y > 0 needs the identity term".into()))?;
        total = total.add(y.scale(w.lambda_y));
    }
    check_finite(&total, "synthesis objective")?;
    Ok(total)
}

/// Pixel-mean cross-entropy of `B×C×H×W` logits against class indices in
/// `(b, h, w)` order.
pub fn segmentation_ce<'g>(logits: Var<'g>, target: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 4 || shape[1] != NUM_CLASSES || target.len() != shape[0] * shape[2] * shape[3] {
        return Err(LossError::Model(ModelError::ShapeMismatch {
            expected: format!("B×{NUM_CLASSES}×H×W logits with one target per pixel"),
            found: shape,
        }));
    }
    if let Some((index, &class)) = target.iter().enumerate().find(|(_, &c)| c >= NUM_CLASSES) {
        return Err(LossError::BadClass { class, index });
    }
    check_finite(&logits, "segmentation logits")?;
    Ok(logits.cross_entropy(target))
}

/// `λ · l_syn + l_seg`.
pub fn total_objective<'g>(l_syn: Var<'g>, l_seg: Var<'g>, lambda: f64) -> Result<Var<'g>> {
    check_finite(&l_syn, "synthesis objective")?;
    check_finite(&l_seg, "segmentation loss")?;
    Ok(l_syn.scale(lambda).add(l_seg))
}
