//! Synthesis quality (SSIM, PSNR) and segmentation quality (Dice, ASSD),
//! plus the largest-component cleanup applied to predicted whole tumor.

use std::collections::VecDeque;
use std::io::Write;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{compose_regions, Region};

/// PSNR reported for identical images in aggregates.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("image {0:?} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window")]
    TooSmall(Vec<usize>),
    #[error("dynamic range must be positive, got {0}")]
    BadRange(f64),
    #[error("no slices to aggregate")]
    Empty,
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn same_shape<A, B>(a: &ArrayView2<'_, A>, b: &ArrayView2<'_, B>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(MetricsError::ShapeMismatch {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        })
    }
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering with the normalized Gaussian window.
fn filter_valid(img: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let (h, wd) = img.dim();
    let k = w.len();
    let (oh, ow) = (h + 1 - k, wd + 1 - k);
    let rows = Array2::from_shape_fn((h, ow), |(i, j)| (0..k).map(|t| w[t] * img[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(i, j)| (0..k).map(|t| w[t] * rows[[i + t, j]]).sum())
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// all window positions fully inside the image.
pub fn ssim(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, dynamic_range: f64) -> Result<f64> {
    same_shape(&a, &b)?;
    if !(dynamic_range > 0.0) {
        return Err(MetricsError::BadRange(dynamic_range));
    }
    if a.nrows() < SSIM_WINDOW || a.ncols() < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(a.shape().to_vec()));
    }
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let w = gaussian_window();
    let (a, b) = (a.to_owned(), b.to_owned());
    let mu_a = filter_valid(&a, &w);
    let mu_b = filter_valid(&b, &w);
    let aa = filter_valid(&(&a * &a), &w);
    let bb = filter_valid(&(&b * &b), &w);
    let ab = filter_valid(&(&a * &b), &w);
    let mut total = 0.0;
    Zip::from(&mu_a)
        .and(&mu_b)
        .and(&aa)
        .and(&bb)
        .and(&ab)
        .for_each(|&ma, &mb, &saa, &sbb, &sab| {
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        });
    Ok(total / mu_a.len() as f64)
}

/// `10·log10(R² / MSE)`; `+∞` for identical images.
pub fn psnr(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, dynamic_range: f64) -> Result<f64> {
    same_shape(&a, &b)?;
    if !(dynamic_range > 0.0) {
        return Err(MetricsError::BadRange(dynamic_range));
    }
    let mse = Zip::from(&a).and(&b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y)) / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (dynamic_range * dynamic_range / mse).log10())
}

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice(pred: ArrayView2<'_, bool>, gt: ArrayView2<'_, bool>) -> Result<f64> {
    same_shape(&pred, &gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        inter += usize::from(p && g);
        total += usize::from(p) + usize::from(g);
    });
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mask pixels with at least one 4-neighbour outside the mask (pixels on
/// the image edge count as bordering background).
pub fn surface(mask: ArrayView2<'_, bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let inside = |i: isize, j: isize| i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w && mask[[i as usize, j as usize]];
    let mut out = Vec::new();
    for ((i, j), &m) in mask.indexed_iter() {
        let (ii, jj) = (i as isize, j as isize);
        if m && !(inside(ii - 1, jj) && inside(ii + 1, jj) && inside(ii, jj - 1) && inside(ii, jj + 1)) {
            out.push((i, j));
        }
    }
    out
}

/// Average symmetric surface distance in units of `spacing` (row, column).
/// `None` when either mask is empty.
pub fn assd(pred: ArrayView2<'_, bool>, gt: ArrayView2<'_, bool>, spacing: (f64, f64)) -> Result<Option<f64>> {
    same_shape(&pred, &gt)?;
    let sp = surface(pred);
    let sg = surface(gt);
    if sp.is_empty() || sg.is_empty() {
        return Ok(None);
    }
    let nearest = |p: (usize, usize), set: &[(usize, usize)]| {
        set.iter()
            .map(|q| {
                let di = (p.0 as f64 - q.0 as f64) * spacing.0;
                let dj = (p.1 as f64 - q.1 as f64) * spacing.1;
                di * di + dj * dj
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let total: f64 = sp.iter().map(|&p| nearest(p, &sg)).sum::<f64>() + sg.iter().map(|&g| nearest(g, &sp)).sum::<f64>();
    Ok(Some(total / (sp.len() + sg.len()) as f64))
}

/// Keeps only the largest 4-connected component. Components are labelled in
/// row-major scan order and the earliest label wins ties.
pub fn keep_largest_component(mask: ArrayView2<'_, bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut label = Array2::<usize>::zeros((h, w));
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] || label[[i, j]] != 0 {
                continue;
            }
            let id = sizes.len();
            sizes.push(0);
            label[[i, j]] = id;
            queue.push_back((i, j));
            while let Some((y, x)) = queue.pop_front() {
                sizes[id] += 1;
                let mut visit = |ny: usize, nx: usize| {
                    if mask[[ny, nx]] && label[[ny, nx]] == 0 {
                        label[[ny, nx]] = id;
                        queue.push_back((ny, nx));
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < h {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < w {
                    visit(y, x + 1);
                }
            }
        }
    }
    // max_by_key keeps the last maximum, so scan labels in reverse
    let best = (1..sizes.len()).rev().max_by_key(|&id| sizes[id]);
    match best {
        Some(best) => label.mapv(|l| l == best),
        None => Array2::from_elem((h, w), false),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub dice: f64,
    /// `None` when either mask is empty.
    pub assd: Option<f64>,
}

/// Metrics for one evaluated slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub case_id: String,
    pub slice_index: usize,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
    pub wt: RegionScore,
    pub et: RegionScore,
    pub tc: RegionScore,
}

impl SliceMetrics {
    pub fn region(&self, r: Region) -> &RegionScore {
        match r {
            Region::Wt => &self.wt,
            Region::Et => &self.et,
            Region::Tc => &self.tc,
        }
    }
}

/// Predicted and real T1ce in [-1, 1].
#[derive(Clone, Copy, Debug)]
pub struct SynthesisPair<'a> {
    pub synthesized: ArrayView2<'a, f64>,
    pub real: ArrayView2<'a, f64>,
}

/// Dynamic range of images normalized to [-1, 1].
pub const NORMALIZED_RANGE: f64 = 2.0;

/// Region composition, WT cleanup, per-region Dice/ASSD and, when a real
/// T1ce is given, SSIM/PSNR of the synthesis.
pub fn evaluate_slice(
    case_id: &str,
    slice_index: usize,
    pred_classes: ArrayView2<'_, u8>,
    gt_classes: ArrayView2<'_, u8>,
    synthesis: Option<SynthesisPair<'_>>,
    spacing: (f64, f64),
) -> Result<SliceMetrics> {
    same_shape(&pred_classes, &gt_classes)?;
    let mut pred = compose_regions(pred_classes);
    pred.wt = keep_largest_component(pred.wt.view());
    let gt = compose_regions(gt_classes);
    let score = |r: Region| -> Result<RegionScore> {
        Ok(RegionScore {
            dice: dice(pred.get(r).view(), gt.get(r).view())?,
            assd: assd(pred.get(r).view(), gt.get(r).view(), spacing)?,
        })
    };
    let (ssim_v, psnr_v) = match synthesis {
        Some(s) => (
            Some(ssim(s.synthesized, s.real, NORMALIZED_RANGE)?),
            Some(psnr(s.synthesized, s.real, NORMALIZED_RANGE)?),
        ),
        None => (None, None),
    };
    Ok(SliceMetrics {
        case_id: case_id.to_string(),
        slice_index,
        ssim: ssim_v,
        psnr: psnr_v,
        wt: score(Region::Wt)?,
        et: score(Region::Et)?,
        tc: score(Region::Tc)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub dice: f64,
    /// Mean over slices where ASSD is defined; `None` if it never is.
    pub assd: Option<f64>,
    pub assd_defined: usize,
    pub assd_undefined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub slices: usize,
    pub ssim: Option<f64>,
    /// Infinite per-slice values enter the mean as [`PSNR_CAP`].
    pub psnr: Option<f64>,
    pub wt: RegionSummary,
    pub et: RegionSummary,
    pub tc: RegionSummary,
    pub assd_unit: String,
}

impl Summary {
    pub fn region(&self, r: Region) -> &RegionSummary {
        match r {
            Region::Wt => &self.wt,
            Region::Et => &self.et,
            Region::Tc => &self.tc,
        }
    }
}

/// Per-slice rows plus the unit ASSD is measured in.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<SliceMetrics>,
    pub assd_unit: String,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    case_id: String,
    slice_index: usize,
    ssim: Option<f64>,
    psnr: Option<f64>,
    wt_dice: f64,
    wt_assd: Option<f64>,
    et_dice: f64,
    et_assd: Option<f64>,
    tc_dice: f64,
    tc_assd: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    pub fn new(assd_unit: impl Into<String>) -> Self {
        Self {
            rows: Vec::new(),
            assd_unit: assd_unit.into(),
        }
    }

    pub fn summary(&self) -> Result<Summary> {
        if self.rows.is_empty() {
            return Err(MetricsError::Empty);
        }
        let region = |r: Region| {
            let scores: Vec<&RegionScore> = self.rows.iter().map(|row| row.region(r)).collect();
            let defined: Vec<f64> = scores.iter().filter_map(|s| s.assd).collect();
            RegionSummary {
                dice: mean(scores.iter().map(|s| s.dice)).unwrap_or(f64::NAN),
                assd: mean(defined.iter().copied()),
                assd_defined: defined.len(),
                assd_undefined: scores.len() - defined.len(),
            }
        };
        Ok(Summary {
            slices: self.rows.len(),
            ssim: mean(self.rows.iter().filter_map(|r| r.ssim)),
            psnr: mean(self.rows.iter().filter_map(|r| r.psnr).map(|p| p.min(PSNR_CAP))),
            wt: region(Region::Wt),
            et: region(Region::Et),
            tc: region(Region::Tc),
            assd_unit: self.assd_unit.clone(),
        })
    }

    /// One row per slice; undefined values are empty cells.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(CsvRow {
                case_id: r.case_id.clone(),
                slice_index: r.slice_index,
                ssim: r.ssim,
                psnr: r.psnr.map(|p| p.min(PSNR_CAP)),
                wt_dice: r.wt.dice,
                wt_assd: r.wt.assd,
                et_dice: r.et.dice,
                et_assd: r.et.assd,
                tc_dice: r.tc.dice,
                tc_assd: r.tc.assd,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R, assd_unit: impl Into<String>) -> Result<Self> {
        let mut rows = Vec::new();
        for rec in csv::Reader::from_reader(input).deserialize() {
            let r: CsvRow = rec?;
            rows.push(SliceMetrics {
                case_id: r.case_id,
                slice_index: r.slice_index,
                ssim: r.ssim,
                psnr: r.psnr,
                wt: RegionScore { dice: r.wt_dice, assd: r.wt_assd },
                et: RegionScore { dice: r.et_dice, assd: r.et_assd },
                tc: RegionScore { dice: r.tc_dice, assd: r.tc_assd },
            });
        }
        Ok(Self {
            rows,
            assd_unit: assd_unit.into(),
        })
    }

    pub fn write_summary_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.summary()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
