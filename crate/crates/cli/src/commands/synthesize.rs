use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use mafnet::data::{make_slices, SliceSample};
use mafnet::niftio::{self, Volume};
use mafnet::training::predict;
use mafnet_autograd::Tensor;
use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{load_cases, load_trained};
use crate::error::{CliError, Result};

pub const ATTENTION_JSON: &str = "attention.json";

#[derive(Clone, Debug, Default)]
pub struct SynthArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub cases: Vec<String>,
    pub slices: usize,
    pub volumes: Vec<PathBuf>,
    pub montages: Vec<PathBuf>,
}

/// Attention maps of one slice, `maps[n]` row-major `height × width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub case_id: String,
    pub slice_index: usize,
    pub height: usize,
    pub width: usize,
    pub maps: Vec<Vec<f64>>,
}

pub fn read_attention(path: &Path) -> Result<Vec<AttentionDump>> {
    let text = fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn stack(samples: &[SliceSample]) -> Tensor {
    let size = samples[0].size();
    let data: Vec<f64> = samples.iter().flat_map(|s| s.x.iter().copied()).collect();
    Tensor::new(vec![samples.len(), 3, size, size], data).expect("slices share one size")
}

fn to_gray(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

const GAP: u32 = 2;

/// One row per slice: T1 | T2 | FLAIR | synthesized | real T1ce (if any).
fn montage(rows: &[(Vec<ArrayView2<'_, f64>>, ArrayView2<'_, f64>, Option<ArrayView2<'_, f64>>)]) -> GrayImage {
    let size = rows[0].1.nrows() as u32;
    let cols = if rows.iter().any(|r| r.2.is_some()) { 5 } else { 4 };
    let mut img = GrayImage::from_pixel(
        cols * size + (cols - 1) * GAP,
        rows.len() as u32 * size + (rows.len() as u32 - 1) * GAP,
        Luma([255]),
    );
    for (r, (inputs, synth, real)) in rows.iter().enumerate() {
        let mut panels: Vec<ArrayView2<'_, f64>> = inputs.clone();
        panels.push(*synth);
        panels.extend(*real);
        for (c, panel) in panels.iter().enumerate() {
            let (x0, y0) = (c as u32 * (size + GAP), r as u32 * (size + GAP));
            for ((i, j), &v) in panel.indexed_iter() {
                img.put_pixel(x0 + j as u32, y0 + i as u32, Luma([to_gray(v)]));
            }
        }
    }
    img
}

/// Writes, per case, the synthesized tumor slices as a NIfTI volume and a
/// PNG montage, plus every slice's attention maps to `attention.json`.
pub fn cmd_synthesize(args: &SynthArgs) -> Result<SynthSummary> {
    let trained = load_trained(&args.ckpt, args.config.as_deref())?;
    let crop = trained.config.data.crop;
    let batch = trained.config.train.batch_size;
    let cases = load_cases(&args.data)?;
    fs::create_dir_all(&args.out).map_err(CliError::io(format!("creating {}", args.out.display())))?;

    let mut summary = SynthSummary {
        cases: Vec::new(),
        slices: 0,
        volumes: Vec::new(),
        montages: Vec::new(),
    };
    let mut dumps = Vec::new();
    for case in &cases {
        let slices = make_slices(case, crop)?;
        if slices.is_empty() {
            log::warn!("{}: no tumor slices, skipped", case.case_id);
            continue;
        }
        let mut synth = Vec::with_capacity(slices.len());
        for chunk in slices.chunks(batch) {
            let pred = predict(&trained.model, &trained.state.gen, &stack(chunk))?;
            let plane = crop * crop;
            let (_, n, ah, aw) = pred.attention.nchw();
            for (k, s) in chunk.iter().enumerate() {
                synth.push(
                    ndarray::Array2::from_shape_vec((crop, crop), pred.synthesized.data()[k * plane..(k + 1) * plane].to_vec())
                        .expect("plane size"),
                );
                let a = &pred.attention.data()[k * n * ah * aw..(k + 1) * n * ah * aw];
                dumps.push(AttentionDump {
                    case_id: s.case_id.clone(),
                    slice_index: s.slice_index,
                    height: ah,
                    width: aw,
                    maps: a.chunks(ah * aw).map(<[f64]>::to_vec).collect(),
                });
            }
        }

        let dir = args.out.join(&case.case_id);
        fs::create_dir_all(&dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
        let mut voxels = Array3::<f32>::zeros((crop, crop, slices.len()));
        for (k, plane) in synth.iter().enumerate() {
            voxels
                .index_axis_mut(ndarray::Axis(2), k)
                .assign(&plane.mapv(|v| v as f32));
        }
        let volume = Volume::new(voxels, case.t1.header.spacing())?;
        let vol_path = dir.join(format!("{}_t1ce_syn.nii.gz", case.case_id));
        niftio::save(&volume, &vol_path)?;

        let rows: Vec<_> = slices
            .iter()
            .zip(&synth)
            .map(|(s, y)| {
                (
                    s.x.outer_iter().collect::<Vec<_>>(),
                    y.view(),
                    s.y_t1ce.as_ref().map(|r| r.view()),
                )
            })
            .collect();
        let png = dir.join(format!("{}_montage.png", case.case_id));
        montage(&rows)
            .save(&png)
            .map_err(|e| CliError::Figure(format!("{}: {e}", png.display())))?;

        summary.cases.push(case.case_id.clone());
        summary.slices += slices.len();
        summary.volumes.push(vol_path);
        summary.montages.push(png);
    }
    super::train::write_json(&args.out.join(ATTENTION_JSON), &dumps)?;
    Ok(summary)
}
