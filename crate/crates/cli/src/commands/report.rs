use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use mafnet::training::{read_history, StepRecord};
use plotters::prelude::*;
use plotters::style::colors::colormaps::ViridisRGB;
use serde::{Deserialize, Serialize};

use super::synthesize::read_attention;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub loss_figures: Vec<PathBuf>,
    pub attention_figures: Vec<PathBuf>,
}

/// Per-term `(step, value)` series for every term that appears in `records`.
pub fn loss_terms(records: &[StepRecord]) -> Vec<(String, Vec<(u64, f64)>)> {
    let mut terms: Vec<(String, Vec<(u64, f64)>)> = Vec::new();
    let mut push = |name: String, step: u64, v: f64| match terms.iter_mut().find(|(n, _)| *n == name) {
        Some((_, pts)) => pts.push((step, v)),
        None => terms.push((name, vec![(step, v)])),
    };
    for r in records {
        let l = &r.losses;
        push("d".into(), r.step, l.d);
        push("gan".into(), r.step, l.gan);
        for (i, v) in l.nce_x.iter().enumerate() {
            push(format!("nce_x{i}"), r.step, *v);
        }
        if let Some(v) = l.nce_y {
            push("nce_y".into(), r.step, v);
        }
        push("syn".into(), r.step, l.syn);
        if let Some(v) = l.seg {
            push("seg".into(), r.step, v);
        }
        push("total".into(), r.step, l.total);
    }
    terms
}

fn figure_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Figure(format!("{}: {e}", path.display()))
}

/// Axis-free line chart of one loss term against step.
fn plot_curve(path: &Path, points: &[(u64, f64)]) -> Result<()> {
    let err = figure_err(path);
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.1.is_finite())
        .map(|&(s, v)| (s as f64, v))
        .collect();
    let (mut x0, mut x1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    (y0, y1) = (y0 - pad, y1 + pad);

    let root = BitMapBackend::new(path, (640, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(&err)?;
    chart
        .draw_series(std::iter::once(Rectangle::new([(x0, y0), (x1, y1)], BLACK.stroke_width(1))))
        .map_err(&err)?;
    chart
        .draw_series(LineSeries::new(pts, BLUE.stroke_width(2)))
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

const HEAT_PANEL: u32 = 128;
const HEAT_GAP: u32 = 4;

/// The maps of one slice side by side, viridis-coloured on [0, 1].
fn plot_attention(path: &Path, height: usize, width: usize, maps: &[Vec<f64>]) -> Result<()> {
    let scale = (HEAT_PANEL / height.max(width) as u32).max(1);
    let (pw, ph) = (width as u32 * scale, height as u32 * scale);
    let n = maps.len() as u32;
    let mut img = RgbImage::from_pixel(n * pw + (n.saturating_sub(1)) * HEAT_GAP, ph, Rgb([255, 255, 255]));
    for (k, map) in maps.iter().enumerate() {
        let x0 = k as u32 * (pw + HEAT_GAP);
        for (idx, &v) in map.iter().enumerate() {
            let c = ViridisRGB.get_color(v.clamp(0.0, 1.0) as f32);
            let (i, j) = ((idx / width) as u32, (idx % width) as u32);
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(x0 + j * scale + dx, i * scale + dy, Rgb([c.0, c.1, c.2]));
                }
            }
        }
    }
    img.save(path).map_err(figure_err(path))
}

/// One PNG per loss term in `history`, and one attention figure per slice
/// in `attention` when given.
pub fn cmd_report(history: &Path, out: &Path, attention: Option<&Path>) -> Result<ReportSummary> {
    let records = read_history(history).map_err(|e| CliError::Data(format!("{}: {e}", history.display())))?;
    if records.is_empty() {
        return Err(CliError::EmptyHistory(history.to_path_buf()));
    }
    fs::create_dir_all(out).map_err(CliError::io(format!("creating {}", out.display())))?;
    let mut summary = ReportSummary::default();
    for (name, points) in loss_terms(&records) {
        let path = out.join(format!("loss_{name}.png"));
        plot_curve(&path, &points)?;
        summary.loss_figures.push(path);
    }
    if let Some(a) = attention {
        for d in read_attention(a)? {
            let path = out.join(format!("attention_{}_{:03}.png", d.case_id, d.slice_index));
            plot_attention(&path, d.height, d.width, &d.maps)?;
            summary.attention_figures.push(path);
        }
    }
    Ok(summary)
}
