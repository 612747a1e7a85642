//! SVG line charts for loss curves and per-frame body speed.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use dumotion::checkpoint::read_loss_csv;
use dumotion::data::{compute_velocity, load_dataset};
use plotters::prelude::*;

use crate::{Category, Tag};

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn label(p: &Path) -> String {
    p.file_stem()
        .or_else(|| p.file_name())
        .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn draw(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> Result<()> {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(anyhow!("nothing to plot")).tag(Category::Data);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);

    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(64)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw()?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()?;
    root.present()?;
    Ok(())
}

/// Total loss against step, one line per CSV (or checkpoint directory).
pub fn loss_curves(inputs: &[&Path], out: &Path) -> Result<PathBuf> {
    let mut series = Vec::new();
    for p in inputs {
        let csv = if p.is_dir() { p.join("loss.csv") } else { p.to_path_buf() };
        let name = if p.is_dir() { label(p) } else { label(&csv) };
        let records = read_loss_csv(&csv)?;
        series.push(Series {
            name,
            points: records.iter().map(|r| (r.step as f64, r.parts.total)).collect(),
        });
    }
    let path = out.join("loss.svg");
    draw(&path, "Training loss", "step", "loss", &series)?;
    Ok(path)
}

/// Body speed per frame of one clip from each dataset directory.
pub fn velocity_comparison(inputs: &[&Path], clip: usize, out: &Path) -> Result<PathBuf> {
    let mut series = Vec::new();
    for p in inputs {
        let ds = load_dataset(p)?;
        let sample = ds
            .samples
            .get(clip)
            .ok_or_else(|| anyhow!("{} has {} clips, clip {clip} requested", p.display(), ds.len()))
            .tag(Category::Config)?;
        let v = compute_velocity(&sample.motion.body)?;
        let speed = v.rows().into_iter().map(|r| r.dot(&r).sqrt());
        series.push(Series {
            name: label(p),
            points: speed.enumerate().map(|(i, s)| (i as f64, s)).collect(),
        });
    }
    let path = out.join("velocity.svg");
    draw(&path, "Velocity comparisons", "frame", "body speed", &series)?;
    Ok(path)
}
