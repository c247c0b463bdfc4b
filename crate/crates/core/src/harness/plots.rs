//! SVG plots of a metrics log.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::metrics::{eval_records, read_log, train_records};
use crate::error::{Error, Result};

pub const LOSS_PLOT: &str = "loss.svg";
pub const LR_PLOT: &str = "lr.svg";
pub const ACCURACY_PLOT: &str = "accuracy.svg";

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("plotting: {e}")))
}

fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        if y.is_finite() {
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !(x0 <= x1 && y0 <= y1) {
        return Err(Error::InvalidArgument(format!("nothing to plot for {title}")));
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(45)
        .y_label_area_size(65)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Write `loss.svg` and `lr.svg` (training records) and `accuracy.svg`
/// (evaluation records, when present) into `out_dir`. Nothing is written
/// for a log without records.
pub fn emit_plots(log: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = read_log(log)?;
    let train = train_records(&records);
    let evals = eval_records(&records);
    if train.is_empty() && evals.is_empty() {
        return Err(Error::InvalidArgument(format!("metrics log {} has no records", log.display())));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    if !train.is_empty() {
        let mut loss = vec![Series {
            label: "total".into(),
            points: train.iter().map(|t| (t.step as f64, t.loss_total)).collect(),
        }];
        let mut per: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for t in &train {
            for (name, &v) in &t.loss_per_target {
                per.entry(name).or_default().push((t.step as f64, v));
            }
        }
        if per.len() > 1 {
            loss.extend(per.into_iter().map(|(n, points)| Series {
                label: n.to_string(),
                points,
            }));
        }
        let aux: Vec<(f64, f64)> = train
            .iter()
            .filter_map(|t| t.aux_loss.map(|a| (t.step as f64, a)))
            .collect();
        if !aux.is_empty() {
            loss.push(Series {
                label: "aux".into(),
                points: aux,
            });
        }
        let p = out_dir.join(LOSS_PLOT);
        line_chart(&p, "training loss", "step", "loss", &loss)?;
        written.push(p);
        let lr = [Series {
            label: "lr".into(),
            points: train.iter().map(|t| (t.step as f64, t.lr)).collect(),
        }];
        let p = out_dir.join(LR_PLOT);
        line_chart(&p, "learning rate", "step", "lr", &lr)?;
        written.push(p);
    }
    if !evals.is_empty() {
        let mut by_protocol: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for e in &evals {
            by_protocol
                .entry(e.report.protocol.as_str())
                .or_default()
                .push((e.epoch as f64, e.report.top1));
        }
        let series: Vec<Series> = by_protocol
            .into_iter()
            .map(|(n, points)| Series {
                label: n.to_string(),
                points,
            })
            .collect();
        let p = out_dir.join(ACCURACY_PLOT);
        line_chart(&p, "evaluation accuracy", "epoch", "top-1", &series)?;
        written.push(p);
    }
    Ok(written)
}
