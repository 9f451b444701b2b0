use std::path::Path;

use hiam::evaluation::Report;
use hiam::training::HistoryRow;
use hiam::{Error, Result};
use plotters::prelude::*;

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) }
}

/// Grouped bars per horizon: model and HA, for OD and DO.
pub fn mape_bars(report: &Report, path: &Path) -> Result<()> {
    let series: [(&str, RGBColor, fn(&hiam::evaluation::HorizonMetrics) -> Option<f64>); 4] = [
        ("OD", RGBColor(31, 119, 180), |h| h.od_mape),
        ("OD (HA)", RGBColor(174, 199, 232), |h| h.ha_od_mape),
        ("DO", RGBColor(214, 39, 40), |h| h.do_mape),
        ("DO (HA)", RGBColor(255, 152, 150), |h| h.ha_do_mape),
    ];
    let horizons = report.horizons.len();
    let top = report
        .horizons
        .iter()
        .flat_map(|h| series.iter().filter_map(move |s| (s.2)(h)))
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.15;
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Network MAPE by horizon", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..horizons as f64, 0.0..top)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(horizons)
        .x_label_formatter(&|x| format!("t+{}", x.floor() as usize + 1))
        .y_label_formatter(&|y| format!("{:.0}%", y * 100.0))
        .draw()
        .map_err(|e| plot_err(path, e))?;
    let width = 0.8 / series.len() as f64;
    for (si, (label, color, metric)) in series.iter().enumerate() {
        let bars = report.horizons.iter().enumerate().filter_map(|(h, m)| {
            let x0 = h as f64 + 0.1 + si as f64 * width;
            metric(m).map(|v| Rectangle::new([(x0, 0.0), (x0 + width, v)], color.filled()))
        });
        chart
            .draw_series(bars)
            .map_err(|e| plot_err(path, e))?
            .label(*label)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Training loss per optimizer step.
pub fn loss_curve(history: &[HistoryRow], path: &Path) -> Result<()> {
    if history.is_empty() {
        return Ok(());
    }
    let max = history.iter().map(|r| r.train_loss).fold(0.0f64, f64::max).max(1e-6) * 1.05;
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Training loss (normalized MAE)", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0..history.len(), 0.0..max)
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().x_desc("step").draw().map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(LineSeries::new(history.iter().map(|r| (r.step, r.train_loss)), &BLUE))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
