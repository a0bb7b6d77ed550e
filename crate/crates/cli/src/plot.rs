//! Metric-vs-axis summary plots, derived from the sweep table.

use std::path::Path;

use plotters::prelude::*;

use crate::exit::{CliResult, Failure};
use crate::sweep::MetricsRow;

type Metric = fn(&MetricsRow) -> Option<f64>;

const METRICS: [(&str, Metric); 4] = [
    ("fg_psnr", |r| r.fg_psnr),
    ("bg_psnr", |r| r.bg_psnr),
    ("style", |r| r.style),
    ("total", |r| r.total),
];

/// Mean of `metric` over successful runs for each axis label, in label order.
pub fn means(labels: &[String], rows: &[MetricsRow], metric: Metric) -> Vec<Option<f64>> {
    labels
        .iter()
        .map(|l| {
            let vals: Vec<f64> = rows.iter().filter(|r| &r.value == l).filter_map(metric).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

pub fn write_summary_plots(dir: &Path, axis: &str, labels: &[String], rows: &[MetricsRow]) -> CliResult<()> {
    for (name, metric) in METRICS {
        let points: Vec<(f64, f64)> = means(labels, rows, metric)
            .into_iter()
            .enumerate()
            .filter_map(|(i, m)| m.map(|v| (i as f64, v)))
            .collect();
        let path = dir.join(format!("{name}_vs_{axis}.svg"));
        draw(&path, axis, name, labels, &points).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn draw(
    path: &Path,
    axis: &str,
    metric: &str,
    labels: &[String],
    points: &[(f64, f64)],
) -> Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let (lo, hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let pad = ((hi - lo) * 0.1).max(hi.abs() * 1e-3).max(1e-12);
    let n = labels.len().max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("mean {metric} vs {axis}"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(70)
        .build_cartesian_2d(-0.5..n - 0.5, lo - pad..hi + pad)?;
    chart
        .configure_mesh()
        .x_labels(labels.len().max(1))
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                labels.get(i as usize).map(|l| if l.is_empty() { "(empty)".to_string() } else { l.clone() }).unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_desc(axis)
        .y_desc(metric)
        .draw()?;
    chart.draw_series(LineSeries::new(points.iter().copied(), &BLUE))?;
    chart.draw_series(points.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))?;
    root.present()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(value: &str, fg: Option<f64>) -> MetricsRow {
        MetricsRow {
            run: 0,
            fixture: "f".into(),
            axis: "prompt".into(),
            value: value.into(),
            seed: 0,
            status: if fg.is_some() { "ok" } else { "failed" }.into(),
            error: String::new(),
            total: None,
            style: None,
            content: None,
            histogram: None,
            tv: None,
            fg_psnr: fg,
            bg_psnr: None,
            seconds: None,
        }
    }

    #[test]
    fn means_skip_failed_runs_and_follow_label_order() {
        let rows = [row("b", Some(2.0)), row("a", Some(1.0)), row("a", Some(3.0)), row("b", None), row("c", None)];
        let labels = ["a".to_string(), "b".to_string(), "c".to_string()];
        assert_eq!(means(&labels, &rows, |r| r.fg_psnr), vec![Some(2.0), Some(2.0), None]);
    }
}
