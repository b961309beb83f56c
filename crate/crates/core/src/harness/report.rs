use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use thiserror::Error;

use super::{SweepKind, SweepResult, SweepRow};
use crate::admm::write_history_csv;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("plot {path}: {reason}")]
    Plot { path: PathBuf, reason: String },
}

const SUMMARY_HEADER: [&str; 26] = [
    "label",
    "eps_abs",
    "alpha_d",
    "alpha_pv",
    "n_prosumers",
    "n_steps",
    "status",
    "iterations",
    "r_norm",
    "s_norm",
    "eps_pri",
    "eps_dual",
    "objective",
    "central_objective",
    "gap_pct",
    "r_max_kw",
    "r_mean_kw",
    "t_9a_ms",
    "t_9b_ms",
    "t_9c_ms",
    "t_comm_ms",
    "latency_share",
    "bytes_total",
    "undervoltage",
    "overvoltage",
    "feeder_limit",
];

type Plotter = fn(&SweepResult, &Path) -> Result<(), String>;

/// Writes the summary table; header only when there are no rows.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(SUMMARY_HEADER)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(input: R) -> csv::Result<Vec<SweepRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Number of plots [`emit_report`] draws for a result.
pub fn plot_count(result: &SweepResult) -> usize {
    if result.rows.is_empty() {
        0
    } else {
        2
    }
}

/// Writes `sweep.csv`, one `history-<label>.csv` per row and, for non-empty
/// results, an iteration-count plot and a residual-trace plot. Returns the
/// paths written.
pub fn emit_report(result: &SweepResult, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();

    let summary = out_dir.join("sweep.csv");
    let f = File::create(&summary).map_err(io_err(&summary))?;
    write_sweep_csv(&result.rows, BufWriter::new(f)).map_err(|source| ReportError::Csv {
        path: summary.clone(),
        source,
    })?;
    written.push(summary);

    for (row, history) in result.rows.iter().zip(&result.histories) {
        let path = out_dir.join(format!("history-{}.csv", row.label));
        let f = File::create(&path).map_err(io_err(&path))?;
        write_history_csv(history, BufWriter::new(f)).map_err(|source| ReportError::Csv {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }

    if result.rows.is_empty() {
        return Ok(written);
    }
    let (name, draw): (&str, Plotter) = match result.kind {
        SweepKind::Tolerance => ("k_vs_tolerance.svg", plot_k_vs_tolerance),
        SweepKind::Mix => ("k_vs_mix.svg", plot_k_vs_mix),
        SweepKind::Size => ("k_vs_size.svg", plot_k_vs_size),
    };
    for (name, draw) in [
        (name, draw),
        ("residuals.svg", plot_residuals as fn(&_, &_) -> _),
    ] {
        let path = out_dir.join(name);
        draw(result, &path).map_err(|reason| ReportError::Plot {
            path: path.clone(),
            reason,
        })?;
        written.push(path);
    }
    Ok(written)
}

const SIZE: (u32, u32) = (800, 500);

fn max_k(result: &SweepResult) -> f64 {
    result
        .rows
        .iter()
        .map(|r| r.iterations)
        .max()
        .unwrap_or(1)
        .max(1) as f64
        * 1.1
}

fn plot_k_vs_tolerance(result: &SweepResult, path: &Path) -> Result<(), String> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let eps: Vec<f64> = result.rows.iter().map(|r| r.eps_abs).collect();
    let lo = eps.iter().copied().fold(f64::INFINITY, f64::min) / 2.0;
    let hi = eps.iter().copied().fold(0.0, f64::max) * 2.0;
    let mut chart = ChartBuilder::on(&root)
        .caption("Iterations against tolerance", ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d((lo..hi).log_scale(), 0.0..max_k(result))
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_desc("eps_abs")
        .y_desc("iterations")
        .x_label_formatter(&|v| format!("{v:.0e}"))
        .draw()
        .map_err(|e| e.to_string())?;
    let pts: Vec<(f64, f64)> = result
        .rows
        .iter()
        .map(|r| (r.eps_abs, r.iterations as f64))
        .collect();
    chart
        .draw_series(LineSeries::new(pts.clone(), &BLUE))
        .map_err(|e| e.to_string())?;
    chart
        .draw_series(pts.into_iter().map(|p| Circle::new(p, 4, BLUE.filled())))
        .map_err(|e| e.to_string())?;
    root.present().map_err(|e| e.to_string())
}

fn plot_k_vs_mix(result: &SweepResult, path: &Path) -> Result<(), String> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let d_hi = result.rows.iter().map(|r| r.alpha_d).fold(0.0, f64::max) * 1.1 + 0.1;
    let mut chart = ChartBuilder::on(&root)
        .caption("Iterations across energy mixes", ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..d_hi, 0.0..max_k(result))
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_desc("demand factor")
        .y_desc("iterations")
        .draw()
        .map_err(|e| e.to_string())?;
    let mut pvs: Vec<f64> = result.rows.iter().map(|r| r.alpha_pv).collect();
    pvs.sort_by(f64::total_cmp);
    pvs.dedup();
    for (i, &pv) in pvs.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let mut rows: Vec<&SweepRow> = result.rows.iter().filter(|r| r.alpha_pv == pv).collect();
        rows.sort_by(|a, b| a.alpha_d.total_cmp(&b.alpha_d));
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (r.alpha_d, r.iterations as f64))
            .collect();
        chart
            .draw_series(LineSeries::new(pts, color))
            .map_err(|e| e.to_string())?
            .label(format!("PV x{pv}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        // Congested points are drawn filled.
        chart
            .draw_series(rows.iter().map(|r| {
                let style = if r.congested() {
                    color.filled()
                } else {
                    color.stroke_width(1)
                };
                Circle::new((r.alpha_d, r.iterations as f64), 4, style)
            }))
            .map_err(|e| e.to_string())?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| e.to_string())?;
    root.present().map_err(|e| e.to_string())
}

fn plot_k_vs_size(result: &SweepResult, path: &Path) -> Result<(), String> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let n_hi = result.rows.iter().map(|r| r.n_prosumers).max().unwrap_or(1) as f64 * 1.1 + 1.0;
    let mut chart = ChartBuilder::on(&root)
        .caption("Iterations against prosumer count", ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..n_hi, 0.0..max_k(result))
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_desc("prosumers")
        .y_desc("iterations")
        .draw()
        .map_err(|e| e.to_string())?;
    let pts: Vec<(f64, f64)> = result
        .rows
        .iter()
        .map(|r| (r.n_prosumers as f64, r.iterations as f64))
        .collect();
    chart
        .draw_series(LineSeries::new(pts.clone(), &BLUE))
        .map_err(|e| e.to_string())?;
    chart
        .draw_series(pts.into_iter().map(|p| Circle::new(p, 4, BLUE.filled())))
        .map_err(|e| e.to_string())?;
    root.present().map_err(|e| e.to_string())
}

fn plot_residuals(result: &SweepResult, path: &Path) -> Result<(), String> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let values = result
        .histories
        .iter()
        .flatten()
        .map(|r| r.r_norm)
        .filter(|&v| v > 0.0);
    let (lo, hi) = values.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let (lo, hi) = if lo.is_finite() {
        (lo / 2.0, hi * 2.0)
    } else {
        (1e-6, 1.0)
    };
    let k_hi = result
        .histories
        .iter()
        .map(Vec::len)
        .max()
        .unwrap_or(1)
        .max(2) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption("Primal residual", ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(1.0..k_hi, (lo..hi).log_scale())
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("||r|| (kW)")
        .y_label_formatter(&|v| format!("{v:.0e}"))
        .draw()
        .map_err(|e| e.to_string())?;
    for (i, (row, history)) in result.rows.iter().zip(&result.histories).enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts = history
            .iter()
            .filter(|r| r.r_norm > 0.0)
            .map(|r| (r.k as f64, r.r_norm));
        chart
            .draw_series(LineSeries::new(pts, color))
            .map_err(|e| e.to_string())?
            .label(row.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    if result.rows.len() <= 12 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| e.to_string())?;
    }
    root.present().map_err(|e| e.to_string())
}
