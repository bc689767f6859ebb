//! Per-epoch metrics CSV and a small SVG chart of loss and accuracy.

use std::fmt::Write as _;
use std::path::Path;

use super::EvalError;
use crate::train::RunReport;

pub const METRICS_COLUMNS: [&str; 13] = [
    "epoch",
    "train_total",
    "train_cel",
    "train_triplet",
    "train_active",
    "train_mined",
    "train_acc",
    "val_total",
    "val_cel",
    "val_triplet",
    "val_active",
    "val_mined",
    "val_acc",
];

/// One row per epoch. Floats use the shortest representation that parses
/// back to the same value; wall time is left out so reruns are identical.
pub fn metrics_csv(report: &RunReport) -> String {
    let mut out = METRICS_COLUMNS.join(",");
    out.push('\n');
    for r in &report.rows {
        writeln!(
            out,
            "{},{:?},{:?},{:?},{},{},{:?},{:?},{:?},{:?},{},{},{:?}",
            r.epoch,
            r.train.total,
            r.train.cel_term,
            r.train.triplet_term,
            r.train.active_triplets,
            r.train.mined_triplets,
            r.train_acc,
            r.val.total,
            r.val.cel_term,
            r.val.triplet_term,
            r.val.active_triplets,
            r.val.mined_triplets,
            r.val_acc,
        )
        .unwrap();
    }
    out
}

fn write(path: &Path, text: &str) -> Result<(), EvalError> {
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_metrics_csv(report: &RunReport, path: impl AsRef<Path>) -> Result<(), EvalError> {
    write(path.as_ref(), &metrics_csv(report))
}

const WIDTH: f64 = 720.0;
const PANEL_H: f64 = 220.0;
const PAD: f64 = 40.0;

#[allow(clippy::too_many_arguments)]
fn polyline(
    out: &mut String,
    xs: &[f64],
    ys: &[f64],
    top: f64,
    y_max: f64,
    colour: &str,
    dash: bool,
    name: &str,
) {
    let n = xs.len();
    let x_span = (xs[n - 1] - xs[0]).max(1.0);
    let points: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let px = PAD + (x - xs[0]) / x_span * (WIDTH - 2.0 * PAD);
            let frac = if y_max > 0.0 {
                (y / y_max).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let py = top + PANEL_H - PAD - frac * (PANEL_H - 2.0 * PAD);
            format!("{px:.2},{py:.2}")
        })
        .collect();
    let dash = if dash {
        " stroke-dasharray=\"6 4\""
    } else {
        ""
    };
    writeln!(
        out,
        "  <polyline data-series=\"{name}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"{dash} points=\"{}\"/>",
        points.join(" ")
    )
    .unwrap();
}

/// Two panels (loss, accuracy), each with a train and a val series.
pub fn curves_svg(report: &RunReport) -> String {
    let xs: Vec<f64> = report.rows.iter().map(|r| r.epoch as f64).collect();
    let series =
        |f: fn(&crate::train::EpochRow) -> f64| report.rows.iter().map(f).collect::<Vec<f64>>();
    let (tl, vl) = (series(|r| r.train.total), series(|r| r.val.total));
    let (ta, va) = (series(|r| r.train_acc), series(|r| r.val_acc));
    let loss_max = tl.iter().chain(&vl).copied().fold(0.0, f64::max);
    let height = 2.0 * PANEL_H;
    let mut out = String::new();
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" viewBox=\"0 0 {WIDTH} {height}\">"
    )
    .unwrap();
    out.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (top, title) in [
        (
            0.0,
            format!("loss ({} regime, max {loss_max:.4})", report.regime),
        ),
        (PANEL_H, "accuracy (0 to 1)".to_string()),
    ] {
        writeln!(
            out,
            "  <rect x=\"{PAD}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
            top + PAD,
            WIDTH - 2.0 * PAD,
            PANEL_H - 2.0 * PAD
        )
        .unwrap();
        writeln!(out, "  <text x=\"{PAD}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\">{title}</text>", top + PAD - 8.0).unwrap();
    }
    polyline(
        &mut out,
        &xs,
        &tl,
        0.0,
        loss_max,
        "#1f77b4",
        false,
        "train_loss",
    );
    polyline(
        &mut out, &xs, &vl, 0.0, loss_max, "#ff7f0e", true, "val_loss",
    );
    polyline(
        &mut out,
        &xs,
        &ta,
        PANEL_H,
        1.0,
        "#1f77b4",
        false,
        "train_acc",
    );
    polyline(&mut out, &xs, &va, PANEL_H, 1.0, "#ff7f0e", true, "val_acc");
    writeln!(
        out,
        "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">solid: train, dashed: val, x: epoch 1..{}</text>",
        PAD,
        height - 10.0,
        xs.len()
    )
    .unwrap();
    out.push_str("</svg>\n");
    out
}

/// Writes the metrics CSV and the SVG chart.
pub fn emit_curves(
    report: &RunReport,
    csv_path: impl AsRef<Path>,
    svg_path: impl AsRef<Path>,
) -> Result<(), EvalError> {
    if report.rows.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    write_metrics_csv(report, csv_path)?;
    write(svg_path.as_ref(), &curves_svg(report))
}
