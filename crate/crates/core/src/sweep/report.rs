use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::analysis::{correlate, find_interpolation_threshold, Correlation};
use super::run::{write_atomic, FailedCell, SweepResult};
use crate::bounds::write_jsonl;
use crate::error::{Error, Result};
use crate::probes::ProbeReport;

/// Column order of `results.csv`.
pub const COLUMNS: [&str; 24] = [
    "width",
    "params",
    "seed",
    "epoch",
    "split",
    "train_err",
    "test_err",
    "train_loss",
    "test_loss",
    "emp_lipschitz",
    "emp_lipschitz_max",
    "lip_upper",
    "loss_jac_norm_sq",
    "param_grad_norm_sq",
    "hessian_trace",
    "hessian_trace_stderr",
    "lambda_max_H",
    "lambda_min_H",
    "lambda_min_nonzero_H",
    "noise_top_eig",
    "confidence",
    "stability_margin",
    "dist_init_json",
    "wall_s",
];

/// Optional numeric columns, i.e. the metrics.
pub const METRIC_COLUMNS: [&str; 17] = [
    "train_err",
    "test_err",
    "train_loss",
    "test_loss",
    "emp_lipschitz",
    "emp_lipschitz_max",
    "lip_upper",
    "loss_jac_norm_sq",
    "param_grad_norm_sq",
    "hessian_trace",
    "hessian_trace_stderr",
    "lambda_max_H",
    "lambda_min_H",
    "lambda_min_nonzero_H",
    "noise_top_eig",
    "confidence",
    "stability_margin",
];

/// Metrics charted by [`emit_reports`] when present.
pub const DEFAULT_CHARTS: [&str; 9] = [
    "train_err",
    "test_err",
    "emp_lipschitz",
    "lip_upper",
    "loss_jac_norm_sq",
    "param_grad_norm_sq",
    "hessian_trace",
    "lambda_max_H",
    "noise_top_eig",
];

fn metric_slot<'a>(row: &'a ProbeReport, name: &str) -> Option<&'a Option<f64>> {
    Some(match name {
        "train_err" => &row.train_err,
        "test_err" => &row.test_err,
        "train_loss" => &row.train_loss,
        "test_loss" => &row.test_loss,
        "emp_lipschitz" => &row.emp_lipschitz,
        "emp_lipschitz_max" => &row.emp_lipschitz_max,
        "lip_upper" => &row.lip_upper,
        "loss_jac_norm_sq" => &row.loss_jac_norm_sq,
        "param_grad_norm_sq" => &row.param_grad_norm_sq,
        "hessian_trace" => &row.hessian_trace,
        "hessian_trace_stderr" => &row.hessian_trace_stderr,
        "lambda_max_H" => &row.lambda_max_h,
        "lambda_min_H" => &row.lambda_min_h,
        "lambda_min_nonzero_H" => &row.lambda_min_nonzero_h,
        "noise_top_eig" => &row.noise_top_eig,
        "confidence" => &row.confidence,
        "stability_margin" => &row.stability_margin,
        _ => return None,
    })
}

fn metric_slot_mut<'a>(row: &'a mut ProbeReport, name: &str) -> Option<&'a mut Option<f64>> {
    Some(match name {
        "train_err" => &mut row.train_err,
        "test_err" => &mut row.test_err,
        "train_loss" => &mut row.train_loss,
        "test_loss" => &mut row.test_loss,
        "emp_lipschitz" => &mut row.emp_lipschitz,
        "emp_lipschitz_max" => &mut row.emp_lipschitz_max,
        "lip_upper" => &mut row.lip_upper,
        "loss_jac_norm_sq" => &mut row.loss_jac_norm_sq,
        "param_grad_norm_sq" => &mut row.param_grad_norm_sq,
        "hessian_trace" => &mut row.hessian_trace,
        "hessian_trace_stderr" => &mut row.hessian_trace_stderr,
        "lambda_max_H" => &mut row.lambda_max_h,
        "lambda_min_H" => &mut row.lambda_min_h,
        "lambda_min_nonzero_H" => &mut row.lambda_min_nonzero_h,
        "noise_top_eig" => &mut row.noise_top_eig,
        "confidence" => &mut row.confidence,
        "stability_margin" => &mut row.stability_margin,
        _ => return None,
    })
}

/// Numeric value of a `results.csv` column; `None` when not measured.
pub fn column_f64(row: &ProbeReport, name: &str) -> Result<Option<f64>> {
    match name {
        "width" => Ok(Some(row.width as f64)),
        "params" => Ok(Some(row.params as f64)),
        "seed" => Ok(Some(row.seed as f64)),
        "epoch" => Ok(Some(row.epoch as f64)),
        "wall_s" => Ok(Some(row.wall_s)),
        _ => metric_slot(row, name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown metric column '{name}'"))),
    }
}

fn fmt_f64(v: f64) -> String {
    // Debug formatting is the shortest representation that round-trips.
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// One `results.csv` record in [`COLUMNS`] order.
pub fn csv_record(row: &ProbeReport) -> Result<Vec<String>> {
    let mut rec = vec![
        row.width.to_string(),
        row.params.to_string(),
        row.seed.to_string(),
        row.epoch.to_string(),
        row.split.clone(),
    ];
    rec.extend(METRIC_COLUMNS.iter().map(|m| fmt_opt(*metric_slot(row, m).expect("metric column"))));
    rec.push(match &row.dist_init {
        Some(d) => serde_json::to_string(d)?,
        None => String::new(),
    });
    rec.push(fmt_f64(row.wall_s));
    Ok(rec)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { row: 0, col: 0, msg: format!("{other:?}") },
    }
}

pub fn write_results_csv(rows: &[ProbeReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(csv_record(row)?).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

fn parse_field<F: std::str::FromStr>(s: &str, row: usize, col: usize) -> Result<F> {
    s.trim().parse().map_err(|_| Error::Parse { row, col, msg: format!("cannot parse '{s}'") })
}

fn parse_opt(s: &str, row: usize, col: usize) -> Result<Option<f64>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_field(s, row, col).map(Some)
    }
}

/// Reads a `results.csv` written by [`write_results_csv`]; the header must
/// match [`COLUMNS`] exactly.
pub fn read_results_csv(path: &Path) -> Result<Vec<ProbeReport>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::Parse {
            row: 0,
            col: 0,
            msg: format!("unexpected header; expected {}", COLUMNS.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        if rec.len() != COLUMNS.len() {
            return Err(Error::Parse { row: line, col: rec.len(), msg: "wrong number of fields".into() });
        }
        let mut row = ProbeReport {
            width: parse_field(&rec[0], line, 0)?,
            params: parse_field(&rec[1], line, 1)?,
            seed: parse_field(&rec[2], line, 2)?,
            epoch: parse_field(&rec[3], line, 3)?,
            split: rec[4].to_string(),
            ..ProbeReport::default()
        };
        for (k, m) in METRIC_COLUMNS.iter().enumerate() {
            *metric_slot_mut(&mut row, m).expect("metric column") = parse_opt(&rec[5 + k], line, 5 + k)?;
        }
        let dist = &rec[COLUMNS.len() - 2];
        if !dist.is_empty() {
            row.dist_init = Some(serde_json::from_str(dist).map_err(|e| Error::Parse {
                row: line,
                col: COLUMNS.len() - 2,
                msg: e.to_string(),
            })?);
        }
        row.wall_s = parse_field(&rec[COLUMNS.len() - 1], line, COLUMNS.len() - 1)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Long-format metrics per `(width, seed, epoch, split)`, for heatmaps.
pub fn write_epochwise_csv(rows: &[ProbeReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["width", "seed", "epoch", "split", "metric", "value"]).map_err(|e| csv_err(path, e))?;
    for row in rows {
        for m in METRIC_COLUMNS {
            if let Some(v) = *metric_slot(row, m).expect("metric column") {
                let rec = [row.width.to_string(), row.seed.to_string(), row.epoch.to_string(), row.split.clone()];
                w.write_record(rec.iter().map(String::as_str).chain([m, fmt_f64(v).as_str()]))
                    .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Per-epoch training curves of every cell.
pub fn write_history_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["width", "seed", "epoch", "lr", "train_err", "train_loss", "test_err", "test_loss"])
        .map_err(|e| csv_err(path, e))?;
    for (width, seed, h) in &result.histories {
        for e in &h.epochs {
            w.write_record([
                width.to_string(),
                seed.to_string(),
                e.epoch.to_string(),
                fmt_f64(e.lr),
                fmt_f64(e.train_err),
                fmt_f64(e.train_loss),
                fmt_opt(e.test_err),
                fmt_opt(e.test_loss),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Values plotted for one metric: final probe epoch, training rows, one
/// `(width, value)` series per seed.
pub fn chart_series(rows: &[ProbeReport], metric: &str) -> Result<BTreeMap<u64, Vec<(usize, f64)>>> {
    let train: Vec<&ProbeReport> = rows.iter().filter(|r| r.split == "train").collect();
    let Some(last) = train.iter().map(|r| r.epoch).max() else {
        return Ok(BTreeMap::new());
    };
    let mut series: BTreeMap<u64, Vec<(usize, f64)>> = BTreeMap::new();
    for r in train.into_iter().filter(|r| r.epoch == last) {
        if let Some(v) = column_f64(r, metric)?.filter(|v| v.is_finite()) {
            series.entry(r.seed).or_default().push((r.width, v));
        }
    }
    for s in series.values_mut() {
        s.sort_by_key(|p| p.0);
    }
    Ok(series)
}

fn mean_series(series: &BTreeMap<u64, Vec<(usize, f64)>>) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for s in series.values() {
        for (w, v) in s {
            let e = acc.entry(*w).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(w, (s, n))| (w, s / n as f64)).collect()
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of `metric` against width on a logarithmic x axis, one
/// polyline per seed plus their mean. The root element records the exact
/// data range in `data-ymin` / `data-ymax`.
pub fn render_chart(metric: &str, series: &BTreeMap<u64, Vec<(usize, f64)>>) -> String {
    let points = || series.values().flatten();
    let ymin = points().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ymax = points().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let xmin = points().map(|p| (p.0 as f64).log10()).fold(f64::INFINITY, f64::min);
    let xmax = points().map(|p| (p.0 as f64).log10()).fold(f64::NEG_INFINITY, f64::max);
    let (plot_w, plot_h) = (SVG_W - 2.0 * MARGIN, SVG_H - 2.0 * MARGIN);
    let sx = |w: usize| {
        let x = (w as f64).log10();
        if xmax > xmin {
            MARGIN + (x - xmin) / (xmax - xmin) * plot_w
        } else {
            MARGIN + plot_w / 2.0
        }
    };
    let sy = |v: f64| {
        if ymax > ymin {
            SVG_H - MARGIN - (v - ymin) / (ymax - ymin) * plot_h
        } else {
            SVG_H - MARGIN - plot_h / 2.0
        }
    };
    let name = escape(metric);
    let mut s = String::new();
    let empty = series.is_empty();
    let (lo, hi) = if empty { (0.0, 0.0) } else { (ymin, ymax) };
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}" data-metric="{name}" data-ymin="{lo:?}" data-ymax="{hi:?}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="30" text-anchor="middle" font-size="16">{name}</text>"#, SVG_W / 2.0);
    let (x0, y0, x1, y1) = (MARGIN, SVG_H - MARGIN, SVG_W - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    if !empty {
        let _ = writeln!(s, r#"<text x="{}" y="{y0}" text-anchor="end" font-size="11">{ymin:.4e}</text>"#, x0 - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{ymax:.4e}</text>"#, x0 - 4.0, y1 + 4.0);
        let mut widths: Vec<usize> = points().map(|p| p.0).collect();
        widths.sort_unstable();
        widths.dedup();
        for w in widths {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="11">{w}</text>"#,
                sx(w),
                y0 + 16.0
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">width (log scale)</text>"#,
        SVG_W / 2.0,
        SVG_H - 15.0
    );
    let poly = |pts: &[(usize, f64)]| {
        pts.iter().map(|(w, v)| format!("{:.2},{:.2}", sx(*w), sy(*v))).collect::<Vec<_>>().join(" ")
    };
    for (i, (seed, pts)) in series.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<polyline class="seed" data-seed="{seed}" fill="none" stroke="{}" stroke-opacity="0.5" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            poly(pts)
        );
    }
    if !empty {
        let _ = writeln!(
            s,
            r#"<polyline class="mean" fill="none" stroke="black" stroke-width="2" points="{}"/>"#,
            poly(&mean_series(series))
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes one chart per metric with data into `dir`; returns the paths.
pub fn write_charts(rows: &[ProbeReport], metrics: &[&str], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for m in metrics {
        let series = chart_series(rows, m)?;
        if series.is_empty() {
            log::debug!("no data for chart {m}");
            continue;
        }
        let path = dir.join(format!("{m}.svg"));
        write_atomic(&path, render_chart(m, &series).as_bytes())?;
        out.push(path);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub reports: usize,
    pub asserted: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub fingerprint: String,
    pub cells: usize,
    pub failed: Vec<FailedCell>,
    pub interpolation_threshold: BTreeMap<u64, Option<usize>>,
    pub correlations: Vec<Correlation>,
    pub bounds: BoundSummary,
}

/// Correlations reported in `summary.json`.
pub const SUMMARY_CORRELATIONS: [(&str, &str); 4] = [
    ("emp_lipschitz", "test_err"),
    ("loss_jac_norm_sq", "test_err"),
    ("hessian_trace", "test_err"),
    ("emp_lipschitz", "hessian_trace"),
];

pub fn summarize(result: &SweepResult) -> Summary {
    let epoch = result.final_epoch();
    let correlations = SUMMARY_CORRELATIONS
        .iter()
        .filter_map(|(a, b)| correlate(&result.rows, epoch, a, b).ok())
        .collect();
    Summary {
        fingerprint: result.fingerprint.clone(),
        cells: result.histories.len() + result.failed.len(),
        failed: result.failed.clone(),
        interpolation_threshold: find_interpolation_threshold(&result.rows, epoch),
        correlations,
        bounds: BoundSummary {
            reports: result.bounds.len(),
            asserted: result.bounds.iter().filter(|b| b.asserted).count(),
            violations: result.bounds.iter().filter(|b| !b.passes()).count(),
        },
    }
}

/// Writes `results.csv`, `bounds.jsonl`, `epochwise.csv`, `history.csv`,
/// `summary.json` and the default charts under `charts/`.
pub fn emit_reports(result: &SweepResult, dir: &Path) -> Result<Summary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_results_csv(&result.rows, &dir.join("results.csv"))?;
    let mut jsonl = Vec::new();
    write_jsonl(&result.bounds, &mut jsonl)?;
    write_atomic(&dir.join("bounds.jsonl"), &jsonl)?;
    write_epochwise_csv(&result.rows, &dir.join("epochwise.csv"))?;
    write_history_csv(result, &dir.join("history.csv"))?;
    let summary = summarize(result);
    write_atomic(&dir.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
    write_charts(&result.rows, &DEFAULT_CHARTS, &dir.join("charts"))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_columns_follow_the_header() {
        assert_eq!(&COLUMNS[5..5 + METRIC_COLUMNS.len()], &METRIC_COLUMNS);
        let row = ProbeReport { split: "train".into(), ..Default::default() };
        assert_eq!(csv_record(&row).unwrap().len(), COLUMNS.len());
        assert!(column_f64(&row, "nope").is_err());
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0, 1e-300, 123456.789, -2.5e17, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
