//! Static run report rendered from the ledger: a markdown summary with metric
//! tables, line plots of the loss and scheduler logs, and copies of attention
//! overlays. Output depends only on the ledger and artifact contents, so
//! re-rendering is byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::diagnostics::LocalizationRecord;
use crate::eval::FidelityReport;
use crate::ledger::{hash_path, Artifact, LedgerError, RunLedger, StageRecord};
use crate::scheduler::parse_history;
use crate::trainer::parse_loss_log;

pub const SUMMARY_FILE: &str = "summary.md";
pub const LOSS_LOG: &str = "loss.jsonl";
pub const HISTORY_LOG: &str = "scheduler_history.jsonl";
pub const EVAL_REPORT: &str = "report.json";
pub const LOCALIZATION_LOG: &str = "localization.jsonl";
pub const OVERLAY_PREFIX: &str = "overlay_";

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 240;
const MARGIN: i64 = 16;

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("artifact {path} from record {seq} is missing or changed since it was recorded")]
    Integrity { seq: usize, path: String },
    #[error("artifact {path} cannot be parsed: {message}")]
    Parse { path: String, message: String },
    #[error("cannot write {path}: {message}")]
    Write { path: PathBuf, message: String },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

fn write_err(path: &Path) -> impl FnOnce(String) -> ReportError + '_ {
    move |message| ReportError::Write {
        path: path.to_path_buf(),
        message,
    }
}

/// One plotted series.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub fn series_color(i: usize) -> [u8; 3] {
    PALETTE[i % PALETTE.len()]
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line plot of every series on shared axes. Non-finite points are skipped.
pub fn plot_series(series: &[Series], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts() {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let (w, h) = (width as i64, height as i64);
    let axis = [96, 96, 96];
    draw_line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), axis);
    draw_line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), axis);
    if !x_lo.is_finite() {
        return img;
    }
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let (xs, ys) = (span(x_lo, x_hi), span(y_lo, y_hi));
    let to_px = |(x, y): (f64, f64)| {
        let px = MARGIN + ((x - x_lo) / xs * (w - 2 * MARGIN) as f64).round() as i64;
        let py = h - MARGIN - ((y - y_lo) / ys * (h - 2 * MARGIN) as f64).round() as i64;
        (px, py)
    };
    for (i, s) in series.iter().enumerate() {
        let color = series_color(i);
        let finite: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&p| to_px(p))
            .collect();
        match finite.as_slice() {
            [single] => draw_line(&mut img, *single, *single, color),
            _ => finite.windows(2).for_each(|seg| draw_line(&mut img, seg[0], seg[1], color)),
        }
    }
    img
}

fn file_name(a: &Artifact) -> &str {
    a.path.rsplit('/').next().unwrap_or(&a.path)
}

fn read_verified(root: &Path, seq: usize, a: &Artifact) -> Result<Vec<u8>, ReportError> {
    let full = root.join(&a.path);
    let integrity = || ReportError::Integrity {
        seq,
        path: a.path.clone(),
    };
    if hash_path(&full).map_err(|_| integrity())? != a.sha256 {
        return Err(integrity());
    }
    std::fs::read(&full).map_err(|_| integrity())
}

fn parse_text<T>(a: &Artifact, bytes: &[u8], f: impl FnOnce(&str) -> Result<T, String>) -> Result<T, ReportError> {
    let parse = |message: String| ReportError::Parse {
        path: a.path.clone(),
        message,
    };
    let text = std::str::from_utf8(bytes).map_err(|e| parse(e.to_string()))?;
    f(text).map_err(parse)
}

fn safe_name(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn save_png(img: &RgbImage, path: &Path) -> Result<(), ReportError> {
    img.save(path).map_err(|e| write_err(path)(e.to_string()))
}

fn legend(out: &mut String, labels: &[String]) {
    let items: Vec<String> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let [r, g, b] = series_color(i);
            format!("`#{r:02x}{g:02x}{b:02x}` {l}")
        })
        .collect();
    let _ = writeln!(out, "Series: {}\n", items.join(", "));
}

/// Artifacts of `record` that no later record overwrote.
fn current_outputs<'a>(ledger: &RunLedger, record: &'a StageRecord) -> Vec<&'a Artifact> {
    record
        .outputs
        .iter()
        .filter(|a| ledger.producer_of(&a.path).is_some_and(|(r, _)| r.seq == record.seq))
        .collect()
}

/// What [`render`] wrote.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderedReport {
    pub summary: PathBuf,
    pub metric_tables: usize,
    pub plots: Vec<PathBuf>,
    pub overlays: Vec<PathBuf>,
}

/// Render the report for `ledger` (artifact paths relative to `root`) into `out`.
pub fn render(ledger: &RunLedger, root: &Path, out: &Path) -> Result<RenderedReport, ReportError> {
    ledger.check_dag()?;
    let plots_dir = out.join("plots");
    let overlays_dir = out.join("overlays");
    for d in [out, &plots_dir, &overlays_dir] {
        std::fs::create_dir_all(d).map_err(|e| write_err(d)(e.to_string()))?;
    }
    let mut rendered = RenderedReport::default();
    let mut md = String::from("# Run report\n\n");
    if ledger.records.is_empty() {
        md.push_str("No stages recorded.\n");
    } else {
        md.push_str("| seq | stage | config | outputs |\n|---|---|---|---|\n");
        for r in &ledger.records {
            let _ = writeln!(md, "| {} | {} | `{}` | {} |", r.seq, r.stage, &r.config_hash[..r.config_hash.len().min(12)], r.outputs.len());
        }
        md.push('\n');
    }
    for r in &ledger.records {
        let mut section = String::new();
        for a in current_outputs(ledger, r) {
            let name = file_name(a);
            let is_overlay = name.starts_with(OVERLAY_PREFIX) && name.ends_with(".png");
            if ![LOSS_LOG, HISTORY_LOG, EVAL_REPORT, LOCALIZATION_LOG].contains(&name) && !is_overlay {
                continue;
            }
            let bytes = read_verified(root, r.seq, a)?;
            match name {
                LOSS_LOG => {
                    let records = parse_text(a, &bytes, |t| parse_loss_log(t).map_err(|e| e.to_string()))?;
                    let s = Series {
                        label: "loss".into(),
                        points: records.iter().map(|l| (l.iteration as f64, l.loss)).collect(),
                    };
                    let file = plots_dir.join(format!("{:03}_{}_loss.png", r.seq, safe_name(&r.stage)));
                    save_png(&plot_series(&[s], PLOT_W, PLOT_H), &file)?;
                    let (first, last) = (records.first().map(|l| l.loss), records.last().map(|l| l.loss));
                    let _ = writeln!(section, "Loss over {} iterations", records.len());
                    if let (Some(f), Some(l)) = (first, last) {
                        let _ = write!(section, " (first {f:.4}, last {l:.4})");
                    }
                    let _ = writeln!(section, ".\n\n![loss](plots/{})\n", file.file_name().unwrap().to_string_lossy());
                    rendered.plots.push(file);
                }
                HISTORY_LOG => {
                    let history = parse_text(a, &bytes, |t| parse_history(t).map_err(|e| e.to_string()))?;
                    let labels: Vec<String> = history
                        .first()
                        .map(|h| h.classes.iter().map(|c| c.name.clone()).collect())
                        .unwrap_or_default();
                    let series: Vec<Series> = labels
                        .iter()
                        .enumerate()
                        .map(|(k, label)| Series {
                            label: label.clone(),
                            points: history
                                .iter()
                                .filter_map(|h| h.classes.get(k).map(|c| (h.iteration as f64, c.prob)))
                                .collect(),
                        })
                        .collect();
                    let file = plots_dir.join(format!("{:03}_{}_sampling.png", r.seq, safe_name(&r.stage)));
                    save_png(&plot_series(&series, PLOT_W, PLOT_H), &file)?;
                    let _ = writeln!(section, "Sampling probabilities over {} recalibrations.\n", history.len());
                    legend(&mut section, &labels);
                    let _ = writeln!(section, "![sampling](plots/{})\n", file.file_name().unwrap().to_string_lossy());
                    rendered.plots.push(file);
                }
                EVAL_REPORT => {
                    let report = parse_text(a, &bytes, |t| FidelityReport::parse(t).map_err(|e| e.to_string()))?;
                    section.push_str(&report.summary_table());
                    section.push('\n');
                    rendered.metric_tables += 1;
                }
                LOCALIZATION_LOG => {
                    let rows: Vec<LocalizationRecord> = parse_text(a, &bytes, |t| {
                        t.lines()
                            .filter(|l| !l.trim().is_empty())
                            .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
                            .collect()
                    })?;
                    section.push_str("| image | token | localization |\n|---|---|---|\n");
                    for row in &rows {
                        let _ = writeln!(section, "| {} | `{}` | {:.4} |", row.image, row.token, row.score);
                    }
                    section.push('\n');
                }
                _ => {
                    let file = overlays_dir.join(format!("{:03}_{}", r.seq, safe_name(name)));
                    std::fs::write(&file, &bytes).map_err(|e| write_err(&file)(e.to_string()))?;
                    let _ = writeln!(section, "![{name}](overlays/{})\n", file.file_name().unwrap().to_string_lossy());
                    rendered.overlays.push(file);
                }
            }
        }
        if !section.is_empty() {
            let _ = writeln!(md, "## {} (record {})\n\n{}", r.stage, r.seq, section.trim_end());
            md.push('\n');
        }
    }
    let summary = out.join(SUMMARY_FILE);
    std::fs::write(&summary, md).map_err(|e| write_err(&summary)(e.to_string()))?;
    rendered.summary = summary;
    Ok(rendered)
}
