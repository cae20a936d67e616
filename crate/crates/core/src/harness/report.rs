//! Deterministic result files: metrics CSV and SVG line plots. Every file
//! embeds the config digest and the code version string.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::config::SweepAxis;
use crate::downstream::MetricsRow;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no rows to report")]
    Empty,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn code_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Stable column order of the metrics CSV.
pub const CSV_HEADER: &str = "image_imputer,factor_imputer,mechanism,factor_rate,tp1_rate,seed,auc,p_value";

pub fn metrics_csv_string(rows: &[MetricsRow], config_digest: &str) -> String {
    let mut s = String::new();
    writeln!(s, "# config_digest={config_digest} version={}", code_version()).unwrap();
    writeln!(s, "{CSV_HEADER}").unwrap();
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{:.6},{}",
            r.image_imputer,
            r.factor_imputer,
            r.mechanism,
            r.factor_rate,
            r.tp1_rate,
            r.seed,
            r.auc,
            r.p_value.map(|p| format!("{p:.6}")).unwrap_or_default(),
        )
        .unwrap();
    }
    s
}

pub fn write_metrics_csv(
    rows: &[MetricsRow],
    path: &Path,
    config_digest: &str,
) -> Result<(), ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    std::fs::write(path, metrics_csv_string(rows, config_digest)).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parse a metrics CSV produced by [`write_metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line == CSV_HEADER || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(format!("line {}: expected 8 columns", i + 1));
        }
        let parse = |s: &str, what: &str| -> Result<f64, String> {
            s.parse().map_err(|e| format!("line {}: bad {what}: {e}", i + 1))
        };
        rows.push(MetricsRow {
            image_imputer: parts[0].to_string(),
            factor_imputer: parts[1].to_string(),
            mechanism: parts[2].to_string(),
            factor_rate: parse(parts[3], "factor_rate")?,
            tp1_rate: parse(parts[4], "tp1_rate")?,
            seed: parts[5].parse().map_err(|e| format!("line {}: bad seed: {e}", i + 1))?,
            auc: parse(parts[6], "auc")?,
            p_value: if parts[7].is_empty() {
                None
            } else {
                Some(parse(parts[7], "p_value")?)
            },
        });
    }
    Ok(rows)
}

/// Mean AUC per (method, rate) across seeds, rates ascending.
fn sweep_series(rows: &[MetricsRow], axis: SweepAxis, single_path: bool) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut by_method: std::collections::BTreeMap<String, std::collections::BTreeMap<u64, (f64, usize)>> =
        Default::default();
    for r in rows {
        let (method, rate, other) = match axis {
            SweepAxis::FactorRate => (&r.factor_imputer, r.factor_rate, &r.image_imputer),
            SweepAxis::Tp1Rate => (&r.image_imputer, r.tp1_rate, &r.factor_imputer),
        };
        let is_single = other == "none";
        if is_single != single_path {
            continue;
        }
        let key = rate.to_bits();
        let slot = by_method
            .entry(method.clone())
            .or_default()
            .entry(key)
            .or_insert((0.0, 0));
        slot.0 += r.auc;
        slot.1 += 1;
    }
    by_method
        .into_iter()
        .map(|(m, pts)| {
            let series: Vec<(f64, f64)> = pts
                .into_iter()
                .map(|(bits, (sum, n))| (f64::from_bits(bits), sum / n as f64))
                .collect();
            (m, series)
        })
        .filter(|(_, s)| !s.is_empty())
        .collect()
}

/// Deterministic SVG line plot: rate on x, AUC on y, one polyline per
/// method, legend as plain text rows.
pub fn sweep_svg_string(
    rows: &[MetricsRow],
    axis: SweepAxis,
    single_path: bool,
    config_digest: &str,
) -> String {
    let series = sweep_series(rows, axis, single_path);
    let (w, h) = (640.0f64, 440.0f64);
    let (ml, mr, mt, mb) = (70.0f64, 20.0f64, 30.0f64, 50.0f64);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let xs: Vec<f64> = series
        .iter()
        .flat_map(|(_, s)| s.iter().map(|(x, _)| *x))
        .collect();
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|(_, s)| s.iter().map(|(_, y)| *y))
        .collect();
    let (xmin, xmax) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(1e-9),
    );
    let (ymin, ymax) = (
        (ys.iter().cloned().fold(f64::INFINITY, f64::min) - 0.02).max(0.0),
        (ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 0.02).min(1.0),
    );
    let sx = |x: f64| ml + (x - xmin) / (xmax - xmin).max(1e-12) * plot_w;
    let sy = |y: f64| mt + (1.0 - (y - ymin) / (ymax - ymin).max(1e-12)) * plot_h;

    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, "<!-- config_digest={config_digest} version={} -->", code_version()).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    // axes
    writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        ml,
        mt + plot_h,
        ml + plot_w,
        mt + plot_h
    )
    .unwrap();
    writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        ml, mt, ml, mt + plot_h
    )
    .unwrap();
    let model = if single_path { "single-path" } else { "full" };
    writeln!(
        s,
        r#"<text x="{:.2}" y="18" font-family="monospace" font-size="13">{} missing-rate sweep ({model} model)</text>"#,
        ml,
        axis.as_str()
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="12">{}</text>"#,
        ml + plot_w / 2.0 - 30.0,
        h - 12.0,
        axis.as_str()
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="12" y="{:.2}" font-family="monospace" font-size="12" transform="rotate(-90 12 {:.2})">AUC</text>"#,
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    )
    .unwrap();
    // y tick labels at min/max
    for (v, label_y) in [(ymin, sy(ymin)), (ymax, sy(ymax))] {
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="11">{v:.3}</text>"#,
            18.0,
            label_y + 4.0
        )
        .unwrap();
    }
    for (i, (method, pts)) in series.iter().enumerate() {
        let color = palette[i % palette.len()];
        let points: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        )
        .unwrap();
        for (x, y) in pts {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(*x),
                sy(*y)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="12" fill="{color}">{method}</text>"#,
            ml + plot_w - 140.0,
            mt + 16.0 + 16.0 * i as f64
        )
        .unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    s
}

/// Emit a metrics CSV plus (for sweep rows) full-model and single-path SVG
/// plots into `outdir`. File contents are bit-identical across re-runs on
/// the same rows.
pub fn emit_report(
    rows: &[MetricsRow],
    outdir: &Path,
    name: &str,
    axis: Option<SweepAxis>,
    config_digest: &str,
) -> Result<Vec<std::path::PathBuf>, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    std::fs::create_dir_all(outdir).map_err(|source| ReportError::Io {
        path: outdir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    let csv_path = outdir.join(format!("{name}.csv"));
    write_metrics_csv(rows, &csv_path, config_digest)?;
    written.push(csv_path);
    if let Some(axis) = axis {
        for (suffix, single) in [("full", false), ("single", true)] {
            let svg_path = outdir.join(format!("{name}_{suffix}.svg"));
            std::fs::write(&svg_path, sweep_svg_string(rows, axis, single, config_digest))
                .map_err(|source| ReportError::Io {
                    path: svg_path.display().to_string(),
                    source,
                })?;
            written.push(svg_path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(im: &str, fa: &str, rate: f64, seed: u64, auc: f64) -> MetricsRow {
        MetricsRow {
            image_imputer: im.into(),
            factor_imputer: fa.into(),
            mechanism: "mcar".into(),
            factor_rate: rate,
            tp1_rate: 0.0,
            seed,
            auc,
            p_value: None,
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = vec![row("observed", "mean", 0.3, 1, 0.91)];
        let s = metrics_csv_string(&rows, "digest123");
        let lines: Vec<&str> = s.lines().collect();
        assert!(lines[0].contains("digest123"));
        assert_eq!(lines[1], CSV_HEADER);
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn csv_round_trips() {
        let rows = vec![
            row("observed", "mean", 0.3, 1, 0.91),
            MetricsRow {
                p_value: Some(0.04),
                ..row("pbigan", "pbigan", 0.3, 2, 0.85)
            },
        ];
        let parsed = parse_metrics_csv(&metrics_csv_string(&rows, "d")).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1].p_value, Some(0.04));
        assert_eq!(parsed[0].image_imputer, "observed");
    }

    #[test]
    fn svg_structure_two_methods_five_rates() {
        let mut rows = Vec::new();
        for method in ["pbigan", "cpbigan"] {
            for (k, rate) in [0.0, 0.2, 0.4, 0.6, 0.8].iter().enumerate() {
                rows.push(row("observed", method, *rate, 1, 0.9 - 0.02 * k as f64));
            }
        }
        let svg = sweep_svg_string(&rows, SweepAxis::FactorRate, false, "d");
        assert_eq!(svg.matches("<polyline").count(), 2);
        for line in svg.lines().filter(|l| l.contains("<polyline")) {
            let pts = line.split("points=\"").nth(1).unwrap();
            let n = pts.split('"').next().unwrap().split(' ').count();
            assert_eq!(n, 5, "{line}");
        }
    }

    #[test]
    fn svg_deterministic() {
        let rows = vec![
            row("observed", "pbigan", 0.0, 1, 0.9),
            row("observed", "pbigan", 0.4, 1, 0.8),
        ];
        let a = sweep_svg_string(&rows, SweepAxis::FactorRate, false, "d");
        let b = sweep_svg_string(&rows, SweepAxis::FactorRate, false, "d");
        assert_eq!(a, b);
    }

    #[test]
    fn emit_report_writes_identical_bytes_on_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            row("observed", "pbigan", 0.0, 1, 0.9),
            row("none", "pbigan", 0.4, 1, 0.7),
        ];
        let paths1 = emit_report(&rows, dir.path(), "sweep", Some(SweepAxis::FactorRate), "dig").unwrap();
        let bytes1: Vec<Vec<u8>> = paths1.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let paths2 = emit_report(&rows, dir.path(), "sweep", Some(SweepAxis::FactorRate), "dig").unwrap();
        let bytes2: Vec<Vec<u8>> = paths2.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(bytes1, bytes2);
        assert_eq!(paths1.len(), 3);
    }

    #[test]
    fn empty_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(&[], dir.path(), "x", None, "d"),
            Err(ReportError::Empty)
        ));
    }
}
