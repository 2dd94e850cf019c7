//! Report files: `report.json`, `report.csv`, `roc_fold<k>.csv` and `roc.svg`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{CvReport, RocCurve};
use crate::error::{Error, Result};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const ROC_SVG: &str = "roc.svg";

pub fn roc_csv_name(fold: usize) -> String {
    format!("roc_fold{fold}.csv")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes every report file into `dir` and returns their paths.
pub fn write_report(report: &CvReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let json_path = dir.join(REPORT_JSON);
    let mut json = serde_json::to_string_pretty(report).map_err(|e| Error::json(&json_path, e))?;
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);

    let csv_path = dir.join(REPORT_CSV);
    let mut rows: Vec<Vec<String>> = report
        .folds
        .iter()
        .map(|f| {
            vec![
                f.fold.to_string(),
                f.threshold.to_string(),
                f.sensitivity.to_string(),
                f.specificity.to_string(),
                f.f1.to_string(),
                f.accuracy.to_string(),
                f.auc.to_string(),
                f.confusion.tp.to_string(),
                f.confusion.fn_.to_string(),
                f.confusion.tn.to_string(),
                f.confusion.fp.to_string(),
            ]
        })
        .collect();
    let m = &report.mean;
    rows.push(
        [
            "mean".to_string(),
            m.threshold.to_string(),
            m.sensitivity.to_string(),
            m.specificity.to_string(),
            m.f1.to_string(),
            m.accuracy.to_string(),
            m.auc.to_string(),
        ]
        .into_iter()
        .chain(std::iter::repeat_n(String::new(), 4))
        .collect(),
    );
    write_csv(
        &csv_path,
        &[
            "fold",
            "threshold",
            "sensitivity",
            "specificity",
            "f1",
            "accuracy",
            "auc",
            "tp",
            "fn",
            "tn",
            "fp",
        ],
        &rows,
    )?;
    written.push(csv_path);

    for f in &report.folds {
        let path = dir.join(roc_csv_name(f.fold));
        let rows: Vec<Vec<String>> = f
            .roc
            .points
            .iter()
            .map(|p| vec![p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])
            .collect();
        write_csv(&path, &["threshold", "fpr", "tpr"], &rows)?;
        written.push(path);
    }

    let curves: Vec<(String, &RocCurve)> = report
        .folds
        .iter()
        .map(|f| (format!("fold {} (AUC {:.3})", f.fold, f.auc), &f.roc))
        .collect();
    let svg_path = dir.join(ROC_SVG);
    fs::write(&svg_path, render_roc_svg(&curves)).map_err(|e| Error::io(&svg_path, e))?;
    written.push(svg_path);
    Ok(written)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Step-free polyline plot of labeled ROC curves on the unit square.
pub fn render_roc_svg(curves: &[(String, &RocCurve)]) -> String {
    let (size, margin) = (400.0, 50.0);
    let px = |x: f64| margin + x * size;
    let py = |y: f64| margin + (1.0 - y) * size;
    let mut s = String::new();
    let total = size + 2.0 * margin;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = total + 160.0,
        h = total
    );
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{size}" height="{size}" fill="none" stroke="black"/>"#,
        m = margin
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    for t in 0..=5 {
        let v = f64::from(t) / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{v:.1}</text>"#,
            px(v),
            py(0.0) + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#,
            px(0.0) - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">False positive rate</text>"#,
        px(0.5),
        total - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">True positive rate</text>"#,
        py(0.5),
        py(0.5)
    );
    for (i, (label, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.fpr), py(p.tpr)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = margin + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{ly}" x2="{x2}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{tx}" y="{ty}">{label}</text>"#,
            x = total,
            x2 = total + 20.0,
            tx = total + 26.0,
            ty = ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::roc_curve;
    use crate::pyramid::PrognosisLabel::{Bad, Good};

    #[test]
    fn svg_contains_one_polyline_per_curve() {
        let a = roc_curve(&[(0.1, Good), (0.9, Bad)]).unwrap();
        let b = roc_curve(&[(0.5, Good), (0.5, Bad)]).unwrap();
        let svg = render_roc_svg(&[("a".into(), &a), ("b".into(), &b)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }
}
