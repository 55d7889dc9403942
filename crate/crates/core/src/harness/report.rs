use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::imagegen::{create_dir, write_file};
use crate::{Error, Result};

pub const REPORT_FILE: &str = "report.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const CHART_FILE: &str = "report.svg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub train_pattern: String,
    pub test_pattern: String,
    pub correction: String,
    pub countermeasure: String,
    pub char_acc: f64,
    pub word_acc: f64,
    pub n: usize,
    pub seed: u64,
}

/// One aligned (truth, prediction) character pair; `-` marks a gap.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConfusionKey {
    pub train_pattern: String,
    pub test_pattern: String,
    pub countermeasure: String,
    pub truth: char,
    pub pred: char,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// Uncorrected predictions only.
    pub confusion: BTreeMap<ConfusionKey, u64>,
}

impl EvalReport {
    pub fn find(&self, train: &str, test: &str, correction: &str, countermeasure: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.train_pattern == train
                && r.test_pattern == test
                && r.correction == correction
                && r.countermeasure == countermeasure
        })
    }
}

/// Minimum-edit alignment of `pred` against `truth` as (truth, pred) pairs.
/// Ties prefer substitution, then deletion of a truth character.
pub fn align(pred: &str, truth: &str) -> Vec<(char, char)> {
    let p: Vec<char> = pred.chars().collect();
    let t: Vec<char> = truth.chars().collect();
    let (n, m) = (t.len(), p.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(t[i - 1] != p[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut out = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(t[i - 1] != p[j - 1]) {
            out.push((t[i - 1], p[j - 1]));
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            out.push((t[i - 1], '-'));
            i -= 1;
        } else {
            out.push(('-', p[j - 1]));
            j -= 1;
        }
    }
    out.reverse();
    out
}

fn csv_bytes<F>(fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        fill(&mut w)?;
        w.flush().map_err(|e| Error::storage("<csv>", e))?;
    }
    Ok(buf)
}

pub fn report_csv(report: &EvalReport) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        for r in &report.rows {
            w.serialize(r)?;
        }
        if report.rows.is_empty() {
            w.write_record([
                "train_pattern",
                "test_pattern",
                "correction",
                "countermeasure",
                "char_acc",
                "word_acc",
                "n",
                "seed",
            ])?;
        }
        Ok(())
    })
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn confusion_csv(report: &EvalReport) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["train_pattern", "test_pattern", "countermeasure", "truth", "pred", "count"])?;
        for (k, n) in &report.confusion {
            w.write_record([
                k.train_pattern.clone(),
                k.test_pattern.clone(),
                k.countermeasure.clone(),
                k.truth.to_string(),
                k.pred.to_string(),
                n.to_string(),
            ])?;
        }
        Ok(())
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

/// Grouped bar chart of character accuracy: one group per (train pattern,
/// test pattern, countermeasure), one bar per correction mode.
pub fn render_svg(report: &EvalReport) -> String {
    let mut groups: Vec<(String, String, String)> = Vec::new();
    let mut series: Vec<String> = Vec::new();
    for r in &report.rows {
        let g = (r.train_pattern.clone(), r.test_pattern.clone(), r.countermeasure.clone());
        if !groups.contains(&g) {
            groups.push(g);
        }
        if !series.contains(&r.correction) {
            series.push(r.correction.clone());
        }
    }
    let bar = 14.0;
    let gap = 18.0;
    let group_w = bar * series.len().max(1) as f64 + gap;
    let (left, top, plot_h) = (50.0, 30.0, 200.0);
    let width = left + group_w * groups.len().max(1) as f64 + 20.0;
    let height = top + plot_h + 90.0;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{left}" y="16" font-size="12">character accuracy</text>"#).unwrap();
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.2}</text>"##,
            width - 20.0,
            left - 4.0,
            y + 3.0
        )
        .unwrap();
    }
    for (gi, g) in groups.iter().enumerate() {
        let x0 = left + gap / 2.0 + gi as f64 * group_w;
        for (si, name) in series.iter().enumerate() {
            let Some(r) = report.find(&g.0, &g.1, name, &g.2) else {
                continue;
            };
            let h = plot_h * r.char_acc.clamp(0.0, 1.0);
            writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{bar}" height="{h}" fill="{}"><title>{}</title></rect>"#,
                x0 + si as f64 * bar,
                top + plot_h - h,
                PALETTE[si % PALETTE.len()],
                escape(&format!("{name}: {:.3}", r.char_acc))
            )
            .unwrap();
        }
        let cx = x0 + bar * series.len() as f64 / 2.0;
        let ly = top + plot_h + 12.0;
        writeln!(
            s,
            r#"<text x="{cx}" y="{ly}" text-anchor="end" transform="rotate(-40 {cx} {ly})">{}</text>"#,
            escape(&format!("{}→{} {}", g.0, g.1, g.2))
        )
        .unwrap();
    }
    for (si, name) in series.iter().enumerate() {
        let y = top + 10.0 + si as f64 * 12.0;
        let x = width - 90.0;
        writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="8" height="8" fill="{}"/><text x="{}" y="{y}">{}</text>"#,
            y - 8.0,
            PALETTE[si % PALETTE.len()],
            x + 12.0,
            escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.csv`, `confusion.csv` and `report.svg` into `out_dir` and
/// returns their paths.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let files = [
        (REPORT_FILE, report_csv(report)?),
        (CONFUSION_FILE, confusion_csv(report)?),
        (CHART_FILE, render_svg(report).into_bytes()),
    ];
    let mut paths = Vec::new();
    for (name, bytes) in files {
        let p = out_dir.join(name);
        write_file(&p, &bytes)?;
        paths.push(p);
    }
    Ok(paths)
}
