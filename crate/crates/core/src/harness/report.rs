use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::csv_error;

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const C_SENSITIVITY_FILE: &str = "c_sensitivity.csv";
pub const PLOTS_DIR: &str = "plots";

/// Mean Dice over the target images for one method in one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub source: String,
    pub target: String,
    pub trial: usize,
    pub dice: f64,
}

/// Aggregate over trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub source: String,
    pub target: String,
    pub trials: usize,
    pub mean: f64,
    /// Population standard deviation over trials.
    pub std: f64,
}

/// ENT_BALN Dice for one grid step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CSensitivityRow {
    pub c: f64,
    pub members: usize,
    pub source: String,
    pub target: String,
    pub trial: usize,
    pub dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    pub c_sensitivity: Vec<CSensitivityRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ResultsTable {
    /// Keys in first-appearance order with the Dice of every trial.
    fn grouped(&self) -> Vec<((String, String, String), Vec<f64>)> {
        let mut groups: Vec<((String, String, String), Vec<f64>)> = Vec::new();
        for r in &self.rows {
            let key = (r.method.clone(), r.source.clone(), r.target.clone());
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(r.dice),
                None => groups.push((key, vec![r.dice])),
            }
        }
        groups
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        self.grouped()
            .into_iter()
            .map(|((method, source, target), v)| {
                let (mean, std) = mean_std(&v);
                SummaryRow {
                    method,
                    source,
                    target,
                    trials: v.len(),
                    mean,
                    std,
                }
            })
            .collect()
    }

    /// Mean Dice over trials for a method on one target.
    pub fn mean(&self, method: &str, target: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.target == target)
            .map(|r| r.dice)
            .collect();
        (!v.is_empty()).then(|| mean_std(&v).0)
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_csv(&out.join(RESULTS_FILE), &self.rows)?;
        let summary = self.summary();
        write_csv(&out.join(SUMMARY_FILE), &summary)?;
        if !self.c_sensitivity.is_empty() {
            write_csv(&out.join(C_SENSITIVITY_FILE), &self.c_sensitivity)?;
        }
        let plots = out.join(PLOTS_DIR);
        fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
        let mut pairs: Vec<(String, String)> = Vec::new();
        for s in &summary {
            let p = (s.source.clone(), s.target.clone());
            if !pairs.contains(&p) {
                pairs.push(p);
            }
        }
        for (source, target) in pairs {
            let bars: Vec<&SummaryRow> = summary
                .iter()
                .filter(|s| s.source == source && s.target == target)
                .collect();
            let path = plots.join(format!("{source}_to_{target}.svg"));
            let svg = bar_chart(&format!("{source} -> {target}"), &bars);
            fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read(out: &Path) -> Result<Self> {
        let rows = read_csv(&out.join(RESULTS_FILE))?;
        let c_path = out.join(C_SENSITIVITY_FILE);
        let c_sensitivity = if c_path.exists() { read_csv(&c_path)? } else { Vec::new() };
        Ok(Self { rows, c_sensitivity })
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Vertical bars of mean Dice with a whisker of one standard deviation.
fn bar_chart(title: &str, bars: &[&SummaryRow]) -> String {
    let (left, top, plot_h, bar_w, gap) = (60.0, 40.0, 240.0, 36.0, 14.0);
    let width = left + bars.len() as f64 * (bar_w + gap) + 20.0;
    let height = top + plot_h + 110.0;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(title));
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            width - 20.0,
            y(v),
            y(v),
            left - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">Dice</text>"#,
        top + plot_h / 2.0
    );
    for (i, b) in bars.iter().enumerate() {
        let x = left + gap / 2.0 + i as f64 * (bar_w + gap);
        let fill = if b.method.starts_with("lambda=") { "#8aa9c8" } else { "#d98b5f" };
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="{bar_w}" height="{:.1}" fill="{fill}"/>"#,
            y(b.mean),
            top + plot_h - y(b.mean)
        );
        let cx = x + bar_w / 2.0;
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
            y(b.mean + b.std),
            y(b.mean - b.std)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate({:.1},{:.1}) rotate(55)">{}</text>"#,
            cx - 4.0,
            top + plot_h + 10.0,
            escape(&b.method)
        );
    }
    s.push_str("</svg>\n");
    s
}
