//! Run-directory artifacts and the summary report built from them.
//!
//! An adaptation run directory holds `checkpoint.safetensors`,
//! `param_report.json` / `.txt`, `eval.json`, `losses.json` and the resolved
//! `run_config.toml`. An ablation directory holds `ablation.json` and its
//! `run_config.toml`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DiceResult;
use crate::peft::ParamReport;
use crate::train::{AblationTable, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const PARAM_REPORT_JSON: &str = "param_report.json";
pub const PARAM_REPORT_TXT: &str = "param_report.txt";
pub const EVAL_JSON: &str = "eval.json";
pub const LOSSES_JSON: &str = "losses.json";
pub const RUN_CONFIG: &str = "run_config.toml";
pub const ABLATION_JSON: &str = "ablation.json";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Config(e.to_string()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Report(vec![format!("{}: {e}", path.display())]))
}

pub fn write_config(dir: &Path, config: &RunConfig) -> Result<()> {
    write(&dir.join(RUN_CONFIG), config.to_toml()?)
}

pub fn write_param_report(dir: &Path, report: &ParamReport) -> Result<()> {
    write(&dir.join(PARAM_REPORT_JSON), to_json(report)?)?;
    write(&dir.join(PARAM_REPORT_TXT), report.to_text())
}

pub fn write_eval(dir: &Path, eval: &DiceResult) -> Result<()> {
    write(&dir.join(EVAL_JSON), to_json(eval)?)
}

pub fn write_losses(dir: &Path, losses: &[f32]) -> Result<()> {
    write(&dir.join(LOSSES_JSON), to_json(&losses)?)
}

pub fn write_ablation(dir: &Path, table: &AblationTable) -> Result<()> {
    write(&dir.join(ABLATION_JSON), to_json(table)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub params: ParamReport,
    pub eval: DiceResult,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub runs: Vec<RunSummary>,
    pub ablation: Option<AblationTable>,
    pub files: Vec<PathBuf>,
}

/// Collect completed runs, failing with every missing artifact listed.
pub fn load_runs(run_dirs: &[PathBuf]) -> Result<(Vec<RunSummary>, Option<AblationTable>)> {
    let mut missing = Vec::new();
    let mut runs = Vec::new();
    let mut ablation = None;
    for dir in run_dirs {
        if dir.join(ABLATION_JSON).is_file() {
            ablation = Some(read_json(&dir.join(ABLATION_JSON))?);
            continue;
        }
        let (p, e) = (dir.join(PARAM_REPORT_JSON), dir.join(EVAL_JSON));
        let mut absent = Vec::new();
        if !p.is_file() {
            absent.push(PARAM_REPORT_JSON);
        }
        if !e.is_file() {
            absent.push(EVAL_JSON);
        }
        if !absent.is_empty() {
            missing.push(format!("{}: missing {}", dir.display(), absent.join(", ")));
            continue;
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        runs.push(RunSummary {
            name,
            params: read_json(&p)?,
            eval: read_json(&e)?,
        });
    }
    if !missing.is_empty() {
        return Err(Error::Report(missing));
    }
    Ok((runs, ablation))
}

/// Per-class DSC table: one row per run, one column per class, then the
/// average.
pub fn dsc_table_markdown(runs: &[RunSummary]) -> String {
    let classes = class_columns(runs);
    let mut s = String::from("| Method | Trainable |");
    for c in &classes {
        let _ = write!(s, " {c} |");
    }
    s.push_str(" Avg |\n|---|---:|");
    s.push_str(&"---:|".repeat(classes.len() + 1));
    s.push('\n');
    for r in runs {
        let _ = write!(s, "| {} | {} |", r.params.method, r.params.trainable);
        for c in &classes {
            match r.eval.per_class.get(c) {
                Some(v) => {
                    let _ = write!(s, " {v:.3} |");
                }
                None => s.push_str(" - |"),
            }
        }
        let _ = writeln!(s, " {:.3} |", r.eval.average);
    }
    s
}

pub fn dsc_table_csv(runs: &[RunSummary]) -> String {
    let classes = class_columns(runs);
    let mut s = format!("run,method,trainable,{},avg\n", classes.join(","));
    for r in runs {
        let _ = write!(s, "{},{},{}", r.name, r.params.method, r.params.trainable);
        for c in &classes {
            let _ = write!(s, ",{}", r.eval.per_class.get(c).map(|v| format!("{v:.6}")).unwrap_or_default());
        }
        let _ = writeln!(s, ",{:.6}", r.eval.average);
    }
    s
}

fn class_columns(runs: &[RunSummary]) -> Vec<String> {
    let mut classes: Vec<String> = Vec::new();
    for r in runs {
        for c in r.eval.per_class.keys() {
            if !classes.contains(c) {
                classes.push(c.clone());
            }
        }
    }
    classes
}

pub fn ablation_markdown(table: &AblationTable) -> String {
    let mut s = String::from("| Row | Pos | LN | TAL | Scale | Shift | Trainable | DSC |\n");
    s.push_str("|---|:-:|:-:|:-:|:-:|:-:|---:|---:|\n");
    let mark = |b: bool| if b { "x" } else { "" };
    for r in &table.rows {
        let t = &r.toggles;
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {:.3} |",
            r.label,
            mark(t.pos_embed),
            mark(t.layernorm),
            mark(t.tal),
            mark(t.scale),
            mark(t.shift),
            r.trainable,
            r.mean
        );
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a Markdown pipe table as an SVG text grid.
pub fn table_svg(markdown: &str) -> String {
    let rows: Vec<Vec<String>> = markdown
        .lines()
        .filter(|l| !l.starts_with("|---") && !l.starts_with("|:"))
        .map(|l| {
            l.trim_matches('|')
                .split('|')
                .map(|c| c.trim().to_string())
                .collect()
        })
        .collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
                * 8
                + 16
        })
        .collect();
    let width: usize = widths.iter().sum::<usize>() + 20;
    let height = rows.len() * 22 + 20;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"monospace\" font-size=\"13\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (i, row) in rows.iter().enumerate() {
        let y = 26 + i * 22;
        let mut x = 10;
        for (c, cell) in row.iter().enumerate() {
            let weight = if i == 0 { " font-weight=\"bold\"" } else { "" };
            let _ = writeln!(s, "<text x=\"{x}\" y=\"{y}\"{weight}>{}</text>", escape(cell));
            x += widths[c];
        }
        if i == 0 {
            let _ = writeln!(s, "<line x1=\"10\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", y + 6, width - 10, y + 6);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Horizontal bar chart of trainable parameter counts on a log scale, each
/// bar annotated with its exact count.
pub fn param_bar_chart(entries: &[(String, usize)]) -> String {
    let label_w = 120.0;
    let plot_w = 420.0;
    let bar_h = 22.0;
    let height = entries.len() as f64 * (bar_h + 10.0) + 50.0;
    let max_log = entries
        .iter()
        .map(|(_, n)| ((*n).max(1) as f64).log10())
        .fold(1.0f64, f64::max)
        .ceil();
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
        label_w + plot_w + 110.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"18\" font-weight=\"bold\">Trainable parameters (log scale)</text>",
        label_w
    );
    for (i, (name, n)) in entries.iter().enumerate() {
        let y = 30.0 + i as f64 * (bar_h + 10.0);
        let w = bar_length(*n, max_log, plot_w);
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            label_w - 8.0,
            y + bar_h * 0.7,
            escape(name)
        );
        let _ = writeln!(
            s,
            "<rect class=\"bar\" x=\"{label_w}\" y=\"{y}\" width=\"{w:.2}\" height=\"{bar_h}\" fill=\"#4a7ab5\"/>"
        );
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{}\">{n}</text>", label_w + w + 6.0, y + bar_h * 0.7);
    }
    s.push_str("</svg>\n");
    s
}

/// Bar length for `n` on a log10 axis spanning `[0, max_log]` decades.
pub fn bar_length(n: usize, max_log: f64, plot_w: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    ((n as f64).log10() + 1.0) / (max_log + 1.0) * plot_w
}

/// Build every table and chart for `run_dirs` into `out_dir`.
pub fn report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportSummary> {
    let (runs, ablation) = load_runs(run_dirs)?;
    let mut files = Vec::new();
    let mut emit = |name: &str, contents: String| -> Result<()> {
        let p = out_dir.join(name);
        write(&p, contents)?;
        files.push(p);
        Ok(())
    };
    if !runs.is_empty() {
        let md = dsc_table_markdown(&runs);
        emit("dsc_table.md", md.clone())?;
        emit("dsc_table.svg", table_svg(&md))?;
        emit("dsc_table.csv", dsc_table_csv(&runs))?;
        emit("dsc_table.json", to_json(&runs)?)?;
    }
    if runs.len() >= 2 {
        let entries: Vec<(String, usize)> = runs
            .iter()
            .map(|r| (r.params.method.clone(), r.params.trainable))
            .collect();
        emit("params.svg", param_bar_chart(&entries))?;
        emit("params.json", to_json(&entries)?)?;
    }
    if let Some(t) = &ablation {
        let md = ablation_markdown(t);
        emit("ablation.md", md.clone())?;
        emit("ablation.svg", table_svg(&md))?;
        emit("ablation.json", to_json(t)?)?;
    }
    Ok(ReportSummary {
        runs,
        ablation,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bars_grow_with_count() {
        assert!(bar_length(1536, 6.0, 400.0) < bar_length(12288, 6.0, 400.0));
        assert_eq!(bar_length(0, 6.0, 400.0), 0.0);
    }

    #[test]
    fn table_svg_has_one_text_per_cell() {
        let svg = table_svg("| a | b |\n|---|---|\n| 1 | 2 |\n");
        assert_eq!(svg.matches("<text").count(), 4);
    }
}
