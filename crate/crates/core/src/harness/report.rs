//! Deterministic rendering of experiment results: an aligned text
//! table, two CSV exports (row-level and cell-level), and a JSON dump.
//! Every byte of every artifact is a pure function of the results, so
//! identical runs produce identical files; wall-clock timings are kept
//! in memory for display but never written.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::runs::MatrixOutcome;

/// One aggregated row of the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub procedure: String,
    pub model: String,
    pub teacher: String,
    pub synthetic: bool,
    pub per_seed: Vec<f64>,
    pub mean: Option<f64>,
    pub half_width: Option<f64>,
    /// Mean minus the baseline row's mean; exactly zero for the
    /// baseline itself, absent when either mean is missing.
    pub delta: Option<f64>,
    pub failed: Vec<String>,
    pub synthetic_in_task: usize,
    pub synthetic_in_kd: usize,
    pub label_reads: usize,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// A titled collection of rows with a designated baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportTable {
    pub title: String,
    pub baseline: String,
    pub rows: Vec<ReportRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "-".to_string(),
    }
}

fn fmt_delta(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:+.6}"),
        None => "-".to_string(),
    }
}

/// Render the aligned text table.
pub fn render_text(outcome: &MatrixOutcome) -> String {
    let table = &outcome.table;
    let header = [
        "procedure", "model", "teacher", "syn", "runs", "mean", "ci95", "delta",
    ];
    let mut grid: Vec<[String; 8]> = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        grid.push([
            row.procedure.clone(),
            row.model.clone(),
            row.teacher.clone(),
            if row.synthetic { "yes" } else { "no" }.to_string(),
            format!("{}", row.per_seed.len()),
            fmt_opt(row.mean),
            fmt_opt(row.half_width),
            fmt_delta(row.delta),
        ]);
    }
    let mut widths = [0usize; 8];
    for (i, h) in header.iter().enumerate() {
        widths[i] = h.len();
    }
    for row in &grid {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }

    let mut out = String::new();
    let _ = writeln!(out, "{}", table.title);
    let _ = writeln!(out, "{}", "=".repeat(table.title.len()));
    out.push('\n');
    let write_line = |out: &mut String, cells: &[String]| {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            let _ = write!(line, "{cell:<width$}", width = widths[i]);
        }
        let _ = writeln!(out, "{}", line.trim_end());
    };
    write_line(
        &mut out,
        &header.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
    );
    for row in &grid {
        write_line(&mut out, row);
    }
    out.push('\n');
    let _ = writeln!(out, "baseline: {}", table.baseline);
    let _ = writeln!(
        out,
        "confidence: 1.96 x population sigma over per-run test accuracy"
    );

    let mut failures: Vec<String> = Vec::new();
    for row in &table.rows {
        for msg in &row.failed {
            failures.push(format!("  {}: {}", row.procedure, msg));
        }
    }
    if !failures.is_empty() {
        out.push('\n');
        let _ = writeln!(out, "failed cells:");
        for f in failures {
            let _ = writeln!(out, "{f}");
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Render the row-level CSV.
pub fn render_rows_csv(outcome: &MatrixOutcome) -> String {
    let mut out = String::new();
    out.push_str(
        "procedure,model,teacher,synthetic,runs,failed,mean,ci95,delta,synthetic_in_task,synthetic_in_kd,label_reads\n",
    );
    for row in &outcome.table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&row.procedure),
            csv_field(&row.model),
            csv_field(&row.teacher),
            row.synthetic,
            row.per_seed.len(),
            row.failed.len(),
            fmt_opt(row.mean),
            fmt_opt(row.half_width),
            fmt_delta(row.delta),
            row.synthetic_in_task,
            row.synthetic_in_kd,
            row.label_reads,
        );
    }
    out
}

/// Render the cell-level CSV, one line per individual run.
pub fn render_cells_csv(outcome: &MatrixOutcome) -> String {
    let mut out = String::new();
    out.push_str(
        "procedure,teacher_seed,student_seed,accuracy,error,synthetic_in_task,synthetic_in_kd,label_reads\n",
    );
    for cell in &outcome.cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&cell.procedure),
            cell.teacher_seed.map_or(String::from("-"), |t| t.to_string()),
            cell.student_seed.map_or(String::from("-"), |s| s.to_string()),
            fmt_opt(cell.accuracy),
            csv_field(cell.error.as_deref().unwrap_or("")),
            cell.synthetic_in_task,
            cell.synthetic_in_kd,
            cell.label_reads,
        );
    }
    out
}

#[derive(Serialize)]
struct JsonExport<'a> {
    schema_version: u32,
    table: &'a ReportTable,
    cells: &'a [crate::harness::runs::CellResult],
}

/// Render the JSON dump of the full outcome.
pub fn render_json(outcome: &MatrixOutcome) -> Result<String> {
    let export = JsonExport {
        schema_version: 1,
        table: &outcome.table,
        cells: &outcome.cells,
    };
    let mut s = serde_json::to_string_pretty(&export)
        .map_err(|e| crate::error::Error::Export(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Load an outcome back from a `results.json`, so reports can be
/// re-rendered without re-running the experiment.
pub fn read_results_json(path: &Path) -> Result<MatrixOutcome> {
    #[derive(Deserialize)]
    struct JsonImport {
        schema_version: u32,
        table: ReportTable,
        cells: Vec<crate::harness::runs::CellResult>,
    }
    let text = fs::read_to_string(path)?;
    let import: JsonImport = serde_json::from_str(&text)
        .map_err(|e| crate::error::Error::Export(format!("{}: {e}", path.display())))?;
    if import.schema_version != 1 {
        return Err(crate::error::Error::Export(format!(
            "unsupported results schema_version {}, expected 1",
            import.schema_version
        )));
    }
    Ok(MatrixOutcome {
        table: import.table,
        cells: import.cells,
    })
}

/// Write `report.txt`, `report.csv`, `runs.csv`, and `results.json`
/// into `out_dir`, creating it if needed.
pub fn write_report_files(out_dir: &Path, outcome: &MatrixOutcome) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.txt"), render_text(outcome))?;
    fs::write(out_dir.join("report.csv"), render_rows_csv(outcome))?;
    fs::write(out_dir.join("runs.csv"), render_cells_csv(outcome))?;
    fs::write(out_dir.join("results.json"), render_json(outcome)?)?;
    Ok(())
}
