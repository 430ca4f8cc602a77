//! The `report` command: an EER grid (system × duration) and relative
//! reductions against the baseline.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ttasv::scoring::relative_reduction;

use crate::error::{data, CliError, Result};
use crate::pipeline::SystemReport;
use crate::util::{config_header, walk_files, write_if_changed};

pub const GRID_FILE: &str = "grid.csv";
pub const REDUCTION_FILE: &str = "reduction.csv";
pub const BASELINE: &str = "baseline";

#[derive(Debug, Clone)]
pub struct ReportTables {
    pub config_hash: String,
    pub grid: String,
    pub reductions: String,
}

pub fn load_reports(results: &Path) -> Result<Vec<SystemReport>> {
    let dir = results.join("reports");
    let mut files = Vec::new();
    if dir.is_dir() {
        walk_files(&dir, &mut files).map_err(data)?;
    }
    let reports: Vec<SystemReport> = files
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(data)?;
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        })
        .collect::<Result<_>>()?;
    if reports.is_empty() {
        return Err(CliError::Data(format!("no reports under {}", dir.display())));
    }
    Ok(reports)
}

fn duration_order(a: &str, b: &str) -> Ordering {
    let key = |s: &str| s.parse::<f64>().unwrap_or(f64::INFINITY);
    key(a).total_cmp(&key(b)).then_with(|| a.cmp(b))
}

pub fn build_tables(reports: &[SystemReport]) -> Result<ReportTables> {
    let hashes: BTreeSet<&str> = reports.iter().map(|r| r.config_hash.as_str()).collect();
    if hashes.len() != 1 {
        return Err(CliError::Config(format!(
            "results mix {} configs: {}",
            hashes.len(),
            hashes.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let hash = reports[0].config_hash.clone();
    let mut durations: Vec<&str> = reports
        .iter()
        .map(|r| r.duration.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    durations.sort_by(|a, b| duration_order(a, b));
    let mut cells: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for r in reports {
        cells.entry(r.system.as_str()).or_default().insert(r.duration.as_str(), r.eer);
    }
    let base = cells
        .get(BASELINE)
        .ok_or_else(|| CliError::Data("no baseline rows in results".into()))?
        .clone();
    let mut systems: Vec<&str> = cells.keys().copied().filter(|s| *s != BASELINE).collect();
    systems.insert(0, BASELINE);

    let mut grid = config_header(&hash);
    grid.push_str("system");
    for d in &durations {
        grid.push(',');
        grid.push_str(d);
    }
    grid.push('\n');
    for s in &systems {
        grid.push_str(s);
        for d in &durations {
            grid.push(',');
            if let Some(v) = cells[s].get(d) {
                grid.push_str(&v.to_string());
            }
        }
        grid.push('\n');
    }

    let mut red = config_header(&hash);
    red.push_str("system,duration,baseline_eer,eer,relative_reduction_percent\n");
    for s in systems.iter().skip(1) {
        for d in &durations {
            let Some(&v) = cells[s].get(d) else { continue };
            let b = *base
                .get(d)
                .ok_or_else(|| CliError::Data(format!("no baseline row at duration {d}")))?;
            let rr = relative_reduction(b, v).map_err(|e| CliError::Data(format!("{s} at {d}: {e}")))?;
            red.push_str(&format!("{s},{d},{b},{v},{rr}\n"));
        }
    }
    Ok(ReportTables {
        config_hash: hash,
        grid,
        reductions: red,
    })
}

/// Writes `grid.csv` and `reduction.csv` into `out` (default: `results`).
pub fn cmd_report(results: &Path, out: Option<&Path>) -> Result<ReportTables> {
    let tables = build_tables(&load_reports(results)?)?;
    let out = out.unwrap_or(results);
    write_if_changed(&out.join(GRID_FILE), tables.grid.as_bytes()).map_err(data)?;
    write_if_changed(&out.join(REDUCTION_FILE), tables.reductions.as_bytes()).map_err(data)?;
    Ok(tables)
}

/// Parses a grid CSV into `system → duration → EER`.
pub fn parse_grid(text: &str) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CliError::Data("empty grid".into()))?
        .split(',')
        .collect();
    let mut out = BTreeMap::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let mut row = BTreeMap::new();
        for (d, v) in header.iter().zip(&fields).skip(1) {
            if !v.is_empty() {
                row.insert(d.to_string(), v.parse::<f64>().map_err(data)?);
            }
        }
        out.insert(fields[0].to_string(), row);
    }
    Ok(out)
}
