//! CSV emission for statistics and optimization histories.

use std::fmt::Write as _;
use std::path::Path;

use pbl_core::sensor::StatBin;

use crate::{config_err, Result};

pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{header}");
    for row in rows {
        let _ = writeln!(out, "{}", row.join(","));
    }
    std::fs::write(path, out).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

pub fn write_history_csv(path: &Path, history: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> =
        history.iter().enumerate().map(|(i, l)| vec![i.to_string(), l.to_string()]).collect();
    write_csv(path, "iteration,loss", &rows)
}

/// Distance x incidence-angle intensity statistics.
pub fn write_stats_csv(path: &Path, bins: &[StatBin]) -> Result<()> {
    let rows: Vec<Vec<String>> = bins
        .iter()
        .map(|b| {
            vec![
                b.d_lo.to_string(),
                b.d_hi.to_string(),
                b.angle_lo.to_string(),
                b.angle_hi.to_string(),
                b.count.to_string(),
                b.mean.to_string(),
                b.std.to_string(),
            ]
        })
        .collect();
    write_csv(path, "d_lo,d_hi,angle_lo,angle_hi,count,mean,std", &rows)
}
