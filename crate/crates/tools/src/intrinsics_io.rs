//! Sensor intrinsics as a human-readable text config. Floats use Rust's
//! shortest-roundtrip formatting, so write-then-read is bit exact.

use std::fmt::Write as _;
use std::path::Path;

use pbl_core::{SensorIntrinsics, UnitIntrinsics};

use crate::{config_err, Result, ToolError};

const HEADER: &str = "pbl-intrinsics v1";

pub fn format_intrinsics(intr: &SensorIntrinsics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER}");
    let _ = writeln!(out, "width = {}", intr.width);
    let _ = writeln!(out, "height = {}", intr.height);
    for u in &intr.units {
        let _ = writeln!(out, "\n[unit]");
        let _ = writeln!(out, "fov = {}", u.fov);
        let _ = writeln!(out, "fov_offset = {}", u.fov_offset);
        let _ = writeln!(out, "z_offset = {}", u.z_offset);
        let _ = writeln!(out, "row_start = {}", u.row_start);
        let _ = writeln!(out, "row_end = {}", u.row_end);
    }
    let _ = writeln!(out, "\n[diode_offsets]");
    for d in &intr.diode_offsets {
        let _ = writeln!(out, "{d}");
    }
    out
}

pub fn write_intrinsics(path: &Path, intr: &SensorIntrinsics) -> Result<()> {
    std::fs::write(path, format_intrinsics(intr))
        .map_err(|e| config_err(format!("{}: {e}", path.display())))
}

pub fn parse_intrinsics(text: &str) -> Result<SensorIntrinsics> {
    let mut lines = text.lines().enumerate();
    let bad = |n: usize, msg: &str| -> ToolError {
        config_err(format!("intrinsics line {}: {msg}", n + 1))
    };
    match lines.next() {
        Some((_, l)) if l.trim() == HEADER => {}
        Some((n, l)) => return Err(bad(n, &format!("unknown format header {l:?}"))),
        None => return Err(config_err("empty intrinsics file")),
    }

    let mut width = None;
    let mut height = None;
    let mut units: Vec<UnitIntrinsics> = Vec::new();
    let mut deltas: Option<Vec<f64>> = None;
    #[derive(PartialEq)]
    enum Section {
        Top,
        Unit,
        Deltas,
    }
    let mut section = Section::Top;

    for (n, raw) in lines {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "[unit]" => {
                units.push(UnitIntrinsics {
                    fov: 0.0,
                    fov_offset: 0.0,
                    z_offset: 0.0,
                    row_start: 0,
                    row_end: 0,
                });
                section = Section::Unit;
                continue;
            }
            "[diode_offsets]" => {
                deltas = Some(Vec::new());
                section = Section::Deltas;
                continue;
            }
            _ => {}
        }
        if section == Section::Deltas {
            for tok in line.split_whitespace() {
                let v: f64 =
                    tok.parse().map_err(|_| bad(n, &format!("bad diode offset {tok:?}")))?;
                deltas.as_mut().unwrap().push(v);
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| bad(n, "expected key = value"))?;
        let parse_f = || value.parse::<f64>().map_err(|_| bad(n, &format!("bad number {value:?}")));
        let parse_u = || value.parse::<usize>().map_err(|_| bad(n, &format!("bad integer {value:?}")));
        match (&section, key) {
            (Section::Top, "width") => width = Some(parse_u()?),
            (Section::Top, "height") => height = Some(parse_u()?),
            (Section::Unit, "fov") => units.last_mut().unwrap().fov = parse_f()?,
            (Section::Unit, "fov_offset") => units.last_mut().unwrap().fov_offset = parse_f()?,
            (Section::Unit, "z_offset") => units.last_mut().unwrap().z_offset = parse_f()?,
            (Section::Unit, "row_start") => units.last_mut().unwrap().row_start = parse_u()?,
            (Section::Unit, "row_end") => units.last_mut().unwrap().row_end = parse_u()?,
            _ => return Err(bad(n, &format!("unknown key {key:?}"))),
        }
    }

    let width = width.ok_or_else(|| config_err("intrinsics: width required"))?;
    let height = height.ok_or_else(|| config_err("intrinsics: height required"))?;
    let deltas = deltas.ok_or_else(|| config_err("intrinsics: diode offsets required"))?;
    SensorIntrinsics::new(width, height, units, deltas)
        .map_err(|e| config_err(format!("intrinsics: {e:?}")))
}

pub fn read_intrinsics(path: &Path) -> Result<SensorIntrinsics> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    parse_intrinsics(&text)
}
