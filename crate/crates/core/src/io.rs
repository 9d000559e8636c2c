//! Plain-text grid dumps, mask files, CSV diagnostics and atomic writes.
//!
//! Grid dump layout:
//!
//! ```text
//! field <name> <N> <m>
//! <value>        (m^N lines, row-major, axis 0 slowest)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::grid::{Grid, GridRole, ScalarField};
use crate::macropnp::{DiagnosticsRow, DIAGNOSTICS_HEADER};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write through a sibling temp file and rename into place.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| CoreError::Format(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp: PathBuf = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, contents)?;
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

pub fn format_grid_dump(name: &str, field: &ScalarField) -> Result<String> {
    if name.is_empty() || name.contains(char::is_whitespace) {
        return Err(CoreError::Format(format!("field name {name:?} must be a single token")));
    }
    let mut out = String::with_capacity(field.values.len() * 24 + 32);
    let _ = writeln!(out, "field {name} {} {}", field.grid.dim, field.grid.n);
    for v in &field.values {
        let _ = writeln!(out, "{v:e}");
    }
    Ok(out)
}

pub fn write_grid_dump(path: &Path, name: &str, field: &ScalarField) -> Result<()> {
    atomic_write(path, format_grid_dump(name, field)?.as_bytes())
}

pub fn parse_grid_dump(text: &str, role: GridRole) -> Result<(String, ScalarField)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| CoreError::Format("empty grid dump".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "field" {
        return Err(CoreError::Format(format!("line 1: expected `field <name> N m`, got {header:?}")));
    }
    let dim: usize =
        parts[2].parse().map_err(|_| CoreError::Format(format!("line 1: bad dimension {:?}", parts[2])))?;
    let m: usize = parts[3].parse().map_err(|_| CoreError::Format(format!("line 1: bad resolution {:?}", parts[3])))?;
    let grid = Grid::new(dim, m, role)?;
    let mut values = Vec::with_capacity(grid.len());
    for (ln, l) in lines {
        let v: f64 = l.trim().parse().map_err(|_| CoreError::Format(format!("line {}: bad value {l:?}", ln + 1)))?;
        values.push(v);
    }
    let field = ScalarField::from_values(grid, values)?;
    Ok((parts[1].to_string(), field))
}

pub fn read_grid_dump(path: &Path, role: GridRole) -> Result<(String, ScalarField)> {
    parse_grid_dump(&fs::read_to_string(path)?, role)
}

/// Mask file: first line `N m`, then `m^N` entries of 0/1 (any whitespace).
pub fn parse_mask(text: &str) -> Result<(usize, usize, Vec<bool>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| CoreError::Format("empty mask file".into()))?;
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| CoreError::Format(format!("mask header: bad integer {t:?}"))))
        .collect::<Result<_>>()?;
    let [dim, m] = nums[..] else {
        return Err(CoreError::Format(format!("mask header must be `N m`, got {header:?}")));
    };
    let grid = Grid::new(dim, m, GridRole::Cell)?;
    let mut mask = Vec::with_capacity(grid.len());
    for (ln, l) in lines.enumerate() {
        for tok in l.split_whitespace() {
            mask.push(match tok {
                "1" => true,
                "0" => false,
                _ => return Err(CoreError::Format(format!("mask line {}: expected 0 or 1, got {tok:?}", ln + 2))),
            });
        }
    }
    if mask.len() != grid.len() {
        return Err(CoreError::Format(format!("mask has {} entries, expected {}", mask.len(), grid.len())));
    }
    Ok((dim, m, mask))
}

pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    parse_mask(&fs::read_to_string(path)?)
}

pub fn format_mask(dim: usize, m: usize, mask: &[bool]) -> String {
    let mut out = format!("{dim} {m}\n");
    for row in mask.chunks(m) {
        let line: Vec<&str> = row.iter().map(|&f| if f { "1" } else { "0" }).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn format_diagnostics(rows: &[DiagnosticsRow]) -> String {
    let mut out = String::from(DIAGNOSTICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}
