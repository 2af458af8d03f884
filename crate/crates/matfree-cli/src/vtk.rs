//! Legacy structured-points VTK export for field snapshots.
//!
//! Values are printed with Rust's shortest round-trip float formatting, one
//! per line in the grid's native x-fastest order, so reading a file back
//! reproduces the field bitwise.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use matfree::mesh::GridSpec;

use crate::error::CliError;

pub fn export_vtk(path: &Path, spec: &GridSpec, field: &[f64], name: &str) -> Result<(), CliError> {
    assert_eq!(field.len(), spec.vertex_count(), "field must cover the grid");
    let nv = spec.nv_axis();
    let lo = spec.bounds_min();
    let h = spec.spacing();
    let mut text = String::with_capacity(24 * field.len() + 256);
    let _ = writeln!(text, "# vtk DataFile Version 3.0");
    let _ = writeln!(text, "{name}");
    let _ = writeln!(text, "ASCII");
    let _ = writeln!(text, "DATASET STRUCTURED_POINTS");
    let _ = writeln!(text, "DIMENSIONS {} {} {}", nv[0], nv[1], nv[2]);
    let _ = writeln!(text, "ORIGIN {} {} {}", lo[0], lo[1], lo[2]);
    let _ = writeln!(text, "SPACING {} {} {}", h[0], h[1], h[2]);
    let _ = writeln!(text, "POINT_DATA {}", field.len());
    let _ = writeln!(text, "SCALARS {name} double 1");
    let _ = writeln!(text, "LOOKUP_TABLE default");
    for v in field {
        let _ = writeln!(text, "{v}");
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|source| CliError::Write { path: path.into(), source })?;
        }
    }
    fs::write(path, text).map_err(|source| CliError::Write { path: path.into(), source })
}

/// Reads back the scalar payload of a file written by [`export_vtk`].
pub fn import_vtk(path: &Path) -> Result<Vec<f64>, CliError> {
    let text =
        fs::read_to_string(path).map_err(|source| CliError::Read { path: path.into(), source })?;
    let bad = |reason: String| CliError::VtkFormat { path: path.into(), reason };
    let mut lines = text.lines();
    let mut count = None;
    for line in lines.by_ref() {
        if let Some(n) = line.strip_prefix("POINT_DATA ") {
            count = Some(
                n.trim()
                    .parse::<usize>()
                    .map_err(|e| bad(format!("bad POINT_DATA count {n:?}: {e}")))?,
            );
        }
        if line.starts_with("LOOKUP_TABLE") {
            break;
        }
    }
    let count = count.ok_or_else(|| bad("missing POINT_DATA header".into()))?;
    let mut field = Vec::with_capacity(count);
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        field.push(line.parse::<f64>().map_err(|e| bad(format!("bad scalar {line:?}: {e}")))?);
    }
    if field.len() != count {
        return Err(bad(format!("expected {count} scalars, found {}", field.len())));
    }
    Ok(field)
}
