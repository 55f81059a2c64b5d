//! Plain (ASCII) 8-bit PGM cross-sections.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::fail::{create_dir, io_error, Failure};

/// A `rows x cols` slice linearly rescaled to `0..=255`; constant slices map to 0.
pub fn encode(rows: usize, cols: usize, values: &[f64]) -> String {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols]
            .iter()
            .map(|&v| {
                let g = if span > 0.0 { ((v - lo) / span * 255.0).round() } else { 0.0 };
                (g as u8).to_string()
            })
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Writes the three mid-axis planes of a `[D,H,W]` volume as
/// `{stem}_{axis}{index}.pgm` and returns the paths.
pub fn write_mid_slices(
    dir: &Path,
    stem: &str,
    dims: [usize; 3],
    voxels: &[f64],
) -> Result<Vec<PathBuf>, Failure> {
    create_dir(dir)?;
    let [d, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| voxels[(z * h + y) * w + x];
    let (mz, my, mx) = (d / 2, h / 2, w / 2);
    let planes = [
        (format!("z{mz}"), h, w, (0..h * w).map(|i| at(mz, i / w, i % w)).collect::<Vec<_>>()),
        (format!("y{my}"), d, w, (0..d * w).map(|i| at(i / w, my, i % w)).collect()),
        (format!("x{mx}"), d, h, (0..d * h).map(|i| at(i / h, i % h, mx)).collect()),
    ];
    let mut paths = Vec::new();
    for (axis, rows, cols, values) in planes {
        let path = dir.join(format!("{stem}_{axis}.pgm"));
        std::fs::write(&path, encode(rows, cols, &values)).map_err(|e| io_error(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
