//! Versioned CSV outputs and the cross-variant comparison table.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use morphgrad::train::{EpochRecord, Experiment, RegionMetrics};
use morphgrad::Variant;
use serde::{Deserialize, Serialize};

use crate::fail::{csv_error, io_error, Failure};

pub const CSV_HEADER: &str = "# morphgrad-csv v1";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const FOLDS_FILE: &str = "folds.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    /// `ensemble` or `out_of_fold`.
    pub evaluation: String,
    pub whole_dice: f64,
    pub core_dice: f64,
    pub enhancing_dice: f64,
    pub whole_sensitivity: f64,
    pub core_sensitivity: f64,
    pub enhancing_sensitivity: f64,
}

impl MetricsRow {
    fn new(variant: Variant, evaluation: &str, m: &RegionMetrics) -> Self {
        MetricsRow {
            variant: variant.name().into(),
            evaluation: evaluation.into(),
            whole_dice: m.dice[0],
            core_dice: m.dice[1],
            enhancing_dice: m.dice[2],
            whole_sensitivity: m.sensitivity[0],
            core_sensitivity: m.sensitivity[1],
            enhancing_sensitivity: m.sensitivity[2],
        }
    }
}

#[derive(Serialize)]
struct TableRow<'a> {
    variant: &'a str,
    whole_dice: f64,
    core_dice: f64,
    enhancing_dice: f64,
    whole_sensitivity: f64,
    core_sensitivity: f64,
    enhancing_sensitivity: f64,
}

#[derive(Serialize)]
struct FoldRow {
    fold: usize,
    best_epoch: usize,
    best_val_loss: f64,
    /// Space-separated validation sample ids.
    validation: String,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), Failure> {
    let mut file = File::create(path).map_err(|e| io_error(path, e))?;
    writeln!(file, "{CSV_HEADER}").map_err(|e| io_error(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), Failure> {
    write_rows(path, history)
}

pub fn write_folds(path: &Path, exp: &Experiment, ids: &[String]) -> Result<(), Failure> {
    write_rows(
        path,
        exp.folds.iter().zip(&exp.partition).enumerate().map(|(fold, (r, part))| FoldRow {
            fold,
            best_epoch: r.best_epoch,
            best_val_loss: r.best_val_loss,
            validation: part.iter().map(|&i| ids[i].as_str()).collect::<Vec<_>>().join(" "),
        }),
    )
}

pub fn write_metrics(path: &Path, variant: Variant, exp: &Experiment) -> Result<(), Failure> {
    write_rows(
        path,
        [
            MetricsRow::new(variant, "ensemble", &exp.ensemble),
            MetricsRow::new(variant, "out_of_fold", &exp.out_of_fold),
        ],
    )
}

/// Reads a run's `metrics.csv`; absent or malformed files are missing metrics.
pub fn read_metrics(run: &Path) -> Result<Vec<MetricsRow>, Failure> {
    let path = run.join(METRICS_FILE);
    let missing = |why: String| Failure::Missing(format!("{}: {why}", path.display()));
    let text = std::fs::read_to_string(&path).map_err(|e| missing(e.to_string()))?;
    if text.lines().next() != Some(CSV_HEADER) {
        return Err(missing(format!("first line is not {CSV_HEADER:?}")));
    }
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(|e| missing(e.to_string()))
}

/// Writes one row of ensemble metrics per run, ordered by variant.
pub fn compare(runs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let mut rows: Vec<(Variant, MetricsRow)> = Vec::new();
    for run in runs {
        let row = read_metrics(run)?
            .into_iter()
            .find(|r| r.evaluation == "ensemble")
            .ok_or_else(|| {
                Failure::Missing(format!("{}: no ensemble row", run.join(METRICS_FILE).display()))
            })?;
        let variant = Variant::parse(&row.variant)
            .map_err(|e| Failure::Missing(format!("{}: {e}", run.display())))?;
        if rows.iter().any(|(v, _)| *v == variant) {
            return Err(Failure::config(format!("variant {variant} appears in more than one run")));
        }
        rows.push((variant, row));
    }
    rows.sort_by_key(|(v, _)| *v);
    write_rows(
        out,
        rows.iter().map(|(_, r)| TableRow {
            variant: &r.variant,
            whole_dice: r.whole_dice,
            core_dice: r.core_dice,
            enhancing_dice: r.enhancing_dice,
            whole_sensitivity: r.whole_sensitivity,
            core_sensitivity: r.core_sensitivity,
            enhancing_sensitivity: r.enhancing_sensitivity,
        }),
    )?;
    println!("wrote {} ({} rows)", out.display(), rows.len());
    Ok(())
}
