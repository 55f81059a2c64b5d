//! `train`: k-fold training of one variant with a reproducible manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use morphgrad::checkpoint::save_checkpoint;
use morphgrad::data::SynthSpec;
use morphgrad::train::{run_experiment, thread_count};
use morphgrad::Variant;
use serde::{Deserialize, Serialize};

use crate::config::{resolve, RunConfig};
use crate::fail::{create_dir, write_json, Failure};
use crate::gendata::load_dataset;
use crate::report::{write_folds, write_history, write_metrics, FOLDS_FILE, HISTORY_FILE, METRICS_FILE};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataRecord {
    pub dir: PathBuf,
    pub spec: SynthSpec,
    pub samples: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub split: u64,
    pub init: u64,
}

/// Everything needed to rerun a training command. `config` is accepted
/// unchanged by `train --config`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub config: RunConfig,
    pub data: DataRecord,
    pub seeds: Seeds,
    pub threads: usize,
    pub outputs: Vec<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn checkpoint_name(fold: usize) -> String {
    format!("fold{fold}.ckpt")
}

pub fn run(data: &Path, variant: &str, config: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let variant = Variant::parse(variant)?;
    let threads = thread_count()?;
    let (index, samples) = load_dataset(data)?;
    let cfg = resolve(config, variant, index.spec.num_classes, index.spec.channels)?;
    if cfg.train.folds > samples.len() {
        return Err(Failure::config(format!(
            "{} folds need at least as many samples, dataset has {}",
            cfg.train.folds,
            samples.len()
        )));
    }
    create_dir(out)?;

    let mut outputs: Vec<PathBuf> = (0..cfg.train.folds).map(|f| out.join(checkpoint_name(f))).collect();
    outputs.extend([HISTORY_FILE, FOLDS_FILE, METRICS_FILE].map(|f| out.join(f)));
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started_unix: now(),
        finished_unix: None,
        seeds: Seeds {
            data: index.spec.seed,
            split: cfg.train.split_seed,
            init: cfg.train.init_seed,
        },
        config: cfg,
        data: DataRecord {
            dir: data.to_path_buf(),
            spec: index.spec,
            samples: index.samples,
        },
        threads,
        outputs,
    };
    let manifest_path = out.join(MANIFEST_FILE);
    write_json(&manifest_path, &manifest)?;

    let cfg = &manifest.config;
    println!(
        "training {variant}: {} samples, {} folds, {} parameters, {threads} thread(s)",
        samples.len(),
        cfg.train.folds,
        cfg.network.param_count()
    );
    let exp = run_experiment(&samples, &cfg.network, &cfg.train, threads)?;
    for (f, r) in exp.folds.iter().enumerate() {
        save_checkpoint(out.join(checkpoint_name(f)), &r.model)?;
        println!(
            "fold {f}: best epoch {} val loss {:.6} ({} epochs)",
            r.best_epoch,
            r.best_val_loss,
            r.history.len()
        );
    }
    let history: Vec<_> = exp.folds.iter().flat_map(|r| r.history.iter().cloned()).collect();
    write_history(&out.join(HISTORY_FILE), &history)?;
    write_folds(&out.join(FOLDS_FILE), &exp, &manifest.data.samples)?;
    write_metrics(&out.join(METRICS_FILE), variant, &exp)?;
    println!(
        "ensemble dice whole {:.4} core {:.4} enhancing {:.4}",
        exp.ensemble.dice[0], exp.ensemble.dice[1], exp.ensemble.dice[2]
    );

    manifest.finished_unix = Some(now());
    write_json(&manifest_path, &manifest)
}
