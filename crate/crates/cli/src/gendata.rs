//! `gen-data`: synthetic MORV1 volumes plus an index of sample ids.

use std::path::{Path, PathBuf};

use morphgrad::data::{gen_sample, load_volume, save_volume, SynthSpec, VolumeSample};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::overlay;
use crate::fail::{create_dir, read_json, write_json, Failure};

pub const INDEX_FILE: &str = "index.json";
pub const VOLUME_EXT: &str = "morv";

/// Contents of `index.json` in a dataset directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub spec: SynthSpec,
    pub samples: Vec<String>,
}

pub fn volume_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.{VOLUME_EXT}"))
}

/// Reads a spec file, filling omitted fields from the defaults.
pub fn read_spec(path: &Path) -> Result<SynthSpec, Failure> {
    let patch: Value = read_json(path)?;
    let defaults = serde_json::to_value(SynthSpec::default()).expect("spec serializes");
    let spec: SynthSpec = serde_json::from_value(overlay(defaults, Some(&patch), "spec")?)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

pub fn run(spec_path: &Path, out: &Path) -> Result<(), Failure> {
    let spec = read_spec(spec_path)?;
    create_dir(out)?;
    let mut ids = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let sample = gen_sample(&spec, i)?;
        save_volume(volume_path(out, &sample.id), &sample)?;
        ids.push(sample.id);
    }
    let index = DatasetIndex { spec, samples: ids };
    write_json(&out.join(INDEX_FILE), &index)?;
    println!("wrote {} volumes to {}", index.samples.len(), out.display());
    Ok(())
}

/// Loads a dataset directory in index order.
pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<VolumeSample>), Failure> {
    let index: DatasetIndex = read_json(&dir.join(INDEX_FILE))?;
    let mut samples = Vec::with_capacity(index.samples.len());
    for id in &index.samples {
        let s = load_volume(volume_path(dir, id))?;
        if &s.id != id {
            return Err(Failure::config(format!("volume for {id} carries id {}", s.id)));
        }
        samples.push(s);
    }
    Ok((index, samples))
}
