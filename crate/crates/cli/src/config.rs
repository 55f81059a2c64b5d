//! JSON run configuration: partial `network` / `train` sections overlaid on
//! the defaults, then validated.

use std::path::Path;

use morphgrad::train::TrainConfig;
use morphgrad::{NetworkConfig, Variant};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::fail::{read_json, Failure};

/// Fully resolved configuration of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

/// Defaults for a `depth`-2 network on the dataset's class count.
fn default_network(variant: Variant, num_classes: usize, channels: usize) -> NetworkConfig {
    NetworkConfig {
        variant,
        depth: 2,
        num_classes,
        input_channels: channels,
        ..NetworkConfig::default()
    }
}

pub fn overlay(base: Value, patch: Option<&Value>, section: &str) -> Result<Value, Failure> {
    let mut base = match base {
        Value::Object(m) => m,
        _ => unreachable!("configs serialize to objects"),
    };
    match patch {
        None | Some(Value::Null) => {}
        Some(Value::Object(p)) => {
            for (k, v) in p {
                base.insert(k.clone(), v.clone());
            }
        }
        Some(_) => return Err(Failure::config(format!("`{section}` must be a JSON object"))),
    }
    Ok(Value::Object(base))
}

/// Resolves the run config for `variant` from an optional config file or
/// run manifest.
pub fn resolve(
    path: Option<&Path>,
    variant: Variant,
    num_classes: usize,
    channels: usize,
) -> Result<RunConfig, Failure> {
    let mut file: Map<String, Value> = match path {
        Some(p) => read_json(p)?,
        None => Map::new(),
    };
    if file.contains_key("tool_version") {
        file = match file.remove("config") {
            Some(Value::Object(c)) => c,
            _ => return Err(Failure::config("run manifest has no `config` object")),
        };
    }
    if let Some(k) = file.keys().find(|k| !matches!(k.as_str(), "network" | "train")) {
        return Err(Failure::config(format!(
            "unknown config section `{k}`; expected `network` and/or `train`"
        )));
    }
    if let Some(v) = file
        .get("network")
        .and_then(|n| n.get("variant"))
        .filter(|v| **v != Value::String(variant.name().into()))
    {
        return Err(Failure::config(format!(
            "config names variant {v} but --variant is {variant}"
        )));
    }
    let net_defaults = serde_json::to_value(default_network(variant, num_classes, channels))
        .expect("config serializes");
    let train_defaults = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let network: NetworkConfig =
        serde_json::from_value(overlay(net_defaults, file.get("network"), "network")?)
            .map_err(|e| Failure::config(format!("network section: {e}")))?;
    let train: TrainConfig =
        serde_json::from_value(overlay(train_defaults, file.get("train"), "train")?)
            .map_err(|e| Failure::config(format!("train section: {e}")))?;
    network.validate()?;
    train.validate()?;
    if network.num_classes != num_classes || network.input_channels != channels {
        return Err(Failure::config(format!(
            "network expects {} classes and {} channels, dataset has {num_classes} and {channels}",
            network.num_classes, network.input_channels
        )));
    }
    Ok(RunConfig { network, train })
}
