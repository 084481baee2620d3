//! Run documents for each command, built from a preset overlaid with a JSON file.

use std::path::Path;

use qvrp::orchestrator::{SubsetSearchConfig, SyntheticSpec};
use qvrp::policy::PolicyConfig;
use qvrp::qsampler::BenchmarkConfig;
use qvrp::trainer::{SamplerConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

impl TrainRun {
    pub fn preset(name: &str) -> Option<Self> {
        let sampler = |trucks, rank3_fraction, cyclic_fraction| SamplerConfig {
            nodes: 8,
            trucks,
            tuples: 12,
            rank3_fraction,
            cyclic_fraction,
            ..Default::default()
        };
        let (policy, sampler) = match name {
            "classical-3truck" => (PolicyConfig::default(), sampler(3, 0.5, 1.0)),
            "quantum-rank2" => (PolicyConfig::hardware_experiment(), sampler(2, 0.0, 0.0)),
            "quantum-rank23" => (PolicyConfig::hardware_experiment(), sampler(2, 0.5, 0.0)),
            "quantum-cyclic" => (PolicyConfig::hardware_experiment(), sampler(2, 0.0, 1.0)),
            _ => return None,
        };
        Some(TrainRun {
            policy,
            train: TrainConfig {
                sampler,
                ..Default::default()
            },
        })
    }

    pub fn validate(&self) -> qvrp::error::Result<()> {
        self.policy.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveRun {
    /// `n_prime`, `trucks` and `clip` fall back to the checkpoint when omitted.
    pub search: SubsetSearchConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkRun {
    pub benchmark: BenchmarkConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenRun {
    pub spec: SyntheticSpec,
    pub seed: u64,
}

impl GenRun {
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(GenRun::default()),
            "plants-8" => Some(GenRun {
                spec: SyntheticSpec {
                    nodes: 8,
                    groups: 20,
                    boxes: 200,
                    ..Default::default()
                },
                seed: 0,
            }),
            _ => None,
        }
    }
}

/// Recursively overwrites `base` with the entries of `overlay`.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn read_document(path: Option<&Path>) -> Result<Value, CliError> {
    let Some(path) = path else {
        return Ok(Value::Object(Default::default()));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{} is not valid JSON: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::Config(format!("{} must hold a JSON object", path.display())));
    }
    Ok(value)
}

/// Preset (or the type's default) overlaid with `document`, parsed strictly.
pub fn resolve<T>(preset: Option<T>, document: Value) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut base = serde_json::to_value(preset.unwrap_or_default()).expect("run documents serialise");
    merge(&mut base, document);
    serde_json::from_value(base).map_err(|e| CliError::Config(format!("invalid configuration: {e}")))
}
