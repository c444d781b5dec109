//! Layered run configuration: built-in defaults, then `PERISCOPE_SEED`,
//! then a JSON config file, then explicit flags.

use std::path::Path;

use periscope::calib::CalibConfig;
use periscope::network::NetworkConfig;
use periscope::pipeline::GateConfig;
use periscope::synthgen::StreamPlan;
use periscope::training::TrainConfig;
use periscope::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const SEED_ENV: &str = "PERISCOPE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub gate: GateConfig,
    pub calib: CalibConfig,
    pub stream: StreamPlan,
}

/// Recursively overlays `top` onto `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sparse JSON object built from optional flag values.
#[derive(Debug, Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, path: &[&str], value: Option<T>) -> &mut Self {
        let Some(v) = value else { return self };
        let v = serde_json::to_value(v).expect("flag values serialize");
        let (last, parents) = path.split_last().expect("non-empty path");
        let mut map = &mut self.0;
        for p in parents {
            map = map
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("override paths do not collide");
        }
        map.insert(last.to_string(), v);
        self
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub fn resolve(file: Option<&Path>, overrides: Overrides) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(seed) = env_seed()? {
        merge(&mut value, serde_json::json!({ "seed": seed }));
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let parsed: Value = serde_json::from_str(&text)?;
        if !parsed.is_object() {
            return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
        }
        merge(&mut value, parsed);
    }
    merge(&mut value, Value::Object(overrides.0));
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

/// Writes the resolved configuration to stderr as one JSON line.
pub fn log_resolved(command: &str, args: Value, config: &RunConfig) {
    let line = serde_json::json!({
        "command": command,
        "args": args,
        "config": config,
    });
    eprintln!("resolved config: {line}");
}
