use std::path::{Path, PathBuf};

use coworld::config::CoWorldConfig;
use coworld::{Error, Result};
use serde_json::{Map, Value};

const DATASET_DIR: &str = "dataset_dir";
const RUN_DIR: &str = "run_dir";

/// A run config file: every `CoWorldConfig` field plus the dataset and run
/// directories. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfigFile {
    pub config: CoWorldConfig,
    pub dataset_dir: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

fn take_path(map: &mut Map<String, Value>, key: &str) -> Result<Option<PathBuf>> {
    match map.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
        Some(other) => Err(Error::config(key, format!("expected a path string, got {other}"))),
    }
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = match serde_json::from_str::<Value>(text)? {
            Value::Object(m) => m,
            _ => return Err(Error::config("run config", "top level must be a JSON object")),
        };
        let dataset_dir = take_path(&mut map, DATASET_DIR)?;
        let run_dir = take_path(&mut map, RUN_DIR)?;
        let config: CoWorldConfig = serde_json::from_value(Value::Object(map))?;
        Ok(Self {
            config,
            dataset_dir,
            run_dir,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Fully resolved document, defaults included.
    pub fn to_json(&self) -> Value {
        let mut v = serde_json::to_value(&self.config).expect("config serializes");
        let path = |p: &Option<PathBuf>| match p {
            Some(p) => Value::String(p.display().to_string()),
            None => Value::Null,
        };
        let map = v.as_object_mut().expect("config is an object");
        map.insert(DATASET_DIR.into(), path(&self.dataset_dir));
        map.insert(RUN_DIR.into(), path(&self.run_dir));
        v
    }
}
