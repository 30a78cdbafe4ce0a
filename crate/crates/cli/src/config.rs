//! Layered options: built-in defaults, then the command's section of the
//! `--config` file, then flags given on the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

/// Parsed `--config` file: `seed` and `out` at top level, one object per command.
#[derive(Debug, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(root)) => Ok(Self { root }),
            Ok(_) => Err(CliError::Usage(format!("{}: config must be a JSON object", path.display()))),
            Err(e) => Err(CliError::Usage(format!("{}: {e}", path.display()))),
        }
    }

    pub fn seed(&self) -> Result<Option<u64>, CliError> {
        match self.root.get("seed") {
            None => Ok(None),
            Some(v) => v.as_u64().map(Some).ok_or_else(|| CliError::Usage("config 'seed' must be a non-negative integer".into())),
        }
    }

    pub fn out(&self) -> Result<Option<PathBuf>, CliError> {
        match self.root.get("out") {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
            Some(_) => Err(CliError::Usage("config 'out' must be a string".into())),
        }
    }

    fn section(&self, command: &str) -> Result<Map<String, Value>, CliError> {
        match self.root.get(command) {
            None => Ok(Map::new()),
            Some(Value::Object(m)) => Ok(m.clone()),
            Some(_) => Err(CliError::Usage(format!("config section '{command}' must be an object"))),
        }
    }
}

/// Resolves options of type `O` for `command`.
///
/// `flags` must serialize only the options actually given (`None` fields
/// skipped) under the same names as `O`'s fields.
pub fn resolve<O, F>(command: &str, file: &ConfigFile, flags: &F) -> Result<O, CliError>
where
    O: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut merged = match serde_json::to_value(O::default()).expect("defaults serialize") {
        Value::Object(m) => m,
        _ => unreachable!("option structs serialize to objects"),
    };
    for (k, v) in file.section(command)? {
        if !merged.contains_key(&k) {
            return Err(CliError::Usage(format!("unknown key '{k}' in config section '{command}'")));
        }
        merged.insert(k, v);
    }
    if let Value::Object(given) = serde_json::to_value(flags).expect("flags serialize") {
        for (k, v) in given {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("{command}: {e}")))
}

/// Effective configuration written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunConfig<'a, O: Serialize, R: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: u64,
    pub options: &'a O,
    pub result: R,
}

pub fn write_run_config<O: Serialize, R: Serialize>(out: &Path, run: &RunConfig<'_, O, R>) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(run).expect("run config serializes");
    fs::write(out.join("run.json"), json + "\n").map_err(|e| CliError::Io(format!("{}: {e}", out.display())))
}
