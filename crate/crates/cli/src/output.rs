use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::settings::{SeedSource, Settings};
use crate::CliError;

pub const RUN_RECORD: &str = "run.json";

/// Reproducibility record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub seed_source: Option<SeedSource>,
    pub settings: Option<Settings>,
    pub inputs: BTreeMap<&'static str, String>,
    pub results: serde_json::Value,
    pub outputs: Vec<String>,
}

impl RunRecord {
    pub fn new(command: &'static str, settings: Option<&Settings>) -> Self {
        RunRecord {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: settings.map(|s| s.seed),
            seed_source: settings.map(|s| s.seed_source),
            settings: settings.cloned(),
            inputs: BTreeMap::new(),
            results: serde_json::Value::Null,
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, key: &'static str, path: &Path) -> Self {
        self.inputs.insert(key, path.display().to_string());
        self
    }
}

/// Files staged in memory and written together once the command succeeds.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    pub fn commit(self, mut record: RunRecord) -> Result<(), CliError> {
        record.outputs = self.files.iter().map(|(n, _)| n.clone()).collect();
        record.outputs.push(RUN_RECORD.to_string());
        let mut json = serde_json::to_string_pretty(&record).expect("run record serializes");
        json.push('\n');
        let write = |name: &str, bytes: &[u8]| -> Result<(), CliError> {
            let path = self.dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
            }
            std::fs::write(&path, bytes)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
        };
        for (name, bytes) in &self.files {
            write(name, bytes)?;
        }
        write(RUN_RECORD, json.as_bytes())
    }
}
