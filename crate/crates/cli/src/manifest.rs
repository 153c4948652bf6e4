//! Per-command run manifests.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rwfm_core::pipeline::PipelineConfig;
use rwfm_core::store::dataset_dir::write_atomic;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: f64,
    pub elapsed_seconds: f64,
}

pub struct Recorder {
    manifest: RunManifest,
    clock: Instant,
}

impl Recorder {
    pub fn start(command: &str, config: &PipelineConfig) -> Self {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64());
        Recorder {
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config: config.clone(),
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                started_unix: started,
                elapsed_seconds: 0.0,
            },
            clock: Instant::now(),
        }
    }

    pub fn seed(&mut self, name: &str, v: u64) {
        self.manifest.seeds.insert(name.to_string(), v);
    }

    pub fn input(&mut self, name: &str, hash: impl Into<String>) {
        self.manifest.inputs.insert(name.to_string(), hash.into());
    }

    pub fn output(&mut self, name: &str, hash: impl Into<String>) {
        self.manifest.outputs.insert(name.to_string(), hash.into());
    }

    /// Writes `run-<command>.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<RunManifest, CliError> {
        self.manifest.elapsed_seconds = self.clock.elapsed().as_secs_f64();
        let path = dir.join(format!("run-{}.json", self.manifest.command));
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&path, text.as_bytes())?;
        Ok(self.manifest)
    }
}
