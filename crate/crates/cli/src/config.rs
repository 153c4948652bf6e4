//! Configuration files layered over built-in defaults.

use std::path::Path;

use rwfm_core::pipeline::PipelineConfig;
use serde_json::Value;

use crate::CliError;

/// Defaults of the command-line tools: 100 demonstrations per task, so a
/// plain `gen-data` yields 70 clean, 20 over-force and 10 weak-grip each.
pub fn defaults() -> PipelineConfig {
    PipelineConfig {
        episodes_per_task: 100,
        ..PipelineConfig::default()
    }
}

fn merge(base: &mut Value, over: Value, path: &str) -> Result<(), CliError> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(CliError::config(format!("unknown configuration key `{here}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Applies the TOML text on top of `base`.
pub fn layer(base: &PipelineConfig, toml_text: &str, origin: &str) -> Result<PipelineConfig, CliError> {
    let user: toml::Value = toml::from_str(toml_text).map_err(|e| CliError::config(format!("{origin}: {e}")))?;
    let user = serde_json::to_value(user).map_err(|e| CliError::config(format!("{origin}: {e}")))?;
    let mut merged = serde_json::to_value(base).expect("config serializes");
    merge(&mut merged, user, "")?;
    serde_json::from_value(merged).map_err(|e| CliError::config(format!("{origin}: {e}")))
}

pub fn load(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    let base = defaults();
    match path {
        None => Ok(base),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            layer(&base, &text, &p.display().to_string())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_tables_keep_other_defaults() {
        let cfg = layer(&defaults(), "seed = 9\n[pretrain.train]\nsteps = 12\n", "t").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.pretrain.train.steps, 12);
        assert_eq!(cfg.pretrain.train.batch_size, defaults().pretrain.train.batch_size);
        assert_eq!(cfg.finetune, defaults().finetune);
    }

    #[test]
    fn typos_and_bad_types_are_config_errors() {
        let e = layer(&defaults(), "[pretrain.train]\nstep = 12\n", "t").unwrap_err();
        assert!(e.message.contains("pretrain.train.step"), "{}", e.message);
        assert_eq!(e.code, 2);
        assert_eq!(layer(&defaults(), "seed = \"x\"\n", "t").unwrap_err().code, 2);
        assert_eq!(layer(&defaults(), "seed = \n", "t").unwrap_err().code, 2);
    }
}
