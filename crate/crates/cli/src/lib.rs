//! Support code for the `mtair` binary: PNG images, configuration presets
//! and the mapping from failures to exit codes.

pub mod exit;
pub mod image_io;

use std::path::Path;

use mtair::network::NetworkConfig;

pub use exit::{CliError, ExitCode};

/// Resolves `--config`: the presets `paper` and `tiny`, or a JSON file.
pub fn load_config(spec: &str) -> Result<NetworkConfig, CliError> {
    let cfg = match spec {
        "paper" => NetworkConfig::paper(),
        "tiny" => NetworkConfig::tiny(),
        path => {
            let text = std::fs::read_to_string(Path::new(path)).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {path}: {e}")))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `value` as pretty JSON.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path.display(), e))
}
