//! JSON run configuration and the provenance block echoed into outputs.
//!
//! A config file holds optional top-level `seed` and `threads` plus one
//! optional section per subcommand. Flags given on the command line win.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "threads": 4,
//!   "mc": { "table": 2, "m": 8000, "reps": 200, "grid": [0.2, 0.4] },
//!   "estimate": { "estimator": "unknown-p", "nbar": 4, "impose_beta_zero": true }
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Usage;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub deconvolve: DeconvolveSection,
    #[serde(default)]
    pub idcheck: IdcheckSection,
    #[serde(default)]
    pub mc: McSection,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub design: Option<String>,
    pub point: Option<f64>,
    pub m: Option<u64>,
    pub rep: Option<u64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub beta: Option<f64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    pub estimator: Option<String>,
    pub impose_beta_zero: Option<bool>,
    pub nbar: Option<u64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeconvolveSection {
    pub counts: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdcheckSection {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub table: Option<u8>,
    pub m: Option<u64>,
    pub reps: Option<usize>,
    pub grid: Option<Vec<f64>>,
    pub sequential: Option<bool>,
    pub out: Option<PathBuf>,
}

pub fn load(path: Option<&Path>) -> anyhow::Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = serde_json::from_str(&text).map_err(|e| Usage(format!("invalid config {}: {e}", path.display())))?;
    Ok(cfg)
}

/// Identifies the program, the seed and the fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    /// SHA-256 of `config` serialized as compact JSON.
    pub config_sha256: String,
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new<C: Serialize>(command: &str, seed: Option<u64>, config: &C) -> Self {
        let config = serde_json::to_value(config).expect("config serializes");
        let digest = Sha256::digest(config.to_string().as_bytes());
        Self {
            tool: "peerfx".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            config,
        }
    }

    /// Provenance as `#`-prefixed lines for CSV and text outputs.
    pub fn comment_lines(&self) -> String {
        let seed = self.seed.map_or("none".to_string(), |s| s.to_string());
        format!(
            "# {} {} {} seed={} config_sha256={}\n# config {}\n",
            self.tool, self.version, self.command, seed, self.config_sha256, self.config
        )
    }
}

/// Output JSON: provenance next to the result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Output<T> {
    pub provenance: Provenance,
    pub result: T,
}
