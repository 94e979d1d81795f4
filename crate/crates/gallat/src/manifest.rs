//! Run manifests, written atomically into the output directory.

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::error::{Error, Result};

pub const FILE_NAME: &str = "manifest.json";

/// `v<crate version>`, plus `-g<hash>` when built with `GALLAT_GIT_HASH` set.
pub fn version() -> String {
    match option_env!("GALLAT_GIT_HASH") {
        Some(h) if !h.is_empty() => format!("v{}-g{h}", env!("CARGO_PKG_VERSION")),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub seconds: f64,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let paths = |ps: &[PathBuf]| ps.iter().map(|p| p.display().to_string()).collect::<Vec<_>>();
        let v = json!({
            "command": self.command,
            "config": self.config.as_ref().map(|p| p.display().to_string()),
            "seed": self.seed,
            "inputs": paths(&self.inputs),
            "outputs": paths(&self.outputs),
            "version": self.version,
            "seconds": self.seconds,
        });
        let mut s = serde_json::to_string_pretty(&v).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Writes `dir/manifest.json` through a temporary file and a rename.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(FILE_NAME);
        write_atomic(&path, self.to_json().as_bytes())?;
        Ok(path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
