use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::SCHEMA_VERSION;
use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub command: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub version: &'static str,
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    schema_version: u32,
    provenance: &'a Provenance,
    result: &'a T,
}

pub struct Writer {
    dir: PathBuf,
    provenance: Provenance,
}

impl Writer {
    pub fn new(dir: &Path, provenance: Provenance) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), provenance })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn json<T: Serialize>(&self, name: &str, result: &T) -> Result<PathBuf, CliError> {
        let env = Envelope { schema_version: SCHEMA_VERSION, provenance: &self.provenance, result };
        let mut text = serde_json::to_string_pretty(&env).map_err(|e| CliError::Io(e.into()))?;
        text.push('\n');
        self.text(name, &text)
    }

    /// CSV outputs start with a `# schema_version=..` comment line.
    pub fn csv(&self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        self.text(name, &format!("# schema_version={SCHEMA_VERSION} config_hash={}\n{body}", self.provenance.config_hash))
    }

    pub fn text(&self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        std::fs::write(&path, body)?;
        Ok(path)
    }
}
