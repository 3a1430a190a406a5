//! Run manifest and staged output files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::settings::Settings;

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub name: String,
    pub sha256: String,
}

impl InputFile {
    pub fn read(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let sha256 = hex::encode(Sha256::digest(&bytes));
        Ok((Self { name, sha256 }, bytes))
    }
}

/// What determines a run's outputs. Output locations are deliberately left
/// out so the same run written elsewhere has the same hash.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub arguments: serde_json::Value,
    pub settings: Settings,
    pub inputs: Vec<InputFile>,
}

impl Manifest {
    pub fn new(command: &str, arguments: serde_json::Value, settings: &Settings, inputs: Vec<InputFile>) -> Self {
        Self {
            tool: "ofi-svar",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            arguments,
            settings: settings.clone(),
            inputs,
        }
    }

    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }
}

/// Output files collected in memory and written only once the whole run
/// has succeeded.
pub struct Outputs {
    hash: String,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn new(hash: String) -> Self {
        Self { hash, files: Vec::new() }
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Adds a text file; the first line carries the manifest hash.
    pub fn text(&mut self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = format!("# manifest_sha256={}\n", self.hash).into_bytes();
        body(&mut buf).with_context(|| format!("rendering {name}"))?;
        self.files.push((name.into(), buf));
        Ok(())
    }

    /// Adds a JSON document wrapped as `{"manifest_sha256": ..., key: value}`.
    pub fn json(&mut self, name: &str, fields: serde_json::Map<String, serde_json::Value>) -> Result<()> {
        let mut doc = serde_json::Map::new();
        doc.insert("manifest_sha256".into(), self.hash.clone().into());
        doc.extend(fields);
        let mut buf = serde_json::to_vec_pretty(&serde_json::Value::Object(doc))?;
        buf.push(b'\n');
        self.files.push((name.into(), buf));
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Writes every file under a temporary name, then renames them into
    /// place. On failure the temporary files are removed.
    pub fn commit(self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
        let result = (|| -> Result<()> {
            for (name, bytes) in &self.files {
                let tmp = dir.join(format!(".{name}.partial"));
                fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
                staged.push((tmp, dir.join(name)));
            }
            Ok(())
        })();
        if let Err(e) = result {
            for (tmp, _) in &staged {
                let _ = fs::remove_file(tmp);
            }
            return Err(e);
        }
        for (tmp, dest) in &staged {
            fs::rename(tmp, dest).with_context(|| format!("moving {} into place", dest.display()))?;
        }
        Ok(())
    }
}
