//! Run directories: resolved config, manifest and output files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use pntk::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Seconds since the Unix epoch; the only field that varies between reruns.
    pub started_unix: u64,
    pub config_sha256: String,
    /// Input file path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub files: Vec<String>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Output sink for one command. A disabled sink accepts and drops everything,
/// which is how the commands run as plain library calls.
#[derive(Debug)]
pub struct Artifacts {
    root: Option<PathBuf>,
    manifest: Manifest,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut f = fs::File::open(path)?;
    std::io::copy(&mut f, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

impl Artifacts {
    pub fn disabled(command: &str) -> Self {
        Self {
            root: None,
            manifest: Manifest {
                tool: TOOL.into(),
                version: VERSION.into(),
                command: command.into(),
                started_unix: 0,
                config_sha256: String::new(),
                inputs: BTreeMap::new(),
                files: Vec::new(),
                metadata: BTreeMap::new(),
            },
        }
    }

    /// Create `dir` and write `config.toml` (the resolved config) into it.
    pub fn create(dir: &Path, command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let text = cfg.to_toml()?;
        fs::write(dir.join("config.toml"), &text)?;
        let mut a = Self::disabled(command);
        a.root = Some(dir.to_path_buf());
        a.manifest.started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        a.manifest.config_sha256 = hex::encode(Sha256::digest(text.as_bytes()));
        a.manifest.files.push("config.toml".into());
        Ok(a)
    }

    pub fn enabled(&self) -> bool {
        self.root.is_some()
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        if self.enabled() {
            let hash = sha256_file(path)?;
            self.manifest.inputs.insert(path.display().to_string(), hash);
        }
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.manifest.metadata.insert(key.into(), v);
    }

    /// Absolute path for `name` inside the run, creating parent directories.
    pub fn path(&mut self, name: &str) -> Result<Option<PathBuf>> {
        let Some(root) = &self.root else {
            return Ok(None);
        };
        let p = root.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.manifest.files.push(name.into());
        Ok(Some(p))
    }

    pub fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>,
    ) -> Result<()> {
        if let Some(p) = self.path(name)? {
            let mut w = BufWriter::new(fs::File::create(p)?);
            f(&mut w)?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)
                .map_err(|e| Error::Format(format!("{name}: {e}")))?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    /// Write `manifest.json`; call once after every other artifact.
    pub fn finish(mut self) -> Result<Manifest> {
        if let Some(root) = self.root.clone() {
            self.manifest.files.push("manifest.json".into());
            let json = serde_json::to_string_pretty(&self.manifest)
                .map_err(|e| Error::Format(format!("manifest: {e}")))?;
            fs::write(root.join("manifest.json"), json + "\n")?;
        }
        Ok(self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disabled_sink_writes_nothing() {
        let mut a = Artifacts::disabled("x");
        assert!(a.path("a.csv").unwrap().is_none());
        a.write_json("b.json", &1).unwrap();
        assert!(a.finish().unwrap().files.is_empty());
    }

    #[test]
    fn run_directory_has_config_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let mut a = Artifacts::create(&root, "estimate", &ExperimentConfig::default()).unwrap();
        a.write_json("out.json", &serde_json::json!({"k": 1})).unwrap();
        a.add_input(&root.join("out.json")).unwrap();
        a.note("answer", 42);
        let m = a.finish().unwrap();
        assert!(root.join("config.toml").exists());
        assert!(root.join("manifest.json").exists());
        assert_eq!(m.files, vec!["config.toml", "out.json", "manifest.json"]);
        assert_eq!(m.inputs.len(), 1);
        assert_eq!(m.version, VERSION);
    }
}
