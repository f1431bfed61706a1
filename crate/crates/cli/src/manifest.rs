//! Run manifest: one flat `key = value` file per run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ccvae::config::{DatasetKind, TrainConfig};
use sha2::{Digest, Sha256};

pub const BUILD_ID: &str = env!("CCVAE_BUILD_ID");

#[derive(Debug, Default)]
pub struct Manifest {
    path: Option<PathBuf>,
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(verb: &str) -> Self {
        let mut m = Manifest::default();
        m.set("verb", verb);
        m.set("build", BUILD_ID);
        m
    }

    pub fn target(&mut self, path: PathBuf) {
        self.path = Some(path);
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    /// Records every config field as `config.<section>.<key>`.
    pub fn config(&mut self, cfg: &TrainConfig) -> Result<()> {
        let table: toml::Table = cfg.to_toml()?.parse().context("re-parsing config snapshot")?;
        for (section, v) in &table {
            match v {
                toml::Value::Table(t) => {
                    for (k, v) in t {
                        self.set(&format!("config.{section}.{k}"), v);
                    }
                }
                other => self.set(&format!("config.{section}"), other),
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Writes the manifest if a destination was set; consumes it so a run
    /// cannot write twice.
    pub fn finish(self) -> Result<Option<PathBuf>> {
        let Some(path) = self.path.clone() else { return Ok(None) };
        ccvae::checkpoint::write_atomic(&path, self.render().as_bytes())?;
        Ok(Some(path))
    }
}

/// SHA-256 over the dataset files the config points at, in a fixed order.
pub fn dataset_fingerprint(cfg: &TrainConfig) -> Result<String> {
    let files: Vec<PathBuf> = match cfg.data.kind {
        DatasetKind::Stocks => vec![cfg.data.path.clone()],
        DatasetKind::Mnist => [
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
        ]
        .iter()
        .map(|f| cfg.data.path.join(f))
        .collect(),
    };
    let mut h = Sha256::new();
    for f in &files {
        h.update(read(f)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ccvae::Error::io(path, e).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_overwrite_in_place_and_stay_single_line() {
        let mut m = Manifest::new("train");
        m.set("seed", 1);
        m.set("status", "a\nb");
        m.set("seed", 2);
        let text = m.render();
        assert_eq!(text.matches("seed = ").count(), 1);
        assert!(text.contains("seed = 2\n"));
        assert!(text.contains("status = a b\n"));
        assert!(text.starts_with("verb = train\nbuild = "));
    }

    #[test]
    fn finish_without_target_writes_nothing() {
        assert!(Manifest::new("eval").finish().unwrap().is_none());
    }
}
