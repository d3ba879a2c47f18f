//! Resolved run configuration: built-in defaults, then a config file, then
//! command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use freqnet_core::config::{parse_pairs, render_pairs};
use freqnet_core::model::ModelConfig;
use freqnet_core::train::TrainConfig;
use freqnet_core::{Error, Result};

/// Name of the resolved-config echo written into every output directory.
pub const ECHO_FILE: &str = "run_config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Worker threads; 0 lets the pool pick.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::desk(), train: TrainConfig::desk(), data: None, out: None, threads: 0 }
    }
}

impl RunConfig {
    /// Sets one `section.key`.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (section, name) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key {key:?} needs a section prefix")))?;
        match (section, name) {
            ("model", k) => self.model.set(k, v),
            ("train", k) => self.train.set(k, v),
            ("run", "data") => {
                self.data = (!v.is_empty()).then(|| PathBuf::from(v));
                Ok(())
            }
            ("run", "out") => {
                self.out = (!v.is_empty()).then(|| PathBuf::from(v));
                Ok(())
            }
            ("run", "threads") => {
                self.threads = v.parse().map_err(|e| Error::Config(format!("{key}: {e}")))?;
                Ok(())
            }
            _ => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    /// Applies a `KEY=VALUE` override.
    pub fn set_assignment(&mut self, text: &str) -> Result<()> {
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {text:?} is not KEY=VALUE")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        self.apply_text(&text)
    }

    /// Both the initialization and the shuffling seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> =
            self.model.entries().into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect();
        out.extend(self.train.entries().into_iter().map(|(k, v)| (format!("train.{k}"), v)));
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        out.push(("run.data".into(), path(&self.data)));
        out.push(("run.out".into(), path(&self.out)));
        out.push(("run.threads".into(), self.threads.to_string()));
        out
    }

    pub fn to_text(&self) -> String {
        render_pairs(&self.entries())
    }
}

/// Writes `pairs` as `dir/run_config.txt`.
pub fn echo(dir: &Path, pairs: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    let path = dir.join(ECHO_FILE);
    fs::write(&path, render_pairs(pairs)).map_err(|e| Error::Io { path, source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("model.base_channels = 8\ntrain.epochs = 3\nrun.data = a/b\nrun.threads = 2\n").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        for text in ["model.depth = 3", "optim.lr = 1", "lr0 = 1", "run.verbose = 1"] {
            assert!(matches!(cfg.apply_text(text), Err(Error::Config(_))), "{text}");
        }
        assert!(cfg.set_assignment("train.epochs").is_err());
    }
}
