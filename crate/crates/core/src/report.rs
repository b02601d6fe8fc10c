//! Report files: one JSON document per run plus CSV sidecars. Nothing
//! time-dependent is written, so reruns are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;

pub const TOOL: &str = "na1";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config_hash: String,
    pub seed: u64,
    pub result: &'a T,
}

/// Writes into one output directory, remembering what it wrote.
#[derive(Debug)]
pub struct ReportWriter {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl ReportWriter {
    /// The directory is created on the first write.
    pub fn new(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn report<T: Serialize>(&mut self, command: &str, cfg: &ExperimentConfig, result: &T) -> Result<()> {
        let env = Envelope {
            tool: TOOL,
            version: VERSION,
            command,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            result,
        };
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(REPORT_FILE);
        fs::write(&path, text)?;
        self.written.push(path);
        Ok(())
    }

    pub fn csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.written.push(path);
        Ok(())
    }
}
