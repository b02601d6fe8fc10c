//! Experiment configuration read from TOML. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deflator::{GrowthScheme, Monitoring, DEFAULT_LEVELS};
use crate::error::{Error, Result};
use crate::forge::DEFAULT_THRESHOLDS;
use crate::grid::TimeGrid;
use crate::model::{from_catalog, MarketModel};
use crate::structure::{ClassifyOptions, GAMMA, RANK_TOL};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub classify: ClassifyConfig,
    #[serde(default)]
    pub deflate: DeflateConfig,
    #[serde(default)]
    pub forge: ForgeConfig,
    #[serde(default)]
    pub tree: TreeConfig,
}

fn default_paths() -> usize {
    10_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_horizon() -> f64 {
    1.0
}

fn default_steps() -> usize {
    1000
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            steps: default_steps(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Number of report times in the statistics table.
    #[serde(default = "default_report_points")]
    pub report_points: usize,
}

fn default_report_points() -> usize {
    100
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            report_points: default_report_points(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    #[serde(default = "default_refinements")]
    pub levels: usize,
    #[serde(default = "default_factor")]
    pub factor: usize,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_report_points")]
    pub report_points: usize,
}

fn default_refinements() -> usize {
    2
}

fn default_factor() -> usize {
    2
}

fn default_rank_tol() -> f64 {
    RANK_TOL
}

fn default_gamma() -> f64 {
    GAMMA
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            levels: default_refinements(),
            factor: default_factor(),
            rank_tol: default_rank_tol(),
            gamma: default_gamma(),
            report_points: default_report_points(),
        }
    }
}

impl ClassifyConfig {
    pub fn options(&self) -> ClassifyOptions {
        ClassifyOptions {
            levels: self.levels,
            factor: self.factor,
            rank_tol: self.rank_tol,
            gamma: self.gamma,
            report_points: self.report_points,
        }
    }
}

/// Shared by `deflate` and `localize`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeflateConfig {
    #[serde(default)]
    pub scheme: GrowthScheme,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default)]
    pub monitoring: Monitoring,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
}

fn default_levels() -> Vec<f64> {
    DEFAULT_LEVELS.to_vec()
}

impl Default for DeflateConfig {
    fn default() -> Self {
        Self {
            scheme: GrowthScheme::default(),
            levels: default_levels(),
            monitoring: Monitoring::default(),
            rank_tol: default_rank_tol(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForgeMode {
    /// Kernel strategy when the range condition fails, leverage ladder
    /// otherwise.
    #[default]
    Auto,
    Kernel,
    Ladder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeConfig {
    #[serde(default)]
    pub mode: ForgeMode,
    /// Scales `k` for the kernel family `1 + k∫⟨θ, dS⟩`.
    #[serde(default = "default_scales")]
    pub scales: Vec<f64>,
    /// Truncation levels for the leverage ladder.
    #[serde(default = "default_ks")]
    pub ks: Vec<f64>,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default = "default_ladder_scheme")]
    pub scheme: GrowthScheme,
}

fn default_scales() -> Vec<f64> {
    vec![1.0, 2.0, 4.0, 8.0, 16.0]
}

fn default_ks() -> Vec<f64> {
    (0..=10).map(|j| f64::from(1u32 << j)).collect()
}

fn default_thresholds() -> Vec<f64> {
    DEFAULT_THRESHOLDS.to_vec()
}

fn default_ladder_scheme() -> GrowthScheme {
    GrowthScheme::Exponential
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            mode: ForgeMode::default(),
            scales: default_scales(),
            ks: default_ks(),
            thresholds: default_thresholds(),
            scheme: default_ladder_scheme(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arithmetic {
    #[default]
    Exact,
    Float,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    /// Tree description file, relative to the config file.
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub arithmetic: Arithmetic,
    /// Strategy bound in the separating program.
    #[serde(default = "default_bound")]
    pub bound: f64,
    /// Random test processes for the stopping-time check.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Depths of inverse Bessel trees for the localization table; empty
    /// skips the table.
    #[serde(default)]
    pub depths: Vec<usize>,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
}

fn default_bound() -> f64 {
    crate::tree::SEPARATING_BOUND as f64
}

fn default_samples() -> usize {
    10
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            file: None,
            arithmetic: Arithmetic::default(),
            bound: default_bound(),
            samples: default_samples(),
            depths: Vec::new(),
            levels: default_levels(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Read a config file; a relative tree file is resolved against the
    /// config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(f) = &cfg.tree.file {
            if f.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new(""));
                cfg.tree.file = Some(base.join(f));
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.paths {
            self.paths = m;
        }
        if let Some(n) = o.steps {
            self.grid.steps = n;
        }
    }

    pub fn market_model(&self) -> Result<MarketModel> {
        let m = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Config("missing [model] section".into()))?;
        from_catalog(&m.name, &m.params)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.grid.horizon, self.grid.steps)
    }

    /// SHA-256 of the effective configuration in canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
