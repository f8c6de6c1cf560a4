//! Experiment configuration: one TOML file plus `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::Plant;
use crate::error::{Error, Result};
use crate::scenario::GeneratorConfig;
use crate::trainer::TrainerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeederSection {
    pub path: PathBuf,
    /// Overrides the slack voltage declared in the feeder file.
    pub v0: Option<f64>,
}

impl Default for FeederSection {
    fn default() -> Self {
        Self { path: PathBuf::from("feeder.feeder"), v0: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub train_seeds: Vec<u64>,
    pub test_seed: u64,
    /// Pre-generated training scenario CSVs; replaces `train_seeds` when non-empty.
    pub train_files: Vec<PathBuf>,
    /// Pre-generated test scenario CSV; replaces `test_seed` when set.
    pub test_file: Option<PathBuf>,
    pub generator: GeneratorConfig,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self { train_seeds: vec![1, 2, 3], test_seed: 100, train_files: Vec::new(), test_file: None, generator: GeneratorConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    /// Plant used during operation.
    pub plant: Plant,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self { plant: Plant::Nonlinear }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// Primal step; defaults to the trainer's alpha.
    pub alpha: Option<f64>,
    pub sigma: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self { alpha: None, sigma: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub tol: f64,
    pub cap: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { tol: 1e-8, cap: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Checkpoint to operate instead of training a new policy.
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { betas: vec![0.05, 0.1, 0.5], seeds: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub feeder: FeederSection,
    pub scenario: ScenarioSection,
    pub trainer: TrainerConfig,
    pub controller: ControllerSection,
    pub baseline: BaselineSection,
    pub oracle: OracleSection,
    pub output: OutputSection,
    pub evaluate: EvaluateSection,
    pub sweep: SweepSection,
}

/// Environment variable that overrides `output.dir`.
pub const OUT_DIR_ENV: &str = "FEEDBACK_OPF_OUT";

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value` to a TOML tree, creating tables as needed.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override path `{key}` crosses a non-table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parse TOML text, apply overrides, and resolve relative paths against `base_dir`.
    pub fn from_str_with(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_str_with(&text, overrides, base)?;
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output.dir = PathBuf::from(dir);
            }
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.feeder.path);
        fix(&mut self.output.dir);
        self.scenario.train_files.iter_mut().for_each(fix);
        if let Some(p) = self.scenario.test_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.scenario.generator.trend_csv.as_mut() {
            fix(p);
        }
        if let Some(p) = self.evaluate.policy.as_mut() {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the resolved configuration, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn baseline_alpha(&self) -> f64 {
        self.baseline.alpha.unwrap_or(self.trainer.alpha)
    }
}
