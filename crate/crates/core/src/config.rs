//! Experiment configuration files (TOML, strict).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::complexity::LedgerMode;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::hessian::SpectrumSettings;
use crate::lottery::TrainRecipe;
use crate::model::{build_model_with, InputShape, ModelSpec, MODEL_NAMES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Vanilla,
    Ilot,
    Rise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    /// Hidden widths for the MLP models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_retain")]
    pub retain: Vec<f64>,
    #[serde(default = "default_k")]
    pub k: Vec<usize>,
    #[serde(default = "default_iterations")]
    pub iterations: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_retain() -> Vec<f64> {
    vec![10.0]
}
fn default_k() -> Vec<usize> {
    vec![0]
}
fn default_iterations() -> Vec<usize> {
    vec![1]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    #[serde(default = "default_k")]
    pub k: Vec<usize>,
    #[serde(default = "default_spectrum_retain")]
    pub retain: Vec<f64>,
    /// Training seed of the model whose spectra are taken.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub settings: SpectrumSettings,
}

fn default_spectrum_retain() -> Vec<f64> {
    vec![10.0, 25.0, 50.0]
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig { k: default_k(), retain: default_spectrum_retain(), seed: 0, settings: SpectrumSettings::default() }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub ledger_mode: LedgerMode,
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub recipe: TrainRecipe,
    pub grid: GridConfig,
    #[serde(default)]
    pub spectrum: SpectrumConfig,
}

impl ExperimentConfig {
    /// Parses TOML text; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.dataset.resolve_paths(base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every constraint violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !MODEL_NAMES.contains(&self.model.name.as_str()) {
            v.push(format!("model.name: unknown model {:?} (expected one of {})", self.model.name, MODEL_NAMES.join(", ")));
        }
        if self.dataset.n_classes() < 2 {
            v.push("dataset.n_classes: need at least 2 classes".into());
        }
        let r = &self.recipe;
        if r.batch_size == 0 {
            v.push("recipe.batch_size: must be at least 1".into());
        }
        if let Err(e) = r.schedule.validate(r.epochs) {
            v.push(format!("recipe.schedule: {e}"));
        }
        if r.seed != 0 {
            v.push("recipe.seed: seeds come from grid.seeds; leave recipe.seed unset".into());
        }
        if !(r.sgd.momentum >= 0.0 && r.sgd.momentum < 1.0) {
            v.push(format!("recipe.sgd.momentum: must be in [0, 1), got {}", r.sgd.momentum));
        }
        if !(r.sgd.weight_decay >= 0.0 && r.sgd.weight_decay.is_finite()) {
            v.push(format!("recipe.sgd.weight_decay: must be >= 0, got {}", r.sgd.weight_decay));
        }
        let g = &self.grid;
        for (name, empty) in [
            ("grid.algorithms", g.algorithms.is_empty()),
            ("grid.retain", g.retain.is_empty()),
            ("grid.k", g.k.is_empty()),
            ("grid.iterations", g.iterations.is_empty()),
            ("grid.seeds", g.seeds.is_empty()),
        ] {
            if empty {
                v.push(format!("{name}: must not be empty"));
            }
        }
        let mut seeds = g.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            v.push("grid.seeds: duplicate seeds would produce duplicate cells".into());
        }
        check_retain("grid.retain", &g.retain, &mut v);
        check_k("grid.k", &g.k, r.epochs, &mut v);
        for &i in &g.iterations {
            if i == 0 {
                v.push("grid.iterations: every I must be at least 1, got 0".into());
            }
        }
        let s = &self.spectrum;
        if s.k.is_empty() {
            v.push("spectrum.k: must not be empty".into());
        }
        if s.retain.is_empty() {
            v.push("spectrum.retain: must not be empty".into());
        }
        check_retain("spectrum.retain", &s.retain, &mut v);
        check_k("spectrum.k", &s.k, r.epochs, &mut v);
        let st = &s.settings;
        for (name, val) in [
            ("spectrum.settings.n_probes", st.n_probes),
            ("spectrum.settings.lanczos_steps", st.lanczos_steps),
            ("spectrum.settings.bins", st.bins),
            ("spectrum.settings.batch_size", st.batch_size),
        ] {
            if val == 0 {
                v.push(format!("{name}: must be at least 1"));
            }
        }
        if st.samples == Some(0) {
            v.push("spectrum.settings.samples: must be at least 1 when set".into());
        }
        if !(st.eps_rel > 0.0 && st.eps_rel < 1.0) {
            v.push(format!("spectrum.settings.eps_rel: must be in (0, 1), got {}", st.eps_rel));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigViolations(v))
        }
    }

    /// The configured model for inputs of shape `input`.
    pub fn build_model(&self, input: InputShape) -> Result<ModelSpec> {
        build_model_with(&self.model.name, input, self.dataset.n_classes(), self.model.hidden.as_deref())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the fully resolved configuration to `dir/config.resolved.toml`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
        let path = dir.join("config.resolved.toml");
        fs::write(&path, self.to_toml()?).map_err(|e| Error::path(&path, e))?;
        Ok(path)
    }
}

fn check_retain(field: &str, values: &[f64], v: &mut Vec<String>) {
    for &r in values {
        if !(r > 0.0 && r <= 100.0) {
            v.push(format!("{field}: R must be in (0, 100], got {r}"));
        }
    }
}

fn check_k(field: &str, values: &[usize], epochs: usize, v: &mut Vec<String>) {
    for &k in values {
        if k > epochs {
            v.push(format!("{field}: k = {k} exceeds recipe.epochs = {epochs}"));
        }
    }
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    ExperimentConfig::from_toml(&text, &base)
}
