//! Experiment configuration, read from a TOML file with one section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cgsur_core::field::{BcScenario, GrfSpec};
use cgsur_core::genmodel::{LatentConfig, ModelConfig};
use cgsur_core::inference::TrainConfig;
use cgsur_core::predict::InferMode;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub grid_size: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub length_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { grid_size: 16, mean: 0.4, std_dev: 0.8, length_scale: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub coarse_grid: usize,
    /// Defaults to half the number of coarse cells.
    pub dim_z: Option<usize>,
    /// Hidden widths of the decoder; empty gives an affine decoder.
    pub decoder_widths: Vec<usize>,
    pub source: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { coarse_grid: 4, dim_z: None, decoder_widths: Vec::new(), source: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VirtualType {
    #[default]
    Cgr,
    Randomized,
    Flux,
    Hybrid,
    Energy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub labeled: usize,
    pub unlabeled: usize,
    #[serde(rename = "virtual")]
    pub virtual_: usize,
    pub validation: usize,
    pub virtual_type: VirtualType,
    pub bc: BcScenario,
    pub randomized_count: usize,
    pub randomized_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            labeled: 16,
            unlabeled: 0,
            virtual_: 0,
            validation: 256,
            virtual_type: VirtualType::Cgr,
            bc: BcScenario::UniformDefault,
            randomized_count: 60,
            randomized_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Predictive samples per validation input.
    pub samples: usize,
    pub infer: InferMode,
    pub repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            infer: InferMode::Optimize { iterations: 1000, learning_rate: 1e-2, mc_samples: 4 },
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UqConfig {
    pub count: usize,
    pub reference: bool,
    /// Boundary data for the propagated inputs; defaults to the training scenario.
    pub bc: Option<BcScenario>,
    /// Encoder output instead of per-input optimization when an encoder exists.
    pub amortized: bool,
}

impl Default for UqConfig {
    fn default() -> Self {
        Self { count: 1024, reference: true, bc: None, amortized: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: Option<String>,
    pub field: FieldConfig,
    pub model: ModelSection,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub uq: UqConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let (df, dc) = (self.field.grid_size, self.model.coarse_grid);
        if df == 0 || dc == 0 || df % dc != 0 {
            return bad(format!("field.grid_size {df} must be a positive multiple of model.coarse_grid {dc}"));
        }
        if !(self.field.std_dev > 0.0) || !(self.field.length_scale > 0.0) {
            return bad("field.std_dev and field.length_scale must be positive".into());
        }
        if self.model.dim_z == Some(0) {
            return bad("model.dim_z must be positive".into());
        }
        let t = &self.train;
        if !(t.adam.learning_rate > 0.0) || !(t.local_learning_rate > 0.0) || t.mc_samples == 0 {
            return bad("train learning rates must be positive and mc_samples at least 1".into());
        }
        if let Some((a, b)) = t.tau_schedule {
            if !(a > 0.0 && b > 0.0) {
                return bad("train.tau_schedule entries must be positive".into());
            }
        }
        if self.eval.samples == 0 {
            return bad("eval.samples must be at least 1".into());
        }
        if self.data.randomized_count == 0 && matches!(self.data.virtual_type, VirtualType::Randomized) {
            return bad("data.randomized_count must be positive".into());
        }
        if !(self.data.randomized_scale > 0.0) {
            return bad("data.randomized_scale must be positive".into());
        }
        Ok(())
    }

    pub fn grf(&self) -> Result<GrfSpec, CliError> {
        let f = &self.field;
        GrfSpec::new(f.grid_size, f.mean, f.std_dev, f.length_scale).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        let dim_z = self.model.dim_z.unwrap_or(LatentConfig::for_coarse_grid(self.model.coarse_grid).dim_z);
        let mut m = ModelConfig::new(self.field.grid_size, self.model.coarse_grid)
            .with_decoder_widths(&self.model.decoder_widths)
            .with_dim_z(dim_z);
        m.source = self.model.source;
        m
    }

    /// Same experiment with another root seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Hash of the whole configuration.
    pub fn hash(&self) -> String {
        digest(&serde_json::to_value(self).expect("serializable"))
    }

    /// Hash of everything that determines the generated datasets.
    pub fn data_hash(&self) -> String {
        let v = serde_json::json!({
            "seed": self.seed,
            "field": self.field,
            "coarse_grid": self.model.coarse_grid,
            "source": self.model.source,
            "data": self.data,
        });
        digest(&v)
    }

    /// Hash of everything that determines the trained state.
    pub fn model_hash(&self) -> String {
        let v = serde_json::json!({
            "data": self.data_hash(),
            "model": self.model,
            "train": self.train,
        });
        digest(&v)
    }
}

fn digest(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("serializable")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_file() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.data.validation, 256);
        assert_eq!(c.eval.repeats, 3);
    }

    #[test]
    fn sections_override_defaults() {
        let c = ExperimentConfig::from_toml(
            "seed = 5\n[field]\ngrid_size = 8\n[model]\ncoarse_grid = 2\n[data]\nlabeled = 8\nvirtual_type = \"hybrid\"\nbc = \"a\"\n[train]\niterations = 500\ntau_schedule = [1.0, 100.0]\n[eval.infer]\nmode = \"amortized\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.field.grid_size, 8);
        assert_eq!(c.data.virtual_type, VirtualType::Hybrid);
        assert_eq!(c.data.bc, BcScenario::A);
        assert_eq!(c.train.iterations, 500);
        assert_eq!(c.train.tau_schedule, Some((1.0, 100.0)));
        assert_eq!(c.eval.infer, InferMode::Amortized);
        assert_eq!(c.model_config().dim_z, 2);
    }

    #[test]
    fn rejects_bad_grids_and_unknown_keys() {
        assert!(matches!(ExperimentConfig::from_toml("[model]\ncoarse_grid = 3\n"), Err(CliError::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[data]\nlabled = 3\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn data_hash_ignores_training_settings() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.train.iterations = 7;
        assert_eq!(a.data_hash(), b.data_hash());
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.data_hash(), a.with_seed(1).data_hash());
    }
}
