//! Run configuration: defaults, overlaid by a TOML file, overlaid by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thermalign::decompose::DecomposeConfig;
use thermalign::model::ModelConfig;
use thermalign::synth::{KindChoice, SynthRanges};
use thermalign::train::{apply_ablation, TrainConfig};
use thermalign::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of aligned pairs (`<id>/visible.png`, `<id>/thermal.png`).
    pub source: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub kind: KindChoice,
    pub magnitude: f64,
    /// Procedural scenes to generate when no source directory is given.
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub test_fraction: f64,
    pub ranges: SynthRanges,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            kind: KindChoice::Mixed,
            magnitude: 1.0,
            count: 10,
            height: 96,
            width: 128,
            test_fraction: 0.2,
            ranges: SynthRanges::default(),
        }
    }
}

/// Network hyperparameters other than the divisor and ablation, which live
/// in the training section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub heads: usize,
    pub gsce_ratios: [Vec<usize>; 2],
    pub gcce_ratios: [Vec<usize>; 2],
    pub decompose: DecomposeConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            heads: m.heads,
            gsce_ratios: m.gsce_ratios,
            gcce_ratios: m.gcce_ratios,
            decompose: m.decompose,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub thresholds: Vec<f64>,
    pub error_maps: bool,
    /// Endpoint error (px) mapped to the top of the heatmap color scale.
    pub error_map_max: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            thresholds: vec![1.0, 3.0, 5.0],
            error_maps: false,
            error_map_max: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Threads for per-pair work in `synth` and `eval`.
    pub workers: usize,
    pub paths: Paths,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            paths: Paths::default(),
            synth: SynthSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid by the file at `path`, if any.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| Error::Contract(format!("config {}: {e}", path.display())))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = ModelConfig {
            heads: self.model.heads,
            gsce_ratios: self.model.gsce_ratios.clone(),
            gcce_ratios: self.model.gcce_ratios.clone(),
            decompose: self.model.decompose,
            ..ModelConfig::default()
        };
        apply_ablation(&base, self.train.ablation, self.train.divisor)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.workers == 0 {
            return Err(Error::Contract("workers must be at least 1".into()));
        }
        self.model_config()?;
        if self.eval.thresholds.is_empty() || self.eval.thresholds.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Contract("PCK thresholds must be positive".into()));
        }
        if !(self.eval.error_map_max > 0.0) {
            return Err(Error::Contract("error_map_max must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Writes the resolved configuration as `config.toml` in `dir`.
    pub fn write_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml())?;
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        thermalign::metrics::fingerprint(self.to_toml().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c: RunConfig = toml::from_str("seed = 4\n[train]\nlr = 0.01\nablation = { lcce = false }\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.batch_size, 16);
        assert!(!c.train.ablation.lcce && c.train.ablation.gcce);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rate = 1.0\n").is_err());
    }
}
