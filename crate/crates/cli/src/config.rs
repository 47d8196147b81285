//! Run configuration: one TOML file with a section per pipeline stage.

use std::fs;
use std::path::{Path, PathBuf};

use landmark_core::encoder::EncoderConfig;
use landmark_core::eval::{NmfConfig, ScaleSweepConfig};
use landmark_core::landmark::RegressorConfig;
use landmark_core::stage1::Stage1Config;
use landmark_core::stage2::{DenseConfig, Stage2Config};
use landmark_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory with `images/` and `landmarks.csv`; synthetic data when unset.
    pub root: Option<PathBuf>,
    pub eye_indices: Option<(usize, usize)>,
    /// Trailing images of `root` held out for validation.
    pub val_count: usize,
    pub synthetic_count: usize,
    pub synthetic_val_count: usize,
    pub canvas: usize,
    pub renders_per_identity: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: None,
            eye_indices: None,
            val_count: 50,
            synthetic_count: 200,
            synthetic_val_count: 50,
            canvas: 64,
            renders_per_identity: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Stage-2 dense student maps.
    Dense,
    /// Stage-1 hypercolumns.
    Hypercolumn,
    /// Untrained dense model with a fresh encoder.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub features: FeatureSource,
    pub n_annotations: usize,
    pub n_same: usize,
    pub n_diff: usize,
    pub overlays: usize,
    pub fewshot_counts: Vec<usize>,
    pub fewshot_seeds: Vec<u64>,
    pub nmf_rank: usize,
    pub nmf_images: usize,
    pub nmf: NmfConfig,
    pub scale: ScaleSweepConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            features: FeatureSource::Dense,
            n_annotations: 100,
            n_same: 50,
            n_diff: 50,
            overlays: 8,
            fewshot_counts: vec![1, 5, 10, 20, 50, 100],
            fewshot_seeds: vec![0, 1, 2],
            nmf_rank: 8,
            nmf_images: 20,
            nmf: NmfConfig::default(),
            scale: ScaleSweepConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    /// Copied into every section seed.
    pub seed: u64,
    pub workers: usize,
    pub dataset: DatasetSection,
    pub encoder: EncoderConfig,
    pub stage1: Stage1Config,
    pub dense: DenseConfig,
    pub stage2: Stage2Config,
    pub regressor: RegressorConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "default".into(),
            seed: 0,
            workers: 1,
            dataset: DatasetSection::default(),
            encoder: EncoderConfig::default(),
            stage1: Stage1Config::default(),
            dense: DenseConfig::default(),
            stage2: Stage2Config::default(),
            regressor: RegressorConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Propagate the top-level seed and check cross-section consistency.
    pub fn resolve(mut self) -> Result<Self> {
        let s = self.seed;
        let sections = [
            ("encoder", self.encoder.seed),
            ("stage1", self.stage1.seed),
            ("dense", self.dense.seed),
            ("stage2", self.stage2.seed),
            ("regressor", self.regressor.seed),
            ("eval.scale", self.eval.scale.seed),
            ("eval.nmf", self.eval.nmf.seed),
        ];
        for (name, v) in sections {
            if v != 0 && v != s {
                return Err(Error::Config(format!("{name}.seed = {v} conflicts with top-level seed {s}; set only `seed`")));
            }
        }
        self.encoder.seed = s;
        self.stage1.seed = s;
        self.dense.seed = s;
        self.stage2.seed = s;
        self.regressor.seed = s;
        self.eval.scale.seed = s;
        self.eval.nmf.seed = s;
        let input = self.encoder.backbone.input_size;
        for (name, crop) in [("stage1", self.stage1.augmentation.crop_size), ("stage2", self.stage2.augmentation.crop_size)] {
            if crop != input {
                return Err(Error::Config(format!("{name}.augmentation.crop_size {crop} differs from encoder input_size {input}")));
            }
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) || self.run_name.starts_with('.') {
            return Err(Error::Config(format!("run_name {:?} is not a plain directory name", self.run_name)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.encoder.backbone.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.eval.scale.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[stage1]\nepochz = 3").is_err());
        assert!(RunConfig::from_toml("[stage2]\ntau = 0.1").is_ok());
    }

    #[test]
    fn resolved_dump_round_trips() {
        let cfg = RunConfig::from_toml("seed = 7\n[stage1]\nepochs = 3").unwrap().resolve().unwrap();
        assert_eq!(cfg.stage1.seed, 7);
        assert_eq!(cfg.stage1.epochs, 3);
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap().resolve().unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn conflicting_seeds_rejected() {
        assert!(RunConfig::from_toml("seed = 1\n[stage2]\nseed = 2").unwrap().resolve().is_err());
        assert!(RunConfig::from_toml("run_name = \"../x\"").unwrap().resolve().is_err());
    }
}
