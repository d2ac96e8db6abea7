//! Experiment configuration: one TOML document covering data generation,
//! preprocessing, architectures, training, evaluation and paths. Unknown
//! keys are rejected at every level.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::PermutationTest;
use crate::lesion::MaskSource;
use crate::nets::{ClassifierArch, DiscriminatorArch, GeneratorArch, SegmenterArch};
use crate::phantom::{PhantomConfig, N_SUBTYPES};
use crate::preprocess::PreprocessConfig;
use crate::train::{Mode, TrainConfig};
use crate::volumes::DEFAULT_PHASES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub n_phases: usize,
    /// Base channel width of the generator and segmenter.
    pub width: usize,
    /// Down-sampling levels of the generator and segmenter.
    pub levels: usize,
    pub disc_width: usize,
    pub disc_layers: usize,
    pub cls_hidden: [usize; 2],
    pub cls_dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            n_phases: DEFAULT_PHASES,
            width: 8,
            levels: 3,
            disc_width: 8,
            disc_layers: 3,
            cls_hidden: [64, 32],
            cls_dropout: 0.5,
        }
    }
}

impl ArchConfig {
    pub fn generator(&self, n_out: usize) -> GeneratorArch {
        GeneratorArch::new(self.n_phases, n_out, self.width, self.levels)
    }

    pub fn segmenter(&self) -> SegmenterArch {
        SegmenterArch::new(self.width, self.levels)
    }

    pub fn discriminator(&self) -> DiscriminatorArch {
        DiscriminatorArch::new(self.disc_width, self.disc_layers)
    }

    pub fn classifier(&self, input_len: usize) -> ClassifierArch {
        ClassifierArch {
            hidden: self.cls_hidden,
            dropout: self.cls_dropout,
            ..ClassifierArch::new(input_len, N_SUBTYPES)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub permutation: PermutationTest,
    /// PSNR/SSIM data range; derived from the preprocessing window when unset.
    pub data_range: Option<f64>,
    /// Number of dropped phases per simulated study; follows the training
    /// missing mode when unset.
    pub missing_k: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    /// Run whose trained segmenter and pretrained classifier are reused
    /// instead of training new ones.
    pub pretrained: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Which tumor mask pools the classifier's lesion features.
    pub lesion_mask: MaskSource,
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML text, as written to run directories.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.preprocess.validate()?;
        self.train.validate(self.arch.n_phases)?;
        self.arch.generator(self.train.missing_mode.n_missing()).validate()?;
        self.arch.segmenter().validate()?;
        self.arch.discriminator().validate()?;
        self.arch.classifier(1).validate()?;
        let multiple = 1usize << self.arch.levels;
        if self.preprocess.crop_shape.iter().any(|&n| n % multiple != 0) {
            return Err(Error::Config(format!(
                "crop_shape {:?} must be divisible by {multiple} for {} levels",
                self.preprocess.crop_shape, self.arch.levels
            )));
        }
        if let Some(k) = self.eval.missing_k {
            if k == 0 || k >= self.arch.n_phases {
                return Err(Error::Config(format!(
                    "eval.missing_k = {k} for {} phases",
                    self.arch.n_phases
                )));
            }
        }
        if self.eval.data_range.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config("eval.data_range must be positive".into()));
        }
        Ok(())
    }

    /// Applies the global command-line overrides.
    pub fn with_overrides(mut self, seed: Option<u64>, threads: Option<usize>) -> Result<Self> {
        if let Some(s) = seed {
            self.phantom.seed = s;
            self.train.seed = s;
            self.eval.permutation.seed = s;
        }
        if let Some(t) = threads {
            if t == 0 {
                return Err(Error::Argument("--threads must be at least 1".into()));
            }
            self.eval.permutation.threads = t;
        }
        self.validate()?;
        Ok(self)
    }
}
