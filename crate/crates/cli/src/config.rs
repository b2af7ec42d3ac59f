//! TOML run configuration.
//!
//! Relative dataset and checkpoint paths resolve against the directory of
//! the config file; `output_dir` resolves against the working directory.
//! The effective config written next to each run's artifacts has every
//! default filled in and every path made absolute, so it re-runs unchanged
//! from anywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dfg_core::arch::{
    build_dcgan_pair, lenet_classifier_spec, lenet_extractor_spec, specs_hash, NetworkSpec, SplitModel,
};
use dfg_core::data::{
    load_idx, make_step_imbalance, preprocess, synth_dataset, Dataset, ImbalanceSpec, Step, SynthConfig,
    TensorDataset,
};
use dfg_core::nn::InitScheme;
use dfg_core::train::{GanSpecs, PretrainConfig, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// LeNet-5 split with the reference generator and critic.
    #[default]
    Lenet,
    /// Extractor and classifier given as layer lists in the config.
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub pipeline: Pipeline,
    pub in_channels: usize,
    pub n_classes: usize,
    pub extractor: Option<NetworkSpec>,
    pub classifier: Option<NetworkSpec>,
    /// Optional override of the reference generator (needs `critic` too).
    pub generator: Option<NetworkSpec>,
    pub critic: Option<NetworkSpec>,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            pipeline: Pipeline::Lenet,
            in_channels: 1,
            n_classes: 10,
            extractor: None,
            classifier: None,
            generator: None,
            critic: None,
        }
    }
}

impl ArchitectureConfig {
    pub fn split_specs(&self) -> Result<(NetworkSpec, NetworkSpec)> {
        match self.pipeline {
            Pipeline::Lenet => {
                if self.extractor.is_some() || self.classifier.is_some() {
                    return Err(CliError::config(
                        "architecture.extractor/classifier are only read when architecture.pipeline = \"custom\"",
                    ));
                }
                Ok((lenet_extractor_spec(self.in_channels), lenet_classifier_spec(self.n_classes)))
            }
            Pipeline::Custom => match (&self.extractor, &self.classifier) {
                (Some(e), Some(c)) => Ok((e.clone(), c.clone())),
                _ => Err(CliError::config(
                    "architecture.pipeline = \"custom\" needs architecture.extractor and architecture.classifier",
                )),
            },
        }
    }

    /// Freshly initialised extractor/classifier pair.
    pub fn build_split(&self, seed: u64) -> Result<SplitModel<f32>> {
        let (e, c) = self.split_specs()?;
        Ok(SplitModel::from_specs(e, c, InitScheme::He, seed)?)
    }

    pub fn split_hash(&self) -> Result<u64> {
        let (e, c) = self.split_specs()?;
        Ok(specs_hash(&[&e, &c]))
    }

    pub fn gan_specs(&self, feature_shape: &[usize], z_dim: usize) -> Result<GanSpecs> {
        let (generator, critic) = match (&self.generator, &self.critic) {
            (Some(g), Some(d)) => (g.clone(), d.clone()),
            (None, None) => build_dcgan_pair(feature_shape, self.n_classes, z_dim)?,
            _ => {
                return Err(CliError::config(
                    "architecture.generator and architecture.critic must be given together",
                ))
            }
        };
        Ok(GanSpecs {
            generator,
            critic,
            init: InitScheme::Xavier,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.n_classes < 2 {
            return Err(CliError::config(
                "architecture.in_channels must be positive and architecture.n_classes at least 2",
            ));
        }
        let (e, c) = self.split_specs()?;
        let model = SplitModel::<f32>::from_specs(e, c, InitScheme::He, 0)
            .map_err(|err| CliError::config(format!("architecture: {err}")))?;
        if model.n_classes() != self.n_classes {
            return Err(CliError::config(format!(
                "architecture.classifier emits {} classes but architecture.n_classes = {}",
                model.n_classes(),
                self.n_classes
            )));
        }
        Ok(())
    }
}

/// One dataset: IDX files or a synthetic generator, then optional step
/// imbalance, then preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SynthConfig>,
    #[serde(default)]
    pub imbalance: Option<ImbalanceSpec>,
    #[serde(default = "default_preprocess")]
    pub preprocess: Vec<Step>,
}

fn default_preprocess() -> Vec<Step> {
    vec![Step::Normalize]
}

impl DatasetConfig {
    fn validate(&self, key: &str) -> Result<()> {
        match (&self.images, &self.labels, &self.synthetic) {
            (None, None, None) => Err(CliError::config(format!(
                "{key}: no dataset given; set {key}.images and {key}.labels, or {key}.synthetic"
            ))),
            (Some(_), Some(_), Some(_)) => Err(CliError::config(format!(
                "{key}: set either IDX files or {key}.synthetic, not both"
            ))),
            (Some(_), None, _) => Err(CliError::config(format!("{key}.labels is missing"))),
            (None, Some(_), _) => Err(CliError::config(format!("{key}.images is missing"))),
            (Some(images), Some(labels), None) => {
                for (field, p) in [("images", images), ("labels", labels)] {
                    if !p.is_file() {
                        return Err(CliError::config(format!(
                            "{key}.{field}: file {} does not exist",
                            p.display()
                        )));
                    }
                }
                Ok(())
            }
            (None, None, Some(_)) => Ok(()),
        }
    }

    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.images, &mut self.labels].into_iter().flatten() {
            *p = absolute(base, p);
        }
    }

    pub fn load_raw(&self, key: &str) -> Result<Dataset> {
        let raw = match (&self.images, &self.labels, &self.synthetic) {
            (Some(images), Some(labels), None) => load_idx(images, labels)?,
            (None, None, Some(s)) => synth_dataset(s)?,
            _ => {
                self.validate(key)?;
                unreachable!("validate rejects every other combination")
            }
        };
        match &self.imbalance {
            Some(spec) => Ok(make_step_imbalance(&raw, spec)?),
            None => Ok(raw),
        }
    }

    pub fn load(&self, key: &str) -> Result<TensorDataset<f32>> {
        let raw = self.load_raw(key)?;
        Ok(preprocess(&raw, &self.preprocess)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DatasetConfig,
    pub test: DatasetConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    /// Pretrained extractor/classifier. Defaults to `<output_dir>/source.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Source dataset for `pretrain`.
    pub data: Option<DatasetConfig>,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    pub filter_weights: bool,
    pub features: bool,
    /// Test samples in `features.csv`, drawn evenly across classes.
    pub feature_samples: usize,
    /// Generated samples in `features.csv`.
    pub n_fake: usize,
    /// Iterations between resumable checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            filter_weights: true,
            features: false,
            feature_samples: 500,
            n_fake: 500,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub export: ExportConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Parses TOML text. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        let base = std::path::absolute(base).map_err(|e| CliError::io(base, e))?;
        cfg.data.train.resolve(&base);
        cfg.data.test.resolve(&base);
        if let Some(d) = &mut cfg.source.data {
            d.resolve(&base);
        }
        if let Some(p) = &mut cfg.source.checkpoint {
            *p = absolute(&base, p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        Self::parse(&text, base).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.architecture.validate()?;
        self.data.train.validate("data.train")?;
        self.data.test.validate("data.test")?;
        if let Some(d) = &self.source.data {
            d.validate("source.data")?;
        }
        if self.source.pretrain.batch_size == 0 {
            return Err(CliError::config("source.pretrain.batch_size must be positive"));
        }
        Ok(())
    }

    pub fn with_output_dir(mut self, dir: &Path) -> Result<Self> {
        self.output_dir = std::path::absolute(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(self)
    }

    pub fn source_checkpoint(&self) -> PathBuf {
        self.source
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("source.ckpt"))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::config(format!("cannot serialise config: {e}")))
    }

    /// First 16 hex digits of the SHA-256 of the effective config, with the
    /// output location and source checkpoint path left out so identical
    /// runs in different directories share a hash.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.source.checkpoint = None;
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }
}
