use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{held_out_split, intensity_scale, load_idx, synth_extreme, Dataset, ExtremeMode};
use crate::error::{Error, Result};
use crate::hypersphere::SphereVaeSpec;
use crate::lipschitz::lipschitz_budget;
use crate::nn::AdamConfig;
use crate::rng;
use crate::scores::{ScoreKind, ScoreSettings};
use crate::vae::VaeSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    Score,
    Eval,
    AblateDecoder,
    AblateCompactness,
    LatentNorms,
    SphereArea,
    SphereToy,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Score => "score",
            Command::Eval => "eval",
            Command::AblateDecoder => "ablate-decoder",
            Command::AblateCompactness => "ablate-compactness",
            Command::LatentNorms => "latent-norms",
            Command::SphereArea => "sphere-area",
            Command::SphereToy => "sphere-toy",
        }
    }
}

/// Where the images of one dataset role come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// An IDX image/label pair, optionally restricted by class.
    Idx {
        name: String,
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<Vec<u32>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exclude_classes: Option<Vec<u32>>,
    },
    Synthetic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        mode: ExtremeMode,
        #[serde(default = "default_synthetic_count")]
        n: usize,
        #[serde(default = "default_side")]
        side: usize,
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Another source with every pixel multiplied by `factor` and clipped.
    Scaled {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        source: Box<DataSource>,
        factor: f64,
    },
}

fn default_synthetic_count() -> usize {
    1000
}
fn default_side() -> usize {
    28
}
fn default_delta() -> f64 {
    crate::data::DEFAULT_DELTA
}

impl DataSource {
    pub fn name(&self) -> String {
        match self {
            DataSource::Idx { name, .. } => name.clone(),
            DataSource::Synthetic { name, mode, .. } => name.clone().unwrap_or_else(|| {
                match mode {
                    ExtremeMode::NearBlack => "near_black",
                    ExtremeMode::NearWhite => "near_white",
                }
                .to_string()
            }),
            DataSource::Scaled {
                name,
                source,
                factor,
            } => name
                .clone()
                .unwrap_or_else(|| format!("{}_x{factor}", source.name())),
        }
    }

    /// The same source with relative file paths anchored at `base`.
    pub fn anchored(&self, base: &Path) -> DataSource {
        let mut out = self.clone();
        match &mut out {
            DataSource::Idx { images, labels, .. } => {
                *images = base.join(&*images);
                *labels = base.join(&*labels);
            }
            DataSource::Scaled { source, .. } => **source = source.anchored(base),
            DataSource::Synthetic { .. } => {}
        }
        out
    }
}

/// Loads sources, reading each IDX pair from disk only once.
#[derive(Default)]
pub struct DataLoader {
    files: HashMap<(PathBuf, PathBuf), Dataset>,
}

impl DataLoader {
    pub fn load(&mut self, source: &DataSource) -> Result<Dataset> {
        let data = match source {
            DataSource::Idx {
                images,
                labels,
                classes,
                exclude_classes,
                ..
            } => {
                let key = (images.clone(), labels.clone());
                if !self.files.contains_key(&key) {
                    for p in [images, labels] {
                        if !p.exists() {
                            return Err(Error::Config(format!(
                                "dataset file {} does not exist",
                                p.display()
                            )));
                        }
                    }
                    self.files.insert(key.clone(), load_idx(images, labels)?);
                }
                let mut d = self.files[&key].clone();
                if let Some(keep) = classes {
                    d = held_out_split(&d, keep).0;
                }
                if let Some(drop) = exclude_classes {
                    d = held_out_split(&d, drop).1;
                }
                d
            }
            DataSource::Synthetic {
                mode,
                n,
                side,
                delta,
                seed,
                ..
            } => synth_extreme(*n, *side, *mode, *delta, *seed)?,
            DataSource::Scaled { source, factor, .. } => {
                intensity_scale(&self.load(source)?, *factor)?
            }
        };
        if data.is_empty() {
            return Err(Error::Config(format!("dataset {} is empty", source.name())));
        }
        Ok(data.with_name(source.name()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub train: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inlier_test: Option<DataSource>,
    #[serde(default)]
    pub outliers: Vec<DataSource>,
    /// Cap on training inputs, drawn under `data_seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train: Option<usize>,
    /// Cap on inputs scored per evaluation set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_eval: Option<usize>,
    #[serde(default)]
    pub data_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSettings {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    128
}

impl Default for TrainingSettings {
    fn default() -> Self {
        TrainingSettings {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            adam: AdamConfig::default(),
        }
    }
}

/// A named copy of the base model with its own Lipschitz budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub encoder_lipschitz: Option<f64>,
    pub decoder_lipschitz: Option<f64>,
}

impl Variant {
    pub fn apply(&self, base: &VaeSpec) -> VaeSpec {
        VaeSpec {
            encoder_lipschitz: self.encoder_lipschitz,
            decoder_lipschitz: self.decoder_lipschitz,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    pub output_dir: PathBuf,
    /// Trained models are kept here, keyed by everything that determines
    /// their weights. Defaults to `<output_dir>/models`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_model")]
    pub model: VaeSpec,
    /// Models to train and compare. Empty means the command's default set.
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub training: TrainingSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSettings>,
    /// Scores to compute. Empty means the command's default set.
    #[serde(default)]
    pub scores: Vec<ScoreKind>,
    #[serde(default)]
    pub sampling: ScoreSettings,
    /// Training inputs used to estimate the entropy for typicality.
    #[serde(default = "default_entropy_inputs")]
    pub entropy_inputs: usize,
    #[serde(default = "default_decoder_budgets")]
    pub decoder_budgets: Vec<f64>,
    #[serde(default = "default_intensity_factors")]
    pub intensity_factors: Vec<f64>,
    #[serde(default = "default_kde_points")]
    pub kde_points: usize,
    #[serde(default = "default_max_dim")]
    pub max_dim: usize,
    #[serde(default = "SphereVaeSpec::mnist_like")]
    pub sphere_model: SphereVaeSpec,
}

fn default_model() -> VaeSpec {
    let m = lipschitz_budget(10).expect("positive latent dim") as f64;
    VaeSpec::mnist_like(Some(1.0), Some(m))
}
fn default_entropy_inputs() -> usize {
    1000
}
fn default_decoder_budgets() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 4.0, 5.0, 10.0]
}
fn default_intensity_factors() -> Vec<f64> {
    vec![1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0]
}
fn default_kde_points() -> usize {
    256
}
fn default_max_dim() -> usize {
    40
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills command-dependent defaults and checks the fields `command` uses.
    pub fn resolve(mut self, command: Command) -> Result<Self> {
        if let Some(declared) = self.command {
            if declared != command {
                return Err(Error::Config(format!(
                    "config is for `{}` but `{}` was requested",
                    declared.name(),
                    command.name()
                )));
            }
        }
        self.command = Some(command);
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if command == Command::SphereArea {
            if self.max_dim == 0 {
                return Err(Error::Config("max_dim must be positive".into()));
            }
            return Ok(self);
        }
        if self.scores.is_empty() {
            self.scores = match command {
                Command::Score | Command::Eval => ScoreKind::ALL.to_vec(),
                _ => vec![ScoreKind::HoleIndicator],
            };
        }
        if self.variants.is_empty() {
            self.variants = match command {
                Command::AblateCompactness | Command::LatentNorms => vec![
                    Variant {
                        name: "vanilla".into(),
                        encoder_lipschitz: None,
                        decoder_lipschitz: None,
                    },
                    Variant {
                        name: "lipschitz".into(),
                        encoder_lipschitz: self.model.encoder_lipschitz.or(Some(1.0)),
                        decoder_lipschitz: self.model.decoder_lipschitz,
                    },
                ],
                _ => vec![Variant {
                    name: "model".into(),
                    encoder_lipschitz: self.model.encoder_lipschitz,
                    decoder_lipschitz: self.model.decoder_lipschitz,
                }],
            };
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("variant names must be unique".into()));
        }
        self.model.validate()?;
        for v in &self.variants {
            v.apply(&self.model).validate()?;
        }
        TrainingSettings::validate(&self.training)?;
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| Error::Config(format!("`{}` needs a data section", command.name())))?;
        let needs_eval = !matches!(command, Command::Train);
        if needs_eval && data.inlier_test.is_none() {
            return Err(Error::Config(format!(
                "`{}` needs data.inlier_test",
                command.name()
            )));
        }
        let needs_outliers = matches!(
            command,
            Command::Eval
                | Command::AblateDecoder
                | Command::AblateCompactness
                | Command::SphereToy
        );
        if needs_outliers && data.outliers.is_empty() {
            return Err(Error::Config(format!(
                "`{}` needs at least one outlier set",
                command.name()
            )));
        }
        let mut set_names: Vec<String> = data
            .inlier_test
            .iter()
            .chain(&data.outliers)
            .map(DataSource::name)
            .collect();
        set_names.sort_unstable();
        if set_names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("evaluation set names must be unique".into()));
        }
        if command == Command::AblateDecoder && self.decoder_budgets.is_empty() {
            return Err(Error::Config("decoder_budgets must not be empty".into()));
        }
        if command == Command::AblateCompactness && self.intensity_factors.is_empty() {
            return Err(Error::Config("intensity_factors must not be empty".into()));
        }
        if command == Command::LatentNorms && self.kde_points < 2 {
            return Err(Error::Config("kde_points must be at least 2".into()));
        }
        let s = &self.sampling;
        if s.posterior_samples < 2 || s.importance_samples == 0 {
            return Err(Error::Config(
                "sampling needs posterior_samples >= 2 and importance_samples >= 1".into(),
            ));
        }
        if self.scores.contains(&ScoreKind::Typicality) && self.entropy_inputs == 0 {
            return Err(Error::Config(
                "entropy_inputs must be positive for typicality".into(),
            ));
        }
        Ok(self)
    }

    pub fn data(&self) -> &DataSettings {
        self.data.as_ref().expect("checked in resolve")
    }
}

impl TrainingSettings {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A resolved configuration plus the directory its relative paths refer to.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

impl Experiment {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path, command: Command) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = ExperimentConfig::from_json(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Experiment::new(config, base_dir, command)
    }

    pub fn new(config: ExperimentConfig, base_dir: PathBuf, command: Command) -> Result<Self> {
        Ok(Experiment {
            config: config.resolve(command)?,
            base_dir,
        })
    }

    pub fn command(&self) -> Command {
        self.config.command.expect("set by resolve")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.base_dir.join(&self.config.output_dir)
    }

    pub fn cache_dir(&self) -> PathBuf {
        match &self.config.cache_dir {
            Some(dir) => self.base_dir.join(dir),
            None => self.output_dir().join("models"),
        }
    }

    pub fn source(&self, source: &DataSource) -> DataSource {
        source.anchored(&self.base_dir)
    }

    /// Training inputs after the `max_train` cap.
    pub fn load_train(&self, loader: &mut DataLoader) -> Result<Dataset> {
        let data = self.config.data();
        let d = loader.load(&self.source(&data.train))?;
        Ok(match data.max_train {
            Some(max) => d.subsample(max, rng::derive_seed(data.data_seed, "train")),
            None => d,
        })
    }

    /// The inlier test set followed by every outlier set, each capped at
    /// `max_eval` inputs.
    pub fn load_eval_sets(&self, loader: &mut DataLoader) -> Result<(Dataset, Vec<Dataset>)> {
        let data = self.config.data();
        let cap = |d: Dataset| match data.max_eval {
            Some(max) => {
                let seed = rng::derive_seed(data.data_seed, &format!("eval/{}", d.name));
                d.subsample(max, seed)
            }
            None => d,
        };
        let inlier_source = data.inlier_test.as_ref().expect("checked in resolve");
        let inliers = cap(loader.load(&self.source(inlier_source))?);
        let outliers = data
            .outliers
            .iter()
            .map(|s| loader.load(&self.source(s)).map(cap))
            .collect::<Result<Vec<_>>>()?;
        Ok((inliers, outliers))
    }
}
