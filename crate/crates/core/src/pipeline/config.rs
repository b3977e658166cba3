use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::ColorJitterSpec;
use crate::datasets::{DomainStyle, EpisodeSpec, SyntheticSceneConfig};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_MAX_DETECTIONS;
use crate::tensor::OptimizerConfig;

/// Environment variable consulted when neither the command line nor the
/// config names a seed.
pub const SEED_ENV: &str = "FSODLAB_SEED";

/// Where a stage's images come from: an annotation file on disk, or scenes
/// generated on the fly from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Path(PathBuf),
    Synthetic(SyntheticSceneConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub dataset: DatasetSource,
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Iterations of linear learning-rate warmup from 1/10 of the rate.
    #[serde(default)]
    pub warmup_iterations: usize,
}

fn default_batch() -> usize {
    2
}

impl StageConfig {
    pub fn validate(&self, stage: &str) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config(format!("{stage}.iterations must be positive")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{stage}.batch_size must be positive")));
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        self.optimizer.validate()
    }
}

/// The four switches of the ablation, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// Fine-tune every parameter instead of freezing backbone and RPN.
    pub unfrozen: bool,
    /// Train on the pseudo-support set instead of the raw support.
    pub pss: bool,
    /// Cosine classifier instead of a linear one.
    pub embedding_norm: bool,
    /// Start fine-tuning from a model trained on the base domain.
    pub domain_adapt: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::all_on()
    }
}

impl Toggles {
    pub fn all_on() -> Self {
        Toggles {
            unfrozen: true,
            pss: true,
            embedding_norm: true,
            domain_adapt: true,
        }
    }

    pub fn all_off() -> Self {
        Toggles {
            unfrozen: false,
            pss: false,
            embedding_norm: false,
            domain_adapt: false,
        }
    }

    /// Short label such as `UP+PSS+EN`, or `baseline` when all are off.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.unfrozen, "UP"),
            (self.pss, "PSS"),
            (self.embedding_norm, "EN"),
            (self.domain_adapt, "DA"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Evaluate cells on a rayon pool instead of one after another.
    pub parallel: bool,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            shots: vec![1, 3, 5, 10],
            seeds: vec![0, 1, 2],
            parallel: false,
        }
    }
}

/// Everything one experiment needs. Missing fields take their defaults and
/// the fully resolved form is written next to every result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub base_train: StageConfig,
    pub fine_tune: StageConfig,
    pub toggles: Toggles,
    pub jitter: ColorJitterSpec,
    pub pss_copies: usize,
    pub rebuild_pss_each_epoch: bool,
    /// `episode.seed` is mixed with the run seed.
    pub episode: EpisodeSpec,
    pub detector: DetectorConfig,
    pub query_fraction: f64,
    pub eval_max_detections: usize,
    pub ablation: AblationSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            base_train: StageConfig {
                dataset: DatasetSource::Synthetic(SyntheticSceneConfig {
                    num_classes: 8,
                    images: 400,
                    domain_style: DomainStyle::Base,
                    ..Default::default()
                }),
                iterations: 1000,
                batch_size: 2,
                optimizer: OptimizerConfig::default(),
                warmup_iterations: 0,
            },
            fine_tune: StageConfig {
                dataset: DatasetSource::Synthetic(SyntheticSceneConfig {
                    num_classes: 5,
                    images: 200,
                    domain_style: DomainStyle::Target,
                    ..Default::default()
                }),
                iterations: 500,
                batch_size: 2,
                optimizer: OptimizerConfig::default(),
                warmup_iterations: 0,
            },
            toggles: Toggles::all_on(),
            jitter: ColorJitterSpec::default(),
            pss_copies: 1,
            rebuild_pss_each_epoch: false,
            episode: EpisodeSpec::default(),
            detector: DetectorConfig::default(),
            query_fraction: 0.11,
            eval_max_detections: DEFAULT_MAX_DETECTIONS,
            ablation: AblationSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.base_train.validate("base_train")?;
        self.fine_tune.validate("fine_tune")?;
        self.jitter.validate()?;
        self.episode.validate()?;
        self.detector.validate()?;
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return Err(Error::Config(format!(
                "query_fraction must be in (0, 1), got {}",
                self.query_fraction
            )));
        }
        if self.eval_max_detections == 0 {
            return Err(Error::Config("eval_max_detections must be positive".into()));
        }
        if self.ablation.shots.is_empty() || self.ablation.shots.contains(&0) {
            return Err(Error::Config("ablation.shots must be non-empty and positive".into()));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds must be non-empty".into()));
        }
        Ok(())
    }

    /// Seed priority: explicit override, then the config, then
    /// `FSODLAB_SEED`, then 0.
    pub fn resolve_seed(&self, cli: Option<u64>) -> Result<u64> {
        if let Some(s) = cli.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }
}
