//! Run configuration files.
//!
//! Every key is required. Keys whose value may be absent (`budget`,
//! `cost_table`, `clip_norm`) must still be written out, as `null`. Seeds are
//! never part of a section: one master seed fans out to component seeds.
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use swp_core::cost::Budget;
use swp_core::data::{parse_idx, split_per_class, synth_dataset, Dataset, Pattern, SynthConfig};
use swp_core::rng::{derive_seed, tag};
use swp_core::search::{DeaConfig, EaConfig};
use swp_core::slimnet::SupernetSpec;
use swp_core::train::TrainConfig;

use crate::error::{read, CliError, Result};

fn explicit<'de, D: Deserializer<'de>, T: Deserialize<'de>>(d: D) -> std::result::Result<Option<T>, D::Error> {
    Option::<T>::deserialize(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SpecSource {
    Path(PathBuf),
    Inline(SupernetSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    pub noise: f64,
    pub distractor: f64,
    pub jitter: usize,
    pub pattern: Pattern,
    pub prototypes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSection {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synth(SynthSection),
    Idx(IdxSection),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Validation examples per class.
    pub val_per_class: usize,
}

/// [`TrainConfig`] without its seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub random_subnets: usize,
    pub tinynet: bool,
    pub distill_weight: f64,
    #[serde(deserialize_with = "explicit")]
    pub clip_norm: Option<f64>,
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay: self.lr_decay,
            decay_epochs: self.decay_epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            random_subnets: self.random_subnets,
            tinynet: self.tinynet,
            distill_weight: self.distill_weight,
            clip_norm: self.clip_norm,
            seed,
        }
    }
}

/// [`EaConfig`] without its seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EaSection {
    pub population: usize,
    pub top_k: usize,
    pub mutation_prob: f64,
    pub iterations: usize,
    pub mutations: usize,
    pub crossovers: usize,
}

impl EaSection {
    pub fn with_seed(&self, seed: u64) -> EaConfig {
        EaConfig {
            population: self.population,
            top_k: self.top_k,
            mutation_prob: self.mutation_prob,
            iterations: self.iterations,
            mutations: self.mutations,
            crossovers: self.crossovers,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub stage: EaSection,
    pub manager: EaSection,
    pub parallel: bool,
    /// Training examples whose fullnet features score stage genes.
    pub feature_examples: usize,
}

impl SearchSection {
    pub fn with_seed(&self, seed: u64) -> DeaConfig {
        DeaConfig {
            stage: self.stage.with_seed(derive_seed(seed, &[tag::SEARCH, 0])),
            manager: self.manager.with_seed(derive_seed(seed, &[tag::SEARCH, 1])),
            parallel: self.parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub spec: SpecSource,
    pub dataset: DatasetConfig,
    pub train: TrainSection,
    pub retrain: TrainSection,
    pub search: SearchSection,
    #[serde(deserialize_with = "explicit")]
    pub budget: Option<Budget>,
    #[serde(deserialize_with = "explicit")]
    pub cost_table: Option<PathBuf>,
    pub out: PathBuf,
}

/// Component seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub data: u64,
    pub train: u64,
    pub search: u64,
    pub retrain: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        Self {
            master,
            data: derive_seed(master, &[tag::DATA]),
            train: derive_seed(master, &[tag::TRAIN]),
            search: derive_seed(master, &[tag::SEARCH]),
            retrain: derive_seed(master, &[tag::RETRAIN]),
            eval: derive_seed(master, &[tag::EVAL]),
        }
    }
}

/// A loaded configuration with its spec resolved and paths made absolute.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub config: RunConfig,
    pub spec: SupernetSpec,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parse<T: for<'de> Deserialize<'de>>(bytes: &[u8], what: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            CliError::config(format!("{}: {inner}", what.display()))
        } else {
            CliError::config(format!("{}: {path}: {inner}", what.display()))
        }
    })
}

fn require_file(field: &str, p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!("{field}: no such file {}", p.display())))
    }
}

impl RunConfig {
    pub fn from_json(bytes: &[u8], origin: &Path) -> Result<Self> {
        parse(bytes, origin)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, e: swp_core::Error| CliError::config(format!("{f}: {e}"));
        self.train.with_seed(0).validate().map_err(|e| field("train", e))?;
        self.retrain.with_seed(0).validate().map_err(|e| field("retrain", e))?;
        self.search.stage.with_seed(0).validate().map_err(|e| field("search.stage", e))?;
        self.search.manager.with_seed(0).validate().map_err(|e| field("search.manager", e))?;
        if self.search.feature_examples == 0 {
            return Err(CliError::config("search.feature_examples: must be positive"));
        }
        if let Some(b) = self.budget {
            if !(b.value > 0.0) {
                return Err(CliError::config("budget.value: must be positive"));
            }
        }
        Ok(())
    }
}

impl Run {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let mut config = RunConfig::from_json(&bytes, path)?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        config.out = resolve(&base, &config.out);
        config.cost_table = config.cost_table.map(|p| resolve(&base, &p));
        if let DatasetSource::Idx(idx) = &mut config.dataset.source {
            idx.images = resolve(&base, &idx.images);
            idx.labels = resolve(&base, &idx.labels);
        }
        if let SpecSource::Path(p) = &mut config.spec {
            *p = resolve(&base, p);
        }
        Self::from_config(config)
    }

    pub fn from_config(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let spec = match &config.spec {
            SpecSource::Inline(s) => s.clone(),
            SpecSource::Path(p) => {
                require_file("spec.path", p)?;
                parse(&read(p)?, p)?
            }
        };
        spec.validate().map_err(|e| CliError::config(format!("spec: {e}")))?;
        if let Some(t) = &config.cost_table {
            require_file("cost_table", t)?;
        }
        if let DatasetSource::Idx(idx) = &config.dataset.source {
            require_file("dataset.source.idx.images", &idx.images)?;
            require_file("dataset.source.idx.labels", &idx.labels)?;
        }
        Ok(Self { config, spec })
    }

    /// Builds and splits the dataset and checks it against the spec.
    pub fn dataset(&self, seeds: &Seeds) -> Result<Dataset> {
        let ds = match &self.config.dataset.source {
            DatasetSource::Synth(s) => synth_dataset(&SynthConfig {
                n: s.n,
                size: s.size,
                classes: s.classes,
                noise: s.noise,
                distractor: s.distractor,
                jitter: s.jitter,
                pattern: s.pattern,
                prototypes: s.prototypes,
                seed: seeds.data,
            })
            .map_err(|e| CliError::config(format!("dataset.source.synth: {e}")))?,
            DatasetSource::Idx(idx) => {
                parse_idx(&read(&idx.images)?, &read(&idx.labels)?).map_err(|e| CliError::config(format!("dataset.source.idx: {e}")))?
            }
        };
        if ds.image_shape() != self.spec.input {
            return Err(CliError::config(format!(
                "dataset: images are {:?} but the spec expects {:?}",
                ds.image_shape(),
                self.spec.input
            )));
        }
        if ds.num_classes > self.spec.num_classes {
            return Err(CliError::config(format!(
                "dataset: {} classes but the spec has {} outputs",
                ds.num_classes, self.spec.num_classes
            )));
        }
        split_per_class(&ds, self.config.dataset.val_per_class, derive_seed(seeds.data, &[tag::EVAL]))
            .map_err(|e| CliError::config(format!("dataset.val_per_class: {e}")))
    }
}
