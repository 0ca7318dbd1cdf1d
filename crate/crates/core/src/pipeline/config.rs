use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bagkit::{
    make_synthetic_blobs, read_embeddings, read_idx, BagSpec, InstanceDataset, Role,
};
use crate::bagkit::defaults as laws;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scorers::ScorerConfig;
use crate::trainer::TrainConfig;

/// One experiment: data sources, bag sampling, model, training and scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub bags: BagsConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scorers: ScorerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Pool for training and validation bags.
    pub id_source: SourceConfig,
    /// Pool for ID test bags. Without it a shard of `id_source` is held out.
    #[serde(default)]
    pub id_test_source: Option<SourceConfig>,
    pub ood_sources: Vec<SourceConfig>,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_holdout() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SourceConfig {
    Idx {
        name: String,
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        classes: Option<Vec<u32>>,
    },
    Mile {
        name: String,
        path: PathBuf,
        #[serde(default)]
        classes: Option<Vec<u32>>,
    },
    Blobs {
        name: String,
        n_classes: usize,
        n_per_class: usize,
        dim: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        classes: Option<Vec<u32>>,
    },
}

impl SourceConfig {
    pub fn name(&self) -> &str {
        match self {
            Self::Idx { name, .. } | Self::Mile { name, .. } | Self::Blobs { name, .. } => name,
        }
    }

    fn classes(&self) -> Option<&[u32]> {
        match self {
            Self::Idx { classes, .. } | Self::Mile { classes, .. } | Self::Blobs { classes, .. } => {
                classes.as_deref()
            }
        }
    }

    fn files_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            Self::Idx { images, labels, .. } => {
                let mut v = vec![images];
                v.extend(labels.as_mut());
                v
            }
            Self::Mile { path, .. } => vec![path],
            Self::Blobs { .. } => Vec::new(),
        }
    }

    /// Reads the pool, optionally restricted to `classes`, named after the
    /// source. Missing files are reported as configuration errors.
    pub fn load(&self) -> Result<InstanceDataset> {
        for f in self.clone().files_mut() {
            if !f.is_file() {
                return Err(Error::Config(format!(
                    "source {:?}: file not found: {}",
                    self.name(),
                    f.display()
                )));
            }
        }
        let pool = match self {
            Self::Idx { images, labels, .. } => read_idx(images, labels.as_deref())?,
            Self::Mile { path, .. } => read_embeddings(path)?,
            Self::Blobs {
                n_classes,
                n_per_class,
                dim,
                separation,
                seed,
                ..
            } => make_synthetic_blobs(*n_classes, *n_per_class, *dim, *separation, *seed)?,
        };
        let pool = match self.classes() {
            Some(c) => pool.filter_classes(c)?,
            None => pool,
        };
        if pool.is_empty() {
            return Err(Error::Data(format!("source {:?} has no instances", self.name())));
        }
        Ok(pool.with_source_id(self.name()))
    }
}

/// Bag sampling laws shared by every split, plus per-split counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BagsConfig {
    pub positive_class: u32,
    pub negative_classes: Vec<u32>,
    #[serde(default = "laws::length_mean")]
    pub length_mean: f64,
    #[serde(default = "laws::length_std")]
    pub length_std: f64,
    #[serde(default = "laws::pos_frac_min")]
    pub pos_frac_min: f64,
    #[serde(default = "laws::pos_frac_max")]
    pub pos_frac_max: f64,
    #[serde(default = "laws::min_length")]
    pub min_length: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_n_test")]
    pub n_ood: usize,
}

fn default_n_train() -> usize {
    20_000
}
fn default_n_val() -> usize {
    4_000
}
fn default_n_test() -> usize {
    400
}

/// Seed offsets that keep every split's sampler independent.
const VAL_SEED_OFFSET: u64 = 1;
const TEST_SEED_OFFSET: u64 = 2;
const OOD_SEED_OFFSET: u64 = 100;
const HOLDOUT_SEED_OFFSET: u64 = 7919;

impl BagsConfig {
    fn spec(&self, n_bags: usize, seed: u64) -> BagSpec {
        BagSpec {
            positive_class: self.positive_class,
            negative_classes: self.negative_classes.clone(),
            n_bags,
            length_mean: self.length_mean,
            length_std: self.length_std,
            pos_frac_min: self.pos_frac_min,
            pos_frac_max: self.pos_frac_max,
            min_length: self.min_length,
            seed,
        }
    }
}

impl RunConfig {
    /// Parses and validates a JSON document. Errors carry the JSON path of
    /// the offending key. The training seed follows the top-level `seed`.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("config at {}: {}", e.path(), e.inner())))?;
        let raw: serde_json::Value = serde_json::from_str(text).expect("already parsed once");
        if let Some(v) = raw.pointer("/train/seed") {
            if v.as_u64() != Some(cfg.seed) {
                return Err(Error::Config(format!(
                    "config at train.seed: {v} differs from the top-level seed {}; set only the top-level seed",
                    cfg.seed
                )));
            }
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    /// Re-roots relative dataset paths under `root`.
    pub fn resolve_data_paths(&mut self, root: &Path) {
        let d = &mut self.data;
        let sources = std::iter::once(&mut d.id_source)
            .chain(d.id_test_source.iter_mut())
            .chain(d.ood_sources.iter_mut());
        for src in sources {
            for f in src.files_mut() {
                if f.is_relative() {
                    *f = root.join(&*f);
                }
            }
        }
    }

    /// Applies the top-level seed to training and re-validates.
    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.train.seed = seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |msg: String| Err(Error::Config(msg));
        self.model.validate()?;
        self.train.validate()?;
        self.scorers.validate()?;
        let b = &self.bags;
        for (name, n) in [("n_train", b.n_train), ("n_val", b.n_val), ("n_test", b.n_test)] {
            if n == 0 || n % 2 != 0 {
                return cfg_err(format!("bags.{name} must be positive and even, got {n}"));
            }
        }
        if b.n_ood == 0 {
            return cfg_err("bags.n_ood must be positive".into());
        }
        self.train_spec()
            .validate()
            .map_err(|e| Error::Config(format!("bags: {e}")))?;
        if self.scorers.knn_k > b.n_train {
            return cfg_err(format!(
                "scorers.knn_k = {} exceeds the {} training bags that form the KNN bank",
                self.scorers.knn_k, b.n_train
            ));
        }
        if !(0.0 < self.data.holdout_fraction && self.data.holdout_fraction < 1.0) {
            return cfg_err(format!(
                "data.holdout_fraction must lie in (0, 1), got {}",
                self.data.holdout_fraction
            ));
        }
        if self.data.ood_sources.is_empty() {
            return cfg_err("data.ood_sources is empty".into());
        }
        let id_name = self.data.id_source.name();
        if let Some(t) = &self.data.id_test_source {
            if t.name() != id_name {
                return cfg_err(format!(
                    "data.id_test_source is named {:?} but must share the ID name {id_name:?}",
                    t.name()
                ));
            }
        }
        let mut names = BTreeSet::from([id_name]);
        for s in &self.data.ood_sources {
            let ok = !s.name().is_empty()
                && s.name().chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !ok {
                return cfg_err(format!(
                    "OOD source name {:?} must be non-empty ASCII letters, digits, '-' or '_'",
                    s.name()
                ));
            }
            if !names.insert(s.name()) {
                return cfg_err(format!("source name {:?} is used twice", s.name()));
            }
        }
        Ok(())
    }

    pub fn train_spec(&self) -> BagSpec {
        self.bags.spec(self.bags.n_train, self.seed)
    }

    pub fn val_spec(&self) -> BagSpec {
        self.bags.spec(self.bags.n_val, self.seed.wrapping_add(VAL_SEED_OFFSET))
    }

    pub fn test_spec(&self) -> BagSpec {
        self.bags.spec(self.bags.n_test, self.seed.wrapping_add(TEST_SEED_OFFSET))
    }

    pub fn ood_spec(&self, j: usize) -> BagSpec {
        let seed = self.seed.wrapping_add(OOD_SEED_OFFSET + j as u64);
        self.bags.spec(self.bags.n_ood, seed)
    }

    /// Loads every pool the run needs.
    pub fn load_pools(&self) -> Result<Pools> {
        let id = self.data.id_source.load()?;
        let (train, test) = match &self.data.id_test_source {
            Some(t) => (id, t.load()?),
            None => id.split_holdout(
                self.data.holdout_fraction,
                self.seed.wrapping_add(HOLDOUT_SEED_OFFSET),
            )?,
        };
        let ood = self
            .data
            .ood_sources
            .iter()
            .map(SourceConfig::load)
            .collect::<Result<_>>()?;
        Ok(Pools { train, test, ood })
    }
}

/// Instance pools, one per bag role.
#[derive(Debug, Clone)]
pub struct Pools {
    /// Train and validation bags draw from here.
    pub train: InstanceDataset,
    pub test: InstanceDataset,
    pub ood: Vec<InstanceDataset>,
}

impl Pools {
    pub fn for_role(&self, role: Role, ood_index: usize) -> &InstanceDataset {
        match role {
            Role::Train | Role::Val => &self.train,
            Role::TestId => &self.test,
            Role::TestOod => &self.ood[ood_index],
        }
    }
}
