//! Instance datasets and reproducible MIL bag generation.
//!
//! An [`InstanceDataset`] is a flat pool of equally shaped instances
//! (images or vectors) with optional class labels. [`generate_bags`]
//! and [`generate_ood_bags`] turn a pool into a [`BagDataset`], which only
//! stores instance indices, so manifests stay small and the pixels are
//! never duplicated.

mod adapt;
mod blobs;
mod generate;
mod idx;
mod manifest;
mod mile;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use adapt::adapt_instance;
pub use blobs::make_synthetic_blobs;
pub use generate::{generate_bags, generate_ood_bags};
pub use idx::{read_idx, read_idx_labels};
pub use manifest::MANIFEST_FORMAT_VERSION;
pub use mile::{read_embeddings, write_embeddings};

/// Shape of every instance in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InstanceKind {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Vector {
        dim: usize,
    },
}

impl InstanceKind {
    pub fn shape(&self) -> Vec<usize> {
        match *self {
            InstanceKind::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
            InstanceKind::Vector { dim } => vec![dim],
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }
}

/// A pool of equally shaped instances, stored contiguously as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceDataset {
    source_id: String,
    kind: InstanceKind,
    values: Vec<f32>,
    labels: Option<Vec<u32>>,
}

impl InstanceDataset {
    pub fn new(
        source_id: impl Into<String>,
        kind: InstanceKind,
        values: Vec<f32>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        let per = kind.numel();
        if per == 0 || values.len() % per != 0 {
            return Err(Error::Dimension(format!(
                "{} values do not split into instances of shape {:?}",
                values.len(),
                kind.shape()
            )));
        }
        let n = values.len() / per;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Consistency(format!(
                    "{n} instances but {} labels",
                    l.len()
                )));
            }
        }
        Ok(Self {
            source_id: source_id.into(),
            kind,
            values,
            labels,
        })
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn kind(&self) -> InstanceKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.kind.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn instance_values(&self, i: usize) -> &[f32] {
        let per = self.kind.numel();
        &self.values[i * per..(i + 1) * per]
    }

    pub fn instance<T: Element>(&self, i: usize) -> Tensor<T> {
        let data = self
            .instance_values(i)
            .iter()
            .map(|&v| T::from_f64_lossy(v as f64))
            .collect();
        Tensor::new(self.kind.shape(), data).expect("instance shape is consistent")
    }

    /// Copies out the listed instances (labels follow).
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.kind.numel());
        for &i in indices {
            values.extend_from_slice(self.instance_values(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self {
            source_id: self.source_id.clone(),
            kind: self.kind,
            values,
            labels,
        }
    }

    /// Keeps only instances whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[u32]) -> Result<Self> {
        let labels = self.labels.as_ref().ok_or_else(|| {
            Error::Data(format!(
                "source {} has no labels to filter by class",
                self.source_id
            ))
        })?;
        let keep: Vec<usize> = (0..labels.len())
            .filter(|&i| classes.contains(&labels[i]))
            .collect();
        Ok(self.subset(&keep))
    }

    /// Deterministically splits off `fraction` of the pool as a held-out
    /// shard. Returns `(remainder, held_out)`.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Parameter(format!(
                "holdout fraction must lie in [0, 1), got {fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_hold = (self.len() as f64 * fraction).round() as usize;
        let (hold, rest) = order.split_at(n_hold);
        let (mut hold, mut rest) = (hold.to_vec(), rest.to_vec());
        hold.sort_unstable();
        rest.sort_unstable();
        Ok((self.subset(&rest), self.subset(&hold)))
    }

    /// Indices of the instances carrying `class`.
    pub fn indices_of_class(&self, class: u32) -> Vec<usize> {
        match &self.labels {
            Some(l) => (0..l.len()).filter(|&i| l[i] == class).collect(),
            None => Vec::new(),
        }
    }
}

/// Parameters of the bag sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BagSpec {
    pub positive_class: u32,
    pub negative_classes: Vec<u32>,
    pub n_bags: usize,
    #[serde(default = "defaults::length_mean")]
    pub length_mean: f64,
    #[serde(default = "defaults::length_std")]
    pub length_std: f64,
    #[serde(default = "defaults::pos_frac_min")]
    pub pos_frac_min: f64,
    #[serde(default = "defaults::pos_frac_max")]
    pub pos_frac_max: f64,
    #[serde(default = "defaults::min_length")]
    pub min_length: usize,
    #[serde(default)]
    pub seed: u64,
}

pub(crate) mod defaults {
    pub fn length_mean() -> f64 {
        10.0
    }
    pub fn length_std() -> f64 {
        2.0
    }
    pub fn pos_frac_min() -> f64 {
        0.01
    }
    pub fn pos_frac_max() -> f64 {
        0.40
    }
    pub fn min_length() -> usize {
        2
    }
}

impl BagSpec {
    /// Spec with the default length and positive-fraction laws.
    pub fn new(positive_class: u32, negative_classes: Vec<u32>, n_bags: usize, seed: u64) -> Self {
        Self {
            positive_class,
            negative_classes,
            n_bags,
            length_mean: defaults::length_mean(),
            length_std: defaults::length_std(),
            pos_frac_min: defaults::pos_frac_min(),
            pos_frac_max: defaults::pos_frac_max(),
            min_length: defaults::min_length(),
            seed,
        }
    }

    /// Checks the laws shared by ID and OOD generation.
    pub fn validate_common(&self) -> Result<()> {
        if !(self.length_mean.is_finite() && self.length_std.is_finite() && self.length_std >= 0.0)
        {
            return Err(Error::Parameter(format!(
                "invalid length law N({}, {})",
                self.length_mean, self.length_std
            )));
        }
        if self.min_length == 0 {
            return Err(Error::Parameter("min_length must be at least 1".into()));
        }
        if self.n_bags == 0 {
            return Err(Error::Parameter("n_bags must be positive".into()));
        }
        Ok(())
    }

    /// Full validation for in-distribution bag generation.
    pub fn validate(&self) -> Result<()> {
        self.validate_common()?;
        if !(0.0 < self.pos_frac_min
            && self.pos_frac_min <= self.pos_frac_max
            && self.pos_frac_max < 1.0)
        {
            return Err(Error::Parameter(format!(
                "need 0 < pos_frac_min ≤ pos_frac_max < 1, got [{}, {}]",
                self.pos_frac_min, self.pos_frac_max
            )));
        }
        if self.negative_classes.is_empty() {
            return Err(Error::Parameter("negative_classes is empty".into()));
        }
        if self.negative_classes.contains(&self.positive_class) {
            return Err(Error::Parameter(format!(
                "positive class {} also listed as negative",
                self.positive_class
            )));
        }
        if self.n_bags % 2 != 0 {
            return Err(Error::Parameter(format!(
                "n_bags must be even for a balanced split, got {}",
                self.n_bags
            )));
        }
        Ok(())
    }
}

/// One bag: indices into the source pool plus its MIL label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bag {
    #[serde(rename = "indices")]
    pub instance_indices: Vec<usize>,
    pub label: u8,
    pub n_positive: usize,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instance_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_indices.is_empty()
    }

    /// Materialises the bag's instances from the pool.
    pub fn instances<T: Element>(&self, src: &InstanceDataset) -> Vec<Tensor<T>> {
        self.instance_indices
            .iter()
            .map(|&i| src.instance(i))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Val,
    TestId,
    TestOod,
}

impl Role {
    /// The name used in manifests.
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::TestId => "test_id",
            Role::TestOod => "test_ood",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagDataset {
    pub source_id: String,
    pub role: Role,
    pub spec: BagSpec,
    pub bags: Vec<Bag>,
}

impl BagDataset {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn n_positive_bags(&self) -> usize {
        self.bags.iter().filter(|b| b.label == 1).count()
    }

    /// Checks every bag against the pool it indexes: bounds always; label
    /// soundness and balance for in-distribution roles.
    pub fn validate(&self, src: &InstanceDataset) -> Result<()> {
        let n = src.len();
        for (b, bag) in self.bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::Consistency(format!("bag {b} is empty")));
            }
            if let Some(&bad) = bag.instance_indices.iter().find(|&&i| i >= n) {
                return Err(Error::Bounds(format!(
                    "bag {b} references instance {bad} but source {} has {n}",
                    src.source_id()
                )));
            }
        }
        if self.role == Role::TestOod {
            return match self.bags.iter().position(|b| b.label != 0 || b.n_positive != 0) {
                Some(b) => Err(Error::Consistency(format!(
                    "OOD bag {b} carries an in-distribution label"
                ))),
                None => Ok(()),
            };
        }
        let labels = src.labels().ok_or_else(|| {
            Error::Data(format!(
                "source {} has no labels to validate against",
                src.source_id()
            ))
        })?;
        for (b, bag) in self.bags.iter().enumerate() {
            let classes = bag.instance_indices.iter().map(|&i| labels[i]);
            let n_pos = classes
                .clone()
                .filter(|&c| c == self.spec.positive_class)
                .count();
            if n_pos != bag.n_positive {
                return Err(Error::Consistency(format!(
                    "bag {b} records {} positives but holds {n_pos}",
                    bag.n_positive
                )));
            }
            if (bag.label == 1) != (n_pos >= 1) || bag.label > 1 {
                return Err(Error::Consistency(format!(
                    "bag {b} has label {} with {n_pos} positive instances",
                    bag.label
                )));
            }
            if bag.label == 0 {
                if let Some(c) = classes.clone().find(|c| !self.spec.negative_classes.contains(c)) {
                    return Err(Error::Consistency(format!(
                        "negative bag {b} holds class {c} outside the negative set"
                    )));
                }
            }
        }
        let pos = self.n_positive_bags();
        if pos * 2 != self.len() {
            return Err(Error::Consistency(format!(
                "{} bags are unbalanced: {pos} positive",
                self.len()
            )));
        }
        Ok(())
    }
}
