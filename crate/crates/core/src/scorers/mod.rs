//! Post-hoc bag-level confidence scores. Every score is oriented so that a
//! larger value means "more in-distribution".

mod dice;
mod knn;

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagkit::{adapt_instance, Bag, BagDataset, InstanceDataset, InstanceKind, Role};
use crate::error::{Error, Result};
use crate::model::{BagForward, MilModel};
use crate::tensor::{logsumexp_slice, Element, Tape, Tensor, Var};

pub use dice::{build_dice_mask, masked_logits, score_dice, DiceMask};
pub use knn::{build_knn_bank, distance, score_knn, KnnBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Msp,
    Mls,
    Ebo,
    Odin,
    Dice,
    Knn,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Msp,
        Method::Mls,
        Method::Ebo,
        Method::Odin,
        Method::Dice,
        Method::Knn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Msp => "msp",
            Method::Mls => "mls",
            Method::Ebo => "ebo",
            Method::Odin => "odin",
            Method::Dice => "dice",
            Method::Knn => "knn",
        }
    }

    /// Column heading used in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Msp => "MSP",
            Method::Mls => "MLS",
            Method::Ebo => "EBO",
            Method::Odin => "ODIN",
            Method::Dice => "DICE",
            Method::Knn => "KNN",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown scoring method {s:?}; valid methods: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    pub methods: Vec<Method>,
    pub t_ebo: f64,
    pub t_odin: f64,
    pub eps_odin: f64,
    /// Fraction of classifier weights dropped by DICE.
    pub dice_p: f64,
    pub knn_k: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            t_ebo: 1.0,
            t_odin: 1000.0,
            eps_odin: 0.0014,
            dice_p: 0.7,
            knn_k: 50,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        check_temperature(self.t_ebo).map_err(cfg)?;
        check_temperature(self.t_odin).map_err(cfg)?;
        if !(self.eps_odin >= 0.0 && self.eps_odin.is_finite()) {
            return Err(Error::Config(format!("eps_odin must be ≥ 0, got {}", self.eps_odin)));
        }
        if !(0.0..=1.0).contains(&self.dice_p) {
            return Err(Error::Config(format!("dice_p must lie in [0, 1], got {}", self.dice_p)));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no scoring methods selected".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive, got {t}")))
    }
}

/// Largest class probability of `softmax(z / T)`.
pub fn msp_at<T: Element>(logits: [T; 2], temperature: f64) -> f64 {
    let z = logits.map(|v| v.as_f64() / temperature);
    let m = z[0].max(z[1]);
    1.0 / ((z[0] - m).exp() + (z[1] - m).exp())
}

pub fn score_msp<T: Element>(fwd: &BagForward<T>) -> f64 {
    msp_at(fwd.logits, 1.0)
}

pub fn score_mls<T: Element>(fwd: &BagForward<T>) -> f64 {
    fwd.logits[0].max(fwd.logits[1]).as_f64()
}

/// `T·log Σ exp(z/T)`, the negated free energy.
pub fn score_ebo<T: Element>(fwd: &BagForward<T>, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    Ok(logsumexp_slice(&fwd.logits, T::from_f64_lossy(temperature)).as_f64())
}

/// Gradient of `−log softmax_T(z)[ŷ]` with respect to every model input,
/// where ŷ is the predicted class (ties go to class 0).
pub fn odin_input_gradient<T: Element>(
    model: &MilModel<T>,
    instances: &[Tensor<T>],
    temperature: f64,
) -> Result<Vec<Tensor<T>>> {
    check_temperature(temperature)?;
    let mut tape = Tape::new();
    let params = model.register_params(&mut tape, |_| false);
    let inputs: Vec<Var> = instances.iter().map(|x| tape.param(x.clone())).collect();
    let f = model.forward_vars(&mut tape, &params, &inputs)?;
    let z = tape.value(f.logits);
    let predicted = usize::from(z[1] > z[0]);
    let t = T::from_f64_lossy(temperature);
    let lse = tape.logsumexp(f.logits, t)?;
    let picked = tape.pick(f.logits, predicted)?;
    let diff = tape.sub(lse, picked)?;
    let loss = tape.scale(diff, T::one() / t);
    tape.backward(loss)?;
    inputs
        .iter()
        .zip(instances)
        .map(|(&v, x)| {
            let g = tape.grad(v).expect("inputs are tracked").to_vec();
            Tensor::new(x.shape().to_vec(), g)
        })
        .collect()
}

/// Temperature-scaled MSP after a signed-gradient input perturbation.
pub fn score_odin<T: Element>(model: &MilModel<T>, instances: &[Tensor<T>], temperature: f64, eps: f64) -> Result<f64> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!("ODIN eps must be ≥ 0, got {eps}")));
    }
    let grads = odin_input_gradient(model, instances, temperature)?;
    let step = T::from_f64_lossy(eps);
    let perturbed: Vec<Tensor<T>> = instances
        .iter()
        .zip(&grads)
        .map(|(x, g)| {
            let data = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &d)| {
                    let sign = if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    v - step * sign
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        })
        .collect::<Result<_>>()?;
    Ok(msp_at(model.forward(&perturbed)?.logits, temperature))
}

/// Precomputed training-set statistics needed by DICE and KNN.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub dice: Option<DiceMask>,
    pub knn: Option<KnnBank>,
}

impl Artifacts {
    /// Builds only what `cfg.methods` needs, from non-augmented forwards of
    /// the training bags.
    pub fn build<T: Element>(
        model: &MilModel<T>,
        src: &InstanceDataset,
        train_bags: &BagDataset,
        cfg: &ScorerConfig,
    ) -> Result<Self> {
        let need_dice = cfg.methods.contains(&Method::Dice);
        let need_knn = cfg.methods.contains(&Method::Knn);
        if !(need_dice || need_knn) {
            return Ok(Self::default());
        }
        if train_bags.is_empty() {
            return Err(Error::Data("scoring artifacts need a non-empty training set".into()));
        }
        let pooled = pooled_representations(model, src, train_bags)?;
        let dice = if need_dice {
            Some(dice::mask_from_pooled(model, &pooled, cfg.dice_p)?)
        } else {
            None
        };
        let knn = if need_knn {
            Some(KnnBank::from_rows(&pooled)?)
        } else {
            None
        };
        Ok(Self { dice, knn })
    }
}

/// Pooled representation of every bag, in dataset order.
pub(crate) fn pooled_representations<T: Element>(
    model: &MilModel<T>,
    src: &InstanceDataset,
    bags: &BagDataset,
) -> Result<Vec<Vec<f64>>> {
    bags.bags
        .par_iter()
        .map(|bag| {
            let f = model.forward(&bag.instances::<T>(src))?;
            Ok(f.pooled.iter().map(|v| v.as_f64()).collect())
        })
        .collect()
}

/// Loads a bag's instances in the model's input format. Image instances
/// of OOD bags are resampled to the model's input shape.
pub fn bag_inputs<T: Element>(
    model: &MilModel<T>,
    src: &InstanceDataset,
    bag: &Bag,
    role: Role,
) -> Result<Vec<Tensor<T>>> {
    let raw = bag.instances::<T>(src);
    let target = model.input_shape();
    match (role, src.kind(), target.as_slice()) {
        (Role::TestOod, InstanceKind::Image { .. }, &[c, h, w]) => {
            raw.iter().map(|x| adapt_instance(x, [c, h, w])).collect()
        }
        _ => Ok(raw),
    }
}

/// Scores one bag with every method in `methods`, sharing a single forward.
pub fn score_bag<T: Element>(
    model: &MilModel<T>,
    instances: &[Tensor<T>],
    methods: &[Method],
    cfg: &ScorerConfig,
    artifacts: &Artifacts,
) -> Result<Vec<f64>> {
    let fwd = model.forward(instances)?;
    methods
        .iter()
        .map(|&m| {
            let v = match m {
                Method::Msp => score_msp(&fwd),
                Method::Mls => score_mls(&fwd),
                Method::Ebo => score_ebo(&fwd, cfg.t_ebo)?,
                Method::Odin => score_odin(model, instances, cfg.t_odin, cfg.eps_odin)?,
                Method::Dice => {
                    let mask = artifacts
                        .dice
                        .as_ref()
                        .ok_or_else(|| Error::Config("DICE scoring needs a mask".into()))?;
                    score_dice(model, &fwd.pooled, mask, cfg.t_ebo)?
                }
                Method::Knn => {
                    let bank = artifacts
                        .knn
                        .as_ref()
                        .ok_or_else(|| Error::Config("KNN scoring needs a bank".into()))?;
                    score_knn(&fwd.pooled, bank, cfg.knn_k)?
                }
            };
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Numeric(format!("{m} produced a non-finite confidence {v}")))
            }
        })
        .collect()
}

/// Scores every bag with every method; the result is indexed
/// `[method][bag]` and preserves dataset order.
pub fn score_dataset_methods<T: Element>(
    model: &MilModel<T>,
    src: &InstanceDataset,
    ds: &BagDataset,
    methods: &[Method],
    cfg: &ScorerConfig,
    artifacts: &Artifacts,
) -> Result<Vec<Vec<f64>>> {
    let per_bag: Vec<Vec<f64>> = ds
        .bags
        .par_iter()
        .enumerate()
        .map(|(i, bag)| {
            let x = bag_inputs(model, src, bag, ds.role)?;
            score_bag(model, &x, methods, cfg, artifacts)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("{}[{i}]: {msg}", ds.source_id)),
                    other => other,
                })
        })
        .collect::<Result<_>>()?;
    Ok((0..methods.len())
        .map(|m| per_bag.iter().map(|s| s[m]).collect())
        .collect())
}

pub fn score_dataset<T: Element>(
    model: &MilModel<T>,
    src: &InstanceDataset,
    ds: &BagDataset,
    method: Method,
    cfg: &ScorerConfig,
    artifacts: &Artifacts,
) -> Result<Vec<f64>> {
    Ok(score_dataset_methods(model, src, ds, &[method], cfg, artifacts)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub dataset_id: String,
    pub bag_index: usize,
    pub method: Method,
    pub confidence: f64,
}

pub fn write_scores_csv(path: impl AsRef<Path>, rows: &[ScoreRow]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests;
