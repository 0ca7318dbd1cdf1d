use crate::bagkit::{BagDataset, InstanceDataset};
use crate::error::{Error, Result};
use crate::model::MilModel;
use crate::tensor::{logsumexp_slice, Element, Tape, Tensor};

/// Sparsified classifier weights for energy scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceMask {
    /// Row-major 2×M keep flags.
    pub keep: Vec<bool>,
    /// Mean pooled representation over the training bags.
    pub mean_activation: Vec<f64>,
}

impl DiceMask {
    /// Keeps the `round((1−p)·2M)` weights with the largest contribution
    /// `W[i,j]·m̄[j]`; equal contributions prefer the lower row-major index.
    pub fn from_contributions(weights: &[f64], mean_activation: Vec<f64>, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Parameter(format!("dice_p must lie in [0, 1], got {p}")));
        }
        let m = mean_activation.len();
        if weights.len() != 2 * m {
            return Err(Error::Dimension(format!(
                "classifier has {} weights, mean activation implies {}",
                weights.len(),
                2 * m
            )));
        }
        let contrib: Vec<f64> = weights
            .iter()
            .enumerate()
            .map(|(idx, w)| w * mean_activation[idx % m])
            .collect();
        let mut order: Vec<usize> = (0..contrib.len()).collect();
        order.sort_by(|&a, &b| contrib[b].total_cmp(&contrib[a]).then(a.cmp(&b)));
        let n_keep = ((1.0 - p) * contrib.len() as f64).round() as usize;
        let mut keep = vec![false; contrib.len()];
        for &i in &order[..n_keep] {
            keep[i] = true;
        }
        Ok(Self {
            keep,
            mean_activation,
        })
    }

    pub fn n_kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn masked_weights<T: Element>(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        if w.numel() != self.keep.len() {
            return Err(Error::Dimension(format!(
                "mask covers {} weights, classifier has {}",
                self.keep.len(),
                w.numel()
            )));
        }
        let data = w
            .data()
            .iter()
            .zip(&self.keep)
            .map(|(&v, &k)| if k { v } else { T::zero() })
            .collect();
        Tensor::new(w.shape().to_vec(), data)
    }
}

/// Mean pooled representation over `bags`, then the contribution mask.
pub fn build_dice_mask<T: Element>(
    model: &MilModel<T>,
    src: &InstanceDataset,
    bags: &BagDataset,
    p: f64,
) -> Result<DiceMask> {
    if bags.is_empty() {
        return Err(Error::Data("DICE needs a non-empty training set".into()));
    }
    mask_from_pooled(model, &super::pooled_representations(model, src, bags)?, p)
}

pub(crate) fn mask_from_pooled<T: Element>(model: &MilModel<T>, pooled: &[Vec<f64>], p: f64) -> Result<DiceMask> {
    let mut mean = vec![0.0; model.embed_dim()];
    for row in pooled {
        mean.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
    }
    mean.iter_mut().for_each(|v| *v /= pooled.len() as f64);
    let w = model.parameter("classifier.weight").expect("classifier weight");
    let w: Vec<f64> = w.data().iter().map(|v| v.as_f64()).collect();
    DiceMask::from_contributions(&w, mean, p)
}

/// Energy of the logits recomputed through the masked classifier.
pub fn score_dice<T: Element>(model: &MilModel<T>, pooled: &[T], mask: &DiceMask, temperature: f64) -> Result<f64> {
    super::check_temperature(temperature)?;
    let logits = masked_logits(model, pooled, mask)?;
    Ok(logsumexp_slice(&logits, T::from_f64_lossy(temperature)).as_f64())
}

/// `(mask ⊙ W)·h + b`, evaluated through the same linear kernel as the
/// model head so a full mask reproduces the model's logits exactly.
pub fn masked_logits<T: Element>(model: &MilModel<T>, pooled: &[T], mask: &DiceMask) -> Result<Vec<T>> {
    let w = model.parameter("classifier.weight").expect("classifier weight");
    let b = model.parameter("classifier.bias").expect("classifier bias");
    if pooled.len() != model.embed_dim() {
        return Err(Error::Dimension(format!(
            "pooled vector has length {}, model width is {}",
            pooled.len(),
            model.embed_dim()
        )));
    }
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::vector(pooled.to_vec()));
    let w = tape.constant(mask.masked_weights(w)?);
    let b = tape.constant(b.clone());
    let z = tape.linear(h, w, Some(b))?;
    Ok(tape.value(z).to_vec())
}
