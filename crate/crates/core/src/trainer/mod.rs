//! Bag-level training with AdamW, instance augmentation and best-validation
//! checkpoint selection.

mod adamw;
mod augment;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagkit::{BagDataset, InstanceDataset};
use crate::error::{Error, Result};
use crate::model::{predict_from_logits, MilModel};
use crate::tensor::{DType, Element, Tape, Var};

pub use adamw::AdamW;
pub use augment::{augment, AugmentConfig, Augmentation};

const SHUFFLE_STREAM: u64 = 0;
const AUGMENT_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 1e-5,
            batch_size: 1,
            epochs: 20,
            augment: AugmentConfig::default(),
            seed: 0,
            dtype: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!(
                "batch_size must be 1, got {}",
                self.batch_size
            )));
        }
        for (name, p) in [("hflip_p", self.augment.hflip_p), ("vflip_p", self.augment.vflip_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Best epoch seen so far (ties keep the earliest).
    pub best_epoch: usize,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub wall_clock_seconds: f64,
}

impl TrainLog {
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.epochs {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

fn loss_of<T: Element>(logits: [T; 2], label: u8) -> f64 {
    let (z0, z1) = (logits[0].as_f64(), logits[1].as_f64());
    let m = z0.max(z1);
    let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
    lse - if label == 1 { z1 } else { z0 }
}

/// Accuracy and mean cross-entropy without augmentation. Bags are scored in
/// parallel; the reduction is sequential so results are reproducible.
pub fn evaluate<T: Element>(model: &MilModel<T>, src: &InstanceDataset, ds: &BagDataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty bag dataset".into()));
    }
    let per_bag: Vec<(bool, f64)> = ds
        .bags
        .par_iter()
        .map(|bag| {
            let f = model.forward(&bag.instances::<T>(src))?;
            let hit = predict_from_logits(f.logits).class == bag.label;
            Ok((hit, loss_of(f.logits, bag.label)))
        })
        .collect::<Result<_>>()?;
    let n = per_bag.len() as f64;
    Ok(Evaluation {
        accuracy: per_bag.iter().filter(|(hit, _)| *hit).count() as f64 / n,
        mean_loss: per_bag.iter().map(|(_, l)| l).sum::<f64>() / n,
    })
}

/// Trains with per-bag updates and returns the parameters from the epoch
/// with the highest validation accuracy.
pub fn train<T: Element>(
    model: MilModel<T>,
    src: &InstanceDataset,
    train_set: &BagDataset,
    val_set: &BagDataset,
    cfg: &TrainConfig,
) -> Result<(MilModel<T>, TrainLog)> {
    train_with_progress(model, src, train_set, val_set, cfg, |_| {})
}

pub fn train_with_progress<T: Element>(
    mut model: MilModel<T>,
    src: &InstanceDataset,
    train_set: &BagDataset,
    val_set: &BagDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MilModel<T>, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    train_set.validate(src)?;
    val_set.validate(src)?;

    let frozen = model.config().freeze_embedder;
    let trainable = |name: &str| !(frozen && MilModel::<T>::is_embedder_param(name));
    let mut opt = AdamW::<T>::new(
        cfg.learning_rate,
        cfg.weight_decay,
        model.parameters().iter().map(|(_, t)| t.numel()),
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(AUGMENT_STREAM);

    let start = Instant::now();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, MilModel<T>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for &b in &order {
            let bag = &train_set.bags[b];
            let mut tape = Tape::new();
            let params = model.register_params(&mut tape, trainable);
            let inputs: Vec<Var> = bag
                .instance_indices
                .iter()
                .map(|&i| tape.constant(augment(&src.instance::<T>(i), &cfg.augment, &mut aug_rng)))
                .collect();
            let f = model.forward_vars(&mut tape, &params, &inputs)?;
            let loss = MilModel::cross_entropy(&mut tape, f.logits, bag.label)?;
            let value = tape.value(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} at epoch {epoch}, bag {b}"
                )));
            }
            total += value;
            tape.backward(loss)?;
            opt.begin_step();
            for (slot, (&var, (name, p))) in params.iter().zip(model.parameters_mut()).enumerate() {
                if !trainable(name) {
                    continue;
                }
                let g = tape.grad(var).expect("trainable parameter has a gradient");
                opt.update(slot, p.data_mut(), g);
            }
        }
        let val = evaluate(&model, src, val_set)?;
        if best.as_ref().is_none_or(|(acc, _)| val.accuracy > *acc) {
            best = Some((val.accuracy, model.clone()));
            log.best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / order.len() as f64,
            val_loss: val.mean_loss,
            val_accuracy: val.accuracy,
            best_epoch: log.best_epoch,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    log.wall_clock_seconds = start.elapsed().as_secs_f64();
    // With zero epochs the initial parameters are returned unchanged.
    let best_model = best.map_or(model, |(_, m)| m);
    Ok((best_model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagkit::{generate_bags, make_synthetic_blobs, BagSpec, Role};
    use crate::model::{EmbedderConfig, ModelConfig};

    fn blob_setup(n_bags: usize) -> (InstanceDataset, BagDataset, BagDataset) {
        let src = make_synthetic_blobs(3, 60, 4, 3.0, 2).unwrap();
        let mut spec = BagSpec::new(0, vec![1, 2], n_bags, 5);
        spec.length_mean = 6.0;
        let tr = generate_bags(&src, &spec, Role::Train).unwrap();
        spec.seed = 6;
        let va = generate_bags(&src, &spec, Role::Val).unwrap();
        (src, tr, va)
    }

    fn mlp(seed: u64) -> MilModel<f64> {
        let cfg = ModelConfig::new(
            EmbedderConfig::Mlp {
                input_dim: 4,
                hidden: vec![16],
                output_dim: 8,
            },
            8,
        );
        MilModel::init(cfg, seed).unwrap()
    }

    fn quick_cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs,
            augment: AugmentConfig::none(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn overfits_sixteen_separable_bags() {
        let (src, tr, _) = blob_setup(16);
        let (model, log) = train(mlp(1), &src, &tr, &tr, &quick_cfg(200, 1e-3)).unwrap();
        let e = evaluate(&model, &src, &tr).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert!(log.epochs.last().unwrap().train_loss < 0.05, "{:?}", log.epochs.last());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (src, tr, va) = blob_setup(8);
        let m = mlp(2);
        let (out, _) = train(m.clone(), &src, &tr, &va, &quick_cfg(2, 0.0)).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn same_seed_gives_same_log() {
        let (src, tr, va) = blob_setup(8);
        let cfg = TrainConfig {
            augment: AugmentConfig::default(),
            ..quick_cfg(3, 1e-3)
        };
        let strip = |log: TrainLog| -> Vec<(f64, f64, f64, usize)> {
            log.epochs
                .into_iter()
                .map(|r| (r.train_loss, r.val_loss, r.val_accuracy, r.best_epoch))
                .collect()
        };
        let (a, la) = train(mlp(3), &src, &tr, &va, &cfg).unwrap();
        let (b, lb) = train(mlp(3), &src, &tr, &va, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(strip(la), strip(lb));
    }

    #[test]
    fn frozen_embedder_keeps_its_weights() {
        let (src, tr, va) = blob_setup(8);
        let mut m = mlp(4);
        let mut cfg = m.config().clone();
        cfg.freeze_embedder = true;
        m = MilModel::init(cfg, 4).unwrap();
        let (out, _) = train(m.clone(), &src, &tr, &va, &quick_cfg(3, 1e-2)).unwrap();
        for ((name, before), (_, after)) in m.parameters().iter().zip(out.parameters()) {
            if name.starts_with("embedder.") {
                assert_eq!(before, after, "{name}");
            }
        }
        assert_ne!(m.parameter("classifier.weight"), out.parameter("classifier.weight"));
    }

    #[test]
    fn evaluate_matches_predict_loop_and_is_repeatable() {
        let (src, _, va) = blob_setup(10);
        let m = mlp(5);
        let e = evaluate(&m, &src, &va).unwrap();
        let hits = va
            .bags
            .iter()
            .filter(|b| m.predict(&b.instances::<f64>(&src)).unwrap().class == b.label)
            .count();
        assert_eq!(e.accuracy, hits as f64 / va.len() as f64);
        assert_eq!(evaluate(&m, &src, &va).unwrap(), e);
    }

    #[test]
    fn constant_predictor_scores_half_on_balanced_set() {
        let (src, _, va) = blob_setup(10);
        let mut m = mlp(6);
        for (name, t) in m.parameters_mut() {
            if name.starts_with("classifier") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        assert_eq!(evaluate(&m, &src, &va).unwrap().accuracy, 0.5);
    }

    #[test]
    fn rejects_bad_configs() {
        let (src, tr, va) = blob_setup(4);
        for cfg in [
            TrainConfig { batch_size: 4, ..TrainConfig::default() },
            TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
        ] {
            assert!(matches!(train(mlp(0), &src, &tr, &va, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (src, tr, va) = blob_setup(4);
        let m = mlp(8);
        let (out, log) = train(m.clone(), &src, &tr, &va, &quick_cfg(0, 1e-3)).unwrap();
        assert_eq!(out, m);
        assert!(log.epochs.is_empty());
        assert_eq!(log.best_epoch, 0);
    }

    #[test]
    fn log_is_one_json_object_per_epoch() {
        let (src, tr, va) = blob_setup(4);
        let (_, log) = train(mlp(7), &src, &tr, &va, &quick_cfg(3, 1e-3)).unwrap();
        let text = log.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let r: EpochRecord = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(r.epoch, 3);
        assert_eq!(r.best_epoch, log.best_epoch);
    }
}
