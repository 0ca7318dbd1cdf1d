use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Bag, BagDataset, BagSpec, InstanceDataset, Role};
use crate::error::{Error, Result};

// Independent ChaCha streams per sampling purpose, so that e.g. the bag
// lengths under a seed do not depend on how many picks came before.
const STREAM_LENGTHS: u64 = 0;
const STREAM_FRACTIONS: u64 = 1;
const STREAM_PICKS: u64 = 2;
const STREAM_SHUFFLES: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `n` bag lengths: rounded Normal samples clamped below at `min_length`.
pub(crate) fn sample_lengths(spec: &BagSpec, n: usize) -> Result<Vec<usize>> {
    let normal = Normal::new(spec.length_mean, spec.length_std)
        .map_err(|e| Error::Parameter(format!("bag length law: {e}")))?;
    let mut rng = stream(spec.seed, STREAM_LENGTHS);
    Ok((0..n)
        .map(|_| {
            let l = normal.sample(&mut rng).round();
            if l < spec.min_length as f64 {
                spec.min_length
            } else {
                l as usize
            }
        })
        .collect())
}

/// Samples a balanced in-distribution bag dataset.
///
/// Negative bags draw every instance uniformly (with replacement) from the
/// negative classes. A positive bag of length `L` holds
/// `max(1, round(u·L))` positives with `u ~ U[pos_frac_min, pos_frac_max]`,
/// placed at uniformly shuffled positions.
pub fn generate_bags(src: &InstanceDataset, spec: &BagSpec, role: Role) -> Result<BagDataset> {
    spec.validate()?;
    if role == Role::TestOod {
        return Err(Error::Parameter(
            "use generate_ood_bags for OOD bag datasets".into(),
        ));
    }
    let labels = src.labels().ok_or_else(|| {
        Error::Data(format!(
            "source {} has no labels; cannot build labelled bags",
            src.source_id()
        ))
    })?;
    let positives = src.indices_of_class(spec.positive_class);
    if positives.is_empty() {
        return Err(Error::Data(format!(
            "source {} has no instances of positive class {}",
            src.source_id(),
            spec.positive_class
        )));
    }
    for &c in &spec.negative_classes {
        if !labels.contains(&c) {
            return Err(Error::Data(format!(
                "source {} has no instances of negative class {c}",
                src.source_id()
            )));
        }
    }
    let negatives: Vec<usize> = (0..labels.len())
        .filter(|&i| spec.negative_classes.contains(&labels[i]))
        .collect();

    let lengths = sample_lengths(spec, spec.n_bags)?;
    let mut fractions = stream(spec.seed, STREAM_FRACTIONS);
    let mut picks = stream(spec.seed, STREAM_PICKS);
    let mut shuffles = stream(spec.seed, STREAM_SHUFFLES);

    let half = spec.n_bags / 2;
    let mut order: Vec<u8> = std::iter::repeat_n(1u8, half)
        .chain(std::iter::repeat_n(0u8, half))
        .collect();
    order.shuffle(&mut shuffles);

    let mut bags = Vec::with_capacity(spec.n_bags);
    for (&label, &len) in order.iter().zip(&lengths) {
        let n_pos = if label == 1 {
            let u = fractions.random_range(spec.pos_frac_min..=spec.pos_frac_max);
            ((u * len as f64).round() as usize).clamp(1, len)
        } else {
            0
        };
        let mut slots: Vec<bool> = (0..len).map(|i| i < n_pos).collect();
        if n_pos > 0 {
            slots.shuffle(&mut shuffles);
        }
        let instance_indices = slots
            .iter()
            .map(|&is_pos| {
                let pool = if is_pos { &positives } else { &negatives };
                pool[picks.random_range(0..pool.len())]
            })
            .collect();
        bags.push(Bag {
            instance_indices,
            label,
            n_positive: n_pos,
        });
    }
    Ok(BagDataset {
        source_id: src.source_id().to_string(),
        role,
        spec: spec.clone(),
        bags,
    })
}

/// Samples OOD bags: same length law as [`generate_bags`] under the same
/// seed, instances drawn uniformly from the whole OOD pool, label 0.
pub fn generate_ood_bags(src: &InstanceDataset, spec: &BagSpec) -> Result<BagDataset> {
    spec.validate_common()?;
    if src.is_empty() {
        return Err(Error::Data(format!(
            "OOD source {} is empty",
            src.source_id()
        )));
    }
    let lengths = sample_lengths(spec, spec.n_bags)?;
    let mut picks = stream(spec.seed, STREAM_PICKS);
    let n = src.len();
    let bags = lengths
        .iter()
        .map(|&len| Bag {
            instance_indices: (0..len).map(|_| picks.random_range(0..n)).collect(),
            label: 0,
            n_positive: 0,
        })
        .collect();
    Ok(BagDataset {
        source_id: src.source_id().to_string(),
        role: Role::TestOod,
        spec: spec.clone(),
        bags,
    })
}
