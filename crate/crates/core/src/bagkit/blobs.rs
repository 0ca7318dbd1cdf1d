use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{InstanceDataset, InstanceKind};
use crate::error::{Error, Result};

/// Isotropic unit-variance Gaussian blobs; class `c` is centred at
/// `separation · e_(c mod dim)`. Instances are laid out class by class.
pub fn make_synthetic_blobs(
    n_classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<InstanceDataset> {
    if n_classes < 2 || dim < 2 {
        return Err(Error::Parameter(format!(
            "blobs need n_classes ≥ 2 and dim ≥ 2, got {n_classes} and {dim}"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Parameter(format!(
            "separation must be finite and non-negative, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    for c in 0..n_classes {
        for _ in 0..n_per_class {
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                let centre = if j == c % dim { separation } else { 0.0 };
                values.push((centre + z) as f32);
            }
            labels.push(c as u32);
        }
    }
    InstanceDataset::new(
        format!("blobs{n_classes}x{dim}"),
        InstanceKind::Vector { dim },
        values,
        Some(labels),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let a = make_synthetic_blobs(3, 20, 4, 2.0, 9).unwrap();
        let b = make_synthetic_blobs(3, 20, 4, 2.0, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_synthetic_blobs(3, 20, 4, 2.0, 10).unwrap());
    }

    #[test]
    fn nearest_centroid_separates_well_separated_blobs() {
        let (k, d, sep) = (3usize, 4usize, 10.0f64);
        let fresh = make_synthetic_blobs(k, 500, d, sep, 1234).unwrap();
        let centre = |c: usize| -> Vec<f64> {
            (0..d).map(|j| if j == c % d { sep } else { 0.0 }).collect()
        };
        let correct = (0..fresh.len())
            .filter(|&i| {
                let x = fresh.instance_values(i);
                let best = (0..k)
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(centre(a)).map(|(v, c)| (*v as f64 - c).powi(2)).sum();
                        let db: f64 = x.iter().zip(centre(b)).map(|(v, c)| (*v as f64 - c).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best as u32 == fresh.label(i).unwrap()
            })
            .count();
        assert!(correct as f64 / fresh.len() as f64 > 0.99);
    }

    #[test]
    fn zero_separation_shares_one_distribution() {
        let ds = make_synthetic_blobs(2, 4000, 2, 0.0, 3).unwrap();
        let mean = |c: u32, j: usize| -> f64 {
            let idx = ds.indices_of_class(c);
            idx.iter().map(|&i| ds.instance_values(i)[j] as f64).sum::<f64>() / idx.len() as f64
        };
        for j in 0..2 {
            assert!((mean(0, j) - mean(1, j)).abs() < 0.1);
        }
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(make_synthetic_blobs(1, 5, 4, 1.0, 0).is_err());
        assert!(make_synthetic_blobs(2, 5, 1, 1.0, 0).is_err());
    }
}
