use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::bagkit::{generate_bags, make_synthetic_blobs, BagSpec};
use crate::model::{EmbedderConfig, ModelConfig};
use crate::tensor::gradient_check_coords;

fn fwd(z0: f64, z1: f64) -> BagForward<f64> {
    BagForward {
        embeddings: Tensor::zeros([1, 1]),
        attention: vec![1.0],
        pooled: vec![0.0],
        logits: [z0, z1],
    }
}

fn identity_model(m: usize, seed: u64) -> MilModel<f64> {
    MilModel::init(ModelConfig::new(EmbedderConfig::Identity { dim: m }, 4), seed).unwrap()
}

fn random_bag(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    (0..n)
        .map(|_| Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect()
}

#[test]
fn msp_examples() {
    assert_eq!(score_msp(&fwd(0.0, 0.0)), 0.5);
    let e2 = 2f64.exp();
    assert!((score_msp(&fwd(2.0, 0.0)) - e2 / (1.0 + e2)).abs() < 1e-15);
    assert!((score_msp(&fwd(2.0, 0.0)) - score_msp(&fwd(5.0, 3.0))).abs() < 1e-15);
}

#[test]
fn mls_and_ebo_examples() {
    assert_eq!(score_mls(&fwd(2.0, 0.0)), 2.0);
    assert_eq!(score_mls(&fwd(-1.0, -5.0)), -1.0);
    assert_eq!(score_mls(&fwd(-5.0, -1.0)), -1.0);
    assert!((score_ebo(&fwd(0.0, 0.0), 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!((score_ebo(&fwd(2.0, 0.0), 1.0).unwrap() - (1.0 + 2f64.exp()).ln()).abs() < 1e-14);
    for t in [0.01, 1.0, 100.0] {
        assert!(score_ebo(&fwd(0.3, -2.0), t).unwrap() >= score_mls(&fwd(0.3, -2.0)));
    }
    assert!(matches!(score_ebo(&fwd(0.0, 0.0), 0.0), Err(Error::Parameter(_))));
}

#[test]
fn odin_without_perturbation_is_msp() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = identity_model(5, 1);
    for _ in 0..20 {
        let bag = random_bag(rng.random_range(1..6), 5, &mut rng);
        let f = model.forward(&bag).unwrap();
        assert_eq!(score_odin(&model, &bag, 1.0, 0.0).unwrap(), score_msp(&f));
        assert_eq!(score_odin(&model, &bag, 7.0, 0.0).unwrap(), msp_at(f.logits, 7.0));
    }
    assert!(matches!(score_odin(&model, &random_bag(2, 5, &mut rng), 1.0, -0.1), Err(Error::Parameter(_))));
}

#[test]
fn odin_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = identity_model(3, 2);
    for (_, t) in model.parameters_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let bag = random_bag(3, 3, &mut rng);
    let temperature = 2.0;
    let grads = odin_input_gradient(&model, &bag, temperature).unwrap();
    let predicted = {
        let z = model.forward(&bag).unwrap().logits;
        usize::from(z[1] > z[0])
    };
    for (k, g) in grads.iter().enumerate() {
        let err = gradient_check_coords(
            |tape, v| {
                let params = model.register_params(tape, |_| false);
                let inputs: Vec<Var> = bag
                    .iter()
                    .enumerate()
                    .map(|(i, x)| if i == k { v } else { tape.constant(x.clone()) })
                    .collect();
                let f = model.forward_vars(tape, &params, &inputs)?;
                let lse = tape.logsumexp(f.logits, temperature)?;
                let pick = tape.pick(f.logits, predicted)?;
                let d = tape.sub(lse, pick)?;
                Ok(tape.scale(d, 1.0 / temperature))
            },
            &bag[k],
            1e-6,
            &[0, 1, 2],
        )
        .unwrap();
        assert!(err < 1e-4, "instance {k}: {err}");
        assert_eq!(g.shape(), bag[k].shape());
    }
}

#[test]
fn dice_mask_worked_example() {
    let w = [1.0, 2.0, 3.0, 4.0];
    let mask = DiceMask::from_contributions(&w, vec![1.0, 1.0], 0.5).unwrap();
    assert_eq!(mask.keep, vec![false, false, true, true]);
    assert!(DiceMask::from_contributions(&w, vec![1.0, 1.0], 0.0).unwrap().keep.iter().all(|&k| k));
    assert!(DiceMask::from_contributions(&w, vec![1.0, 1.0], 1.0).unwrap().keep.iter().all(|&k| !k));
    // equal contributions keep the lower row-major index
    let tie = DiceMask::from_contributions(&[1.0, 1.0, 1.0, 1.0], vec![1.0, 1.0], 0.5).unwrap();
    assert_eq!(tie.keep, vec![true, true, false, false]);

    let mut model = identity_model(2, 0);
    for (name, t) in model.parameters_mut() {
        match name.as_str() {
            "classifier.weight" => t.data_mut().copy_from_slice(&w),
            "classifier.bias" => t.data_mut().fill(0.0),
            _ => {}
        }
    }
    let z = masked_logits(&model, &[1.0, 1.0], &mask).unwrap();
    assert_eq!(z, vec![0.0, 7.0]);
    let s = score_dice(&model, &[1.0, 1.0], &mask, 1.0).unwrap();
    assert!((s - (1.0 + 7f64.exp()).ln()).abs() < 1e-12);
    assert!((s - 7.0009).abs() < 1e-4);
}

#[test]
fn dice_without_pruning_is_ebo_and_full_pruning_is_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = identity_model(6, 3);
    let mean: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
    let w: Vec<f64> = model.parameter("classifier.weight").unwrap().data().to_vec();
    let keep_all = DiceMask::from_contributions(&w, mean.clone(), 0.0).unwrap();
    let drop_all = DiceMask::from_contributions(&w, mean, 1.0).unwrap();
    let mut constant = None;
    for _ in 0..20 {
        let bag = random_bag(rng.random_range(1..5), 6, &mut rng);
        let f = model.forward(&bag).unwrap();
        assert_eq!(score_dice(&model, &f.pooled, &keep_all, 1.0).unwrap(), score_ebo(&f, 1.0).unwrap());
        let c = score_dice(&model, &f.pooled, &drop_all, 1.0).unwrap();
        assert_eq!(*constant.get_or_insert(c), c);
    }
}

#[test]
fn knn_examples() {
    let bank = KnnBank::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let s1 = score_knn(&[0.6, 0.8], &bank, 1).unwrap();
    let s2 = score_knn(&[0.6, 0.8], &bank, 2).unwrap();
    assert!((s1 + 0.4f64.sqrt()).abs() < 1e-12);
    assert!((s2 + 0.8f64.sqrt()).abs() < 1e-12);
    assert_eq!(score_knn(&[0.0, 3.0], &bank, 1).unwrap(), 0.0);
    assert!(matches!(score_knn(&[1.0, 1.0], &bank, 3), Err(Error::Parameter(_))));
    assert!(matches!(score_knn(&[1.0, 1.0], &bank, 0), Err(Error::Parameter(_))));
    assert!(matches!(KnnBank::from_rows(&[vec![0.0, 0.0]]), Err(Error::Data(_))));
}

#[test]
fn knn_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for &b in &[1usize, 7, 120, 500] {
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let bank = KnnBank::from_rows(&rows).unwrap();
        for i in 0..b {
            let n = bank.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        for _ in 0..25 {
            let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = rng.random_range(1..=b);
            let qn = knn::normalize(&q).unwrap();
            let mut all: Vec<f64> = (0..b).map(|i| distance(&qn, bank.row(i))).collect();
            all.sort_by(f64::total_cmp);
            let s = score_knn(&q, &bank, k).unwrap();
            assert_eq!(s, -all[k - 1]);
            assert!((-2.0..=0.0).contains(&s));
        }
    }
}

fn blob_fixture() -> (InstanceDataset, BagDataset, BagDataset, MilModel<f64>) {
    let src = make_synthetic_blobs(3, 50, 4, 2.0, 1).unwrap();
    let mut spec = BagSpec::new(0, vec![1, 2], 12, 2);
    let train = generate_bags(&src, &spec, Role::Train).unwrap();
    spec.seed = 3;
    let test = generate_bags(&src, &spec, Role::TestId).unwrap();
    (src, train, test, identity_model(4, 9))
}

#[test]
fn bank_rows_match_pooled_forward() {
    let (src, train, _, model) = blob_fixture();
    let bank = build_knn_bank(&model, &src, &train).unwrap();
    assert_eq!(bank.len(), train.len());
    for (i, bag) in train.bags.iter().enumerate() {
        let h = model.forward(&bag.instances::<f64>(&src)).unwrap().pooled;
        let want = knn::normalize(&h).unwrap();
        assert_eq!(bank.row(i), want.as_slice());
    }
    let dup = BagDataset {
        bags: vec![train.bags[0].clone(), train.bags[0].clone()],
        ..train.clone()
    };
    let bank = build_knn_bank(&model, &src, &dup).unwrap();
    assert_eq!(bank.row(0), bank.row(1));
}

#[test]
fn dice_mask_is_reproducible_and_sized() {
    let (src, train, _, model) = blob_fixture();
    let a = build_dice_mask(&model, &src, &train, 0.7).unwrap();
    let b = build_dice_mask(&model, &src, &train, 0.7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_kept(), (0.3f64 * 8.0).round() as usize);
    let empty = BagDataset { bags: vec![], ..train };
    assert!(build_dice_mask(&model, &src, &empty, 0.7).is_err());
}

#[test]
fn dataset_scoring_preserves_order_and_composes() {
    let (src, train, test, model) = blob_fixture();
    let cfg = ScorerConfig {
        knn_k: 5,
        ..ScorerConfig::default()
    };
    let art = Artifacts::build(&model, &src, &train, &cfg).unwrap();
    let all = score_dataset_methods(&model, &src, &test, &Method::ALL, &cfg, &art).unwrap();
    assert_eq!(all.len(), 6);
    for (i, bag) in test.bags.iter().enumerate() {
        let f = model.forward(&bag.instances::<f64>(&src)).unwrap();
        assert_eq!(all[0][i], score_msp(&f));
    }
    let mut rev = test.clone();
    rev.bags.reverse();
    let back = score_dataset(&model, &src, &rev, Method::Knn, &cfg, &art).unwrap();
    let mut fwd_order = all[5].clone();
    fwd_order.reverse();
    assert_eq!(back, fwd_order);

    let single = BagDataset {
        bags: vec![test.bags[0].clone()],
        ..test.clone()
    };
    assert_eq!(score_dataset(&model, &src, &single, Method::Mls, &cfg, &art).unwrap().len(), 1);
    assert!(matches!(
        score_dataset(&model, &src, &test, Method::Dice, &cfg, &Artifacts::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn ood_images_are_resampled_to_model_input() {
    let model = MilModel::<f32>::init(
        ModelConfig::new(
            EmbedderConfig::Conv28 {
                conv1_channels: 2,
                conv2_channels: 2,
                kernel: 5,
                embed_dim: 4,
            },
            3,
        ),
        0,
    )
    .unwrap();
    let src = InstanceDataset::new(
        "rgb",
        InstanceKind::Image {
            channels: 3,
            height: 32,
            width: 32,
        },
        vec![0.5; 2 * 3 * 32 * 32],
        None,
    )
    .unwrap();
    let bag = Bag {
        instance_indices: vec![0, 1],
        label: 0,
        n_positive: 0,
    };
    let x = bag_inputs(&model, &src, &bag, Role::TestOod).unwrap();
    assert_eq!(x[0].shape(), &[1, 28, 28]);
    assert!(model.forward(&x).is_ok());
}

#[test]
fn scores_csv_round_trip() {
    let rows = vec![
        ScoreRow {
            dataset_id: "mnist".into(),
            bag_index: 0,
            method: Method::Msp,
            confidence: 0.75,
        },
        ScoreRow {
            dataset_id: "kmnist".into(),
            bag_index: 3,
            method: Method::Knn,
            confidence: -0.125,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("scores.csv");
    write_scores_csv(&p, &rows).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("dataset_id,bag_index,method,confidence\n"));
    assert_eq!(read_scores_csv(&p).unwrap(), rows);
}

#[test]
fn config_validation() {
    assert!(ScorerConfig::default().validate().is_ok());
    for bad in [
        ScorerConfig { t_odin: 0.0, ..Default::default() },
        ScorerConfig { dice_p: 1.5, ..Default::default() },
        ScorerConfig { knn_k: 0, ..Default::default() },
        ScorerConfig { eps_odin: -1.0, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    assert_eq!("DICE".parse::<Method>().unwrap(), Method::Dice);
    assert!("mahalanobis".parse::<Method>().is_err());
}
