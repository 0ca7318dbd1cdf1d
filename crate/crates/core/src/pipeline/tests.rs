use super::*;

const SMOKE: &str = include_str!("../../../../configs/smoke.json");
const MNIST: &str = include_str!("../../../../configs/mnist.json");

fn smoke() -> serde_json::Value {
    serde_json::from_str(SMOKE).unwrap()
}

fn parse(v: &serde_json::Value) -> Result<RunConfig> {
    RunConfig::from_json_str(&v.to_string())
}

fn config_message(r: Result<RunConfig>) -> String {
    match r {
        Err(Error::Config(msg)) => msg,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn shipped_configs_parse() {
    let s = RunConfig::from_json_str(SMOKE).unwrap();
    assert_eq!(s.bags.n_train, 200);
    assert_eq!(s.train.seed, s.seed);
    let m = RunConfig::from_json_str(MNIST).unwrap();
    assert_eq!(m.bags.n_train, 20_000);
    assert_eq!(m.bags.n_val, 4_000);
    assert_eq!(m.bags.n_test, 400);
    assert_eq!(m.bags.n_ood, 400);
    assert_eq!(m.train.learning_rate, 5e-5);
}

#[test]
fn unknown_keys_are_rejected_with_their_path() {
    let mut v = smoke();
    v["bags"]["n_trian"] = 10.into();
    assert!(config_message(parse(&v)).contains("bags"));
    let mut v = smoke();
    v["data"]["id_source"]["colour"] = "red".into();
    assert!(config_message(parse(&v)).contains("data.id_source"));
}

#[test]
fn knn_k_is_bounded_by_the_training_bags() {
    let mut v = smoke();
    v["scorers"]["knn_k"] = 201.into();
    assert!(config_message(parse(&v)).contains("201"));
}

#[test]
fn splits_must_be_even_and_positive() {
    for key in ["n_train", "n_val", "n_test"] {
        let mut v = smoke();
        v["bags"][key] = 3.into();
        assert!(config_message(parse(&v)).contains(key));
    }
}

#[test]
fn source_names_must_be_distinct() {
    let mut v = smoke();
    v["data"]["ood_sources"][0]["name"] = "blobs".into();
    assert!(config_message(parse(&v)).contains("twice"));
}

#[test]
fn training_seed_follows_the_run_seed() {
    let mut v = smoke();
    v["seed"] = 9.into();
    assert_eq!(parse(&v).unwrap().train.seed, 9);
    v["train"]["seed"] = 3.into();
    assert!(config_message(parse(&v)).contains("train.seed"));
    v["train"]["seed"] = 9.into();
    assert!(parse(&v).is_ok());
    let cfg = parse(&smoke()).unwrap().with_seed(4).unwrap();
    assert_eq!((cfg.seed, cfg.train.seed), (4, 4));
}

#[test]
fn snapshot_round_trips() {
    let cfg = RunConfig::from_json_str(SMOKE).unwrap();
    assert_eq!(RunConfig::from_json_str(&cfg.to_json_pretty()).unwrap(), cfg);
}

#[test]
fn relative_paths_resolve_under_the_data_root() {
    let mut cfg = RunConfig::from_json_str(MNIST).unwrap();
    cfg.resolve_data_paths(Path::new("/data"));
    match &cfg.data.id_source {
        SourceConfig::Idx { images, labels, .. } => {
            assert_eq!(images, Path::new("/data/mnist/train-images-idx3-ubyte"));
            assert_eq!(labels.as_deref(), Some(Path::new("/data/mnist/train-labels-idx1-ubyte")));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_source_file_is_a_config_error_naming_it() {
    let mut cfg = RunConfig::from_json_str(MNIST).unwrap();
    cfg.resolve_data_paths(Path::new("/nonexistent-root"));
    match cfg.load_pools() {
        Err(Error::Config(msg)) => assert!(msg.contains("/nonexistent-root/mnist/train-images-idx3-ubyte"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn split_seeds_differ() {
    let cfg = RunConfig::from_json_str(SMOKE).unwrap();
    let seeds = [cfg.train_spec().seed, cfg.val_spec().seed, cfg.test_spec().seed, cfg.ood_spec(0).seed];
    let unique: std::collections::BTreeSet<u64> = seeds.into_iter().collect();
    assert_eq!(unique.len(), 4);
}

#[test]
fn held_out_pool_is_disjoint_from_training_pool() {
    let cfg = RunConfig::from_json_str(SMOKE).unwrap();
    let pools = cfg.load_pools().unwrap();
    assert_eq!(pools.train.len() + pools.test.len(), 1200);
    assert_eq!(pools.test.len(), 240);
    let key = |p: &InstanceDataset, i: usize| p.instance_values(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let train: std::collections::HashSet<Vec<u32>> = (0..pools.train.len()).map(|i| key(&pools.train, i)).collect();
    assert!((0..pools.test.len()).all(|i| !train.contains(&key(&pools.test, i))));
    assert_eq!(pools.ood[0].labels().unwrap().iter().filter(|&&l| l != 3).count(), 0);
}

#[test]
fn mismatched_model_input_is_rejected() {
    let mut v = smoke();
    v["model"]["embedder"]["input_dim"] = 5.into();
    let cfg = parse(&v).unwrap();
    let pools = cfg.load_pools().unwrap();
    assert!(matches!(check_shapes(&cfg, &pools), Err(Error::Config(_))));
}
