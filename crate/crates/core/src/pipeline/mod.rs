//! Experiment stages over one output directory: generate bag manifests,
//! train, score and evaluate. Every stage re-derives its inputs from the
//! config, writes a config snapshot and refreshes the checksum list.

mod config;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::bagkit::{generate_bags, generate_ood_bags, BagDataset, BagSpec, InstanceDataset, InstanceKind, Role};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_scores, render_csv, render_table, EvalReport};
use crate::model::{read_checkpoint_header, MilModel};
use crate::scorers::{read_scores_csv, score_dataset_methods, write_scores_csv, Artifacts, Method, ScoreRow};
use crate::tensor::{DType, Element};
use crate::trainer::{self, EpochRecord};

pub use config::{BagsConfig, DataConfig, Pools, RunConfig, SourceConfig};

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const MANIFEST_DIR: &str = "manifests";
pub const CHECKPOINT_FILE: &str = "model.milc";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const SCORES_FILE: &str = "scores.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const CHECKSUM_FILE: &str = "SHA256SUMS";

/// Manifest path relative to the output directory.
pub fn manifest_path(role: Role, ood_name: &str) -> PathBuf {
    let file = match role {
        Role::TestOod => format!("ood_{ood_name}.json"),
        _ => format!("{}.json", role.as_str()),
    };
    Path::new(MANIFEST_DIR).join(file)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_snapshot(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(CONFIG_SNAPSHOT), cfg.to_json_pretty())
}

/// Rewrites `SHA256SUMS` over every reproducible artifact present in
/// `out_dir`. The training log is left out: it records wall-clock times.
pub fn update_checksums(out_dir: &Path) -> Result<()> {
    let mut files = vec![PathBuf::from(CONFIG_SNAPSHOT)];
    let manifests = out_dir.join(MANIFEST_DIR);
    if manifests.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(&manifests)
            .map_err(|e| Error::io(&manifests, e))?
            .filter_map(|e| e.ok().map(|e| e.file_name()))
            .filter(|n| n.to_string_lossy().ends_with(".json"))
            .map(|n| Path::new(MANIFEST_DIR).join(n))
            .collect();
        names.sort();
        files.extend(names);
    }
    files.extend([CHECKPOINT_FILE, SCORES_FILE, REPORT_CSV].map(PathBuf::from));
    let mut out = String::new();
    for rel in files {
        let abs = out_dir.join(&rel);
        if abs.is_file() {
            out.push_str(&format!("{}  {}\n", sha256_file(&abs)?, rel.display()));
        }
    }
    write_file(&out_dir.join(CHECKSUM_FILE), out)
}

/// Rejects pools whose instances the configured model cannot consume.
fn check_shapes(cfg: &RunConfig, pools: &Pools) -> Result<()> {
    let want = cfg.model.embedder.input_shape();
    for pool in [&pools.train, &pools.test] {
        if pool.kind().shape() != want {
            return Err(Error::Config(format!(
                "source {:?} has instances of shape {:?} but the model expects {want:?}",
                pool.source_id(),
                pool.kind().shape()
            )));
        }
    }
    for pool in &pools.ood {
        let ok = match pool.kind() {
            InstanceKind::Image { .. } => want.len() == 3,
            InstanceKind::Vector { .. } => pool.kind().shape() == want,
        };
        if !ok {
            return Err(Error::Config(format!(
                "OOD source {:?} has instances of shape {:?} that cannot be adapted to the model input {want:?}",
                pool.source_id(),
                pool.kind().shape()
            )));
        }
    }
    Ok(())
}

/// One written manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub role: Role,
    pub source_id: String,
    pub n_bags: usize,
    pub sha256: String,
}

/// Samples every split and writes its manifest.
pub fn generate(cfg: &RunConfig) -> Result<Vec<ManifestEntry>> {
    let pools = cfg.load_pools()?;
    check_shapes(cfg, &pools)?;
    write_snapshot(cfg)?;
    create_dir(&cfg.out_dir.join(MANIFEST_DIR))?;

    let mut sets = vec![
        generate_bags(&pools.train, &cfg.train_spec(), Role::Train)?,
        generate_bags(&pools.train, &cfg.val_spec(), Role::Val)?,
        generate_bags(&pools.test, &cfg.test_spec(), Role::TestId)?,
    ];
    for (j, pool) in pools.ood.iter().enumerate() {
        sets.push(generate_ood_bags(pool, &cfg.ood_spec(j))?);
    }
    let mut entries = Vec::with_capacity(sets.len());
    for ds in sets {
        let rel = manifest_path(ds.role, &ds.source_id);
        let bytes = ds.to_manifest_bytes();
        write_file(&cfg.out_dir.join(&rel), &bytes)?;
        entries.push(ManifestEntry {
            path: rel,
            role: ds.role,
            source_id: ds.source_id.clone(),
            n_bags: ds.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    update_checksums(&cfg.out_dir)?;
    Ok(entries)
}

/// Every split of a run, loaded from its manifests.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: BagDataset,
    pub val: BagDataset,
    pub test: BagDataset,
    pub ood: Vec<BagDataset>,
}

fn load_manifest(cfg: &RunConfig, role: Role, name: &str, pool: &InstanceDataset, spec: &BagSpec) -> Result<BagDataset> {
    let path = cfg.out_dir.join(manifest_path(role, name));
    if !path.is_file() {
        return Err(Error::Config(format!(
            "manifest {} not found; run generate first",
            path.display()
        )));
    }
    let ds = BagDataset::load_validated(&path, pool)?;
    if ds.role != role || ds.source_id != pool.source_id() || ds.spec != *spec {
        return Err(Error::Consistency(format!(
            "manifest {} does not match the current config; rerun generate",
            path.display()
        )));
    }
    Ok(ds)
}

pub fn load_splits(cfg: &RunConfig, pools: &Pools) -> Result<Splits> {
    let ood = pools
        .ood
        .iter()
        .enumerate()
        .map(|(j, p)| load_manifest(cfg, Role::TestOod, p.source_id(), p, &cfg.ood_spec(j)))
        .collect::<Result<_>>()?;
    Ok(Splits {
        train: load_manifest(cfg, Role::Train, "", &pools.train, &cfg.train_spec())?,
        val: load_manifest(cfg, Role::Val, "", &pools.train, &cfg.val_spec())?,
        test: load_manifest(cfg, Role::TestId, "", &pools.test, &cfg.test_spec())?,
        ood,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Validation accuracy of the returned model.
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub checkpoint_sha256: String,
    pub wall_clock_seconds: f64,
}

/// Trains from the config's initialisation and writes the best-validation
/// checkpoint and the per-epoch log.
pub fn train(cfg: &RunConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainSummary> {
    let pools = cfg.load_pools()?;
    check_shapes(cfg, &pools)?;
    let splits = load_splits(cfg, &pools)?;
    write_snapshot(cfg)?;
    match cfg.train.dtype {
        DType::F32 => train_typed::<f32>(cfg, &pools, &splits, on_epoch),
        DType::F64 => train_typed::<f64>(cfg, &pools, &splits, on_epoch),
    }
}

fn train_typed<T: Element>(
    cfg: &RunConfig,
    pools: &Pools,
    splits: &Splits,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    let init = MilModel::<T>::init(cfg.model.clone(), cfg.seed)?;
    let (model, log) = trainer::train_with_progress(init, &pools.train, &splits.train, &splits.val, &cfg.train, on_epoch)?;
    let val = trainer::evaluate(&model, &pools.train, &splits.val)?;

    let bytes = model.to_checkpoint_bytes();
    write_file(&cfg.out_dir.join(CHECKPOINT_FILE), &bytes)?;
    let log_path = cfg.out_dir.join(TRAIN_LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    log.write_jsonl(BufWriter::new(file)).map_err(|e| Error::io(&log_path, e))?;
    update_checksums(&cfg.out_dir)?;
    Ok(TrainSummary {
        epochs_run: log.epochs.len(),
        best_epoch: log.best_epoch,
        val_accuracy: val.accuracy,
        val_loss: val.mean_loss,
        checkpoint_sha256: sha256_hex(&bytes),
        wall_clock_seconds: log.wall_clock_seconds,
    })
}

fn checkpoint_dtype(cfg: &RunConfig) -> Result<DType> {
    let path = cfg.out_dir.join(CHECKPOINT_FILE);
    if !path.is_file() {
        return Err(Error::Config(format!(
            "checkpoint {} not found; run train first",
            path.display()
        )));
    }
    Ok(read_checkpoint_header(&path)?.dtype)
}

fn load_model<T: Element>(cfg: &RunConfig) -> Result<MilModel<T>> {
    let path = cfg.out_dir.join(CHECKPOINT_FILE);
    let model = MilModel::<T>::load(&path)?;
    if model.input_shape() != cfg.model.embedder.input_shape() {
        return Err(Error::Consistency(format!(
            "checkpoint {} expects input {:?} but the config describes {:?}",
            path.display(),
            model.input_shape(),
            cfg.model.embedder.input_shape()
        )));
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSummary {
    /// `(dataset id, number of bags)` in output order, ID first.
    pub datasets: Vec<(String, usize)>,
    pub methods: Vec<Method>,
    pub rows: usize,
    pub sha256: String,
}

/// Scores the ID test bags and every OOD set with `methods` and writes
/// `scores.csv`, ordered by dataset, then method, then bag.
pub fn score(cfg: &RunConfig, methods: &[Method]) -> Result<ScoreSummary> {
    if methods.is_empty() {
        return Err(Error::Config("no scoring method selected".into()));
    }
    let pools = cfg.load_pools()?;
    check_shapes(cfg, &pools)?;
    let splits = load_splits(cfg, &pools)?;
    if methods.contains(&Method::Knn) && cfg.scorers.knn_k > splits.train.len() {
        return Err(Error::Config(format!(
            "knn_k = {} exceeds the {} training bags in the KNN bank; choose knn_k ≤ {}",
            cfg.scorers.knn_k,
            splits.train.len(),
            splits.train.len()
        )));
    }
    write_snapshot(cfg)?;
    match checkpoint_dtype(cfg)? {
        DType::F32 => score_typed(cfg, &load_model::<f32>(cfg)?, &pools, &splits, methods),
        DType::F64 => score_typed(cfg, &load_model::<f64>(cfg)?, &pools, &splits, methods),
    }
}

fn score_typed<T: Element>(
    cfg: &RunConfig,
    model: &MilModel<T>,
    pools: &Pools,
    splits: &Splits,
    methods: &[Method],
) -> Result<ScoreSummary> {
    let mut scfg = cfg.scorers.clone();
    scfg.methods = methods.to_vec();
    let artifacts = Artifacts::build(model, &pools.train, &splits.train, &scfg)?;

    let targets = std::iter::once((&splits.test, &pools.test)).chain(splits.ood.iter().zip(&pools.ood));
    let mut rows = Vec::new();
    let mut datasets = Vec::new();
    for (ds, pool) in targets {
        let scores = score_dataset_methods(model, pool, ds, methods, &scfg, &artifacts)?;
        for (&method, values) in methods.iter().zip(scores) {
            rows.extend(values.into_iter().enumerate().map(|(bag_index, confidence)| ScoreRow {
                dataset_id: ds.source_id.clone(),
                bag_index,
                method,
                confidence,
            }));
        }
        datasets.push((ds.source_id.clone(), ds.len()));
    }
    let path = cfg.out_dir.join(SCORES_FILE);
    write_scores_csv(&path, &rows)?;
    update_checksums(&cfg.out_dir)?;
    Ok(ScoreSummary {
        datasets,
        methods: methods.to_vec(),
        rows: rows.len(),
        sha256: sha256_file(&path)?,
    })
}

/// Computes AUROC and FPR@95 for every (OOD set, method) pair in
/// `scores.csv` plus the checkpoint's ID test accuracy, and writes the
/// report as CSV and as a text table.
pub fn evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let scores_path = cfg.out_dir.join(SCORES_FILE);
    if !scores_path.is_file() {
        return Err(Error::Config(format!(
            "scores {} not found; run score first",
            scores_path.display()
        )));
    }
    let pools = cfg.load_pools()?;
    check_shapes(cfg, &pools)?;
    let splits = load_splits(cfg, &pools)?;
    write_snapshot(cfg)?;
    let scores = read_scores_csv(&scores_path)?;
    let rows = evaluate_scores(&scores, cfg.data.id_source.name())?;
    let id_accuracy = match checkpoint_dtype(cfg)? {
        DType::F32 => trainer::evaluate(&load_model::<f32>(cfg)?, &pools.test, &splits.test)?,
        DType::F64 => trainer::evaluate(&load_model::<f64>(cfg)?, &pools.test, &splits.test)?,
    }
    .accuracy;
    let report = EvalReport {
        rows,
        id_accuracy: Some(id_accuracy),
    };
    write_file(&cfg.out_dir.join(REPORT_CSV), render_csv(&report.rows))?;
    write_file(&cfg.out_dir.join(REPORT_TXT), render_table(&report))?;
    update_checksums(&cfg.out_dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests;
