//! Subcommand implementations. Each command owns one output directory,
//! writes the effective config beside its artifacts and finishes with a
//! manifest covering every file it produced.

use crate::config::{CliError, ExperimentConfig};
use crate::manifest::{file_hash, Manifest, SplitRecord};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use xmodal::analysis::{build_ablation, AblationEntry, Direction, MetricsReport};
use xmodal::datagen::{self, PairedSample, WindowedSample};
use xmodal::encoder::Classifier;
use xmodal::training::{self, evaluate, FrozenSource, RunLog, TrainConfig};

pub struct LoadedData {
    pub train: Vec<WindowedSample>,
    pub val: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
    pub window_len: usize,
}

impl LoadedData {
    pub fn split(&self, name: &str) -> Option<&[WindowedSample]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn metrics_tsv(report: &MetricsReport) -> String {
    let mut out = String::from("metric\tvalue\n");
    out.push_str(&format!("accuracy\t{:.6}\n", report.accuracy));
    out.push_str(&format!("macro_precision\t{:.6}\n", report.macro_precision));
    out.push_str(&format!("macro_recall\t{:.6}\n", report.macro_recall));
    out.push_str(&format!("macro_f1\t{:.6}\n", report.macro_f1));
    for (i, c) in report.per_class.iter().enumerate() {
        out.push_str(&format!(
            "class{}_precision\t{:.6}\nclass{}_recall\t{:.6}\nclass{}_f1\t{:.6}\n",
            i, c.precision, i, c.recall, i, c.f1
        ));
    }
    out
}

fn write_run_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    command: &str,
    model: &Classifier,
    log: &RunLog,
    test_metrics: &MetricsReport,
    extra_summary: serde_json::Value,
) -> Result<(), CliError> {
    write_config(dir, cfg)?;
    model.save(&dir.join("checkpoint.bin"), cfg.dataset.hash())?;
    std::fs::write(dir.join("epoch_log.jsonl"), log.to_jsonl())?;
    std::fs::write(dir.join("metrics.tsv"), metrics_tsv(test_metrics))?;
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(test_metrics).expect("metrics serialize"),
    )?;
    let mut manifest = Manifest::new(command, cfg.hash(), cfg.dataset.hash(), cfg.seed);
    for name in ["config.toml", "checkpoint.bin", "epoch_log.jsonl", "metrics.tsv", "metrics.json"] {
        manifest.record_artifact(dir, name)?;
    }
    manifest.summary = Some(extra_summary);
    manifest.write(dir)?;
    Ok(())
}

// ── synth ────────────────────────────────────────────────────────────

pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dir = data_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    write_config(&dir, cfg)?;

    let dataset = datagen::generate(&cfg.dataset)?;
    let (train, val, test) = datagen::split(&dataset, &cfg.split)?;
    let mut manifest = Manifest::new("synth", cfg.hash(), cfg.dataset.hash(), cfg.seed);
    for (name, samples) in [("train", &train), ("val", &val), ("test", &test)] {
        let file = format!("{name}.bin");
        datagen::write_split(&dir.join(&file), &cfg.dataset, samples)?;
        let mut subjects: Vec<usize> = samples.iter().map(|s| s.subject).collect();
        subjects.sort_unstable();
        subjects.dedup();
        manifest.splits.insert(
            name.to_string(),
            SplitRecord {
                file: file.clone(),
                hash: format!("{:016x}", file_hash(&dir.join(&file))?),
                samples: samples.len(),
                subjects,
            },
        );
        manifest.record_artifact(&dir, &file)?;
    }
    manifest.record_artifact(&dir, "config.toml")?;
    manifest.write(&dir)?;
    println!(
        "synth: {} train / {} val / {} test samples -> {}",
        train.len(),
        val.len(),
        test.len(),
        dir.display()
    );
    Ok(())
}

/// Load the three split files, checking them against the synth manifest
/// and the dataset config hash.
pub fn load_data(cfg: &ExperimentConfig, dir: &Path) -> Result<LoadedData, CliError> {
    let manifest = Manifest::read(dir)
        .map_err(|_| CliError::Stale(format!("no dataset manifest in {}", dir.display())))?;
    let expected = format!("{:016x}", cfg.dataset.hash());
    if manifest.dataset_config_hash != expected {
        return Err(CliError::Stale(format!(
            "dataset was generated from a different config (manifest {}, config {})",
            manifest.dataset_config_hash, expected
        )));
    }
    let mut splits: BTreeMap<String, Vec<PairedSample>> = BTreeMap::new();
    for name in ["train", "val", "test"] {
        let record = manifest
            .splits
            .get(name)
            .ok_or_else(|| CliError::Stale(format!("manifest lacks the {name} split")))?;
        let path = dir.join(&record.file);
        let actual = format!("{:016x}", file_hash(&path)?);
        if actual != record.hash {
            return Err(CliError::Stale(format!(
                "{} changed on disk (manifest {}, file {actual})",
                record.file, record.hash
            )));
        }
        splits.insert(name.to_string(), datagen::read_split(&path, cfg.dataset.hash())?);
    }
    Ok(LoadedData {
        train: datagen::window_all(&splits["train"], &cfg.dataset)?,
        val: datagen::window_all(&splits["val"], &cfg.dataset)?,
        test: datagen::window_all(&splits["test"], &cfg.dataset)?,
        window_len: cfg.dataset.window_len,
    })
}

// ── pretrain ─────────────────────────────────────────────────────────

pub fn cmd_pretrain(cfg: &ExperimentConfig, data: &LoadedData) -> Result<(), CliError> {
    let direction: Direction = cfg.transfer.direction.into();
    let modality = direction.source();
    let dir = cfg.out_dir.join("source");
    let (source, log) = training::pretrain_source(
        &cfg.source,
        cfg.encoder_for(modality),
        modality,
        cfg.dataset.classes,
        &data.train,
        &data.val,
        data.window_len,
    )?;
    let test_metrics = evaluate(&source.model, &data.test, data.window_len)?;
    write_run_artifacts(
        &dir,
        cfg,
        "pretrain",
        &source.model,
        &log,
        &test_metrics,
        serde_json::json!({
            "modality": modality.to_string(),
            "digest": format!("{:016x}", source.digest),
            "best_val_f1": log.best_val_f1,
            "best_epoch": log.best_epoch,
        }),
    )?;
    println!(
        "pretrain: modality {} best val F1 {:.3} (epoch {}) -> {}",
        modality,
        log.best_val_f1,
        log.best_epoch,
        dir.display()
    );
    Ok(())
}

// ── baseline / transfer ──────────────────────────────────────────────

pub struct TargetRunSpec {
    pub lambda: f64,
    pub masking: bool,
    pub seed: u64,
    pub command: &'static str,
}

/// One target-model training run (uni-modal baseline when `source` is
/// None). The effective config written next to the artifacts reflects
/// the run's λ, masking and seed.
pub fn run_target(
    cfg: &ExperimentConfig,
    spec: &TargetRunSpec,
    source: Option<&FrozenSource>,
    data: &LoadedData,
    dir: &Path,
) -> Result<MetricsReport, CliError> {
    let direction: Direction = cfg.transfer.direction.into();
    let modality = direction.target();
    let mut effective = cfg.clone();
    effective.target.lambda = spec.lambda;
    effective.target.masking_enabled = spec.masking;
    effective.target.seed = spec.seed;
    effective.transfer.masking = spec.masking;

    let train_cfg = TrainConfig {
        lambda: spec.lambda,
        masking_enabled: spec.masking,
        seed: spec.seed,
        ..cfg.target.clone()
    };
    let (model, log) = training::train_target(
        &train_cfg,
        cfg.encoder_for(modality),
        modality,
        cfg.dataset.classes,
        source,
        &data.train,
        &data.val,
        data.window_len,
    )?;
    let test_metrics = evaluate(&model, &data.test, data.window_len)?;
    write_run_artifacts(
        dir,
        &effective,
        spec.command,
        &model,
        &log,
        &test_metrics,
        serde_json::json!({
            "modality": modality.to_string(),
            "lambda": spec.lambda,
            "masking": spec.masking,
            "seed": spec.seed,
            "digest": format!("{:016x}", model.digest()),
            "source_digest": source.map(|s| format!("{:016x}", s.digest)),
            "best_val_f1": log.best_val_f1,
            "test_macro_f1": test_metrics.macro_f1,
        }),
    )?;
    Ok(test_metrics)
}

pub fn load_source(path: &Path, cfg: &ExperimentConfig) -> Result<FrozenSource, CliError> {
    if !path.exists() {
        return Err(CliError::Run(format!(
            "source checkpoint {} does not exist; run pretrain first",
            path.display()
        )));
    }
    let (model, _) = Classifier::load(path, Some(cfg.dataset.hash()))?;
    Ok(FrozenSource::freeze(model))
}

pub fn cmd_baseline(cfg: &ExperimentConfig, data: &LoadedData, seed: u64) -> Result<(), CliError> {
    let dir = cfg.out_dir.join("baseline");
    let spec = TargetRunSpec {
        lambda: 0.0,
        masking: cfg.transfer.masking,
        seed,
        command: "baseline",
    };
    let metrics = run_target(cfg, &spec, None, data, &dir)?;
    println!("baseline: test macro F1 {:.3} -> {}", metrics.macro_f1, dir.display());
    Ok(())
}

pub fn cmd_transfer(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    source_path: &Path,
    lambda: f64,
    masking: bool,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let source = load_source(source_path, cfg)?;
    let dir = out.unwrap_or_else(|| cfg.out_dir.join("transfer"));
    let spec = TargetRunSpec {
        lambda,
        masking,
        seed,
        command: "transfer",
    };
    let metrics = run_target(cfg, &spec, Some(&source), data, &dir)?;
    println!(
        "transfer: lambda {} masking {} test macro F1 {:.3} -> {}",
        lambda,
        masking,
        metrics.macro_f1,
        dir.display()
    );
    Ok(())
}

// ── evaluate ─────────────────────────────────────────────────────────

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    checkpoint: &Path,
    split: &str,
) -> Result<(), CliError> {
    let (model, _) = Classifier::load(checkpoint, Some(cfg.dataset.hash()))?;
    let windows = data
        .split(split)
        .ok_or_else(|| CliError::Config(format!("unknown split {split}")))?;
    let report = evaluate(&model, windows, data.window_len)?;
    print!("{}", metrics_tsv(&report));
    Ok(())
}

// ── ablate ───────────────────────────────────────────────────────────

fn cell_dir(root: &Path, lambda: f64, seed: u64) -> PathBuf {
    root.join(format!("lam{lambda}_seed{seed}"))
}

fn cell_complete(dir: &Path, expected_config_hash: u64) -> bool {
    let Ok(manifest) = Manifest::read(dir) else {
        return false;
    };
    manifest.config_hash == format!("{expected_config_hash:016x}")
        && dir.join("metrics.json").exists()
}

/// Run the λ×seed grid, serially or with worker subprocesses, skipping
/// cells whose outputs already exist, then aggregate the table.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    source_path: &Path,
    workers: usize,
) -> Result<(), CliError> {
    let source = load_source(source_path, cfg)?;
    let root = cfg.out_dir.join("ablate");
    std::fs::create_dir_all(&root)?;
    write_config(&root, cfg)?;

    let mut cells = Vec::new();
    for &lambda in &cfg.transfer.lambda_grid {
        for &seed in &cfg.transfer.seeds {
            cells.push((lambda, seed));
        }
    }

    let expected_hash = |lambda: f64, seed: u64| -> u64 {
        let mut effective = cfg.clone();
        effective.target.lambda = lambda;
        effective.target.masking_enabled = cfg.transfer.masking;
        effective.target.seed = seed;
        effective.transfer.masking = cfg.transfer.masking;
        effective.hash()
    };

    let pending: Vec<(f64, u64)> = cells
        .iter()
        .copied()
        .filter(|&(l, s)| !cell_complete(&cell_dir(&root, l, s), expected_hash(l, s)))
        .collect();
    println!(
        "ablate: {} cells total, {} to run ({} workers)",
        cells.len(),
        pending.len(),
        workers.max(1)
    );

    let mut failures = Vec::new();
    if workers <= 1 {
        for (lambda, seed) in pending {
            let dir = cell_dir(&root, lambda, seed);
            let spec = TargetRunSpec {
                lambda,
                masking: cfg.transfer.masking,
                seed,
                command: "transfer",
            };
            match run_target(cfg, &spec, Some(&source), data, &dir) {
                Ok(m) => println!("  lam{lambda} seed{seed}: F1 {:.3}", m.macro_f1),
                Err(e) => failures.push(format!("lam{lambda}_seed{seed}: {e}")),
            }
        }
    } else {
        let config_path = root.join("config.toml");
        let exe = std::env::current_exe()?;
        let mut queue = pending.into_iter();
        let mut running: Vec<((f64, u64), std::process::Child)> = Vec::new();
        loop {
            while running.len() < workers {
                let Some((lambda, seed)) = queue.next() else {
                    break;
                };
                let dir = cell_dir(&root, lambda, seed);
                let child = std::process::Command::new(&exe)
                    .arg("transfer")
                    .arg("--config")
                    .arg(&config_path)
                    .arg("--source")
                    .arg(source_path)
                    .arg("--data")
                    .arg(data_dir(cfg))
                    .arg("--lambda")
                    .arg(lambda.to_string())
                    .arg("--seed")
                    .arg(seed.to_string())
                    .arg("--masking")
                    .arg(if cfg.transfer.masking { "on" } else { "off" })
                    .arg("--run-dir")
                    .arg(&dir)
                    .stdout(std::process::Stdio::null())
                    .spawn()?;
                running.push(((lambda, seed), child));
            }
            if running.is_empty() {
                break;
            }
            let ((lambda, seed), mut child) = running.remove(0);
            let status = child.wait()?;
            if status.success() {
                println!("  lam{lambda} seed{seed}: done");
            } else {
                failures.push(format!("lam{lambda}_seed{seed}: worker exited {status}"));
            }
        }
    }

    if !failures.is_empty() {
        std::fs::write(root.join("failures.txt"), failures.join("\n"))?;
        return Err(CliError::FailedChecks(failures));
    }

    let direction: Direction = cfg.transfer.direction.into();
    let mut entries = Vec::new();
    for (lambda, seed) in &cells {
        let dir = cell_dir(&root, *lambda, *seed);
        let text = std::fs::read_to_string(dir.join("metrics.json"))?;
        let metrics: MetricsReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Stale(format!("bad metrics in {}: {e}", dir.display())))?;
        entries.push(AblationEntry {
            lambda: *lambda,
            direction,
            seed: *seed,
            metrics,
        });
    }
    let table = build_ablation(&entries, &cfg.transfer.lambda_grid, &[direction])?;
    std::fs::write(root.join("ablation.tsv"), table.to_tsv())?;

    let mut manifest = Manifest::new("ablate", cfg.hash(), cfg.dataset.hash(), cfg.seed);
    manifest.record_artifact(&root, "ablation.tsv")?;
    manifest.record_artifact(&root, "config.toml")?;
    manifest.summary = Some(serde_json::json!({
        "cells": cells.len(),
        "lambda_grid": cfg.transfer.lambda_grid,
        "seeds": cfg.transfer.seeds,
    }));
    manifest.write(&root)?;
    println!("ablate: table -> {}", root.join("ablation.tsv").display());
    Ok(())
}

