//! End-to-end runs: load data, split, train, score, report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dra_core::eval::{aggregate_runs, auc, score_dataset, RunReport, RunSummary, ScoredExample};
use dra_core::protocols::{build_split, synth_generate, DatasetCatalog, ImageProvider, ProtocolSpec, SplitResult, SynthSpec};
use dra_core::pseudogen::{OutlierPool, PseudoKind, PseudoSource};
use dra_core::trainer::{fit_with_backbone, TrainConfig, TrainingLog};
use dra_core::{AblationMask, DraModel, ParamStore};

use crate::checkpoint::{checkpoint_save, config_hash, RunInfo};
use crate::config::{DataConfig, DataSource, ExperimentConfig};
use crate::container::load_weights;
use crate::error::{io_err, Error, Result};
use crate::ingest::{ingest_directory, Ingested};
use crate::manifest::read_manifest;
use crate::{imageio, plot, results};

/// A dataset ready for splitting and loading.
pub struct Dataset {
    pub dataset: String,
    pub subset: String,
    pub catalog: DatasetCatalog,
    pub images: Box<dyn ImageProvider>,
    pub synth: Option<SynthSpec>,
    /// Files backing each sample, for on-disk datasets.
    pub paths: BTreeMap<String, PathBuf>,
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn from_ingested(ing: Ingested, root: &Path, size: Option<usize>) -> Dataset {
    let parent = root.parent().map(dir_name).filter(|s| !s.is_empty());
    Dataset {
        dataset: parent.unwrap_or_else(|| ing.catalog.name.clone()),
        subset: ing.catalog.name.clone(),
        images: Box::new(ing.provider(size)),
        catalog: ing.catalog,
        synth: None,
        paths: ing.paths,
    }
}

pub fn load_dataset(data: &DataConfig) -> Result<Dataset> {
    match &data.source {
        DataSource::Directory(root) => Ok(from_ingested(ingest_directory(root)?, root, data.image_size)),
        DataSource::Manifest(path) => {
            let ing = read_manifest(path)?;
            Ok(from_ingested(ing, path.parent().unwrap_or(Path::new("")), data.image_size))
        }
        DataSource::Synthetic(spec) => {
            let d = synth_generate(spec)?;
            Ok(Dataset {
                dataset: "synthetic".into(),
                subset: spec.name.clone(),
                catalog: d.catalog,
                images: Box::new(d.images),
                synth: Some(spec.clone()),
                paths: BTreeMap::new(),
            })
        }
    }
}

/// Reads every readable image under `root` (recursively) into a pool. The
/// identifier of a pool image is its path relative to `root`, without
/// extension; identifiers listed in `exclude` (one per line) are dropped.
pub fn load_outlier_pool(root: &Path, exclude: Option<&Path>) -> Result<OutlierPool> {
    let excluded: BTreeSet<String> = match exclude {
        Some(p) => fs::read_to_string(p)
            .map_err(io_err(p))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect(),
        None => BTreeSet::new(),
    };
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let p = e.map_err(io_err(&dir))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut entries = Vec::new();
    for p in files {
        let id = p.strip_prefix(root).unwrap_or(&p).with_extension("").to_string_lossy().replace('\\', "/");
        if excluded.contains(&id) {
            continue;
        }
        match imageio::load_image(&p, None) {
            Ok(img) => entries.push((id, img)),
            Err(e) => log::warn!("skipping outlier {}: {e}", p.display()),
        }
    }
    Ok(OutlierPool::new(entries, &excluded)?)
}

pub fn pseudo_source(cfg: &ExperimentConfig) -> Result<PseudoSource> {
    if cfg.train.pseudo_source == PseudoKind::OutlierPool {
        let root = cfg
            .data
            .outlier_root
            .as_deref()
            .ok_or_else(|| Error::Config("pseudo_source = outlier_pool needs [data] outlier_root".into()))?;
        return Ok(PseudoSource::outliers(load_outlier_pool(root, cfg.data.outlier_exclude.as_deref())?));
    }
    Ok(PseudoSource::new(cfg.train.pseudo_source)?)
}

pub fn pretrained_weights(train: &TrainConfig) -> Result<Option<ParamStore>> {
    match &train.backbone.weights {
        Some(p) => Ok(Some(load_weights(Path::new(p))?)),
        None => Ok(None),
    }
}

pub fn preset_label(mask: &AblationMask) -> String {
    mask.preset_name().map(String::from).unwrap_or_else(|| {
        let bit = |b| if b { '1' } else { '0' };
        format!("mask{}{}{}{}", bit(mask.seen), bit(mask.pseudo), bit(mask.residual), bit(mask.normal))
    })
}

/// Everything one (preset, seed) run produces.
pub struct RunOutput {
    pub report: RunReport,
    pub scored: Vec<ScoredExample>,
    pub log: TrainingLog,
    pub model: DraModel,
    pub split: SplitResult,
    pub config: TrainConfig,
    pub info: RunInfo,
}

pub fn run_info(ds: &Dataset, protocol: &ProtocolSpec, seed: u64, image_size: Option<usize>) -> RunInfo {
    RunInfo {
        dataset: ds.dataset.clone(),
        subset: ds.subset.clone(),
        protocol: protocol.clone(),
        seed,
        image_size,
        synth: ds.synth.clone(),
    }
}

pub fn make_report(info: &RunInfo, config: &TrainConfig, auc: f64, seconds: f64) -> RunReport {
    RunReport {
        dataset: info.dataset.clone(),
        subset: info.subset.clone(),
        protocol: info.protocol.setting.name().into(),
        shots: info.protocol.shots,
        preset: preset_label(&config.ablation_mask),
        seed: info.seed,
        auc,
        seconds,
        config_hash: config_hash(config),
    }
}

/// Trains and evaluates one model. The seed drives both the split and the
/// training streams.
pub fn run_single(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    mask: AblationMask,
    seed: u64,
    pseudo: &PseudoSource,
    pretrained: Option<&ParamStore>,
) -> Result<RunOutput> {
    let start = Instant::now();
    let config = TrainConfig {
        ablation_mask: mask,
        seed,
        ..cfg.train.clone()
    };
    let split = build_split(&ds.catalog, &cfg.protocol, seed)?;
    let fit = fit_with_backbone(&split, ds.images.as_ref(), pseudo, &config, pretrained)?;
    let scored = score_dataset(&fit.model, &split, ds.images.as_ref())?;
    let value = auc(&scored)?;
    let seconds = if cfg.eval.timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let info = run_info(ds, &cfg.protocol, seed, cfg.data.image_size);
    log::info!("{} seed {seed}: auc {value:.4}", preset_label(&mask));
    Ok(RunOutput {
        report: make_report(&info, &config, value, seconds),
        scored,
        log: fit.log,
        model: fit.model,
        split,
        config,
        info,
    })
}

pub fn run_dir(out: &Path, report: &RunReport) -> PathBuf {
    out.join(format!("{}_seed{}", report.preset, report.seed))
}

/// Writes the checkpoint, split, training log, scores, report and plot of a
/// run into `dir`.
pub fn write_run(run: &RunOutput, dir: &Path, plot: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    checkpoint_save(&run.model, &run.config, Some(&run.info), &dir.join("model.dra"))?;
    results::write_json(&run.split, &dir.join("split.json"))?;
    results::write_training_log(&run.log, &dir.join("train_log.jsonl"))?;
    write_evaluation(&run.scored, &run.report, dir, plot)
}

pub fn write_evaluation(scored: &[ScoredExample], report: &RunReport, dir: &Path, plot: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    results::write_scores(scored, &dir.join("scores.csv"))?;
    results::write_json(report, &dir.join("report.json"))?;
    results::write_results(std::slice::from_ref(report), &dir.join("results.csv"))?;
    if plot {
        let title = format!("{} {} seed {}: auc {:.4}", report.subset, report.preset, report.seed, report.auc);
        let svg = plot::score_histogram_svg(scored, 20, &title);
        let p = dir.join("scores.svg");
        fs::write(&p, svg).map_err(io_err(&p))?;
    }
    Ok(())
}

/// Runs every mask for every seed over shared splits and writes
/// `results.csv`, `summary.csv` and one directory per run.
pub fn sweep(ds: &Dataset, cfg: &ExperimentConfig, masks: &[AblationMask]) -> Result<(Vec<RunReport>, Vec<RunSummary>)> {
    let out = &cfg.eval.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let pseudo = pseudo_source(cfg)?;
    let pretrained = pretrained_weights(&cfg.train)?;
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        for &mask in masks {
            let run = run_single(ds, cfg, mask, seed, &pseudo, pretrained.as_ref())?;
            write_run(&run, &run_dir(&out.join("runs"), &run.report), cfg.eval.plot)?;
            reports.push(run.report);
        }
    }
    let summaries = aggregate_runs(&reports);
    results::write_results(&reports, &out.join("results.csv"))?;
    results::write_summary(&summaries, &out.join("summary.csv"))?;
    Ok((reports, summaries))
}

/// Writes a synthetic dataset to disk in the directory layout that
/// [`ingest_directory`] reads, plus `manifest.csv` and `recipes.json`.
pub fn materialize_synth(spec: &SynthSpec, out: &Path) -> Result<Ingested> {
    let d = synth_generate(spec)?;
    let mut paths = BTreeMap::new();
    for (id, img) in d.images.iter() {
        let p = out.join(format!("{id}.png"));
        let parent = p.parent().unwrap_or(out);
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        imageio::save_png(img, &p)?;
        paths.insert(id.to_string(), p);
    }
    crate::manifest::write_manifest(&d.catalog, &paths, &out.join("manifest.csv"))?;
    results::write_json(&serde_json::json!({ "spec": spec, "classes": d.classes, "defects": d.defects }), &out.join("recipes.json"))?;
    Ok(Ingested {
        catalog: d.catalog,
        paths,
        warnings: Vec::new(),
    })
}
