//! `dra` command-line interface.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dra_core::eval::{auc, score_dataset};
use dra_core::protocols::{build_split, Setting, SynthSpec};
use dra_core::pseudogen::PseudoKind;
use dra_core::trainer::fit_with_backbone;
use dra_core::AblationMask;

use crate::checkpoint::{checkpoint_load, checkpoint_save};
use crate::config::{load_config, parse_backbone, parse_loss, DataSource, ExperimentConfig, Profile};
use crate::error::Error;
use crate::experiment::{
    load_dataset, make_report, materialize_synth, pretrained_weights, pseudo_source, run_dir, run_info, sweep,
    write_evaluation,
};
use crate::results;
use crate::selftest::run_selftest;

#[derive(Debug, Parser)]
#[command(name = "dra", version, about = "Disentangled abnormality learning for open-set anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one model per seed and write checkpoints.
    Train(RunArgs),
    /// Score a test split with a checkpoint and write scores and a report.
    Eval(EvalArgs),
    /// Train and evaluate the five ablation presets for every seed.
    Ablate(RunArgs),
    /// Write a synthetic dataset in the directory layout.
    Synth(SynthArgs),
    /// Run the built-in oracle and invariant checks.
    Selftest,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML experiment file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to `desk` for synthetic data and `paper` otherwise.
    #[arg(long, value_parser = ["paper", "desk"])]
    profile: Option<String>,
    /// Dataset directory (`train/good`, `test/good`, `test/<class>`).
    #[arg(long, conflicts_with = "manifest")]
    dataset_root: Option<PathBuf>,
    /// Catalog manifest CSV instead of a directory.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Square input size images are resampled to.
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long, value_parser = ["general", "hard"])]
    protocol: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(usize))]
    shots: Option<usize>,
    #[arg(long)]
    seen_class: Option<String>,
    /// One or more seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long, value_parser = ["DRA1A", "DRA2A", "DRA3Ar", "DRA3An", "DRA"])]
    preset: Option<String>,
    #[arg(long, value_parser = ["cutmix", "cutpaste_scar", "cutpaste_mix", "outlier_pool"])]
    pseudo_source: Option<String>,
    #[arg(long, value_parser = ["deviation", "bce", "focal"])]
    loss: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iterations_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = ["resnet18", "tiny"])]
    backbone: Option<String>,
    /// Pretrained feature-network weight container.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    freeze_backbone: bool,
    #[arg(long)]
    outlier_root: Option<PathBuf>,
    #[arg(long)]
    outlier_exclude: Option<PathBuf>,
    /// Record wall time in the results table.
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    no_plot: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 200)]
    train_normals: usize,
    #[arg(long, default_value_t = 80)]
    test_normals: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let on_disk = self.dataset_root.is_some() || self.manifest.is_some();
        let fallback = if on_disk { Profile::Paper } else { Profile::Desk };
        let flag_profile = self.profile.as_deref().map(Profile::parse).transpose()?;
        let mut cfg = match &self.config {
            Some(p) => load_config(p, flag_profile.unwrap_or(fallback), flag_profile.is_some())?,
            None => ExperimentConfig::for_profile(flag_profile.unwrap_or(fallback)),
        };
        if let Some(root) = &self.dataset_root {
            cfg.data.source = DataSource::Directory(root.clone());
        }
        if let Some(m) = &self.manifest {
            cfg.data.source = DataSource::Manifest(m.clone());
        }
        if self.image_size.is_some() {
            cfg.data.image_size = self.image_size;
        }
        if let Some(p) = &self.protocol {
            cfg.protocol.setting = Setting::parse(p)?;
        }
        if let Some(s) = self.shots {
            cfg.protocol.shots = s;
        }
        if self.seen_class.is_some() {
            cfg.protocol.seen_class = self.seen_class.clone();
        }
        if !self.seed.is_empty() {
            cfg.seeds = self.seed.clone();
        }
        if let Some(p) = &self.preset {
            cfg.train.ablation_mask = AblationMask::preset(p)?;
        }
        if let Some(p) = &self.pseudo_source {
            cfg.train.pseudo_source = PseudoKind::parse(p)?;
        }
        if let Some(l) = &self.loss {
            cfg.train.loss = parse_loss(l)?;
        }
        if let Some(o) = &self.out_dir {
            cfg.eval.out_dir = o.clone();
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.iterations_per_epoch {
            cfg.train.iterations_per_epoch = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(b) = &self.backbone {
            cfg.train.backbone = parse_backbone(b)?;
        }
        if let Some(w) = &self.weights {
            cfg.train.backbone.weights = Some(w.display().to_string());
        }
        if self.freeze_backbone {
            cfg.train.freeze_backbone = true;
        }
        if self.outlier_root.is_some() {
            cfg.data.outlier_root = self.outlier_root.clone();
        }
        if self.outlier_exclude.is_some() {
            cfg.data.outlier_exclude = self.outlier_exclude.clone();
        }
        if self.timing {
            cfg.eval.timing = true;
        }
        if self.no_plot {
            cfg.eval.plot = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn names_data(&self) -> bool {
        self.dataset_root.is_some() || self.manifest.is_some() || self.config.is_some()
    }
}

fn train(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let ds = load_dataset(&cfg.data)?;
    let pseudo = pseudo_source(&cfg)?;
    let pretrained = pretrained_weights(&cfg.train)?;
    for &seed in &cfg.seeds {
        let mut config = cfg.train.clone();
        config.seed = seed;
        let split = build_split(&ds.catalog, &cfg.protocol, seed)?;
        let fit = fit_with_backbone(&split, ds.images.as_ref(), &pseudo, &config, pretrained.as_ref())?;
        let info = run_info(&ds, &cfg.protocol, seed, cfg.data.image_size);
        let dir = run_dir(&cfg.eval.out_dir, &make_report(&info, &config, 0.0, 0.0));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        checkpoint_save(&fit.model, &config, Some(&info), &dir.join("model.dra"))?;
        results::write_json(&split, &dir.join("split.json"))?;
        results::write_training_log(&fit.log, &dir.join("train_log.jsonl"))?;
        println!("{}", dir.join("model.dra").display());
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let Some(path) = &args.checkpoint else {
        return Err(Error::MissingModel("eval needs --checkpoint <file> written by `dra train`".into()).into());
    };
    let ckpt = checkpoint_load(path)?;
    let Some(info) = ckpt.run.clone() else {
        bail!("checkpoint {} has no run metadata; cannot rebuild its split", path.display());
    };
    let mut cfg = if args.run.names_data() {
        args.run.resolve()?
    } else {
        let mut c = ExperimentConfig::for_profile(Profile::Desk);
        match &info.synth {
            Some(spec) => c.data.source = DataSource::Synthetic(spec.clone()),
            None => bail!("checkpoint was trained on {}/{}; pass --dataset-root", info.dataset, info.subset),
        }
        c
    };
    cfg.data.image_size = info.image_size;
    let ds = load_dataset(&cfg.data)?;
    if (ds.dataset.as_str(), ds.subset.as_str()) != (info.dataset.as_str(), info.subset.as_str()) {
        log::warn!(
            "checkpoint was trained on {}/{}, evaluating on {}/{}",
            info.dataset,
            info.subset,
            ds.dataset,
            ds.subset
        );
    }
    let split = build_split(&ds.catalog, &info.protocol, info.seed)?;
    let scored = score_dataset(&ckpt.model, &split, ds.images.as_ref())?;
    let report = make_report(&info, &ckpt.config, auc(&scored)?, 0.0);
    let dir = match &args.run.out_dir {
        Some(d) => d.clone(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    write_evaluation(&scored, &report, &dir, !args.run.no_plot)?;
    println!("{} {} seed {} auc {}", report.subset, report.preset, report.seed, report.auc);
    Ok(())
}

fn ablate(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    let ds = load_dataset(&cfg.data)?;
    let masks: Vec<AblationMask> = AblationMask::PRESETS.iter().map(|p| AblationMask::preset(p)).collect::<Result<_, _>>()?;
    let (_, summaries) = sweep(&ds, &cfg, &masks)?;
    for s in summaries {
        println!("{:<7} {:.4} ± {:.4} ({} runs)", s.preset, s.mean_auc, s.std_auc, s.n_runs);
    }
    Ok(())
}

fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let spec = SynthSpec {
        size: args.size,
        train_normals: args.train_normals,
        test_normals: args.test_normals,
        classes: args.classes,
        per_class: args.per_class,
        seed: args.seed,
        ..SynthSpec::default()
    };
    let ing = materialize_synth(&spec, &args.out_dir)?;
    println!("{} images written to {}", ing.paths.len(), args.out_dir.display());
    Ok(())
}

fn selftest() -> anyhow::Result<()> {
    let checks = run_selftest();
    for c in &checks {
        println!("{} {:<20} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} selftest check(s) failed");
    }
    Ok(())
}

/// Parses `argv` and runs the subcommand. Usage errors exit with 2, runtime
/// errors with 1.
pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Synth(a) => synth(a),
        Command::Selftest => selftest(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
