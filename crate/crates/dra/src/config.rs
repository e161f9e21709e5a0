//! Experiment configuration files.
//!
//! A TOML file with the sections `[data]`, `[model]`, `[train]`,
//! `[protocol]` and `[eval]`. Every key is optional and overrides the
//! profile defaults; command-line flags in turn override the file.
//!
//! ```toml
//! [data]
//! root = "data/carpet"      # or: synthetic = true
//! image_size = 448
//!
//! [model]
//! preset = "DRA"
//! backbone = "resnet18"     # or a table: { architecture = "tiny", width = 32 }
//!
//! [train]
//! profile = "paper"
//! loss = "deviation"
//! pseudo_source = "cutmix"
//!
//! [protocol]
//! protocol = "general"
//! shots = 10
//! seeds = [0, 1, 2]
//!
//! [eval]
//! out_dir = "runs/carpet"
//! ```

use std::path::{Path, PathBuf};

use dra_core::featurenet::BackboneConfig;
use dra_core::losses::LossKind;
use dra_core::protocols::{ProtocolSpec, Setting, SynthSpec};
use dra_core::pseudogen::PseudoKind;
use dra_core::trainer::TrainConfig;
use dra_core::AblationMask;
use serde::Deserialize;
use toml::Spanned;

use crate::error::{io_err, Error, Result};

/// Default schedule and data settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Profile {
    /// The published schedule: residual backbone, 448-pixel inputs.
    #[default]
    Paper,
    /// Tiny backbone and short schedule for 32-pixel synthetic data.
    Desk,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected paper or desk)"))),
        }
    }

    pub fn train_config(self) -> TrainConfig {
        match self {
            Self::Paper => TrainConfig::default(),
            Self::Desk => TrainConfig::desk(),
        }
    }

    pub fn image_size(self) -> Option<usize> {
        match self {
            Self::Paper => Some(448),
            Self::Desk => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Directory(PathBuf),
    Manifest(PathBuf),
    Synthetic(SynthSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub image_size: Option<usize>,
    pub outlier_root: Option<PathBuf>,
    /// Text file of identifiers never drawn from the outlier pool.
    pub outlier_exclude: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub out_dir: PathBuf,
    /// Record wall time in the results table. Off by default so that the
    /// table is reproducible byte for byte.
    pub timing: bool,
    pub plot: bool,
}

/// Fully resolved experiment settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolSpec,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            data: DataConfig {
                source: DataSource::Synthetic(SynthSpec::default()),
                image_size: profile.image_size(),
                outlier_root: None,
                outlier_exclude: None,
            },
            train: profile.train_config(),
            protocol: ProtocolSpec::default(),
            seeds: vec![0, 1, 2],
            eval: EvalConfig {
                out_dir: PathBuf::from("runs"),
                timing: false,
                plot: true,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.train.pseudo_source == PseudoKind::OutlierPool && self.data.outlier_root.is_none() {
            return Err(Error::Config("pseudo_source = outlier_pool needs [data] outlier_root".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    data: DataSection,
    model: ModelSection,
    train: TrainSection,
    protocol: ProtocolSection,
    eval: EvalSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataSection {
    root: Option<PathBuf>,
    manifest: Option<PathBuf>,
    synthetic: Option<bool>,
    synth: Option<SynthSpec>,
    image_size: Option<usize>,
    outlier_root: Option<PathBuf>,
    outlier_exclude: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum BackboneSpec {
    Name(String),
    Full(BackboneConfig),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    preset: Option<Spanned<String>>,
    ablation_mask: Option<AblationMask>,
    backbone: Option<Spanned<BackboneSpec>>,
    scales: Option<Vec<f64>>,
    k_fraction: Option<f64>,
    n_reference: Option<usize>,
    reference_pseudo_fraction: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LossSpec {
    Name(String),
    Full(LossKind),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    profile: Option<Spanned<String>>,
    epochs: Option<usize>,
    iterations_per_epoch: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    loss: Option<Spanned<LossSpec>>,
    pseudo_source: Option<Spanned<String>>,
    seed: Option<u64>,
    prior_size: Option<usize>,
    prior_mean: Option<f64>,
    prior_std: Option<f64>,
    freeze_prior: Option<bool>,
    freeze_backbone: Option<bool>,
    max_grad_norm: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ProtocolSection {
    protocol: Option<Spanned<String>>,
    shots: Option<usize>,
    seen_class: Option<String>,
    normal_ratio: Option<f64>,
    nest_one_shot: Option<bool>,
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    out_dir: Option<PathBuf>,
    timing: Option<bool>,
    plot: Option<bool>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn at<T>(text: &str, item: &Spanned<T>, message: impl std::fmt::Display) -> Error {
    Error::ConfigAt {
        line: line_of(text, item.span().start),
        message: message.to_string(),
    }
}

pub fn parse_loss(name: &str) -> Result<LossKind> {
    match name {
        "deviation" => Ok(LossKind::default()),
        "bce" => Ok(LossKind::Bce),
        "focal" => Ok(LossKind::Focal { gamma: 2.0, alpha: 0.25 }),
        other => Err(Error::Config(format!("unknown loss `{other}` (expected deviation, bce or focal)"))),
    }
}

pub fn parse_backbone(name: &str) -> Result<BackboneConfig> {
    match name {
        "resnet18" => Ok(BackboneConfig::resnet18()),
        "tiny" => Ok(BackboneConfig::tiny()),
        other => Err(Error::Config(format!("unknown backbone `{other}` (expected resnet18 or tiny)"))),
    }
}

/// Parses configuration text. The profile named in `[train]` (or `fallback`)
/// supplies every value the file leaves out; with `forced`, `fallback` is
/// used regardless of the file.
pub fn parse_config(text: &str, fallback: Profile, forced: bool) -> Result<ExperimentConfig> {
    let file: FileConfig = toml::from_str(text).map_err(|e| match e.span() {
        Some(span) => Error::ConfigAt {
            line: line_of(text, span.start),
            message: e.message().to_string(),
        },
        None => Error::Config(e.message().to_string()),
    })?;
    let profile = match &file.train.profile {
        Some(_) if forced => fallback,
        Some(p) => Profile::parse(p.get_ref()).map_err(|e| at(text, p, e))?,
        None => fallback,
    };
    let mut cfg = ExperimentConfig::for_profile(profile);

    let d = file.data;
    let sources = [d.root.is_some(), d.manifest.is_some(), d.synthetic == Some(true) || d.synth.is_some()];
    if sources.iter().filter(|s| **s).count() > 1 {
        return Err(Error::Config("[data] takes only one of root, manifest and synthetic".into()));
    }
    if let Some(root) = d.root {
        cfg.data.source = DataSource::Directory(root);
    } else if let Some(m) = d.manifest {
        cfg.data.source = DataSource::Manifest(m);
    } else if let Some(s) = d.synth {
        cfg.data.source = DataSource::Synthetic(s);
    }
    if d.image_size.is_some() {
        cfg.data.image_size = d.image_size;
    }
    cfg.data.outlier_root = d.outlier_root;
    cfg.data.outlier_exclude = d.outlier_exclude;

    let m = file.model;
    let t = &mut cfg.train;
    if let Some(p) = &m.preset {
        t.ablation_mask = AblationMask::preset(p.get_ref()).map_err(|e| at(text, p, e))?;
    }
    if let Some(mask) = m.ablation_mask {
        t.ablation_mask = mask;
    }
    if let Some(b) = &m.backbone {
        t.backbone = match b.get_ref() {
            BackboneSpec::Name(n) => parse_backbone(n).map_err(|e| at(text, b, e))?,
            BackboneSpec::Full(c) => c.clone(),
        };
    }
    macro_rules! take {
        ($src:expr, $dst:expr, $($f:ident),*) => {
            $(if let Some(v) = $src.$f { $dst.$f = v; })*
        };
    }
    take!(m, t, scales, k_fraction, n_reference, reference_pseudo_fraction);

    let tr = file.train;
    take!(
        tr,
        t,
        epochs,
        iterations_per_epoch,
        batch_size,
        learning_rate,
        weight_decay,
        beta1,
        beta2,
        eps,
        seed,
        prior_size,
        prior_mean,
        prior_std,
        freeze_prior,
        freeze_backbone
    );
    if tr.max_grad_norm.is_some() {
        t.max_grad_norm = tr.max_grad_norm;
    }
    if let Some(l) = &tr.loss {
        t.loss = match l.get_ref() {
            LossSpec::Name(n) => parse_loss(n).map_err(|e| at(text, l, e))?,
            LossSpec::Full(k) => *k,
        };
    }
    if let Some(p) = &tr.pseudo_source {
        t.pseudo_source = PseudoKind::parse(p.get_ref()).map_err(|e| at(text, p, e))?;
    }

    let p = file.protocol;
    if let Some(s) = &p.protocol {
        cfg.protocol.setting = Setting::parse(s.get_ref()).map_err(|e| at(text, s, e))?;
    }
    take!(p, cfg.protocol, shots, normal_ratio, nest_one_shot);
    if p.seen_class.is_some() {
        cfg.protocol.seen_class = p.seen_class;
    }
    cfg.seeds = match (p.seeds, tr.seed) {
        (Some(s), _) => s,
        (None, Some(s)) => vec![s],
        (None, None) => cfg.seeds,
    };

    let e = file.eval;
    take!(e, cfg.eval, out_dir, timing, plot);
    Ok(cfg)
}

pub fn load_config(path: &Path, fallback: Profile, forced: bool) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text, fallback, forced).map_err(|e| match e {
        Error::ConfigAt { line, message } => Error::ConfigAt {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_profile() {
        let c = parse_config("", Profile::Desk, false).unwrap();
        assert_eq!(c, ExperimentConfig::for_profile(Profile::Desk));
    }

    #[test]
    fn sections_override_fields() {
        let c = parse_config(
            r#"
[data]
root = "d"
image_size = 64
[model]
preset = "DRA2A"
backbone = { architecture = "tiny", width = 8, normalization = "none" }
[train]
profile = "desk"
epochs = 3
loss = "focal"
pseudo_source = "cutpaste_scar"
[protocol]
protocol = "hard"
shots = 1
seen_class = "crack"
seeds = [4, 5]
[eval]
out_dir = "o"
timing = true
"#,
            Profile::Paper,
            false,
        )
        .unwrap();
        assert_eq!(c.profile, Profile::Desk);
        assert_eq!(c.data.source, DataSource::Directory("d".into()));
        assert_eq!(c.data.image_size, Some(64));
        assert_eq!(c.train.ablation_mask, AblationMask::DRA2A);
        assert_eq!(c.train.backbone.width, 8);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, TrainConfig::desk().batch_size);
        assert!(matches!(c.train.loss, LossKind::Focal { .. }));
        assert_eq!(c.train.pseudo_source, PseudoKind::CutpasteScar);
        assert_eq!(c.protocol.setting, Setting::Hard);
        assert_eq!(c.protocol.seen_class.as_deref(), Some("crack"));
        assert_eq!(c.seeds, vec![4, 5]);
        assert!(c.eval.timing);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let unknown = parse_config("[train]\nepochs = 2\nepoch = 3\n", Profile::Desk, false).unwrap_err();
        assert!(matches!(unknown, Error::ConfigAt { line: 3, .. }), "{unknown}");
        let bad_type = parse_config("\n[protocol]\nshots = \"ten\"\n", Profile::Desk, false).unwrap_err();
        assert!(matches!(bad_type, Error::ConfigAt { line: 3, .. }), "{bad_type}");
        let bad_value = parse_config("[model]\n\npreset = \"DRA9\"\n", Profile::Desk, false).unwrap_err();
        assert!(matches!(bad_value, Error::ConfigAt { line: 3, .. }), "{bad_value}");
        let syntax = parse_config("[eval\n", Profile::Desk, false).unwrap_err();
        assert!(matches!(syntax, Error::ConfigAt { line: 1, .. }), "{syntax}");
        let section = parse_config("[evaluation]\nx = 1\n", Profile::Desk, false).unwrap_err();
        assert!(matches!(section, Error::ConfigAt { line: 1, .. }), "{section}");
    }
}
