//! Batch composition and joint optimisation of all enabled heads.
//!
//! Each batch is half normals, a quarter labelled anomalies (drawn with
//! replacement) and a quarter pseudo anomalies generated on the fly; quotas
//! of disabled heads go to normals. Every sample is scored at every pyramid
//! scale, each head's score is the mean over scales, and the per-head mean
//! losses are summed into one objective that updates the feature network and
//! the heads together.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DraError, Result};
use crate::featurenet::{pyramid_views, BackboneConfig, ImageTensor};
use crate::heads::{head_backward, head_forward, residual_map, AblationMask, HeadKind};
use crate::losses::{routed_counts, HeadTargets, LossBreakdown, LossKind, PriorScoreSet, RoutingLabel, SampleRole};
use crate::model::{DraModel, ModelSpec};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::protocols::{ImageProvider, SplitResult};
use crate::pseudogen::{PseudoKind, PseudoSource};
use crate::tensor::{Array3, Grads, ParamStore};
use crate::DraRng;

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_PSEUDO: u64 = 3;
const STREAM_PRIOR: u64 = 4;
const STREAM_REFERENCE: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub k_fraction: f64,
    pub n_reference: usize,
    /// Share of the reference set replaced by pseudo anomalies, rounded down.
    pub reference_pseudo_fraction: f64,
    pub ablation_mask: AblationMask,
    pub loss: LossKind,
    pub pseudo_source: PseudoKind,
    pub seed: u64,
    pub scales: Vec<f64>,
    pub backbone: BackboneConfig,
    pub prior_size: usize,
    pub prior_mean: f64,
    pub prior_std: f64,
    /// Draw the prior score set once instead of once per batch.
    pub freeze_prior: bool,
    pub freeze_backbone: bool,
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            iterations_per_epoch: 20,
            batch_size: 48,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            k_fraction: 0.1,
            n_reference: 5,
            reference_pseudo_fraction: 0.5,
            ablation_mask: AblationMask::DRA,
            loss: LossKind::default(),
            pseudo_source: PseudoKind::Cutmix,
            seed: 0,
            scales: vec![1.0, 0.5],
            backbone: BackboneConfig::resnet18(),
            prior_size: 5000,
            prior_mean: 0.0,
            prior_std: 1.0,
            freeze_prior: false,
            freeze_backbone: false,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    /// Small tiny-backbone schedule for 32×32 synthetic data on one CPU core.
    pub fn desk() -> Self {
        Self {
            epochs: 10,
            iterations_per_epoch: 10,
            batch_size: 32,
            backbone: BackboneConfig::tiny_with_width(32),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(4) {
            return Err(DraError::Config(format!("batch_size {} must be a positive multiple of 4", self.batch_size)));
        }
        let rates = [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("eps", self.eps),
            ("prior_std", self.prior_std),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DraError::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(DraError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.n_reference == 0 && self.ablation_mask.residual {
            return Err(DraError::Config("n_reference must be positive when the residual head is enabled".into()));
        }
        if !(0.0..=1.0).contains(&self.reference_pseudo_fraction) {
            return Err(DraError::Config("reference_pseudo_fraction must lie in [0, 1]".into()));
        }
        if self.loss.needs_prior() && (self.prior_size < 2 || self.prior_std <= 0.0) {
            return Err(DraError::Config("the deviation prior needs prior_size ≥ 2 and prior_std > 0".into()));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(DraError::Config("max_grad_norm must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            backbone: self.backbone.clone(),
            mask: self.ablation_mask,
            scales: self.scales.clone(),
            k_fraction: self.k_fraction,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Number of normals, labelled anomalies and pseudo anomalies per batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub normals: usize,
    pub seen: usize,
    pub pseudo: usize,
}

impl BatchPlan {
    pub fn new(batch_size: usize, mask: &AblationMask, seen_available: usize) -> Result<Self> {
        if batch_size == 0 || !batch_size.is_multiple_of(4) {
            return Err(DraError::Config(format!("batch_size {batch_size} must be a positive multiple of 4")));
        }
        if mask.seen && seen_available == 0 {
            return Err(DraError::Config(
                "the seen head is enabled but the split has no labelled anomalies; disable it instead".into(),
            ));
        }
        let quarter = batch_size / 4;
        let seen = if mask.seen { quarter } else { 0 };
        let pseudo = if mask.pseudo { quarter } else { 0 };
        Ok(Self {
            normals: batch_size - seen - pseudo,
            seen,
            pseudo,
        })
    }

    pub fn total(&self) -> usize {
        self.normals + self.seen + self.pseudo
    }
}

/// Draws training normals without replacement, reshuffling when exhausted.
#[derive(Clone, Debug)]
pub struct NormalSampler {
    order: Vec<usize>,
    pos: usize,
}

impl NormalSampler {
    pub fn new(count: usize) -> Self {
        Self {
            order: (0..count).collect(),
            pos: count,
        }
    }

    pub fn start_epoch<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.order.shuffle(rng);
        self.pos = 0;
    }

    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.pos >= self.order.len() {
            self.start_epoch(rng);
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One training image with its routing.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    /// Source identifier; pseudo anomalies carry `pseudo:<normal id>`.
    pub id: String,
    pub role: SampleRole,
    pub targets: HeadTargets,
    pub image: ImageTensor,
}

impl BatchItem {
    pub fn new(id: impl Into<String>, role: SampleRole, mask: &AblationMask, image: ImageTensor) -> Self {
        Self {
            id: id.into(),
            role,
            targets: RoutingLabel::new(role).targets(mask),
            image,
        }
    }
}

/// Composes one batch: normals, then labelled anomalies, then pseudo anomalies.
#[allow(clippy::too_many_arguments)]
pub fn make_batch(
    split: &SplitResult,
    images: &dyn ImageProvider,
    pseudo: &PseudoSource,
    plan: &BatchPlan,
    mask: &AblationMask,
    sampler: &mut NormalSampler,
    batch_rng: &mut DraRng,
    pseudo_rng: &mut DraRng,
) -> Result<Vec<BatchItem>> {
    if split.train_normals.is_empty() {
        return Err(DraError::Data("the split has no training normals".into()));
    }
    let mut batch = Vec::with_capacity(plan.total());
    for _ in 0..plan.normals {
        let id = &split.train_normals[sampler.next(batch_rng)];
        batch.push(BatchItem::new(id.clone(), SampleRole::Normal, mask, images.load(id)?));
    }
    if plan.seen > 0 && split.train_anomalies.is_empty() {
        return Err(DraError::Config("no labelled anomalies to fill the seen quota".into()));
    }
    for _ in 0..plan.seen {
        let a = &split.train_anomalies[batch_rng.random_range(0..split.train_anomalies.len())];
        batch.push(BatchItem::new(a.id.clone(), SampleRole::SeenAnomaly, mask, images.load(&a.id)?));
    }
    for _ in 0..plan.pseudo {
        let id = &split.train_normals[batch_rng.random_range(0..split.train_normals.len())];
        let generated = pseudo.generate(&images.load(id)?, pseudo_rng)?;
        batch.push(BatchItem::new(format!("pseudo:{id}"), SampleRole::PseudoAnomaly, mask, generated.image));
    }
    Ok(batch)
}

/// Adam state for the feature network and each allocated head.
#[derive(Clone, Debug)]
pub struct Optimizers {
    backbone: Adam,
    heads: [Option<Adam>; 4],
}

impl Optimizers {
    pub fn new(model: &DraModel, config: AdamConfig) -> Self {
        Self {
            backbone: Adam::new(config, model.backbone.params()),
            heads: HeadKind::ALL.map(|h| model.heads.store(h).map(|s| Adam::new(config, s))),
        }
    }
}

fn head_index(h: HeadKind) -> usize {
    HeadKind::ALL.iter().position(|k| *k == h).expect("listed")
}

/// One optimisation step on `batch`. Components without routed samples are
/// not stepped, so their parameters stay bitwise unchanged.
pub fn train_step(
    model: &mut DraModel,
    opt: &mut Optimizers,
    batch: &[BatchItem],
    config: &TrainConfig,
    prior: Option<&PriorScoreSet>,
) -> Result<LossBreakdown> {
    let mask = model.mask();
    for (i, item) in batch.iter().enumerate() {
        if let Some((h, _)) = item.targets.routed().find(|(h, _)| !mask.enabled(*h)) {
            return Err(DraError::Consistency(format!(
                "sample {i} is routed to the disabled {} head",
                h.name()
            )));
        }
    }
    let targets: Vec<HeadTargets> = batch.iter().map(|b| b.targets).collect();
    let counts = routed_counts(&targets);
    let train_backbone = !config.freeze_backbone;
    let scales = model.spec.scales.clone();
    let levels_n = scales.len() as f64;
    let k = model.spec.k_fraction;

    let mut backbone_grads = model.backbone.params().zero_grads();
    let mut head_grads: [Option<Grads>; 4] = HeadKind::ALL.map(|h| model.heads.store(h).map(ParamStore::zero_grads));
    let mut sums = [0.0f64; 4];

    for item in batch {
        let routed: Vec<(HeadKind, bool)> = item.targets.routed().collect();
        if routed.is_empty() {
            continue;
        }
        let views = pyramid_views(&item.image, &scales, model.backbone.config())?;
        let mut levels = Vec::with_capacity(views.len());
        let mut scores = [0.0f64; 4];
        for (level, view) in views.iter().enumerate() {
            let (fm, trace) = if train_backbone {
                let (fm, t) = model.backbone.forward_train(view)?;
                (fm, Some(t))
            } else {
                (model.backbone.extract(view)?, None)
            };
            let mut per_head = Vec::with_capacity(routed.len());
            for &(h, _) in &routed {
                let input = if h == HeadKind::Residual {
                    let reference = model
                        .reference
                        .as_ref()
                        .ok_or_else(|| DraError::State("reference set is not initialised".into()))?;
                    residual_map(reference.map(level)?, &fm)?.into_array()
                } else {
                    fm.values().clone()
                };
                let (s, t) = head_forward(&model.heads, h, &input, k)?;
                scores[head_index(h)] += s;
                per_head.push((h, input, t));
            }
            levels.push((fm.shape(), trace, per_head));
        }
        let mut dscore = [0.0f64; 4];
        for &(h, y) in &routed {
            let i = head_index(h);
            let s = scores[i] / levels_n;
            if !s.is_finite() {
                sums[i] = f64::NAN;
                continue;
            }
            sums[i] += config.loss.value(s, y, prior)?;
            dscore[i] = config.loss.grad(s, y, prior)? / counts[i] as f64 / levels_n;
        }
        for ((c, h, w), trace, per_head) in levels {
            let mut dfm = Array3::zeros(c, h, w);
            for (head, input, t) in per_head {
                let i = head_index(head);
                let grads = head_grads[i].as_mut().expect("allocated head");
                if head == HeadKind::Residual {
                    let mut dres = Array3::zeros(c, h, w);
                    head_backward(&model.heads, head, &input, &t, dscore[i], grads, &mut dres)?;
                    dfm.data_mut().iter_mut().zip(dres.data()).for_each(|(a, b)| *a -= *b);
                } else {
                    head_backward(&model.heads, head, &input, &t, dscore[i], grads, &mut dfm)?;
                }
            }
            if let Some(t) = trace {
                model.backbone.backward(t, dfm, &mut backbone_grads)?;
            }
        }
    }

    let mut out = LossBreakdown::default();
    for h in HeadKind::ALL {
        let i = head_index(h);
        if counts[i] > 0 {
            let v = Some(sums[i] / counts[i] as f64);
            match h {
                HeadKind::Seen => out.seen = v,
                HeadKind::Pseudo => out.pseudo = v,
                HeadKind::Residual => out.residual = v,
                HeadKind::Normal => out.normal = v,
            }
        }
    }
    out.total = HeadKind::ALL.iter().filter_map(|h| out.get(*h)).sum();
    let grads_finite = backbone_grads.is_finite() && head_grads.iter().flatten().all(Grads::is_finite);
    if !out.total.is_finite() || !grads_finite {
        return Err(DraError::NonFiniteLoss(format!("total={} ({})", out.total, out.describe())));
    }

    let any_routed = counts.iter().any(|&c| c > 0);
    if let Some(max_norm) = config.max_grad_norm {
        let mut all: Vec<&mut Grads> = Vec::new();
        if train_backbone {
            all.push(&mut backbone_grads);
        }
        for (i, g) in head_grads.iter_mut().enumerate() {
            if let Some(g) = g {
                if counts[i] > 0 {
                    all.push(g);
                }
            }
        }
        clip_global_norm(&mut all, max_norm);
    }
    if train_backbone && any_routed {
        opt.backbone.step(model.backbone.params_mut(), &backbone_grads);
    }
    for h in HeadKind::ALL {
        let i = head_index(h);
        if counts[i] == 0 {
            continue;
        }
        if let (Some(store), Some(adam), Some(g)) = (model.heads.store_mut(h), opt.heads[i].as_mut(), head_grads[i].as_ref()) {
            adam.step(store, g);
        }
    }
    Ok(out)
}

/// Mean losses over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub per_head: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }
}

/// A trained model and its log.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: DraModel,
    pub log: TrainingLog,
}

/// Stateful training loop over one split.
pub struct Trainer<'a> {
    config: TrainConfig,
    split: &'a SplitResult,
    images: &'a dyn ImageProvider,
    pseudo: &'a PseudoSource,
    model: DraModel,
    opt: Optimizers,
    plan: BatchPlan,
    sampler: NormalSampler,
    batch_rng: DraRng,
    pseudo_rng: DraRng,
    prior_rng: DraRng,
    prior: Option<PriorScoreSet>,
    log: TrainingLog,
}

impl<'a> Trainer<'a> {
    /// Initialises the model (optionally loading pretrained feature-network
    /// parameters) and, when the residual head is enabled, its reference set.
    pub fn new(
        split: &'a SplitResult,
        images: &'a dyn ImageProvider,
        pseudo: &'a PseudoSource,
        config: &TrainConfig,
        pretrained: Option<&ParamStore>,
    ) -> Result<Self> {
        config.validate()?;
        let mask = config.ablation_mask;
        let plan = BatchPlan::new(config.batch_size, &mask, split.train_anomalies.len())?;
        if split.train_normals.is_empty() {
            return Err(DraError::Data("the split has no training normals".into()));
        }
        let seed = config.seed;
        let mut model = DraModel::new(config.model_spec(), &mut crate::rng_stream(seed, STREAM_INIT))?;
        if let Some(p) = pretrained {
            model.load_backbone(p)?;
        }
        if mask.residual {
            let refs = reference_images(split, images, pseudo, config)?;
            model.init_reference(&refs)?;
        }
        let mut prior_rng = crate::rng_stream(seed, STREAM_PRIOR);
        let prior = if config.loss.needs_prior() && config.freeze_prior {
            Some(PriorScoreSet::draw(&mut prior_rng, config.prior_size, config.prior_mean, config.prior_std)?)
        } else {
            None
        };
        Ok(Self {
            opt: Optimizers::new(&model, config.adam()),
            config: config.clone(),
            split,
            images,
            pseudo,
            model,
            plan,
            sampler: NormalSampler::new(split.train_normals.len()),
            batch_rng: crate::rng_stream(seed, STREAM_BATCH),
            pseudo_rng: crate::rng_stream(seed, STREAM_PSEUDO),
            prior_rng,
            prior,
            log: TrainingLog::default(),
        })
    }

    pub fn model(&self) -> &DraModel {
        &self.model
    }

    pub fn log(&self) -> &TrainingLog {
        &self.log
    }

    pub fn plan(&self) -> BatchPlan {
        self.plan
    }

    /// Composes the next batch.
    pub fn next_batch(&mut self) -> Result<Vec<BatchItem>> {
        make_batch(
            self.split,
            self.images,
            self.pseudo,
            &self.plan,
            &self.config.ablation_mask,
            &mut self.sampler,
            &mut self.batch_rng,
            &mut self.pseudo_rng,
        )
    }

    /// Draws a batch and takes one optimisation step on it.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let batch = self.next_batch()?;
        self.step_on(&batch)
    }

    /// One optimisation step on a caller-supplied batch.
    pub fn step_on(&mut self, batch: &[BatchItem]) -> Result<LossBreakdown> {
        let c = &self.config;
        let fresh;
        let prior = if !c.loss.needs_prior() {
            None
        } else if let Some(p) = &self.prior {
            Some(p)
        } else {
            fresh = PriorScoreSet::draw(&mut self.prior_rng, c.prior_size, c.prior_mean, c.prior_std)?;
            Some(&fresh)
        };
        train_step(&mut self.model, &mut self.opt, batch, c, prior)
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        self.sampler.start_epoch(&mut self.batch_rng);
        let iters = self.config.iterations_per_epoch;
        let mut total = 0.0;
        let mut heads = [0.0f64; 4];
        let mut seen = [0usize; 4];
        for _ in 0..iters {
            let b = self.step()?;
            total += b.total;
            for (i, h) in HeadKind::ALL.iter().enumerate() {
                if let Some(v) = b.get(*h) {
                    heads[i] += v;
                    seen[i] += 1;
                }
            }
        }
        let avg = |i: usize| (seen[i] > 0).then(|| heads[i] / seen[i] as f64);
        let record = EpochRecord {
            epoch: self.log.len(),
            mean_loss: if iters > 0 { total / iters as f64 } else { 0.0 },
            per_head: LossBreakdown {
                total: if iters > 0 { total / iters as f64 } else { 0.0 },
                seen: avg(0),
                pseudo: avg(1),
                residual: avg(2),
                normal: avg(3),
            },
        };
        self.log.epochs.push(record.clone());
        Ok(record)
    }

    pub fn finish(self) -> FitOutcome {
        FitOutcome {
            model: self.model,
            log: self.log,
        }
    }
}

/// `n_reference` training normals (distinct when possible), a share of them
/// replaced by pseudo anomalies generated from them.
fn reference_images(
    split: &SplitResult,
    images: &dyn ImageProvider,
    pseudo: &PseudoSource,
    config: &TrainConfig,
) -> Result<Vec<ImageTensor>> {
    let mut rng = crate::rng_stream(config.seed, STREAM_REFERENCE);
    let n = split.train_normals.len();
    let picks: Vec<usize> = if config.n_reference <= n {
        rand::seq::index::sample(&mut rng, n, config.n_reference).into_vec()
    } else {
        (0..config.n_reference).map(|_| rng.random_range(0..n)).collect()
    };
    let n_pseudo = (crate::math::floor(config.reference_pseudo_fraction * config.n_reference as f64) as usize)
        .min(config.n_reference);
    picks
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let img = images.load(&split.train_normals[p])?;
            if i < n_pseudo {
                Ok(pseudo.generate(&img, &mut rng)?.image)
            } else {
                Ok(img)
            }
        })
        .collect()
}

/// Trains for `config.epochs × config.iterations_per_epoch` steps.
pub fn fit(
    split: &SplitResult,
    images: &dyn ImageProvider,
    pseudo: &PseudoSource,
    config: &TrainConfig,
) -> Result<FitOutcome> {
    fit_with_backbone(split, images, pseudo, config, None)
}

pub fn fit_with_backbone(
    split: &SplitResult,
    images: &dyn ImageProvider,
    pseudo: &PseudoSource,
    config: &TrainConfig,
    pretrained: Option<&ParamStore>,
) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(split, images, pseudo, config, pretrained)?;
    for _ in 0..config.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::{sample_general, synth_generate, ImageStore, SynthSpec};

    fn toy() -> (SplitResult, ImageStore) {
        let d = synth_generate(&SynthSpec {
            train_normals: 24,
            test_normals: 8,
            per_class: 6,
            ..SynthSpec::default()
        })
        .unwrap();
        (sample_general(&d.catalog, 10, 0).unwrap(), d.images)
    }

    fn quick(mask: AblationMask) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            iterations_per_epoch: 2,
            batch_size: 8,
            backbone: BackboneConfig::tiny_with_width(4),
            ablation_mask: mask,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batch_plan_examples() {
        assert_eq!(
            BatchPlan::new(48, &AblationMask::DRA, 10).unwrap(),
            BatchPlan {
                normals: 24,
                seen: 12,
                pseudo: 12
            }
        );
        assert_eq!(
            BatchPlan::new(48, &AblationMask::DRA1A, 10).unwrap(),
            BatchPlan {
                normals: 36,
                seen: 12,
                pseudo: 0
            }
        );
        assert!(matches!(BatchPlan::new(48, &AblationMask::DRA, 0), Err(DraError::Config(_))));
        assert!(BatchPlan::new(30, &AblationMask::DRA, 1).is_err());
    }

    #[test]
    fn one_shot_batch_repeats_the_anomaly() {
        let (mut split, images) = toy();
        split.train_anomalies.truncate(1);
        split.shots = 1;
        let pseudo = PseudoSource::new(PseudoKind::Cutmix).unwrap();
        let plan = BatchPlan::new(48, &AblationMask::DRA, 1).unwrap();
        let mut sampler = NormalSampler::new(split.train_normals.len());
        let (mut a, mut b) = (crate::rng_stream(0, 1), crate::rng_stream(0, 2));
        let batch = make_batch(&split, &images, &pseudo, &plan, &AblationMask::DRA, &mut sampler, &mut a, &mut b).unwrap();
        assert_eq!(batch.len(), 48);
        let seen: Vec<_> = batch.iter().filter(|x| x.role == SampleRole::SeenAnomaly).collect();
        assert_eq!(seen.len(), 12);
        assert!(seen.iter().all(|x| x.id == split.train_anomalies[0].id));
        assert_eq!(batch.iter().filter(|x| x.role == SampleRole::PseudoAnomaly).count(), 12);
    }

    #[test]
    fn normals_cycle_without_replacement() {
        let mut s = NormalSampler::new(5);
        let mut rng = crate::rng_stream(0, 0);
        s.start_epoch(&mut rng);
        let mut first: Vec<usize> = (0..5).map(|_| s.next(&mut rng)).collect();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (split, images) = toy();
        let pseudo = PseudoSource::new(PseudoKind::Cutmix).unwrap();
        let cfg = TrainConfig { epochs: 0, ..quick(AblationMask::DRA) };
        let out = fit(&split, &images, &pseudo, &cfg).unwrap();
        assert!(out.log.is_empty());
        let t = Trainer::new(&split, &images, &pseudo, &cfg, None).unwrap();
        assert_eq!(out.model.to_store(), t.model().to_store());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (split, images) = toy();
        let pseudo = PseudoSource::new(PseudoKind::Cutmix).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick(AblationMask::DRA)
        };
        let mut t = Trainer::new(&split, &images, &pseudo, &cfg, None).unwrap();
        let before = t.model().to_store();
        let loss = t.step().unwrap();
        assert!(loss.total.is_finite());
        assert_eq!(t.model().to_store(), before);
    }

    #[test]
    fn seen_only_batch_leaves_other_heads() {
        let (split, images) = toy();
        let pseudo = PseudoSource::new(PseudoKind::Cutmix).unwrap();
        let cfg = quick(AblationMask::DRA);
        let mut t = Trainer::new(&split, &images, &pseudo, &cfg, None).unwrap();
        let mut batch = t.next_batch().unwrap();
        for item in &mut batch {
            item.targets = HeadTargets {
                seen: Some(item.role != SampleRole::Normal),
                ..HeadTargets::default()
            };
        }
        let before = t.model().heads().clone();
        let bb = t.model().backbone().params().clone();
        t.step_on(&batch).unwrap();
        let after = t.model().heads();
        assert_ne!(after.seen, before.seen);
        assert_eq!(after.pseudo, before.pseudo);
        assert_eq!(after.residual, before.residual);
        assert_eq!(after.normal, before.normal);
        assert_ne!(t.model().backbone().params(), &bb);
    }

    #[test]
    fn all_normal_batch_has_nonnegative_loss() {
        let (split, images) = toy();
        let pseudo = PseudoSource::new(PseudoKind::Cutmix).unwrap();
        let mut t = Trainer::new(&split, &images, &pseudo, &quick(AblationMask::DRA), None).unwrap();
        let batch: Vec<_> = t.next_batch().unwrap().into_iter().filter(|b| b.role == SampleRole::Normal).collect();
        let loss = t.step_on(&batch).unwrap();
        assert!(loss.total.is_finite() && loss.total >= 0.0);
    }

    #[test]
    fn training_is_deterministic_and_reference_fixed() {
        let (split, images) = toy();
        let pseudo = PseudoSource::new(PseudoKind::Cutmix).unwrap();
        let cfg = quick(AblationMask::DRA);
        let t = Trainer::new(&split, &images, &pseudo, &cfg, None).unwrap();
        let reference = t.model().reference().cloned();
        let a = fit(&split, &images, &pseudo, &cfg).unwrap();
        let b = fit(&split, &images, &pseudo, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), cfg.epochs);
        assert_eq!(a.model.to_store(), b.model.to_store());
        assert_eq!(a.model.reference().cloned(), reference);
    }

    #[test]
    fn routing_to_disabled_head_rejected() {
        let (split, images) = toy();
        let pseudo = PseudoSource::new(PseudoKind::Cutmix).unwrap();
        let mut t = Trainer::new(&split, &images, &pseudo, &quick(AblationMask::DRA1A), None).unwrap();
        let mut batch = t.next_batch().unwrap();
        batch[0].targets.normal = Some(false);
        assert!(matches!(t.step_on(&batch), Err(DraError::Consistency(_))));
    }
}
