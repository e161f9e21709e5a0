//! Scoring heads.
//!
//! The seen, pseudo and residual heads share the same machinery: a 1×1
//! patch classifier turns every feature vector `d_i` into a patch score, and
//! top-K multiple-instance pooling averages the K largest. The normality head
//! pools the map globally and applies a two-layer classifier.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DraError, Result};
use crate::featurenet::{Backbone, FeatureMap};
use crate::math;
use crate::tensor::{Array3, Grads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Seen,
    Pseudo,
    Residual,
    Normal,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Seen, HeadKind::Pseudo, HeadKind::Residual, HeadKind::Normal];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Seen => "seen",
            HeadKind::Pseudo => "pseudo",
            HeadKind::Residual => "residual",
            HeadKind::Normal => "normal",
        }
    }

    pub fn is_abnormality(self) -> bool {
        !matches!(self, HeadKind::Normal)
    }
}

/// Which heads are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMask {
    pub seen: bool,
    pub pseudo: bool,
    pub residual: bool,
    pub normal: bool,
}

impl AblationMask {
    pub const DRA1A: AblationMask = AblationMask::new(true, false, false, false);
    pub const DRA2A: AblationMask = AblationMask::new(true, true, false, false);
    pub const DRA3AR: AblationMask = AblationMask::new(true, true, true, false);
    pub const DRA3AN: AblationMask = AblationMask::new(true, true, false, true);
    pub const DRA: AblationMask = AblationMask::new(true, true, true, true);

    /// Preset names in ablation-table order.
    pub const PRESETS: [&'static str; 5] = ["DRA1A", "DRA2A", "DRA3Ar", "DRA3An", "DRA"];

    pub const fn new(seen: bool, pseudo: bool, residual: bool, normal: bool) -> Self {
        Self {
            seen,
            pseudo,
            residual,
            normal,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "DRA1A" => Ok(Self::DRA1A),
            "DRA2A" => Ok(Self::DRA2A),
            "DRA3Ar" => Ok(Self::DRA3AR),
            "DRA3An" => Ok(Self::DRA3AN),
            "DRA" => Ok(Self::DRA),
            other => Err(DraError::Config(format!("unknown preset `{other}`"))),
        }
    }

    /// The preset name, when the mask is one of the named presets.
    pub fn preset_name(&self) -> Option<&'static str> {
        Self::PRESETS
            .iter()
            .copied()
            .find(|n| Self::preset(n).map(|m| m == *self).unwrap_or(false))
    }

    pub fn enabled(&self, head: HeadKind) -> bool {
        match head {
            HeadKind::Seen => self.seen,
            HeadKind::Pseudo => self.pseudo,
            HeadKind::Residual => self.residual,
            HeadKind::Normal => self.normal,
        }
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadKind> + '_ {
        HeadKind::ALL.into_iter().filter(|h| self.enabled(*h))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.seen || self.pseudo || self.residual) {
            return Err(DraError::Config("at least one abnormality head must be enabled".into()));
        }
        Ok(())
    }
}

/// Patch-wise anomaly scores, one per feature-map cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    scores: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != height * width {
            return Err(DraError::Shape(format!(
                "{} scores for a {height}x{width} map",
                scores.len()
            )));
        }
        if !scores.iter().all(|s| s.is_finite()) {
            return Err(DraError::Numeric("score map contains non-finite values".into()));
        }
        Ok(Self { height, width, scores })
    }

    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        let n = scores.len();
        Self::new(1, n, scores)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// `K = max(1, ⌊fraction · n⌋)`.
pub fn top_k_count(n: usize, k_fraction: f64) -> usize {
    (math::floor(k_fraction * n as f64) as usize).clamp(1, n.max(1))
}

fn check_fraction(k_fraction: f64) -> Result<()> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(DraError::Config(format!("k_fraction {k_fraction} outside (0, 1]")));
    }
    Ok(())
}

/// Top-K pooling that also reports which entries were selected. Among equal
/// scores the lowest index wins.
pub fn topk_select(scores: &ScoreMap, k_fraction: f64) -> Result<(f64, Vec<usize>)> {
    check_fraction(k_fraction)?;
    if scores.is_empty() {
        return Err(DraError::Input("cannot pool an empty score map".into()));
    }
    let s = scores.scores();
    let k = top_k_count(s.len(), k_fraction);
    let mut order: Vec<usize> = (0..s.len()).collect();
    let key = |a: &usize, b: &usize| s[*b].total_cmp(&s[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, key);
        order.truncate(k);
    }
    order.sort_unstable_by(key);
    let mean = math::corrected_mean(order.iter().map(|&i| s[i]));
    Ok((mean, order))
}

/// Mean of the K largest patch scores.
pub fn topk_mil_pool(scores: &ScoreMap, k_fraction: f64) -> Result<f64> {
    topk_select(scores, k_fraction).map(|(v, _)| v)
}

/// A 1×1 convolution from `c′` channels to one score per location.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchClassifier {
    params: ParamStore,
    weight: ParamId,
    bias: ParamId,
}

impl PatchClassifier {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let bound = 1.0 / math::sqrt(channels as f64);
        let w = (0..channels).map(|_| rng.random_range(-bound..=bound)).collect();
        let b = rng.random_range(-bound..=bound);
        Self::from_weights(w, b)
    }

    pub fn from_weights(weight: Vec<f64>, bias: f64) -> Self {
        let mut params = ParamStore::new();
        let c = weight.len();
        let w = params.push("weight", vec![c], weight);
        let b = params.push("bias", vec![1], vec![bias]);
        Self {
            params,
            weight: w,
            bias: b,
        }
    }

    pub fn channels(&self) -> usize {
        self.params.values(self.weight).len()
    }

    pub fn weight(&self) -> &[f64] {
        self.params.values(self.weight)
    }

    pub fn bias(&self) -> f64 {
        self.params.values(self.bias)[0]
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn backward(&self, map: &Array3, selected: &[usize], grad: f64, grads: &mut Grads, dmap: &mut Array3) {
        let k = selected.len() as f64;
        let g = grad / k;
        let w = self.weight();
        let n = map.spatial();
        {
            let gw = grads.buf_mut(self.weight);
            for (c, gwc) in gw.iter_mut().enumerate() {
                let plane = &map.data()[c * n..(c + 1) * n];
                *gwc += g * selected.iter().map(|&i| plane[i]).sum::<f64>();
            }
        }
        grads.buf_mut(self.bias)[0] += grad;
        for (c, &wc) in w.iter().enumerate() {
            let plane = dmap.plane_mut(c);
            for &i in selected {
                plane[i] += g * wc;
            }
        }
    }
}

/// Applies the classifier independently at every spatial location.
pub fn patch_scores(map: &FeatureMap, classifier: &PatchClassifier) -> Result<ScoreMap> {
    patch_scores_raw(map.values(), classifier)
}

fn patch_scores_raw(map: &Array3, classifier: &PatchClassifier) -> Result<ScoreMap> {
    let (c, h, w) = map.shape();
    if classifier.channels() != c {
        return Err(DraError::Shape(format!(
            "classifier expects {} channels, map has {c}",
            classifier.channels()
        )));
    }
    let mut scores = vec![classifier.bias(); h * w];
    for (ch, &wc) in classifier.weight().iter().enumerate() {
        for (s, &v) in scores.iter_mut().zip(map.plane(ch)) {
            *s += wc * v;
        }
    }
    ScoreMap::new(h, w, scores)
}

/// `g_s` / `g_p`: patch classifier followed by top-K pooling.
pub fn mil_score(map: &FeatureMap, classifier: &PatchClassifier, k_fraction: f64) -> Result<f64> {
    topk_mil_pool(&patch_scores(map, classifier)?, k_fraction)
}

/// Seen-abnormality score.
pub fn seen_score(map: &FeatureMap, classifier: &PatchClassifier, k_fraction: f64) -> Result<f64> {
    mil_score(map, classifier, k_fraction)
}

/// Pseudo-abnormality score; identical machinery to [`seen_score`] with its own weights.
pub fn pseudo_score(map: &FeatureMap, classifier: &PatchClassifier, k_fraction: f64) -> Result<f64> {
    mil_score(map, classifier, k_fraction)
}

/// Element-wise mean of `maps`. Maps are summed in a canonical order (sorted
/// by content, then pairwise), so any permutation of the input gives the
/// same bits.
pub fn mean_feature_map(maps: &[FeatureMap]) -> Result<FeatureMap> {
    let first = maps
        .first()
        .ok_or_else(|| DraError::Input("reference set is empty".into()))?;
    if let Some(bad) = maps.iter().find(|m| m.shape() != first.shape()) {
        return Err(DraError::Shape(format!(
            "reference maps disagree in shape: {:?} vs {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    let mut order: Vec<&FeatureMap> = maps.iter().collect();
    order.sort_by(|a, b| {
        a.values()
            .data()
            .iter()
            .zip(b.values().data())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let mut level: Vec<Vec<f64>> = order.iter().map(|m| m.values().data().to_vec()).collect();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += *y);
            }
            next.push(a);
        }
        level = next;
    }
    let n = maps.len() as f64;
    let mut sum = level.pop().expect("non-empty");
    sum.iter_mut().for_each(|v| *v /= n);
    let (c, h, w) = first.shape();
    FeatureMap::new(Array3::from_vec(c, h, w, sum)?)
}

/// `M_r`: mean feature map of the reference images under `backbone`.
pub fn compute_reference_map(refs: &[crate::featurenet::ImageTensor], backbone: &Backbone) -> Result<FeatureMap> {
    if refs.is_empty() {
        return Err(DraError::Input("reference set is empty".into()));
    }
    let maps = refs.iter().map(|r| backbone.extract(r)).collect::<Result<Vec<_>>>()?;
    mean_feature_map(&maps)
}

/// `M_r ⊖ M_x`.
pub fn residual_map(m_r: &FeatureMap, m_x: &FeatureMap) -> Result<FeatureMap> {
    if m_r.shape() != m_x.shape() {
        return Err(DraError::Shape(format!(
            "residual operands differ: {:?} vs {:?}",
            m_r.shape(),
            m_x.shape()
        )));
    }
    let (c, h, w) = m_r.shape();
    let data = m_r
        .values()
        .data()
        .iter()
        .zip(m_x.values().data())
        .map(|(r, x)| r - x)
        .collect();
    FeatureMap::new(Array3::from_vec(c, h, w, data)?)
}

/// Fixed reference images and their mean maps, one per pyramid scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    scales: Vec<f64>,
    maps: Vec<FeatureMap>,
}

impl ReferenceSet {
    /// Computes `M_r` at every scale. Written once; never refreshed.
    pub fn build(images: &[crate::featurenet::ImageTensor], backbone: &Backbone, scales: &[f64]) -> Result<Self> {
        if images.is_empty() {
            return Err(DraError::Input("reference set is empty".into()));
        }
        let mut maps = Vec::with_capacity(scales.len());
        for &s in scales {
            let views = images
                .iter()
                .map(|img| {
                    crate::featurenet::pyramid_views(img, &[s], backbone.config())
                        .map(|mut v| v.pop().expect("one view"))
                })
                .collect::<Result<Vec<_>>>()?;
            maps.push(compute_reference_map(&views, backbone)?);
        }
        Ok(Self {
            scales: scales.to_vec(),
            maps,
        })
    }

    pub fn from_maps(scales: Vec<f64>, maps: Vec<FeatureMap>) -> Result<Self> {
        if scales.len() != maps.len() || maps.is_empty() {
            return Err(DraError::Shape("one reference map per scale is required".into()));
        }
        Ok(Self { scales, maps })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }

    /// `M_r` at pyramid level `level`.
    pub fn map(&self, level: usize) -> Result<&FeatureMap> {
        self.maps
            .get(level)
            .ok_or_else(|| DraError::State(format!("no reference map for pyramid level {level}")))
    }
}

/// `g_r`: top-K pooled patch scores of the residual `M_r ⊖ M_x`.
pub fn residual_score(
    m_x: &FeatureMap,
    reference: Option<&FeatureMap>,
    classifier: &PatchClassifier,
    k_fraction: f64,
) -> Result<f64> {
    let m_r = reference.ok_or_else(|| DraError::State("reference set is not initialised".into()))?;
    mil_score(&residual_map(m_r, m_x)?, classifier, k_fraction)
}

/// Two-layer classifier over the spatially averaged feature vector:
/// `w₂ · relu(W₁ p + b₁) + b₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalityClassifier {
    params: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl NormalityClassifier {
    /// Hidden width `c′/2` (at least 1).
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let hidden = (channels / 2).max(1);
        let b_in = 1.0 / math::sqrt(channels as f64);
        let b_hid = 1.0 / math::sqrt(hidden as f64);
        let mut u = |n: usize, b: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-b..=b)).collect() };
        let w1 = u(hidden * channels, b_in);
        let b1 = u(hidden, b_in);
        let w2 = u(hidden, b_hid);
        let b2 = u(1, b_hid)[0];
        Self::from_weights(channels, w1, b1, w2, b2)
    }

    pub fn from_weights(channels: usize, w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: f64) -> Self {
        let hidden = b1.len();
        debug_assert_eq!(w1.len(), hidden * channels);
        let mut params = ParamStore::new();
        let w1 = params.push("fc1.weight", vec![hidden, channels], w1);
        let b1 = params.push("fc1.bias", vec![hidden], b1);
        let w2 = params.push("fc2.weight", vec![1, hidden], w2);
        let b2 = params.push("fc2.bias", vec![1], vec![b2]);
        Self { params, w1, b1, w2, b2 }
    }

    pub fn channels(&self) -> usize {
        let hidden = self.hidden();
        self.params.values(self.w1).len() / hidden
    }

    pub fn hidden(&self) -> usize {
        self.params.values(self.b1).len()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn hidden_pre(&self, pooled: &[f64]) -> Vec<f64> {
        let c = pooled.len();
        let w1 = self.params.values(self.w1);
        self.params
            .values(self.b1)
            .iter()
            .enumerate()
            .map(|(j, &b)| b + w1[j * c..(j + 1) * c].iter().zip(pooled).map(|(w, p)| w * p).sum::<f64>())
            .collect()
    }

    fn output(&self, pre: &[f64]) -> f64 {
        let w2 = self.params.values(self.w2);
        self.params.values(self.b2)[0] + pre.iter().zip(w2).map(|(h, w)| h.max(0.0) * w).sum::<f64>()
    }

    fn backward(&self, map: &Array3, pooled: &[f64], grad: f64, grads: &mut Grads, dmap: &mut Array3) {
        let c = pooled.len();
        let pre = self.hidden_pre(pooled);
        let w1 = self.params.values(self.w1);
        let w2 = self.params.values(self.w2);
        grads.buf_mut(self.b2)[0] += grad;
        let mut dpooled = vec![0.0; c];
        for (j, &h) in pre.iter().enumerate() {
            grads.buf_mut(self.w2)[j] += grad * h.max(0.0);
            if h > 0.0 {
                let dh = grad * w2[j];
                grads.buf_mut(self.b1)[j] += dh;
                let gw1 = &mut grads.buf_mut(self.w1)[j * c..(j + 1) * c];
                for (i, g) in gw1.iter_mut().enumerate() {
                    *g += dh * pooled[i];
                    dpooled[i] += dh * w1[j * c + i];
                }
            }
        }
        let n = map.spatial() as f64;
        for (ch, &dp) in dpooled.iter().enumerate() {
            let g = dp / n;
            dmap.plane_mut(ch).iter_mut().for_each(|v| *v += g);
        }
    }
}

/// Per-channel spatial mean, `(1/(h′w′)) Σ_i d_i`.
pub fn global_average_pool(map: &FeatureMap) -> Vec<f64> {
    let m = map.values();
    (0..m.channels())
        .map(|c| math::corrected_mean(m.plane(c).iter().copied()))
        .collect()
}

/// `g_n`: holistic score of the pooled feature vector.
pub fn normality_score(map: &FeatureMap, classifier: &NormalityClassifier) -> Result<f64> {
    if classifier.channels() != map.channels() {
        return Err(DraError::Shape(format!(
            "normality classifier expects {} channels, map has {}",
            classifier.channels(),
            map.channels()
        )));
    }
    let pooled = global_average_pool(map);
    Ok(classifier.output(&classifier.hidden_pre(&pooled)))
}

/// Head parameters. Heads disabled by the mask are `None` and never allocated.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub seen: Option<PatchClassifier>,
    pub pseudo: Option<PatchClassifier>,
    pub residual: Option<PatchClassifier>,
    pub normal: Option<NormalityClassifier>,
}

impl HeadParams {
    pub fn new<R: Rng + ?Sized>(mask: &AblationMask, channels: usize, rng: &mut R) -> Self {
        Self {
            seen: mask.seen.then(|| PatchClassifier::new(channels, rng)),
            pseudo: mask.pseudo.then(|| PatchClassifier::new(channels, rng)),
            residual: mask.residual.then(|| PatchClassifier::new(channels, rng)),
            normal: mask.normal.then(|| NormalityClassifier::new(channels, rng)),
        }
    }

    pub fn mask(&self) -> AblationMask {
        AblationMask::new(
            self.seen.is_some(),
            self.pseudo.is_some(),
            self.residual.is_some(),
            self.normal.is_some(),
        )
    }

    pub fn store(&self, head: HeadKind) -> Option<&ParamStore> {
        match head {
            HeadKind::Seen => self.seen.as_ref().map(|h| h.params()),
            HeadKind::Pseudo => self.pseudo.as_ref().map(|h| h.params()),
            HeadKind::Residual => self.residual.as_ref().map(|h| h.params()),
            HeadKind::Normal => self.normal.as_ref().map(|h| h.params()),
        }
    }

    pub fn store_mut(&mut self, head: HeadKind) -> Option<&mut ParamStore> {
        match head {
            HeadKind::Seen => self.seen.as_mut().map(|h| h.params_mut()),
            HeadKind::Pseudo => self.pseudo.as_mut().map(|h| h.params_mut()),
            HeadKind::Residual => self.residual.as_mut().map(|h| h.params_mut()),
            HeadKind::Normal => self.normal.as_mut().map(|h| h.params_mut()),
        }
    }

    /// Scalar parameter count over allocated heads.
    pub fn numel(&self) -> usize {
        HeadKind::ALL.iter().filter_map(|h| self.store(*h)).map(|s| s.numel()).sum()
    }
}

/// Head outputs for one image at one pyramid scale. Disabled heads are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadScores {
    pub seen: Option<f64>,
    pub pseudo: Option<f64>,
    pub residual: Option<f64>,
    pub normal: Option<f64>,
}

impl HeadScores {
    pub fn get(&self, head: HeadKind) -> Option<f64> {
        match head {
            HeadKind::Seen => self.seen,
            HeadKind::Pseudo => self.pseudo,
            HeadKind::Residual => self.residual,
            HeadKind::Normal => self.normal,
        }
    }

    pub fn set(&mut self, head: HeadKind, value: Option<f64>) {
        match head {
            HeadKind::Seen => self.seen = value,
            HeadKind::Pseudo => self.pseudo = value,
            HeadKind::Residual => self.residual = value,
            HeadKind::Normal => self.normal = value,
        }
    }

    pub fn present(&self) -> AblationMask {
        AblationMask::new(
            self.seen.is_some(),
            self.pseudo.is_some(),
            self.residual.is_some(),
            self.normal.is_some(),
        )
    }

    pub fn is_finite(&self) -> bool {
        HeadKind::ALL.iter().filter_map(|h| self.get(*h)).all(|v| v.is_finite())
    }

    /// Sum of abnormality scores minus the normality score.
    pub fn composite(&self) -> f64 {
        let abnormal = self.seen.unwrap_or(0.0) + self.pseudo.unwrap_or(0.0) + self.residual.unwrap_or(0.0);
        match self.normal {
            Some(n) => abnormal - n,
            None => abnormal,
        }
    }

    /// Per-head mean over pyramid levels.
    pub fn mean_over(levels: &[HeadScores]) -> HeadScores {
        let mut out = HeadScores::default();
        if levels.is_empty() {
            return out;
        }
        for head in HeadKind::ALL {
            let vals: Vec<f64> = levels.iter().filter_map(|l| l.get(head)).collect();
            if vals.len() == levels.len() {
                out.set(head, Some(vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
        out
    }
}

/// Final anomaly score: per scale, the enabled abnormality scores summed minus
/// the normality score, then averaged over scales.
pub fn composite_score(per_scale: &[HeadScores], mask: &AblationMask) -> Result<f64> {
    if per_scale.is_empty() {
        return Err(DraError::Input("no pyramid levels to aggregate".into()));
    }
    for (level, scores) in per_scale.iter().enumerate() {
        for head in HeadKind::ALL {
            match (scores.get(head).is_some(), mask.enabled(head)) {
                (true, false) => {
                    return Err(DraError::Consistency(format!(
                        "level {level} carries a {} score but the head is disabled",
                        head.name()
                    )))
                }
                (false, true) => {
                    return Err(DraError::Consistency(format!(
                        "level {level} is missing the enabled {} score",
                        head.name()
                    )))
                }
                _ => {}
            }
        }
    }
    let total: f64 = per_scale.iter().map(HeadScores::composite).sum();
    Ok(total / per_scale.len() as f64)
}

/// Intermediate values one head needs to backpropagate a score.
pub(crate) enum HeadTrace {
    Patch { selected: Vec<usize> },
    Normal { pooled: Vec<f64> },
}

/// Scores `head` on `map` (already the residual for the residual head),
/// keeping what [`head_backward`] needs.
pub(crate) fn head_forward(
    heads: &HeadParams,
    head: HeadKind,
    input: &Array3,
    k_fraction: f64,
) -> Result<(f64, HeadTrace)> {
    match head {
        HeadKind::Normal => {
            let clf = heads.normal.as_ref().ok_or_else(|| disabled(head))?;
            let fm = FeatureMap::new(input.clone())?;
            let score = normality_score(&fm, clf)?;
            Ok((score, HeadTrace::Normal { pooled: global_average_pool(&fm) }))
        }
        _ => {
            let clf = patch_head(heads, head)?;
            let (score, selected) = topk_select(&patch_scores_raw(input, clf)?, k_fraction)?;
            Ok((score, HeadTrace::Patch { selected }))
        }
    }
}

fn disabled(head: HeadKind) -> DraError {
    DraError::Consistency(format!("{} head is disabled", head.name()))
}

fn patch_head(heads: &HeadParams, head: HeadKind) -> Result<&PatchClassifier> {
    match head {
        HeadKind::Seen => heads.seen.as_ref(),
        HeadKind::Pseudo => heads.pseudo.as_ref(),
        HeadKind::Residual => heads.residual.as_ref(),
        HeadKind::Normal => None,
    }
    .ok_or_else(|| disabled(head))
}

/// Accumulates `grad · ∂score/∂θ_head` into `grads` and `grad · ∂score/∂input`
/// into `dinput`.
pub(crate) fn head_backward(
    heads: &HeadParams,
    head: HeadKind,
    input: &Array3,
    trace: &HeadTrace,
    grad: f64,
    grads: &mut Grads,
    dinput: &mut Array3,
) -> Result<()> {
    match (head, trace) {
        (HeadKind::Normal, HeadTrace::Normal { pooled }) => {
            let clf = heads.normal.as_ref().ok_or_else(|| disabled(head))?;
            clf.backward(input, pooled, grad, grads, dinput);
        }
        (_, HeadTrace::Patch { selected }) => {
            patch_head(heads, head)?.backward(input, selected, grad, grads, dinput);
        }
        _ => return Err(DraError::State("head trace does not match head kind".into())),
    }
    Ok(())
}
