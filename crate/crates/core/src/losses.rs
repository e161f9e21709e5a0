//! Per-head losses and label routing.
//!
//! The default loss is the deviation loss: scores are standardised against a
//! Gaussian prior score set, normal samples are pulled to the prior mean and
//! anomalies pushed at least `a` standard deviations above it.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DraError, Result};
use crate::heads::{AblationMask, HeadKind, HeadScores};
use crate::math;

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Reference scores drawn from the prior, with their mean and population
/// standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorScoreSet {
    samples: Vec<f64>,
    mean: f64,
    std: f64,
}

impl PriorScoreSet {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() || !samples.iter().all(|v| v.is_finite()) {
            return Err(DraError::Input("prior needs finite samples".into()));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = math::sqrt(var);
        if std <= 0.0 {
            return Err(DraError::DegeneratePrior);
        }
        Ok(Self { samples, mean, std })
    }

    /// `count` draws from `N(mean, std²)`.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, count: usize, mean: f64, std: f64) -> Result<Self> {
        let normal = Normal::new(mean, std).map_err(|e| DraError::Config(format!("prior: {e}")))?;
        Self::from_samples((0..count).map(|_| normal.sample(rng)).collect())
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
}

/// Z-score of `score` against the prior.
pub fn deviation(score: f64, prior: &PriorScoreSet) -> Result<f64> {
    if prior.std <= 0.0 {
        return Err(DraError::DegeneratePrior);
    }
    Ok((score - prior.mean) / prior.std)
}

fn check_score(score: f64) -> Result<()> {
    if score.is_finite() {
        Ok(())
    } else {
        Err(DraError::Numeric(format!("non-finite score {score}")))
    }
}

/// `(1−y)·|dev| + y·max(0, a − dev)`.
pub fn deviation_loss(score: f64, anomalous: bool, prior: &PriorScoreSet, margin: f64) -> Result<f64> {
    check_score(score)?;
    let dev = deviation(score, prior)?;
    Ok(if anomalous { (margin - dev).max(0.0) } else { dev.abs() })
}

/// `∂/∂score` of [`deviation_loss`]. At the kinks the right derivative is used
/// for normals and zero for the hinge.
pub fn deviation_loss_grad(score: f64, anomalous: bool, prior: &PriorScoreSet, margin: f64) -> Result<f64> {
    check_score(score)?;
    let dev = deviation(score, prior)?;
    let inv = 1.0 / prior.std;
    Ok(if anomalous {
        if dev < margin {
            -inv
        } else {
            0.0
        }
    } else if dev >= 0.0 {
        inv
    } else {
        -inv
    })
}

fn clamped_prob(score: f64) -> f64 {
    math::sigmoid(score).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross-entropy on `sigmoid(score)`.
pub fn bce_loss(score: f64, anomalous: bool) -> Result<f64> {
    check_score(score)?;
    let p = clamped_prob(score);
    Ok(if anomalous { -math::ln(p) } else { -math::ln(1.0 - p) })
}

pub fn bce_loss_grad(score: f64, anomalous: bool) -> Result<f64> {
    check_score(score)?;
    let raw = math::sigmoid(score);
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&raw) {
        return Ok(0.0);
    }
    Ok(raw - if anomalous { 1.0 } else { 0.0 })
}

fn check_focal(gamma: f64, alpha: f64) -> Result<()> {
    if !(gamma >= 0.0) || !(0.0..=1.0).contains(&alpha) {
        return Err(DraError::Config(format!("focal gamma {gamma} / alpha {alpha} out of range")));
    }
    Ok(())
}

/// `−α_t (1 − p_t)^γ ln p_t` with `p = sigmoid(score)`.
pub fn focal_loss(score: f64, anomalous: bool, gamma: f64, alpha: f64) -> Result<f64> {
    check_score(score)?;
    check_focal(gamma, alpha)?;
    let p = clamped_prob(score);
    let (pt, at) = if anomalous { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    Ok(-at * math::powf(1.0 - pt, gamma) * math::ln(pt))
}

pub fn focal_loss_grad(score: f64, anomalous: bool, gamma: f64, alpha: f64) -> Result<f64> {
    check_score(score)?;
    check_focal(gamma, alpha)?;
    let raw = math::sigmoid(score);
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&raw) {
        return Ok(0.0);
    }
    let (pt, at, sign) = if anomalous { (raw, alpha, 1.0) } else { (1.0 - raw, 1.0 - alpha, -1.0) };
    let q = 1.0 - pt;
    let dl_dpt_times = gamma * math::powf(q, gamma) * pt * math::ln(pt) - math::powf(q, gamma + 1.0);
    Ok(sign * at * dl_dpt_times)
}

/// Loss applied by every head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Deviation { margin: f64 },
    Bce,
    Focal { gamma: f64, alpha: f64 },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Deviation { margin: 5.0 }
    }
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Deviation { .. } => "deviation",
            LossKind::Bce => "bce",
            LossKind::Focal { .. } => "focal",
        }
    }

    pub fn needs_prior(&self) -> bool {
        matches!(self, LossKind::Deviation { .. })
    }

    fn prior<'a>(&self, prior: Option<&'a PriorScoreSet>) -> Result<&'a PriorScoreSet> {
        prior.ok_or_else(|| DraError::State("deviation loss needs a prior score set".into()))
    }

    pub fn value(&self, score: f64, anomalous: bool, prior: Option<&PriorScoreSet>) -> Result<f64> {
        match *self {
            LossKind::Deviation { margin } => deviation_loss(score, anomalous, self.prior(prior)?, margin),
            LossKind::Bce => bce_loss(score, anomalous),
            LossKind::Focal { gamma, alpha } => focal_loss(score, anomalous, gamma, alpha),
        }
    }

    pub fn grad(&self, score: f64, anomalous: bool, prior: Option<&PriorScoreSet>) -> Result<f64> {
        match *self {
            LossKind::Deviation { margin } => deviation_loss_grad(score, anomalous, self.prior(prior)?, margin),
            LossKind::Bce => bce_loss_grad(score, anomalous),
            LossKind::Focal { gamma, alpha } => focal_loss_grad(score, anomalous, gamma, alpha),
        }
    }
}

/// Provenance of a training image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleRole {
    Normal,
    SeenAnomaly,
    PseudoAnomaly,
}

/// Per-head binary targets; `None` means the sample is not routed to that head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HeadTargets {
    pub seen: Option<bool>,
    pub pseudo: Option<bool>,
    pub residual: Option<bool>,
    pub normal: Option<bool>,
}

impl HeadTargets {
    pub fn get(&self, head: HeadKind) -> Option<bool> {
        match head {
            HeadKind::Seen => self.seen,
            HeadKind::Pseudo => self.pseudo,
            HeadKind::Residual => self.residual,
            HeadKind::Normal => self.normal,
        }
    }

    pub fn routed(&self) -> impl Iterator<Item = (HeadKind, bool)> + '_ {
        HeadKind::ALL.into_iter().filter_map(|h| self.get(h).map(|y| (h, y)))
    }
}

/// Role-derived routing: the seen head sees normals and seen anomalies, the
/// pseudo head normals and pseudo anomalies, the residual and normality heads
/// everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoutingLabel {
    pub role: SampleRole,
}

impl RoutingLabel {
    pub fn new(role: SampleRole) -> Self {
        Self { role }
    }

    /// Target for `head`, ignoring the mask.
    pub fn target(&self, head: HeadKind) -> Option<bool> {
        use SampleRole::*;
        match (head, self.role) {
            (HeadKind::Seen, PseudoAnomaly) | (HeadKind::Pseudo, SeenAnomaly) => None,
            (_, Normal) => Some(false),
            _ => Some(true),
        }
    }

    /// Targets restricted to the heads enabled in `mask`.
    pub fn targets(&self, mask: &AblationMask) -> HeadTargets {
        let t = |h| if mask.enabled(h) { self.target(h) } else { None };
        HeadTargets {
            seen: t(HeadKind::Seen),
            pseudo: t(HeadKind::Pseudo),
            residual: t(HeadKind::Residual),
            normal: t(HeadKind::Normal),
        }
    }
}

/// Per-head mean losses and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub seen: Option<f64>,
    pub pseudo: Option<f64>,
    pub residual: Option<f64>,
    pub normal: Option<f64>,
}

impl LossBreakdown {
    pub fn get(&self, head: HeadKind) -> Option<f64> {
        match head {
            HeadKind::Seen => self.seen,
            HeadKind::Pseudo => self.pseudo,
            HeadKind::Residual => self.residual,
            HeadKind::Normal => self.normal,
        }
    }

    fn set(&mut self, head: HeadKind, v: Option<f64>) {
        match head {
            HeadKind::Seen => self.seen = v,
            HeadKind::Pseudo => self.pseudo = v,
            HeadKind::Residual => self.residual = v,
            HeadKind::Normal => self.normal = v,
        }
    }

    /// `head=value` pairs, for diagnostics.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for h in HeadKind::ALL {
            if let Some(v) = self.get(h) {
                if !s.is_empty() {
                    s.push_str(", ");
                }
                s.push_str(&format!("{}={v}", h.name()));
            }
        }
        s
    }
}

/// Number of samples routed to each head.
pub fn routed_counts(targets: &[HeadTargets]) -> [usize; 4] {
    let mut counts = [0usize; 4];
    for t in targets {
        for (i, h) in HeadKind::ALL.iter().enumerate() {
            if t.get(*h).is_some() {
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Joint objective: for each head, the mean loss over samples routed to it,
/// summed over heads. Heads with no routed samples contribute nothing.
pub fn route_and_total(
    scores: &[HeadScores],
    targets: &[HeadTargets],
    mask: &AblationMask,
    loss: &LossKind,
    prior: Option<&PriorScoreSet>,
) -> Result<LossBreakdown> {
    if scores.len() != targets.len() {
        return Err(DraError::Input(format!(
            "{} score records for {} targets",
            scores.len(),
            targets.len()
        )));
    }
    let mut out = LossBreakdown::default();
    for head in HeadKind::ALL {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, (s, t)) in scores.iter().zip(targets).enumerate() {
            let Some(y) = t.get(head) else { continue };
            if !mask.enabled(head) {
                return Err(DraError::Consistency(format!(
                    "sample {i} is routed to the disabled {} head",
                    head.name()
                )));
            }
            let score = s.get(head).ok_or_else(|| {
                DraError::Consistency(format!("sample {i} is routed to {} but has no score", head.name()))
            })?;
            sum += loss.value(score, y, prior)?;
            n += 1;
        }
        if n > 0 {
            out.set(head, Some(sum / n as f64));
        }
    }
    out.total = HeadKind::ALL.iter().filter_map(|h| out.get(*h)).sum();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_prior() -> PriorScoreSet {
        PriorScoreSet::from_samples(alloc::vec![-1.0, 1.0]).unwrap()
    }

    #[test]
    fn deviation_examples() {
        let p = PriorScoreSet::from_samples(alloc::vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p.mean(), 2.0);
        assert!((p.std() - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(deviation(2.0, &p).unwrap(), 0.0);
        assert!((deviation(3.0, &p).unwrap() - 1.224744871391589).abs() < 1e-12);
        let u = unit_prior();
        assert_eq!(deviation(2.0, &u).unwrap(), 2.0);
        assert_eq!(PriorScoreSet::from_samples(alloc::vec![4.0, 4.0]), Err(DraError::DegeneratePrior));
    }

    #[test]
    fn deviation_loss_examples() {
        let u = unit_prior();
        assert_eq!(deviation_loss(-1.5, false, &u, 5.0).unwrap(), 1.5);
        assert_eq!(deviation_loss(6.0, true, &u, 5.0).unwrap(), 0.0);
        assert_eq!(deviation_loss(3.0, true, &u, 5.0).unwrap(), 2.0);
        assert!(matches!(deviation_loss(f64::NAN, true, &u, 5.0), Err(DraError::Numeric(_))));
    }

    #[test]
    fn bce_and_focal_examples() {
        assert!(bce_loss(60.0, true).unwrap() <= 1.1e-7);
        let f = focal_loss(0.0, true, 2.0, 0.25).unwrap();
        assert!((f - 0.25 * 0.25 * core::f64::consts::LN_2).abs() < 1e-15);
        assert!((f - 0.04332).abs() < 1e-5);
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let mut rng = crate::rng_stream(9, 0);
        for i in 0..100 {
            let s: f64 = rng.random_range(-8.0..8.0);
            let y = i % 2 == 0;
            let a = focal_loss(s, y, 0.0, 0.5).unwrap();
            let b = 0.5 * bce_loss(s, y).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bce_and_focal_gradients_match_finite_differences() {
        let mut rng = crate::rng_stream(10, 0);
        for i in 0..100 {
            let s: f64 = rng.random_range(-6.0..6.0);
            let y = i % 3 == 0;
            let h = 1e-6;
            let nb = (bce_loss(s + h, y).unwrap() - bce_loss(s - h, y).unwrap()) / (2.0 * h);
            assert!((nb - bce_loss_grad(s, y).unwrap()).abs() < 1e-6);
            let nf = (focal_loss(s + h, y, 2.0, 0.25).unwrap() - focal_loss(s - h, y, 2.0, 0.25).unwrap()) / (2.0 * h);
            assert!((nf - focal_loss_grad(s, y, 2.0, 0.25).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn routing_table() {
        use SampleRole::*;
        let m = AblationMask::DRA;
        let n = RoutingLabel::new(Normal).targets(&m);
        assert_eq!(n, HeadTargets { seen: Some(false), pseudo: Some(false), residual: Some(false), normal: Some(false) });
        let s = RoutingLabel::new(SeenAnomaly).targets(&m);
        assert_eq!(s, HeadTargets { seen: Some(true), pseudo: None, residual: Some(true), normal: Some(true) });
        let p = RoutingLabel::new(PseudoAnomaly).targets(&m);
        assert_eq!(p, HeadTargets { seen: None, pseudo: Some(true), residual: Some(true), normal: Some(true) });
        let p1 = RoutingLabel::new(PseudoAnomaly).targets(&AblationMask::DRA1A);
        assert_eq!(p1, HeadTargets::default());
    }

    fn scores(v: f64, mask: &AblationMask) -> HeadScores {
        let mut s = HeadScores::default();
        for h in mask.heads() {
            s.set(h, Some(v));
        }
        s
    }

    #[test]
    fn route_and_total_examples() {
        let u = unit_prior();
        let loss = LossKind::default();
        let m = AblationMask::DRA;
        // all normals with zero deviation -> zero total
        let t = alloc::vec![RoutingLabel::new(SampleRole::Normal).targets(&m); 3];
        let s = alloc::vec![scores(0.0, &m); 3];
        let b = route_and_total(&s, &t, &m, &loss, Some(&u)).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!(b.seen, Some(0.0));
        assert_eq!(b.normal, Some(0.0));

        // a pseudo anomaly alone feeds pseudo, residual and normal but not seen
        let t = alloc::vec![RoutingLabel::new(SampleRole::PseudoAnomaly).targets(&m)];
        let s = alloc::vec![scores(1.0, &m)];
        let b = route_and_total(&s, &t, &m, &loss, Some(&u)).unwrap();
        assert_eq!(b.seen, None);
        assert_eq!(b.pseudo, Some(4.0));
        assert_eq!(b.total, 12.0);

        // routed to a disabled head
        let b = route_and_total(&s, &t, &AblationMask::DRA1A, &loss, Some(&u));
        assert!(matches!(b, Err(DraError::Consistency(_))));
    }

    #[test]
    fn route_and_total_is_linear_in_head_means() {
        let u = unit_prior();
        let m = AblationMask::DRA;
        let loss = LossKind::default();
        let roles = [SampleRole::Normal, SampleRole::SeenAnomaly, SampleRole::PseudoAnomaly, SampleRole::Normal];
        let t: Vec<_> = roles.iter().map(|r| RoutingLabel::new(*r).targets(&m)).collect();
        // normals at positive deviation d have loss d; doubling d doubles each mean
        let s1: Vec<_> = [0.5, 10.0, 10.0, 1.5].iter().map(|&v| scores(v, &m)).collect();
        let s2: Vec<_> = [1.0, 10.0, 10.0, 3.0].iter().map(|&v| scores(v, &m)).collect();
        let a = route_and_total(&s1, &t, &m, &loss, Some(&u)).unwrap();
        let b = route_and_total(&s2, &t, &m, &loss, Some(&u)).unwrap();
        assert!((b.total - 2.0 * a.total).abs() < 1e-12);
    }
}
