//! The assembled detector: feature network, enabled heads and reference maps.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DraError, Result};
use crate::featurenet::{pyramid_views, Backbone, BackboneConfig, FeatureMap, ImageTensor};
use crate::heads::{
    composite_score, mil_score, normality_score, residual_score, AblationMask, HeadKind, HeadParams, HeadScores,
    ReferenceSet,
};
use crate::tensor::{Array3, ParamStore};

/// Architecture-level settings of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub mask: AblationMask,
    /// Image pyramid scales, largest first.
    pub scales: Vec<f64>,
    pub k_fraction: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            mask: AblationMask::DRA,
            scales: alloc::vec![1.0, 0.5],
            k_fraction: 0.1,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        self.backbone.validate()?;
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(DraError::Config(format!("pyramid scales {:?} must be in (0, 1]", self.scales)));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(DraError::Config(format!("k_fraction {} outside (0, 1]", self.k_fraction)));
        }
        Ok(())
    }
}

/// Per-scale head scores and the composite for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub composite: f64,
    pub per_scale: Vec<HeadScores>,
}

#[derive(Clone, Debug)]
pub struct DraModel {
    pub(crate) spec: ModelSpec,
    pub(crate) backbone: Backbone,
    pub(crate) heads: HeadParams,
    pub(crate) reference: Option<ReferenceSet>,
}

const BACKBONE_PREFIX: &str = "backbone.";
const REFERENCE_PREFIX: &str = "reference.";

impl DraModel {
    /// Freshly initialised backbone and heads; no reference set yet.
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let backbone = Backbone::new(spec.backbone.clone(), rng)?;
        let heads = HeadParams::new(&spec.mask, spec.backbone.feature_channels(), rng);
        Ok(Self {
            spec,
            backbone,
            heads,
            reference: None,
        })
    }

    /// Replaces the backbone parameters with `params` (e.g. pretrained weights).
    pub fn load_backbone(&mut self, params: &ParamStore) -> Result<()> {
        self.backbone.params_mut().load_from(params)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mask(&self) -> AblationMask {
        self.spec.mask
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn heads(&self) -> &HeadParams {
        &self.heads
    }

    pub fn reference(&self) -> Option<&ReferenceSet> {
        self.reference.as_ref()
    }

    /// Computes `M_r` from `images`. Fails if a reference set already exists.
    pub fn init_reference(&mut self, images: &[ImageTensor]) -> Result<()> {
        if self.reference.is_some() {
            return Err(DraError::State("reference set is already initialised".into()));
        }
        self.reference = Some(ReferenceSet::build(images, &self.backbone, &self.spec.scales)?);
        Ok(())
    }

    /// Scores of every enabled head at one pyramid level.
    pub fn score_map(&self, level: usize, map: &FeatureMap) -> Result<HeadScores> {
        let k = self.spec.k_fraction;
        let mut out = HeadScores::default();
        for head in self.spec.mask.heads() {
            let s = match head {
                HeadKind::Seen => mil_score(map, self.heads.seen.as_ref().expect("enabled"), k)?,
                HeadKind::Pseudo => mil_score(map, self.heads.pseudo.as_ref().expect("enabled"), k)?,
                HeadKind::Residual => {
                    let m_r = self.reference.as_ref().map(|r| r.map(level)).transpose()?;
                    residual_score(map, m_r, self.heads.residual.as_ref().expect("enabled"), k)?
                }
                HeadKind::Normal => normality_score(map, self.heads.normal.as_ref().expect("enabled"))?,
            };
            out.set(head, Some(s));
        }
        Ok(out)
    }

    /// Head scores at each pyramid scale.
    pub fn score_levels(&self, image: &ImageTensor) -> Result<Vec<HeadScores>> {
        let views = pyramid_views(image, &self.spec.scales, self.backbone.config())?;
        views
            .iter()
            .enumerate()
            .map(|(level, v)| self.score_map(level, &self.backbone.extract(v)?))
            .collect()
    }

    pub fn score(&self, image: &ImageTensor) -> Result<ImageScore> {
        let per_scale = self.score_levels(image)?;
        let composite = composite_score(&per_scale, &self.spec.mask)?;
        if !composite.is_finite() {
            return Err(DraError::Numeric(format!("composite score {composite} is not finite")));
        }
        Ok(ImageScore { composite, per_scale })
    }

    /// All parameters and reference maps as one flat named collection:
    /// `backbone.*`, `<head>.*` and `reference.<level>`.
    pub fn to_store(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for p in self.backbone.params().iter() {
            out.push(format!("{BACKBONE_PREFIX}{}", p.name), p.shape.clone(), p.data.clone());
        }
        for head in HeadKind::ALL {
            if let Some(store) = self.heads.store(head) {
                for p in store.iter() {
                    out.push(format!("{}.{}", head.name(), p.name), p.shape.clone(), p.data.clone());
                }
            }
        }
        if let Some(r) = &self.reference {
            for (level, m) in r.maps().iter().enumerate() {
                let (c, h, w) = m.shape();
                out.push(format!("{REFERENCE_PREFIX}{level}"), alloc::vec![c, h, w], m.values().data().to_vec());
            }
        }
        out
    }

    /// Rebuilds a model from [`DraModel::to_store`] output. Every array the
    /// spec requires must be present with its exact shape, and no array of a
    /// disabled head may appear.
    pub fn from_store(spec: ModelSpec, store: &ParamStore) -> Result<Self> {
        let mut rng = crate::rng_stream(0, 0);
        let mut model = Self::new(spec, &mut rng)?;
        model.backbone.params_mut().load_from(&sub_store(store, BACKBONE_PREFIX))?;
        for head in HeadKind::ALL {
            let prefix = format!("{}.", head.name());
            let sub = sub_store(store, &prefix);
            match model.heads.store_mut(head) {
                Some(dst) => dst.load_from(&sub)?,
                None if !sub.is_empty() => {
                    return Err(DraError::Incompatible(format!(
                        "stored arrays for the {} head, which this configuration disables",
                        head.name()
                    )))
                }
                None => {}
            }
        }
        let refs = sub_store(store, REFERENCE_PREFIX);
        if !refs.is_empty() {
            let mut maps = Vec::with_capacity(model.spec.scales.len());
            for level in 0..model.spec.scales.len() {
                let p = refs
                    .get(&format!("{level}"))
                    .ok_or_else(|| DraError::Incompatible(format!("missing reference map for level {level}")))?;
                let [c, h, w] = p.shape[..] else {
                    return Err(DraError::Incompatible(format!("reference map {level} is not three-dimensional")));
                };
                if c != model.spec.backbone.feature_channels() {
                    return Err(DraError::Incompatible(format!("reference map {level} has {c} channels")));
                }
                maps.push(FeatureMap::new(Array3::from_vec(c, h, w, p.data.clone())?)?);
            }
            model.reference = Some(ReferenceSet::from_maps(model.spec.scales.clone(), maps)?);
        } else if model.spec.mask.residual {
            return Err(DraError::Incompatible("the residual head is enabled but no reference maps are stored".into()));
        }
        Ok(model)
    }
}

fn sub_store(store: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for p in store.iter() {
        if let Some(rest) = p.name.strip_prefix(prefix) {
            out.push(String::from(rest), p.shape.clone(), p.data.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(mask: AblationMask) -> ModelSpec {
        ModelSpec {
            backbone: BackboneConfig::tiny_with_width(6),
            mask,
            ..ModelSpec::default()
        }
    }

    fn image(seed: u64) -> ImageTensor {
        let mut rng = crate::rng_stream(seed, 9);
        let data = (0..3 * 32 * 32).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(Array3::from_vec(3, 32, 32, data).unwrap()).unwrap()
    }

    #[test]
    fn disabled_heads_are_not_allocated() {
        let mut rng = crate::rng_stream(0, 0);
        let m = DraModel::new(tiny_spec(AblationMask::DRA1A), &mut rng).unwrap();
        assert!(m.heads.seen.is_some());
        assert!(m.heads.pseudo.is_none() && m.heads.residual.is_none() && m.heads.normal.is_none());
        let s = m.score(&image(1)).unwrap();
        assert!(s.per_scale.iter().all(|h| h.pseudo.is_none() && h.residual.is_none() && h.normal.is_none()));
    }

    #[test]
    fn residual_needs_reference() {
        let mut rng = crate::rng_stream(0, 0);
        let mut m = DraModel::new(tiny_spec(AblationMask::DRA), &mut rng).unwrap();
        assert!(matches!(m.score(&image(1)), Err(DraError::State(_))));
        m.init_reference(&[image(2), image(3)]).unwrap();
        assert!(m.score(&image(1)).is_ok());
        assert!(matches!(m.init_reference(&[image(2)]), Err(DraError::State(_))));
    }

    #[test]
    fn store_round_trip_is_bitwise() {
        let mut rng = crate::rng_stream(4, 0);
        let mut m = DraModel::new(tiny_spec(AblationMask::DRA), &mut rng).unwrap();
        m.init_reference(&[image(2), image(3)]).unwrap();
        let store = m.to_store();
        let back = DraModel::from_store(m.spec.clone(), &store).unwrap();
        let probe = image(7);
        assert_eq!(m.score(&probe).unwrap(), back.score(&probe).unwrap());
    }

    #[test]
    fn mask_mismatch_is_incompatible() {
        let mut rng = crate::rng_stream(4, 0);
        let mut m = DraModel::new(tiny_spec(AblationMask::DRA2A), &mut rng).unwrap();
        m.init_reference(&[image(2)]).unwrap();
        let store = m.to_store();
        assert!(matches!(
            DraModel::from_store(tiny_spec(AblationMask::DRA), &store),
            Err(DraError::Incompatible(_))
        ));
        assert!(matches!(
            DraModel::from_store(tiny_spec(AblationMask::DRA1A), &store),
            Err(DraError::Incompatible(_))
        ));
    }
}
