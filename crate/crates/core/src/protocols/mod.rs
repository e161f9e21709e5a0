//! Open-set experiment protocols.
//!
//! A [`DatasetCatalog`] lists sample identifiers by role. The general setting
//! draws the labelled anomalies from every anomaly class and leaves the
//! remaining ones in the test set; the hard setting draws them from a single
//! class and removes that class from the test set entirely, so every test
//! anomaly is unseen.

mod synth;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DraError, Result};
use crate::featurenet::ImageTensor;

pub use synth::{synth_generate, ClassRecipe, DefectKind, DefectRecipe, SynthDataset, SynthSpec};

/// Fraction of normals that go to training when a dataset is not pre-split.
pub const DEFAULT_NORMAL_RATIO: f64 = 0.75;

const SPLIT_STREAM: u64 = 0x5EED_0001;
const NEST_STREAM: u64 = 0x5EED_0002;

/// Sample identifiers of a dataset, grouped by role.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetCatalog {
    pub name: String,
    /// All normals when `normal_test` is empty, otherwise the original
    /// training normals.
    pub normal_train: Vec<String>,
    /// Original test normals of a pre-split dataset.
    pub normal_test: Vec<String>,
    /// Anomaly class name to sample identifiers.
    pub anomalies: BTreeMap<String, Vec<String>>,
}

impl DatasetCatalog {
    pub fn is_presplit(&self) -> bool {
        !self.normal_test.is_empty()
    }

    pub fn anomaly_count(&self) -> usize {
        self.anomalies.values().map(Vec::len).sum()
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.anomalies.keys().map(String::as_str)
    }

    /// Every identifier in catalog order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.normal_train
            .iter()
            .chain(&self.normal_test)
            .chain(self.anomalies.values().flatten())
            .map(String::as_str)
    }

    /// Checks that identifiers are unique across all roles and classes.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.ids() {
            if !seen.insert(id) {
                return Err(DraError::Data(format!("sample `{id}` is listed more than once")));
            }
        }
        Ok(())
    }
}

/// An anomaly identifier with its class.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledId {
    pub id: String,
    pub class: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    General,
    Hard,
}

impl Setting {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Self::General),
            "hard" => Ok(Self::Hard),
            other => Err(DraError::Config(format!("unknown protocol `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::General => "general",
            Self::Hard => "hard",
        }
    }
}

/// Train/test partition produced by a protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub setting: Setting,
    pub shots: usize,
    pub seed: u64,
    pub seen_class: Option<String>,
    pub train_normals: Vec<String>,
    pub train_anomalies: Vec<LabeledId>,
    pub test_normals: Vec<String>,
    pub test_anomalies: Vec<LabeledId>,
    /// Set when no anomaly is left for testing.
    pub degenerate: bool,
}

impl SplitResult {
    /// Checks the protocol invariants: train/test disjointness, the shot count
    /// and, in the hard setting, the absence of the seen class from the test set.
    pub fn check(&self) -> Result<()> {
        if self.train_anomalies.len() != self.shots {
            return Err(DraError::Consistency(format!(
                "{} training anomalies for {} shots",
                self.train_anomalies.len(),
                self.shots
            )));
        }
        let train: BTreeSet<&str> = self
            .train_normals
            .iter()
            .map(String::as_str)
            .chain(self.train_anomalies.iter().map(|a| a.id.as_str()))
            .collect();
        let test = self.test_normals.iter().map(String::as_str).chain(self.test_anomalies.iter().map(|a| a.id.as_str()));
        for id in test {
            if train.contains(id) {
                return Err(DraError::Consistency(format!("sample `{id}` is in both train and test")));
            }
        }
        if self.setting == Setting::Hard {
            let seen = self.seen_class.as_deref().unwrap_or_default();
            if let Some(a) = self.test_anomalies.iter().find(|a| a.class == seen) {
                return Err(DraError::Consistency(format!("test anomaly `{}` has the seen class", a.id)));
            }
            if self.train_anomalies.iter().any(|a| a.class != seen) {
                return Err(DraError::Consistency("hard-setting training anomaly outside the seen class".into()));
            }
        }
        Ok(())
    }
}

/// Splits normals into train and test. Pre-split catalogs keep their original
/// split; otherwise `floor(ratio · n)` random normals go to training.
pub fn split_normals<R: Rng + ?Sized>(catalog: &DatasetCatalog, ratio: f64, rng: &mut R) -> Result<(Vec<String>, Vec<String>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DraError::Config(format!("normal split ratio {ratio} outside (0, 1)")));
    }
    if catalog.is_presplit() {
        if catalog.normal_train.is_empty() {
            return Err(DraError::Data("no training normals".into()));
        }
        return Ok((catalog.normal_train.clone(), catalog.normal_test.clone()));
    }
    let n = catalog.normal_train.len();
    if n < 2 {
        return Err(DraError::Data(format!("{n} normals cannot be split into train and test")));
    }
    let n_train = (libm::floor(ratio * n as f64) as usize).clamp(1, n - 1);
    let mut ids = catalog.normal_train.clone();
    ids.shuffle(rng);
    let test = ids.split_off(n_train);
    Ok((ids, test))
}

fn labeled(catalog: &DatasetCatalog) -> Vec<LabeledId> {
    catalog
        .anomalies
        .iter()
        .flat_map(|(class, ids)| {
            ids.iter().map(move |id| LabeledId {
                id: id.clone(),
                class: class.clone(),
            })
        })
        .collect()
}

/// Removes `chosen` (positions into `pool`) and returns `(chosen, rest)`, both
/// in a deterministic order.
fn take(pool: Vec<LabeledId>, mut chosen: Vec<usize>) -> (Vec<LabeledId>, Vec<LabeledId>) {
    let picked: Vec<LabeledId> = chosen.iter().map(|&i| pool[i].clone()).collect();
    chosen.sort_unstable();
    let rest = pool
        .into_iter()
        .enumerate()
        .filter(|(i, _)| chosen.binary_search(i).is_err())
        .map(|(_, a)| a)
        .collect();
    (picked, rest)
}

fn draw_indices<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, k).into_vec()
}

/// General setting with the default normal ratio.
pub fn sample_general(catalog: &DatasetCatalog, shots: usize, seed: u64) -> Result<SplitResult> {
    general_with_ratio(catalog, shots, seed, DEFAULT_NORMAL_RATIO)
}

/// General setting: `shots` anomalies drawn uniformly from all anomaly
/// instances and removed from the test set.
pub fn general_with_ratio(catalog: &DatasetCatalog, shots: usize, seed: u64, ratio: f64) -> Result<SplitResult> {
    catalog.validate()?;
    let mut rng = crate::rng_stream(seed, SPLIT_STREAM);
    let (train_normals, test_normals) = split_normals(catalog, ratio, &mut rng)?;
    let pool = labeled(catalog);
    if shots == 0 || shots > pool.len() {
        return Err(DraError::Data(format!("cannot draw {shots} anomalies from {} available", pool.len())));
    }
    let chosen = draw_indices(&mut rng, pool.len(), shots);
    let (train_anomalies, test_anomalies) = take(pool, chosen);
    let degenerate = test_anomalies.is_empty();
    Ok(SplitResult {
        setting: Setting::General,
        shots,
        seed,
        seen_class: None,
        train_normals,
        train_anomalies,
        test_normals,
        test_anomalies,
        degenerate,
    })
}

/// Hard setting with the default normal ratio.
pub fn sample_hard(catalog: &DatasetCatalog, shots: usize, seen_class: &str, seed: u64) -> Result<SplitResult> {
    hard_with_ratio(catalog, shots, seen_class, seed, DEFAULT_NORMAL_RATIO)
}

/// Hard setting: `shots` anomalies from `seen_class`, which is then removed
/// from the test set; test anomalies are all the other classes.
pub fn hard_with_ratio(catalog: &DatasetCatalog, shots: usize, seen_class: &str, seed: u64, ratio: f64) -> Result<SplitResult> {
    catalog.validate()?;
    if catalog.anomalies.len() < 2 {
        return Err(DraError::ProtocolNotApplicable(format!(
            "the hard setting needs at least two anomaly classes, `{}` has {}",
            catalog.name,
            catalog.anomalies.len()
        )));
    }
    let class_ids = catalog
        .anomalies
        .get(seen_class)
        .ok_or_else(|| DraError::Data(format!("anomaly class `{seen_class}` is not in the catalog")))?;
    if shots == 0 || shots > class_ids.len() {
        return Err(DraError::Data(format!(
            "cannot draw {shots} anomalies from class `{seen_class}` with {}",
            class_ids.len()
        )));
    }
    let mut rng = crate::rng_stream(seed, SPLIT_STREAM);
    let (train_normals, test_normals) = split_normals(catalog, ratio, &mut rng)?;
    let (seen, others): (Vec<LabeledId>, Vec<LabeledId>) = labeled(catalog).into_iter().partition(|a| a.class == seen_class);
    let chosen = draw_indices(&mut rng, seen.len(), shots);
    let (train_anomalies, _) = take(seen, chosen);
    let degenerate = others.is_empty();
    Ok(SplitResult {
        setting: Setting::Hard,
        shots,
        seed,
        seen_class: Some(seen_class.to_string()),
        train_normals,
        train_anomalies,
        test_normals,
        test_anomalies: others,
        degenerate,
    })
}

/// One-shot split nested in a ten-shot one: the single anomaly is one of the
/// ten and the test data is exactly the same.
pub fn nest_one_from_ten(ten: &SplitResult, seed: u64) -> Result<SplitResult> {
    if ten.train_anomalies.len() != 10 {
        return Err(DraError::Input(format!(
            "nesting needs a ten-shot split, got {} training anomalies",
            ten.train_anomalies.len()
        )));
    }
    let mut rng = crate::rng_stream(seed, NEST_STREAM);
    let pick = rng.random_range(0..10);
    Ok(SplitResult {
        shots: 1,
        train_anomalies: alloc::vec![ten.train_anomalies[pick].clone()],
        ..ten.clone()
    })
}

/// Protocol parameters for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub setting: Setting,
    pub shots: usize,
    pub seen_class: Option<String>,
    pub normal_ratio: f64,
    /// Build one-shot splits by nesting in the ten-shot split of the same seed.
    pub nest_one_shot: bool,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            setting: Setting::General,
            shots: 10,
            seen_class: None,
            normal_ratio: DEFAULT_NORMAL_RATIO,
            nest_one_shot: true,
        }
    }
}

/// Builds the split for `spec` and `seed`. In the hard setting without an
/// explicit seen class, the first class in name order is used.
pub fn build_split(catalog: &DatasetCatalog, spec: &ProtocolSpec, seed: u64) -> Result<SplitResult> {
    let nest = spec.shots == 1 && spec.nest_one_shot;
    let shots = if nest { 10 } else { spec.shots };
    let split = match spec.setting {
        Setting::General => {
            if nest && catalog.anomaly_count() < 10 {
                return general_with_ratio(catalog, 1, seed, spec.normal_ratio);
            }
            general_with_ratio(catalog, shots, seed, spec.normal_ratio)?
        }
        Setting::Hard => {
            let seen = match &spec.seen_class {
                Some(c) => c.clone(),
                None => catalog
                    .class_names()
                    .next()
                    .ok_or_else(|| DraError::Data("catalog has no anomaly classes".into()))?
                    .to_string(),
            };
            let available = catalog.anomalies.get(&seen).map_or(0, Vec::len);
            if nest && available < 10 {
                return hard_with_ratio(catalog, 1, &seen, seed, spec.normal_ratio);
            }
            hard_with_ratio(catalog, shots, &seen, seed, spec.normal_ratio)?
        }
    };
    if nest {
        nest_one_from_ten(&split, seed)
    } else {
        Ok(split)
    }
}

/// Source of decoded images by identifier.
pub trait ImageProvider {
    fn load(&self, id: &str) -> Result<ImageTensor>;
}

/// In-memory image collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageStore {
    images: BTreeMap<String, ImageTensor>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, image: ImageTensor) {
        self.images.insert(id.into(), image);
    }

    pub fn get(&self, id: &str) -> Option<&ImageTensor> {
        self.images.get(id)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ImageTensor)> {
        self.images.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl ImageProvider for ImageStore {
    fn load(&self, id: &str) -> Result<ImageTensor> {
        self.images
            .get(id)
            .cloned()
            .ok_or_else(|| DraError::Data(format!("no image for sample `{id}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn catalog(normals: usize, classes: &[(&str, usize)]) -> DatasetCatalog {
        DatasetCatalog {
            name: "toy".into(),
            normal_train: (0..normals).map(|i| format!("n{i}")).collect(),
            normal_test: Vec::new(),
            anomalies: classes
                .iter()
                .map(|(c, k)| (c.to_string(), (0..*k).map(|i| format!("{c}{i}")).collect()))
                .collect(),
        }
    }

    #[test]
    fn normal_split_ratio_and_presplit() {
        let c = catalog(100, &[]);
        let mut rng = crate::rng_stream(0, 0);
        let (tr, te) = split_normals(&c, 0.75, &mut rng).unwrap();
        assert_eq!((tr.len(), te.len()), (75, 25));
        let mut all: Vec<_> = tr.iter().chain(&te).cloned().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);

        let mut pre = catalog(10, &[]);
        pre.normal_test = vec!["t0".into(), "t1".into()];
        let (tr, te) = split_normals(&pre, 0.75, &mut rng).unwrap();
        assert_eq!(tr, pre.normal_train);
        assert_eq!(te, pre.normal_test);

        assert!(matches!(split_normals(&catalog(1, &[]), 0.75, &mut rng), Err(DraError::Data(_))));
        let a = split_normals(&c, 0.75, &mut crate::rng_stream(3, 3)).unwrap();
        let b = split_normals(&c, 0.75, &mut crate::rng_stream(3, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn general_counts_and_disjointness() {
        let c = catalog(100, &[("a", 30), ("b", 30), ("c", 30)]);
        let s = sample_general(&c, 10, 1).unwrap();
        assert_eq!(s.train_anomalies.len(), 10);
        assert_eq!(s.test_anomalies.len(), 80);
        assert!(!s.degenerate);
        s.check().unwrap();
        let train: BTreeSet<_> = s.train_anomalies.iter().map(|a| &a.id).collect();
        assert!(s.test_anomalies.iter().all(|a| !train.contains(&a.id)));

        let all = sample_general(&c, 90, 1).unwrap();
        assert!(all.test_anomalies.is_empty() && all.degenerate);
        assert!(matches!(sample_general(&c, 91, 1), Err(DraError::Data(_))));
        assert_eq!(sample_general(&c, 10, 4).unwrap(), sample_general(&c, 10, 4).unwrap());
    }

    #[test]
    fn hard_setting_removal_rule() {
        let c = catalog(100, &[("a", 30), ("b", 30), ("c", 30)]);
        let ten = sample_hard(&c, 10, "a", 2).unwrap();
        assert_eq!(ten.test_anomalies.len(), 60);
        assert!(ten.test_anomalies.iter().all(|x| x.class != "a"));
        assert!(ten.train_anomalies.iter().all(|x| x.class == "a"));
        ten.check().unwrap();
        let one = sample_hard(&c, 1, "a", 2).unwrap();
        assert_eq!(one.train_anomalies.len(), 1);
        assert_eq!(one.test_anomalies, ten.test_anomalies);
        assert_eq!(one.test_normals, ten.test_normals);

        assert!(matches!(sample_hard(&c, 10, "zzz", 2), Err(DraError::Data(_))));
        let single = catalog(20, &[("a", 30)]);
        assert!(matches!(sample_hard(&single, 10, "a", 2), Err(DraError::ProtocolNotApplicable(_))));
    }

    #[test]
    fn nesting_keeps_test_data() {
        let c = catalog(60, &[("a", 20), ("b", 20)]);
        let ten = sample_general(&c, 10, 9).unwrap();
        let one = nest_one_from_ten(&ten, 9).unwrap();
        assert_eq!(one.shots, 1);
        assert!(ten.train_anomalies.contains(&one.train_anomalies[0]));
        assert_eq!(one.test_anomalies, ten.test_anomalies);
        assert_eq!(one.test_normals, ten.test_normals);
        assert_eq!(one, nest_one_from_ten(&ten, 9).unwrap());
        one.check().unwrap();
        let five = sample_general(&c, 5, 9).unwrap();
        assert!(matches!(nest_one_from_ten(&five, 9), Err(DraError::Input(_))));
    }

    #[test]
    fn build_split_nests_one_shot() {
        let c = catalog(60, &[("a", 20), ("b", 20)]);
        let mut spec = ProtocolSpec::default();
        let ten = build_split(&c, &spec, 5).unwrap();
        spec.shots = 1;
        let one = build_split(&c, &spec, 5).unwrap();
        assert_eq!(one.test_anomalies, ten.test_anomalies);
        assert!(ten.train_anomalies.contains(&one.train_anomalies[0]));
        spec.setting = Setting::Hard;
        let hard = build_split(&c, &spec, 5).unwrap();
        assert_eq!(hard.seen_class.as_deref(), Some("a"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut c = catalog(4, &[("a", 2)]);
        c.normal_train.push("a0".into());
        assert!(matches!(c.validate(), Err(DraError::Data(_))));
    }
}
