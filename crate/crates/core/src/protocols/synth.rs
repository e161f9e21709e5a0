//! Procedural desk-scale datasets.
//!
//! Normals are low-contrast striped textures on a near-grey base. Each anomaly
//! class draws one defect kind (cycling blob, scratch, checker) in its own hue
//! band, so classes are visually distinct and their recipes occupy disjoint
//! parameter ranges. Pixel values are quantised to multiples of 1/255.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetCatalog, ImageStore};
use crate::error::{DraError, Result};
use crate::featurenet::ImageTensor;
use crate::math;
use crate::tensor::Array3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub name: String,
    pub size: usize,
    pub train_normals: usize,
    pub test_normals: usize,
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            name: "synth".into(),
            size: 32,
            train_normals: 200,
            test_normals: 80,
            classes: 3,
            per_class: 40,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    /// Saturated filled disk.
    Blob,
    /// Thin straight line.
    Scratch,
    /// Square of two-pixel checker cells.
    Checker,
}

impl DefectKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Blob => "blob",
            Self::Scratch => "scratch",
            Self::Checker => "checker",
        }
    }

    /// Size parameter range at 32×32: disk radius, line length or square side.
    pub fn size_range(&self) -> (f64, f64) {
        match self {
            Self::Blob => (2.5, 4.5),
            Self::Scratch => (12.0, 20.0),
            Self::Checker => (6.0, 9.0),
        }
    }
}

/// Parameter ranges of one anomaly class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecipe {
    pub name: String,
    pub kind: DefectKind,
    pub hue: (f64, f64),
    pub size: (f64, f64),
}

/// Concrete parameters of one rendered defect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectRecipe {
    pub class: String,
    pub kind: DefectKind,
    pub hue: f64,
    pub size: f64,
    pub center: (f64, f64),
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub catalog: DatasetCatalog,
    pub images: ImageStore,
    pub classes: Vec<ClassRecipe>,
    pub defects: BTreeMap<String, DefectRecipe>,
}

fn class_recipes(count: usize, image_size: usize) -> Vec<ClassRecipe> {
    let scale = image_size as f64 / 32.0;
    const KINDS: [DefectKind; 3] = [DefectKind::Blob, DefectKind::Scratch, DefectKind::Checker];
    let band = 1.0 / count as f64;
    (0..count)
        .map(|i| {
            let kind = KINDS[i % 3];
            let name = if i < 3 { String::from(kind.name()) } else { format!("{}_{}", kind.name(), i / 3 + 1) };
            ClassRecipe {
                name,
                kind,
                hue: (i as f64 * band + 0.1 * band, (i + 1) as f64 * band - 0.1 * band),
                size: (kind.size_range().0 * scale, kind.size_range().1 * scale),
            }
        })
        .collect()
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = math::rem_euclid(h, 1.0) * 6.0;
    let i = math::floor(h6);
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn render_normal<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Array3 {
    let base: f64 = rng.random_range(0.42..0.58);
    let tint: [f64; 3] = [rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)];
    let theta: f64 = rng.random_range(0.0..core::f64::consts::PI);
    let freq: f64 = rng.random_range(0.12..0.3);
    let phase: f64 = rng.random_range(0.0..core::f64::consts::TAU);
    let amp: f64 = rng.random_range(0.04..0.08);
    let (s, c) = (math::sin(theta), math::cos(theta));
    let mut img = Array3::zeros(3, size, size);
    for y in 0..size {
        for x in 0..size {
            let t = (x as f64 * c + y as f64 * s) * freq * core::f64::consts::TAU + phase;
            let stripe = amp * math::sin(t);
            let noise: f64 = rng.random_range(-0.02..0.02);
            for ch in 0..3 {
                img.set(ch, y, x, base + tint[ch] + stripe + noise);
            }
        }
    }
    img
}

fn paint(img: &mut Array3, y: usize, x: usize, color: [f64; 3]) {
    for (ch, v) in color.iter().enumerate() {
        img.set(ch, y, x, *v);
    }
}

fn render_defect<R: Rng + ?Sized>(img: &mut Array3, class: &ClassRecipe, rng: &mut R) -> DefectRecipe {
    let size = img.height() as f64;
    let hue = rng.random_range(class.hue.0..=class.hue.1);
    let extent = rng.random_range(class.size.0..=class.size.1);
    let angle = rng.random_range(0.0..core::f64::consts::PI);
    let margin = match class.kind {
        DefectKind::Blob => extent + 1.0,
        DefectKind::Scratch => extent / 2.0 + 1.0,
        DefectKind::Checker => extent / 2.0 + 1.0,
    };
    let center = (rng.random_range(margin..size - margin), rng.random_range(margin..size - margin));
    let n = img.height();
    match class.kind {
        DefectKind::Blob => {
            let color = hsv(hue, 0.85, 0.95);
            for y in 0..n {
                for x in 0..n {
                    let (dy, dx) = (y as f64 + 0.5 - center.0, x as f64 + 0.5 - center.1);
                    if dy * dy + dx * dx <= extent * extent {
                        paint(img, y, x, color);
                    }
                }
            }
        }
        DefectKind::Scratch => {
            let value = if rng.random_bool(0.5) { 0.15 } else { 0.95 };
            let color = hsv(hue, 0.6, value);
            let (s, c) = (math::sin(angle), math::cos(angle));
            let steps = (extent * 2.0) as usize;
            for i in 0..=steps {
                let t = i as f64 / steps as f64 - 0.5;
                let y = (center.0 + t * extent * s) as usize;
                let x = (center.1 + t * extent * c) as usize;
                if y < n && x < n {
                    paint(img, y, x, color);
                }
            }
        }
        DefectKind::Checker => {
            let bright = hsv(hue, 0.7, 0.95);
            let dark = hsv(hue, 0.7, 0.1);
            let side = extent as usize;
            let top = (center.0 - extent / 2.0) as usize;
            let left = (center.1 - extent / 2.0) as usize;
            for y in top..(top + side).min(n) {
                for x in left..(left + side).min(n) {
                    let cell = ((y - top) / 2 + (x - left) / 2).is_multiple_of(2);
                    paint(img, y, x, if cell { bright } else { dark });
                }
            }
        }
    }
    DefectRecipe {
        class: class.name.clone(),
        kind: class.kind,
        hue,
        size: extent,
        center,
        angle,
    }
}

fn finish(mut img: Array3) -> ImageTensor {
    for v in img.data_mut() {
        *v = math::round(v.clamp(0.0, 1.0) * 255.0) / 255.0;
    }
    ImageTensor::from_array_unchecked(img)
}

/// Renders a pre-split synthetic dataset. Deterministic in `spec`.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthDataset> {
    if spec.classes < 1 {
        return Err(DraError::Config("a synthetic dataset needs at least one anomaly class".into()));
    }
    if spec.size < 16 {
        return Err(DraError::Config(format!("synthetic image size {} is below 16", spec.size)));
    }
    if spec.train_normals == 0 || spec.test_normals == 0 || spec.per_class == 0 {
        return Err(DraError::Config("synthetic sample counts must be positive".into()));
    }
    let mut rng = crate::rng_stream(spec.seed, 0x5707);
    let classes = class_recipes(spec.classes, spec.size);
    let mut images = ImageStore::new();
    let mut catalog = DatasetCatalog {
        name: spec.name.clone(),
        ..DatasetCatalog::default()
    };
    for i in 0..spec.train_normals {
        let id = format!("train/good/{i:04}");
        images.insert(id.clone(), finish(render_normal(spec.size, &mut rng)));
        catalog.normal_train.push(id);
    }
    for i in 0..spec.test_normals {
        let id = format!("test/good/{i:04}");
        images.insert(id.clone(), finish(render_normal(spec.size, &mut rng)));
        catalog.normal_test.push(id);
    }
    let mut defects = BTreeMap::new();
    for class in &classes {
        let mut ids = Vec::with_capacity(spec.per_class);
        for i in 0..spec.per_class {
            let id = format!("test/{}/{i:04}", class.name);
            let mut img = render_normal(spec.size, &mut rng);
            let recipe = render_defect(&mut img, class, &mut rng);
            images.insert(id.clone(), finish(img));
            defects.insert(id.clone(), recipe);
            ids.push(id);
        }
        catalog.anomalies.insert(class.name.clone(), ids);
    }
    Ok(SynthDataset {
        catalog,
        images,
        classes,
        defects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            train_normals: 20,
            test_normals: 10,
            per_class: 8,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_and_counts() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.catalog.normal_train.len(), 20);
        assert_eq!(a.catalog.normal_test.len(), 10);
        assert_eq!(a.catalog.anomalies.len(), 3);
        assert!(a.catalog.anomalies.values().all(|v| v.len() == 8));
        assert_eq!(a.images.len(), 20 + 10 + 24);
        a.catalog.validate().unwrap();
        let c = synth_generate(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn pixels_are_quantised() {
        let d = synth_generate(&small()).unwrap();
        for (_, img) in d.images.iter() {
            for &v in img.pixels().data() {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(math::round(v * 255.0) / 255.0, v);
            }
        }
    }

    #[test]
    fn class_recipes_are_disjoint_and_respected() {
        let d = synth_generate(&SynthSpec { classes: 5, ..small() }).unwrap();
        for (i, a) in d.classes.iter().enumerate() {
            for b in &d.classes[i + 1..] {
                assert!(a.hue.1 < b.hue.0 || b.hue.1 < a.hue.0, "{} vs {}", a.name, b.name);
                assert_ne!(a.name, b.name);
            }
        }
        for (id, r) in &d.defects {
            let class = d.classes.iter().find(|c| c.name == r.class).unwrap();
            assert!(r.hue >= class.hue.0 && r.hue <= class.hue.1, "{id}");
            assert!(r.size >= class.size.0 && r.size <= class.size.1, "{id}");
            assert_eq!(r.kind, class.kind);
            assert!(d.catalog.anomalies[&r.class].contains(id));
        }
    }

    #[test]
    fn every_size_from_the_minimum_renders() {
        for size in [16, 17, 24, 31, 48, 64] {
            let d = synth_generate(&SynthSpec { size, ..small() }).unwrap();
            assert!(d.defects.values().all(|r| r.center.0 >= 0.0 && r.center.0 <= size as f64), "{size}");
        }
    }

    #[test]
    fn zero_classes_rejected() {
        assert!(matches!(synth_generate(&SynthSpec { classes: 0, ..small() }), Err(DraError::Config(_))));
    }
}
