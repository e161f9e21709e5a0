//! Pseudo-anomaly generation.
//!
//! CutMix-style: a random rectangle of a normal image is colour-jittered,
//! translated and pasted back, `x̃ = T∘C(R⊙x) + (1−T(R))⊙x`. CutPaste-scar
//! pastes a thin rotated strip instead. The outlier pool draws whole images
//! from an external collection.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DraError, Result};
use crate::featurenet::ImageTensor;
use crate::math;
use crate::tensor::Array3;

/// Rectangle mask `R`: ones exactly on the box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RectMask {
    pub image_height: usize,
    pub image_width: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl RectMask {
    pub fn new(image_height: usize, image_width: usize, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > image_height || left + width > image_width {
            return Err(DraError::Input(format!(
                "box {height}x{width} at ({top},{left}) does not fit a {image_height}x{image_width} image"
            )));
        }
        Ok(Self {
            image_height,
            image_width,
            top,
            left,
            height,
            width,
        })
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }

    /// Binary mask, row-major `image_height × image_width`.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut m = vec![0u8; self.image_height * self.image_width];
        for y in self.top..self.top + self.height {
            for x in self.left..self.left + self.width {
                m[y * self.image_width + x] = 1;
            }
        }
        m
    }
}

/// Admissible box area as fractions of the image area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaBounds {
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for AreaBounds {
    fn default() -> Self {
        Self {
            min_fraction: 0.01,
            max_fraction: 0.25,
        }
    }
}

impl AreaBounds {
    fn pixel_range(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (lo, hi) = (self.min_fraction, self.max_fraction);
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(DraError::Config(format!("area bounds [{lo}, {hi}] are not a sub-range of (0, 1]")));
        }
        let total = (h * w) as f64;
        let min = (libm::ceil(lo * total - 1e-9) as usize).max(1);
        let max = math::floor(hi * total + 1e-9) as usize;
        Ok((min, max))
    }
}

/// Uniformly random box with area within `bounds`: the height is uniform over
/// heights that admit a feasible width, then the width and position are uniform.
pub fn random_rect_mask<R: Rng + ?Sized>(h: usize, w: usize, bounds: &AreaBounds, rng: &mut R) -> Result<RectMask> {
    if h < 8 || w < 8 {
        return Err(DraError::Config(format!("image {h}x{w} is below the 8x8 minimum for masks")));
    }
    let (min_area, max_area) = bounds.pixel_range(h, w)?;
    let width_range = |bh: usize| {
        let lo = min_area.div_ceil(bh).max(1);
        let hi = (max_area / bh).min(w);
        (lo <= hi).then_some((lo, hi))
    };
    let feasible: Vec<usize> = (1..=h).filter(|&bh| width_range(bh).is_some()).collect();
    if feasible.is_empty() {
        return Err(DraError::Config(format!(
            "no box in a {h}x{w} image has area within [{min_area}, {max_area}]"
        )));
    }
    let bh = feasible[rng.random_range(0..feasible.len())];
    let (lo, hi) = width_range(bh).expect("feasible height");
    let bw = rng.random_range(lo..=hi);
    let top = rng.random_range(0..=h - bh);
    let left = rng.random_range(0..=w - bw);
    RectMask::new(h, w, top, left, bh, bw)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.0 >= range.1 {
        range.0
    } else {
        rng.random_range(range.0..=range.1)
    }
}

/// Sampling ranges for the colour jitter `C`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterRanges {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub hue: (f64, f64),
}

impl Default for JitterRanges {
    fn default() -> Self {
        Self {
            brightness: (0.5, 1.5),
            contrast: (0.5, 1.5),
            saturation: (0.5, 1.5),
            hue: (-0.1, 0.1),
        }
    }
}

impl JitterRanges {
    /// Ranges that only ever produce the identity jitter.
    pub fn identity() -> Self {
        Self {
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
            hue: (0.0, 0.0),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ColorJitter {
        ColorJitter {
            brightness: uniform(rng, self.brightness),
            contrast: uniform(rng, self.contrast),
            saturation: uniform(rng, self.saturation),
            hue: uniform(rng, self.hue),
        }
    }
}

/// One concrete colour jitter. Factors of exactly 1 (and a hue shift of
/// exactly 0) are skipped, so the identity jitter leaves pixels bitwise intact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

fn gray(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        math::rem_euclid((g - b) / d, 6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = math::rem_euclid(h, 1.0) * 6.0;
    let i = math::floor(h6);
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

impl ColorJitter {
    pub fn identity() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        }
    }

    /// Applies brightness, contrast, saturation then hue, clamping to `[0, 1]`
    /// after each step.
    pub fn apply(&self, patch: &mut Array3) {
        let n = patch.spatial();
        let clamp = |p: &mut Array3| p.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        if self.brightness != 1.0 {
            patch.data_mut().iter_mut().for_each(|v| *v *= self.brightness);
            clamp(patch);
        }
        if self.contrast != 1.0 && n > 0 {
            let d = patch.data();
            let mean = (0..n).map(|i| gray(d[i], d[n + i], d[2 * n + i])).sum::<f64>() / n as f64;
            patch.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * self.contrast + mean);
            clamp(patch);
        }
        if self.saturation != 1.0 {
            let d = patch.data_mut();
            for i in 0..n {
                let g = gray(d[i], d[n + i], d[2 * n + i]);
                for c in 0..3 {
                    d[c * n + i] = g + self.saturation * (d[c * n + i] - g);
                }
            }
            clamp(patch);
        }
        if self.hue != 0.0 {
            let d = patch.data_mut();
            for i in 0..n {
                let (h, s, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
                let (r, g, b) = hsv_to_rgb(h + self.hue, s, v);
                d[i] = r;
                d[n + i] = g;
                d[2 * n + i] = b;
            }
            clamp(patch);
        }
    }
}

/// A generated pseudo anomaly and the pixels the paste wrote.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoAnomaly {
    pub image: ImageTensor,
    /// Row-major `h × w`; `true` where the pasted patch landed.
    pub pasted: Vec<bool>,
}

impl PseudoAnomaly {
    pub fn pasted_area(&self) -> usize {
        self.pasted.iter().filter(|p| **p).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutMixParams {
    pub area: AreaBounds,
    pub jitter: JitterRanges,
    /// When false, `T` is the identity.
    pub translate: bool,
    /// Minimum fraction of the translated box that must stay inside the image.
    pub min_inside: f64,
    pub max_retries: usize,
}

impl Default for CutMixParams {
    fn default() -> Self {
        Self {
            area: AreaBounds::default(),
            jitter: JitterRanges::default(),
            translate: true,
            min_inside: 0.5,
            max_retries: 100,
        }
    }
}

impl CutMixParams {
    /// Identity `C` and `T`.
    pub fn identity() -> Self {
        Self {
            jitter: JitterRanges::identity(),
            translate: false,
            ..Self::default()
        }
    }
}

fn overlap(start: isize, len: usize, limit: usize) -> usize {
    let lo = start.max(0);
    let hi = (start + len as isize).min(limit as isize);
    (hi - lo).max(0) as usize
}

/// Deterministic core of CutMix: cut `mask` from `x`, jitter it, shift it by
/// `offset = (dy, dx)` and paste it, clipping to the image.
pub fn cutmix_with(x: &ImageTensor, mask: &RectMask, jitter: &ColorJitter, offset: (isize, isize)) -> Result<PseudoAnomaly> {
    let (_, h, w) = x.pixels().shape();
    if (mask.image_height, mask.image_width) != (h, w) {
        return Err(DraError::Shape("mask and image sizes differ".into()));
    }
    let ty = mask.top as isize + offset.0;
    let tx = mask.left as isize + offset.1;
    if overlap(ty, mask.height, h) == 0 || overlap(tx, mask.width, w) == 0 {
        return Err(DraError::Input("translated mask lies entirely outside the image".into()));
    }
    let mut patch = Array3::zeros(3, mask.height, mask.width);
    for c in 0..3 {
        for y in 0..mask.height {
            for xx in 0..mask.width {
                patch.set(c, y, xx, x.pixels().get(c, mask.top + y, mask.left + xx));
            }
        }
    }
    jitter.apply(&mut patch);
    let mut out = x.pixels().clone();
    let mut pasted = vec![false; h * w];
    for y in 0..mask.height {
        let oy = ty + y as isize;
        if oy < 0 || oy >= h as isize {
            continue;
        }
        for xx in 0..mask.width {
            let ox = tx + xx as isize;
            if ox < 0 || ox >= w as isize {
                continue;
            }
            let (oy, ox) = (oy as usize, ox as usize);
            pasted[oy * w + ox] = true;
            for c in 0..3 {
                out.set(c, oy, ox, patch.get(c, y, xx));
            }
        }
    }
    Ok(PseudoAnomaly {
        image: ImageTensor::from_array_unchecked(out),
        pasted,
    })
}

/// Random translation keeping at least `min_inside` of the box in the image.
pub fn sample_translation<R: Rng + ?Sized>(mask: &RectMask, params: &CutMixParams, rng: &mut R) -> Result<(isize, isize)> {
    if !params.translate {
        return Ok((0, 0));
    }
    let (h, w) = (mask.image_height, mask.image_width);
    let need = libm::ceil(params.min_inside * mask.area() as f64 - 1e-9).max(1.0) as usize;
    let dy_range = (-((mask.top + mask.height - 1) as i64), (h - 1 - mask.top) as i64);
    let dx_range = (-((mask.left + mask.width - 1) as i64), (w - 1 - mask.left) as i64);
    for _ in 0..params.max_retries.max(1) {
        let dy = rng.random_range(dy_range.0..=dy_range.1) as isize;
        let dx = rng.random_range(dx_range.0..=dx_range.1) as isize;
        let inside = overlap(mask.top as isize + dy, mask.height, h) * overlap(mask.left as isize + dx, mask.width, w);
        if inside >= need {
            return Ok((dy, dx));
        }
    }
    Err(DraError::Config(format!(
        "no translation kept {need} pixels inside after {} attempts",
        params.max_retries
    )))
}

pub fn cutmix<R: Rng + ?Sized>(x: &ImageTensor, rng: &mut R, params: &CutMixParams) -> Result<PseudoAnomaly> {
    let mask = random_rect_mask(x.height(), x.width(), &params.area, rng)?;
    let jitter = params.jitter.sample(rng);
    let offset = sample_translation(&mask, params, rng)?;
    cutmix_with(x, &mask, &jitter, offset)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScarParams {
    /// Strip width range in pixels.
    pub width: (usize, usize),
    /// Strip length range in pixels.
    pub length: (usize, usize),
    pub angle_degrees: (f64, f64),
    pub jitter: JitterRanges,
    pub max_retries: usize,
}

impl Default for ScarParams {
    fn default() -> Self {
        Self {
            width: (2, 16),
            length: (10, 25),
            angle_degrees: (-45.0, 45.0),
            jitter: JitterRanges::default(),
            max_retries: 100,
        }
    }
}

impl ScarParams {
    pub fn validate(&self) -> Result<()> {
        if self.width.0 < 2 || self.length.0 < 10 || self.width.0 > self.width.1 || self.length.0 > self.length.1 {
            return Err(DraError::Config(format!(
                "scar size ranges {:?} x {:?} must start at 2x10 and be ordered",
                self.width, self.length
            )));
        }
        Ok(())
    }
}

/// CutPaste-scar: a thin strip is cut, jittered, rotated and pasted at a
/// random location.
pub fn cutpaste_scar<R: Rng + ?Sized>(x: &ImageTensor, rng: &mut R, params: &ScarParams) -> Result<PseudoAnomaly> {
    params.validate()?;
    let (_, h, w) = x.pixels().shape();
    if h < params.length.0 || w < params.length.0 {
        return Err(DraError::Config(format!("image {h}x{w} cannot hold a scar of length {}", params.length.0)));
    }
    for _ in 0..params.max_retries.max(1) {
        let sw = rng.random_range(params.width.0..=params.width.1).min(w);
        let sl = rng.random_range(params.length.0..=params.length.1).min(h);
        let angle = uniform(rng, params.angle_degrees).to_radians();
        let (sin, cos) = (math::sin(angle), math::cos(angle));
        // rotated bounding box
        let bh = libm::ceil(sl as f64 * cos.abs() + sw as f64 * sin.abs()) as usize;
        let bw = libm::ceil(sl as f64 * sin.abs() + sw as f64 * cos.abs()) as usize;
        if bh == 0 || bw == 0 || bh > h || bw > w {
            continue;
        }
        let src_top = rng.random_range(0..=h - sl);
        let src_left = rng.random_range(0..=w - sw);
        let mut strip = Array3::zeros(3, sl, sw);
        for c in 0..3 {
            for y in 0..sl {
                for xx in 0..sw {
                    strip.set(c, y, xx, x.pixels().get(c, src_top + y, src_left + xx));
                }
            }
        }
        params.jitter.sample(rng).apply(&mut strip);
        let dst_top = rng.random_range(0..=h - bh);
        let dst_left = rng.random_range(0..=w - bw);
        let mut out = x.pixels().clone();
        let mut pasted = vec![false; h * w];
        let (cy, cx) = (bh as f64 / 2.0, bw as f64 / 2.0);
        let (sy0, sx0) = (sl as f64 / 2.0, sw as f64 / 2.0);
        for v in 0..bh {
            for u in 0..bw {
                // inverse-rotate the pixel centre into strip coordinates
                let dy = v as f64 + 0.5 - cy;
                let dx = u as f64 + 0.5 - cx;
                let sy = cos * dy + sin * dx + sy0;
                let sx = -sin * dy + cos * dx + sx0;
                if sy < 0.0 || sx < 0.0 {
                    continue;
                }
                let (iy, ix) = (sy as usize, sx as usize);
                if iy >= sl || ix >= sw {
                    continue;
                }
                let (oy, ox) = (dst_top + v, dst_left + u);
                pasted[oy * w + ox] = true;
                for c in 0..3 {
                    out.set(c, oy, ox, strip.get(c, iy, ix));
                }
            }
        }
        if pasted.iter().any(|p| *p) {
            return Ok(PseudoAnomaly {
                image: ImageTensor::from_array_unchecked(out),
                pasted,
            });
        }
    }
    Err(DraError::Config(format!(
        "no scar placement found after {} attempts",
        params.max_retries
    )))
}

/// External images used as pseudo anomalies (outlier exposure).
#[derive(Clone, Debug, PartialEq)]
pub struct OutlierPool {
    entries: Vec<(String, ImageTensor)>,
}

impl OutlierPool {
    /// Builds the pool, dropping every entry whose identifier is in `excluded`.
    pub fn new(entries: Vec<(String, ImageTensor)>, excluded: &BTreeSet<String>) -> Result<Self> {
        let entries: Vec<_> = entries.into_iter().filter(|(id, _)| !excluded.contains(id)).collect();
        if entries.is_empty() {
            return Err(DraError::Config("outlier pool is empty".into()));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    /// Uniform draw, resized to `height × width`. Returns the identifier too.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, height: usize, width: usize) -> (&str, ImageTensor) {
        let (id, img) = &self.entries[rng.random_range(0..self.entries.len())];
        (id.as_str(), img.resized(height, width))
    }
}

pub fn outlier_draw<R: Rng + ?Sized>(pool: &OutlierPool, rng: &mut R, height: usize, width: usize) -> Result<ImageTensor> {
    if pool.is_empty() {
        return Err(DraError::Config("outlier pool is empty".into()));
    }
    Ok(pool.draw(rng, height, width).1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoKind {
    Cutmix,
    CutpasteScar,
    /// Per sample, CutMix or CutPaste-scar with equal probability.
    CutpasteMix,
    OutlierPool,
}

impl PseudoKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cutmix" => Ok(Self::Cutmix),
            "cutpaste_scar" => Ok(Self::CutpasteScar),
            "cutpaste_mix" => Ok(Self::CutpasteMix),
            "outlier_pool" => Ok(Self::OutlierPool),
            other => Err(DraError::Config(format!("unknown pseudo source `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Cutmix => "cutmix",
            Self::CutpasteScar => "cutpaste_scar",
            Self::CutpasteMix => "cutpaste_mix",
            Self::OutlierPool => "outlier_pool",
        }
    }
}

/// A configured pseudo-anomaly generator.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSource {
    pub kind: PseudoKind,
    pub cutmix: CutMixParams,
    pub scar: ScarParams,
    pub pool: Option<OutlierPool>,
}

impl PseudoSource {
    pub fn new(kind: PseudoKind) -> Result<Self> {
        if kind == PseudoKind::OutlierPool {
            return Err(DraError::Config("the outlier-pool source needs a pool; use PseudoSource::outliers".into()));
        }
        Ok(Self {
            kind,
            cutmix: CutMixParams::default(),
            scar: ScarParams::default(),
            pool: None,
        })
    }

    pub fn outliers(pool: OutlierPool) -> Self {
        Self {
            kind: PseudoKind::OutlierPool,
            cutmix: CutMixParams::default(),
            scar: ScarParams::default(),
            pool: Some(pool),
        }
    }

    /// One pseudo anomaly derived from (or sized like) `normal`. Only results
    /// with a non-empty pasted region are returned.
    pub fn generate<R: Rng + ?Sized>(&self, normal: &ImageTensor, rng: &mut R) -> Result<PseudoAnomaly> {
        let out = match self.kind {
            PseudoKind::Cutmix => cutmix(normal, rng, &self.cutmix)?,
            PseudoKind::CutpasteScar => cutpaste_scar(normal, rng, &self.scar)?,
            PseudoKind::CutpasteMix => {
                if rng.random_bool(0.5) {
                    cutmix(normal, rng, &self.cutmix)?
                } else {
                    cutpaste_scar(normal, rng, &self.scar)?
                }
            }
            PseudoKind::OutlierPool => {
                let pool = self
                    .pool
                    .as_ref()
                    .ok_or_else(|| DraError::Config("outlier pool not loaded".into()))?;
                let img = outlier_draw(pool, rng, normal.height(), normal.width())?;
                let n = img.height() * img.width();
                PseudoAnomaly {
                    image: img,
                    pasted: vec![true; n],
                }
            }
        };
        if out.pasted_area() == 0 {
            return Err(DraError::State("pseudo anomaly has an empty pasted region".into()));
        }
        Ok(out)
    }
}
