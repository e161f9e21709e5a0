//! Feature extraction: images to `c′ × h′ × w′` feature maps.
//!
//! Two backbones are available. [`Architecture::ResNet18`] is the standard
//! 18-layer residual network truncated after its last stage (512 channels,
//! stride 32), with batch normalisation folded into per-channel affine layers.
//! [`Architecture::Tiny`] is three `conv3x3 → relu → maxpool2` blocks (stride
//! 8) and is what the test suite and desk-scale experiments train.

mod layers;
mod resize;

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DraError, Result};
use crate::math;
use crate::tensor::{Array3, Grads, ParamStore};
use layers::{BasicBlock, Cache, ChannelAffine, Conv2d, Layer, MaxPool2d};

pub use resize::resize_bilinear;

/// ImageNet channel statistics used with pretrained residual weights.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// An RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Array3", into = "Array3")]
pub struct ImageTensor(Array3);

impl ImageTensor {
    pub fn new(pixels: Array3) -> Result<Self> {
        if pixels.channels() != 3 {
            return Err(DraError::InputShape(format!(
                "images must have 3 channels, got {}",
                pixels.channels()
            )));
        }
        if pixels.height() == 0 || pixels.width() == 0 {
            return Err(DraError::InputShape("empty image".into()));
        }
        if !pixels.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(DraError::Numeric("image values must be finite and within [0, 1]".into()));
        }
        Ok(Self(pixels))
    }

    /// A constant image.
    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::filled(3, height, width, value))
    }

    pub(crate) fn from_array_unchecked(pixels: Array3) -> Self {
        debug_assert_eq!(pixels.channels(), 3);
        Self(pixels)
    }

    pub fn pixels(&self) -> &Array3 {
        &self.0
    }

    pub fn into_array(self) -> Array3 {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    /// Bilinear resize to `height × width`.
    pub fn resized(&self, height: usize, width: usize) -> ImageTensor {
        let mut out = resize_bilinear(&self.0, height, width);
        // interpolation is convex, but guard the last ulp
        out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        ImageTensor(out)
    }
}

impl TryFrom<Array3> for ImageTensor {
    type Error = DraError;
    fn try_from(value: Array3) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ImageTensor> for Array3 {
    fn from(value: ImageTensor) -> Self {
        value.0
    }
}

/// Backbone output `M ∈ R^{c′×h′×w′}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap(Array3);

impl FeatureMap {
    pub fn new(values: Array3) -> Result<Self> {
        if !values.is_finite() {
            return Err(DraError::Numeric("feature map contains non-finite values".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array3 {
        &self.0
    }

    pub fn into_array(self) -> Array3 {
        self.0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }

    pub fn channels(&self) -> usize {
        self.0.channels()
    }

    /// Number of patch vectors, `h′·w′`.
    pub fn patches(&self) -> usize {
        self.0.spatial()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Three conv blocks of `width` channels, stride 8.
    Tiny,
    /// 18-layer residual network, 512 channels, stride 32.
    ResNet18,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputNormalization {
    /// ImageNet statistics when pretrained weights are configured, none otherwise.
    Auto,
    None,
    ImageNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    /// Channel width of the tiny backbone. Ignored by `ResNet18`.
    pub width: usize,
    /// Pretrained weight container to load, if any.
    pub weights: Option<String>,
    pub normalization: InputNormalization,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::resnet18()
    }
}

impl BackboneConfig {
    pub fn resnet18() -> Self {
        Self {
            architecture: Architecture::ResNet18,
            width: 64,
            weights: None,
            normalization: InputNormalization::Auto,
        }
    }

    pub fn tiny() -> Self {
        Self::tiny_with_width(64)
    }

    pub fn tiny_with_width(width: usize) -> Self {
        Self {
            architecture: Architecture::Tiny,
            width,
            weights: None,
            normalization: InputNormalization::Auto,
        }
    }

    /// Spatial stride between input pixels and feature-map cells.
    pub fn downsample(&self) -> usize {
        match self.architecture {
            Architecture::Tiny => 8,
            Architecture::ResNet18 => 32,
        }
    }

    /// Feature channels `c′`.
    pub fn feature_channels(&self) -> usize {
        match self.architecture {
            Architecture::Tiny => self.width,
            Architecture::ResNet18 => 512,
        }
    }

    /// Smallest accepted input side.
    pub fn min_input(&self) -> usize {
        self.downsample()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_channels() == 0 {
            return Err(DraError::Config("backbone width must be positive".into()));
        }
        Ok(())
    }

    fn normalization_stats(&self) -> Option<([f64; 3], [f64; 3])> {
        match (self.normalization, &self.weights) {
            (InputNormalization::ImageNet, _) | (InputNormalization::Auto, Some(_)) => {
                Some((IMAGENET_MEAN, IMAGENET_STD))
            }
            _ => None,
        }
    }

    /// Feature-map shape for an `h × w` input.
    pub fn feature_shape(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        self.check_input(3, h, w)?;
        let (fh, fw) = match self.architecture {
            Architecture::Tiny => (h / 8, w / 8),
            Architecture::ResNet18 => {
                // five stride-2 stages, each rounding up
                let mut hw = (h, w);
                for _ in 0..5 {
                    hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
                }
                hw
            }
        };
        Ok((self.feature_channels(), fh, fw))
    }

    fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if c != 3 {
            return Err(DraError::InputShape(format!("expected 3 input channels, got {c}")));
        }
        let min = self.min_input();
        if h < min || w < min {
            return Err(DraError::InputShape(format!(
                "input {h}x{w} is smaller than the backbone minimum {min}x{min}"
            )));
        }
        Ok(())
    }
}

/// A feature network: layer graph plus its parameters.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<Layer>,
    params: ParamStore,
}

/// Intermediate state of a training-mode forward pass.
pub struct BackboneTrace {
    caches: Vec<Cache>,
    feature_shape: (usize, usize, usize),
}

struct Builder<'a, R: Rng + ?Sized> {
    params: ParamStore,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Layer {
        let fan_in = cin * k * k;
        let bound = math::sqrt(6.0 / fan_in as f64);
        let w = self.uniform(cout * fan_in, bound);
        let weight = self.params.push(format!("{name}.weight"), vec![cout, cin, k, k], w);
        let bias = bias.then(|| self.params.push(format!("{name}.bias"), vec![cout], vec![0.0; cout]));
        Layer::Conv(Conv2d {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding: pad,
        })
    }

    fn affine(&mut self, name: &str, channels: usize) -> Layer {
        let scale = self.params.push(format!("{name}.scale"), vec![channels], vec![1.0; channels]);
        let shift = self.params.push(format!("{name}.shift"), vec![channels], vec![0.0; channels]);
        Layer::Affine(ChannelAffine { scale, shift })
    }

    fn basic_block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Layer {
        let main = vec![
            self.conv(&format!("{name}.conv1"), cin, cout, 3, stride, 1, false),
            self.affine(&format!("{name}.bn1"), cout),
            Layer::Relu,
            self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, 1, false),
            self.affine(&format!("{name}.bn2"), cout),
        ];
        let shortcut = if stride != 1 || cin != cout {
            vec![
                self.conv(&format!("{name}.downsample.0"), cin, cout, 1, stride, 0, false),
                self.affine(&format!("{name}.downsample.1"), cout),
            ]
        } else {
            Vec::new()
        };
        Layer::Block(Box::new(BasicBlock { main, shortcut }))
    }
}

fn pool2() -> Layer {
    Layer::MaxPool(MaxPool2d {
        kernel: 2,
        stride: 2,
        padding: 0,
    })
}

impl Backbone {
    /// Builds the network with He-uniform convolution weights,
    /// `U(−√(6/fan_in), √(6/fan_in))`, and zero biases. Affine layers start as
    /// the identity.
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: ParamStore::new(),
            rng,
        };
        let layers = match config.architecture {
            Architecture::Tiny => {
                let w = config.width;
                vec![
                    b.conv("block1.conv", 3, w, 3, 1, 1, true),
                    Layer::Relu,
                    pool2(),
                    b.conv("block2.conv", w, w, 3, 1, 1, true),
                    Layer::Relu,
                    pool2(),
                    b.conv("block3.conv", w, w, 3, 1, 1, true),
                    Layer::Relu,
                    pool2(),
                ]
            }
            Architecture::ResNet18 => {
                let mut layers = vec![
                    b.conv("conv1", 3, 64, 7, 2, 3, false),
                    b.affine("bn1", 64),
                    Layer::Relu,
                    Layer::MaxPool(MaxPool2d {
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    }),
                ];
                let mut cin = 64;
                for (stage, &cout) in [64usize, 128, 256, 512].iter().enumerate() {
                    let stride = if stage == 0 { 1 } else { 2 };
                    layers.push(b.basic_block(&format!("layer{}.0", stage + 1), cin, cout, stride));
                    layers.push(b.basic_block(&format!("layer{}.1", stage + 1), cout, cout, 1));
                    cin = cout;
                }
                layers
            }
        };
        Ok(Self {
            config,
            layers,
            params: b.params,
        })
    }

    /// Builds the layer graph for `config` and loads `params` into it. Every
    /// expected array must be present with its exact shape.
    pub fn from_params(config: BackboneConfig, params: &ParamStore) -> Result<Self> {
        let mut rng = crate::rng_stream(0, 0);
        let mut b = Self::new(config, &mut rng)?;
        b.params.load_from(params)?;
        Ok(b)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn prepare_input(&self, image: &ImageTensor) -> Result<Option<Array3>> {
        let (c, h, w) = image.pixels().shape();
        self.config.check_input(c, h, w)?;
        Ok(self.config.normalization_stats().map(|(mean, std)| {
            let mut x = image.pixels().clone();
            for ch in 0..3 {
                x.plane_mut(ch).iter_mut().for_each(|v| *v = (*v - mean[ch]) / std[ch]);
            }
            x
        }))
    }

    fn run(&self, image: &ImageTensor, caches: Option<&mut Vec<Cache>>) -> Result<FeatureMap> {
        let normalized = self.prepare_input(image)?;
        let input = normalized.as_ref().unwrap_or(image.pixels());
        let out = layers::forward_seq(&self.layers, input, &self.params, caches);
        FeatureMap::new(out)
    }

    /// Inference-mode feature extraction.
    pub fn extract(&self, image: &ImageTensor) -> Result<FeatureMap> {
        self.run(image, None)
    }

    /// Forward pass that keeps what [`Backbone::backward`] needs.
    pub fn forward_train(&self, image: &ImageTensor) -> Result<(FeatureMap, BackboneTrace)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let map = self.run(image, Some(&mut caches))?;
        let feature_shape = map.shape();
        Ok((map, BackboneTrace { caches, feature_shape }))
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂M` for the traced input.
    pub fn backward(&self, trace: BackboneTrace, grad: Array3, grads: &mut Grads) -> Result<()> {
        if grad.shape() != trace.feature_shape {
            return Err(DraError::Shape(format!(
                "feature gradient {:?} does not match traced map {:?}",
                grad.shape(),
                trace.feature_shape
            )));
        }
        layers::backward_seq(&self.layers, &trace.caches, grad, &self.params, grads, false);
        Ok(())
    }

    /// Shape the layer graph actually produces, walked layer by layer.
    pub fn traced_feature_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let (fh, fw) = layers::out_size_seq(&self.layers, h, w);
        (self.config.feature_channels(), fh, fw)
    }
}

/// `f(x; Θ_f)` as a free function over an explicit parameter collection.
pub fn extract_features(image: &ImageTensor, config: &BackboneConfig, params: &ParamStore) -> Result<FeatureMap> {
    Backbone::from_params(config.clone(), params)?.extract(image)
}

/// One resized copy of `image` per pyramid scale.
pub fn pyramid_views(image: &ImageTensor, scales: &[f64], config: &BackboneConfig) -> Result<Vec<ImageTensor>> {
    if scales.is_empty() {
        return Err(DraError::Config("pyramid needs at least one scale".into()));
    }
    scales
        .iter()
        .map(|&s| {
            if !(s > 0.0 && s <= 1.0) {
                return Err(DraError::Config(format!("pyramid scale {s} outside (0, 1]")));
            }
            let (h, w) = scaled_size(image.height(), image.width(), s);
            if h < config.min_input() || w < config.min_input() {
                return Err(DraError::Config(format!(
                    "scale {s} gives {h}x{w}, below the backbone minimum {}",
                    config.min_input()
                )));
            }
            Ok(if s == 1.0 { image.clone() } else { image.resized(h, w) })
        })
        .collect()
}

/// Side lengths of a view at `scale`.
pub fn scaled_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let f = |v: usize| (math::round(v as f64 * scale) as usize).max(1);
    (f(h), f(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(rng: &mut crate::DraRng, h: usize, w: usize) -> ImageTensor {
        let data = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(Array3::from_vec(3, h, w, data).unwrap()).unwrap()
    }

    #[test]
    fn image_tensor_rejects_bad_values() {
        assert!(ImageTensor::new(Array3::filled(3, 4, 4, 1.5)).is_err());
        assert!(ImageTensor::new(Array3::filled(1, 4, 4, 0.5)).is_err());
        assert!(ImageTensor::new(Array3::filled(3, 4, 4, f64::NAN)).is_err());
    }

    #[test]
    fn tiny_output_shape_matches_formula_over_grid() {
        let mut rng = crate::rng_stream(1, 0);
        let bb = Backbone::new(BackboneConfig::tiny_with_width(4), &mut rng).unwrap();
        for h in [8usize, 9, 15, 16, 24, 31, 32, 40] {
            for w in [8usize, 12, 17, 32] {
                let want = bb.config().feature_shape(h, w).unwrap();
                assert_eq!(bb.traced_feature_shape(h, w), want);
                let img = random_image(&mut rng, h, w);
                assert_eq!(bb.extract(&img).unwrap().shape(), want);
            }
        }
    }

    #[test]
    fn resnet_shape_formula_matches_layer_graph() {
        let mut rng = crate::rng_stream(1, 0);
        let bb = Backbone::new(BackboneConfig::resnet18(), &mut rng).unwrap();
        for s in [32usize, 33, 64, 100, 112, 224, 448, 500] {
            assert_eq!(bb.traced_feature_shape(s, s), bb.config().feature_shape(s, s).unwrap());
        }
        assert_eq!(bb.config().feature_shape(224, 224).unwrap(), (512, 7, 7));
        assert_eq!(bb.config().feature_shape(448, 448).unwrap(), (512, 14, 14));
    }

    #[test]
    fn too_small_input_is_rejected() {
        let mut rng = crate::rng_stream(1, 0);
        let bb = Backbone::new(BackboneConfig::tiny_with_width(4), &mut rng).unwrap();
        let img = ImageTensor::filled(7, 16, 0.5).unwrap();
        assert!(matches!(bb.extract(&img), Err(DraError::InputShape(_))));
    }

    #[test]
    fn pyramid_identity_and_constant() {
        let cfg = BackboneConfig::tiny();
        let mut rng = crate::rng_stream(2, 0);
        let img = random_image(&mut rng, 32, 32);
        let views = pyramid_views(&img, &[1.0], &cfg).unwrap();
        assert_eq!(views.len(), 1);
        for (a, b) in views[0].pixels().data().iter().zip(img.pixels().data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let flat = ImageTensor::filled(32, 32, 0.37).unwrap();
        for s in [1.0, 0.5, 0.3] {
            let v = pyramid_views(&flat, &[s], &cfg).unwrap();
            assert!(v[0].pixels().data().iter().all(|&x| x == 0.37));
        }
    }

    #[test]
    fn pyramid_sizes_and_errors() {
        let cfg = BackboneConfig::resnet18();
        let img = ImageTensor::filled(448, 448, 0.2).unwrap();
        let v = pyramid_views(&img, &[1.0, 0.5], &cfg).unwrap();
        assert_eq!((v[0].height(), v[0].width()), (448, 448));
        assert_eq!((v[1].height(), v[1].width()), (224, 224));
        assert!(matches!(pyramid_views(&img, &[], &cfg), Err(DraError::Config(_))));
        assert!(matches!(pyramid_views(&img, &[1.5], &cfg), Err(DraError::Config(_))));
        assert!(matches!(pyramid_views(&img, &[0.05], &cfg), Err(DraError::Config(_))));
        // original untouched
        assert!(img.pixels().data().iter().all(|&x| x == 0.2));
    }

    #[test]
    fn extraction_is_deterministic() {
        let mut rng = crate::rng_stream(3, 0);
        let bb = Backbone::new(BackboneConfig::tiny_with_width(8), &mut rng).unwrap();
        let img = random_image(&mut rng, 32, 32);
        let a = bb.extract(&img).unwrap();
        let b = bb.extract(&img).unwrap();
        assert_eq!(a, b);
        let c = extract_features(&img, bb.config(), bb.params()).unwrap();
        assert_eq!(a, c);
    }

    /// Central finite differences on `Σ r ⊙ f(x)` for a fixed random `r`.
    #[test]
    fn backbone_gradient_matches_finite_differences() {
        for arch in [BackboneConfig::tiny_with_width(6), BackboneConfig::resnet18()] {
            let mut rng = crate::rng_stream(4, 0);
            let size = if arch.architecture == Architecture::Tiny { 16 } else { 32 };
            let mut bb = Backbone::new(arch, &mut rng).unwrap();
            let img = random_image(&mut rng, size, size);
            let (map, trace) = bb.forward_train(&img).unwrap();
            let (c, h, w) = map.shape();
            let r: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let objective = |bb: &Backbone| -> f64 {
                let m = bb.extract(&img).unwrap();
                m.values().data().iter().zip(&r).map(|(a, b)| a * b).sum()
            };
            let mut grads = bb.params().zero_grads();
            bb.backward(trace, Array3::from_vec(c, h, w, r.clone()).unwrap(), &mut grads).unwrap();
            let n_params = bb.params().len();
            let per_param = if size == 16 { 3 } else { 1 };
            let mut checked = 0;
            for pi in 0..n_params {
                let id = crate::tensor::ParamId(pi);
                let len = bb.params().values(id).len();
                for _ in 0..per_param {
                    let j = rng.random_range(0..len);
                    let analytic = grads.buf(id)[j];
                    let eps = 1e-7;
                    let orig = bb.params().values(id)[j];
                    bb.params_mut().values_mut(id)[j] = orig + eps;
                    let up = objective(&bb);
                    bb.params_mut().values_mut(id)[j] = orig - eps;
                    let down = objective(&bb);
                    bb.params_mut().values_mut(id)[j] = orig;
                    let numeric = (up - down) / (2.0 * eps);
                    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        (analytic - numeric).abs() / denom < 1e-3,
                        "param {} [{j}]: analytic {analytic} numeric {numeric}",
                        bb.params().iter().nth(pi).unwrap().name
                    );
                    checked += 1;
                }
            }
            assert!(checked > 0);
        }
    }
}
