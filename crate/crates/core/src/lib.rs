//! Disentangled abnormality learning for open-set supervised anomaly detection.
//!
//! A shared convolutional feature network feeds four independent scoring
//! heads: a seen-abnormality head trained on the few labelled anomalies, a
//! pseudo-abnormality head trained on synthesised or outlier-exposed
//! anomalies, a latent-residual head that scores feature residuals against a
//! fixed normal reference map, and a holistic normality head. At inference the
//! abnormality scores are summed and the normality score subtracted, averaged
//! over an image pyramid.
//!
//! The crate is `no_std` (with `alloc`). File formats, image decoding and the
//! command line live in the companion `dra` crate.
//!
//! ## Modules
//!
//! - [`featurenet`]: backbones, feature extraction, pyramid views.
//! - [`heads`]: patch classifiers, top-K MIL pooling, residual and normality heads.
//! - [`losses`]: deviation / BCE / focal losses and per-head label routing.
//! - [`pseudogen`]: CutMix, CutPaste-scar and outlier-pool pseudo anomalies.
//! - [`protocols`]: general and hard open-set splits, synthetic datasets.
//! - [`trainer`]: batch composition, joint optimisation, the fitted model.
//! - [`eval`]: scoring, rank-sum AUC, multi-seed aggregation.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod error;
pub mod eval;
pub mod featurenet;
pub mod heads;
pub mod losses;
mod math;
pub mod model;
pub mod optim;
pub mod protocols;
pub mod pseudogen;
pub mod tensor;
pub mod trainer;

pub use error::{DraError, Result};
pub use featurenet::{Architecture, Backbone, BackboneConfig, FeatureMap, ImageTensor};
pub use heads::{AblationMask, HeadKind, HeadScores, ScoreMap};
pub use model::DraModel;
pub use tensor::{Array3, ParamStore};

/// Random number generator used for every stochastic step. Streams are
/// separated with `set_stream` so that, for example, pseudo-anomaly
/// generation never perturbs batch sampling.
pub type DraRng = rand_chacha::ChaCha8Rng;

/// Builds a generator for `(seed, stream)`.
pub fn rng_stream(seed: u64, stream: u64) -> DraRng {
    use rand::SeedableRng;
    let mut rng = DraRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
