//! Benchmark generators, mixed-content augmentation and on-disk dataset formats.

pub mod augment;
pub mod manifest;
pub mod pnm;
pub mod scene;
pub mod sources;
pub mod toy;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::losses::{PixelRole, PixelRoleMask};
use crate::nn::Tensor;

pub use augment::{augment, paste_negatives, AugmentConfig, AugmentParams, NegativePatch};
pub use scene::{gen_negative_patches, gen_scenes, SceneConfig, SceneSplits};
pub use sources::{MixedSource, ToySource};
pub use toy::{gen_toy2d, ToyPoint, ToyPointSet, ToyRole};

/// Planar `C×H×W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(channels * height * width, data.len()));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// `[1, C, H, W]`
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, self.channels, self.height, self.width], self.data.clone())
            .expect("image buffer matches its shape")
    }
}

/// An image with per-pixel labels and roles; after pasting it is a mixed-content sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    pub labels: LabelMap,
    pub mask: PixelRoleMask,
}

pub type MixedSample = SceneSample;

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    /// Checks dimensions and the label/role agreement:
    /// outlier role ⇔ outlier label, inlier role ⇒ class label.
    pub fn validate(&self) -> Result<()> {
        let dims = (self.image.height(), self.image.width());
        if (self.labels.height(), self.labels.width()) != dims || (self.mask.height(), self.mask.width()) != dims {
            return Err(Error::shape(
                format!("{}x{}", dims.0, dims.1),
                format!(
                    "labels {}x{}, mask {}x{}",
                    self.labels.height(),
                    self.labels.width(),
                    self.mask.height(),
                    self.mask.width()
                ),
            ));
        }
        let k = self.labels.num_classes();
        for (i, (&l, &r)) in self.labels.values().iter().zip(self.mask.roles()).enumerate() {
            let ok = match r {
                PixelRole::Outlier => l as usize == k,
                PixelRole::Inlier => (l as usize) < k,
                PixelRole::Ignore => l as usize != k || l == IGNORE_LABEL,
            };
            if !ok || (l as usize == k && r != PixelRole::Outlier) {
                return Err(Error::Data(format!(
                    "pixel {i}: label {l} inconsistent with role {r:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic per-item random stream derived from `(seed, stream, index)`.
pub fn item_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mixed = splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
