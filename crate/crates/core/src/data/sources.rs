//! Training sample sources.

use rand::seq::SliceRandom;

use super::augment::{augment, paste_negatives, AugmentConfig, NegativePatch};
use super::toy::{ToyPoint, ToyPointSet};
use super::{item_rng, SceneSample};
use crate::error::{Error, Result};
use crate::nn::train::SampleSource;

const STREAM_MIX: u64 = 0x3A_01;
const STREAM_TOY: u64 = 0x3A_02;

/// Augmented inlier crops with negatives pasted on the fly.
#[derive(Clone, Debug)]
pub struct MixedSource<'a> {
    pub scenes: &'a [SceneSample],
    pub negatives: &'a [NegativePatch],
    pub augment: AugmentConfig,
}

impl<'a> MixedSource<'a> {
    pub fn new(scenes: &'a [SceneSample], negatives: &'a [NegativePatch], augment: AugmentConfig) -> Result<Self> {
        augment.validate()?;
        for p in negatives {
            if p.height() > augment.crop_size || p.width() > augment.crop_size {
                return Err(Error::Config(format!(
                    "negative patch {}x{} larger than crop_size {}",
                    p.height(),
                    p.width(),
                    augment.crop_size
                )));
            }
        }
        Ok(MixedSource {
            scenes,
            negatives,
            augment,
        })
    }
}

impl SampleSource for MixedSource<'_> {
    fn len(&self) -> usize {
        self.scenes.len()
    }

    fn sample(&self, epoch: u64, index: usize) -> Result<SceneSample> {
        let mut rng = item_rng(self.augment.seed ^ epoch.rotate_left(32), STREAM_MIX, index as u64);
        let crop = augment(&self.scenes[index], &self.augment, &mut rng)?;
        paste_negatives(&crop, self.negatives, &self.augment, &mut rng)
    }
}

/// Toy points reshuffled every epoch into `N×1` strips of `chunk` points.
/// The remainder of each shuffle is dropped so all strips stack into one batch.
#[derive(Clone, Debug)]
pub struct ToySource {
    set: ToyPointSet,
    chunk: usize,
    seed: u64,
}

impl ToySource {
    pub fn new(set: &ToyPointSet, chunk: usize, seed: u64) -> Result<Self> {
        if chunk == 0 || chunk > set.len() {
            return Err(Error::contract("toy source needs points and a positive chunk size"));
        }
        Ok(ToySource {
            set: set.clone(),
            chunk,
            seed,
        })
    }
}

impl SampleSource for ToySource {
    fn len(&self) -> usize {
        self.set.len() / self.chunk
    }

    fn sample(&self, epoch: u64, index: usize) -> Result<SceneSample> {
        let mut order: Vec<ToyPoint> = self.set.points.clone();
        order.shuffle(&mut item_rng(self.seed, STREAM_TOY, epoch));
        let start = index * self.chunk;
        self.set.to_sample(&order[start..start + self.chunk])
    }
}
