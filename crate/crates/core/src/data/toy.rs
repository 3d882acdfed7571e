//! Two-dimensional toy benchmark.
//!
//! * inliers: two isotropic Gaussian blobs (σ = 0.5) at (−2, 0) and (2, 0), classes 0 and 1;
//! * training negatives: uniform on the upper half of the annulus 4 ≤ r ≤ 5;
//! * test anomalies: uniform on the full annulus plus a tight cluster at (0, −6).
//!
//! The lower half of the annulus and the far cluster never appear among the
//! negatives, so a detector that only learned "looks like a negative" misses them.
//! Annulus points closer than [`MIN_ANOMALY_DISTANCE`] to an inlier mean are redrawn.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{item_rng, Image, SceneSample};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::{PixelRole, PixelRoleMask};

pub const INLIER_MEANS: [(f64, f64); 2] = [(-2.0, 0.0), (2.0, 0.0)];
pub const INLIER_STD: f64 = 0.5;
pub const ANNULUS_RADII: (f64, f64) = (4.0, 5.0);
pub const FAR_CLUSTER: (f64, f64) = (0.0, -6.0);
pub const FAR_CLUSTER_STD: f64 = 0.3;
pub const MIN_ANOMALY_DISTANCE: f64 = 3.0;
pub const TOY_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyRole {
    Inlier(u8),
    /// Negative training data.
    Negative,
    /// Test-time anomaly.
    Anomaly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyPoint {
    pub x: f64,
    pub y: f64,
    pub role: ToyRole,
}

impl ToyPoint {
    /// Polar angle in degrees, in `[0, 360)`.
    pub fn angle_deg(&self) -> f64 {
        self.y.atan2(self.x).to_degrees().rem_euclid(360.0)
    }

    /// Outside the `[0°, 180°)` sector covered by training negatives.
    pub fn in_unseen_sector(&self) -> bool {
        self.angle_deg() >= 180.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ToyPointSet {
    pub points: Vec<ToyPoint>,
}

impl ToyPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_role(&self, pred: impl Fn(ToyRole) -> bool) -> impl Iterator<Item = &ToyPoint> {
        self.points.iter().filter(move |p| pred(p.role))
    }

    /// Packs `points[range]` as a `2×n×1` image (channels = coordinates) with labels and roles.
    pub fn to_sample(&self, points: &[ToyPoint]) -> Result<SceneSample> {
        let n = points.len();
        let mut data = vec![0.0; 2 * n];
        let mut labels = vec![0u8; n];
        let mut roles = vec![PixelRole::Inlier; n];
        for (i, p) in points.iter().enumerate() {
            data[i] = p.x;
            data[n + i] = p.y;
            match p.role {
                ToyRole::Inlier(c) => labels[i] = c,
                ToyRole::Negative | ToyRole::Anomaly => {
                    labels[i] = TOY_CLASSES as u8;
                    roles[i] = PixelRole::Outlier;
                }
            }
        }
        Ok(SceneSample {
            image: Image::new(2, n, 1, data)?,
            labels: LabelMap::new(n, 1, TOY_CLASSES, labels)?,
            mask: PixelRoleMask::new(n, 1, roles)?,
        })
    }
}

fn far_enough(x: f64, y: f64) -> bool {
    INLIER_MEANS
        .iter()
        .all(|&(mx, my)| ((x - mx).powi(2) + (y - my).powi(2)).sqrt() >= MIN_ANOMALY_DISTANCE)
}

/// Uniform (by area) point on the annulus within `[angle_lo, angle_hi)` radians.
fn annulus_point(rng: &mut impl Rng, angle_lo: f64, angle_hi: f64) -> (f64, f64) {
    let (r0, r1) = ANNULUS_RADII;
    loop {
        let r = rng.random_range(r0 * r0..r1 * r1).sqrt();
        let a = rng.random_range(angle_lo..angle_hi);
        let (x, y) = (r * a.cos(), r * a.sin());
        if far_enough(x, y) {
            return (x, y);
        }
    }
}

/// Returns `(train, test)`. `n_per_role` points per inlier class, negatives and annulus
/// anomalies; the far cluster adds `n_per_role / 4` anomalies.
pub fn gen_toy2d(seed: u64, n_per_role: usize) -> Result<(ToyPointSet, ToyPointSet)> {
    if n_per_role < 100 {
        return Err(Error::contract(format!(
            "toy benchmark needs ≥ 100 points per role, got {n_per_role}"
        )));
    }
    let blob = Normal::new(0.0, INLIER_STD).expect("valid std");
    let far = Normal::new(0.0, FAR_CLUSTER_STD).expect("valid std");

    let inliers = |rng: &mut rand_chacha::ChaCha8Rng, out: &mut Vec<ToyPoint>| {
        for (class, &(mx, my)) in INLIER_MEANS.iter().enumerate() {
            for _ in 0..n_per_role {
                out.push(ToyPoint {
                    x: mx + blob.sample(rng),
                    y: my + blob.sample(rng),
                    role: ToyRole::Inlier(class as u8),
                });
            }
        }
    };

    let mut rng = item_rng(seed, 0x70, 0);
    let mut train = Vec::with_capacity(3 * n_per_role);
    inliers(&mut rng, &mut train);
    for _ in 0..n_per_role {
        // The upper bound stays strictly below π so no negative sits at exactly 180°.
        let (x, y) = annulus_point(&mut rng, 0.0, PI * (1.0 - 1e-9));
        train.push(ToyPoint {
            x,
            y,
            role: ToyRole::Negative,
        });
    }

    let mut rng = item_rng(seed, 0x70, 1);
    let mut test = Vec::with_capacity(3 * n_per_role + n_per_role / 4);
    inliers(&mut rng, &mut test);
    for _ in 0..n_per_role {
        let (x, y) = annulus_point(&mut rng, 0.0, 2.0 * PI);
        test.push(ToyPoint {
            x,
            y,
            role: ToyRole::Anomaly,
        });
    }
    for _ in 0..n_per_role / 4 {
        test.push(ToyPoint {
            x: FAR_CLUSTER.0 + far.sample(&mut rng),
            y: FAR_CLUSTER.1 + far.sample(&mut rng),
            role: ToyRole::Anomaly,
        });
    }
    Ok((ToyPointSet { points: train }, ToyPointSet { points: test }))
}
