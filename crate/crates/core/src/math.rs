//! Per-pixel scoring kernels.
//!
//! Classifier logits `s` are read as an unnormalized joint log-density
//! `ln p̂(y, x)`. Everything here follows from that reading:
//!
//! * the class posterior is `softmax(s)`,
//! * the unnormalized data log-likelihood is `ln p̂(x) = lse(s)`,
//! * the hybrid anomaly score is `ln(1 - P(d_in|x)) - ln p̂(x)`.
//!
//! The normalizing constant is never materialized: it shifts every score by the
//! same amount, so any ranking of pixels is unaffected.
//!
//! All kernels work in `f64` and are pure functions of their inputs.

use crate::error::{Error, Result};

/// Posteriors are clamped to `[POSTERIOR_EPS, 1 - POSTERIOR_EPS]` before any logarithm.
pub const POSTERIOR_EPS: f64 = 1e-7;

/// Logit bound matching [`POSTERIOR_EPS`]: `sigmoid(±POSTERIOR_LOGIT_BOUND)` is the clamp range.
pub fn posterior_logit_bound() -> f64 {
    ((1.0 - POSTERIOR_EPS) / POSTERIOR_EPS).ln()
}

pub fn clamp_posterior(p: f64) -> f64 {
    p.clamp(POSTERIOR_EPS, 1.0 - POSTERIOR_EPS)
}

/// Numerically stable `ln Σ exp(v_i)`.
pub fn stable_log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::contract("log-sum-exp of an empty vector"));
    }
    Ok(lse_unchecked(v))
}

#[inline]
pub(crate) fn lse_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Writes `softmax(v)` into `out`.
#[inline]
pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Index of the largest entry; ties go to the lowest index.
#[inline]
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} at flat index {i}"))),
        None => Ok(()),
    }
}

macro_rules! vector_map {
    ($(#[$meta:meta])* $name:ident, $channels:ident, $min_channels:expr) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            height: usize,
            width: usize,
            $channels: usize,
            values: Vec<f64>,
        }

        impl $name {
            /// `values` is pixel-major: the channel vector of pixel `(y, x)` starts at
            /// `(y * width + x) * channels`.
            pub fn new(height: usize, width: usize, $channels: usize, values: Vec<f64>) -> Result<Self> {
                if $channels < $min_channels {
                    return Err(Error::contract(format!(
                        concat!(stringify!($name), " needs at least {} channels, got {}"),
                        $min_channels, $channels
                    )));
                }
                if values.len() != height * width * $channels {
                    return Err(Error::shape(height * width * $channels, values.len()));
                }
                check_finite(&values, stringify!($name))?;
                Ok(Self { height, width, $channels, values })
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn $channels(&self) -> usize {
                self.$channels
            }

            pub fn num_pixels(&self) -> usize {
                self.height * self.width
            }

            pub fn pixel(&self, idx: usize) -> &[f64] {
                let c = self.$channels;
                &self.values[idx * c..(idx + 1) * c]
            }

            pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
                self.values.chunks_exact(self.$channels)
            }

            pub fn values(&self) -> &[f64] {
                &self.values
            }
        }
    };
}

vector_map!(
    /// Per-pixel raw class scores (`K ≥ 2`).
    LogitMap,
    num_classes,
    2
);
vector_map!(
    /// Shared features feeding both heads.
    PreLogitMap,
    num_features,
    1
);

/// Per-pixel softmax over `K` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPosteriorMap {
    height: usize,
    width: usize,
    num_classes: usize,
    values: Vec<f64>,
}

impl ClassPosteriorMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        let k = self.num_classes;
        &self.values[idx * k..(idx + 1) * k]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.num_classes)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Closed-set prediction: per-pixel argmax, ties to the lowest class index.
    pub fn argmax(&self) -> Vec<u8> {
        self.pixels().map(|p| argmax(p) as u8).collect()
    }
}

/// An `H×W` map of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct RealMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl RealMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(height * width, values.len()));
        }
        Ok(RealMap { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn same_shape(&self, other: &RealMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }
}

/// Per-pixel `P(d_in|x)`, always inside `[POSTERIOR_EPS, 1 - POSTERIOR_EPS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPosteriorMap(RealMap);

impl DatasetPosteriorMap {
    /// Clamps every value into the open unit interval. NaN is rejected.
    pub fn new(height: usize, width: usize, mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("dataset posterior contains NaN".into()));
        }
        for v in values.iter_mut() {
            *v = clamp_posterior(*v);
        }
        Ok(DatasetPosteriorMap(RealMap::new(height, width, values)?))
    }

    /// Applies the sigmoid to raw head outputs.
    pub fn from_logits(height: usize, width: usize, logits: &[f64]) -> Result<Self> {
        Self::new(height, width, logits.iter().map(|&z| sigmoid(z)).collect())
    }

    pub fn map(&self) -> &RealMap {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }
}

/// Per-pixel anomaly score; higher means more anomalous.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyScoreMap(RealMap);

impl AnomalyScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "anomaly score")?;
        Ok(AnomalyScoreMap(RealMap::new(height, width, values)?))
    }

    pub fn map(&self) -> &RealMap {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }
}

pub fn class_posterior(logits: &LogitMap) -> ClassPosteriorMap {
    let k = logits.num_classes;
    let mut values = vec![0.0; logits.values.len()];
    for (src, dst) in logits.pixels().zip(values.chunks_exact_mut(k)) {
        softmax_into(src, dst);
    }
    ClassPosteriorMap {
        height: logits.height,
        width: logits.width,
        num_classes: k,
        values,
    }
}

/// `ln p̂(x)` per pixel.
pub fn unnormalized_log_likelihood(logits: &LogitMap) -> RealMap {
    RealMap {
        height: logits.height,
        width: logits.width,
        values: logits.pixels().map(lse_unchecked).collect(),
    }
}

/// `ln(1 - P(d_in|x)) - ln p̂(x)` per pixel.
pub fn hybrid_score(din: &DatasetPosteriorMap, log_px: &RealMap) -> Result<AnomalyScoreMap> {
    din.0.same_shape(log_px)?;
    let values = din
        .values()
        .iter()
        .zip(log_px.values())
        .map(|(&p, &lp)| (1.0 - clamp_posterior(p)).ln() - lp)
        .collect();
    AnomalyScoreMap::new(log_px.height, log_px.width, values)
}

/// Generative component alone: `-ln p̂(x)`.
pub fn generative_score(log_px: &RealMap) -> Result<AnomalyScoreMap> {
    AnomalyScoreMap::new(log_px.height, log_px.width, log_px.values.iter().map(|&v| -v).collect())
}

/// Discriminative component alone: `P(d_out|x) = 1 - P(d_in|x)`.
pub fn discriminative_score(din: &DatasetPosteriorMap) -> Result<AnomalyScoreMap> {
    AnomalyScoreMap::new(
        din.0.height,
        din.0.width,
        din.values().iter().map(|&p| 1.0 - p).collect(),
    )
}
