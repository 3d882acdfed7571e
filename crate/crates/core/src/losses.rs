//! Training objective over mixed-content images.
//!
//! With `s` the logits, `y` the inlier label and `P(d_in|x)` the posterior head:
//!
//! | term             | pixels   | per-pixel value               |
//! |------------------|----------|-------------------------------|
//! | `cls`            | inliers  | `lse(s) - s_y`                |
//! | `likelihood_in`  | inliers  | `-s_y` (upper-bound surrogate) |
//! | `likelihood_out` | outliers | `lse(s)`                      |
//! | `posterior_in`   | inliers  | `-ln P(d_in|x)`               |
//! | `posterior_out`  | outliers | `-ln (1 - P(d_in|x))`         |
//!
//! `total = cls + posterior_in + β (posterior_out + likelihood_out)`.
//! The inlier likelihood term is exposed but left out of `total`: the
//! classification loss already pushes `s_y`, and with it `lse(s) ≥ s_y`, up.
//!
//! Each term is the mean over its own pixel set; an empty set contributes 0.
//! Over a batch, a term is the mean of the per-image means of the images where
//! that set is non-empty.

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::math::{clamp_posterior, lse_unchecked, posterior_logit_bound, DatasetPosteriorMap, LogitMap};
use crate::nn::graph::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PixelRole {
    Inlier,
    Outlier,
    Ignore,
}

impl PixelRole {
    /// Raster encoding: 0 inlier, 1 outlier, 255 ignore.
    pub fn code(self) -> u8 {
        match self {
            PixelRole::Inlier => 0,
            PixelRole::Outlier => 1,
            PixelRole::Ignore => IGNORE_LABEL,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(PixelRole::Inlier),
            1 => Ok(PixelRole::Outlier),
            IGNORE_LABEL => Ok(PixelRole::Ignore),
            other => Err(Error::Data(format!("invalid pixel role code {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelRoleMask {
    height: usize,
    width: usize,
    roles: Vec<PixelRole>,
}

impl PixelRoleMask {
    pub fn new(height: usize, width: usize, roles: Vec<PixelRole>) -> Result<Self> {
        if roles.len() != height * width {
            return Err(Error::shape(height * width, roles.len()));
        }
        Ok(PixelRoleMask { height, width, roles })
    }

    pub fn filled(height: usize, width: usize, role: PixelRole) -> Self {
        PixelRoleMask {
            height,
            width,
            roles: vec![role; height * width],
        }
    }

    /// Derives roles from labels: `K` is an outlier, 255 is ignored, the rest are inliers.
    pub fn from_labels(labels: &LabelMap) -> Self {
        let k = labels.num_classes();
        let roles = labels
            .values()
            .iter()
            .map(|&v| match v {
                IGNORE_LABEL => PixelRole::Ignore,
                v if v as usize == k => PixelRole::Outlier,
                _ => PixelRole::Inlier,
            })
            .collect();
        PixelRoleMask {
            height: labels.height(),
            width: labels.width(),
            roles,
        }
    }

    pub fn from_codes(height: usize, width: usize, codes: &[u8]) -> Result<Self> {
        let roles = codes.iter().map(|&c| PixelRole::from_code(c)).collect::<Result<_>>()?;
        Self::new(height, width, roles)
    }

    pub fn codes(&self) -> Vec<u8> {
        self.roles.iter().map(|r| r.code()).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn roles(&self) -> &[PixelRole] {
        &self.roles
    }

    pub fn get(&self, y: usize, x: usize) -> PixelRole {
        self.roles[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, role: PixelRole) {
        self.roles[y * self.width + x] = role;
    }

    pub fn count(&self, role: PixelRole) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }
}

/// Mean of one loss term over its pixel set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Term {
    pub value: f64,
    pub pixels: usize,
}

impl Term {
    /// Set when the term's pixel set was empty and the value defaulted to 0.
    pub fn is_empty(&self) -> bool {
        self.pixels == 0
    }

    fn mean(sum: f64, pixels: usize) -> Self {
        Term {
            value: if pixels == 0 { 0.0 } else { sum / pixels as f64 },
            pixels,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub likelihood_out: f64,
    pub posterior_in: f64,
    pub posterior_out: f64,
    pub total: f64,
    pub inlier_pixels: usize,
    pub outlier_pixels: usize,
    pub ignored_pixels: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.cls,
            self.likelihood_out,
            self.posterior_in,
            self.posterior_out,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Adds loss values and pixel counts of `other`.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.cls += other.cls;
        self.likelihood_out += other.likelihood_out;
        self.posterior_in += other.posterior_in;
        self.posterior_out += other.posterior_out;
        self.total += other.total;
        self.inlier_pixels += other.inlier_pixels;
        self.outlier_pixels += other.outlier_pixels;
        self.ignored_pixels += other.ignored_pixels;
    }

    /// Divides loss values (not pixel counts) by `n`.
    pub fn mean_over(mut self, n: u64) -> LossBreakdown {
        if n > 0 {
            let d = n as f64;
            self.cls /= d;
            self.likelihood_out /= d;
            self.posterior_in /= d;
            self.posterior_out /= d;
            self.total /= d;
        }
        self
    }
}

fn check_shapes(logits: &LogitMap, labels: &LabelMap, mask: &PixelRoleMask) -> Result<()> {
    let dims = (logits.height(), logits.width());
    for (what, d) in [
        ("labels", (labels.height(), labels.width())),
        ("mask", (mask.height(), mask.width())),
    ] {
        if d != dims {
            return Err(Error::shape(
                format!("{}x{} {what}", dims.0, dims.1),
                format!("{}x{}", d.0, d.1),
            ));
        }
    }
    if labels.num_classes() != logits.num_classes() {
        return Err(Error::shape(
            format!("{} classes", logits.num_classes()),
            labels.num_classes(),
        ));
    }
    Ok(())
}

fn inlier_label(labels: &LabelMap, idx: usize) -> Result<usize> {
    let y = labels.values()[idx] as usize;
    if y >= labels.num_classes() {
        return Err(Error::contract(format!(
            "inlier pixel {idx} carries label {y}, expected < {}",
            labels.num_classes()
        )));
    }
    Ok(y)
}

/// Mean of `-ln softmax(s)_y` over inlier pixels.
pub fn loss_cls(logits: &LogitMap, labels: &LabelMap, mask: &PixelRoleMask) -> Result<Term> {
    check_shapes(logits, labels, mask)?;
    let mut sum = 0.0;
    let mut n = 0;
    for (idx, (s, &role)) in logits.pixels().zip(mask.roles()).enumerate() {
        if role == PixelRole::Inlier {
            let y = inlier_label(labels, idx)?;
            sum += lse_unchecked(s) - s[y];
            n += 1;
        }
    }
    if n == 0 {
        log::warn!("classification loss over an image without inlier pixels");
    }
    Ok(Term::mean(sum, n))
}

/// Likelihood loss bound: `(-mean_in s_y, mean_out lse(s))`.
pub fn loss_x_upper_bound(logits: &LogitMap, labels: &LabelMap, mask: &PixelRoleMask) -> Result<(Term, Term)> {
    check_shapes(logits, labels, mask)?;
    let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0, 0, 0.0, 0);
    for (idx, (s, &role)) in logits.pixels().zip(mask.roles()).enumerate() {
        match role {
            PixelRole::Inlier => {
                sum_in -= s[inlier_label(labels, idx)?];
                n_in += 1;
            }
            PixelRole::Outlier => {
                sum_out += lse_unchecked(s);
                n_out += 1;
            }
            PixelRole::Ignore => {}
        }
    }
    Ok((Term::mean(sum_in, n_in), Term::mean(sum_out, n_out)))
}

/// Dataset-posterior loss: `(mean_in -ln P(d_in|x), mean_out -ln(1 - P(d_in|x)))`.
pub fn loss_d(din: &DatasetPosteriorMap, mask: &PixelRoleMask) -> Result<(Term, Term)> {
    let m = din.map();
    if (m.height(), m.width()) != (mask.height(), mask.width()) {
        return Err(Error::shape(
            format!("{}x{}", m.height(), m.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0, 0, 0.0, 0);
    for (&p, &role) in din.values().iter().zip(mask.roles()) {
        let p = clamp_posterior(p);
        match role {
            PixelRole::Inlier => {
                sum_in -= p.ln();
                n_in += 1;
            }
            PixelRole::Outlier => {
                sum_out -= (1.0 - p).ln();
                n_out += 1;
            }
            PixelRole::Ignore => {}
        }
    }
    Ok((Term::mean(sum_in, n_in), Term::mean(sum_out, n_out)))
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::contract(format!("β must be finite and ≥ 0, got {beta}")));
    }
    Ok(())
}

/// Compound loss of one image.
pub fn loss_total(
    logits: &LogitMap,
    din: &DatasetPosteriorMap,
    labels: &LabelMap,
    mask: &PixelRoleMask,
    beta: f64,
) -> Result<LossBreakdown> {
    check_beta(beta)?;
    let cls = loss_cls(logits, labels, mask)?;
    let (_, lik_out) = loss_x_upper_bound(logits, labels, mask)?;
    let (post_in, post_out) = loss_d(din, mask)?;
    let total = cls.value + post_in.value + beta * (post_out.value + lik_out.value);
    Ok(LossBreakdown {
        cls: cls.value,
        likelihood_out: lik_out.value,
        posterior_in: post_in.value,
        posterior_out: post_out.value,
        total,
        inlier_pixels: cls.pixels,
        outlier_pixels: lik_out.pixels,
        ignored_pixels: mask.count(PixelRole::Ignore),
    })
}

/// One image's inputs to [`loss_total_batch`].
pub struct LossInputs<'a> {
    pub logits: &'a LogitMap,
    pub posterior: &'a DatasetPosteriorMap,
    pub labels: &'a LabelMap,
    pub mask: &'a PixelRoleMask,
}

/// Batch loss: each term averaged over the images whose pixel set is non-empty.
pub fn loss_total_batch(items: &[LossInputs<'_>], beta: f64) -> Result<LossBreakdown> {
    check_beta(beta)?;
    let mut acc = LossBreakdown::default();
    let (mut images_in, mut images_out) = (0usize, 0usize);
    for it in items {
        let b = loss_total(it.logits, it.posterior, it.labels, it.mask, beta)?;
        if b.inlier_pixels > 0 {
            images_in += 1;
            acc.cls += b.cls;
            acc.posterior_in += b.posterior_in;
        }
        if b.outlier_pixels > 0 {
            images_out += 1;
            acc.likelihood_out += b.likelihood_out;
            acc.posterior_out += b.posterior_out;
        }
        acc.inlier_pixels += b.inlier_pixels;
        acc.outlier_pixels += b.outlier_pixels;
        acc.ignored_pixels += b.ignored_pixels;
    }
    if images_in > 0 {
        acc.cls /= images_in as f64;
        acc.posterior_in /= images_in as f64;
    }
    if images_out > 0 {
        acc.likelihood_out /= images_out as f64;
        acc.posterior_out /= images_out as f64;
    }
    acc.total = acc.cls + acc.posterior_in + beta * (acc.posterior_out + acc.likelihood_out);
    Ok(acc)
}

/// Per-pixel targets of a batch laid out like an `[N, 1, H, W]` tensor.
#[derive(Clone, Debug)]
pub struct BatchTargets {
    class_index: Vec<u32>,
    inlier_weight: Vec<f64>,
    outlier_weight: Vec<f64>,
    inlier_pixels: usize,
    outlier_pixels: usize,
    ignored_pixels: usize,
}

impl BatchTargets {
    pub fn new(labels: &[&LabelMap], masks: &[&PixelRoleMask]) -> Result<Self> {
        if labels.len() != masks.len() || labels.is_empty() {
            return Err(Error::contract("labels and masks must pair up and be non-empty"));
        }
        let p = labels[0].height() * labels[0].width();
        let n = labels.len();
        let mut class_index = vec![0u32; n * p];
        let mut in_counts = vec![0usize; n];
        let mut out_counts = vec![0usize; n];
        let mut ignored = 0;
        for (i, (l, m)) in labels.iter().zip(masks).enumerate() {
            if l.height() * l.width() != p || (m.height(), m.width()) != (l.height(), l.width()) {
                return Err(Error::shape(p, l.height() * l.width()));
            }
            for (j, &role) in m.roles().iter().enumerate() {
                match role {
                    PixelRole::Inlier => {
                        class_index[i * p + j] = inlier_label(l, j)? as u32;
                        in_counts[i] += 1;
                    }
                    PixelRole::Outlier => out_counts[i] += 1,
                    PixelRole::Ignore => ignored += 1,
                }
            }
        }
        let weights = |counts: &[usize], role: PixelRole| {
            let images = counts.iter().filter(|&&c| c > 0).count();
            let mut w = vec![0.0; n * p];
            for (i, m) in masks.iter().enumerate() {
                if counts[i] == 0 {
                    continue;
                }
                let wi = 1.0 / (counts[i] * images) as f64;
                for (j, &r) in m.roles().iter().enumerate() {
                    if r == role {
                        w[i * p + j] = wi;
                    }
                }
            }
            w
        };
        Ok(BatchTargets {
            inlier_weight: weights(&in_counts, PixelRole::Inlier),
            outlier_weight: weights(&out_counts, PixelRole::Outlier),
            class_index,
            inlier_pixels: in_counts.iter().sum(),
            outlier_pixels: out_counts.iter().sum(),
            ignored_pixels: ignored,
        })
    }
}

/// Graph nodes of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub posterior_in: Var,
    pub posterior_out: Var,
    pub likelihood_out: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, targets: &BatchTargets) -> LossBreakdown {
        LossBreakdown {
            cls: g.value(self.cls).item(),
            likelihood_out: g.value(self.likelihood_out).item(),
            posterior_in: g.value(self.posterior_in).item(),
            posterior_out: g.value(self.posterior_out).item(),
            total: g.value(self.total).item(),
            inlier_pixels: targets.inlier_pixels,
            outlier_pixels: targets.outlier_pixels,
            ignored_pixels: targets.ignored_pixels,
        }
    }
}

/// Records the compound loss on `g` for `logits: [N, K, H, W]` and `head_logit: [N, 1, H, W]`.
///
/// Agrees with [`loss_total_batch`] evaluated on the same outputs.
pub fn compound_loss(
    g: &mut Graph,
    logits: Var,
    head_logit: Var,
    targets: &BatchTargets,
    beta: f64,
) -> Result<LossVars> {
    check_beta(beta)?;
    let bound = posterior_logit_bound();
    let lse = g.channel_lse(logits);
    let picked = g.select_channel(logits, targets.class_index.clone())?;
    let nll = g.sub(lse, picked)?;
    let cls = g.weighted_sum(nll, targets.inlier_weight.clone())?;

    let log_in = g.log_sigmoid(head_logit, false, bound);
    let post_in_neg = g.weighted_sum(log_in, targets.inlier_weight.clone())?;
    let posterior_in = g.scale(post_in_neg, -1.0);

    let log_out = g.log_sigmoid(head_logit, true, bound);
    let post_out_neg = g.weighted_sum(log_out, targets.outlier_weight.clone())?;
    let posterior_out = g.scale(post_out_neg, -1.0);
    let likelihood_out = g.weighted_sum(lse, targets.outlier_weight.clone())?;

    let inlier_part = g.add(cls, posterior_in)?;
    let outlier_part = g.add(posterior_out, likelihood_out)?;
    let weighted = g.scale(outlier_part, beta);
    let total = g.add(inlier_part, weighted)?;
    Ok(LossVars {
        total,
        cls,
        posterior_in,
        posterior_out,
        likelihood_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn single(logits: &[f64], k: usize) -> LogitMap {
        LogitMap::new(1, logits.len() / k, k, logits.to_vec()).unwrap()
    }

    fn labels(values: &[u8], k: usize) -> LabelMap {
        LabelMap::new(1, values.len(), k, values.to_vec()).unwrap()
    }

    #[test]
    fn cls_examples() {
        let l = labels(&[0], 2);
        let m = PixelRoleMask::from_labels(&l);
        assert_abs_diff_eq!(loss_cls(&single(&[0.0, 0.0], 2), &l, &m).unwrap().value, 2f64.ln());

        let l = labels(&[2], 3);
        let m = PixelRoleMask::from_labels(&l);
        let v = loss_cls(&single(&[1.0, 2.0, 3.0], 3), &l, &m).unwrap().value;
        assert_abs_diff_eq!(v, 0.407_605_964_444_380, epsilon = 1e-12);
    }

    #[test]
    fn cls_saturates_to_zero() {
        let l = labels(&[0], 2);
        let m = PixelRoleMask::from_labels(&l);
        let mut prev = f64::INFINITY;
        for big in [1.0, 5.0, 20.0, 100.0, 400.0] {
            let v = loss_cls(&single(&[big, -big], 2), &l, &m).unwrap().value;
            assert!(v < prev || v == 0.0);
            prev = v;
        }
        assert!(prev < 1e-300);
    }

    #[test]
    fn cls_without_inliers_is_flagged_zero() {
        let l = labels(&[2, 255], 2);
        let m = PixelRoleMask::from_labels(&l);
        let t = loss_cls(&single(&[1.0, 2.0, 3.0, 4.0], 2), &l, &m).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.value, 0.0);
    }

    #[test]
    fn likelihood_bound_examples() {
        let s = [1.0, 2.0, 3.0];
        let lse = crate::math::stable_log_sum_exp(&s).unwrap();
        assert!(lse >= 3.0 && 3.0 >= s[0]);
        assert_abs_diff_eq!(lse, 3.407_606, epsilon = 1e-6);

        let l = labels(&[0], 3);
        let m = PixelRoleMask::from_labels(&l);
        let (inl, out) = loss_x_upper_bound(&single(&s, 3), &l, &m).unwrap();
        assert_eq!(inl.value, -1.0);
        assert!(out.is_empty());
        assert_eq!(out.value, 0.0);

        let c = -1.5;
        let l = labels(&[3, 3], 3);
        let m = PixelRoleMask::from_labels(&l);
        let (_, out) = loss_x_upper_bound(&single(&[c; 6], 3), &l, &m).unwrap();
        assert_abs_diff_eq!(out.value, c + 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn posterior_loss_examples() {
        let m = PixelRoleMask::new(1, 2, vec![PixelRole::Inlier, PixelRole::Outlier]).unwrap();
        let din = DatasetPosteriorMap::new(1, 2, vec![0.5, 0.5]).unwrap();
        let (a, b) = loss_d(&din, &m).unwrap();
        assert_abs_diff_eq!(a.value, 2f64.ln());
        assert_abs_diff_eq!(b.value, 2f64.ln());

        let din = DatasetPosteriorMap::new(1, 2, vec![1.0 - 1e-9, 0.9]).unwrap();
        let (a, b) = loss_d(&din, &m).unwrap();
        assert!(a.value < 1e-6);
        assert_abs_diff_eq!(b.value, std::f64::consts::LN_10, epsilon = 1e-9);
    }

    #[test]
    fn total_fixture() {
        // Inlier [1,2,3] with y=2, outlier [0,0,0], both posteriors 0.5, β=0.03.
        let l = labels(&[2, 3], 3);
        let m = PixelRoleMask::from_labels(&l);
        let logits = single(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0], 3);
        let din = DatasetPosteriorMap::new(1, 2, vec![0.5, 0.5]).unwrap();
        let b = loss_total(&logits, &din, &l, &m, 0.03).unwrap();
        assert_abs_diff_eq!(b.total, 1.154_505_929_081_167, epsilon = 1e-12);
        assert_eq!((b.inlier_pixels, b.outlier_pixels), (1, 1));

        let b0 = loss_total(&logits, &din, &l, &m, 0.0).unwrap();
        assert_eq!(b0.total, b0.cls + b0.posterior_in);
        assert!(loss_total(&logits, &din, &l, &m, -0.1).is_err());
    }

    #[test]
    fn all_inlier_batch_has_no_outlier_terms() {
        let l = labels(&[0, 1], 2);
        let m = PixelRoleMask::from_labels(&l);
        let logits = single(&[0.3, -0.2, 1.0, 4.0], 2);
        let din = DatasetPosteriorMap::new(1, 2, vec![0.2, 0.7]).unwrap();
        for beta in [0.0, 0.03, 10.0] {
            let b = loss_total(&logits, &din, &l, &m, beta).unwrap();
            assert_eq!((b.posterior_out, b.likelihood_out), (0.0, 0.0));
            assert_eq!(b.total, b.cls + b.posterior_in);
        }
    }

    #[test]
    fn inlier_pixel_with_outlier_label_is_rejected() {
        let l = labels(&[2], 2);
        let m = PixelRoleMask::new(1, 1, vec![PixelRole::Inlier]).unwrap();
        assert!(matches!(
            loss_cls(&single(&[0.0, 0.0], 2), &l, &m),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn role_codes_round_trip() {
        for r in [PixelRole::Inlier, PixelRole::Outlier, PixelRole::Ignore] {
            assert_eq!(PixelRole::from_code(r.code()).unwrap(), r);
        }
        assert!(PixelRole::from_code(7).is_err());
    }

    proptest! {
        #[test]
        fn cls_weakly_decreases_in_true_logit(
            v in prop::collection::vec(-10.0f64..10.0, 3),
            y in 0usize..3,
            bump in 0.0f64..5.0,
        ) {
            let l = labels(&[y as u8], 3);
            let m = PixelRoleMask::from_labels(&l);
            let before = loss_cls(&single(&v, 3), &l, &m).unwrap().value;
            let mut w = v.clone();
            w[y] += bump;
            let after = loss_cls(&single(&w, 3), &l, &m).unwrap().value;
            prop_assert!(after <= before + 1e-12);
            // ∂/∂s_y (lse(s) - s_y) = softmax_y - 1 < 0
            let p = crate::math::class_posterior(&single(&v, 3));
            prop_assert!(p.pixel(0)[y] - 1.0 < 0.0);
        }
    }
}
