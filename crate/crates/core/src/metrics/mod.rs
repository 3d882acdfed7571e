//! Anomaly ranking metrics, open-set IoU and the two-fold threshold protocol.

pub mod report;

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, OpenLabelMap, IGNORE_LABEL};
use crate::math::{AnomalyScoreMap, ClassPosteriorMap};

pub const DEFAULT_TARGET_TPR: f64 = 0.95;

/// Pixel scores (higher = more anomalous) with binary truth and optional distance.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPixelSet {
    scores: Vec<f64>,
    truth: Vec<bool>,
    distance: Option<Vec<f64>>,
}

impl ScoredPixelSet {
    pub fn new(scores: Vec<f64>, truth: Vec<bool>) -> Result<Self> {
        if scores.len() != truth.len() {
            return Err(Error::shape(scores.len(), truth.len()));
        }
        if scores.is_empty() {
            return Err(Error::contract("scored pixel set is empty"));
        }
        if let Some(i) = scores.iter().position(|s| s.is_nan()) {
            return Err(Error::NonFinite(format!("score {i} is NaN")));
        }
        Ok(ScoredPixelSet {
            scores,
            truth,
            distance: None,
        })
    }

    pub fn with_distance(mut self, distance: Vec<f64>) -> Result<Self> {
        if distance.len() != self.scores.len() {
            return Err(Error::shape(self.scores.len(), distance.len()));
        }
        self.distance = Some(distance);
        Ok(self)
    }

    /// Non-IGNORE pixels of an image; truth is `label == K`.
    pub fn from_map(scores: &AnomalyScoreMap, gt: &LabelMap) -> Result<Self> {
        if (scores.height(), scores.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape(
                format!("{}x{}", gt.height(), gt.width()),
                format!("{}x{}", scores.height(), scores.width()),
            ));
        }
        let outlier = gt.outlier_label();
        let (s, t) = scores
            .values()
            .iter()
            .zip(gt.values())
            .filter(|(_, &l)| l != IGNORE_LABEL)
            .map(|(&s, &l)| (s, l == outlier))
            .unzip();
        ScoredPixelSet::new(s, t)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn truth(&self) -> &[bool] {
        &self.truth
    }

    pub fn distance(&self) -> Option<&[f64]> {
        self.distance.as_deref()
    }

    pub fn positives(&self) -> usize {
        self.truth.iter().filter(|&&t| t).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Concatenates sets; distances survive only if every part has them.
    pub fn concat(parts: &[ScoredPixelSet]) -> Result<Self> {
        let scores: Vec<f64> = parts.iter().flat_map(|p| p.scores.iter().copied()).collect();
        let truth = parts.iter().flat_map(|p| p.truth.iter().copied()).collect();
        let mut out = ScoredPixelSet::new(scores, truth)?;
        if parts.iter().all(|p| p.distance.is_some()) {
            out.distance = Some(
                parts
                    .iter()
                    .flat_map(|p| p.distance.clone().unwrap_or_default())
                    .collect(),
            );
        }
        Ok(out)
    }

    fn subset(&self, keep: impl Fn(usize) -> bool) -> Option<ScoredPixelSet> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        if idx.is_empty() {
            return None;
        }
        Some(ScoredPixelSet {
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
            truth: idx.iter().map(|&i| self.truth[i]).collect(),
            distance: self.distance.as_ref().map(|d| idx.iter().map(|&i| d[i]).collect()),
        })
    }

    /// Tie groups in descending score order: `(score, positives, negatives)`.
    fn groups_desc(&self) -> Vec<(f64, u64, u64)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        let mut groups: Vec<(f64, u64, u64)> = Vec::new();
        for i in order {
            let s = self.scores[i];
            // `==` so that 0.0 and -0.0 share a group.
            match groups.last_mut() {
                Some(g) if g.0 == s => {}
                _ => groups.push((s, 0, 0)),
            }
            let g = groups.last_mut().expect("group pushed");
            if self.truth[i] {
                g.1 += 1;
            } else {
                g.2 += 1;
            }
        }
        groups
    }

    fn require_both(&self) -> Result<(u64, u64)> {
        let (p, n) = (self.positives() as u64, self.negatives() as u64);
        if p == 0 {
            return Err(Error::Undefined("no positive pixels".into()));
        }
        if n == 0 {
            return Err(Error::Undefined("no negative pixels".into()));
        }
        Ok((p, n))
    }
}

/// Non-interpolated average precision; a tie group shares one precision value.
pub fn average_precision(s: &ScoredPixelSet) -> Result<f64> {
    let total = s.positives() as u64;
    if total == 0 {
        return Err(Error::Undefined("no positive pixels".into()));
    }
    let (mut tp, mut fp, mut acc) = (0u64, 0u64, 0.0);
    for (_, p, n) in s.groups_desc() {
        tp += p;
        fp += n;
        if p > 0 {
            acc += p as f64 * tp as f64 / (tp + fp) as f64;
        }
    }
    Ok(acc / total as f64)
}

/// Threshold reaching a target TPR and the FPR it costs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdCalibration {
    /// Pixels with `score ≥ tau` are flagged.
    pub tau: f64,
    pub achieved_tpr: f64,
    pub fpr: f64,
}

/// Largest `tau` with `TPR(score ≥ tau) ≥ target_tpr`. A zero target gives `tau = +∞`.
pub fn fpr_at_tpr(s: &ScoredPixelSet, target_tpr: f64) -> Result<ThresholdCalibration> {
    if !(0.0..=1.0).contains(&target_tpr) {
        return Err(Error::contract(format!("target TPR {target_tpr} not in [0, 1]")));
    }
    let (p, n) = s.require_both()?;
    if target_tpr == 0.0 {
        return Ok(ThresholdCalibration {
            tau: f64::INFINITY,
            achieved_tpr: 0.0,
            fpr: 0.0,
        });
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    for (score, gp, gn) in s.groups_desc() {
        tp += gp;
        fp += gn;
        let tpr = tp as f64 / p as f64;
        if tpr >= target_tpr {
            return Ok(ThresholdCalibration {
                tau: score,
                achieved_tpr: tpr,
                fpr: fp as f64 / n as f64,
            });
        }
    }
    unreachable!("TPR reaches 1 at the lowest score")
}

/// Probability that a random positive outscores a random negative, ties counting 1/2.
pub fn auroc(s: &ScoredPixelSet) -> Result<f64> {
    let (p, n) = s.require_both()?;
    // Twice the Mann–Whitney U statistic, kept in integers.
    let mut twice_u: u128 = 0;
    let mut neg_below = n;
    for (_, gp, gn) in s.groups_desc() {
        neg_below -= gn;
        twice_u += gp as u128 * (2 * neg_below as u128 + gn as u128);
    }
    Ok(twice_u as f64 / (2.0 * p as f64 * n as f64))
}

/// OUTLIER where `score ≥ tau`, else the given closed-set label.
pub fn fuse_labels(closed: &LabelMap, scores: &AnomalyScoreMap, tau: f64) -> Result<OpenLabelMap> {
    if (closed.height(), closed.width()) != (scores.height(), scores.width()) {
        return Err(Error::shape(
            format!("{}x{}", closed.height(), closed.width()),
            format!("{}x{}", scores.height(), scores.width()),
        ));
    }
    let outlier = closed.outlier_label();
    let values = closed
        .values()
        .iter()
        .zip(scores.values())
        .map(|(&l, &s)| if s >= tau { outlier } else { l })
        .collect();
    LabelMap::new(closed.height(), closed.width(), closed.num_classes(), values)
}

pub fn fuse_open_prediction(posterior: &ClassPosteriorMap, scores: &AnomalyScoreMap, tau: f64) -> Result<OpenLabelMap> {
    let closed = LabelMap::new(
        posterior.height(),
        posterior.width(),
        posterior.num_classes(),
        posterior.argmax(),
    )?;
    fuse_labels(&closed, scores, tau)
}

/// `(K+1)×(K+1)` counts, rows = ground truth, columns = prediction; index `K` is OUTLIER.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpenConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl OpenConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        let n = num_classes + 1;
        OpenConfusionMatrix {
            num_classes,
            counts: vec![0; n * n],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * (self.num_classes + 1) + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image; IGNORE ground-truth pixels are skipped.
    pub fn add(&mut self, pred: &OpenLabelMap, gt: &OpenLabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape(
                format!("{}x{}", gt.height(), gt.width()),
                format!("{}x{}", pred.height(), pred.width()),
            ));
        }
        let k = self.num_classes;
        if pred.num_classes() != k || gt.num_classes() != k {
            return Err(Error::shape(
                format!("{k} classes"),
                pred.num_classes().max(gt.num_classes()),
            ));
        }
        for (i, (&p, &g)) in pred.values().iter().zip(gt.values()).enumerate() {
            if g == IGNORE_LABEL {
                continue;
            }
            if p as usize > k {
                return Err(Error::Data(format!("prediction {p} at pixel {i} out of range")));
            }
            self.counts[g as usize * (k + 1) + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &OpenConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(self.num_classes, other.num_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn open_confusion(pred: &OpenLabelMap, gt: &OpenLabelMap) -> Result<OpenConfusionMatrix> {
    let mut cm = OpenConfusionMatrix::new(gt.num_classes());
    cm.add(pred, gt)?;
    Ok(cm)
}

/// Integer parts of one class IoU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassIou {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassIou {
    /// `None` when the class never occurs in ground truth or prediction.
    pub fn value(&self) -> Option<f64> {
        let d = self.tp + self.fp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub classes: Vec<ClassIou>,
    /// Mean over classes with a defined IoU.
    pub mean: f64,
}

fn iou_report(classes: Vec<ClassIou>) -> Result<IouReport> {
    let defined: Vec<f64> = classes.iter().filter_map(ClassIou::value).collect();
    if defined.is_empty() {
        return Err(Error::Undefined("no class has pixels".into()));
    }
    Ok(IouReport {
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
        classes,
    })
}

/// Open-IoU per inlier class: false positives and negatives include the outlier row and column.
pub fn open_miou(cm: &OpenConfusionMatrix) -> Result<IouReport> {
    let k = cm.num_classes;
    let classes = (0..k)
        .map(|c| ClassIou {
            tp: cm.get(c, c),
            fp: (0..=k).filter(|&i| i != c).map(|i| cm.get(i, c)).sum(),
            fn_: (0..=k).filter(|&i| i != c).map(|i| cm.get(c, i)).sum(),
        })
        .collect();
    iou_report(classes)
}

/// Standard IoU on the `K×K` block of inlier ground truth and inlier predictions.
pub fn closed_miou(cm: &OpenConfusionMatrix) -> Result<IouReport> {
    let k = cm.num_classes;
    let classes = (0..k)
        .map(|c| ClassIou {
            tp: cm.get(c, c),
            fp: (0..k).filter(|&i| i != c).map(|i| cm.get(i, c)).sum(),
            fn_: (0..k).filter(|&i| i != c).map(|i| cm.get(c, i)).sum(),
        })
        .collect();
    iou_report(classes)
}

/// One evaluated image: closed-set prediction, anomaly scores and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldImage {
    pub closed: LabelMap,
    pub scores: AnomalyScoreMap,
    pub gt: LabelMap,
}

fn fold_pixels(fold: &[FoldImage]) -> Result<ScoredPixelSet> {
    let parts = fold
        .iter()
        .map(|im| ScoredPixelSet::from_map(&im.scores, &im.gt))
        .collect::<Result<Vec<_>>>()?;
    ScoredPixelSet::concat(&parts)
}

/// Open-mIoU of a fold at a fixed threshold, from the summed confusion matrix.
pub fn fold_open_miou(fold: &[FoldImage], tau: f64) -> Result<IouReport> {
    let first = fold.first().ok_or_else(|| Error::contract("empty fold"))?;
    let mut cm = OpenConfusionMatrix::new(first.gt.num_classes());
    for im in fold {
        cm.add(&fuse_labels(&im.closed, &im.scores, tau)?, &im.gt)?;
    }
    open_miou(&cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoFoldResult {
    /// Calibrated on fold A, applied to fold B.
    pub calibration_a: ThresholdCalibration,
    pub calibration_b: ThresholdCalibration,
    /// Open-mIoU measured on A with `calibration_b.tau`.
    pub score_a: f64,
    pub score_b: f64,
    pub images_a: usize,
    pub images_b: usize,
    pub open_miou: f64,
}

/// Each fold's threshold is measured on the other fold; the two results are averaged
/// with weights equal to the image count of the evaluated fold.
pub fn two_fold_open_eval(fold_a: &[FoldImage], fold_b: &[FoldImage], target_tpr: f64) -> Result<TwoFoldResult> {
    if fold_a.is_empty() || fold_b.is_empty() {
        return Err(Error::contract("both folds need at least one image"));
    }
    let calibrate = |fold: &[FoldImage], name: &str| {
        fpr_at_tpr(&fold_pixels(fold)?, target_tpr).map_err(|e| match e {
            Error::Undefined(why) => Error::Undefined(format!("cannot calibrate on fold {name}: {why}")),
            other => other,
        })
    };
    let calibration_a = calibrate(fold_a, "A")?;
    let calibration_b = calibrate(fold_b, "B")?;
    let score_a = fold_open_miou(fold_a, calibration_b.tau)?.mean;
    let score_b = fold_open_miou(fold_b, calibration_a.tau)?.mean;
    let (na, nb) = (fold_a.len(), fold_b.len());
    Ok(TwoFoldResult {
        calibration_a,
        calibration_b,
        score_a,
        score_b,
        images_a: na,
        images_b: nb,
        open_miou: (na as f64 * score_a + nb as f64 * score_b) / (na + nb) as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinMetrics {
    pub lo: f64,
    pub hi: f64,
    pub positives: usize,
    pub negatives: usize,
    /// `None` when the bin lacks positives or negatives.
    pub ap: Option<f64>,
    pub fpr95: Option<ThresholdCalibration>,
}

/// Metrics per distance bin `[edges[i], edges[i+1])`; pixels outside every bin are dropped.
pub fn range_binned(s: &ScoredPixelSet, edges: &[f64], target_tpr: f64) -> Result<Vec<BinMetrics>> {
    let dist = s
        .distance()
        .ok_or_else(|| Error::contract("range binning needs a distance for every pixel"))?;
    if edges.len() < 2
        || edges
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(Ordering::Less))
    {
        return Err(Error::contract(format!("bin edges must strictly increase: {edges:?}")));
    }
    edges
        .windows(2)
        .map(|w| {
            let (lo, hi) = (w[0], w[1]);
            let part = s.subset(|i| dist[i] >= lo && dist[i] < hi);
            let (positives, negatives) = part.as_ref().map_or((0, 0), |p| (p.positives(), p.negatives()));
            let defined = positives > 0 && negatives > 0;
            let part = part.filter(|_| defined);
            Ok(BinMetrics {
                lo,
                hi,
                positives,
                negatives,
                ap: part.as_ref().map(average_precision).transpose()?,
                fpr95: part.as_ref().map(|p| fpr_at_tpr(p, target_tpr)).transpose()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn set(scores: &[f64], truth: &[u8]) -> ScoredPixelSet {
        ScoredPixelSet::new(scores.to_vec(), truth.iter().map(|&t| t == 1).collect()).unwrap()
    }

    fn labels(k: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(1, v.len(), k, v.to_vec()).unwrap()
    }

    fn scores(v: &[f64]) -> AnomalyScoreMap {
        AnomalyScoreMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn ap_examples() {
        assert_abs_diff_eq!(
            average_precision(&set(&[0.9, 0.8, 0.7], &[1, 0, 1])).unwrap(),
            5.0 / 6.0,
            epsilon = 1e-15
        );
        assert_eq!(
            average_precision(&set(&[5.0, 4.0, 1.0, 0.0], &[1, 1, 0, 0])).unwrap(),
            1.0
        );
        assert!(matches!(
            average_precision(&set(&[1.0], &[0])),
            Err(Error::Undefined(_))
        ));
        // One tie group holding everything: precision = base rate.
        assert_abs_diff_eq!(average_precision(&set(&[1.0; 4], &[1, 0, 0, 0])).unwrap(), 0.25);
    }

    #[test]
    fn fpr_examples() {
        let c = fpr_at_tpr(&set(&[0.9, 0.8, 0.7, 0.1], &[1, 0, 1, 0]), 0.95).unwrap();
        assert_eq!((c.tau, c.achieved_tpr, c.fpr), (0.7, 1.0, 0.5));
        let c = fpr_at_tpr(&set(&[3.0, 2.0, 1.0, 0.0], &[1, 1, 0, 0]), 0.95).unwrap();
        assert_eq!(c.fpr, 0.0);
        let c = fpr_at_tpr(&set(&[3.0, 2.0], &[1, 0]), 0.0).unwrap();
        assert_eq!((c.tau, c.fpr), (f64::INFINITY, 0.0));
        assert!(fpr_at_tpr(&set(&[1.0, 2.0], &[1, 1]), 0.95).is_err());
        assert!(fpr_at_tpr(&set(&[1.0, 2.0], &[1, 0]), 1.5).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&set(&[3.0, 2.0, 1.0, 0.0], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[1.0; 5], &[1, 0, 1, 0, 0])).unwrap(), 0.5);
        assert_eq!(auroc(&set(&[3.0, 2.0, 1.0], &[1, 0, 1])).unwrap(), 0.5);
        assert!(auroc(&set(&[1.0], &[1])).is_err());
    }

    #[test]
    fn fusion_examples() {
        let closed = labels(2, &[1, 0]);
        let s = scores(&[0.2, 0.8]);
        assert_eq!(fuse_labels(&closed, &s, f64::INFINITY).unwrap(), closed);
        assert_eq!(fuse_labels(&closed, &s, f64::NEG_INFINITY).unwrap().values(), &[2, 2]);
        assert_eq!(fuse_labels(&closed, &s, 0.5).unwrap().values(), &[1, 2]);
    }

    #[test]
    fn fuse_uses_posterior_argmax() {
        let logits = crate::math::LogitMap::new(1, 2, 2, vec![0.0, 1.0, 3.0, 3.0]).unwrap();
        let post = crate::math::class_posterior(&logits);
        let out = fuse_open_prediction(&post, &scores(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(out.values(), &[1, 0]);
    }

    #[test]
    fn confusion_examples() {
        let gt = labels(2, &[0, 1, 2]);
        let pred = labels(2, &[0, 1, 1]);
        let cm = open_confusion(&pred, &gt).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(2, 1)), (1, 1, 1));
        assert_eq!(cm.total(), 3);
        let r = open_miou(&cm).unwrap();
        assert_eq!(r.classes[0].value(), Some(1.0));
        assert_eq!(r.classes[1].value(), Some(0.5));
        assert_eq!(r.mean, 0.75);

        let ignored = labels(2, &[255, 255, 255]);
        assert_eq!(open_confusion(&pred, &ignored).unwrap().total(), 0);
        assert!(open_miou(&open_confusion(&pred, &ignored).unwrap()).is_err());
    }

    #[test]
    fn perfect_predictions() {
        let gt = labels(3, &[0, 1, 2, 3, 255]);
        let cm = open_confusion(&gt, &gt).unwrap();
        assert_eq!(open_miou(&cm).unwrap().mean, 1.0);
        assert_eq!(closed_miou(&cm).unwrap().mean, 1.0);
        for c in 0..4 {
            assert_eq!(cm.get(c, c), 1);
        }
    }

    #[test]
    fn checkerboard_with_one_flip() {
        // 4×4 checkerboard of classes 0/1, pixel (0,0) predicted 1 instead of 0.
        let gt: Vec<u8> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8).collect();
        let mut pred = gt.clone();
        pred[0] = 1;
        let cm = open_confusion(
            &LabelMap::new(4, 4, 2, pred).unwrap(),
            &LabelMap::new(4, 4, 2, gt).unwrap(),
        )
        .unwrap();
        let r = closed_miou(&cm).unwrap();
        // class 0: TP 7, FN 1 → 7/8; class 1: TP 8, FP 1 → 8/9.
        assert_abs_diff_eq!(r.mean, (7.0 / 8.0 + 8.0 / 9.0) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn merging_matches_concatenation() {
        let (g1, p1) = (labels(2, &[0, 1, 2]), labels(2, &[1, 1, 2]));
        let (g2, p2) = (labels(2, &[2, 0]), labels(2, &[0, 0]));
        let mut a = open_confusion(&p1, &g1).unwrap();
        a.merge(&open_confusion(&p2, &g2).unwrap()).unwrap();
        let b = open_confusion(&labels(2, &[1, 1, 2, 0, 0]), &labels(2, &[0, 1, 2, 2, 0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flagged_inlier_can_raise_open_iou() {
        // Open-IoU can exceed closed IoU when the detector flags a misclassified inlier pixel.
        let gt = labels(2, &[0, 1]);
        let closed = labels(2, &[0, 0]);
        let open = fuse_labels(&closed, &scores(&[0.0, 1.0]), 0.5).unwrap();
        let closed_iou = closed_miou(&open_confusion(&closed, &gt).unwrap()).unwrap();
        let open_iou = open_miou(&open_confusion(&open, &gt).unwrap()).unwrap();
        assert_eq!(closed_iou.classes[0].value(), Some(0.5));
        assert_eq!(open_iou.classes[0].value(), Some(1.0));
    }

    fn image(closed: &[u8], s: &[f64], gt: &[u8]) -> FoldImage {
        FoldImage {
            closed: labels(2, closed),
            scores: scores(s),
            gt: labels(2, gt),
        }
    }

    #[test]
    fn identical_folds_match_single_fold() {
        let fold = vec![image(&[0, 1, 0, 1], &[0.1, 0.9, 0.2, 0.3], &[0, 2, 0, 1])];
        let r = two_fold_open_eval(&fold, &fold, 0.95).unwrap();
        let tau = fpr_at_tpr(&fold_pixels(&fold).unwrap(), 0.95).unwrap().tau;
        assert_eq!(r.open_miou, fold_open_miou(&fold, tau).unwrap().mean);
    }

    #[test]
    fn fold_weights_follow_image_counts() {
        let a = vec![image(&[0, 1], &[0.9, 0.1], &[2, 1])];
        let b = vec![
            image(&[0, 1], &[0.5, 0.4], &[0, 2]),
            image(&[0, 0], &[0.1, 0.2], &[0, 1]),
            image(&[1, 1], &[0.3, 0.1], &[1, 1]),
        ];
        let r = two_fold_open_eval(&a, &b, 0.95).unwrap();
        assert_eq!((r.images_a, r.images_b), (1, 3));
        assert_abs_diff_eq!(r.open_miou, 0.25 * r.score_a + 0.75 * r.score_b, epsilon = 1e-15);
    }

    #[test]
    fn calibration_without_positives_fails() {
        let a = vec![image(&[0, 1], &[0.9, 0.1], &[0, 1])];
        let b = vec![image(&[0, 1], &[0.9, 0.1], &[2, 1])];
        assert!(matches!(two_fold_open_eval(&a, &b, 0.95), Err(Error::Undefined(_))));
    }

    #[test]
    fn binning() {
        let s = set(&[0.9, 0.1, 0.8, 0.3, 0.2, 0.7], &[1, 0, 1, 0, 0, 1])
            .with_distance(vec![5.0, 6.0, 7.0, 30.0, 31.0, 40.0])
            .unwrap();
        let one = range_binned(&s, &[0.0, 100.0], 0.95).unwrap();
        assert_eq!(one[0].ap, Some(average_precision(&s).unwrap()));
        assert_eq!(one[0].fpr95, Some(fpr_at_tpr(&s, 0.95).unwrap()));

        let bins = range_binned(&s, &[0.0, 10.0, 20.0, 50.0], 0.95).unwrap();
        assert_eq!(bins[0].ap, Some(1.0));
        assert_eq!(bins[0].fpr95.unwrap().fpr, 0.0);
        assert_eq!((bins[1].positives, bins[1].negatives, bins[1].ap), (0, 0, None));
        assert_eq!(bins[2].ap, Some(1.0));
        assert!(range_binned(&s, &[1.0, 1.0], 0.95).is_err());
        assert!(range_binned(&set(&[1.0], &[1]), &[0.0, 1.0], 0.95).is_err());
    }
}
