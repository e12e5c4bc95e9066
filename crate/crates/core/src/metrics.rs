//! Pixel-level localisation metrics.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::Mask;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    /// `2tp / (2tp + fp + fn)`; 1 when neither mask has a positive.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// `tp / (tp + fp + fn)`; 1 when neither mask has a positive.
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Binarises `prob >= threshold` and counts agreement with `gt`.
pub fn confusion<S: Scalar>(
    prob: &Tensor<S>,
    gt: &Mask,
    threshold: f64,
) -> Result<ConfusionCounts> {
    if prob.len() != gt.bits().len() || prob.shape()[0] != gt.height() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs mask {}x{}",
            prob.shape(),
            gt.height(),
            gt.width()
        )));
    }
    let t = S::lit(threshold);
    let mut c = ConfusionCounts::default();
    for (&p, &g) in prob.data().iter().zip(gt.bits()) {
        match (p >= t, g == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Area under the ROC curve as the Mann-Whitney statistic
/// `P(s+ > s-) + P(s+ = s-) / 2`, computed from ranks after sorting.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Count, over tie groups in ascending order, negatives strictly below and
    // half the negatives tied with each positive. Integer arithmetic in
    // half-units keeps the result exact.
    let mut neg_below: u64 = 0;
    let mut half_units: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        half_units += gp as u128 * (2 * neg_below as u128 + gn as u128);
        neg_below += gn;
        i = j;
    }
    Ok(half_units as f64 / (2.0 * pos as f64 * neg as f64))
}

/// AUC over at most `max_pixels` pixels drawn without replacement with a
/// fixed seed; all pixels when the image is small enough.
pub fn pixel_auc<S: Scalar>(
    prob: &Tensor<S>,
    gt: &Mask,
    max_pixels: Option<usize>,
    seed: u64,
) -> Result<f64> {
    if prob.len() != gt.bits().len() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs mask {}x{}",
            prob.shape(),
            gt.height(),
            gt.width()
        )));
    }
    let n = prob.len();
    let idx: Vec<usize> = match max_pixels {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample(&mut rng, n, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    };
    let scores: Vec<f64> = idx.iter().map(|&i| prob.data()[i].to_f64_lossy()).collect();
    let labels: Vec<bool> = idx.iter().map(|&i| gt.bits()[i] == 1).collect();
    auc(&scores, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub counts: ConfusionCounts,
    pub f1: f64,
    pub iou: f64,
    pub acc: f64,
    /// Absent when the mask has only one class.
    pub auc: Option<f64>,
}

pub fn image_metrics<S: Scalar>(
    prob: &Tensor<S>,
    gt: &Mask,
    threshold: f64,
    auc_pixels: Option<usize>,
    seed: u64,
) -> Result<ImageMetrics> {
    let counts = confusion(prob, gt, threshold)?;
    let auc = match pixel_auc(prob, gt, auc_pixels, seed) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ImageMetrics {
        counts,
        f1: counts.f1(),
        iou: counts.iou(),
        acc: counts.accuracy(),
        auc,
    })
}

/// Dataset summary: per-image averages as the headline, pooled counts too.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSummary {
    pub n_images: usize,
    pub f1: f64,
    pub iou: f64,
    pub acc: f64,
    pub auc: Option<f64>,
    pub auc_images: usize,
    pub pooled: ConfusionCounts,
}

impl MetricSummary {
    pub fn from_images(images: &[ImageMetrics]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::UndefinedMetric("no images to summarise".into()));
        }
        let n = images.len() as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
        let aucs: Vec<f64> = images.iter().filter_map(|m| m.auc).collect();
        let pooled = images
            .iter()
            .fold(ConfusionCounts::default(), |acc, m| acc.merge(&m.counts));
        Ok(Self {
            n_images: images.len(),
            f1: mean(|m| m.f1),
            iou: mean(|m| m.iou),
            acc: mean(|m| m.acc),
            auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
            auc_images: aucs.len(),
            pooled,
        })
    }

    /// `key=value` lines: headline keys `f1 auc iou acc n_images`, then the
    /// pooled variants.
    pub fn to_records(&self) -> String {
        let auc = self.auc.map_or("absent".to_string(), |v| format!("{v:.6}"));
        format!(
            "f1={:.6}\nauc={auc}\niou={:.6}\nacc={:.6}\nn_images={}\nauc_images={}\npooled_f1={:.6}\npooled_iou={:.6}\npooled_acc={:.6}\n",
            self.f1,
            self.iou,
            self.acc,
            self.n_images,
            self.auc_images,
            self.pooled.f1(),
            self.pooled.iou(),
            self.pooled.accuracy(),
        )
    }
}
