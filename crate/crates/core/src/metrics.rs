//! NRMSE, SSIM, ROC/AUC, optimal threshold and confusion counts.

use std::fmt::Write as _;

use thiserror::Error;

use crate::map::Map2;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("label map has zero range but prediction differs")]
    DegenerateRange,
    #[error("map {0:?} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall((usize, usize)),
    #[error("ROC needs both positive and negative labels")]
    SingleClass,
    #[error("score and label lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no samples to evaluate")]
    Empty,
}

fn same_shape(y: &Map2, yhat: &Map2) -> Result<(), MetricError> {
    if y.shape() != yhat.shape() {
        return Err(MetricError::ShapeMismatch(y.shape(), yhat.shape()));
    }
    Ok(())
}

/// RMSE divided by the min-max range of `y`.
pub fn nrmse(y: &Map2, yhat: &Map2) -> Result<f64, MetricError> {
    same_shape(y, yhat)?;
    if y.data.is_empty() {
        return Err(MetricError::Empty);
    }
    let (lo, hi) = y.min_max();
    let sq: f64 = y.data.iter().zip(&yhat.data).map(|(a, b)| (a - b) * (a - b)).sum();
    if hi == lo {
        return if sq == 0.0 { Ok(0.0) } else { Err(MetricError::DegenerateRange) };
    }
    Ok((sq / y.data.len() as f64).sqrt() / (hi - lo))
}

/// Normalized 1-D Gaussian taps of length [`SSIM_WINDOW`].
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut t = [0.0; SSIM_WINDOW];
    for (k, v) in t.iter_mut().enumerate() {
        let d = k as f64 - r;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Separable Gaussian filter over fully contained windows only.
fn filter_valid(m: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| taps[t] * m[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| taps[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over every fully contained 11x11 Gaussian window, with
/// dynamic range `l`.
pub fn ssim_with_range(y: &Map2, yhat: &Map2, l: f64) -> Result<f64, MetricError> {
    same_shape(y, yhat)?;
    let (h, w) = y.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall((h, w)));
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let a = &y.data;
    let b = &yhat.data;
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let e_aa = filter_valid(&prod(&|p, _| p * p), h, w, &taps);
    let e_bb = filter_valid(&prod(&|_, q| q * q), h, w, &taps);
    let e_ab = filter_valid(&prod(&|p, q| p * q), h, w, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / n as f64)
}

/// SSIM for maps on `[0, 1]`.
pub fn ssim(y: &Map2, yhat: &Map2) -> Result<f64, MetricError> {
    ssim_with_range(y, yhat, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Scores `>= threshold` are predicted positive; the first point uses `+inf`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC over every distinct score, descending; equal scores change class
/// together. Starts at `(0, 0)` and ends at `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut pts = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        while k < order.len() && scores[order[k]] == t {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        pts.push(RocPoint { threshold: t, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    Ok(pts)
}

/// Trapezoidal area under an ROC curve.
pub fn auc(points: &[RocPoint]) -> f64 {
    points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// Point closest to `(fpr, tpr) = (0, 1)`; ties go to the higher threshold.
pub fn optimal_threshold(points: &[RocPoint]) -> Option<RocPoint> {
    let dist = |p: &RocPoint| p.fpr.powi(2) + (1.0 - p.tpr).powi(2);
    let mut best: Option<RocPoint> = None;
    for p in points {
        best = match best {
            Some(b) if dist(&b) < dist(p) || (dist(&b) == dist(p) && b.threshold >= p.threshold) => Some(b),
            _ => Some(*p),
        };
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub false_neg: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.false_neg
    }
}

/// Counts with "predicted positive" meaning `score >= t`.
pub fn confusion(scores: &[f64], labels: &[bool], t: f64) -> Result<ConfusionMatrix, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let mut c = ConfusionMatrix::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= t, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub nrmse: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrcSummary {
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    pub optimal: RocPoint,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub avg_nrmse: f64,
    pub avg_ssim: f64,
    pub drc: Option<DrcSummary>,
}

/// Per-sample NRMSE/SSIM and their unweighted means; with `binary_roc`,
/// also one pooled ROC over all pixels with label `> 0` as positive.
pub fn evaluate_maps(pairs: &[(String, Map2, Map2)], binary_roc: bool) -> Result<MetricsReport, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut samples = Vec::with_capacity(pairs.len());
    for (id, label, pred) in pairs {
        samples.push(SampleMetrics { id: id.clone(), nrmse: nrmse(label, pred)?, ssim: ssim(label, pred)? });
    }
    let n = samples.len() as f64;
    let avg_nrmse = samples.iter().map(|s| s.nrmse).sum::<f64>() / n;
    let avg_ssim = samples.iter().map(|s| s.ssim).sum::<f64>() / n;
    let drc = if binary_roc {
        let scores: Vec<f64> = pairs.iter().flat_map(|(_, _, p)| p.data.iter().copied()).collect();
        let labels: Vec<bool> = pairs.iter().flat_map(|(_, l, _)| l.data.iter().map(|&v| v > 0.0)).collect();
        let roc = roc_curve(&scores, &labels)?;
        let optimal = optimal_threshold(&roc).expect("roc is nonempty");
        let confusion = confusion(&scores, &labels, optimal.threshold)?;
        Some(DrcSummary { auc: auc(&roc), roc, optimal, confusion })
    } else {
        None
    };
    Ok(MetricsReport { samples, avg_nrmse, avg_ssim, drc })
}

impl MetricsReport {
    pub fn auc(&self) -> Option<f64> {
        self.drc.as_ref().map(|d| d.auc)
    }

    /// `sample_id,nrmse,ssim` rows followed by an `average` row.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("sample_id,nrmse,ssim\n");
        for s in &self.samples {
            let _ = writeln!(out, "{},{},{}", s.id, s.nrmse, s.ssim);
        }
        let _ = writeln!(out, "average,{},{}", self.avg_nrmse, self.avg_ssim);
        out
    }

    pub fn roc_csv(&self) -> Option<String> {
        self.drc.as_ref().map(|d| {
            let mut out = String::from("threshold,fpr,tpr\n");
            for p in &d.roc {
                let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
            }
            out
        })
    }

    pub fn summary_line(&self) -> String {
        match &self.drc {
            Some(d) => format!(
                "Avg NRMSE {:.4}  Avg SSIM {:.4}  AUC {:.4}  threshold {:.4}",
                self.avg_nrmse, self.avg_ssim, d.auc, d.optimal.threshold
            ),
            None => format!("Avg NRMSE {:.4}  Avg SSIM {:.4}", self.avg_nrmse, self.avg_ssim),
        }
    }
}
