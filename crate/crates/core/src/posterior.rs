//! Monte-Carlo posterior statistics and uncertainty diagnostics.
//!
//! Ensembles of reconstructions are summarized by their voxelwise mean and
//! standard deviation. The standard deviation map is then compared with the
//! absolute error of the mean: correlation coefficients, a least-squares
//! line and ROC curves for detecting the voxels with the largest errors.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const DEFAULT_ENSEMBLE: usize = 20;
pub const TOP_PERCENTS: [f64; 3] = [25.0, 10.0, 5.0];
/// Default support: ground truth above this fraction of the clamp maximum.
pub const MASK_FRACTION: f32 = 0.01;
pub const MIN_VOXELS: usize = 100;

fn check_ensemble(samples: &[Volume], min: usize) -> Result<()> {
    if samples.len() < min {
        return Err(Error::invalid(format!(
            "ensemble statistic needs at least {min} samples, got {}",
            samples.len()
        )));
    }
    for s in &samples[1..] {
        samples[0].ensure_same_shape(s, "ensemble member")?;
    }
    Ok(())
}

/// Voxelwise sample mean.
pub fn mc_mean(samples: &[Volume]) -> Result<Volume> {
    check_ensemble(samples, 1)?;
    let n = samples.len() as f64;
    let mut acc = vec![0.0f64; samples[0].len()];
    for s in samples {
        for (a, &v) in acc.iter_mut().zip(s.data()) {
            *a += v as f64;
        }
    }
    Volume::from_vec(samples[0].shape(), acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Voxelwise sample standard deviation with divisor `N − 1`.
pub fn mc_std(samples: &[Volume]) -> Result<Volume> {
    check_ensemble(samples, 2)?;
    let n = samples.len() as f64;
    let len = samples[0].len();
    let mut mean = vec![0.0f64; len];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s.data()) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut ss = vec![0.0f64; len];
    for s in samples {
        for ((a, &v), m) in ss.iter_mut().zip(s.data()).zip(&mean) {
            *a += (v as f64 - m).powi(2);
        }
    }
    Volume::from_vec(
        samples[0].shape(),
        ss.into_iter().map(|a| (a / (n - 1.0)).sqrt() as f32).collect(),
    )
}

/// `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties receiving their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares fit `y ≈ slope·x + intercept`; `None` for constant `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| (b - slope * a - intercept).powi(2))
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Labels the `ceil(percent% · n)` largest errors as positive; equal errors
/// are ordered by index.
pub fn top_percent_labels(errors: &[f64], percent: f64) -> Vec<bool> {
    let n = errors.len();
    let k = ((percent / 100.0) * n as f64).ceil() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| errors[j].total_cmp(&errors[i]).then(i.cmp(&j)));
    let mut labels = vec![false; n];
    for &i in idx.iter().take(k.min(n)) {
        labels[i] = true;
    }
    labels
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    /// Score threshold: voxels with `score >= threshold` are flagged.
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC curve starting at `(0, 0)` with one point per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC needs both positive and negative labels"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint {
            threshold: s,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under a ROC curve.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Point maximizing `tpr − fpr`; the earliest such point wins.
pub fn youden_point(points: &[RocPoint]) -> RocPoint {
    let mut best = points[0];
    for p in points {
        if p.tpr - p.fpr > best.tpr - best.fpr {
            best = *p;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocSummary {
    pub top_percent: f64,
    pub auc: f64,
    /// Youden-optimal operating point; the threshold is on the min-max
    /// normalized STD scale.
    pub sensitivity: f64,
    pub false_positive_rate: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UncertaintyReport {
    pub voxels: usize,
    pub mask: String,
    pub pearson_r: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub r_squared: Option<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub roc: Vec<RocSummary>,
}

/// Uncertainty analysis of `std` against `error` over the voxels where
/// `mask` is set (all voxels when `mask` is `None`).
pub fn uncertainty_report(
    std: &[f32],
    error: &[f32],
    mask: Option<&[bool]>,
    mask_description: &str,
) -> Result<UncertaintyReport> {
    if std.len() != error.len() || mask.is_some_and(|m| m.len() != std.len()) {
        return Err(Error::invalid("uncertainty inputs differ in length"));
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let s: Vec<f64> = (0..std.len()).filter(|&i| keep(i)).map(|i| std[i] as f64).collect();
    let e: Vec<f64> = (0..std.len()).filter(|&i| keep(i)).map(|i| error[i] as f64).collect();
    if s.len() < MIN_VOXELS {
        return Err(Error::invalid(format!(
            "uncertainty analysis needs at least {MIN_VOXELS} voxels, got {}",
            s.len()
        )));
    }
    if s.iter().chain(&e).any(|v| !v.is_finite()) {
        return Err(Error::invalid("uncertainty inputs contain non-finite values"));
    }
    let fit = linear_fit(&s, &e);
    let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let normalize = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let mut roc = Vec::new();
    for pct in TOP_PERCENTS {
        let labels = top_percent_labels(&e, pct);
        let curve = roc_curve(&s, &labels)?;
        let best = youden_point(&curve);
        roc.push(RocSummary {
            top_percent: pct,
            auc: auc(&curve),
            sensitivity: best.tpr,
            false_positive_rate: best.fpr,
            threshold: if best.threshold.is_finite() {
                normalize(best.threshold)
            } else {
                1.0
            },
        });
    }
    Ok(UncertaintyReport {
        voxels: s.len(),
        mask: mask_description.to_string(),
        pearson_r: pearson(&s, &e),
        spearman_rho: spearman(&s, &e),
        r_squared: fit.map(|f| f.r_squared),
        slope: fit.map(|f| f.slope),
        intercept: fit.map(|f| f.intercept),
        roc,
    })
}

/// Ground-truth support: voxels above `MASK_FRACTION · clamp_hi`.
pub fn default_mask(ground_truth: &Volume, clamp_hi: f32) -> Vec<bool> {
    let thr = MASK_FRACTION * clamp_hi;
    ground_truth.data().iter().map(|&v| v > thr).collect()
}

/// `|a − b|` voxelwise.
pub fn abs_error(a: &Volume, b: &Volume) -> Result<Volume> {
    a.ensure_same_shape(b, "error map")?;
    Volume::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect(),
    )
}
