//! Evaluation metrics and the report container.
//!
//! All functions are pure and reduce in input order, so results are
//! reproducible bit-for-bit.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clipped to `[PROB_CLIP, 1 − PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-12;
pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("only one class present; the metric is undefined")]
    SingleClass,
    #[error("no positive labels")]
    NoPositive,
    #[error("bin count must be at least 1")]
    Bins,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
}

fn check_lengths(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Index of the equal-width bin holding `conf`: bin `b` covers
/// `[b/B, (b+1)/B)`, and the last bin also holds 1.
fn bin_index(conf: f64, bins: usize) -> usize {
    let n = bins as f64;
    let mut b = ((conf * n).floor().max(0.0) as usize).min(bins - 1);
    while b > 0 && conf < b as f64 / n {
        b -= 1;
    }
    while b + 1 < bins && conf >= (b + 1) as f64 / n {
        b += 1;
    }
    b
}

/// Expected calibration error of argmax predictions.
///
/// `probs[i]` is the class distribution for record `i`; confidence is its
/// maximum and a prediction is correct when the argmax equals `labels[i]`.
pub fn ece(labels: &[usize], probs: &[Vec<f64>], bins: usize) -> Result<f64, MetricError> {
    check_lengths(labels.len(), probs.len())?;
    if bins == 0 {
        return Err(MetricError::Bins);
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for (&y, p) in labels.iter().zip(probs) {
        let pred = argmax(p);
        let conf = p[pred];
        let b = bin_index(conf, bins);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == y {
            correct[b] += 1;
        }
    }
    let total = labels.len() as f64;
    let mut out = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let n = count[b] as f64;
        let acc = correct[b] as f64 / n;
        let conf = conf_sum[b] / n;
        out += (n / total) * (acc - conf).abs();
    }
    Ok(out)
}

/// Fraction of argmax predictions equal to the label.
pub fn accuracy(labels: &[usize], probs: &[Vec<f64>]) -> Result<f64, MetricError> {
    check_lengths(labels.len(), probs.len())?;
    let hits = labels
        .iter()
        .zip(probs)
        .filter(|(&y, p)| argmax(p) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn total_order(a: &f64, b: &f64) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| total_order(&values[i], &values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share their mean
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Area under the ROC curve via the Mann–Whitney statistic (ties count ½).
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64, MetricError> {
    check_lengths(labels.len(), scores.len())?;
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&y, _)| y)
        .map(|(_, &r)| r)
        .sum();
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Average precision: Σ over distinct score thresholds (descending) of
/// `(recall_k − recall_{k−1}) · precision_k`.
pub fn auprc(labels: &[bool], scores: &[f64]) -> Result<f64, MetricError> {
    check_lengths(labels.len(), scores.len())?;
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 {
        return Err(MetricError::NoPositive);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| total_order(&scores[j], &scores[i]));
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut k = 0;
    while k < order.len() {
        let threshold = scores[order[k]];
        while k < order.len() && scores[order[k]] == threshold {
            seen += 1;
            if labels[order[k]] {
                tp += 1;
            }
            k += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Mean negative log-probability of the true class.
pub fn nll(labels: &[usize], probs: &[Vec<f64>]) -> Result<f64, MetricError> {
    check_lengths(labels.len(), probs.len())?;
    let mut total = 0.0;
    for (&y, p) in labels.iter().zip(probs) {
        let py = *p.get(y).ok_or(MetricError::Label {
            label: y,
            classes: p.len(),
        })?;
        total += -py.clamp(PROB_CLIP, 1.0 - PROB_CLIP).ln();
    }
    Ok(total / labels.len() as f64)
}

pub fn mse(targets: &[f64], means: &[f64]) -> Result<f64, MetricError> {
    check_lengths(targets.len(), means.len())?;
    let s: f64 = targets.iter().zip(means).map(|(t, m)| (t - m) * (t - m)).sum();
    Ok(s / targets.len() as f64)
}

/// Mean Gaussian negative log-likelihood of targets under `N(mean, var)`.
pub fn gaussian_nll(targets: &[f64], means: &[f64], vars: &[f64]) -> Result<f64, MetricError> {
    check_lengths(targets.len(), means.len())?;
    check_lengths(targets.len(), vars.len())?;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let s: f64 = targets
        .iter()
        .zip(means)
        .zip(vars)
        .map(|((t, m), v)| {
            let v = v.max(PROB_CLIP);
            0.5 * (ln_2pi + v.ln() + (t - m) * (t - m) / v)
        })
        .sum();
    Ok(s / targets.len() as f64)
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>, MetricError> {
    check_lengths(a.len(), b.len())?;
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    Ok(pearson(&ra, &rb))
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    pub value: f64,
    pub bandwidth: f64,
    /// True when a set had a single element and the biased estimator was used.
    pub biased: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared MMD with an RBF kernel whose bandwidth is the median pairwise
/// distance over the pooled sample. Unbiased (may be slightly negative)
/// unless a set has one element.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<MmdEstimate, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Empty);
    }
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    dists.sort_by(total_order);
    let median = if dists.is_empty() {
        0.0
    } else if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
    };
    let h = if median > 0.0 { median } else { 1.0 };
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) / (2.0 * h * h)).exp();
    let biased = a.len() < 2 || b.len() < 2;
    let within = |s: &[Vec<f64>]| {
        let mut total = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j || biased {
                    total += k(&s[i], &s[j]);
                }
            }
        }
        let n = s.len() as f64;
        if biased {
            total / (n * n)
        } else {
            total / (n * (n - 1.0))
        }
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += k(x, y);
        }
    }
    cross /= (a.len() * b.len()) as f64;
    Ok(MmdEstimate {
        value: within(a) + within(b) - 2.0 * cross,
        bandwidth: h,
        biased,
    })
}

/// Run metadata attached to every report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seed: u64,
    pub mask_level: f64,
    pub mc_samples: usize,
    pub variant: String,
    #[serde(default)]
    pub flags: Vec<String>,
}

/// Named scalar metrics plus the names of metrics that were undefined.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub metrics: BTreeMap<String, f64>,
    pub missing: Vec<String>,
}

impl MetricsReport {
    pub fn new(meta: ReportMeta) -> Self {
        Self {
            meta,
            ..Self::default()
        }
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn set_opt(&mut self, name: &str, value: Option<f64>) {
        match value {
            Some(v) => self.set(name, v),
            None => self.missing.push(name.to_string()),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Checks the documented ranges of the standard metrics.
    pub fn validate_ranges(&self) -> Result<(), String> {
        for (name, &v) in &self.metrics {
            let ok = match name.as_str() {
                "auroc" | "auprc" | "ece" | "accuracy" => (0.0..=1.0).contains(&v),
                "nll" | "mse" => v >= 0.0,
                _ => v.is_finite(),
            };
            if !ok {
                return Err(format!("{name} = {v} is out of range"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ece_examples() {
        let probs = vec![vec![0.0, 1.0]; 4];
        assert_eq!(ece(&[1, 1, 1, 1], &probs, 15).unwrap(), 0.0);
        let probs = vec![vec![0.2, 0.8]; 10];
        let labels = [1, 1, 1, 1, 1, 1, 1, 1, 0, 0];
        assert!(ece(&labels, &probs, 15).unwrap() < 1e-15);
        assert_eq!(ece(&[], &[], 15), Err(MetricError::Empty));
        assert_eq!(ece(&[0], &[vec![1.0, 0.0]], 0), Err(MetricError::Bins));
    }

    #[test]
    fn bin_edges_are_consistent() {
        for bins in 1..20 {
            for b in 0..=bins {
                let edge = b as f64 / bins as f64;
                let idx = bin_index(edge, bins);
                assert_eq!(idx, b.min(bins - 1));
            }
        }
    }

    #[test]
    fn auroc_examples() {
        let y = [false, false, true, true];
        assert_eq!(auroc(&y, &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auprc(&y, &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auroc(&y, &[0.5; 4]).unwrap(), 0.5);
        assert_eq!(auroc(&[true, true], &[0.1, 0.2]), Err(MetricError::SingleClass));
        assert_eq!(auprc(&[false], &[0.1]), Err(MetricError::NoPositive));
    }

    #[test]
    fn auprc_small_case() {
        // scores desc: 0.9(+) 0.8(-) 0.7(+): AP = ½·1 + ½·⅔
        let ap = auprc(&[true, false, true], &[0.9, 0.8, 0.7]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn nll_and_mse_examples() {
        assert!(nll(&[1, 0], &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap() <= 1e-11);
        assert_eq!(nll(&[1], &[vec![0.5, 0.5]]).unwrap(), 2f64.ln());
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0], &[1.0, 2.0]), Err(MetricError::LengthMismatch(1, 2)));
    }

    #[test]
    fn spearman_examples() {
        let a = [3.0, 1.0, 2.0, 5.0];
        assert!((spearman(&a, &a).unwrap().unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(spearman(&a, &[1.0; 4]).unwrap(), None);
        let rev: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((spearman(&a, &rev).unwrap().unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 3.0]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn mmd_self_comparison_and_fallback() {
        let a: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.3, (i * i) as f64 * 0.01]).collect();
        let est = mmd(&a, &a).unwrap();
        assert!(est.value <= 1e-12);
        assert!(!est.biased);
        let one = mmd(&a[..1], &a[1..]).unwrap();
        assert!(one.biased);
        assert_eq!(mmd(&[], &a), Err(MetricError::Empty));
    }

    #[test]
    fn report_ranges() {
        let mut r = MetricsReport::default();
        r.set("auroc", 0.7);
        r.set_opt("volume_corr", None);
        assert!(r.validate_ranges().is_ok());
        assert_eq!(r.missing, vec!["volume_corr".to_string()]);
        r.set("ece", 1.5);
        assert!(r.validate_ranges().is_err());
    }
}
