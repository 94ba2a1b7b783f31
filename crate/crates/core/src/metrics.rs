//! SRCC / PLCC and the per-split report.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("correlation needs at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("prediction and ground-truth lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("zero variance in {0}; correlation undefined")]
    ZeroVariance(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

fn check(pred: &[f64], gt: &[f64]) -> Result<(), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.len() < 3 {
        return Err(MetricError::TooFewSamples(pred.len()));
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite("predictions"));
    }
    if gt.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite("ground truth"));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their average rank.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64], xname: &'static str, yname: &'static str) -> Result<f64, MetricError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricError::ZeroVariance(xname));
    }
    if syy == 0.0 {
        return Err(MetricError::ZeroVariance(yname));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson linear correlation coefficient.
pub fn plcc(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    check(pred, gt)?;
    pearson(pred, gt, "predictions", "ground truth")
}

/// Spearman rank correlation: Pearson correlation of mid-ranks.
pub fn srcc(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    check(pred, gt)?;
    pearson(&mid_ranks(pred), &mid_ranks(gt), "prediction ranks", "ground-truth ranks")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub srcc: f64,
    pub plcc: f64,
    pub count: usize,
}

impl SplitMetrics {
    pub fn compute(pred: &[f64], gt: &[f64]) -> Result<Self, MetricError> {
        Ok(Self {
            srcc: srcc(pred, gt)?,
            plcc: plcc(pred, gt)?,
            count: pred.len(),
        })
    }
}

/// Metrics over one or more evaluation splits. `std` is the population
/// standard deviation across splits (0 for a single split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub srcc: f64,
    pub plcc: f64,
    pub srcc_std: f64,
    pub plcc_std: f64,
    pub repeats: usize,
    pub splits: Vec<SplitMetrics>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl MetricsReport {
    pub fn from_splits(splits: Vec<SplitMetrics>) -> Self {
        assert!(!splits.is_empty(), "report needs at least one split");
        let (srcc, srcc_std) = mean_std(&splits.iter().map(|s| s.srcc).collect::<Vec<_>>());
        let (plcc, plcc_std) = mean_std(&splits.iter().map(|s| s.plcc).collect::<Vec<_>>());
        Self {
            srcc,
            plcc,
            srcc_std,
            plcc_std,
            repeats: splits.len(),
            splits,
        }
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "SRCC {:.4} ± {:.4}  PLCC {:.4} ± {:.4}  ({} split{}, {} samples)",
            self.srcc,
            self.srcc_std,
            self.plcc,
            self.plcc_std,
            self.repeats,
            if self.repeats == 1 { "" } else { "s" },
            self.splits.iter().map(|s| s.count).sum::<usize>()
        )
    }
}
