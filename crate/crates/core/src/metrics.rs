//! Segmentation utility (Dice) and subgroup fairness metrics.
//!
//! For subgroup utilities `I^k`:
//!
//! * `Δ   = max_k I^k − min_k I^k`
//! * `SER = max_k (1 − I^k) / min_k (1 − I^k)`
//! * `STD = sqrt(Σ_k (I^k − Ī)² / (K − 1))` (or `/ K` with [`Ddof::Population`])

use serde::{Deserialize, Serialize};

use crate::error::{FairsegError, Result};

/// Floor for the SER denominator.
pub const SER_EPSILON: f64 = 1e-8;

/// Binary Dice of two masks (non-zero = foreground). Two empty masks score 1.
pub fn dice(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(FairsegError::Shape(format!(
            "dice: prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a != 0, b != 0);
        inter += usize::from(a && b);
        p += usize::from(a);
        g += usize::from(b);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Mean Dice over foreground classes `1..num_classes`; equals [`dice`] for
/// binary masks.
pub fn foreground_dice(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<f64> {
    if num_classes <= 2 {
        return dice(pred, gt);
    }
    let mut total = 0.0;
    for c in 1..num_classes as u8 {
        let p: Vec<u8> = pred.iter().map(|&v| u8::from(v == c)).collect();
        let g: Vec<u8> = gt.iter().map(|&v| u8::from(v == c)).collect();
        total += dice(&p, &g)?;
    }
    Ok(total / (num_classes - 1) as f64)
}

/// Per-subgroup mean utility. Empty subgroups hold `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityVector {
    pub values: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl UtilityVector {
    /// Fully populated vector (counts unknown, recorded as 1).
    pub fn from_values(values: &[f64]) -> Self {
        Self {
            values: values.iter().map(|&v| Some(v)).collect(),
            counts: vec![1; values.len()],
        }
    }

    pub fn populated(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

/// `I^k` = mean score of subgroup `k`.
pub fn subgroup_utilities(scores: &[(f64, usize)], k: usize) -> Result<UtilityVector> {
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for &(score, a) in scores {
        if a >= k {
            return Err(FairsegError::Metric(format!("attribute {a} >= K={k}")));
        }
        sums[a] += score;
        counts[a] += 1;
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(FairsegError::Metric("every subgroup is empty".into()));
    }
    let values = sums
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(i, (&s, &c))| {
            if c == 0 {
                log::warn!("subgroup {i} has no samples; excluded from fairness metrics");
                None
            } else {
                Some(s / c as f64)
            }
        })
        .collect();
    Ok(UtilityVector { values, counts })
}

/// Divisor convention for STD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Ddof {
    /// Divide by `K − 1`.
    #[default]
    Sample,
    /// Divide by `K`.
    Population,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub delta: f64,
    pub ser: f64,
    /// Set when the smallest subgroup error fell below [`SER_EPSILON`].
    pub ser_infinite: bool,
    pub std: f64,
    pub ddof: Ddof,
    /// Macro mean `Ī` of the populated subgroups.
    pub mean_utility: f64,
}

/// Δ, SER and STD over the populated subgroups of `u`.
pub fn fairness(u: &UtilityVector, ddof: Ddof) -> Result<FairnessReport> {
    let vals = u.populated();
    if vals.len() < 2 {
        log::warn!("fairness metrics need >= 2 populated subgroups, have {}", vals.len());
        return Err(FairsegError::Metric(format!(
            "fairness metrics need at least 2 populated subgroups, got {}",
            vals.len()
        )));
    }
    if let Some(bad) = vals.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(FairsegError::Metric(format!("utility {bad} outside [0, 1]")));
    }
    let k = vals.len() as f64;
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let (max_err, min_err) = (1.0 - min, 1.0 - max);
    let (ser, ser_infinite) = if max_err < SER_EPSILON {
        // every subgroup perfect
        (1.0, false)
    } else if min_err < SER_EPSILON {
        (max_err / SER_EPSILON, true)
    } else {
        (max_err / min_err, false)
    };
    let mean = vals.iter().sum::<f64>() / k;
    let ss: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum();
    let divisor = match ddof {
        Ddof::Sample => k - 1.0,
        Ddof::Population => k,
    };
    Ok(FairnessReport {
        delta: max - min,
        ser,
        ser_infinite,
        std: (ss / divisor).sqrt(),
        ddof,
        mean_utility: mean,
    })
}

/// Mean and sample standard deviation across repeats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub delta: MeanStd,
    pub ser: MeanStd,
    /// Any run had a flagged-infinite SER.
    pub ser_infinite: bool,
    pub std: MeanStd,
    pub mean_utility: MeanStd,
}

/// Per-metric mean/std over repeated runs.
pub fn aggregate_runs(reports: &[FairnessReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(FairsegError::Metric("aggregate_runs needs at least one report".into()));
    }
    let col = |f: fn(&FairnessReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        runs: reports.len(),
        delta: col(|r| r.delta),
        ser: col(|r| r.ser),
        ser_infinite: reports.iter().any(|r| r.ser_infinite),
        std: col(|r| r.std),
        mean_utility: col(|r| r.mean_utility),
    })
}
