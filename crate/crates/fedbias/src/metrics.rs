//! Group-fairness and accuracy metrics over hard predictions.
//!
//! Gaps follow the max-over-group-pairs form: demographic parity compares
//! positive-prediction rates per group, equalized odds compares them
//! conditioned on the true label, and the accuracy gap compares per-group
//! accuracy. Cells or groups with too little support are skipped and
//! reported, and a gap that cannot be formed is `None` — never a silent
//! zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::DataSplit;
use crate::error::{Error, Result};
use crate::nn::MlpModel;
use crate::scalar::Scalar;

/// Which fairness gap an audit reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessMetric {
    Dp,
    Eo,
    AccGap,
}

impl FairnessMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            FairnessMetric::Dp => "dp",
            FairnessMetric::Eo => "eo",
            FairnessMetric::AccGap => "acc_gap",
        }
    }
}

impl std::str::FromStr for FairnessMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dp" => Ok(FairnessMetric::Dp),
            "eo" => Ok(FairnessMetric::Eo),
            "acc_gap" => Ok(FairnessMetric::AccGap),
            other => Err(Error::invalid(format!(
                "unknown metric `{other}` (expected dp, eo, or acc_gap)"
            ))),
        }
    }
}

/// Counts for one (group, label) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellStats {
    pub group: u32,
    pub label: u8,
    pub count: usize,
    /// Positive predictions in the cell.
    pub positive: usize,
    /// Correct predictions in the cell.
    pub correct: usize,
}

/// Per-(group, label) prediction counts; sums to the dataset size.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub cells: Vec<CellStats>,
}

impl GroupStats {
    fn group_totals(&self) -> BTreeMap<u32, (usize, usize, usize)> {
        let mut totals: BTreeMap<u32, (usize, usize, usize)> = BTreeMap::new();
        for cell in &self.cells {
            let t = totals.entry(cell.group).or_default();
            t.0 += cell.count;
            t.1 += cell.positive;
            t.2 += cell.correct;
        }
        totals
    }

    pub fn total(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }
}

/// Support threshold and prediction cutoff.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Minimum rows a (group, label) cell — and a group — needs to enter
    /// a gap.
    pub min_cell: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { min_cell: 5 }
    }
}

/// Accuracy plus the three gaps; undefined gaps are `None` and serialize
/// as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub accuracy: f64,
    pub dp_gap: Option<f64>,
    pub eo_gap: Option<f64>,
    pub acc_gap: Option<f64>,
    pub group_stats: GroupStats,
    /// Groups left out of every gap for insufficient support.
    pub skipped_groups: Vec<u32>,
}

impl FairnessReport {
    pub fn gap(&self, metric: FairnessMetric) -> Option<f64> {
        match metric {
            FairnessMetric::Dp => self.dp_gap,
            FairnessMetric::Eo => self.eo_gap,
            FairnessMetric::AccGap => self.acc_gap,
        }
    }
}

/// Evaluates hard predictions against labels and group ids.
pub fn evaluate_predictions(
    preds: &[bool],
    labels: &[u8],
    groups: &[u32],
    opts: EvalOptions,
) -> Result<FairnessReport> {
    if preds.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if preds.len() != labels.len() || preds.len() != groups.len() {
        return Err(Error::invalid("predictions, labels, groups length mismatch"));
    }

    let mut cells: BTreeMap<(u32, u8), CellStats> = BTreeMap::new();
    let mut correct_total = 0usize;
    for ((&p, &y), &a) in preds.iter().zip(labels).zip(groups) {
        let y = u8::from(y > 0);
        let cell = cells.entry((a, y)).or_insert(CellStats {
            group: a,
            label: y,
            ..CellStats::default()
        });
        cell.count += 1;
        if p {
            cell.positive += 1;
        }
        let correct = p == (y > 0);
        if correct {
            cell.correct += 1;
            correct_total += 1;
        }
    }
    let group_stats = GroupStats {
        cells: cells.into_values().collect(),
    };

    let totals = group_stats.group_totals();
    let retained: Vec<u32> = totals
        .iter()
        .filter(|(_, t)| t.0 >= opts.min_cell)
        .map(|(&g, _)| g)
        .collect();
    let skipped_groups: Vec<u32> = totals
        .keys()
        .copied()
        .filter(|g| !retained.contains(g))
        .collect();

    let dp_gap = max_pairwise(&retained, |g| {
        let t = totals[&g];
        Some(t.1 as f64 / t.0 as f64)
    });
    let acc_gap = max_pairwise(&retained, |g| {
        let t = totals[&g];
        Some(t.2 as f64 / t.0 as f64)
    });

    // Equalized odds: positive-rate differences conditioned on the label,
    // skipping cells under the support threshold.
    let mut eo_gap: Option<f64> = None;
    for label in [0u8, 1u8] {
        let rate = |g: u32| -> Option<f64> {
            group_stats
                .cells
                .iter()
                .find(|c| c.group == g && c.label == label)
                .filter(|c| c.count >= opts.min_cell)
                .map(|c| c.positive as f64 / c.count as f64)
        };
        if let Some(gap) = max_pairwise(&retained, rate) {
            eo_gap = Some(eo_gap.map_or(gap, |g| g.max(gap)));
        }
    }

    Ok(FairnessReport {
        accuracy: correct_total as f64 / preds.len() as f64,
        dp_gap,
        eo_gap,
        acc_gap,
        group_stats,
        skipped_groups,
    })
}

/// Max |v(a) - v(a')| over group pairs where both values exist; `None`
/// when fewer than two groups have one.
fn max_pairwise<F: Fn(u32) -> Option<f64>>(groups: &[u32], value: F) -> Option<f64> {
    let values: Vec<f64> = groups.iter().filter_map(|&g| value(g)).collect();
    if values.len() < 2 {
        return None;
    }
    let mut max_gap = 0.0f64;
    for (i, a) in values.iter().enumerate() {
        for b in &values[i + 1..] {
            max_gap = max_gap.max((a - b).abs());
        }
    }
    Some(max_gap)
}

/// Evaluates a model on a split; predictions are positive iff the output
/// probability is at least 0.5.
pub fn evaluate<S: Scalar>(
    model: &MlpModel<S>,
    split: &DataSplit<S>,
    opts: EvalOptions,
) -> Result<FairnessReport> {
    let half = S::from_f64_lossy(0.5);
    let preds: Vec<bool> = model
        .forward_batch(&split.x)?
        .into_iter()
        .map(|p| p >= half)
        .collect();
    evaluate_predictions(&preds, &split.y, &split.a, opts)
}

/// Standard Pearson correlation coefficient; `None` when either side has
/// zero variance or there are fewer than three points.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len(), "pearson needs equal-length series");
    let n = xs.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
