//! Integrated-gradients feature attribution.
//!
//! Baselines follow the audited convention: test-set column means for
//! everything except a binary sensitive attribute, whose one-hot pair is
//! flipped relative to the example. The path integral is a midpoint
//! Riemann sum over the pre-sigmoid score by default (the probability
//! target sits behind a flag), and every result carries its completeness
//! residual instead of hiding it.

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSchema, PartyDataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::MlpModel;
use crate::scalar::Scalar;

/// What the attribution explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionTarget {
    /// Pre-sigmoid score; the default, since sigmoid saturation flattens
    /// probability-space gradients.
    #[default]
    Logit,
    Probability,
}

/// Default number of quadrature steps.
pub const DEFAULT_IG_STEPS: usize = 64;

/// Per-feature baseline rule plus the statistics it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSpec<S> {
    /// Per-column test-set means.
    pub column_means: Vec<S>,
    pub sensitive_columns: Vec<usize>,
    /// Binary sensitive attribute: flip its one-hot pair instead of using
    /// means.
    pub flip_sensitive: bool,
}

/// Computes baseline statistics from a party's test features.
pub fn build_baseline<S: Scalar>(
    schema: &FeatureSchema,
    test_x: &Matrix<S>,
) -> Result<BaselineSpec<S>> {
    if test_x.rows() == 0 {
        return Err(Error::invalid("baseline statistics need a nonempty test set"));
    }
    if test_x.cols() != schema.encoded_width() {
        return Err(Error::invalid("test set width does not match schema"));
    }
    let n = S::from_f64_lossy(test_x.rows() as f64);
    let mut column_means = vec![S::zero(); test_x.cols()];
    for row in test_x.iter_rows() {
        for (m, v) in column_means.iter_mut().zip(row) {
            *m = *m + *v;
        }
    }
    for m in column_means.iter_mut() {
        *m = *m / n;
    }
    Ok(BaselineSpec {
        column_means,
        sensitive_columns: schema.sensitive_columns.clone(),
        flip_sensitive: schema.sensitive_is_binary,
    })
}

impl<S: Scalar> BaselineSpec<S> {
    /// Baseline input for one example: column means everywhere, except
    /// that a binary sensitive one-hot pair is flipped relative to `x`.
    pub fn baseline_for(&self, x: &[S]) -> Result<Vec<S>> {
        if x.len() != self.column_means.len() {
            return Err(Error::invalid("example width does not match baseline"));
        }
        let mut baseline = self.column_means.clone();
        if self.flip_sensitive {
            let pair = &self.sensitive_columns;
            let hot: Vec<usize> = pair.iter().copied().filter(|&c| x[c] == S::one()).collect();
            if hot.len() != 1 || pair.len() != 2 {
                return Err(Error::invalid(
                    "example's sensitive one-hot pair is not a valid group encoding",
                ));
            }
            for &c in pair {
                baseline[c] = if x[c] == S::one() { S::zero() } else { S::one() };
            }
        }
        Ok(baseline)
    }
}

fn target_gradient<S: Scalar>(
    model: &MlpModel<S>,
    point: &[S],
    target: AttributionTarget,
) -> Result<Vec<S>> {
    let mut grad = model.input_gradient(point)?;
    if target == AttributionTarget::Probability {
        let p = model.forward(point)?;
        let scale = p * (S::one() - p);
        for g in grad.iter_mut() {
            *g = *g * scale;
        }
    }
    Ok(grad)
}

fn target_value<S: Scalar>(
    model: &MlpModel<S>,
    point: &[S],
    target: AttributionTarget,
) -> Result<S> {
    match target {
        AttributionTarget::Logit => model.score(point),
        AttributionTarget::Probability => model.forward(point),
    }
}

/// Midpoint-rule integrated gradients:
/// `a_i = (x_i - x'_i) * mean_s grad_i(x' + (s - 0.5)/m * (x - x'))`.
pub fn integrated_gradients<S: Scalar>(
    model: &MlpModel<S>,
    x: &[S],
    baseline: &[S],
    steps: usize,
    target: AttributionTarget,
) -> Result<Vec<S>> {
    if steps == 0 {
        return Err(Error::invalid("integrated gradients needs steps >= 1"));
    }
    if x.len() != baseline.len() || x.len() != model.input_dim() {
        return Err(Error::invalid("attribution shape mismatch"));
    }
    let m = S::from_f64_lossy(steps as f64);
    let mut accum = vec![S::zero(); x.len()];
    let mut point = vec![S::zero(); x.len()];
    for s in 0..steps {
        let alpha = S::from_f64_lossy((s as f64 + 0.5) / steps as f64);
        for ((p, &xv), &bv) in point.iter_mut().zip(x).zip(baseline) {
            *p = bv + alpha * (xv - bv);
        }
        let grad = target_gradient(model, &point, target)?;
        for (a, g) in accum.iter_mut().zip(&grad) {
            *a = *a + *g;
        }
    }
    Ok(accum
        .iter()
        .zip(x)
        .zip(baseline)
        .map(|((&a, &xv), &bv)| (xv - bv) * (a / m))
        .collect())
}

/// Completeness check: attributions should sum to `f(x) - f(x')`.
pub fn completeness_residual<S: Scalar>(
    model: &MlpModel<S>,
    x: &[S],
    baseline: &[S],
    attributions: &[S],
    target: AttributionTarget,
) -> Result<f64> {
    let total: S = attributions.iter().copied().fold(S::zero(), |acc, a| acc + a);
    let fx = target_value(model, x, target)?;
    let fb = target_value(model, baseline, target)?;
    Ok((total - (fx - fb)).as_f64())
}

/// Histogram layout for attribution values: 40 uniform bins over [-1, 1)
/// plus an underflow and an overflow bin.
pub const HISTOGRAM_INNER_BINS: usize = 40;

fn histogram_bin(value: f64) -> usize {
    if value < -1.0 {
        0
    } else if value >= 1.0 {
        HISTOGRAM_INNER_BINS + 1
    } else {
        1 + (((value + 1.0) / 2.0 * HISTOGRAM_INNER_BINS as f64) as usize)
            .min(HISTOGRAM_INNER_BINS - 1)
    }
}

/// Per-group aggregates of the sensitive-attribute attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAttributionRow {
    pub group: u32,
    pub count: usize,
    /// Mean over the group of the summed sensitive-column attributions.
    pub mean_sensitive_attribution: f64,
    pub mean_abs_sensitive_attribution: f64,
    /// Mean attribution per encoded feature.
    pub per_feature_mean: Vec<f64>,
    /// Sensitive-attribution histogram (underflow, 40 bins over [-1, 1),
    /// overflow).
    pub histogram: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAttributionSummary {
    pub target: AttributionTarget,
    pub steps: usize,
    pub feature_names: Vec<String>,
    pub groups: Vec<GroupAttributionRow>,
    pub overall_mean_abs_sensitive: f64,
    pub completeness_mean_abs_residual: f64,
    pub completeness_max_abs_residual: f64,
    /// Schema-declared groups with no test rows, left out of `groups`.
    pub omitted_groups: Vec<u32>,
}

/// Attribution of every test example against its own flipped baseline,
/// aggregated by sensitive group.
pub fn group_attribution_summary<S: Scalar>(
    model: &MlpModel<S>,
    party: &PartyDataset<S>,
    steps: usize,
    target: AttributionTarget,
) -> Result<GroupAttributionSummary> {
    let schema = &party.schema;
    let test = &party.test;
    if test.is_empty() {
        return Err(Error::invalid("attribution needs a nonempty test set"));
    }
    let spec = build_baseline(schema, &test.x)?;
    let width = schema.encoded_width();
    let declared_groups = schema
        .categorical_levels
        .get(&schema.sensitive_name)
        .map_or(0, Vec::len) as u32;

    struct Agg {
        count: usize,
        sum_sensitive: f64,
        sum_abs_sensitive: f64,
        per_feature: Vec<f64>,
        histogram: Vec<u64>,
    }
    let mut aggs: std::collections::BTreeMap<u32, Agg> = std::collections::BTreeMap::new();
    let mut sum_abs_sensitive = 0.0;
    let mut residual_sum = 0.0;
    let mut residual_max = 0.0f64;

    for i in 0..test.len() {
        let x = test.x.row(i);
        let baseline = spec.baseline_for(x)?;
        let attr = integrated_gradients(model, x, &baseline, steps, target)?;
        let residual = completeness_residual(model, x, &baseline, &attr, target)?.abs();
        residual_sum += residual;
        residual_max = residual_max.max(residual);

        let sensitive: f64 = schema
            .sensitive_columns
            .iter()
            .map(|&c| attr[c].as_f64())
            .sum();
        sum_abs_sensitive += sensitive.abs();

        let agg = aggs.entry(test.a[i]).or_insert_with(|| Agg {
            count: 0,
            sum_sensitive: 0.0,
            sum_abs_sensitive: 0.0,
            per_feature: vec![0.0; width],
            histogram: vec![0; HISTOGRAM_INNER_BINS + 2],
        });
        agg.count += 1;
        agg.sum_sensitive += sensitive;
        agg.sum_abs_sensitive += sensitive.abs();
        for (acc, a) in agg.per_feature.iter_mut().zip(&attr) {
            *acc += a.as_f64();
        }
        agg.histogram[histogram_bin(sensitive)] += 1;
    }

    let omitted_groups: Vec<u32> = (0..declared_groups)
        .filter(|g| !aggs.contains_key(g))
        .collect();
    let groups = aggs
        .into_iter()
        .map(|(group, agg)| {
            let n = agg.count as f64;
            GroupAttributionRow {
                group,
                count: agg.count,
                mean_sensitive_attribution: agg.sum_sensitive / n,
                mean_abs_sensitive_attribution: agg.sum_abs_sensitive / n,
                per_feature_mean: agg.per_feature.iter().map(|v| v / n).collect(),
                histogram: agg.histogram,
            }
        })
        .collect();

    Ok(GroupAttributionSummary {
        target,
        steps,
        feature_names: schema.feature_names.clone(),
        groups,
        overall_mean_abs_sensitive: sum_abs_sensitive / test.len() as f64,
        completeness_mean_abs_residual: residual_sum / test.len() as f64,
        completeness_max_abs_residual: residual_max,
        omitted_groups,
    })
}
