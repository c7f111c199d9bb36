//! Parameter-level bias probes and controls: the sensitive-parameter
//! norm, the first-layer scaling intervention (with a control on the
//! unrelated columns), and reweighing mitigation.
//!
//! "Parameters associated with the sensitive attribute" means the
//! first-layer weight columns that read the sensitive one-hot inputs,
//! biases excluded.

use serde::{Deserialize, Serialize};

use crate::audit::TraceSource;
use crate::data::{DataSplit, FeatureSchema, PartyDataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions};
use crate::nn::MlpModel;
use crate::scalar::Scalar;
use crate::training::{run_federated_weighted, RoundTrace, TrainingConfig};

/// Which first-layer columns a scaling intervention touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleTarget {
    SensitiveColumns,
    OtherColumns,
}

impl ScaleTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleTarget::SensitiveColumns => "sensitive",
            ScaleTarget::OtherColumns => "other",
        }
    }

    fn columns(self, schema: &FeatureSchema) -> Vec<usize> {
        match self {
            ScaleTarget::SensitiveColumns => schema.sensitive_columns.clone(),
            ScaleTarget::OtherColumns => (0..schema.encoded_width())
                .filter(|c| !schema.sensitive_columns.contains(c))
                .collect(),
        }
    }
}

fn check_schema<S: Scalar>(model: &MlpModel<S>, schema: &FeatureSchema) -> Result<()> {
    if model.input_dim() != schema.encoded_width() {
        return Err(Error::invalid(format!(
            "model input dim {} does not match schema width {}",
            model.input_dim(),
            schema.encoded_width()
        )));
    }
    if schema
        .sensitive_columns
        .iter()
        .any(|&c| c >= schema.encoded_width())
    {
        return Err(Error::invalid("sensitive column out of schema range"));
    }
    Ok(())
}

/// L2 norms of (sensitive first-layer columns, whole first layer),
/// weights only.
pub fn sensitive_norm_components<S: Scalar>(
    model: &MlpModel<S>,
    schema: &FeatureSchema,
) -> Result<(f64, f64)> {
    check_schema(model, schema)?;
    let w0 = model.layer_weights(0);
    let in_dim = model.input_dim();
    let hidden = model.layer_dims()[1];
    let mut sens = 0.0;
    let mut all = 0.0;
    for r in 0..hidden {
        for c in 0..in_dim {
            let v = w0[r * in_dim + c].as_f64();
            all += v * v;
            if schema.sensitive_columns.contains(&c) {
                sens += v * v;
            }
        }
    }
    Ok((sens.sqrt(), all.sqrt()))
}

/// Norm of the sensitive first-layer columns, normalized by the norm of
/// the whole first layer; in [0, 1].
pub fn sensitive_param_norm<S: Scalar>(
    model: &MlpModel<S>,
    schema: &FeatureSchema,
) -> Result<f64> {
    let (sens, all) = sensitive_norm_components(model, schema)?;
    if all == 0.0 {
        return Ok(0.0);
    }
    Ok(sens / all)
}

/// Copy of the model with the targeted first-layer columns multiplied by
/// `factor`; biases and every other parameter untouched.
pub fn scale_params<S: Scalar>(
    model: &MlpModel<S>,
    schema: &FeatureSchema,
    factor: f64,
    target: ScaleTarget,
) -> Result<MlpModel<S>> {
    check_schema(model, schema)?;
    if !factor.is_finite() || factor < 0.0 {
        return Err(Error::invalid("scale factor must be finite and >= 0"));
    }
    let cols = target.columns(schema);
    if cols.is_empty() {
        return Err(Error::invalid("scale target selects no columns"));
    }
    let mut scaled = model.clone();
    let in_dim = scaled.input_dim();
    let hidden = scaled.layer_dims()[1];
    let f = S::from_f64_lossy(factor);
    let w0 = scaled.layer_weights_mut(0);
    for r in 0..hidden {
        for &c in &cols {
            w0[r * in_dim + c] = w0[r * in_dim + c] * f;
        }
    }
    Ok(scaled)
}

/// Metrics of one scaled model on one party's test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPartyMetrics {
    pub party: usize,
    pub accuracy: f64,
    pub dp_gap: f64,
    pub eo_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub factor: f64,
    pub mean_accuracy: f64,
    pub mean_dp_gap: f64,
    pub mean_eo_gap: f64,
    pub parties: Vec<SweepPartyMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSweep {
    pub target: ScaleTarget,
    pub rows: Vec<SweepRow>,
}

impl ScalingSweep {
    pub fn row(&self, factor: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.factor == factor)
    }
}

/// Evaluates the model under every scaling factor on every party's test
/// set. Factor 1.0 reproduces the unmodified model's metrics exactly.
pub fn scaling_sweep<S: Scalar>(
    model: &MlpModel<S>,
    parties: &[PartyDataset<S>],
    schema: &FeatureSchema,
    factors: &[f64],
    target: ScaleTarget,
    opts: EvalOptions,
) -> Result<ScalingSweep> {
    if factors.is_empty() {
        return Err(Error::invalid("no scaling factors"));
    }
    let mut rows = Vec::with_capacity(factors.len());
    for &factor in factors {
        let scaled = scale_params(model, schema, factor, target)?;
        let mut party_rows = Vec::with_capacity(parties.len());
        for party in parties {
            let report = evaluate(&scaled, &party.test, opts)?;
            let undefined = || {
                Error::numeric(format!(
                    "gap undefined for party {} at factor {factor}",
                    party.party_id
                ))
            };
            party_rows.push(SweepPartyMetrics {
                party: party.party_id,
                accuracy: report.accuracy,
                dp_gap: report.dp_gap.ok_or_else(undefined)?,
                eo_gap: report.eo_gap.ok_or_else(undefined)?,
            });
        }
        let n = party_rows.len() as f64;
        rows.push(SweepRow {
            factor,
            mean_accuracy: party_rows.iter().map(|r| r.accuracy).sum::<f64>() / n,
            mean_dp_gap: party_rows.iter().map(|r| r.dp_gap).sum::<f64>() / n,
            mean_eo_gap: party_rows.iter().map(|r| r.eo_gap).sum::<f64>() / n,
            parties: party_rows,
        });
    }
    Ok(ScalingSweep { target, rows })
}

/// Whose training counts feed the reweighing table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReweighScope {
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightCell {
    pub group: u32,
    pub label: u8,
    pub weight: f64,
}

/// Per-(group, label) sample weights making group and label independent
/// in the weighted training distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub cells: Vec<WeightCell>,
    /// One entry per (group, label) cell absent from the data, which
    /// defaults to weight 1.
    pub notices: Vec<String>,
}

impl WeightTable {
    /// All-ones table over the given groups; weighting with it is a
    /// no-op.
    pub fn unit(groups: &[u32]) -> Self {
        let mut cells = Vec::new();
        for &group in groups {
            for label in [0u8, 1u8] {
                cells.push(WeightCell {
                    group,
                    label,
                    weight: 1.0,
                });
            }
        }
        Self {
            cells,
            notices: Vec::new(),
        }
    }

    pub fn weight_for(&self, group: u32, label: u8) -> f64 {
        self.cells
            .iter()
            .find(|c| c.group == group && c.label == label)
            .map_or(1.0, |c| c.weight)
    }

    /// Per-example weights for a split, in row order.
    pub fn per_example<S: Scalar>(&self, split: &DataSplit<S>) -> Vec<S> {
        split
            .a
            .iter()
            .zip(&split.y)
            .map(|(&a, &y)| S::from_f64_lossy(self.weight_for(a, y)))
            .collect()
    }
}

/// Kamiran-Calders reweighing over observed counts:
/// `w(a, y) = P(A=a) * P(Y=y) / P(A=a, Y=y)`. Cells with no rows get
/// weight 1 and a notice.
pub fn reweigh_weights(
    counts: &std::collections::BTreeMap<(u32, u8), usize>,
) -> Result<WeightTable> {
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(Error::invalid("reweighing needs a nonempty dataset"));
    }
    let mut group_totals: std::collections::BTreeMap<u32, usize> = Default::default();
    let mut label_totals: std::collections::BTreeMap<u8, usize> = Default::default();
    for (&(a, y), &c) in counts {
        *group_totals.entry(a).or_insert(0) += c;
        *label_totals.entry(y).or_insert(0) += c;
    }
    let mut cells = Vec::new();
    let mut notices = Vec::new();
    for (&a, &na) in &group_totals {
        for (&y, &ny) in &label_totals {
            let nay = counts.get(&(a, y)).copied().unwrap_or(0);
            let weight = if nay == 0 {
                notices.push(format!(
                    "cell (group {a}, label {y}) has no rows; weight defaults to 1"
                ));
                1.0
            } else {
                (na as f64 * ny as f64) / (total as f64 * nay as f64)
            };
            cells.push(WeightCell {
                group: a,
                label: y,
                weight,
            });
        }
    }
    Ok(WeightTable { cells, notices })
}

/// One weight table per party: from its own training counts (`Local`) or
/// from the pooled counts (`Global`, same table for everyone).
pub fn reweigh_tables<S: Scalar>(
    parties: &[PartyDataset<S>],
    scope: ReweighScope,
) -> Result<Vec<WeightTable>> {
    if parties.is_empty() {
        return Err(Error::invalid("no parties"));
    }
    match scope {
        ReweighScope::Local => parties
            .iter()
            .map(|p| reweigh_weights(&p.train.cell_counts()))
            .collect(),
        ReweighScope::Global => {
            let mut pooled: std::collections::BTreeMap<(u32, u8), usize> = Default::default();
            for p in parties {
                for (cell, count) in p.train.cell_counts() {
                    *pooled.entry(cell).or_insert(0) += count;
                }
            }
            let table = reweigh_weights(&pooled)?;
            Ok(vec![table; parties.len()])
        }
    }
}

/// Federated run where every party minimizes its weighted loss under the
/// given tables.
pub fn run_federated_with_tables<S: Scalar>(
    parties: &[PartyDataset<S>],
    cfg: &TrainingConfig,
    tables: &[WeightTable],
) -> Result<(MlpModel<S>, Vec<RoundTrace<S>>)> {
    if tables.len() != parties.len() {
        return Err(Error::invalid("one weight table per party required"));
    }
    let weights: Vec<Vec<S>> = parties
        .iter()
        .zip(tables)
        .map(|(p, t)| t.per_example(&p.train))
        .collect();
    run_federated_weighted(parties, cfg, Some(&weights))
}

/// Reweighed federated training; identical to the plain run except that
/// local updates minimize the weighted loss.
pub fn run_federated_reweighed<S: Scalar>(
    parties: &[PartyDataset<S>],
    cfg: &TrainingConfig,
    scope: ReweighScope,
) -> Result<(MlpModel<S>, Vec<RoundTrace<S>>)> {
    let tables = reweigh_tables(parties, scope)?;
    run_federated_with_tables(parties, cfg, &tables)
}

/// One row of the norms series: the normalized sensitive-parameter norm
/// of the aggregated or a locally updated model at a sampled round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub round: usize,
    /// "global" or "party_<k>".
    pub who: String,
    pub value: f64,
}

/// Sensitive-parameter norms across a run's traces.
pub fn norm_series<S: Scalar>(
    source: &TraceSource<'_, S>,
    schema: &FeatureSchema,
    stride: usize,
) -> Result<Vec<NormRow>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let mut rows = Vec::new();
    for t in source.rounds()?.into_iter().step_by(stride) {
        let trace = source.trace(t)?;
        rows.push(NormRow {
            round: t,
            who: "global".to_string(),
            value: sensitive_param_norm(&trace.global_after, schema)?,
        });
        for (k, local) in trace.locals.iter().enumerate() {
            rows.push(NormRow {
                round: t,
                who: format!("party_{k}"),
                value: sensitive_param_norm(local, schema)?,
            });
        }
    }
    Ok(rows)
}
