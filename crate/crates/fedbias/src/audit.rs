//! Audit analyses over a finished run: collaboration benefits, per-round
//! fairness dynamics, and the leave-one-out influence of each party on
//! every other party's fairness.
//!
//! Influence of party `i` on party `j` accumulates, round by round, the
//! change in `j`'s fairness gap when `i`'s local update is dropped from
//! the aggregation: positive influence means removing `i` made things
//! worse, i.e. `i` was helping.

use serde::{Deserialize, Serialize};

use crate::data::PartyDataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions, FairnessMetric, FairnessReport};
use crate::nn::MlpModel;
use crate::scalar::Scalar;
use crate::training::{aggregate_refs, RoundTrace, RunDir};

/// Weighted mean over all locals except `excluded`, with weights
/// renormalized to `n_k / (N - n_excluded)`.
pub fn leave_one_out_aggregate<S: Scalar>(
    locals: &[MlpModel<S>],
    sizes: &[usize],
    excluded: usize,
) -> Result<MlpModel<S>> {
    if locals.len() < 2 {
        return Err(Error::invalid(
            "leave-one-out needs at least two local models",
        ));
    }
    if excluded >= locals.len() {
        return Err(Error::invalid(format!(
            "excluded party {excluded} out of range for {} locals",
            locals.len()
        )));
    }
    if locals.len() != sizes.len() {
        return Err(Error::invalid("locals and sizes disagree"));
    }
    let kept: Vec<&MlpModel<S>> = locals
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != excluded)
        .map(|(_, m)| m)
        .collect();
    let kept_sizes: Vec<usize> = sizes
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != excluded)
        .map(|(_, &n)| n)
        .collect();
    aggregate_refs(&kept, &kept_sizes)
}

/// Traces either in memory or on disk; the audit walks them uniformly.
pub enum TraceSource<'a, S> {
    Memory(&'a [RoundTrace<S>]),
    Disk(&'a RunDir),
}

impl<'a, S: Scalar> TraceSource<'a, S> {
    pub fn rounds(&self) -> Result<Vec<usize>> {
        match self {
            TraceSource::Memory(traces) => Ok(traces.iter().map(|t| t.round).collect()),
            TraceSource::Disk(run) => run.rounds(),
        }
    }

    pub fn trace(&self, round: usize) -> Result<std::borrow::Cow<'a, RoundTrace<S>>>
    where
        RoundTrace<S>: Clone,
    {
        match self {
            TraceSource::Memory(traces) => traces
                .iter()
                .find(|t| t.round == round)
                .map(std::borrow::Cow::Borrowed)
                .ok_or_else(|| Error::not_found(format!("round {round} trace"))),
            TraceSource::Disk(run) => run.load_trace(round).map(std::borrow::Cow::Owned),
        }
    }
}

/// Influence addends for one sampled round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundInfluence {
    pub round: usize,
    /// `addends[i][j]` = gap increase for party j when party i is removed
    /// at this round.
    pub addends: Vec<Vec<f64>>,
}

/// Accumulated K x K leave-one-out influence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceMatrix {
    pub metric: FairnessMetric,
    pub num_parties: usize,
    /// Rounds that entered the sums (every `stride`-th persisted round).
    pub rounds: Vec<usize>,
    pub stride: usize,
    /// `values[i][j]` = sum of the per-round addends.
    pub values: Vec<Vec<f64>>,
    pub per_round: Vec<RoundInfluence>,
    /// Mean influence of party i over all parties j.
    pub mean_influence: Vec<f64>,
    /// `cumulative[i][s]` = influence of i on everyone, summed through the
    /// s-th sampled round.
    pub cumulative: Vec<Vec<f64>>,
    /// The cumulative series divided by the party count.
    pub cumulative_mean: Vec<Vec<f64>>,
}

impl InfluenceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }
}

fn gap_or_err(report: &FairnessReport, metric: FairnessMetric, what: &str) -> Result<f64> {
    report.gap(metric).ok_or_else(|| {
        Error::numeric(format!(
            "{} gap undefined for {what} (fewer than two retained groups)",
            metric.as_str()
        ))
    })
}

/// Computes the influence matrix from a run's traces, sampling every
/// `stride`-th round.
pub fn compute_influence<S: Scalar>(
    source: &TraceSource<'_, S>,
    parties: &[PartyDataset<S>],
    metric: FairnessMetric,
    stride: usize,
    opts: EvalOptions,
) -> Result<InfluenceMatrix> {
    if parties.len() < 2 {
        return Err(Error::invalid("influence needs at least two parties"));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let k = parties.len();
    let sizes: Vec<usize> = parties.iter().map(PartyDataset::n_k).collect();
    let sampled: Vec<usize> = source
        .rounds()?
        .into_iter()
        .step_by(stride)
        .collect();
    if sampled.is_empty() {
        return Err(Error::not_found("no persisted rounds to audit"));
    }

    let mut values = vec![vec![0.0; k]; k];
    let mut per_round = Vec::with_capacity(sampled.len());
    for &t in &sampled {
        let trace = source.trace(t)?;
        if trace.locals.len() != k {
            return Err(Error::invalid(format!(
                "round {t} has {} locals for {k} parties",
                trace.locals.len()
            )));
        }
        let mut base = Vec::with_capacity(k);
        for party in parties {
            let report = evaluate(&trace.global_after, &party.test, opts)?;
            base.push(gap_or_err(
                &report,
                metric,
                &format!("party {} at round {t}", party.party_id),
            )?);
        }
        let mut addends = vec![vec![0.0; k]; k];
        for i in 0..k {
            let reduced = leave_one_out_aggregate(&trace.locals, &sizes, i)?;
            for (j, party) in parties.iter().enumerate() {
                let report = evaluate(&reduced, &party.test, opts)?;
                let gap = gap_or_err(
                    &report,
                    metric,
                    &format!("party {} at round {t} (without {i})", party.party_id),
                )?;
                addends[i][j] = gap - base[j];
                values[i][j] += addends[i][j];
            }
        }
        per_round.push(RoundInfluence { round: t, addends });
    }

    let mean_influence: Vec<f64> = values
        .iter()
        .map(|row| row.iter().sum::<f64>() / k as f64)
        .collect();
    let mut cumulative = vec![Vec::with_capacity(sampled.len()); k];
    let mut running = vec![0.0; k];
    for ri in &per_round {
        for i in 0..k {
            running[i] += ri.addends[i].iter().sum::<f64>();
            cumulative[i].push(running[i]);
        }
    }
    let cumulative_mean = cumulative
        .iter()
        .map(|series| series.iter().map(|v| v / k as f64).collect())
        .collect();

    Ok(InfluenceMatrix {
        metric,
        num_parties: k,
        rounds: sampled,
        stride,
        values,
        per_round,
        mean_influence,
        cumulative,
        cumulative_mean,
    })
}

/// One directed edge of the influence graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluencePair {
    pub from: usize,
    pub to: usize,
    pub influence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopPairs {
    pub positive: Vec<InfluencePair>,
    pub negative: Vec<InfluencePair>,
}

/// The strongest off-diagonal influence edges: `n_pos` most positive and
/// `n_neg` most negative, ties broken by (from, to). Truncates when fewer
/// pairs exist.
pub fn influence_top_pairs(matrix: &InfluenceMatrix, n_pos: usize, n_neg: usize) -> TopPairs {
    let mut pairs: Vec<InfluencePair> = Vec::new();
    for i in 0..matrix.num_parties {
        for j in 0..matrix.num_parties {
            if i != j {
                pairs.push(InfluencePair {
                    from: i,
                    to: j,
                    influence: matrix.values[i][j],
                });
            }
        }
    }
    let mut descending = pairs.clone();
    descending.sort_by(|a, b| {
        b.influence
            .partial_cmp(&a.influence)
            .unwrap()
            .then_with(|| (a.from, a.to).cmp(&(b.from, b.to)))
    });
    let mut ascending = pairs;
    ascending.sort_by(|a, b| {
        a.influence
            .partial_cmp(&b.influence)
            .unwrap()
            .then_with(|| (a.from, a.to).cmp(&(b.from, b.to)))
    });
    TopPairs {
        positive: descending.into_iter().take(n_pos).collect(),
        negative: ascending.into_iter().take(n_neg).collect(),
    }
}

/// Per-party comparison of the three regimes on the party's own test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyBenefit {
    pub party: usize,
    pub standalone_gap: f64,
    pub federated_gap: f64,
    pub centralized_gap: f64,
    pub standalone_accuracy: f64,
    pub federated_accuracy: f64,
    pub centralized_accuracy: f64,
    /// standalone_gap - federated_gap; positive means federation helped.
    pub fl_fairness_benefit: f64,
    pub fl_accuracy_benefit: f64,
    pub collab_fairness_benefit: f64,
    pub collab_accuracy_benefit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkBenefit {
    pub fl_fairness_benefit: f64,
    pub fl_accuracy_benefit: f64,
    pub collab_fairness_benefit: f64,
    pub collab_accuracy_benefit: f64,
    pub standalone_gap: f64,
    pub federated_gap: f64,
    pub centralized_gap: f64,
    pub standalone_accuracy: f64,
    pub federated_accuracy: f64,
    pub centralized_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenefitReport {
    pub metric: FairnessMetric,
    pub parties: Vec<PartyBenefit>,
    pub network: NetworkBenefit,
}

/// Evaluates every regime's model on every party's local test set and
/// derives the federation/collaboration benefits.
pub fn compute_benefits<S: Scalar>(
    standalone: &[MlpModel<S>],
    centralized: &MlpModel<S>,
    federated: &MlpModel<S>,
    parties: &[PartyDataset<S>],
    metric: FairnessMetric,
    opts: EvalOptions,
) -> Result<BenefitReport> {
    if standalone.len() != parties.len() {
        return Err(Error::invalid("one standalone model per party required"));
    }
    let mut rows = Vec::with_capacity(parties.len());
    for (k, party) in parties.iter().enumerate() {
        let what = format!("party {}", party.party_id);
        let own = evaluate(&standalone[k], &party.test, opts)?;
        let fed = evaluate(federated, &party.test, opts)?;
        let cen = evaluate(centralized, &party.test, opts)?;
        let standalone_gap = gap_or_err(&own, metric, &what)?;
        let federated_gap = gap_or_err(&fed, metric, &what)?;
        let centralized_gap = gap_or_err(&cen, metric, &what)?;
        rows.push(PartyBenefit {
            party: party.party_id,
            standalone_gap,
            federated_gap,
            centralized_gap,
            standalone_accuracy: own.accuracy,
            federated_accuracy: fed.accuracy,
            centralized_accuracy: cen.accuracy,
            fl_fairness_benefit: standalone_gap - federated_gap,
            fl_accuracy_benefit: fed.accuracy - own.accuracy,
            collab_fairness_benefit: standalone_gap - centralized_gap,
            collab_accuracy_benefit: cen.accuracy - own.accuracy,
        });
    }
    let k = rows.len() as f64;
    let mean = |f: fn(&PartyBenefit) -> f64| rows.iter().map(f).sum::<f64>() / k;
    let network = NetworkBenefit {
        fl_fairness_benefit: mean(|r| r.fl_fairness_benefit),
        fl_accuracy_benefit: mean(|r| r.fl_accuracy_benefit),
        collab_fairness_benefit: mean(|r| r.collab_fairness_benefit),
        collab_accuracy_benefit: mean(|r| r.collab_accuracy_benefit),
        standalone_gap: mean(|r| r.standalone_gap),
        federated_gap: mean(|r| r.federated_gap),
        centralized_gap: mean(|r| r.centralized_gap),
        standalone_accuracy: mean(|r| r.standalone_accuracy),
        federated_accuracy: mean(|r| r.federated_accuracy),
        centralized_accuracy: mean(|r| r.centralized_accuracy),
    };
    Ok(BenefitReport {
        metric,
        parties: rows,
        network,
    })
}

/// Per-round fairness gaps of the aggregated model and one party's
/// locally updated model, both on that party's test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSeries {
    pub party: usize,
    pub metric: FairnessMetric,
    pub rounds: Vec<usize>,
    pub global_gap: Vec<f64>,
    pub local_gap: Vec<f64>,
}

pub fn fairness_dynamics<S: Scalar>(
    source: &TraceSource<'_, S>,
    party: &PartyDataset<S>,
    party_index: usize,
    metric: FairnessMetric,
    stride: usize,
    opts: EvalOptions,
) -> Result<DynamicsSeries> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let sampled: Vec<usize> = source.rounds()?.into_iter().step_by(stride).collect();
    if sampled.is_empty() {
        return Err(Error::not_found("no persisted rounds to audit"));
    }
    let mut global_gap = Vec::with_capacity(sampled.len());
    let mut local_gap = Vec::with_capacity(sampled.len());
    for &t in &sampled {
        let trace = source.trace(t)?;
        let local = trace.locals.get(party_index).ok_or_else(|| {
            Error::not_found(format!("local model {party_index} at round {t}"))
        })?;
        let what = format!("party {} at round {t}", party.party_id);
        let g = evaluate(&trace.global_after, &party.test, opts)?;
        let l = evaluate(local, &party.test, opts)?;
        global_gap.push(gap_or_err(&g, metric, &what)?);
        local_gap.push(gap_or_err(&l, metric, &what)?);
    }
    Ok(DynamicsSeries {
        party: party.party_id,
        metric,
        rounds: sampled,
        global_gap,
        local_gap,
    })
}
