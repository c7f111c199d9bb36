//! The three training regimes: standalone, centralized, and federated
//! averaging with full participation (optionally with a proximal term),
//! plus per-round trace persistence.
//!
//! All regimes start from the same seeded initial model so they stay
//! comparable, and minibatch shuffles are seeded by (seed, party, round).
//! Removing a party therefore never perturbs another party's randomness,
//! which the leave-one-out audit depends on.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DataSplit, PartyDataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::MlpModel;
use crate::rng::{seeded_rng, CENTRAL_ID, STREAM_SHUFFLE};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Communication rounds for federated training; epochs for the
    /// standalone and centralized baselines.
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Baseline override; the centralized run falls back to `lr`.
    pub centralized_lr: Option<f64>,
    /// Proximal coefficient; 0 is plain federated averaging.
    pub fedprox_mu: f64,
    pub seed: u64,
    pub hidden_width: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            local_epochs: 1,
            batch_size: 32,
            lr: 0.1,
            centralized_lr: None,
            fedprox_mu: 0.0,
            seed: 0,
            hidden_width: 32,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be > 0"));
        }
        if let Some(clr) = self.centralized_lr {
            if !(clr > 0.0) {
                return Err(Error::invalid("centralized_lr must be > 0"));
            }
        }
        if self.fedprox_mu < 0.0 {
            return Err(Error::invalid("fedprox_mu must be >= 0"));
        }
        if self.hidden_width == 0 {
            return Err(Error::invalid("hidden_width must be >= 1"));
        }
        Ok(())
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        vec![input_dim, self.hidden_width, 1]
    }
}

/// One round's checkpoint set: the broadcast model, every locally updated
/// model, and the aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace<S> {
    pub round: usize,
    pub global_before: MlpModel<S>,
    pub locals: Vec<MlpModel<S>>,
    pub global_after: MlpModel<S>,
}

/// One epoch of minibatch SGD over `(x, y)` with optional per-example
/// weights and optional proximal pull toward `prox_ref`.
#[allow(clippy::too_many_arguments)]
fn sgd_epoch<S: Scalar>(
    mut model: MlpModel<S>,
    x: &Matrix<S>,
    y: &[u8],
    sample_weights: Option<&[S]>,
    batch_size: usize,
    lr: S,
    mu: f64,
    prox_ref: Option<&MlpModel<S>>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<MlpModel<S>> {
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.shuffle(rng);
    let mut batch_y: Vec<u8> = Vec::with_capacity(batch_size);
    let mut batch_w: Vec<S> = Vec::with_capacity(batch_size);
    for batch in order.chunks(batch_size) {
        let bx = x.select_rows(batch);
        batch_y.clear();
        batch_y.extend(batch.iter().map(|&i| y[i]));
        let bw = sample_weights.map(|w| {
            batch_w.clear();
            batch_w.extend(batch.iter().map(|&i| w[i]));
            &batch_w[..]
        });
        let (_, mut grads) = model.loss_and_gradients(&bx, &batch_y, bw)?;
        if mu > 0.0 {
            if let Some(reference) = prox_ref {
                grads.add_scaled_diff(&model, reference, S::from_f64_lossy(mu));
            }
        }
        model = model.sgd_step(&grads, lr)?;
    }
    Ok(model)
}

/// Trains the broadcast global model on one party's local data for
/// `local_epochs` epochs and returns the updated copy.
pub fn local_update<S: Scalar>(
    global: &MlpModel<S>,
    party: &PartyDataset<S>,
    cfg: &TrainingConfig,
    round: usize,
    sample_weights: Option<&[S]>,
) -> Result<MlpModel<S>> {
    if party.train.is_empty() {
        return Err(Error::invalid(format!(
            "party {} has an empty training set",
            party.party_id
        )));
    }
    let mut rng = seeded_rng(cfg.seed, STREAM_SHUFFLE, party.party_id as u64, round as u64);
    let mut model = global.clone();
    let lr = S::from_f64_lossy(cfg.lr);
    for _ in 0..cfg.local_epochs {
        model = sgd_epoch(
            model,
            &party.train.x,
            &party.train.y,
            sample_weights,
            cfg.batch_size,
            lr,
            cfg.fedprox_mu,
            Some(global),
            &mut rng,
        )?;
    }
    Ok(model)
}

/// Parameter-wise weighted mean with weights `n_k / sum(n)`, summed in
/// ascending party order. Identical inputs aggregate to themselves
/// exactly.
pub fn aggregate<S: Scalar>(locals: &[MlpModel<S>], sizes: &[usize]) -> Result<MlpModel<S>> {
    let refs: Vec<&MlpModel<S>> = locals.iter().collect();
    aggregate_refs(&refs, sizes)
}

/// [`aggregate`] over borrowed models; the leave-one-out audit calls this
/// to skip cloning.
pub fn aggregate_refs<S: Scalar>(locals: &[&MlpModel<S>], sizes: &[usize]) -> Result<MlpModel<S>> {
    if locals.is_empty() {
        return Err(Error::invalid("nothing to aggregate"));
    }
    if locals.len() != sizes.len() {
        return Err(Error::invalid("locals and sizes disagree"));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(Error::invalid("aggregation weights must be positive"));
    }
    let dims = locals[0].layer_dims();
    if locals.iter().any(|m| m.layer_dims() != dims) {
        return Err(Error::invalid("aggregation over mismatched shapes"));
    }
    if locals.iter().all(|m| *m == locals[0]) {
        return Ok(locals[0].clone());
    }

    let total: usize = sizes.iter().sum();
    let flats: Vec<Vec<S>> = locals.iter().map(|m| m.flatten()).collect();
    let mut acc = vec![S::zero(); flats[0].len()];
    for (flat, &n) in flats.iter().zip(sizes) {
        let w = S::from_f64_lossy(n as f64 / total as f64);
        for (a, p) in acc.iter_mut().zip(flat) {
            *a = *a + w * *p;
        }
    }
    MlpModel::unflatten(dims, &acc)
}

fn sizes_of<S: Scalar>(parties: &[PartyDataset<S>]) -> Vec<usize> {
    parties.iter().map(PartyDataset::n_k).collect()
}

/// Federated training with full participation; optionally with fixed
/// per-example weights per party (the reweighing hook). Returns the final
/// global model and every round's trace.
pub fn run_federated_weighted<S: Scalar>(
    parties: &[PartyDataset<S>],
    cfg: &TrainingConfig,
    per_party_weights: Option<&[Vec<S>]>,
) -> Result<(MlpModel<S>, Vec<RoundTrace<S>>)> {
    if parties.is_empty() {
        return Err(Error::invalid("no parties"));
    }
    if let Some(w) = per_party_weights {
        if w.len() != parties.len() {
            return Err(Error::invalid("per-party weights length mismatch"));
        }
    }
    let input_dim = parties[0].schema.encoded_width();
    let sizes = sizes_of(parties);
    let mut global = MlpModel::init(&cfg.layer_dims(input_dim), cfg.seed)?;
    let mut traces = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let global_before = global.clone();
        let mut locals = Vec::with_capacity(parties.len());
        for (k, party) in parties.iter().enumerate() {
            let weights = per_party_weights.map(|w| &w[k][..]);
            locals.push(local_update(&global, party, cfg, round, weights)?);
        }
        global = aggregate(&locals, &sizes)?;
        traces.push(RoundTrace {
            round,
            global_before,
            locals,
            global_after: global.clone(),
        });
    }
    Ok((global, traces))
}

pub fn run_federated<S: Scalar>(
    parties: &[PartyDataset<S>],
    cfg: &TrainingConfig,
) -> Result<(MlpModel<S>, Vec<RoundTrace<S>>)> {
    run_federated_weighted(parties, cfg, None)
}

/// `rounds` epochs of minibatch SGD on the party's own training set,
/// starting from the same seeded initial model as the federated run.
pub fn train_standalone<S: Scalar>(
    party: &PartyDataset<S>,
    cfg: &TrainingConfig,
) -> Result<MlpModel<S>> {
    train_standalone_weighted(party, cfg, None)
}

pub fn train_standalone_weighted<S: Scalar>(
    party: &PartyDataset<S>,
    cfg: &TrainingConfig,
    sample_weights: Option<&[S]>,
) -> Result<MlpModel<S>> {
    if party.train.is_empty() {
        return Err(Error::invalid(format!(
            "party {} has an empty training set",
            party.party_id
        )));
    }
    let input_dim = party.schema.encoded_width();
    let mut model = MlpModel::init(&cfg.layer_dims(input_dim), cfg.seed)?;
    let lr = S::from_f64_lossy(cfg.lr);
    for epoch in 0..cfg.rounds {
        let mut rng = seeded_rng(
            cfg.seed,
            STREAM_SHUFFLE,
            party.party_id as u64,
            epoch as u64,
        );
        model = sgd_epoch(
            model,
            &party.train.x,
            &party.train.y,
            sample_weights,
            cfg.batch_size,
            lr,
            0.0,
            None,
            &mut rng,
        )?;
    }
    Ok(model)
}

/// Pools every party's training rows (ascending party order) and trains
/// for `rounds` epochs.
pub fn train_centralized<S: Scalar>(
    parties: &[PartyDataset<S>],
    cfg: &TrainingConfig,
) -> Result<MlpModel<S>> {
    if parties.is_empty() || parties.iter().any(|p| p.train.is_empty()) {
        return Err(Error::invalid("centralized training needs nonempty data"));
    }
    let pooled = pooled_train(parties)?;
    let input_dim = parties[0].schema.encoded_width();
    let mut model = MlpModel::init(&cfg.layer_dims(input_dim), cfg.seed)?;
    let lr = S::from_f64_lossy(cfg.centralized_lr.unwrap_or(cfg.lr));
    for epoch in 0..cfg.rounds {
        let mut rng = seeded_rng(cfg.seed, STREAM_SHUFFLE, CENTRAL_ID, epoch as u64);
        model = sgd_epoch(
            model,
            &pooled.x,
            &pooled.y,
            None,
            cfg.batch_size,
            lr,
            0.0,
            None,
            &mut rng,
        )?;
    }
    Ok(model)
}

/// Pooled training split, as the centralized regime sees it.
pub fn pooled_train<S: Scalar>(parties: &[PartyDataset<S>]) -> Result<DataSplit<S>> {
    let xs: Vec<&Matrix<S>> = parties.iter().map(|p| &p.train.x).collect();
    DataSplit::new(
        Matrix::vstack(&xs)?,
        parties.iter().flat_map(|p| p.train.y.clone()).collect(),
        parties.iter().flat_map(|p| p.train.a.clone()).collect(),
    )
}

/// On-disk layout of one training run: `round_<t>/` directories holding
/// `global_before.ckpt`, `global_after.ckpt`, and `local_<k>.ckpt`.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::not_found(format!(
                "run directory {}",
                root.display()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn round_dir(&self, round: usize) -> PathBuf {
        self.root.join(format!("round_{round:04}"))
    }

    /// Persists one round. The trace is re-aggregated and bit-compared
    /// against `global_after` before anything is written.
    pub fn write_trace<S: Scalar>(&self, trace: &RoundTrace<S>, sizes: &[usize]) -> Result<()> {
        let check = aggregate(&trace.locals, sizes)?;
        if check != trace.global_after {
            return Err(Error::numeric(format!(
                "round {}: locals do not re-aggregate to global_after",
                trace.round
            )));
        }
        let dir = self.round_dir(trace.round);
        fs::create_dir_all(&dir)?;
        trace.global_before.save(&dir.join("global_before.ckpt"))?;
        trace.global_after.save(&dir.join("global_after.ckpt"))?;
        for (k, local) in trace.locals.iter().enumerate() {
            local.save(&dir.join(format!("local_{k:03}.ckpt")))?;
        }
        Ok(())
    }

    /// Persisted round indices, ascending.
    pub fn rounds(&self) -> Result<Vec<usize>> {
        let mut rounds = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let name = entry?.file_name();
            if let Some(idx) = name
                .to_str()
                .and_then(|n| n.strip_prefix("round_"))
                .and_then(|n| n.parse::<usize>().ok())
            {
                rounds.push(idx);
            }
        }
        rounds.sort_unstable();
        Ok(rounds)
    }

    pub fn party_count(&self, round: usize) -> Result<usize> {
        let dir = self.round_dir(round);
        let mut count = 0;
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name();
            if name.to_str().is_some_and(|n| n.starts_with("local_")) {
                count += 1;
            }
        }
        Ok(count)
    }

    pub fn load_global_before<S: Scalar>(&self, round: usize) -> Result<MlpModel<S>> {
        MlpModel::load(&self.round_dir(round).join("global_before.ckpt"))
    }

    pub fn load_global_after<S: Scalar>(&self, round: usize) -> Result<MlpModel<S>> {
        MlpModel::load(&self.round_dir(round).join("global_after.ckpt"))
    }

    pub fn load_local<S: Scalar>(&self, round: usize, party: usize) -> Result<MlpModel<S>> {
        MlpModel::load(&self.round_dir(round).join(format!("local_{party:03}.ckpt")))
    }

    pub fn load_trace<S: Scalar>(&self, round: usize) -> Result<RoundTrace<S>> {
        let parties = self.party_count(round)?;
        let locals = (0..parties)
            .map(|k| self.load_local(round, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(RoundTrace {
            round,
            global_before: self.load_global_before(round)?,
            locals,
            global_after: self.load_global_after(round)?,
        })
    }

    /// Final global model of the run.
    pub fn final_model<S: Scalar>(&self) -> Result<MlpModel<S>> {
        let last = self.rounds()?.into_iter().next_back().ok_or_else(|| {
            Error::not_found(format!("no rounds under {}", self.root.display()))
        })?;
        self.load_global_after(last)
    }
}
