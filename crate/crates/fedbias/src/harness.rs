//! Config-driven experiment harness.
//!
//! A JSON config names the data source, the training setup, the seeds,
//! and the audit toggles. `cmd_run` trains all regimes per seed and
//! checkpoints everything under `<out>/run_<config-hash>/seed_<s>/`;
//! reruns of a completed (config, seed) pair are skipped. `cmd_audit`
//! reads only persisted artifacts (plus the deterministic datasets) and
//! emits the figure-ready report bundle and `summary.json`.
//!
//! Progress goes to stderr; machine-readable output goes to files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{group_attribution_summary, AttributionTarget, GroupAttributionSummary};
use crate::audit::{
    compute_benefits, compute_influence, fairness_dynamics, influence_top_pairs, BenefitReport,
    DynamicsSeries, InfluenceMatrix, TraceSource,
};
use crate::data::{
    dataset_manifest, generate_synthetic, load_csv, partition, train_test_split, write_party_csv,
    CsvSchemaSpec, PartitionMode, PartitionSpec, PartyDataset, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::intervention::{
    norm_series, reweigh_tables, run_federated_reweighed, scaling_sweep, ReweighScope,
    ScaleTarget, ScalingSweep,
};
use crate::metrics::{evaluate, pearson, EvalOptions, FairnessMetric, FairnessReport};
use crate::nn::MlpModel;
use crate::training::{
    run_federated, train_centralized, train_standalone, RunDir, TrainingConfig,
};

pub const REGIME_STANDALONE: &str = "standalone";
pub const REGIME_CENTRALIZED: &str = "centralized";
pub const REGIME_FEDERATED: &str = "federated";

/// Training fields of the experiment config; the per-run seed comes from
/// the `seeds` list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub centralized_lr: Option<f64>,
    pub fedprox_mu: f64,
    pub hidden_width: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let base = TrainingConfig::default();
        Self {
            rounds: base.rounds,
            local_epochs: base.local_epochs,
            batch_size: base.batch_size,
            lr: base.lr,
            centralized_lr: base.centralized_lr,
            fedprox_mu: base.fedprox_mu,
            hidden_width: base.hidden_width,
        }
    }
}

impl TrainingSection {
    pub fn to_config(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            centralized_lr: self.centralized_lr,
            fedprox_mu: self.fedprox_mu,
            seed,
            hidden_width: self.hidden_width,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub d_num: usize,
    pub parties: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Exactly one of `bias_levels` and `bias_linspace` may be set;
    /// neither means linspace 0 to 0.9.
    pub bias_levels: Option<Vec<f64>>,
    pub bias_linspace: Option<[f64; 2]>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            d_num: 12,
            parties: 20,
            n_train: 1000,
            n_test: 2000,
            bias_levels: None,
            bias_linspace: None,
        }
    }
}

impl SyntheticSection {
    pub fn resolve_bias_levels(&self) -> Vec<f64> {
        if let Some(levels) = &self.bias_levels {
            return levels.clone();
        }
        let [lo, hi] = self.bias_linspace.unwrap_or([0.0, 0.9]);
        let k = self.parties;
        (0..k)
            .map(|i| {
                if k == 1 {
                    lo
                } else {
                    lo + (hi - lo) * i as f64 / (k - 1) as f64
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub mode: PartitionMode,
    pub num_parties: usize,
    pub minority_ratio: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            mode: PartitionMode::Iid,
            num_parties: 20,
            minority_ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSection {
    pub path: String,
    pub schema: CsvSchemaSpec,
    #[serde(default)]
    pub partition: PartitionSection,
    /// Per-party test share, matching the large-test convention.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    2.0 / 3.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSection),
    Csv(CsvSection),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReweighToggle {
    Off,
    #[default]
    Local,
    Global,
}

impl ReweighToggle {
    pub fn scope(self) -> Option<ReweighScope> {
        match self {
            ReweighToggle::Off => None,
            ReweighToggle::Local => Some(ReweighScope::Local),
            ReweighToggle::Global => Some(ReweighScope::Global),
        }
    }

    fn regime_name(self) -> Option<&'static str> {
        match self {
            ReweighToggle::Off => None,
            ReweighToggle::Local => Some("reweighed_local"),
            ReweighToggle::Global => Some("reweighed_global"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSection {
    pub benefits: bool,
    pub influence: bool,
    pub dynamics: bool,
    pub attribution: bool,
    pub norms: bool,
    pub sweeps: bool,
    /// Also trains a reweighed federated run in `cmd_run`.
    pub reweigh: ReweighToggle,
    pub metric: FairnessMetric,
    /// Sample every n-th round in the influence/dynamics/norms passes.
    pub stride: usize,
    pub ig_steps: usize,
    pub attribution_target: AttributionTarget,
    pub sweep_factors: Vec<f64>,
    pub min_cell: usize,
}

impl Default for AuditSection {
    fn default() -> Self {
        Self {
            benefits: true,
            influence: true,
            dynamics: true,
            attribution: true,
            norms: true,
            sweeps: true,
            reweigh: ReweighToggle::default(),
            metric: FairnessMetric::Dp,
            stride: 1,
            ig_steps: crate::attribution::DEFAULT_IG_STEPS,
            attribution_target: AttributionTarget::default(),
            sweep_factors: vec![0.1, 0.5, 1.0, 2.0, 10.0],
            min_cell: EvalOptions::default().min_cell,
        }
    }
}

impl AuditSection {
    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            min_cell: self.min_cell,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub audit: AuditSection,
    pub output_dir: String,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed required"));
        }
        if self.output_dir.is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        self.training
            .to_config(0)
            .validate()
            .map_err(|e| Error::config("training", e.to_string()))?;
        if self.training.rounds == 0 {
            return Err(Error::config("training.rounds", "must be >= 1"));
        }
        if self.audit.stride == 0 {
            return Err(Error::config("audit.stride", "must be >= 1"));
        }
        if self.audit.ig_steps == 0 {
            return Err(Error::config("audit.ig_steps", "must be >= 1"));
        }
        if self.audit.min_cell == 0 {
            return Err(Error::config("audit.min_cell", "must be >= 1"));
        }
        if self.audit.sweeps {
            if self.audit.sweep_factors.is_empty() {
                return Err(Error::config("audit.sweep_factors", "must not be empty"));
            }
            if self
                .audit
                .sweep_factors
                .iter()
                .any(|f| !f.is_finite() || *f < 0.0)
            {
                return Err(Error::config(
                    "audit.sweep_factors",
                    "factors must be finite and >= 0",
                ));
            }
        }
        match &self.data {
            DataSource::Synthetic(s) => {
                if s.parties < 2 {
                    return Err(Error::config("data.synthetic.parties", "must be >= 2"));
                }
                if s.d_num == 0 {
                    return Err(Error::config("data.synthetic.d_num", "must be >= 1"));
                }
                if s.n_train == 0 || s.n_test == 0 {
                    return Err(Error::config(
                        "data.synthetic.n_train/n_test",
                        "must be >= 1",
                    ));
                }
                if s.bias_levels.is_some() && s.bias_linspace.is_some() {
                    return Err(Error::config(
                        "data.synthetic.bias_levels",
                        "set either bias_levels or bias_linspace, not both",
                    ));
                }
                let levels = s.resolve_bias_levels();
                if levels.len() != s.parties {
                    return Err(Error::config(
                        "data.synthetic.bias_levels",
                        format!("{} levels for {} parties", levels.len(), s.parties),
                    ));
                }
                if levels.iter().any(|b| !(0.0..=1.0).contains(b)) {
                    return Err(Error::config(
                        "data.synthetic.bias_levels",
                        "levels must lie in [0, 1]",
                    ));
                }
            }
            DataSource::Csv(c) => {
                if c.path.is_empty() {
                    return Err(Error::config("data.csv.path", "must not be empty"));
                }
                if !(0.0 < c.test_fraction && c.test_fraction < 1.0) {
                    return Err(Error::config(
                        "data.csv.test_fraction",
                        "must lie in (0, 1)",
                    ));
                }
                if c.partition.num_parties == 0 {
                    return Err(Error::config("data.csv.partition.num_parties", "must be >= 1"));
                }
            }
        }
        Ok(())
    }

    pub fn party_count(&self) -> usize {
        match &self.data {
            DataSource::Synthetic(s) => s.parties,
            DataSource::Csv(c) => c.partition.num_parties,
        }
    }
}

/// Parses and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::not_found(format!("config file {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let mut deserializer = serde_json::Deserializer::from_str(&text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(&mut deserializer)
        .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Hash over the run-defining sections (data + training), canonicalized
/// by sorted-key JSON. Audit toggles do not force retraining.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    #[derive(Serialize)]
    struct HashView<'a> {
        data: &'a DataSource,
        training: &'a TrainingSection,
    }
    let value = serde_json::to_value(HashView {
        data: &cfg.data,
        training: &cfg.training,
    })
    .expect("config serializes");
    let canonical = serde_json::to_string(&value).expect("value serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn mix_seed(seed: u64, k: u64) -> u64 {
    seed ^ (k.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Deterministically rebuilds the per-party datasets for one seed.
pub fn build_parties(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<PartyDataset<f64>>> {
    match &cfg.data {
        DataSource::Synthetic(s) => generate_synthetic(&SyntheticConfig {
            d_num: s.d_num,
            parties: s.parties,
            n_train: s.n_train,
            n_test: s.n_test,
            bias_levels: s.resolve_bias_levels(),
            seed,
        }),
        DataSource::Csv(c) => {
            let (x, y, a, schema) = load_csv::<f64>(Path::new(&c.path), &c.schema)?;
            let spec = PartitionSpec {
                mode: c.partition.mode,
                num_parties: c.partition.num_parties,
                minority_ratio: c.partition.minority_ratio,
                seed,
            };
            let shards = partition(&x, &y, &a, &schema, &spec)?;
            shards
                .into_iter()
                .map(|mut party| {
                    let (train, test) = train_test_split(
                        &party.train,
                        c.test_fraction,
                        mix_seed(seed, party.party_id as u64),
                    )?;
                    party.train = train;
                    party.test = test;
                    Ok(party)
                })
                .collect()
        }
    }
}

/// Directory layout of one experiment: `<out>/run_<hash>`.
#[derive(Debug, Clone)]
pub struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &ExperimentConfig, out_override: Option<&Path>) -> Self {
        let out = out_override
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
        Self {
            root: out.join(format!("run_{}", config_hash(cfg))),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed_{seed}"))
    }

    pub fn regime_dir(&self, seed: u64, regime: &str) -> PathBuf {
        self.seed_dir(seed).join(regime)
    }

    pub fn standalone_ckpt(&self, seed: u64, party: usize) -> PathBuf {
        self.regime_dir(seed, REGIME_STANDALONE)
            .join(format!("party_{party:03}.ckpt"))
    }

    pub fn centralized_ckpt(&self, seed: u64) -> PathBuf {
        self.regime_dir(seed, REGIME_CENTRALIZED).join("model.ckpt")
    }

    pub fn reweighed_ckpt(&self, seed: u64, regime: &str) -> PathBuf {
        self.regime_dir(seed, regime).join("model.ckpt")
    }

    pub fn seed_manifest(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("manifest.json")
    }

    pub fn audit_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("audit")
    }

    pub fn summary_path(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeedManifest {
    seed: u64,
    complete: bool,
    regimes: Vec<String>,
    dataset: crate::data::DatasetManifest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    config_hash: String,
    seeds: Vec<u64>,
}

fn seed_is_complete(paths: &RunPaths, seed: u64) -> bool {
    let manifest = paths.seed_manifest(seed);
    fs::read_to_string(manifest)
        .ok()
        .and_then(|text| serde_json::from_str::<SeedManifest>(&text).ok())
        .is_some_and(|m| m.complete && m.seed == seed)
}

/// Trains and persists all regimes for one seed; a completed seed is
/// skipped.
fn run_seed(cfg: &ExperimentConfig, paths: &RunPaths, seed: u64) -> Result<bool> {
    if seed_is_complete(paths, seed) {
        eprintln!("[run] seed {seed}: already complete, skipping");
        return Ok(false);
    }
    let parties = build_parties(cfg, seed)?;
    let tcfg = cfg.training.to_config(seed);
    let sizes: Vec<usize> = parties.iter().map(PartyDataset::n_k).collect();
    let mut regimes = Vec::new();

    eprintln!("[run] seed {seed}: standalone x{}", parties.len());
    fs::create_dir_all(paths.regime_dir(seed, REGIME_STANDALONE))?;
    for party in &parties {
        let model = train_standalone(party, &tcfg)?;
        model.save(&paths.standalone_ckpt(seed, party.party_id))?;
    }
    regimes.push(REGIME_STANDALONE.to_string());

    eprintln!("[run] seed {seed}: centralized");
    fs::create_dir_all(paths.regime_dir(seed, REGIME_CENTRALIZED))?;
    train_centralized(&parties, &tcfg)?.save(&paths.centralized_ckpt(seed))?;
    regimes.push(REGIME_CENTRALIZED.to_string());

    eprintln!(
        "[run] seed {seed}: federated, {} rounds{}",
        tcfg.rounds,
        if tcfg.fedprox_mu > 0.0 {
            format!(" (fedprox mu={})", tcfg.fedprox_mu)
        } else {
            String::new()
        }
    );
    let run_dir = RunDir::create(&paths.regime_dir(seed, REGIME_FEDERATED))?;
    let (_, traces) = run_federated(&parties, &tcfg)?;
    for trace in &traces {
        run_dir.write_trace(trace, &sizes)?;
    }
    regimes.push(REGIME_FEDERATED.to_string());

    if let (Some(scope), Some(name)) = (cfg.audit.reweigh.scope(), cfg.audit.reweigh.regime_name())
    {
        eprintln!("[run] seed {seed}: {name}");
        fs::create_dir_all(paths.regime_dir(seed, name))?;
        let tables = reweigh_tables(&parties, scope)?;
        write_json(
            &paths.regime_dir(seed, name).join("weights.json"),
            &tables,
        )?;
        let (model, _) = run_federated_reweighed(&parties, &tcfg, scope)?;
        model.save(&paths.reweighed_ckpt(seed, name))?;
        regimes.push(name.to_string());
    }

    write_json(
        &paths.seed_manifest(seed),
        &SeedManifest {
            seed,
            complete: true,
            regimes,
            dataset: dataset_manifest(&parties),
        },
    )?;
    Ok(true)
}

/// Trains every seed (standalone + centralized + federated + optional
/// reweighed) and returns the run directory.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    out_override: Option<&Path>,
    seeds_override: Option<&[u64]>,
    parallel_seeds: bool,
) -> Result<PathBuf> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg, out_override);
    fs::create_dir_all(paths.root())?;
    if !paths.config_path().exists() {
        write_json(&paths.config_path(), cfg)?;
    }
    let seeds: Vec<u64> = seeds_override.map_or_else(|| cfg.seeds.clone(), <[u64]>::to_vec);

    if parallel_seeds {
        std::thread::scope(|scope| -> Result<()> {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| scope.spawn(move || run_seed(cfg, &RunPaths::new(cfg, out_override), seed)))
                .collect();
            for handle in handles {
                handle.join().map_err(|_| Error::numeric("seed thread panicked"))??;
            }
            Ok(())
        })?;
    } else {
        for &seed in &seeds {
            run_seed(cfg, &paths, seed)?;
        }
    }

    write_json(
        &paths.manifest_path(),
        &RunManifest {
            config_hash: config_hash(cfg),
            seeds: seeds.clone(),
        },
    )?;
    Ok(paths.root().to_path_buf())
}

/// Everything the audit loads back for one seed.
struct SeedArtifacts {
    standalone: Vec<MlpModel<f64>>,
    centralized: MlpModel<f64>,
    federated_final: MlpModel<f64>,
    federated_run: RunDir,
    reweighed_final: Option<MlpModel<f64>>,
}

fn load_seed_artifacts(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    seed: u64,
    party_count: usize,
) -> Result<SeedArtifacts> {
    let mut missing = Vec::new();
    let mut standalone = Vec::new();
    for k in 0..party_count {
        let path = paths.standalone_ckpt(seed, k);
        match MlpModel::load(&path) {
            Ok(m) => standalone.push(m),
            Err(_) => missing.push(path.display().to_string()),
        }
    }
    let centralized = match MlpModel::load(&paths.centralized_ckpt(seed)) {
        Ok(m) => Some(m),
        Err(_) => {
            missing.push(paths.centralized_ckpt(seed).display().to_string());
            None
        }
    };
    let federated_run = RunDir::open(&paths.regime_dir(seed, REGIME_FEDERATED)).ok();
    let federated_final = federated_run
        .as_ref()
        .and_then(|run| run.final_model::<f64>().ok());
    if federated_final.is_none() {
        missing.push(
            paths
                .regime_dir(seed, REGIME_FEDERATED)
                .join("round_*/global_after.ckpt")
                .display()
                .to_string(),
        );
    }
    let reweighed_final = match cfg.audit.reweigh.regime_name() {
        Some(name) => {
            let path = paths.reweighed_ckpt(seed, name);
            match MlpModel::load(&path) {
                Ok(m) => Some(m),
                Err(_) => {
                    missing.push(path.display().to_string());
                    None
                }
            }
        }
        None => None,
    };
    if !missing.is_empty() {
        return Err(Error::not_found(format!(
            "incomplete run for seed {seed}; missing artifacts: {}",
            missing.join(", ")
        )));
    }
    Ok(SeedArtifacts {
        standalone,
        centralized: centralized.expect("checked above"),
        federated_final: federated_final.expect("checked above"),
        federated_run: federated_run.expect("checked above"),
        reweighed_final,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub stdev: f64,
}

fn stat(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stdev = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Stat { mean, stdev }
}

/// Network means of one model family evaluated per party test set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RegimeRow {
    pub accuracy: f64,
    pub dp_gap: f64,
    pub eo_gap: f64,
    pub acc_gap: f64,
}

fn gap_of(report: &FairnessReport, metric: FairnessMetric, what: &str) -> Result<f64> {
    report
        .gap(metric)
        .ok_or_else(|| Error::numeric(format!("{} gap undefined for {what}", metric.as_str())))
}

/// Mean over parties of a model-per-party evaluation; `models` yields the
/// model evaluated on party k's test set.
fn regime_row<'a, F>(
    parties: &[PartyDataset<f64>],
    opts: EvalOptions,
    model_for: F,
) -> Result<RegimeRow>
where
    F: Fn(usize) -> &'a MlpModel<f64>,
{
    let mut acc = 0.0;
    let mut dp = 0.0;
    let mut eo = 0.0;
    let mut accg = 0.0;
    for (k, party) in parties.iter().enumerate() {
        let what = format!("party {k}");
        let report = evaluate(model_for(k), &party.test, opts)?;
        acc += report.accuracy;
        dp += gap_of(&report, FairnessMetric::Dp, &what)?;
        eo += gap_of(&report, FairnessMetric::Eo, &what)?;
        accg += gap_of(&report, FairnessMetric::AccGap, &what)?;
    }
    let n = parties.len() as f64;
    Ok(RegimeRow {
        accuracy: acc / n,
        dp_gap: dp / n,
        eo_gap: eo / n,
        acc_gap: accg / n,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub table: BTreeMap<String, RegimeRow>,
    pub benefits: BTreeMap<String, f64>,
    pub correlations: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeStats {
    pub accuracy: Stat,
    pub dp_gap: Stat,
    pub eo_gap: Stat,
    pub acc_gap: Stat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub metric: FairnessMetric,
    pub seeds: Vec<u64>,
    pub table: BTreeMap<String, RegimeStats>,
    pub benefits: BTreeMap<String, Stat>,
    pub correlations: BTreeMap<String, Stat>,
    pub per_seed: BTreeMap<String, SeedSummary>,
}

/// Influence matrix as written to `influence.json`: the per-round tensor
/// lives in a sibling CSV referenced by path.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct InfluenceFile {
    metric: FairnessMetric,
    num_parties: usize,
    rounds: Vec<usize>,
    stride: usize,
    values: Vec<Vec<f64>>,
    mean_influence: Vec<f64>,
    cumulative: Vec<Vec<f64>>,
    cumulative_mean: Vec<Vec<f64>>,
    per_round_path: String,
}

fn write_influence_files(dir: &Path, matrix: &InfluenceMatrix) -> Result<()> {
    let per_round_path = "influence_rounds.csv";
    let mut csv = String::from("round,from,to,addend\n");
    for ri in &matrix.per_round {
        for (i, row) in ri.addends.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                csv.push_str(&format!("{},{},{},{}\n", ri.round, i, j, v));
            }
        }
    }
    fs::write(dir.join(per_round_path), csv)?;
    write_json(
        &dir.join("influence.json"),
        &InfluenceFile {
            metric: matrix.metric,
            num_parties: matrix.num_parties,
            rounds: matrix.rounds.clone(),
            stride: matrix.stride,
            values: matrix.values.clone(),
            mean_influence: matrix.mean_influence.clone(),
            cumulative: matrix.cumulative.clone(),
            cumulative_mean: matrix.cumulative_mean.clone(),
            per_round_path: per_round_path.to_string(),
        },
    )?;
    Ok(())
}

fn write_dynamics_csv(path: &Path, series: &DynamicsSeries) -> Result<()> {
    let mut out = String::from("round,global_gap,local_gap\n");
    for (i, round) in series.rounds.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}\n",
            round, series.global_gap[i], series.local_gap[i]
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_sweep_csv(path: &Path, sweep: &ScalingSweep) -> Result<()> {
    let mut header = String::from("factor,mean_accuracy,mean_dp_gap,mean_eo_gap");
    if let Some(first) = sweep.rows.first() {
        for pm in &first.parties {
            let tag = format!("{:03}", pm.party);
            header.push_str(&format!(",acc_{tag},dp_{tag},eo_{tag}"));
        }
    }
    header.push('\n');
    let mut out = header;
    for row in &sweep.rows {
        out.push_str(&format!(
            "{},{},{},{}",
            row.factor, row.mean_accuracy, row.mean_dp_gap, row.mean_eo_gap
        ));
        for pm in &row.parties {
            out.push_str(&format!(",{},{},{}", pm.accuracy, pm.dp_gap, pm.eo_gap));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_norms_csv(path: &Path, rows: &[crate::intervention::NormRow]) -> Result<()> {
    let mut out = String::from("round,who,value\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.round, row.who, row.value));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Index of the max/min standalone gap; first index wins ties.
fn extreme_party(gaps: &[f64]) -> (usize, usize) {
    let mut most = 0;
    let mut least = 0;
    for (k, &g) in gaps.iter().enumerate() {
        if g > gaps[most] {
            most = k;
        }
        if g < gaps[least] {
            least = k;
        }
    }
    (most, least)
}

/// Audits one seed from persisted artifacts; returns its summary row.
fn audit_seed(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    seed: u64,
) -> Result<SeedSummary> {
    let parties = build_parties(cfg, seed)?;
    let artifacts = load_seed_artifacts(cfg, paths, seed, parties.len())?;
    let opts = cfg.audit.eval_options();
    let metric = cfg.audit.metric;
    let audit_dir = paths.audit_dir(seed);
    fs::create_dir_all(&audit_dir)?;

    // Table rows for every regime.
    let mut table = BTreeMap::new();
    table.insert(
        REGIME_STANDALONE.to_string(),
        regime_row(&parties, opts, |k| &artifacts.standalone[k])?,
    );
    table.insert(
        REGIME_CENTRALIZED.to_string(),
        regime_row(&parties, opts, |_| &artifacts.centralized)?,
    );
    table.insert(
        REGIME_FEDERATED.to_string(),
        regime_row(&parties, opts, |_| &artifacts.federated_final)?,
    );
    if let (Some(reweighed), Some(name)) = (
        artifacts.reweighed_final.as_ref(),
        cfg.audit.reweigh.regime_name(),
    ) {
        table.insert(name.to_string(), regime_row(&parties, opts, |_| reweighed)?);
    }

    // Standalone gaps drive the most/least-biased party selection.
    let standalone_gaps: Vec<f64> = parties
        .iter()
        .enumerate()
        .map(|(k, party)| {
            let report = evaluate(&artifacts.standalone[k], &party.test, opts)?;
            gap_of(&report, metric, &format!("party {k}"))
        })
        .collect::<Result<_>>()?;
    let (most_biased, least_biased) = extreme_party(&standalone_gaps);

    let mut benefits_map = BTreeMap::new();
    let mut correlations = BTreeMap::new();

    let benefit_report: BenefitReport = compute_benefits(
        &artifacts.standalone,
        &artifacts.centralized,
        &artifacts.federated_final,
        &parties,
        metric,
        opts,
    )?;
    if cfg.audit.benefits {
        write_json(&audit_dir.join("benefits.json"), &benefit_report)?;
    }
    benefits_map.insert(
        "fl_accuracy_benefit".to_string(),
        benefit_report.network.fl_accuracy_benefit,
    );
    benefits_map.insert(
        "fl_fairness_benefit".to_string(),
        benefit_report.network.fl_fairness_benefit,
    );
    benefits_map.insert(
        "collab_accuracy_benefit".to_string(),
        benefit_report.network.collab_accuracy_benefit,
    );
    benefits_map.insert(
        "collab_fairness_benefit".to_string(),
        benefit_report.network.collab_fairness_benefit,
    );
    let fl_benefits: Vec<f64> = benefit_report
        .parties
        .iter()
        .map(|p| p.fl_fairness_benefit)
        .collect();
    if let Some(r) = pearson(&standalone_gaps, &fl_benefits) {
        correlations.insert("standalone_gap_vs_fl_fairness_benefit".to_string(), r);
    }

    let source = TraceSource::<f64>::Disk(&artifacts.federated_run);
    if cfg.audit.influence {
        let matrix = compute_influence(&source, &parties, metric, cfg.audit.stride, opts)?;
        write_influence_files(&audit_dir, &matrix)?;
        write_json(
            &audit_dir.join("top_pairs.json"),
            &influence_top_pairs(&matrix, 5, 5),
        )?;
        if let Some(r) = pearson(&standalone_gaps, &matrix.mean_influence) {
            correlations.insert("standalone_gap_vs_mean_influence".to_string(), r);
        }
    }

    if cfg.audit.dynamics {
        for k in [most_biased, least_biased] {
            let series = fairness_dynamics(&source, &parties[k], k, metric, cfg.audit.stride, opts)?;
            write_dynamics_csv(&audit_dir.join(format!("dynamics_{k:03}.csv")), &series)?;
        }
    }

    if cfg.audit.attribution {
        for k in [most_biased, least_biased] {
            let named: [(&str, &MlpModel<f64>); 3] = [
                (REGIME_STANDALONE, &artifacts.standalone[k]),
                (REGIME_FEDERATED, &artifacts.federated_final),
                (REGIME_CENTRALIZED, &artifacts.centralized),
            ];
            for (name, model) in named {
                let summary: GroupAttributionSummary = group_attribution_summary(
                    model,
                    &parties[k],
                    cfg.audit.ig_steps,
                    cfg.audit.attribution_target,
                )?;
                write_json(
                    &audit_dir.join(format!("attribution_{name}_party_{k:03}.json")),
                    &summary,
                )?;
            }
        }
    }

    if cfg.audit.norms {
        let rows = norm_series(&source, &parties[0].schema, cfg.audit.stride)?;
        write_norms_csv(&audit_dir.join("norms.csv"), &rows)?;
    }

    if cfg.audit.sweeps {
        for target in [ScaleTarget::SensitiveColumns, ScaleTarget::OtherColumns] {
            let sweep = scaling_sweep(
                &artifacts.federated_final,
                &parties,
                &parties[0].schema,
                &cfg.audit.sweep_factors,
                target,
                opts,
            )?;
            write_sweep_csv(
                &audit_dir.join(format!("sweep_{}.csv", target.as_str())),
                &sweep,
            )?;
        }
    }

    Ok(SeedSummary {
        table,
        benefits: benefits_map,
        correlations,
    })
}

/// Audits every seed of a completed run and writes `summary.json`;
/// returns its path.
pub fn cmd_audit(
    cfg: &ExperimentConfig,
    out_override: Option<&Path>,
    seeds_override: Option<&[u64]>,
    stride_override: Option<usize>,
) -> Result<PathBuf> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if let Some(stride) = stride_override {
        cfg.audit.stride = stride;
        cfg.validate()?;
    }
    let paths = RunPaths::new(&cfg, out_override);
    if !paths.root().is_dir() {
        return Err(Error::not_found(format!(
            "run directory {} (run `fedbias run` first)",
            paths.root().display()
        )));
    }
    let seeds: Vec<u64> = seeds_override.map_or_else(|| cfg.seeds.clone(), <[u64]>::to_vec);

    let mut per_seed = BTreeMap::new();
    for &seed in &seeds {
        eprintln!("[audit] seed {seed}");
        per_seed.insert(seed.to_string(), audit_seed(&cfg, &paths, seed)?);
    }

    // Aggregate across seeds: mean and sample stdev per entry.
    let rows: Vec<&SeedSummary> = seeds.iter().map(|s| &per_seed[&s.to_string()]).collect();
    let mut table = BTreeMap::new();
    for regime in rows[0].table.keys() {
        let collect = |f: fn(&RegimeRow) -> f64| -> Vec<f64> {
            rows.iter().map(|r| f(&r.table[regime])).collect()
        };
        table.insert(
            regime.clone(),
            RegimeStats {
                accuracy: stat(&collect(|r| r.accuracy)),
                dp_gap: stat(&collect(|r| r.dp_gap)),
                eo_gap: stat(&collect(|r| r.eo_gap)),
                acc_gap: stat(&collect(|r| r.acc_gap)),
            },
        );
    }
    let mut benefits = BTreeMap::new();
    for key in rows[0].benefits.keys() {
        let values: Vec<f64> = rows.iter().map(|r| r.benefits[key]).collect();
        benefits.insert(key.clone(), stat(&values));
    }
    let mut correlations = BTreeMap::new();
    for key in rows[0].correlations.keys() {
        let values: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.correlations.get(key).copied())
            .collect();
        correlations.insert(key.clone(), stat(&values));
    }

    let summary = Summary {
        config_hash: config_hash(&cfg),
        metric: cfg.audit.metric,
        seeds,
        table,
        benefits,
        correlations,
        per_seed,
    };
    write_json(&paths.summary_path(), &summary)?;
    Ok(paths.summary_path())
}

/// Runs only the parameter-scaling sweeps of a completed run.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    out_override: Option<&Path>,
    seeds_override: Option<&[u64]>,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg, out_override);
    if !paths.root().is_dir() {
        return Err(Error::not_found(format!(
            "run directory {}",
            paths.root().display()
        )));
    }
    let seeds: Vec<u64> = seeds_override.map_or_else(|| cfg.seeds.clone(), <[u64]>::to_vec);
    let mut written = Vec::new();
    for &seed in &seeds {
        let parties = build_parties(cfg, seed)?;
        let artifacts = load_seed_artifacts(cfg, &paths, seed, parties.len())?;
        let audit_dir = paths.audit_dir(seed);
        fs::create_dir_all(&audit_dir)?;
        for target in [ScaleTarget::SensitiveColumns, ScaleTarget::OtherColumns] {
            let sweep = scaling_sweep(
                &artifacts.federated_final,
                &parties,
                &parties[0].schema,
                &cfg.audit.sweep_factors,
                target,
                cfg.audit.eval_options(),
            )?;
            let path = audit_dir.join(format!("sweep_{}.csv", target.as_str()));
            write_sweep_csv(&path, &sweep)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Exports the synthetic datasets as one CSV per party plus a manifest;
/// returns the dataset directory.
pub fn cmd_generate(
    cfg: &ExperimentConfig,
    out_override: Option<&Path>,
    seeds_override: Option<&[u64]>,
) -> Result<PathBuf> {
    cfg.validate()?;
    let DataSource::Synthetic(_) = &cfg.data else {
        return Err(Error::config(
            "data",
            "generate requires a synthetic data source",
        ));
    };
    let seeds: Vec<u64> = seeds_override.map_or_else(|| cfg.seeds.clone(), <[u64]>::to_vec);
    let seed = seeds[0];
    let out = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let dir = out.join(format!("dataset_{}_seed_{seed}", config_hash(cfg)));
    fs::create_dir_all(&dir)?;
    let parties = build_parties(cfg, seed)?;
    for party in &parties {
        write_party_csv(party, &dir.join(format!("party_{:03}.csv", party.party_id)))?;
    }
    write_json(&dir.join("manifest.json"), &dataset_manifest(&parties))?;
    eprintln!(
        "[generate] wrote {} party files to {}",
        parties.len(),
        dir.display()
    );
    Ok(dir)
}
