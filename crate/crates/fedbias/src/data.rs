//! Dataset representation, CSV ingestion, synthetic biased data, and
//! partitioning across parties.
//!
//! Feature tables are one-hot encoded with the sensitive attribute kept
//! inside the input features; numeric columns are standardized with the
//! source file's own statistics. The synthetic generator plants a
//! controllable demographic-parity bias per party by corrupting training
//! labels toward one group, which makes a party's standalone fairness gap
//! a monotone function of its bias level.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{seeded_rng, STREAM_PARTITION, STREAM_PARTY, STREAM_SPLIT, STREAM_TRUTH};
use crate::scalar::Scalar;

/// Layout of an encoded feature table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    /// Encoded column names, one-hot columns as `name=level`.
    pub feature_names: Vec<String>,
    /// Raw categorical column name -> declared level order.
    pub categorical_levels: BTreeMap<String, Vec<String>>,
    /// Raw name of the sensitive attribute.
    pub sensitive_name: String,
    /// Indices of the sensitive attribute's one-hot columns in the
    /// encoded table.
    pub sensitive_columns: Vec<usize>,
    pub sensitive_is_binary: bool,
}

impl FeatureSchema {
    pub fn encoded_width(&self) -> usize {
        self.feature_names.len()
    }

    fn validate(&self) -> Result<()> {
        if self.sensitive_columns.is_empty() {
            return Err(Error::schema("sensitive attribute has no encoded columns"));
        }
        if self
            .sensitive_columns
            .iter()
            .any(|&c| c >= self.encoded_width())
        {
            return Err(Error::schema("sensitive column index out of range"));
        }
        Ok(())
    }
}

/// Features, binary labels, and group ids for one set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit<S> {
    pub x: Matrix<S>,
    pub y: Vec<u8>,
    pub a: Vec<u32>,
}

impl<S: Scalar> DataSplit<S> {
    pub fn new(x: Matrix<S>, y: Vec<u8>, a: Vec<u32>) -> Result<Self> {
        if x.rows() != y.len() || x.rows() != a.len() {
            return Err(Error::invalid("features, labels, groups disagree on rows"));
        }
        Ok(Self { x, y, a })
    }

    pub fn empty(cols: usize) -> Self {
        Self {
            x: Matrix::zeros(0, cols),
            y: Vec::new(),
            a: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Row counts per (group, label) cell.
    pub fn cell_counts(&self) -> BTreeMap<(u32, u8), usize> {
        let mut counts = BTreeMap::new();
        for (&y, &a) in self.y.iter().zip(&self.a) {
            *counts.entry((a, y)).or_insert(0) += 1;
        }
        counts
    }

    fn select(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            a: indices.iter().map(|&i| self.a[i]).collect(),
        }
    }
}

/// One party's local data; the unit of locality in the federation.
#[derive(Debug, Clone)]
pub struct PartyDataset<S> {
    pub party_id: usize,
    pub train: DataSplit<S>,
    pub test: DataSplit<S>,
    pub schema: Arc<FeatureSchema>,
}

impl<S: Scalar> PartyDataset<S> {
    /// Local training-set size, the aggregation weight.
    pub fn n_k(&self) -> usize {
        self.train.len()
    }
}

/// Declares how a CSV maps onto features, label, and sensitive attribute.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchemaSpec {
    pub label: String,
    pub sensitive: String,
    /// Input feature columns in order; must include the sensitive column.
    pub features: Vec<String>,
    /// Level order per categorical column; the sensitive column must be
    /// declared here.
    pub categorical: BTreeMap<String, Vec<String>>,
}

/// Loads a CSV with a header row, one-hot encodes categoricals in the
/// declared level order, and standardizes numeric columns with the file's
/// own mean and variance (constant columns become exactly zero).
pub fn load_csv<S: Scalar>(
    path: &Path,
    spec: &CsvSchemaSpec,
) -> Result<(Matrix<S>, Vec<u8>, Vec<u32>, Arc<FeatureSchema>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Error::not_found(format!("csv file {}", path.display()))
            }
            _ => Error::schema(format!("cannot read csv: {e}")),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::schema(format!("cannot read csv header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();

    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::schema(format!("column `{name}` missing from csv header")))
    };

    let label_col = col_index(&spec.label)?;
    if !spec.features.contains(&spec.sensitive) {
        return Err(Error::schema(
            "sensitive column must be part of the input features",
        ));
    }
    if !spec.categorical.contains_key(&spec.sensitive) {
        return Err(Error::schema(
            "sensitive column must be declared categorical with its level order",
        ));
    }
    let feature_cols: Vec<usize> = spec
        .features
        .iter()
        .map(|name| col_index(name))
        .collect::<Result<_>>()?;

    let mut raw_rows: Vec<Vec<String>> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Value {
            row: row_idx,
            message: format!("malformed csv record: {e}"),
        })?;
        raw_rows.push(record.iter().map(str::to_string).collect());
    }
    if raw_rows.is_empty() {
        return Err(Error::invalid("csv file has no data rows"));
    }

    // Encoded layout: expand each feature column in declared order.
    let mut feature_names = Vec::new();
    let mut sensitive_columns = Vec::new();
    for name in &spec.features {
        if let Some(levels) = spec.categorical.get(name) {
            if levels.is_empty() {
                return Err(Error::schema(format!("column `{name}` declares no levels")));
            }
            if name == &spec.sensitive {
                let start = feature_names.len();
                sensitive_columns.extend(start..start + levels.len());
            }
            for level in levels {
                feature_names.push(format!("{name}={level}"));
            }
        } else {
            feature_names.push(name.clone());
        }
    }

    let n = raw_rows.len();
    let width = feature_names.len();
    let mut encoded = vec![0.0f64; n * width];
    let mut labels = vec![0u8; n];
    let mut groups = vec![0u32; n];
    let sensitive_levels = &spec.categorical[&spec.sensitive];

    for (row_idx, row) in raw_rows.iter().enumerate() {
        if row.len() != headers.len() {
            return Err(Error::Value {
                row: row_idx,
                message: format!("expected {} fields, found {}", headers.len(), row.len()),
            });
        }
        let label_raw = row[label_col].trim();
        labels[row_idx] = match label_raw.parse::<f64>() {
            Ok(v) if v == 0.0 => 0,
            Ok(v) if v == 1.0 => 1,
            _ => {
                return Err(Error::Value {
                    row: row_idx,
                    message: format!("label `{label_raw}` is not binary"),
                })
            }
        };

        let mut out_col = 0;
        for (name, &src) in spec.features.iter().zip(&feature_cols) {
            let value = row[src].trim();
            if let Some(levels) = spec.categorical.get(name) {
                let level_idx = levels.iter().position(|l| l == value).ok_or_else(|| {
                    Error::Value {
                        row: row_idx,
                        message: format!("unknown level `{value}` for column `{name}`"),
                    }
                })?;
                encoded[row_idx * width + out_col + level_idx] = 1.0;
                if name == &spec.sensitive {
                    groups[row_idx] = level_idx as u32;
                }
                out_col += levels.len();
            } else {
                let v: f64 = value.parse().map_err(|_| Error::Value {
                    row: row_idx,
                    message: format!("non-numeric value `{value}` in column `{name}`"),
                })?;
                encoded[row_idx * width + out_col] = v;
                out_col += 1;
            }
        }
    }

    // Standardize numeric (non-one-hot) columns in place.
    let onehot: Vec<bool> = feature_names.iter().map(|n| n.contains('=')).collect();
    for c in 0..width {
        if onehot[c] {
            continue;
        }
        let mean = (0..n).map(|r| encoded[r * width + c]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|r| (encoded[r * width + c] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        if var < 1e-12 {
            for r in 0..n {
                encoded[r * width + c] = 0.0;
            }
        } else {
            let std = var.sqrt();
            for r in 0..n {
                encoded[r * width + c] = (encoded[r * width + c] - mean) / std;
            }
        }
    }

    let schema = FeatureSchema {
        feature_names,
        categorical_levels: spec.categorical.clone(),
        sensitive_name: spec.sensitive.clone(),
        sensitive_columns,
        sensitive_is_binary: sensitive_levels.len() == 2,
    };
    schema.validate()?;

    let data: Vec<S> = encoded.into_iter().map(S::from_f64_lossy).collect();
    Ok((
        Matrix::new(n, width, data)?,
        labels,
        groups,
        Arc::new(schema),
    ))
}

/// Synthetic benchmark generator settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Non-sensitive feature count.
    pub d_num: usize,
    pub parties: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Per-party label-corruption probability in [0, 1].
    pub bias_levels: Vec<f64>,
    pub seed: u64,
}

/// Ground truth behind a synthetic dataset, for oracle checks.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    /// Logistic weights over the non-sensitive features.
    pub weights: Vec<f64>,
}

impl SyntheticTruth {
    /// The Bayes-optimal prediction for clean labels ignores the sensitive
    /// attribute entirely.
    pub fn bayes_predict(&self, x_numeric: &[f64]) -> bool {
        self.weights
            .iter()
            .zip(x_numeric)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            >= 0.0
    }
}

fn validate_synthetic(cfg: &SyntheticConfig) -> Result<()> {
    if cfg.parties < 2 {
        return Err(Error::invalid("synthetic generator needs at least 2 parties"));
    }
    if cfg.d_num == 0 {
        return Err(Error::invalid("d_num must be >= 1"));
    }
    if cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(Error::invalid("n_train and n_test must be >= 1"));
    }
    if cfg.bias_levels.len() != cfg.parties {
        return Err(Error::invalid(format!(
            "bias_levels has {} entries for {} parties",
            cfg.bias_levels.len(),
            cfg.parties
        )));
    }
    if cfg.bias_levels.iter().any(|b| !(0.0..=1.0).contains(b)) {
        return Err(Error::invalid("bias_levels must lie in [0, 1]"));
    }
    Ok(())
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; the cosine branch only.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn synthetic_schema(d_num: usize) -> Arc<FeatureSchema> {
    let mut feature_names: Vec<String> = (0..d_num).map(|i| format!("x{i}")).collect();
    feature_names.push("group=g0".to_string());
    feature_names.push("group=g1".to_string());
    let mut categorical_levels = BTreeMap::new();
    categorical_levels.insert(
        "group".to_string(),
        vec!["g0".to_string(), "g1".to_string()],
    );
    Arc::new(FeatureSchema {
        feature_names,
        categorical_levels,
        sensitive_name: "group".to_string(),
        sensitive_columns: vec![d_num, d_num + 1],
        sensitive_is_binary: true,
    })
}

fn sample_split<S: Scalar>(
    rng: &mut ChaCha8Rng,
    n: usize,
    truth: &[f64],
    bias: f64,
    corrupt: bool,
) -> DataSplit<S> {
    let d = truth.len();
    let width = d + 2;
    let mut data = vec![S::zero(); n * width];
    let mut y = vec![0u8; n];
    let mut a = vec![0u32; n];
    for i in 0..n {
        let mut score = 0.0;
        for j in 0..d {
            let v = standard_normal(rng);
            score += truth[j] * v;
            data[i * width + j] = S::from_f64_lossy(v);
        }
        let group: u32 = u32::from(rng.gen_bool(0.5));
        a[i] = group;
        data[i * width + d + group as usize] = S::one();

        let p = 1.0 / (1.0 + (-score).exp());
        let clean = u8::from(rng.gen::<f64>() < p);
        let corrupted = rng.gen::<f64>() < bias;
        y[i] = if corrupt && corrupted {
            // The planted bias: the label becomes "is group 0".
            u8::from(group == 0)
        } else {
            clean
        };
    }
    DataSplit {
        x: Matrix::new(n, width, data).expect("consistent shape"),
        y,
        a,
    }
}

/// Generates the per-party datasets and returns the ground truth used to
/// label them. Training labels are corrupted toward group 0 with the
/// party's bias level; test labels stay clean so they measure the
/// uncorrupted task.
pub fn generate_synthetic_with_truth<S: Scalar>(
    cfg: &SyntheticConfig,
) -> Result<(Vec<PartyDataset<S>>, SyntheticTruth)> {
    validate_synthetic(cfg)?;
    let schema = synthetic_schema(cfg.d_num);

    let mut truth_rng = seeded_rng(cfg.seed, STREAM_TRUTH, 0, 0);
    let scale = 3.0 / (cfg.d_num as f64).sqrt();
    let weights: Vec<f64> = (0..cfg.d_num)
        .map(|_| standard_normal(&mut truth_rng) * scale)
        .collect();

    let mut parties = Vec::with_capacity(cfg.parties);
    for k in 0..cfg.parties {
        let mut rng = seeded_rng(cfg.seed, STREAM_PARTY, k as u64, 0);
        let train = sample_split(&mut rng, cfg.n_train, &weights, cfg.bias_levels[k], true);
        let test = sample_split(&mut rng, cfg.n_test, &weights, cfg.bias_levels[k], false);
        parties.push(PartyDataset {
            party_id: k,
            train,
            test,
            schema: Arc::clone(&schema),
        });
    }
    Ok((parties, SyntheticTruth { weights }))
}

pub fn generate_synthetic<S: Scalar>(cfg: &SyntheticConfig) -> Result<Vec<PartyDataset<S>>> {
    generate_synthetic_with_truth(cfg).map(|(parties, _)| parties)
}

/// How rows are distributed across parties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    /// The first half of the parties jointly hold `minority_ratio` of the
    /// minority subgroup; majority rows split evenly.
    MinorityRatioSplit,
    /// Party 0 holds half the minority subgroup; the rest is IID over the
    /// other parties.
    SingleHolder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub num_parties: usize,
    /// Only read in `minority_ratio_split` mode.
    pub minority_ratio: f64,
    pub seed: u64,
}

/// Splits evenly: first `n % k` chunks get one extra row.
fn even_chunks(indices: &[usize], k: usize) -> Vec<Vec<usize>> {
    let base = indices.len() / k;
    let extra = indices.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut offset = 0;
    for i in 0..k {
        let take = base + usize::from(i < extra);
        out.push(indices[offset..offset + take].to_vec());
        offset += take;
    }
    out
}

/// The (group, label) cell with the fewest rows; ties resolve to the
/// smallest (group, label).
fn minority_cell(y: &[u8], a: &[u32]) -> (u32, u8) {
    let mut counts: BTreeMap<(u32, u8), usize> = BTreeMap::new();
    for (&label, &group) in y.iter().zip(a) {
        *counts.entry((group, label)).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .min_by_key(|&(cell, count)| (count, cell))
        .map(|(cell, _)| cell)
        .expect("nonempty data")
}

/// Assigns every row to exactly one party according to the spec; the
/// returned datasets carry the rows as `train` with empty `test`.
pub fn partition<S: Scalar>(
    x: &Matrix<S>,
    y: &[u8],
    a: &[u32],
    schema: &Arc<FeatureSchema>,
    spec: &PartitionSpec,
) -> Result<Vec<PartyDataset<S>>> {
    let n = x.rows();
    if n != y.len() || n != a.len() {
        return Err(Error::invalid("features, labels, groups disagree on rows"));
    }
    let k = spec.num_parties;
    if k == 0 {
        return Err(Error::invalid("num_parties must be >= 1"));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} rows cannot cover {k} parties")));
    }

    let mut rng = seeded_rng(spec.seed, STREAM_PARTITION, 0, 0);
    let assignments: Vec<Vec<usize>> = match spec.mode {
        PartitionMode::Iid => {
            let mut indices: Vec<usize> = (0..n).collect();
            indices.shuffle(&mut rng);
            even_chunks(&indices, k)
        }
        PartitionMode::MinorityRatioSplit => {
            if k < 2 {
                return Err(Error::invalid("minority_ratio_split needs >= 2 parties"));
            }
            if !(0.0..=1.0).contains(&spec.minority_ratio) || spec.minority_ratio == 0.0 {
                return Err(Error::invalid("minority_ratio must lie in (0, 1]"));
            }
            let cell = minority_cell(y, a);
            let mut minority: Vec<usize> = (0..n).filter(|&i| (a[i], y[i]) == cell).collect();
            let mut majority: Vec<usize> = (0..n).filter(|&i| (a[i], y[i]) != cell).collect();
            minority.shuffle(&mut rng);
            majority.shuffle(&mut rng);

            let front_parties = k.div_ceil(2);
            let front_count = (spec.minority_ratio * minority.len() as f64).round() as usize;
            let front = even_chunks(&minority[..front_count], front_parties);
            let back = even_chunks(&minority[front_count..], k - front_parties);
            let shared = even_chunks(&majority, k);

            (0..k)
                .map(|p| {
                    let mut rows = if p < front_parties {
                        front[p].clone()
                    } else {
                        back[p - front_parties].clone()
                    };
                    rows.extend(&shared[p]);
                    rows
                })
                .collect()
        }
        PartitionMode::SingleHolder => {
            if k < 2 {
                return Err(Error::invalid("single_holder needs >= 2 parties"));
            }
            let cell = minority_cell(y, a);
            let mut minority: Vec<usize> = (0..n).filter(|&i| (a[i], y[i]) == cell).collect();
            minority.shuffle(&mut rng);
            let holder_count = minority.len() / 2;
            let holder: Vec<usize> = minority[..holder_count].to_vec();

            let mut held = vec![false; n];
            for &i in &holder {
                held[i] = true;
            }
            let mut rest: Vec<usize> = (0..n).filter(|&i| !held[i]).collect();
            rest.shuffle(&mut rng);
            let mut out = vec![holder];
            out.extend(even_chunks(&rest, k - 1));
            out
        }
    };

    let width = x.cols();
    let full = DataSplit {
        x: x.clone(),
        y: y.to_vec(),
        a: a.to_vec(),
    };
    Ok(assignments
        .into_iter()
        .enumerate()
        .map(|(party_id, rows)| PartyDataset {
            party_id,
            train: full.select(&rows),
            test: DataSplit::empty(width),
            schema: Arc::clone(schema),
        })
        .collect())
}

/// Disjoint, exhaustive train/test split, deterministic in the seed.
pub fn train_test_split<S: Scalar>(
    split: &DataSplit<S>,
    test_fraction: f64,
    seed: u64,
) -> Result<(DataSplit<S>, DataSplit<S>)> {
    if !(0.0 < test_fraction && test_fraction < 1.0) {
        return Err(Error::invalid("test_fraction must lie in (0, 1)"));
    }
    let n = split.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::invalid(format!(
            "test_fraction {test_fraction} degenerates on {n} rows"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut seeded_rng(seed, STREAM_SPLIT, 0, 0));
    let (test_idx, train_idx) = indices.split_at(n_test);
    Ok((split.select(train_idx), split.select(test_idx)))
}

/// Per-party size and cell composition, the dataset manifest payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub group: u32,
    pub label: u8,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyManifest {
    pub party_id: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub train_cells: Vec<CellCount>,
    pub test_cells: Vec<CellCount>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub parties: Vec<PartyManifest>,
}

fn cells_of<S: Scalar>(split: &DataSplit<S>) -> Vec<CellCount> {
    split
        .cell_counts()
        .into_iter()
        .map(|((group, label), count)| CellCount {
            group,
            label,
            count,
        })
        .collect()
}

pub fn dataset_manifest<S: Scalar>(parties: &[PartyDataset<S>]) -> DatasetManifest {
    DatasetManifest {
        parties: parties
            .iter()
            .map(|p| PartyManifest {
                party_id: p.party_id,
                n_train: p.n_k(),
                n_test: p.test.len(),
                train_cells: cells_of(&p.train),
                test_cells: cells_of(&p.test),
            })
            .collect(),
    }
}

/// Writes one party's rows as CSV: numeric features, the sensitive level,
/// the label, and a train/test split tag. Only schemas whose sole
/// categorical column is the sensitive attribute round-trip this way.
pub fn write_party_csv<S: Scalar>(party: &PartyDataset<S>, path: &Path) -> Result<()> {
    let schema = &party.schema;
    if schema.categorical_levels.len() != 1 || !schema.sensitive_is_binary {
        return Err(Error::schema(
            "csv export supports numeric features plus one binary sensitive column",
        ));
    }
    let levels = &schema.categorical_levels[&schema.sensitive_name];
    let numeric: Vec<usize> = (0..schema.encoded_width())
        .filter(|c| !schema.sensitive_columns.contains(c))
        .collect();

    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = numeric
        .iter()
        .map(|&c| schema.feature_names[c].clone())
        .collect();
    header.push(schema.sensitive_name.clone());
    header.push("label".to_string());
    header.push("split".to_string());
    writer.write_record(&header)?;

    let mut write_rows = |split: &DataSplit<S>, tag: &str| -> Result<()> {
        for i in 0..split.len() {
            let row = split.x.row(i);
            let mut record: Vec<String> = numeric
                .iter()
                .map(|&c| format!("{}", row[c].as_f64()))
                .collect();
            record.push(levels[split.a[i] as usize].clone());
            record.push(split.y[i].to_string());
            record.push(tag.to_string());
            writer.write_record(&record)?;
        }
        Ok(())
    };
    write_rows(&party.train, "train")?;
    write_rows(&party.test, "test")?;
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spec_two_features() -> CsvSchemaSpec {
        let mut categorical = BTreeMap::new();
        categorical.insert("sex".to_string(), vec!["F".to_string(), "M".to_string()]);
        CsvSchemaSpec {
            label: "label".to_string(),
            sensitive: "sex".to_string(),
            features: vec!["age".to_string(), "sex".to_string()],
            categorical,
        }
    }

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_one_hot_and_standardization() {
        let f = write_csv("age,sex,label\n20,F,0\n30,M,1\n40,F,1\n");
        let (x, y, a, schema) = load_csv::<f64>(f.path(), &spec_two_features()).unwrap();
        assert_eq!(schema.encoded_width(), 3);
        assert_eq!(schema.sensitive_columns, vec![1, 2]);
        assert_eq!(y, vec![0, 1, 1]);
        assert_eq!(a, vec![0, 1, 0]);
        for i in 0..3 {
            let row = x.row(i);
            assert_eq!(row[1] + row[2], 1.0, "one-hot pair sums to 1");
        }
        // age standardized: mean 30, population std sqrt(200/3).
        let std = (200.0f64 / 3.0).sqrt();
        assert!((x.row(0)[0] - (-10.0 / std)).abs() < 1e-12);
        assert!((x.row(1)[0]).abs() < 1e-12);
    }

    #[test]
    fn csv_constant_column_becomes_zero() {
        let f = write_csv("age,sex,label\n5,F,0\n5,M,1\n5,F,1\n");
        let (x, _, _, _) = load_csv::<f64>(f.path(), &spec_two_features()).unwrap();
        for i in 0..3 {
            assert_eq!(x.row(i)[0], 0.0);
        }
    }

    #[test]
    fn csv_group_counts_survive_encoding() {
        let f = write_csv("age,sex,label\n1,F,0\n2,M,1\n3,F,1\n4,F,0\n5,M,0\n");
        let (_, y, a, _) = load_csv::<f64>(f.path(), &spec_two_features()).unwrap();
        let split = DataSplit::new(Matrix::<f64>::zeros(5, 1), y, a).unwrap();
        let counts = split.cell_counts();
        assert_eq!(counts[&(0, 0)], 2);
        assert_eq!(counts[&(0, 1)], 1);
        assert_eq!(counts[&(1, 0)], 1);
        assert_eq!(counts[&(1, 1)], 1);
    }

    #[test]
    fn csv_error_paths() {
        let missing = write_csv("age,label\n20,0\n");
        let err = load_csv::<f64>(missing.path(), &spec_two_features()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");

        let unknown = write_csv("age,sex,label\n20,F,0\n30,X,1\n");
        let err = load_csv::<f64>(unknown.path(), &spec_two_features()).unwrap_err();
        match err {
            Error::Value { row, .. } => assert_eq!(row, 1),
            other => panic!("expected value error, got {other}"),
        }

        let empty = write_csv("age,sex,label\n");
        let err = load_csv::<f64>(empty.path(), &spec_two_features()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    fn small_synthetic(bias: Vec<f64>, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            d_num: 4,
            parties: bias.len(),
            n_train: 300,
            n_test: 400,
            bias_levels: bias,
            seed,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = small_synthetic(vec![0.0, 0.5], 9);
        let a: Vec<PartyDataset<f64>> = generate_synthetic(&cfg).unwrap();
        let b: Vec<PartyDataset<f64>> = generate_synthetic(&cfg).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.train, pb.train);
            assert_eq!(pa.test, pb.test);
        }
    }

    #[test]
    fn synthetic_full_bias_forces_train_label_gap() {
        let cfg = small_synthetic(vec![1.0, 0.0], 3);
        let parties: Vec<PartyDataset<f64>> = generate_synthetic(&cfg).unwrap();
        let train = &parties[0].train;
        // Every training label equals the group-0 indicator.
        for (&y, &a) in train.y.iter().zip(&train.a) {
            assert_eq!(y, u8::from(a == 0));
        }
        let counts = train.cell_counts();
        let rate = |g: u32| {
            let pos = counts.get(&(g, 1)).copied().unwrap_or(0) as f64;
            let tot = pos + counts.get(&(g, 0)).copied().unwrap_or(0) as f64;
            pos / tot
        };
        assert!(rate(0) - rate(1) >= 0.9);
    }

    #[test]
    fn synthetic_unbiased_bayes_predictor_is_fair() {
        // Monte-Carlo oracle: with no corruption the Bayes predictor for
        // clean labels ignores the group, so its empirical DP gap is
        // sampling noise only.
        let cfg = SyntheticConfig {
            d_num: 4,
            parties: 2,
            n_train: 10,
            n_test: 2000,
            bias_levels: vec![0.0, 0.0],
            seed: 11,
        };
        let (parties, truth) = generate_synthetic_with_truth::<f64>(&cfg).unwrap();
        for party in &parties {
            let test = &party.test;
            let mut pos = [0usize; 2];
            let mut tot = [0usize; 2];
            for i in 0..test.len() {
                let row = test.x.row(i);
                let g = test.a[i] as usize;
                tot[g] += 1;
                if truth.bayes_predict(&row[..cfg.d_num]) {
                    pos[g] += 1;
                }
            }
            let gap =
                (pos[0] as f64 / tot[0] as f64 - pos[1] as f64 / tot[1] as f64).abs();
            assert!(gap <= 0.05, "party {} gap {gap}", party.party_id);
        }
    }

    #[test]
    fn synthetic_test_labels_follow_clean_truth_rate() {
        // Test labels are never corrupted: the positive rate per group
        // should not differ by more than noise even at bias 1.
        let cfg = small_synthetic(vec![1.0, 1.0], 5);
        let parties: Vec<PartyDataset<f64>> = generate_synthetic(&cfg).unwrap();
        let counts = parties[0].test.cell_counts();
        let rate = |g: u32| {
            let pos = counts.get(&(g, 1)).copied().unwrap_or(0) as f64;
            let tot = pos + counts.get(&(g, 0)).copied().unwrap_or(0) as f64;
            pos / tot
        };
        assert!((rate(0) - rate(1)).abs() < 0.15);
    }

    fn id_matrix(n: usize) -> (Matrix<f64>, Vec<u8>, Vec<u32>) {
        // One column holding the row id so multisets can be compared.
        let data: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let a: Vec<u32> = (0..n).map(|i| ((i / 2) % 2) as u32).collect();
        (Matrix::new(n, 1, data).unwrap(), y, a)
    }

    fn one_col_schema() -> Arc<FeatureSchema> {
        synthetic_schema(1)
    }

    fn collect_ids(parties: &[PartyDataset<f64>]) -> Vec<i64> {
        let mut ids: Vec<i64> = parties
            .iter()
            .flat_map(|p| (0..p.n_k()).map(|i| p.train.x.row(i)[0] as i64))
            .collect();
        ids.sort_unstable();
        ids
    }

    #[test]
    fn partition_single_party_owns_everything() {
        let (x, y, a) = id_matrix(7);
        let spec = PartitionSpec {
            mode: PartitionMode::Iid,
            num_parties: 1,
            minority_ratio: 0.8,
            seed: 0,
        };
        let parties = partition(&x, &y, &a, &one_col_schema(), &spec).unwrap();
        assert_eq!(parties.len(), 1);
        assert_eq!(parties[0].n_k(), 7);
    }

    #[test]
    fn partition_iid_conserves_rows() {
        let (x, y, a) = id_matrix(100);
        let spec = PartitionSpec {
            mode: PartitionMode::Iid,
            num_parties: 2,
            minority_ratio: 0.8,
            seed: 1,
        };
        let parties = partition(&x, &y, &a, &one_col_schema(), &spec).unwrap();
        assert_eq!(parties[0].n_k(), 50);
        assert_eq!(parties[1].n_k(), 50);
        assert_eq!(collect_ids(&parties), (0..100).collect::<Vec<i64>>());
    }

    #[test]
    fn partition_minority_ratio_allocates_exact_share() {
        // 400 rows; the minority cell (a=1, y=1) has 100 rows by
        // construction of id_matrix cycling.
        let (x, y, a) = id_matrix(400);
        let cell = minority_cell(&y, &a);
        let minority_rows: Vec<usize> =
            (0..400).filter(|&i| (a[i], y[i]) == cell).collect();
        assert_eq!(minority_rows.len(), 100);

        let spec = PartitionSpec {
            mode: PartitionMode::MinorityRatioSplit,
            num_parties: 4,
            minority_ratio: 0.8,
            seed: 2,
        };
        let parties = partition(&x, &y, &a, &one_col_schema(), &spec).unwrap();
        let held_front: usize = parties[..2]
            .iter()
            .map(|p| {
                (0..p.n_k())
                    .filter(|&i| (p.train.a[i], p.train.y[i]) == cell)
                    .count()
            })
            .sum();
        assert_eq!(held_front, 80);
        assert_eq!(collect_ids(&parties), (0..400).collect::<Vec<i64>>());
    }

    #[test]
    fn partition_single_holder_takes_half_minority() {
        let (x, y, a) = id_matrix(400);
        let cell = minority_cell(&y, &a);
        let spec = PartitionSpec {
            mode: PartitionMode::SingleHolder,
            num_parties: 4,
            minority_ratio: 0.8,
            seed: 3,
        };
        let parties = partition(&x, &y, &a, &one_col_schema(), &spec).unwrap();
        let holder = &parties[0];
        assert_eq!(holder.n_k(), 50);
        assert!((0..holder.n_k())
            .all(|i| (holder.train.a[i], holder.train.y[i]) == cell));
        assert_eq!(collect_ids(&parties), (0..400).collect::<Vec<i64>>());
    }

    #[test]
    fn partition_rejects_bad_inputs() {
        let (x, y, a) = id_matrix(3);
        let spec = PartitionSpec {
            mode: PartitionMode::Iid,
            num_parties: 5,
            minority_ratio: 0.8,
            seed: 0,
        };
        assert!(partition(&x, &y, &a, &one_col_schema(), &spec).is_err());

        let (x, y, a) = id_matrix(40);
        let spec = PartitionSpec {
            mode: PartitionMode::MinorityRatioSplit,
            num_parties: 4,
            minority_ratio: 0.0,
            seed: 0,
        };
        assert!(partition(&x, &y, &a, &one_col_schema(), &spec).is_err());
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let (x, y, a) = id_matrix(10);
        let split = DataSplit::new(x, y, a).unwrap();
        let (train, test) = train_test_split(&split, 0.5, 7).unwrap();
        assert_eq!(train.len(), 5);
        assert_eq!(test.len(), 5);
        let mut ids: Vec<i64> = (0..5)
            .map(|i| train.x.row(i)[0] as i64)
            .chain((0..5).map(|i| test.x.row(i)[0] as i64))
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..10).collect::<Vec<i64>>());

        let (train2, _) = train_test_split(&split, 0.5, 7).unwrap();
        assert_eq!(train.x, train2.x);

        let (x, y, a) = id_matrix(100);
        let split = DataSplit::new(x, y, a).unwrap();
        let (t1, _) = train_test_split(&split, 0.3, 1).unwrap();
        let (t2, _) = train_test_split(&split, 0.3, 2).unwrap();
        assert_ne!(t1.x, t2.x, "different seeds almost surely differ");

        assert!(train_test_split(&split, 0.0, 0).is_err());
        let tiny = DataSplit::new(Matrix::<f64>::zeros(2, 1), vec![0, 1], vec![0, 1]).unwrap();
        assert!(train_test_split(&tiny, 0.1, 0).is_err());
    }

    #[test]
    fn manifest_counts_match_cells() {
        let cfg = small_synthetic(vec![0.2, 0.8], 4);
        let parties: Vec<PartyDataset<f64>> = generate_synthetic(&cfg).unwrap();
        let manifest = dataset_manifest(&parties);
        assert_eq!(manifest.parties.len(), 2);
        for (pm, party) in manifest.parties.iter().zip(&parties) {
            assert_eq!(pm.n_train, party.n_k());
            let total: usize = pm.train_cells.iter().map(|c| c.count).sum();
            assert_eq!(total, pm.n_train);
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn partition_conserves_rows_in_every_mode(
            n in 20usize..200,
            k in 2usize..6,
            mode_pick in 0u8..3,
            seed in 0u64..1000,
        ) {
            let data: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let x = Matrix::new(n, 1, data).unwrap();
            let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            let a: Vec<u32> = (0..n).map(|i| ((i / 3) % 2) as u32).collect();
            let mode = match mode_pick {
                0 => PartitionMode::Iid,
                1 => PartitionMode::MinorityRatioSplit,
                _ => PartitionMode::SingleHolder,
            };
            let spec = PartitionSpec { mode, num_parties: k, minority_ratio: 0.8, seed };
            let parties = partition(&x, &y, &a, &synthetic_schema(1), &spec).unwrap();
            prop_assert_eq!(parties.len(), k);
            let mut ids: Vec<i64> = parties
                .iter()
                .flat_map(|p| (0..p.n_k()).map(|i| p.train.x.row(i)[0] as i64))
                .collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..n as i64).collect::<Vec<i64>>());
        }

        #[test]
        fn group_ids_recoverable_from_one_hot(seed in 0u64..200) {
            let cfg = SyntheticConfig {
                d_num: 3,
                parties: 2,
                n_train: 50,
                n_test: 20,
                bias_levels: vec![0.3, 0.9],
                seed,
            };
            let parties: Vec<PartyDataset<f64>> = generate_synthetic(&cfg).unwrap();
            for party in &parties {
                for split in [&party.train, &party.test] {
                    for i in 0..split.len() {
                        let row = split.x.row(i);
                        let cols = &party.schema.sensitive_columns;
                        let hot: Vec<usize> = cols
                            .iter()
                            .filter(|&&c| row[c] == 1.0)
                            .map(|&c| c - cols[0])
                            .collect();
                        prop_assert_eq!(hot.len(), 1);
                        prop_assert_eq!(hot[0] as u32, split.a[i]);
                    }
                }
            }
        }
    }
}
