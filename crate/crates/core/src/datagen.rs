//! Synthetic multi-domain benchmarks and the per-split CSV format.
//!
//! Every domain shares one concept model: a latent `z ~ N(0, I_k)` carries
//! label `c` iff `w_c · z + b_c > 0`. Domains differ only in how the latent is
//! observed, `x = A_d z + mu_d + sigma_d * eps`, so knowledge about a category
//! transfers across domains while the raw inputs shift.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{
    CategoryId, Domain, DomainId, DomainRegistry, LabelError, LabelValue, PartialLabelMatrix,
};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("mixing matrix of domain {0} is rank deficient")]
    RankDeficient(DomainId),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("invalid benchmark: {0}")]
    InvalidConfig(String),
    #[error("schema mismatch in column {column}: expected {expected:?}, found {found:?}")]
    SchemaMismatch {
        column: usize,
        expected: String,
        found: String,
    },
    #[error("bad label code {value:?} at row {row}, column {col}")]
    BadLabelCode {
        row: usize,
        col: usize,
        value: String,
    },
    #[error("bad value {value:?} at row {row}, column {col}")]
    BadValue {
        row: usize,
        col: usize,
        value: String,
    },
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DatagenError> = std::result::Result<T, E>;

/// Ground-truth concepts shared by all domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptModel {
    pub latent_dim: usize,
    /// One weight vector of length `latent_dim` per category.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub label_noise_rate: f64,
}

impl ConceptModel {
    pub fn categories(&self) -> usize {
        self.weights.len()
    }

    /// Noise-free label of category `c` for latent `z`.
    pub fn clean_label(&self, c: CategoryId, z: &[f64]) -> bool {
        let score: f64 = self.weights[c].iter().zip(z).map(|(w, z)| w * z).sum();
        score + self.biases[c] > 0.0
    }
}

/// Observation model of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: DomainId,
    pub name: String,
    /// `observed_dim × latent_dim`, row-major rows.
    pub mixing: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub noise_std: f64,
    pub label_space: BTreeSet<CategoryId>,
    pub sample_count: usize,
}

impl DomainSpec {
    pub fn observed_dim(&self) -> usize {
        self.mixing.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Features plus partial labels of one (domain, split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: Split,
    pub features: Array2<f64>,
    pub labels: PartialLabelMatrix,
}

impl Dataset {
    pub fn new(split: Split, features: Array2<f64>, labels: PartialLabelMatrix) -> Result<Self> {
        if features.nrows() != labels.samples() {
            return Err(LabelError::ShapeMismatch(format!(
                "{} feature rows vs {} label rows",
                features.nrows(),
                labels.samples()
            ))
            .into());
        }
        Ok(Self {
            split,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.samples()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn observed_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn categories(&self) -> usize {
        self.labels.categories()
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            split: self.split,
            features: self.features.select(ndarray::Axis(0), rows),
            labels: self.labels.select(rows),
        }
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Self> {
        let split = parts.first().map_or(Split::Train, |d| d.split);
        let views: Vec<_> = parts.iter().map(|d| d.features.view()).collect();
        let features = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| LabelError::ShapeMismatch(e.to_string()))?;
        let labels = PartialLabelMatrix::concat(&parts.iter().map(|d| &d.labels).collect::<Vec<_>>())?;
        Dataset::new(split, features, labels)
    }
}

/// Generated splits of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub domain_id: DomainId,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DomainData {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Full, explicit description of a benchmark; the JSON document accepted by `generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub concept: ConceptModel,
    pub domains: Vec<DomainSpec>,
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

impl BenchmarkConfig {
    pub fn registry(&self) -> Result<DomainRegistry> {
        let domains = self
            .domains
            .iter()
            .map(|d| Domain {
                id: d.domain_id,
                name: d.name.clone(),
                label_space: d.label_space.clone(),
            })
            .collect();
        Ok(DomainRegistry::new(self.concept.categories(), domains)?)
    }

    pub fn generate(&self) -> Result<Vec<DomainData>> {
        generate_benchmark(
            &self.concept,
            &self.domains,
            self.split_fractions,
            self.seed,
        )
    }
}

/// Compact recipe for the default two-domain benchmark. Concept weights and
/// mixing matrices are drawn from `structure_seed`; samples from the seed
/// handed to [`SyntheticBenchmark::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticBenchmark {
    pub latent_dim: usize,
    pub observed_dim: usize,
    pub categories: usize,
    pub common: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub label_noise_rate: f64,
    /// Bias range in units of `|w_c|`; positive rates are `Phi(bias)`.
    pub bias_range: (f64, f64),
    pub internal_noise_std: f64,
    pub external_noise_std: f64,
    /// Relative size of the external mixing perturbation.
    pub mixing_shift: f64,
    /// Norm of the external offset.
    pub offset_shift: f64,
    pub structure_seed: u64,
}

impl Default for SyntheticBenchmark {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            observed_dim: 32,
            categories: 10,
            common: 6,
            train: 8000,
            val: 1000,
            test: 4000,
            label_noise_rate: 0.05,
            bias_range: (-1.0, 0.0),
            internal_noise_std: 0.5,
            external_noise_std: 0.5,
            mixing_shift: 0.6,
            offset_shift: 2.0,
            structure_seed: 7,
        }
    }
}

impl SyntheticBenchmark {
    pub fn build(&self, seed: u64) -> Result<BenchmarkConfig> {
        let (k, m, c) = (self.latent_dim, self.observed_dim, self.categories);
        if self.common == 0 || self.common > c || k == 0 || m < k {
            return Err(DatagenError::InvalidConfig(format!(
                "need 0 < common <= categories and observed_dim >= latent_dim > 0, got {self:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.structure_seed);
        let gauss = |rng: &mut ChaCha8Rng, scale: f64| -> f64 {
            scale * rng.sample::<f64, _>(StandardNormal)
        };

        let mut weights = Vec::with_capacity(c);
        let mut biases = Vec::with_capacity(c);
        let (lo, hi) = self.bias_range;
        for cat in 0..c {
            let w: Vec<f64> = (0..k).map(|_| gauss(&mut rng, 1.0)).collect();
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            let t = if c > 1 { cat as f64 / (c - 1) as f64 } else { 0.5 };
            biases.push(norm * (lo + t * (hi - lo)));
            weights.push(w);
        }

        let inv_sqrt_k = 1.0 / (k as f64).sqrt();
        let base: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..k).map(|_| gauss(&mut rng, inv_sqrt_k)).collect())
            .collect();
        let external: Vec<Vec<f64>> = base
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&a| a + gauss(&mut rng, self.mixing_shift * inv_sqrt_k))
                    .collect()
            })
            .collect();
        let direction: Vec<f64> = (0..m).map(|_| gauss(&mut rng, 1.0)).collect();
        let dn = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        let offset: Vec<f64> = direction.iter().map(|v| v / dn * self.offset_shift).collect();

        let sample_count = self.train + self.val + self.test;
        let total = sample_count as f64;
        Ok(BenchmarkConfig {
            concept: ConceptModel {
                latent_dim: k,
                weights,
                biases,
                label_noise_rate: self.label_noise_rate,
            },
            domains: vec![
                DomainSpec {
                    domain_id: 0,
                    name: "internal".into(),
                    mixing: base,
                    offset: vec![0.0; m],
                    noise_std: self.internal_noise_std,
                    label_space: (0..c).collect(),
                    sample_count,
                },
                DomainSpec {
                    domain_id: 1,
                    name: "external".into(),
                    mixing: external,
                    offset,
                    noise_std: self.external_noise_std,
                    label_space: (0..self.common).collect(),
                    sample_count,
                },
            ],
            split_fractions: [
                self.train as f64 / total,
                self.val as f64 / total,
                self.test as f64 / total,
            ],
            seed,
        })
    }
}

/// Numerical column rank by Gaussian elimination with partial pivoting.
fn column_rank(rows: &[Vec<f64>], cols: usize) -> usize {
    let mut a: Vec<Vec<f64>> = rows.to_vec();
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let tol = scale * 1e-10 * (rows.len().max(cols) as f64);
    let mut rank = 0;
    for col in 0..cols {
        let pivot = (rank..a.len()).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()));
        let Some(p) = pivot else { break };
        if a[p][col].abs() <= tol {
            continue;
        }
        a.swap(rank, p);
        let (top, rest) = a.split_at_mut(rank + 1);
        let pivot_row = &top[rank];
        for row in rest {
            let f = row[col] / pivot_row[col];
            for (x, y) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= f * y;
            }
        }
        rank += 1;
    }
    rank
}

fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let train = ((n as f64) * fractions[0]).round() as usize;
    let val = (((n as f64) * fractions[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    [train, val, n - train - val]
}

/// Per-domain RNG stream: one ChaCha8 key from `seed`, stream = domain id.
pub fn domain_rng(seed: u64, domain: DomainId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain as u64);
    rng
}

pub fn generate_benchmark(
    concept: &ConceptModel,
    specs: &[DomainSpec],
    split_fractions: [f64; 3],
    seed: u64,
) -> Result<Vec<DomainData>> {
    let sum: f64 = split_fractions.iter().sum();
    if split_fractions.iter().any(|&f| f.is_nan() || f <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatagenError::BadFractions(split_fractions));
    }
    let k = concept.latent_dim;
    let c = concept.categories();
    if concept.biases.len() != c || concept.weights.iter().any(|w| w.len() != k) {
        return Err(DatagenError::InvalidConfig(
            "concept weights/biases disagree with latent_dim or category count".into(),
        ));
    }
    if !(0.0..0.5).contains(&concept.label_noise_rate) {
        return Err(DatagenError::InvalidConfig(format!(
            "label_noise_rate {} outside [0, 0.5)",
            concept.label_noise_rate
        )));
    }
    let m = specs.first().map_or(0, DomainSpec::observed_dim);
    for spec in specs {
        if spec.observed_dim() != m
            || spec.offset.len() != m
            || spec.mixing.iter().any(|r| r.len() != k)
        {
            return Err(DatagenError::InvalidConfig(format!(
                "domain {} has inconsistent mixing/offset shapes",
                spec.domain_id
            )));
        }
        if column_rank(&spec.mixing, k) < k {
            return Err(DatagenError::RankDeficient(spec.domain_id));
        }
    }

    specs
        .iter()
        .map(|spec| generate_domain(concept, spec, split_fractions, seed))
        .collect()
}

fn generate_domain(
    concept: &ConceptModel,
    spec: &DomainSpec,
    fractions: [f64; 3],
    seed: u64,
) -> Result<DomainData> {
    let (k, c, m, n) = (
        concept.latent_dim,
        concept.categories(),
        spec.observed_dim(),
        spec.sample_count,
    );
    let mut rng = domain_rng(seed, spec.domain_id);
    let mut features = Array2::<f64>::zeros((n, m));
    let mut labels = Vec::with_capacity(n * c);
    let mut z = vec![0.0; k];
    for i in 0..n {
        for zj in z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        for cat in 0..c {
            let flip = rng.gen::<f64>() < concept.label_noise_rate;
            let y = concept.clean_label(cat, &z) != flip;
            labels.push(if y {
                LabelValue::Present
            } else {
                LabelValue::Absent
            });
        }
        for (r, row) in spec.mixing.iter().enumerate() {
            let signal: f64 = row.iter().zip(&z).map(|(a, z)| a * z).sum();
            let eps: f64 = rng.sample(StandardNormal);
            features[[i, r]] = signal + spec.offset[r] + spec.noise_std * eps;
        }
    }
    let ids = (0..n).map(|i| format!("{}-{:06}", spec.name, i)).collect();
    let matrix = PartialLabelMatrix::new(c, labels, ids, vec![spec.domain_id; n])?;
    let full = Dataset::new(Split::Train, features, matrix)?;
    let full = mask_to_label_space(&full, &spec.label_space);

    let [n_train, n_val, _] = split_counts(n, fractions);
    let rows: Vec<usize> = (0..n).collect();
    let take = |split, range: std::ops::Range<usize>| {
        let mut d = full.select(&rows[range]);
        d.split = split;
        d
    };
    Ok(DomainData {
        domain_id: spec.domain_id,
        train: take(Split::Train, 0..n_train),
        val: take(Split::Val, n_train..n_train + n_val),
        test: take(Split::Test, n_train + n_val..n),
    })
}

/// Sets every label outside `label_space` to unknown.
pub fn mask_to_label_space(dataset: &Dataset, label_space: &BTreeSet<CategoryId>) -> Dataset {
    let mut out = dataset.clone();
    for c in (0..out.categories()).filter(|c| !label_space.contains(c)) {
        for i in 0..out.len() {
            out.labels.set(i, c, LabelValue::Unknown);
        }
    }
    out
}

fn header(m: usize, c: usize) -> Vec<String> {
    ["id".to_string(), "domain".to_string()]
        .into_iter()
        .chain((0..m).map(|j| format!("x{j}")))
        .chain((0..c).map(|j| format!("y{j}")))
        .collect()
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    let (m, c) = (dataset.observed_dim(), dataset.categories());
    out.write_record(header(m, c))?;
    let ids = dataset.labels.sample_ids();
    let domains = dataset.labels.domain_of();
    let mut record = Vec::with_capacity(2 + m + c);
    for i in 0..dataset.len() {
        record.clear();
        record.push(ids[i].clone());
        record.push(domains[i].to_string());
        record.extend(dataset.features.row(i).iter().map(|v| format!("{v:.16e}")));
        record.extend(dataset.labels.row(i).iter().map(|v| v.to_string()));
        out.write_record(&record)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path, split: Split) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let cols: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let m = cols.iter().filter(|s| s.starts_with('x')).count();
    let c = cols.iter().filter(|s| s.starts_with('y')).count();
    let expected = header(m, c);
    for (column, exp) in expected.iter().enumerate() {
        let found = cols.get(column).map_or("", String::as_str);
        if found != exp {
            return Err(DatagenError::SchemaMismatch {
                column,
                expected: exp.clone(),
                found: found.into(),
            });
        }
    }
    if let Some(extra) = cols.get(expected.len()) {
        return Err(DatagenError::SchemaMismatch {
            column: expected.len(),
            expected: String::new(),
            found: extra.clone(),
        });
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut domains = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != expected.len() {
            return Err(DatagenError::SchemaMismatch {
                column: record.len().min(expected.len()),
                expected: format!("{} fields", expected.len()),
                found: format!("{} fields on row {row}", record.len()),
            });
        }
        let bad = |col: usize| DatagenError::BadValue {
            row,
            col,
            value: record[col].into(),
        };
        ids.push(record[0].to_string());
        domains.push(record[1].parse::<DomainId>().map_err(|_| bad(1))?);
        for col in 2..2 + m {
            features.push(record[col].parse::<f64>().map_err(|_| bad(col))?);
        }
        for col in 2 + m..2 + m + c {
            let label = record[col]
                .parse::<i64>()
                .ok()
                .and_then(|code| LabelValue::try_from(code).ok())
                .ok_or_else(|| DatagenError::BadLabelCode {
                    row,
                    col,
                    value: record[col].into(),
                })?;
            labels.push(label);
        }
    }
    let n = ids.len();
    let features = Array2::from_shape_vec((n, m), features)
        .map_err(|e| LabelError::ShapeMismatch(e.to_string()))?;
    let labels = PartialLabelMatrix::new(c, labels, ids, domains)?;
    Dataset::new(split, features, labels)
}

/// Location of one (domain, split) CSV inside a benchmark directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub domain: DomainId,
    pub split: Split,
    pub file: String,
}

/// Index file written next to the CSVs: registry plus file locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub registry: DomainRegistry,
    pub internal_domain: DomainId,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn dataset_file_name(domain: DomainId, split: Split) -> String {
    format!("domain{domain}_{}.csv", split.as_str())
}

pub fn write_benchmark(
    dir: &Path,
    registry: &DomainRegistry,
    data: &[DomainData],
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for d in data {
        for split in Split::ALL {
            let file = dataset_file_name(d.domain_id, split);
            write_dataset(d.split(split), &dir.join(&file))?;
            files.push(ManifestEntry {
                domain: d.domain_id,
                split,
                file,
            });
        }
    }
    let manifest = Manifest {
        registry: registry.clone(),
        internal_domain: 0,
        files,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_benchmark(dir: &Path) -> Result<(Manifest, Vec<DomainData>)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let mut data = Vec::new();
    for domain in manifest.registry.domains() {
        let load = |split: Split| -> Result<Dataset> {
            let entry = manifest
                .files
                .iter()
                .find(|e| e.domain == domain.id && e.split == split)
                .ok_or_else(|| {
                    DatagenError::InvalidConfig(format!(
                        "manifest has no {} file for domain {}",
                        split.as_str(),
                        domain.id
                    ))
                })?;
            read_dataset(&PathBuf::from(dir).join(&entry.file), split)
        };
        data.push(DomainData {
            domain_id: domain.id,
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
        });
    }
    Ok((manifest, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticBenchmark {
        SyntheticBenchmark {
            train: 200,
            val: 50,
            test: 100,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = small().build(11).unwrap();
        let a = cfg.generate().unwrap();
        let b = cfg.generate().unwrap();
        assert_eq!(a, b);
        let other = small().build(12).unwrap().generate().unwrap();
        assert_ne!(a[0].train.features, other[0].train.features);
    }

    #[test]
    fn split_sizes_and_disjoint_ids() {
        let data = small().build(3).unwrap().generate().unwrap();
        for d in &data {
            assert_eq!((d.train.len(), d.val.len(), d.test.len()), (200, 50, 100));
            let mut ids: Vec<_> = Split::ALL
                .iter()
                .flat_map(|&s| d.split(s).labels.sample_ids().to_vec())
                .collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), 350);
        }
    }

    #[test]
    fn bad_fractions_rejected() {
        let cfg = small().build(1).unwrap();
        for f in [[0.5, 0.5, 0.0], [0.5, 0.3, 0.3], [-0.1, 0.6, 0.5]] {
            let r = generate_benchmark(&cfg.concept, &cfg.domains, f, 0);
            assert!(matches!(r, Err(DatagenError::BadFractions(_))));
        }
    }

    #[test]
    fn rank_deficient_mixing_rejected() {
        let mut cfg = small().build(1).unwrap();
        let first = cfg.domains[1].mixing[0][0];
        for row in cfg.domains[1].mixing.iter_mut() {
            row[1] = 2.0 * row[0];
        }
        assert_ne!(first, 0.0);
        let r = cfg.generate();
        assert!(matches!(r, Err(DatagenError::RankDeficient(1))));
    }

    #[test]
    fn identity_observation_reproduces_labels() {
        let mut cfg = SyntheticBenchmark {
            latent_dim: 4,
            observed_dim: 4,
            categories: 3,
            common: 3,
            train: 100,
            val: 10,
            test: 10,
            label_noise_rate: 0.0,
            ..Default::default()
        }
        .build(5)
        .unwrap();
        for d in cfg.domains.iter_mut() {
            d.mixing = (0..4)
                .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect();
            d.offset = vec![0.0; 4];
            d.noise_std = 0.0;
        }
        let data = cfg.generate().unwrap();
        for d in &data {
            for i in 0..d.train.len() {
                let z: Vec<f64> = d.train.features.row(i).to_vec();
                for c in 0..3 {
                    let expected = cfg.concept.clean_label(c, &z);
                    assert_eq!(d.train.labels.get(i, c) == LabelValue::Present, expected);
                }
            }
        }
    }

    #[test]
    fn masking_cell_by_cell() {
        let cfg = SyntheticBenchmark {
            categories: 3,
            common: 3,
            train: 30,
            val: 5,
            test: 5,
            ..Default::default()
        }
        .build(9)
        .unwrap();
        let d = cfg.generate().unwrap().remove(0).train;
        let space: BTreeSet<_> = [0, 2].into_iter().collect();
        let masked = mask_to_label_space(&d, &space);
        for i in 0..d.len() {
            assert_eq!(masked.labels.get(i, 0), d.labels.get(i, 0));
            assert_eq!(masked.labels.get(i, 1), LabelValue::Unknown);
            assert_eq!(masked.labels.get(i, 2), d.labels.get(i, 2));
        }
        assert_eq!(mask_to_label_space(&d, &(0..3).collect()), d);
        let none = mask_to_label_space(&d, &BTreeSet::new());
        assert!((0..3).all(|c| none.labels.column(c).all(|v| v == LabelValue::Unknown)));
        assert_eq!(mask_to_label_space(&masked, &space), masked);
    }

    #[test]
    fn default_positive_rates_are_moderate() {
        let cfg = SyntheticBenchmark::default().build(0).unwrap();
        let data = cfg.generate().unwrap();
        let train = &data[0].train;
        for c in 0..cfg.concept.categories() {
            let (p, n) = train.labels.counts(c);
            let rate = p as f64 / (p + n) as f64;
            assert!((0.1..=0.9).contains(&rate), "category {c}: rate {rate}");
        }
    }

    #[test]
    fn rank_of_known_matrices() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(column_rank(&eye, 2), 2);
        let dup = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]];
        assert_eq!(column_rank(&dup, 2), 1);
        assert_eq!(column_rank(&[vec![0.0, 0.0]], 2), 0);
    }
}
