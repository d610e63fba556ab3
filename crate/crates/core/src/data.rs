//! Multi-domain datasets: synthetic generation, CSV I/O, the balanced
//! meta-set split, and per-domain stratified minibatches.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("cell (domain {domain}, class {class}) is empty")]
    EmptyCell { domain: usize, class: usize },
    #[error("domain {0} has no samples")]
    EmptyDomain(usize),
    #[error("domain index {index} out of range for {domains} domains")]
    DomainOutOfRange { index: usize, domains: usize },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

/// Where a record came from: its domain and position in the originating
/// dataset. Survives domain re-indexing and meta-set over-sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub domain: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    /// Domain index within the dataset that holds this sample.
    pub domain: usize,
    pub origin: Provenance,
}

/// `counts[k][c]`: number of samples of class `c` in domain `k`.
pub type CountMatrix = Vec<Vec<usize>>;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiDomainDataset {
    domains: Vec<Vec<Sample>>,
    num_classes: usize,
    input_dim: usize,
}

impl MultiDomainDataset {
    pub fn new(domains: Vec<Vec<Sample>>, num_classes: usize, input_dim: usize) -> Result<Self, DataError> {
        if num_classes < 2 {
            return Err(DataError::Invalid("need at least two classes".into()));
        }
        if domains.is_empty() {
            return Err(DataError::Invalid("need at least one domain".into()));
        }
        for (k, samples) in domains.iter().enumerate() {
            for s in samples {
                if s.domain != k {
                    return Err(DataError::Invalid(format!(
                        "sample tagged with domain {} stored under domain {k}",
                        s.domain
                    )));
                }
                if s.label >= num_classes {
                    return Err(DataError::Invalid(format!(
                        "label {} out of range for {num_classes} classes",
                        s.label
                    )));
                }
                if s.features.len() != input_dim {
                    return Err(DataError::Invalid(format!(
                        "feature length {} differs from input_dim {input_dim}",
                        s.features.len()
                    )));
                }
            }
        }
        Ok(Self { domains, num_classes, input_dim })
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn domain(&self, k: usize) -> &[Sample] {
        &self.domains[k]
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.domains.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.domains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> CountMatrix {
        let mut counts = vec![vec![0; self.num_classes]; self.domains.len()];
        for s in self.samples() {
            counts[s.domain][s.label] += 1;
        }
        counts
    }

    pub fn cell(&self, domain: usize, class: usize) -> impl Iterator<Item = &Sample> {
        self.domains[domain].iter().filter(move |s| s.label == class)
    }

    /// Keeps the listed domains, re-indexed in the given order. Provenance
    /// tags are preserved.
    pub fn select_domains(&self, keep: &[usize]) -> Result<Self, DataError> {
        let mut domains = Vec::with_capacity(keep.len());
        for (new_k, &k) in keep.iter().enumerate() {
            if k >= self.domains.len() {
                return Err(DataError::DomainOutOfRange { index: k, domains: self.domains.len() });
            }
            domains.push(
                self.domains[k]
                    .iter()
                    .map(|s| Sample { domain: new_k, ..s.clone() })
                    .collect(),
            );
        }
        Self::new(domains, self.num_classes, self.input_dim)
    }

    /// All domains except `target`, in their original order.
    pub fn without_domain(&self, target: usize) -> Result<Self, DataError> {
        if target >= self.domains.len() {
            return Err(DataError::DomainOutOfRange { index: target, domains: self.domains.len() });
        }
        let keep: Vec<usize> = (0..self.domains.len()).filter(|&k| k != target).collect();
        self.select_domains(&keep)
    }
}

/// Per-cell training counts, either listed explicitly or given by a
/// majority/minority law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountSpec {
    Matrix(CountMatrix),
    Law {
        majority: usize,
        minority: usize,
        /// `[domain, class]` pairs that receive the minority count.
        minority_cells: Vec<[usize; 2]>,
    },
}

impl CountSpec {
    pub fn resolve(&self, num_domains: usize, num_classes: usize) -> Result<CountMatrix, DataError> {
        let counts = match self {
            CountSpec::Matrix(m) => {
                if m.len() != num_domains || m.iter().any(|r| r.len() != num_classes) {
                    return Err(DataError::Invalid(format!(
                        "count matrix must be {num_domains}×{num_classes}"
                    )));
                }
                m.clone()
            }
            CountSpec::Law { majority, minority, minority_cells } => {
                let mut m = vec![vec![*majority; num_classes]; num_domains];
                for &[k, c] in minority_cells {
                    if k >= num_domains || c >= num_classes {
                        return Err(DataError::Invalid(format!("minority cell ({k}, {c}) out of range")));
                    }
                    m[k][c] = *minority;
                }
                m
            }
        };
        for (k, row) in counts.iter().enumerate() {
            for (c, &n) in row.iter().enumerate() {
                if n < 1 {
                    return Err(DataError::EmptyCell { domain: k, class: c });
                }
            }
        }
        Ok(counts)
    }
}

fn default_noise() -> f64 {
    1.0
}

fn default_separation() -> f64 {
    3.0
}

fn default_shift() -> f64 {
    1.0
}

/// Counts plus the geometry of the synthetic world: Gaussian class blobs
/// moved by one rotation-and-shift per domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceProfile {
    pub counts: CountSpec,
    /// Standard deviation of each class blob.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Scale of the class centers.
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    /// Magnitude of the per-domain rotation angles and offsets.
    #[serde(default = "default_shift")]
    pub domain_shift: f64,
    /// Seeds the class centers and domain transforms. Two datasets with the
    /// same geometry seed share one world and differ only in sampling noise.
    #[serde(default)]
    pub geometry_seed: u64,
}

/// Everything `generate_synthetic` needs; the on-disk generator spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    #[serde(flatten)]
    pub profile: ImbalanceProfile,
}

impl GeneratorSpec {
    pub fn generate(&self, seed: u64) -> Result<MultiDomainDataset, DataError> {
        generate_synthetic(self.num_domains, self.num_classes, self.input_dim, &self.profile, seed)
    }

    /// Same world, `per_cell` samples in every cell.
    pub fn balanced(&self, per_cell: usize) -> Self {
        let mut spec = self.clone();
        spec.profile.counts = CountSpec::Matrix(vec![vec![per_cell; self.num_classes]; self.num_domains]);
        spec
    }
}

struct DomainTransform {
    rotation: Vec<f64>,
    offset: Vec<f64>,
}

impl DomainTransform {
    fn random(dim: usize, shift: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut rotation = vec![0.0; dim * dim];
        for i in 0..dim {
            rotation[i * dim + i] = 1.0;
        }
        if dim >= 2 {
            let max_angle = shift * std::f64::consts::FRAC_PI_4;
            for _ in 0..dim {
                let i = rng.random_range(0..dim);
                let mut j = rng.random_range(0..dim - 1);
                if j >= i {
                    j += 1;
                }
                let theta = rng.random_range(-1.0..1.0) * max_angle;
                let (s, c) = theta.sin_cos();
                // Left-multiply by the Givens rotation acting on rows i and j.
                for col in 0..dim {
                    let a = rotation[i * dim + col];
                    let b = rotation[j * dim + col];
                    rotation[i * dim + col] = c * a - s * b;
                    rotation[j * dim + col] = s * a + c * b;
                }
            }
        }
        let offset = (0..dim)
            .map(|_| shift * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rotation, offset }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let dim = x.len();
        (0..dim)
            .map(|i| {
                let row = &self.rotation[i * dim..(i + 1) * dim];
                row.iter().zip(x).map(|(r, v)| r * v).sum::<f64>() + self.offset[i]
            })
            .collect()
    }
}

/// Draws `counts[k][c]` samples `R_k(μ_c + noise·z) + b_k` for every cell.
///
/// Class centers `μ_c` and domain transforms `(R_k, b_k)` come from the
/// profile's geometry seed; the noise `z` comes from `seed`.
pub fn generate_synthetic(
    num_domains: usize,
    num_classes: usize,
    input_dim: usize,
    profile: &ImbalanceProfile,
    seed: u64,
) -> Result<MultiDomainDataset, DataError> {
    if num_domains < 2 || num_classes < 2 {
        return Err(DataError::Invalid("need at least two domains and two classes".into()));
    }
    if input_dim == 0 {
        return Err(DataError::Invalid("input_dim must be at least 1".into()));
    }
    let counts = profile.counts.resolve(num_domains, num_classes)?;

    let mut geometry = ChaCha8Rng::seed_from_u64(profile.geometry_seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..input_dim)
                .map(|_| profile.class_separation * geometry.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let transforms: Vec<DomainTransform> = (0..num_domains)
        .map(|_| DomainTransform::random(input_dim, profile.domain_shift, &mut geometry))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut domains = Vec::with_capacity(num_domains);
    for (k, transform) in transforms.iter().enumerate() {
        let mut samples = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..counts[k][c] {
                let raw: Vec<f64> = center
                    .iter()
                    .map(|&m| m + profile.noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let index = samples.len();
                samples.push(Sample {
                    features: transform.apply(&raw),
                    label: c,
                    domain: k,
                    origin: Provenance { domain: k, index },
                });
            }
        }
        domains.push(samples);
    }
    MultiDomainDataset::new(domains, num_classes, input_dim)
}

/// Which records the balanced meta-set may draw from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MetaPool {
    /// A per-cell slice of `fraction` of the records (at least one) feeds the
    /// meta-set; the imbalanced set keeps only the rest.
    HeldOut { fraction: f64 },
    /// The meta-set over-samples from every record, and the imbalanced set is
    /// the whole dataset.
    Shared,
}

impl Default for MetaPool {
    fn default() -> Self {
        MetaPool::HeldOut { fraction: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    /// Identical count in every (domain, class) cell.
    pub balanced: MultiDomainDataset,
    pub imbalanced: MultiDomainDataset,
    /// Distinct records available to the meta-set, per cell.
    pub meta_pool_counts: CountMatrix,
}

/// Builds the balanced meta-set with exactly `per_pair` records per cell,
/// using random over-sampling where a cell's pool is smaller than that.
#[allow(clippy::needless_range_loop)]
pub fn split_meta(
    ds: &MultiDomainDataset,
    per_pair: usize,
    pool: MetaPool,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if per_pair == 0 {
        return Err(DataError::Invalid("per_pair must be at least 1".into()));
    }
    if let MetaPool::HeldOut { fraction } = pool {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(DataError::Invalid(format!("meta fraction {fraction} not in (0, 1)")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k_count, c_count) = (ds.num_domains(), ds.num_classes());
    let mut balanced = vec![Vec::new(); k_count];
    let mut imbalanced = vec![Vec::new(); k_count];
    let mut pool_counts = vec![vec![0; c_count]; k_count];

    for k in 0..k_count {
        for c in 0..c_count {
            let mut cell: Vec<&Sample> = ds.cell(k, c).collect();
            if cell.is_empty() {
                return Err(DataError::EmptyCell { domain: k, class: c });
            }
            cell.shuffle(&mut rng);
            let take = match pool {
                MetaPool::HeldOut { fraction } => {
                    ((fraction * cell.len() as f64).ceil() as usize).clamp(1, cell.len())
                }
                MetaPool::Shared => cell.len(),
            };
            let meta_pool = &cell[..take];
            pool_counts[k][c] = take;
            match pool {
                MetaPool::HeldOut { .. } => imbalanced[k].extend(cell[take..].iter().map(|s| (*s).clone())),
                MetaPool::Shared => imbalanced[k].extend(cell.iter().map(|s| (*s).clone())),
            }
            let mut chosen: Vec<&Sample> = meta_pool.iter().take(per_pair).copied().collect();
            while chosen.len() < per_pair {
                chosen.push(meta_pool[rng.random_range(0..meta_pool.len())]);
            }
            balanced[k].extend(chosen.into_iter().cloned());
        }
    }
    // Keep each domain's imbalanced records in their original order.
    for samples in &mut imbalanced {
        samples.sort_by_key(|s| s.origin.index);
    }
    Ok(DatasetSplit {
        balanced: MultiDomainDataset::new(balanced, c_count, ds.input_dim())?,
        imbalanced: MultiDomainDataset::new(imbalanced, c_count, ds.input_dim())?,
        meta_pool_counts: pool_counts,
    })
}

pub fn one_hot_domain(k: usize, num_domains: usize) -> Result<Vec<f64>, DataError> {
    if k >= num_domains {
        return Err(DataError::DomainOutOfRange { index: k, domains: num_domains });
    }
    let mut v = vec![0.0; num_domains];
    v[k] = 1.0;
    Ok(v)
}

/// A batch of samples laid out for the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    /// Row-major `n × input_dim`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub input_dim: usize,
    pub num_domains: usize,
}

impl Minibatch {
    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a Sample>,
        input_dim: usize,
        num_domains: usize,
    ) -> Self {
        let mut batch = Self {
            features: Vec::new(),
            labels: Vec::new(),
            domains: Vec::new(),
            input_dim,
            num_domains,
        };
        for s in samples {
            batch.features.extend_from_slice(&s.features);
            batch.labels.push(s.label);
            batch.domains.push(s.domain);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(vec![self.len(), self.input_dim], &self.features)
            .expect("features are validated at dataset construction")
    }

    /// `n × K` matrix of one-hot domain rows.
    pub fn domain_tensor<T: Scalar>(&self) -> Tensor<T> {
        let mut data = vec![T::zero(); self.len() * self.num_domains];
        for (i, &k) in self.domains.iter().enumerate() {
            data[i * self.num_domains + k] = T::one();
        }
        Tensor::new(vec![self.len(), self.num_domains], data).expect("finite")
    }
}

/// Draws `n_per_domain` samples uniformly with replacement from every domain.
pub fn sample_minibatch<R: Rng + ?Sized>(
    ds: &MultiDomainDataset,
    n_per_domain: usize,
    rng: &mut R,
) -> Result<Minibatch, DataError> {
    let mut picked = Vec::with_capacity(n_per_domain * ds.num_domains());
    for k in 0..ds.num_domains() {
        let domain = ds.domain(k);
        if domain.is_empty() {
            return Err(DataError::EmptyDomain(k));
        }
        for _ in 0..n_per_domain {
            picked.push(&domain[rng.random_range(0..domain.len())]);
        }
    }
    Ok(Minibatch::from_samples(picked, ds.input_dim(), ds.num_domains()))
}

/// Writes `domain,label,f0,f1,...` rows with 17 significant digits.
pub fn write_csv(ds: &MultiDomainDataset, path: &Path) -> Result<(), DataError> {
    let io = |e: csv::Error| DataError::Io { path: path.display().to_string(), message: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["domain".to_string(), "label".to_string()];
    header.extend((0..ds.input_dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(io)?;
    for s in ds.samples() {
        let mut row = vec![s.domain.to_string(), s.label.to_string()];
        row.extend(s.features.iter().map(|v| format!("{v:.16e}")));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()
        .map_err(|e| DataError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Reads a dataset written by [`write_csv`]. With `shape = Some((K, C))`
/// indices are range-checked against it; otherwise both are inferred from
/// the largest index seen.
pub fn load_csv(path: &Path, shape: Option<(usize, usize)>) -> Result<MultiDomainDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), message: e.to_string() })?;
    let header = reader
        .headers()
        .map_err(|e| DataError::Parse { line: 1, message: e.to_string() })?
        .clone();
    if header.len() < 3 || &header[0] != "domain" || &header[1] != "label" {
        return Err(DataError::Parse {
            line: 1,
            message: "expected header `domain,label,f0,...`".into(),
        });
    }
    let input_dim = header.len() - 2;

    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |message: String| DataError::Parse { line, message };
        if record.len() != header.len() {
            return Err(err(format!("expected {} fields, found {}", header.len(), record.len())));
        }
        let index = |i: usize, what: &str| {
            record[i]
                .trim()
                .parse::<usize>()
                .map_err(|_| err(format!("{what} `{}` is not a non-negative integer", &record[i])))
        };
        let domain = index(0, "domain")?;
        let label = index(1, "label")?;
        if let Some((k, c)) = shape {
            if domain >= k {
                return Err(err(format!("domain {domain} out of range for {k} domains")));
            }
            if label >= c {
                return Err(err(format!("label {label} out of range for {c} classes")));
            }
        }
        let mut features = Vec::with_capacity(input_dim);
        for field in record.iter().skip(2) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| err(format!("feature `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(err(format!("feature `{field}` is not finite")));
            }
            features.push(v);
        }
        rows.push((domain, label, features));
    }
    if rows.is_empty() {
        return Err(DataError::Parse { line: 1, message: "no data rows".into() });
    }

    let (num_domains, num_classes) = shape.unwrap_or_else(|| {
        let k = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
        let c = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
        (k, c.max(2))
    });
    let mut domains: Vec<Vec<Sample>> = vec![Vec::new(); num_domains];
    for (domain, label, features) in rows {
        let index = domains[domain].len();
        domains[domain].push(Sample { features, label, domain, origin: Provenance { domain, index } });
    }
    MultiDomainDataset::new(domains, num_classes, input_dim)
}

/// Machine-readable record of how a dataset was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub num_domains: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub counts: CountMatrix,
    pub sigma2_class: f64,
    pub sigma2_domain: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub profile: Option<ImbalanceProfile>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub meta_pool: Option<MetaPool>,
}
