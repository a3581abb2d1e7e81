//! Embedding/manifest data model, on-disk formats, and dataset splitting.
//!
//! An [`EmbeddingMatrix`] holds one embedding row per patch; a
//! [`DatasetManifest`] carries the index-aligned metadata (slide, label,
//! domain, coordinates). Splitting is slide-level to prevent leakage, and
//! few-shot subsets are drawn with [`fraction_sample`].

mod format;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{
    load_embeddings, manifest_path_for, read_manifest, read_matrix, save_embeddings,
    write_manifest, write_matrix, EMB1_MAGIC, EMB1_VERSION,
};

/// Errors raised by the embedding store.
#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad embedding file: {0}")]
    Format(String),
    #[error("truncated embedding payload: expected {expected} bytes, got {got}")]
    Truncation { expected: u64, got: u64 },
    #[error("manifest has {records} records but matrix has {rows} rows")]
    Alignment { records: usize, rows: usize },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("duplicate patch_id {0:?} in manifest")]
    DuplicatePatchId(String),
    #[error("missing sidecar manifest {0}")]
    MissingManifest(std::path::PathBuf),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("matrix dimension must be >= 1")]
    ZeroDim,
    #[error("value buffer length {len} is not a multiple of dim {dim}")]
    RaggedRows { len: usize, dim: usize },
    #[error("row {0} has zero norm and cannot be normalized")]
    DegenerateRow(usize),
    #[error("train slides not present in manifest: {0:?}")]
    UnknownSlides(Vec<String>),
    #[error("cannot sample from an empty index set")]
    EmptyIndexSet,
    #[error("fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("label slice is shorter than the largest index ({index})")]
    LabelIndexOutOfRange { index: usize },
}

/// Per-patch class annotation as it appears in manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Tumor,
    Normal,
    Unlabeled,
}

impl Label {
    /// The binary class, if this label carries one.
    pub fn as_class(self) -> Option<ClassLabel> {
        match self {
            Label::Tumor => Some(ClassLabel::Tumor),
            Label::Normal => Some(ClassLabel::Normal),
            Label::Unlabeled => None,
        }
    }
}

/// Binary class used by heads and metrics. Tumor encodes as 1, normal as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Tumor,
    Normal,
}

impl ClassLabel {
    /// Regression target for training: tumor = 1.0, normal = 0.0.
    pub fn target(self) -> f64 {
        match self {
            ClassLabel::Tumor => 1.0,
            ClassLabel::Normal => 0.0,
        }
    }

    pub fn other(self) -> ClassLabel {
        match self {
            ClassLabel::Tumor => ClassLabel::Normal,
            ClassLabel::Normal => ClassLabel::Tumor,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Tumor => "tumor",
            ClassLabel::Normal => "normal",
        }
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// N x D row-major matrix of patch embeddings.
///
/// Values are stored as `f64` in memory; the on-disk payload is IEEE-754
/// `f32`, so saving quantizes to single precision. All values are finite by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    values: Vec<f64>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from a row-major value buffer.
    pub fn from_vec(dim: usize, values: Vec<f64>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        if values.len() % dim != 0 {
            return Err(StoreError::RaggedRows {
                len: values.len(),
                dim,
            });
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(StoreError::NonFinite {
                    row: i / dim,
                    col: i % dim,
                });
            }
        }
        Ok(Self { dim, values })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, StoreError> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(1);
        let mut values = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(StoreError::RaggedRows {
                    len: row.len(),
                    dim,
                });
            }
            values.extend_from_slice(row);
        }
        Self::from_vec(dim, values)
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    /// New matrix containing the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            dim: self.dim,
            values,
        }
    }
}

/// Metadata for a single patch; line `i` of a manifest describes matrix row `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub slide_id: String,
    pub label: Label,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<u32>,
}

/// Ordered patch records, index-aligned with an [`EmbeddingMatrix`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<PatchRecord>,
}

impl DatasetManifest {
    /// Validates patch_id uniqueness.
    pub fn new(records: Vec<PatchRecord>) -> Result<Self, StoreError> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.patch_id.as_str()) {
                return Err(StoreError::DuplicatePatchId(r.patch_id.clone()));
            }
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &PatchRecord {
        &self.records[i]
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// All distinct slide ids, sorted.
    pub fn slide_ids(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.slide_id.clone()).collect()
    }

    /// Record indices grouped by slide id, sorted by slide.
    pub fn indices_by_slide(&self) -> BTreeMap<String, Vec<usize>> {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.slide_id.clone()).or_default().push(i);
        }
        map
    }

    /// Indices whose record matches the given domain tag.
    pub fn indices_for_domain(&self, domain: &str) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.domain == domain)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Disjoint train/test row indices. No slide appears on both sides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Normalizes every row to unit Euclidean norm.
///
/// Rows with zero norm are rejected rather than silently passed through:
/// cosine similarity is undefined on them.
pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix, StoreError> {
    let mut values = Vec::with_capacity(m.values.len());
    for (i, row) in m.iter_rows().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(StoreError::DegenerateRow(i));
        }
        values.extend(row.iter().map(|v| v / norm));
    }
    EmbeddingMatrix::from_vec(m.dim, values)
}

/// Partitions manifest indices by slide membership.
///
/// Train side holds exactly the indices whose slide is in `train_slides`;
/// everything else goes to the test side.
pub fn slide_level_split(
    manifest: &DatasetManifest,
    train_slides: &BTreeSet<String>,
) -> Result<SplitSpec, StoreError> {
    let known = manifest.slide_ids();
    let unknown: Vec<String> = train_slides.difference(&known).cloned().collect();
    if !unknown.is_empty() {
        return Err(StoreError::UnknownSlides(unknown));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if train_slides.contains(&r.slide_id) {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    Ok(SplitSpec {
        train_indices: train,
        test_indices: test,
    })
}

/// Draws `max(1, floor(fraction * n))` indices uniformly without replacement.
///
/// Deterministic for a fixed `(indices, fraction, seed)`. When `labels` are
/// supplied the draw is stratified: each class present gets at least one
/// index and roughly its proportional share, with any shortfall filled from
/// the largest class. The total count is exact regardless of stratification.
pub fn fraction_sample(
    indices: &[usize],
    labels: Option<&[Label]>,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>, StoreError> {
    if indices.is_empty() {
        return Err(StoreError::EmptyIndexSet);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(StoreError::InvalidFraction(fraction));
    }
    let k = sample_count(indices.len(), fraction);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let strata = match labels {
        Some(labels) => {
            if let Some(&max) = indices.iter().max() {
                if max >= labels.len() {
                    return Err(StoreError::LabelIndexOutOfRange { index: max });
                }
            }
            let mut by_label: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
            for &i in indices {
                by_label.entry(labels[i]).or_default().push(i);
            }
            by_label.into_values().collect::<Vec<_>>()
        }
        None => vec![indices.to_vec()],
    };

    let quotas = stratum_quotas(&strata, fraction, k);
    let mut picked = Vec::with_capacity(k);
    for (stratum, quota) in strata.into_iter().zip(quotas) {
        picked.extend(sample_without_replacement(stratum, quota, &mut rng));
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Floor rule with a minimum of one sample.
pub fn sample_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).floor() as usize).max(1)
}

/// Per-stratum quotas: proportional floor, bumped to one per present class,
/// then adjusted so the total is exactly `k`.
fn stratum_quotas(strata: &[Vec<usize>], fraction: f64, k: usize) -> Vec<usize> {
    let mut quotas: Vec<usize> = strata
        .iter()
        .map(|s| ((fraction * s.len() as f64).floor() as usize).min(s.len()).max(1))
        .collect();
    // Order strata by descending size for deterministic top-up/trim.
    let mut order: Vec<usize> = (0..strata.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(strata[i].len()));
    let total = |q: &[usize]| q.iter().sum::<usize>();
    // Shortfall is filled from the largest class first.
    let mut cursor = 0;
    while total(&quotas) < k {
        let i = order[cursor % order.len()];
        if quotas[i] < strata[i].len() {
            quotas[i] += 1;
        }
        cursor += 1;
        if cursor > order.len() * (k + 1) {
            break;
        }
    }
    // Excess (k smaller than the per-class minimums) is trimmed from the
    // largest quota, never below one unless k < number of strata.
    while total(&quotas) > k {
        let trimmable = order
            .iter()
            .copied()
            .filter(|&i| quotas[i] > 1)
            .max_by_key(|&i| quotas[i]);
        match trimmable {
            Some(i) => quotas[i] -= 1,
            None => {
                for &i in order.iter().rev() {
                    if quotas[i] > 0 && total(&quotas) > k {
                        quotas[i] -= 1;
                    }
                }
            }
        }
    }
    quotas
}

/// Partial Fisher-Yates: the first `k` entries after seeded swaps.
fn sample_without_replacement(mut pool: Vec<usize>, k: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    pool.sort_unstable();
    let k = k.min(pool.len());
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
