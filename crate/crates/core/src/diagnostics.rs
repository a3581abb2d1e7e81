//! Embedding-space health checks: prototype similarity matrices, collapse
//! flags, per-dimension feature importance, prompt-separation banding, and
//! Pearson correlation between importance vectors or saliency maps.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::embedstore::{ClassLabel, EmbeddingMatrix};
use crate::heads::TextAnchorSet;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("need at least {needed} entries, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("duplicate prototype key ({domain}, {class})")]
    DuplicateKey { domain: String, class: ClassLabel },
    #[error("correlation is undefined on constant input")]
    ConstantInput,
    #[error("similarity must lie in [-1, 1], got {0}")]
    SimilarityOutOfRange(f64),
    #[error("labels length {labels} does not match row count {rows}")]
    LabelAlignment { labels: usize, rows: usize },
    #[error("need at least 2 rows per class, got {tumor} tumor / {normal} normal")]
    TooFewPerClass { tumor: usize, normal: usize },
    #[error("saliency map shapes differ: {a_h}x{a_w} vs {b_h}x{b_w}")]
    ShapeMismatch {
        a_h: usize,
        a_w: usize,
        b_h: usize,
        b_w: usize,
    },
    #[error("saliency map of {h}x{w} needs {expected} values, got {got}")]
    BadGrid {
        h: usize,
        w: usize,
        expected: usize,
        got: usize,
    },
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, DiagnosticsError> {
    if u.len() != v.len() {
        return Err(DiagnosticsError::DimMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(DiagnosticsError::ZeroVector);
    }
    // Single sqrt over the product keeps self-similarity exactly 1.0.
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

/// A (domain, class) prototype for cross-domain comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPrototype {
    pub domain: String,
    pub class: ClassLabel,
    pub vector: Vec<f64>,
}

/// Symmetric cosine matrix over labeled (domain, class) prototypes with a
/// unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub labels: Vec<(String, ClassLabel)>,
    /// n x n, row-major; exactly symmetric.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    /// Long-form CSV: row label, column label, value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,cosine\n");
        for i in 0..self.n() {
            for j in 0..self.n() {
                let (rd, rc) = &self.labels[i];
                let (cd, cc) = &self.labels[j];
                out.push_str(&format!(
                    "{rd}/{rc},{cd}/{cc},{}\n",
                    crate::metrics::format_fixed4(self.get(i, j))
                ));
            }
        }
        out
    }
}

/// Full pairwise cosine matrix. The upper triangle is computed once and
/// mirrored, so symmetry is exact; the diagonal is exactly one.
pub fn prototype_similarity_matrix(
    prototypes: &[DomainPrototype],
) -> Result<SimilarityMatrix, DiagnosticsError> {
    if prototypes.len() < 2 {
        return Err(DiagnosticsError::TooFew {
            needed: 2,
            got: prototypes.len(),
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    for p in prototypes {
        if !seen.insert((p.domain.clone(), p.class)) {
            return Err(DiagnosticsError::DuplicateKey {
                domain: p.domain.clone(),
                class: p.class,
            });
        }
    }
    let n = prototypes.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let c = cosine(&prototypes[i].vector, &prototypes[j].vector)?;
            values[i * n + j] = c;
            values[j * n + i] = c;
        }
    }
    Ok(SimilarityMatrix {
        labels: prototypes
            .iter()
            .map(|p| (p.domain.clone(), p.class))
            .collect(),
        values,
    })
}

/// One domain's tumor-normal prototype similarity versus the collapse
/// threshold. `collapsed` holds exactly when `similarity >= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseEntry {
    pub domain: String,
    pub similarity: f64,
    pub collapsed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub threshold: f64,
    pub entries: Vec<CollapseEntry>,
}

impl CollapseReport {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, domain: impl Into<String>, similarity: f64) {
        self.entries.push(CollapseEntry {
            domain: domain.into(),
            similarity,
            collapsed: detect_collapse(similarity, self.threshold),
        });
    }
}

/// Default collapse threshold on tumor-normal prototype cosine.
pub const COLLAPSE_THRESHOLD: f64 = 0.99;

/// Inclusive boundary: a similarity exactly at the threshold counts as
/// collapsed.
pub fn detect_collapse(similarity: f64, threshold: f64) -> bool {
    similarity >= threshold
}

/// Per-dimension standardized class separation:
/// |mean_tumor - mean_normal| / pooled_std, with the pooled standard
/// deviation floored at 1e-12. Label-symmetric and shift-invariant.
pub fn feature_importance(
    m: &EmbeddingMatrix,
    labels: &[ClassLabel],
) -> Result<Vec<f64>, DiagnosticsError> {
    if labels.len() != m.rows() {
        return Err(DiagnosticsError::LabelAlignment {
            labels: labels.len(),
            rows: m.rows(),
        });
    }
    let n_tumor = labels.iter().filter(|&&l| l == ClassLabel::Tumor).count();
    let n_normal = labels.len() - n_tumor;
    if n_tumor < 2 || n_normal < 2 {
        return Err(DiagnosticsError::TooFewPerClass {
            tumor: n_tumor,
            normal: n_normal,
        });
    }
    let d = m.dim();
    let mut mean_t = vec![0.0; d];
    let mut mean_n = vec![0.0; d];
    for (row, &label) in m.iter_rows().zip(labels) {
        let target = if label == ClassLabel::Tumor {
            &mut mean_t
        } else {
            &mut mean_n
        };
        for (acc, v) in target.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean_t.iter_mut().for_each(|v| *v /= n_tumor as f64);
    mean_n.iter_mut().for_each(|v| *v /= n_normal as f64);

    let mut ss_t = vec![0.0; d];
    let mut ss_n = vec![0.0; d];
    for (row, &label) in m.iter_rows().zip(labels) {
        let (mean, ss) = if label == ClassLabel::Tumor {
            (&mean_t, &mut ss_t)
        } else {
            (&mean_n, &mut ss_n)
        };
        for ((acc, v), mu) in ss.iter_mut().zip(row).zip(mean) {
            let diff = v - mu;
            *acc += diff * diff;
        }
    }
    let dof = (n_tumor + n_normal - 2) as f64;
    Ok((0..d)
        .map(|k| {
            let pooled = ((ss_t[k] + ss_n[k]) / dof).sqrt().max(1e-12);
            (mean_t[k] - mean_n[k]).abs() / pooled
        })
        .collect())
}

/// Qualitative strength of a correlation coefficient, following the
/// interpretation used for cross-domain feature-importance tables: |r| below
/// 0.40 is weak, up to 0.46 moderate-weak, and anything at or above 0.46 is
/// treated as moderate or stronger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationBand {
    Weak,
    ModerateWeak,
    ModerateOrStronger,
}

impl CorrelationBand {
    pub fn from_r(r: f64) -> Self {
        let a = r.abs();
        if a < 0.40 {
            CorrelationBand::Weak
        } else if a < 0.46 {
            CorrelationBand::ModerateWeak
        } else {
            CorrelationBand::ModerateOrStronger
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    pub r: f64,
    pub p_value: f64,
    pub band: CorrelationBand,
}

/// Sample Pearson correlation with a two-tailed p-value from the exact
/// t-distribution: p = I_x(nu/2, 1/2) with x = nu / (nu + t^2),
/// t = r sqrt((n-2) / (1-r^2)), nu = n - 2.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<PearsonResult, DiagnosticsError> {
    if x.len() != y.len() {
        return Err(DiagnosticsError::DimMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(DiagnosticsError::TooFew {
            needed: 3,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(DiagnosticsError::ConstantInput);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let nu = n - 2.0;
    let one_minus_r2 = (1.0 - r * r).max(0.0);
    let p_value = if one_minus_r2 == 0.0 {
        0.0
    } else {
        let t2 = r * r * nu / one_minus_r2;
        beta_reg(nu / 2.0, 0.5, nu / (nu + t2))
    };
    Ok(PearsonResult {
        r,
        p_value,
        band: CorrelationBand::from_r(r),
    })
}

/// A saliency grid supplied by an external attribution tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, DiagnosticsError> {
        if data.len() != height * width {
            return Err(DiagnosticsError::BadGrid {
                h: height,
                w: width,
                expected: height * width,
                got: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }
}

/// Pearson correlation of two equally shaped saliency grids, flattened.
pub fn saliency_correlation(
    a: &SaliencyMap,
    b: &SaliencyMap,
) -> Result<PearsonResult, DiagnosticsError> {
    if a.height != b.height || a.width != b.width {
        return Err(DiagnosticsError::ShapeMismatch {
            a_h: a.height,
            a_w: a.width,
            b_h: b.height,
            b_w: b.width,
        });
    }
    pearson_r(&a.data, &b.data)
}

/// Qualitative separation of a text-anchor pair by inter-class cosine.
/// Cut points partition [-1, 1] with no gaps: [0.7, 1] collapsed,
/// [0.2, 0.7) weak, (-0.5, 0.2) separated, [-1, -0.5] near-maximal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationBand {
    Collapsed,
    Weak,
    Separated,
    NearMaximal,
}

impl SeparationBand {
    pub fn from_cosine(c: f64) -> Self {
        if c >= 0.7 {
            SeparationBand::Collapsed
        } else if c >= 0.2 {
            SeparationBand::Weak
        } else if c > -0.5 {
            SeparationBand::Separated
        } else {
            SeparationBand::NearMaximal
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSeparationReport {
    pub inter_class_cosine: f64,
    pub band: SeparationBand,
    /// What was measured; anchor similarity conventions vary, so the report
    /// says explicitly.
    pub note: String,
}

/// Inter-class cosine between the tumor and normal anchors plus its band.
pub fn prompt_separation(anchors: &TextAnchorSet) -> Result<PromptSeparationReport, DiagnosticsError> {
    let c = cosine(&anchors.anchors.tumor, &anchors.anchors.normal)?;
    Ok(PromptSeparationReport {
        inter_class_cosine: c,
        band: SeparationBand::from_cosine(c),
        note: format!(
            "cosine between the tumor and normal anchor vectors (encoder: {})",
            anchors.provenance.encoder
        ),
    })
}
