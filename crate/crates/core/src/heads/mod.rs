//! Classification heads over frozen embeddings: prototype and text-anchor
//! cosine scoring, a trainable linear probe, a residual bottleneck adapter,
//! and an InfoNCE-trained projection head.
//!
//! Prototype and text-anchor heads share one scoring path: both are a pair
//! of unit class vectors, so swapping them changes inputs only.

mod adapter;
mod optim;
mod probe;
mod projection;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::{ClassLabel, EmbeddingMatrix};

pub use adapter::{train_adapter, BottleneckAdapter};
pub use probe::{bce_gradient, bce_loss, predict_probe, train_linear_probe, LinearProbe};
pub use projection::{infonce_loss, train_projection_head, ProjectionHead};

#[derive(Debug, Error)]
pub enum HeadsError {
    #[error("no rows labeled {0}")]
    MissingClass(ClassLabel),
    #[error("vector has zero norm")]
    DegenerateVector,
    #[error("class mean has zero norm")]
    DegenerateMean,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("training requires both classes present")]
    SingleClass,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("labels length {labels} does not match row count {rows}")]
    LabelAlignment { labels: usize, rows: usize },
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: u32 },
    #[error("adapter rank {rank} out of range 1..={dim}")]
    InvalidRank { rank: usize, dim: usize },
    #[error("similarity matrix of length {len} is not {b}x{b}")]
    NonSquare { len: usize, b: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("InfoNCE needs a batch of at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

/// Shared optimizer/training hyperparameters.
///
/// `batch_size = None` trains full-batch, which keeps runs deterministic and
/// is the default for the small training sets this toolkit targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// InfoNCE softmax temperature; unused by BCE heads.
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            batch_size: None,
            temperature: 0.07,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), HeadsError> {
        if self.epochs == 0 {
            return Err(HeadsError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(HeadsError::InvalidConfig(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(HeadsError::InvalidConfig(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == Some(0) {
            return Err(HeadsError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(HeadsError::InvalidTemperature(self.temperature));
        }
        Ok(())
    }
}

/// A unit vector per class. Both prototype sets and text anchors reduce to
/// this, so cosine scoring is one function over either.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAnchors {
    pub tumor: Vec<f64>,
    pub normal: Vec<f64>,
}

impl ClassAnchors {
    /// Normalizes both vectors to unit norm; rejects zero vectors and
    /// mismatched dimensions.
    pub fn new(tumor: Vec<f64>, normal: Vec<f64>) -> Result<Self, HeadsError> {
        if tumor.len() != normal.len() {
            return Err(HeadsError::DimMismatch {
                expected: tumor.len(),
                got: normal.len(),
            });
        }
        Ok(Self {
            tumor: normalize(tumor)?,
            normal: normalize(normal)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.tumor.len()
    }

    pub fn anchor(&self, class: ClassLabel) -> &[f64] {
        match class {
            ClassLabel::Tumor => &self.tumor,
            ClassLabel::Normal => &self.normal,
        }
    }

    /// Cosine between the two class anchors.
    pub fn inter_class_cosine(&self) -> f64 {
        dot(&self.tumor, &self.normal).clamp(-1.0, 1.0)
    }
}

/// Per-class mean embeddings, normalized after averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub anchors: ClassAnchors,
}

/// Where a text anchor pair came from; the encoder is opaque here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorProvenance {
    pub prompt: String,
    pub encoder: String,
}

/// Precomputed text embeddings for the two classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextAnchorSet {
    pub anchors: ClassAnchors,
    pub provenance: AnchorProvenance,
}

impl TextAnchorSet {
    pub fn new(
        tumor: Vec<f64>,
        normal: Vec<f64>,
        provenance: AnchorProvenance,
    ) -> Result<Self, HeadsError> {
        Ok(Self {
            anchors: ClassAnchors::new(tumor, normal)?,
            provenance,
        })
    }
}

/// Builds class prototypes as the arithmetic mean of each class's rows,
/// then L2-normalizes. Deterministic; order of rows does not matter beyond
/// floating-point summation order, which is fixed by the matrix layout.
pub fn build_prototypes(
    m: &EmbeddingMatrix,
    labels: &[ClassLabel],
) -> Result<PrototypeSet, HeadsError> {
    if labels.len() != m.rows() {
        return Err(HeadsError::LabelAlignment {
            labels: labels.len(),
            rows: m.rows(),
        });
    }
    let mean_for = |class: ClassLabel| -> Result<Vec<f64>, HeadsError> {
        let mut sum = vec![0.0; m.dim()];
        let mut count = 0usize;
        for (row, &label) in m.iter_rows().zip(labels) {
            if label == class {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(HeadsError::MissingClass(class));
        }
        for s in &mut sum {
            *s /= count as f64;
        }
        Ok(sum)
    };
    let tumor = mean_for(ClassLabel::Tumor)?;
    let normal = mean_for(ClassLabel::Normal)?;
    let anchors = ClassAnchors::new(tumor, normal).map_err(|e| match e {
        HeadsError::DegenerateVector => HeadsError::DegenerateMean,
        other => other,
    })?;
    Ok(PrototypeSet { anchors })
}

/// Per-class cosine scores for one embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub tumor: f64,
    pub normal: f64,
}

impl ClassScores {
    /// Ranking score: s_tumor - s_normal.
    pub fn margin(&self) -> f64 {
        self.tumor - self.normal
    }

    /// Argmax class; a tie goes to tumor so that `margin >= 0` and the
    /// prediction agree.
    pub fn predicted(&self) -> ClassLabel {
        if self.tumor >= self.normal {
            ClassLabel::Tumor
        } else {
            ClassLabel::Normal
        }
    }
}

/// s_c = v_hat . anchor_c for both classes. Scale-invariant in `v`.
pub fn cosine_scores(v: &[f64], anchors: &ClassAnchors) -> Result<ClassScores, HeadsError> {
    if v.len() != anchors.dim() {
        return Err(HeadsError::DimMismatch {
            expected: anchors.dim(),
            got: v.len(),
        });
    }
    let norm = norm(v);
    if norm == 0.0 {
        return Err(HeadsError::DegenerateVector);
    }
    Ok(ClassScores {
        tumor: dot(v, &anchors.tumor) / norm,
        normal: dot(v, &anchors.normal) / norm,
    })
}

/// Any serializable head, tagged for replayable experiment artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClassifierHead {
    Prototype(PrototypeSet),
    TextAnchor(TextAnchorSet),
    LinearProbe(LinearProbe),
    Adapter(BottleneckAdapter),
    Projection(ProjectionHead),
}

/// Writes a head as pretty JSON.
pub fn save_head(path: &std::path::Path, head: &ClassifierHead) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(head).expect("heads serialize");
    std::fs::write(path, json)
}

pub fn load_head(path: &std::path::Path) -> std::io::Result<ClassifierHead> {
    let json = std::fs::read_to_string(path)?;
    serde_json::from_str(&json).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub(crate) fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>, HeadsError> {
    let n = norm(&v);
    if n == 0.0 {
        return Err(HeadsError::DegenerateVector);
    }
    for x in &mut v {
        *x /= n;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::{Normal, Tumor};

    #[test]
    fn prototypes_from_two_vector_mean() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]])
            .unwrap();
        let set = build_prototypes(&m, &[Tumor, Tumor, Normal]).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((set.anchors.tumor[0] - s).abs() < 1e-12);
        assert!((set.anchors.tumor[1] - s).abs() < 1e-12);
        assert_eq!(set.anchors.normal, vec![-1.0, 0.0]);
    }

    #[test]
    fn prototype_single_row_normalizes() {
        let m = EmbeddingMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, -3.0]]).unwrap();
        let set = build_prototypes(&m, &[Tumor, Normal]).unwrap();
        assert_eq!(set.anchors.tumor, vec![1.0, 0.0]);
        assert_eq!(set.anchors.normal, vec![0.0, -1.0]);
    }

    #[test]
    fn prototypes_need_both_classes() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        match build_prototypes(&m, &[Tumor]) {
            Err(HeadsError::MissingClass(Normal)) => {}
            other => panic!("expected missing normal class, got {other:?}"),
        }
    }

    #[test]
    fn prototypes_reject_zero_mean() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]])
            .unwrap();
        match build_prototypes(&m, &[Tumor, Tumor, Normal]) {
            Err(HeadsError::DegenerateMean) => {}
            other => panic!("expected degenerate mean, got {other:?}"),
        }
    }

    #[test]
    fn scores_self_similarity() {
        let anchors = ClassAnchors::new(vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        let s = cosine_scores(&[0.0, 1.0], &anchors).unwrap();
        assert_eq!(s.tumor, 1.0);
        assert_eq!(s.normal, 0.0);
        assert_eq!(s.margin(), 1.0);
        assert_eq!(s.predicted(), Tumor);
    }

    #[test]
    fn scores_scale_invariant() {
        let anchors = ClassAnchors::new(vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        let a = cosine_scores(&[1.0, 2.0], &anchors).unwrap();
        let b = cosine_scores(&[5.0, 10.0], &anchors).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scores_direct_dot_products() {
        let anchors = ClassAnchors::new(vec![0.0, 1.0], vec![-1.0, 0.0]).unwrap();
        let s = cosine_scores(&[1.0, 0.0], &anchors).unwrap();
        assert_eq!(s.tumor, 0.0);
        assert_eq!(s.normal, -1.0);
        assert_eq!(s.predicted(), Tumor);
        assert_eq!(s.margin(), 1.0);
    }

    #[test]
    fn scores_reject_zero_vector_and_dim_mismatch() {
        let anchors = ClassAnchors::new(vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            cosine_scores(&[0.0, 0.0], &anchors),
            Err(HeadsError::DegenerateVector)
        ));
        assert!(matches!(
            cosine_scores(&[1.0], &anchors),
            Err(HeadsError::DimMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn anchors_normalize_inputs() {
        let anchors = ClassAnchors::new(vec![3.0, 4.0], vec![0.0, 2.0]).unwrap();
        assert_eq!(anchors.tumor, vec![0.6, 0.8]);
        assert_eq!(anchors.normal, vec![0.0, 1.0]);
    }

    #[test]
    fn prototype_and_text_anchor_share_the_scoring_path() {
        let anchors = ClassAnchors::new(vec![2.0, 0.0], vec![0.0, 5.0]).unwrap();
        let prototype = PrototypeSet { anchors: anchors.clone() };
        let text = TextAnchorSet {
            anchors,
            provenance: AnchorProvenance {
                prompt: "tumor / normal".into(),
                encoder: "clip".into(),
            },
        };
        let v = [0.7, -0.3];
        let from_proto = cosine_scores(&v, &prototype.anchors).unwrap();
        let from_text = cosine_scores(&v, &text.anchors).unwrap();
        assert_eq!(from_proto, from_text);
    }

    #[test]
    fn heads_save_and_load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.json");
        let head = ClassifierHead::LinearProbe(LinearProbe {
            weights: vec![0.5, -0.25],
            bias: 0.125,
            config: TrainConfig::with_seed(3),
        });
        save_head(&path, &head).unwrap();
        assert_eq!(load_head(&path).unwrap(), head);
    }

    #[test]
    fn head_serialization_round_trip() {
        let anchors = ClassAnchors::new(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        let head = ClassifierHead::Prototype(PrototypeSet { anchors });
        let json = serde_json::to_string(&head).unwrap();
        assert!(json.contains("\"type\":\"prototype\""));
        let back: ClassifierHead = serde_json::from_str(&json).unwrap();
        assert_eq!(head, back);
    }
}
