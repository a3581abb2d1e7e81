//! Patch- and slide-level evaluation: rank-based AUC-ROC, thresholded
//! confusion metrics, slide aggregation strategies, and seed stability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::ClassLabel;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("AUC is undefined without both classes present")]
    SingleClassAuc,
    #[error("score at position {0} is not finite")]
    NonFiniteScore(usize),
    #[error("slide group {0:?} is empty")]
    EmptySlideGroup(String),
    #[error("cannot summarize an empty list")]
    EmptyList,
    #[error("no items to evaluate")]
    NoItems,
}

/// One scored, labeled patch (or slide, after aggregation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPatch {
    pub score: f64,
    pub label: ClassLabel,
    pub slide_id: String,
}

impl ScoredPatch {
    pub fn new(score: f64, label: ClassLabel, slide_id: impl Into<String>) -> Self {
        Self {
            score,
            label,
            slide_id: slide_id.into(),
        }
    }
}

/// AUC-ROC as the Mann-Whitney statistic: the probability that a random
/// tumor outscores a random normal, ties counted half. Computed via sorted
/// mid-ranks in O(n log n).
pub fn auc_roc(items: &[ScoredPatch]) -> Result<f64, MetricsError> {
    for (i, item) in items.iter().enumerate() {
        if !item.score.is_finite() {
            return Err(MetricsError::NonFiniteScore(i));
        }
    }
    let n_pos = items.iter().filter(|i| i.label == ClassLabel::Tumor).count();
    let n_neg = items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClassAuc);
    }

    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].score.total_cmp(&items[b].score));

    // Mid-ranks over tie groups, 1-indexed.
    let n = items.len();
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && items[order[j]].score == items[order[i]].score {
            j += 1;
        }
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if items[idx].label == ClassLabel::Tumor {
                rank_sum_pos += mid_rank;
            }
        }
        i = j;
    }

    let np = n_pos as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * n_neg as f64))
}

/// Threshold-dependent tallies. Prediction rule: tumor iff score >= t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }
}

pub fn confusion_at_threshold(items: &[ScoredPatch], t: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for item in items {
        let predicted_tumor = item.score >= t;
        match (predicted_tumor, item.label) {
            (true, ClassLabel::Tumor) => c.true_positives += 1,
            (true, ClassLabel::Normal) => c.false_positives += 1,
            (false, ClassLabel::Normal) => c.true_negatives += 1,
            (false, ClassLabel::Tumor) => c.false_negatives += 1,
        }
    }
    c
}

/// Precision/recall/F1/accuracy with the 0/0 = 0 convention.
///
/// Any degenerate ratio is reported as 0 and flips the `degenerate` flag
/// instead of producing NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub degenerate: bool,
}

pub fn prf_metrics(c: &ConfusionCounts) -> PrfMetrics {
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| -> f64 {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.true_positives, c.true_positives + c.false_positives);
    let recall = ratio(c.true_positives, c.true_positives + c.false_negatives);
    let accuracy = ratio(c.true_positives + c.true_negatives, c.total());
    let f1 = if precision + recall == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrfMetrics {
        precision,
        recall,
        f1,
        accuracy,
        degenerate,
    }
}

/// Evaluation granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Patch,
    Slide,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Patch => "patch",
            Level::Slide => "slide",
        }
    }
}

/// How patch scores become a slide score. `None` marks unaggregated
/// patch-level reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    None,
    Mean,
    Max,
    Top5Pct,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::None => "none",
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
            Aggregation::Top5Pct => "top5pct",
        }
    }
}

/// How a slide inherits a label from its patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlideLabelRule {
    /// Tumor if any patch is tumor.
    #[default]
    AnyTumor,
    /// Tumor if strictly more tumor than normal patches.
    MajorityTumor,
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub level: Level,
    pub aggregation: Aggregation,
    pub degenerate: bool,
}

impl MetricReport {
    /// AUC plus thresholded metrics over the given items.
    pub fn from_scores(
        items: &[ScoredPatch],
        threshold: f64,
        level: Level,
        aggregation: Aggregation,
    ) -> Result<Self, MetricsError> {
        if items.is_empty() {
            return Err(MetricsError::NoItems);
        }
        let auc = auc_roc(items)?;
        let prf = prf_metrics(&confusion_at_threshold(items, threshold));
        Ok(Self {
            auc,
            accuracy: prf.accuracy,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            level,
            aggregation,
            degenerate: prf.degenerate,
        })
    }

    /// CSV fragment in results-table column order:
    /// method, training_samples, auc, precision, recall, f1.
    pub fn csv_row(&self, method: &str, training_samples: usize) -> String {
        format!(
            "{method},{training_samples},{},{},{},{}",
            format_fixed4(self.auc),
            format_fixed4(self.precision),
            format_fixed4(self.recall),
            format_fixed4(self.f1)
        )
    }
}

/// Renders with 4 decimal places; Rust's formatter rounds ties to even.
pub fn format_fixed4(v: f64) -> String {
    format!("{v:.4}")
}

/// A slide-level score produced by aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideScore {
    pub slide_id: String,
    pub score: f64,
    pub label: ClassLabel,
}

impl SlideScore {
    pub fn as_scored_patch(&self) -> ScoredPatch {
        ScoredPatch::new(self.score, self.label, self.slide_id.clone())
    }
}

/// Collapses patch scores into one score per slide, sorted by slide id.
///
/// `top5pct` averages the k = max(1, floor(0.05 * n)) largest scores.
pub fn aggregate_slide(
    items: &[ScoredPatch],
    strategy: Aggregation,
    rule: SlideLabelRule,
) -> Result<Vec<SlideScore>, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::NoItems);
    }
    let mut groups: BTreeMap<&str, Vec<&ScoredPatch>> = BTreeMap::new();
    for item in items {
        groups.entry(item.slide_id.as_str()).or_default().push(item);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (slide_id, group) in groups {
        if group.is_empty() {
            return Err(MetricsError::EmptySlideGroup(slide_id.to_string()));
        }
        let mut scores: Vec<f64> = group.iter().map(|p| p.score).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let score = match strategy {
            Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
            Aggregation::Max => scores[0],
            Aggregation::Top5Pct => {
                let k = top_fraction_count(scores.len(), 0.05);
                scores[..k].iter().sum::<f64>() / k as f64
            }
            Aggregation::None => {
                return Err(MetricsError::EmptySlideGroup(
                    "aggregation strategy `none` does not aggregate".into(),
                ))
            }
        };
        let tumor = group.iter().filter(|p| p.label == ClassLabel::Tumor).count();
        let normal = group.len() - tumor;
        let label = match rule {
            SlideLabelRule::AnyTumor if tumor > 0 => ClassLabel::Tumor,
            SlideLabelRule::MajorityTumor if tumor > normal => ClassLabel::Tumor,
            _ => ClassLabel::Normal,
        };
        out.push(SlideScore {
            slide_id: slide_id.to_string(),
            score,
            label,
        });
    }
    Ok(out)
}

/// k = max(1, floor(fraction * n)).
pub fn top_fraction_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).floor() as usize).clamp(1, n)
}

/// Mean and population standard deviation of repeated-run AUCs, checked
/// against a stability bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub mean: f64,
    pub std_dev: f64,
    pub bound: f64,
    pub pass: bool,
}

pub fn seed_stability(aucs: &[f64], bound: f64) -> Result<StabilityReport, MetricsError> {
    if aucs.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let n = aucs.len() as f64;
    let mean = aucs.iter().sum::<f64>() / n;
    let var = aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std_dev = var.sqrt();
    Ok(StabilityReport {
        mean,
        std_dev,
        bound,
        pass: std_dev < bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(scores: &[f64], labels: &[ClassLabel]) -> Vec<ScoredPatch> {
        scores
            .iter()
            .zip(labels)
            .map(|(&s, &l)| ScoredPatch::new(s, l, "s0"))
            .collect()
    }

    use ClassLabel::{Normal, Tumor};

    #[test]
    fn auc_perfect_separation() {
        let data = items(&[1.0, 2.0], &[Normal, Tumor]);
        assert_eq!(auc_roc(&data).unwrap(), 1.0);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let data = items(&[0.4, 0.4, 0.4, 0.4], &[Normal, Tumor, Normal, Tumor]);
        assert_eq!(auc_roc(&data).unwrap(), 0.5);
    }

    #[test]
    fn auc_matches_pairwise_count() {
        // Pairs: (0.35 vs 0.1) win, (0.35 vs 0.4) loss, (0.8 vs 0.1) win,
        // (0.8 vs 0.4) win -> 3/4.
        let data = items(&[0.1, 0.4, 0.35, 0.8], &[Normal, Normal, Tumor, Tumor]);
        assert_eq!(auc_roc(&data).unwrap(), 0.75);
    }

    #[test]
    fn auc_requires_both_classes() {
        let data = items(&[0.2, 0.4], &[Tumor, Tumor]);
        assert!(matches!(auc_roc(&data), Err(MetricsError::SingleClassAuc)));
    }

    #[test]
    fn auc_rejects_non_finite_scores() {
        let data = items(&[0.2, f64::NAN], &[Tumor, Normal]);
        assert!(matches!(auc_roc(&data), Err(MetricsError::NonFiniteScore(1))));
    }

    #[test]
    fn confusion_threshold_below_everything() {
        let data = items(&[0.2, 0.8], &[Normal, Tumor]);
        let c = confusion_at_threshold(&data, -1.0);
        assert_eq!(c.false_negatives, 0);
        assert_eq!(c.true_negatives, 0);
        assert_eq!(c.true_positives, 1);
        assert_eq!(c.false_positives, 1);
    }

    #[test]
    fn confusion_threshold_above_everything() {
        let data = items(&[0.2, 0.8], &[Normal, Tumor]);
        let c = confusion_at_threshold(&data, 2.0);
        assert_eq!(c.true_positives, 0);
        assert_eq!(c.false_positives, 0);
        assert_eq!(c.true_negatives, 1);
        assert_eq!(c.false_negatives, 1);
    }

    #[test]
    fn confusion_clean_split() {
        let data = items(&[0.2, 0.8], &[Normal, Tumor]);
        let c = confusion_at_threshold(&data, 0.5);
        assert_eq!(
            c,
            ConfusionCounts {
                true_positives: 1,
                false_positives: 0,
                true_negatives: 1,
                false_negatives: 0
            }
        );
    }

    #[test]
    fn prf_harmonic_mean() {
        let c = ConfusionCounts {
            true_positives: 1,
            false_positives: 1,
            true_negatives: 0,
            false_negatives: 0,
        };
        let m = prf_metrics(&c);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f1, 2.0 / 3.0);
        assert!(!m.degenerate);
    }

    #[test]
    fn prf_degenerate_zero_over_zero() {
        let c = ConfusionCounts {
            true_positives: 0,
            false_positives: 0,
            true_negatives: 5,
            false_negatives: 0,
        };
        let m = prf_metrics(&c);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.accuracy, 1.0);
        assert!(m.degenerate);
    }

    #[test]
    fn prf_all_correct() {
        let c = ConfusionCounts {
            true_positives: 3,
            false_positives: 0,
            true_negatives: 2,
            false_negatives: 0,
        };
        let m = prf_metrics(&c);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.accuracy, 1.0);
        assert!(!m.degenerate);
    }

    #[test]
    fn top5pct_of_hundred_scores() {
        let data: Vec<ScoredPatch> = (1..=100)
            .map(|i| ScoredPatch::new(i as f64, Tumor, "s0"))
            .collect();
        let out = aggregate_slide(&data, Aggregation::Top5Pct, SlideLabelRule::AnyTumor).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 98.0); // mean of 96..=100
    }

    #[test]
    fn top5pct_minimum_one_is_the_max() {
        let data: Vec<ScoredPatch> = (1..=10)
            .map(|i| ScoredPatch::new(i as f64, Tumor, "s0"))
            .collect();
        let out = aggregate_slide(&data, Aggregation::Top5Pct, SlideLabelRule::AnyTumor).unwrap();
        assert_eq!(out[0].score, 10.0);
    }

    #[test]
    fn constant_scores_make_strategies_agree() {
        let data: Vec<ScoredPatch> =
            (0..40).map(|_| ScoredPatch::new(0.7, Normal, "s0")).collect();
        for strategy in [Aggregation::Mean, Aggregation::Max, Aggregation::Top5Pct] {
            let out = aggregate_slide(&data, strategy, SlideLabelRule::AnyTumor).unwrap();
            // Mean accumulates rounding, so compare up to an ulp-scale slack.
            assert!((out[0].score - 0.7).abs() < 1e-12, "{strategy:?}");
        }
    }

    #[test]
    fn slide_label_rules() {
        let data = vec![
            ScoredPatch::new(0.1, Normal, "a"),
            ScoredPatch::new(0.2, Normal, "a"),
            ScoredPatch::new(0.9, Tumor, "a"),
        ];
        let any = aggregate_slide(&data, Aggregation::Mean, SlideLabelRule::AnyTumor).unwrap();
        assert_eq!(any[0].label, Tumor);
        let majority =
            aggregate_slide(&data, Aggregation::Mean, SlideLabelRule::MajorityTumor).unwrap();
        assert_eq!(majority[0].label, Normal);
    }

    #[test]
    fn csv_row_follows_table_layout() {
        let report = MetricReport {
            auc: 0.6489,
            accuracy: 0.7,
            precision: 0.7383,
            recall: 0.625,
            f1: 0.6769,
            level: Level::Patch,
            aggregation: Aggregation::None,
            degenerate: false,
        };
        assert_eq!(
            report.csv_row("zero_shot", 0),
            "zero_shot,0,0.6489,0.7383,0.6250,0.6769"
        );
    }

    #[test]
    fn stability_example_values() {
        let report = seed_stability(&[0.710, 0.712, 0.711, 0.709, 0.713], 0.005).unwrap();
        assert!((report.std_dev - 0.001414).abs() < 1e-5);
        assert!(report.pass);
    }

    #[test]
    fn stability_identical_values() {
        let report = seed_stability(&[0.7; 5], 0.005).unwrap();
        assert_eq!(report.std_dev, 0.0);
        assert!(report.pass);
    }

    #[test]
    fn stability_boundary_violation() {
        let report = seed_stability(&[0.60, 0.80], 0.005).unwrap();
        assert!((report.std_dev - 0.10).abs() < 1e-12);
        assert!(!report.pass);
    }

    #[test]
    fn stability_rejects_empty() {
        assert!(matches!(seed_stability(&[], 0.005), Err(MetricsError::EmptyList)));
    }
}
