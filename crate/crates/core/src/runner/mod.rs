//! Config-driven experiment runner: wires splits, heads, metrics, and
//! diagnostics into the same-cancer / cross-cancer / cross-species protocol.
//!
//! A run executes the full (mode x fraction x seed x eval-domain) grid.
//! Cells are independent: a failing cell records its error string and never
//! aborts siblings. Re-running with the same config and inputs reproduces
//! every number exactly, at any worker count.

mod report;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{self, CollapseReport, PromptSeparationReport};
use crate::embedstore::{
    self, ClassLabel, DatasetManifest, EmbeddingMatrix, Label, StoreError,
};
use crate::heads::{
    self, AnchorProvenance, BottleneckAdapter, ClassAnchors, HeadsError, LinearProbe,
    TextAnchorSet, TrainConfig,
};
use crate::metrics::{
    self, Aggregation, Level, MetricReport, MetricsError, ScoredPatch, SlideLabelRule,
    StabilityReport,
};

pub use report::{emit_report, ReportFormat};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] StoreError),
    #[error("head error: {0}")]
    Heads(#[from] HeadsError),
    #[error("metrics error: {0}")]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The four evaluation modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ZeroShotPrototype,
    LinearProbe,
    Adapter,
    TextAnchor,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::ZeroShotPrototype => "zero_shot_prototype",
            Mode::LinearProbe => "linear_probe",
            Mode::Adapter => "adapter",
            Mode::TextAnchor => "text_anchor",
        }
    }

    fn is_trained(self) -> bool {
        matches!(self, Mode::LinearProbe | Mode::Adapter)
    }
}

/// A dataset reference: an EMB1 path (with its sidecar manifest) plus
/// optional row filters by domain tag and slide ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slides: Option<Vec<String>>,
}

/// Evaluation slots named after the transfer settings they probe.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSlots {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub same_cancer: Option<DatasetRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_cancer: Option<DatasetRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_species: Option<DatasetRef>,
}

impl EvalSlots {
    fn iter(&self) -> impl Iterator<Item = (&'static str, &DatasetRef)> {
        [
            ("same_cancer", self.same_cancer.as_ref()),
            ("cross_cancer", self.cross_cancer.as_ref()),
            ("cross_species", self.cross_species.as_ref()),
        ]
        .into_iter()
        .filter_map(|(name, slot)| slot.map(|s| (name, s)))
    }
}

fn default_collapse_threshold() -> f64 {
    diagnostics::COLLAPSE_THRESHOLD
}

fn default_stability_bound() -> f64 {
    0.005
}

fn default_aggregations() -> Vec<Aggregation> {
    vec![Aggregation::Mean, Aggregation::Max, Aggregation::Top5Pct]
}

/// Full experiment description, read from a single JSON document and echoed
/// verbatim into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub train: DatasetRef,
    #[serde(default)]
    pub eval: EvalSlots,
    /// Few-shot fractions of the training pool; empty means the full pool.
    #[serde(default)]
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_aggregations")]
    pub aggregations: Vec<Aggregation>,
    #[serde(default)]
    pub train_config: TrainConfig,
    /// Bottleneck rank for adapter mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_rank: Option<usize>,
    /// Two-row EMB1 file (row 0 tumor, row 1 normal) for text-anchor mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_provenance: Option<AnchorProvenance>,
    /// Operating threshold; defaults to 0.5 on probabilities and 0 on margins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub slide_label_rule: SlideLabelRule,
    #[serde(default = "default_collapse_threshold")]
    pub collapse_threshold: f64,
    #[serde(default = "default_stability_bound")]
    pub stability_bound: f64,
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self, RunnerError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(json).map_err(|e| RunnerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.seeds.is_empty() {
            return Err(RunnerError::Config("at least one seed is required".into()));
        }
        for f in &self.fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(RunnerError::Config(format!(
                    "fraction {f} outside (0, 1]"
                )));
            }
        }
        if self.mode == Mode::TextAnchor && self.anchors.is_none() {
            return Err(RunnerError::Config(
                "text_anchor mode requires an anchors file".into(),
            ));
        }
        if self.mode == Mode::Adapter && self.adapter_rank == Some(0) {
            return Err(RunnerError::Config("adapter_rank must be >= 1".into()));
        }
        self.train_config
            .validate()
            .map_err(|e| RunnerError::Config(e.to_string()))?;
        Ok(())
    }
}

/// One grid cell: the evaluation of one head on one eval dataset at one
/// level/aggregation. Failed cells carry an error string instead of metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    pub seed: u64,
    pub domain: String,
    pub level: Level,
    pub aggregation: Aggregation,
    pub training_samples: usize,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Cell {
    /// Table-style method label, e.g. `linear_probe_1pct`.
    pub fn method(&self) -> String {
        match self.fraction {
            Some(f) => format!("{}_{}", self.mode.name(), fraction_tag(f)),
            None => self.mode.name().to_string(),
        }
    }
}

fn fraction_tag(f: f64) -> String {
    let pct = f * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}pct", pct.round() as i64)
    } else {
        format!("{pct:.2}pct")
    }
}

/// Per-condition seed stability: the same cell key with the seed dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionStability {
    pub condition: String,
    pub auc_by_seed: Vec<f64>,
    pub report: StabilityReport,
}

/// Everything a run produced, replayable from the echoed config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub cells: Vec<Cell>,
    pub collapse: CollapseReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_separation: Option<PromptSeparationReport>,
    pub stability: Vec<ConditionStability>,
    pub wall_clock_seconds: f64,
    pub version: String,
}

impl RunReport {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

struct LoadedDataset {
    name: String,
    matrix: EmbeddingMatrix,
    manifest: DatasetManifest,
    /// Row indices surviving the DatasetRef filters.
    indices: Vec<usize>,
}

fn load_dataset(name: &str, dataset: &DatasetRef) -> Result<LoadedDataset, RunnerError> {
    let (matrix, manifest) = embedstore::load_embeddings(&dataset.path)?;
    let mut indices: Vec<usize> = (0..manifest.len()).collect();
    if let Some(domain) = &dataset.domain {
        indices.retain(|&i| &manifest.record(i).domain == domain);
    }
    if let Some(slides) = &dataset.slides {
        let wanted: BTreeSet<&str> = slides.iter().map(|s| s.as_str()).collect();
        let known = manifest.slide_ids();
        let missing: Vec<String> = slides
            .iter()
            .filter(|s| !known.contains(*s))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(RunnerError::Data(StoreError::UnknownSlides(missing)));
        }
        indices.retain(|&i| wanted.contains(manifest.record(i).slide_id.as_str()));
    }
    if indices.is_empty() {
        return Err(RunnerError::Config(format!(
            "dataset {name} ({}) has no rows after filters",
            dataset.path.display()
        )));
    }
    Ok(LoadedDataset {
        name: name.to_string(),
        matrix,
        manifest,
        indices,
    })
}

/// Labeled training rows (unlabeled rows are not usable for supervision).
fn labeled_rows(data: &LoadedDataset) -> (Vec<usize>, Vec<Label>) {
    let labels = data.manifest.labels();
    let rows: Vec<usize> = data
        .indices
        .iter()
        .copied()
        .filter(|&i| labels[i] != Label::Unlabeled)
        .collect();
    (rows, labels)
}

enum Head {
    Anchors(ClassAnchors),
    Probe(Box<LinearProbe>),
    Adapter(Box<BottleneckAdapter>),
}

impl Head {
    /// Default operating threshold: 0 on margins, 0.5 on probabilities.
    fn default_threshold(&self) -> f64 {
        match self {
            Head::Anchors(_) => 0.0,
            _ => 0.5,
        }
    }

    fn score(&self, row: &[f64]) -> Result<f64, HeadsError> {
        match self {
            Head::Anchors(anchors) => Ok(heads::cosine_scores(row, anchors)?.margin()),
            Head::Probe(probe) => heads::predict_probe(probe, row),
            Head::Adapter(adapter) => adapter.predict(row),
        }
    }
}

struct Job {
    fraction: Option<f64>,
    seed: u64,
}

fn train_job_head(
    cfg: &ExperimentConfig,
    train: &LoadedDataset,
    anchors: Option<&TextAnchorSet>,
    job: &Job,
) -> Result<(Head, usize), RunnerError> {
    let (pool, labels) = labeled_rows(train);
    match cfg.mode {
        Mode::ZeroShotPrototype => {
            let class_labels: Vec<ClassLabel> = pool
                .iter()
                .map(|&i| labels[i].as_class().expect("pool is labeled"))
                .collect();
            let rows = train.matrix.select_rows(&pool);
            let protos = heads::build_prototypes(&rows, &class_labels)?;
            Ok((Head::Anchors(protos.anchors), 0))
        }
        Mode::TextAnchor => {
            let set = anchors.expect("validated for text_anchor mode");
            Ok((Head::Anchors(set.anchors.clone()), 0))
        }
        Mode::LinearProbe | Mode::Adapter => {
            if pool.is_empty() {
                return Err(RunnerError::Config(
                    "training pool has no labeled rows".into(),
                ));
            }
            let selected = match job.fraction {
                Some(f) => embedstore::fraction_sample(&pool, Some(&labels), f, job.seed)?,
                None => pool.clone(),
            };
            let class_labels: Vec<ClassLabel> = selected
                .iter()
                .map(|&i| labels[i].as_class().expect("pool is labeled"))
                .collect();
            let rows = train.matrix.select_rows(&selected);
            let train_config = TrainConfig {
                seed: job.seed,
                ..cfg.train_config.clone()
            };
            let samples = selected.len();
            let head = match cfg.mode {
                Mode::LinearProbe => Head::Probe(Box::new(heads::train_linear_probe(
                    &rows,
                    &class_labels,
                    &train_config,
                )?)),
                Mode::Adapter => Head::Adapter(Box::new(heads::train_adapter(
                    &rows,
                    &class_labels,
                    cfg.adapter_rank.unwrap_or(8),
                    &train_config,
                )?)),
                _ => unreachable!(),
            };
            Ok((head, samples))
        }
    }
}

fn score_dataset(head: &Head, data: &LoadedDataset) -> Result<Vec<ScoredPatch>, RunnerError> {
    let mut scored = Vec::new();
    for &i in &data.indices {
        let record = data.manifest.record(i);
        let Some(class) = record.label.as_class() else {
            continue;
        };
        let score = head.score(data.matrix.row(i))?;
        scored.push(ScoredPatch::new(score, class, record.slide_id.clone()));
    }
    if scored.is_empty() {
        return Err(RunnerError::Config(format!(
            "dataset {} has no labeled rows to score",
            data.name
        )));
    }
    Ok(scored)
}

fn evaluate_job(
    cfg: &ExperimentConfig,
    train: &LoadedDataset,
    evals: &[LoadedDataset],
    anchors: Option<&TextAnchorSet>,
    job: &Job,
) -> Vec<Cell> {
    let mut cells = Vec::new();
    let mut push_cell =
        |domain: &str, level: Level, agg: Aggregation, samples: usize, threshold: f64,
         outcome: Result<MetricReport, String>| {
            let (metrics, error) = match outcome {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(e)),
            };
            cells.push(Cell {
                mode: cfg.mode,
                fraction: job.fraction,
                seed: job.seed,
                domain: domain.to_string(),
                level,
                aggregation: agg,
                training_samples: samples,
                threshold,
                metrics,
                error,
            });
        };

    let head = match train_job_head(cfg, train, anchors, job) {
        Ok(h) => h,
        Err(e) => {
            // Training failed: every dependent cell reports the same error.
            let msg = e.to_string();
            for eval in evals {
                push_cell(&eval.name, Level::Patch, Aggregation::None, 0, 0.0, Err(msg.clone()));
                for &agg in &cfg.aggregations {
                    push_cell(&eval.name, Level::Slide, agg, 0, 0.0, Err(msg.clone()));
                }
            }
            return cells;
        }
    };
    let (head, samples) = head;
    let threshold = cfg.threshold.unwrap_or_else(|| head.default_threshold());

    for eval in evals {
        match score_dataset(&head, eval) {
            Ok(scored) => {
                push_cell(
                    &eval.name,
                    Level::Patch,
                    Aggregation::None,
                    samples,
                    threshold,
                    MetricReport::from_scores(&scored, threshold, Level::Patch, Aggregation::None)
                        .map_err(|e| e.to_string()),
                );
                for &agg in &cfg.aggregations {
                    let outcome = metrics::aggregate_slide(&scored, agg, cfg.slide_label_rule)
                        .map_err(|e| e.to_string())
                        .and_then(|slides| {
                            let items: Vec<ScoredPatch> =
                                slides.iter().map(|s| s.as_scored_patch()).collect();
                            MetricReport::from_scores(&items, threshold, Level::Slide, agg)
                                .map_err(|e| e.to_string())
                        });
                    push_cell(&eval.name, Level::Slide, agg, samples, threshold, outcome);
                }
            }
            Err(e) => {
                let msg = e.to_string();
                push_cell(&eval.name, Level::Patch, Aggregation::None, samples, threshold, Err(msg.clone()));
                for &agg in &cfg.aggregations {
                    push_cell(&eval.name, Level::Slide, agg, samples, threshold, Err(msg.clone()));
                }
            }
        }
    }
    cells
}

fn load_anchor_set(cfg: &ExperimentConfig) -> Result<Option<TextAnchorSet>, RunnerError> {
    let Some(path) = &cfg.anchors else {
        return Ok(None);
    };
    let matrix = embedstore::read_matrix(path)?;
    if matrix.rows() != 2 {
        return Err(RunnerError::Config(format!(
            "anchor file {} must hold exactly 2 rows (tumor, normal), got {}",
            path.display(),
            matrix.rows()
        )));
    }
    let provenance = cfg.anchor_provenance.clone().unwrap_or(AnchorProvenance {
        prompt: "unspecified".into(),
        encoder: "unspecified".into(),
    });
    let set = TextAnchorSet::new(matrix.row(0).to_vec(), matrix.row(1).to_vec(), provenance)?;
    Ok(Some(set))
}

/// Per-domain tumor/normal prototype similarity over every dataset in the
/// run (train first, then eval slots). Domains without both classes are
/// skipped.
fn collapse_diagnostics(
    threshold: f64,
    datasets: &[&LoadedDataset],
) -> CollapseReport {
    let mut report = CollapseReport::new(threshold);
    for data in datasets {
        let (pool, labels) = labeled_rows(data);
        if pool.is_empty() {
            continue;
        }
        let class_labels: Vec<ClassLabel> = pool
            .iter()
            .map(|&i| labels[i].as_class().expect("pool is labeled"))
            .collect();
        let rows = data.matrix.select_rows(&pool);
        if let Ok(protos) = heads::build_prototypes(&rows, &class_labels) {
            if let Ok(sim) = diagnostics::cosine(&protos.anchors.tumor, &protos.anchors.normal) {
                report.push(data.name.clone(), sim);
            }
        }
    }
    report
}

/// Runs the full grid. `threads` sizes the worker pool (0 = library
/// default); results are identical at any worker count.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<RunReport, RunnerError> {
    cfg.validate()?;
    let started = std::time::Instant::now();

    let train = load_dataset("train", &cfg.train)?;
    let mut evals = Vec::new();
    for (name, dataset) in cfg.eval.iter() {
        evals.push(load_dataset(name, dataset)?);
    }
    if evals.is_empty() {
        return Err(RunnerError::Config("no eval datasets configured".into()));
    }
    let anchors = load_anchor_set(cfg)?;
    if cfg.mode == Mode::TextAnchor {
        let set = anchors.as_ref().expect("validated");
        if set.anchors.dim() != train.matrix.dim() {
            return Err(RunnerError::Config(format!(
                "anchor dim {} does not match embedding dim {}",
                set.anchors.dim(),
                train.matrix.dim()
            )));
        }
    }

    let fractions: Vec<Option<f64>> = if cfg.mode.is_trained() && !cfg.fractions.is_empty() {
        cfg.fractions.iter().copied().map(Some).collect()
    } else {
        vec![None]
    };
    let mut jobs = Vec::new();
    for &fraction in &fractions {
        for &seed in &cfg.seeds {
            jobs.push(Job { fraction, seed });
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| RunnerError::Config(format!("thread pool: {e}")))?;
    let mut cells: Vec<Cell> = pool.install(|| {
        jobs.par_iter()
            .map(|job| evaluate_job(cfg, &train, &evals, anchors.as_ref(), job))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    });
    cells.sort_by(|a, b| {
        let key = |c: &Cell| {
            (
                domain_order(&c.domain),
                c.level,
                c.aggregation,
                c.fraction.map(|f| (f * 1e9) as u64),
                c.seed,
            )
        };
        key(a).cmp(&key(b))
    });

    // Seed-stability per condition (everything but the seed).
    let mut stability = Vec::new();
    let mut by_condition: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for cell in &cells {
        if let Some(m) = &cell.metrics {
            let condition = format!(
                "{}|{}|{}|{}",
                cell.method(),
                cell.domain,
                cell.level.name(),
                cell.aggregation.name()
            );
            by_condition.entry(condition).or_default().push(m.auc);
        }
    }
    for (condition, aucs) in by_condition {
        if let Ok(report) = metrics::seed_stability(&aucs, cfg.stability_bound) {
            stability.push(ConditionStability {
                condition,
                auc_by_seed: aucs,
                report,
            });
        }
    }

    let mut diag_sets: Vec<&LoadedDataset> = vec![&train];
    diag_sets.extend(evals.iter());
    let collapse = collapse_diagnostics(cfg.collapse_threshold, &diag_sets);
    let prompt_separation = anchors
        .as_ref()
        .map(diagnostics::prompt_separation)
        .transpose()
        .map_err(|e| RunnerError::Config(format!("prompt separation: {e}")))?;

    Ok(RunReport {
        config: cfg.clone(),
        cells,
        collapse,
        prompt_separation,
        stability,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

fn domain_order(domain: &str) -> u8 {
    match domain {
        "same_cancer" => 0,
        "cross_cancer" => 1,
        "cross_species" => 2,
        _ => 3,
    }
}

/// Convenience wrapper: parse, run, and emit in one call.
pub fn run_from_json(
    json: &str,
    threads: usize,
    out_dir: &Path,
    format: ReportFormat,
) -> Result<(RunReport, PathBuf), RunnerError> {
    let cfg = ExperimentConfig::from_json(json)?;
    let report = run_experiment(&cfg, threads)?;
    let path = emit_report(&report, format, out_dir)?;
    Ok((report, path))
}
