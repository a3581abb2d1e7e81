//! Command-line front end: synthetic data generation, slide-level splits,
//! experiment runs, embedding diagnostics, report conversion, and the
//! pixel-side preprocessing utilities.
//!
//! Exit codes: 0 success, 1 config error, 2 data error, 3 partial cell
//! failures (the report is still written).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pathshift::diagnostics::{
    self, CollapseReport, DomainPrototype, PearsonResult, PromptSeparationReport, SaliencyMap,
    SimilarityMatrix,
};
use pathshift::embedstore::{
    self, load_embeddings, read_matrix, save_embeddings, write_matrix, ClassLabel,
    EmbeddingMatrix, Label, SplitSpec,
};
use pathshift::heads::{build_prototypes, AnchorProvenance, TextAnchorSet};
use pathshift::preprocess::{
    default_reference, macenko_apply, macenko_fit, otsu_threshold, plan_patches,
    resize_bilinear_aa, rgb_to_od, BinaryMask, GrayHistogram, MacenkoParams, RGBPatch,
    ReferenceStain, StainFit,
};
use pathshift::runner::{
    emit_report, run_experiment, DatasetRef, ExperimentConfig, ReportFormat, RunReport,
    RunnerError,
};
use pathshift::synth::{generate_synthetic, SynthConfig};

#[derive(Parser)]
#[command(name = "pathshift", version, about = "Cross-domain transfer evaluation for frozen pathology embeddings")]
struct Cli {
    /// JSON config for the chosen subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Seed override (synth: generator seed; eval: replaces the seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the experiment grid (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Report format.
    #[arg(long, global = true, default_value = "json")]
    format: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain embedding dataset with ground-truth
    /// axes and class-axis anchors.
    Synth,
    /// Partition a manifest into train/test indices by slide membership.
    Split,
    /// Run the configured experiment grid and write the report.
    Eval,
    /// Embedding-space diagnostics: prototype similarity, collapse flags,
    /// importance correlations, prompt separation, saliency correlation.
    Diagnose,
    /// Convert an existing JSON run report to another format.
    Report {
        /// Path to a report.json produced by `eval`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Plan strided patches over a tissue mask (or an Otsu-thresholded
    /// thumbnail) and emit JSON Lines.
    PreprocessPlan {
        /// Binary tissue mask PNG (nonzero = tissue) at thumbnail scale.
        #[arg(long, conflicts_with = "thumbnail")]
        mask: Option<PathBuf>,
        /// Grayscale thumbnail PNG; tissue = pixels at or below the Otsu
        /// threshold.
        #[arg(long)]
        thumbnail: Option<PathBuf>,
        #[arg(long)]
        slide_id: String,
        #[arg(long)]
        slide_width: u32,
        #[arg(long)]
        slide_height: u32,
        /// Downsample factor between slide and mask/thumbnail.
        #[arg(long)]
        downsample: u32,
        #[arg(long, default_value_t = 1024)]
        patch_size: u32,
        #[arg(long, default_value_t = 2048)]
        stride: u32,
        #[arg(long, default_value_t = 0.5)]
        min_tissue: f64,
    },
    /// Macenko-normalize a patch against a reference basis, optionally
    /// downscaling afterwards (normalize-then-resize).
    StainNormalize {
        /// Input patch PNG.
        #[arg(long)]
        input: PathBuf,
        /// Reference stain JSON {"h":[..],"e":[..],"max_c":[..]}; built-in
        /// H&E reference when omitted.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Output width and height, e.g. --resize 336 336.
        #[arg(long, num_args = 2, value_names = ["WIDTH", "HEIGHT"])]
        resize: Option<Vec<u32>>,
    },
}

/// Failures classified for the exit-code contract.
enum Failure {
    Config(String),
    Data(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) => m,
        }
    }
}

impl From<RunnerError> for Failure {
    fn from(e: RunnerError) -> Self {
        match e {
            RunnerError::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<embedstore::StoreError> for Failure {
    fn from(e: embedstore::StoreError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(
                e.kind(),
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion
            ) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match &cli.command {
        Command::Synth => cmd_synth(&cli),
        Command::Split => cmd_split(&cli),
        Command::Eval => cmd_eval(&cli),
        Command::Diagnose => cmd_diagnose(&cli),
        Command::Report { input } => cmd_report(&cli, input),
        Command::PreprocessPlan {
            mask,
            thumbnail,
            slide_id,
            slide_width,
            slide_height,
            downsample,
            patch_size,
            stride,
            min_tissue,
        } => cmd_preprocess_plan(
            &cli,
            mask.as_deref(),
            thumbnail.as_deref(),
            slide_id,
            (*slide_width, *slide_height),
            *downsample,
            *patch_size,
            *stride,
            *min_tissue,
        ),
        Command::StainNormalize {
            input,
            reference,
            resize,
        } => cmd_stain_normalize(&cli, input, reference.as_deref(), resize.as_deref()),
    }
}

fn require_config(cli: &Cli) -> Result<String, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("--config PATH is required".into()))?;
    std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))
}

fn parse_config<T: serde::de::DeserializeOwned>(json: &str) -> Result<T, Failure> {
    serde_json::from_str(json).map_err(|e| Failure::Config(format!("invalid config: {e}")))
}

fn report_format(cli: &Cli) -> Result<ReportFormat, Failure> {
    cli.format.parse().map_err(Failure::Config)
}

fn cmd_synth(cli: &Cli) -> Result<u8, Failure> {
    let mut cfg: SynthConfig = parse_config(&require_config(cli)?)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let data =
        generate_synthetic(&cfg).map_err(|e| Failure::Config(e.to_string()))?;
    std::fs::create_dir_all(&cli.out)?;

    let emb = cli.out.join("embeddings.emb1");
    save_embeddings(&emb, &data.matrix, &data.manifest)?;

    let anchors = data.axes.class_anchors();
    let anchor_matrix = EmbeddingMatrix::from_rows(&[
        anchors.anchors.tumor.clone(),
        anchors.anchors.normal.clone(),
    ])
    .map_err(|e| Failure::Data(e.to_string()))?;
    write_matrix(&cli.out.join("anchors.emb1"), &anchor_matrix)?;

    let axes_json = serde_json::to_string_pretty(&data.axes).expect("axes serialize");
    std::fs::write(cli.out.join("axes.json"), axes_json)?;

    println!(
        "wrote {} ({} rows x {} dims), anchors.emb1, axes.json",
        emb.display(),
        data.matrix.rows(),
        data.matrix.dim()
    );
    Ok(0)
}

#[derive(Debug, Deserialize)]
struct SplitConfig {
    embeddings: PathBuf,
    train_slides: Vec<String>,
}

fn cmd_split(cli: &Cli) -> Result<u8, Failure> {
    let cfg: SplitConfig = parse_config(&require_config(cli)?)?;
    let (_, manifest) = load_embeddings(&cfg.embeddings)?;
    let train: BTreeSet<String> = cfg.train_slides.into_iter().collect();
    let split: SplitSpec = embedstore::slide_level_split(&manifest, &train)?;
    std::fs::create_dir_all(&cli.out)?;
    let path = cli.out.join("split.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&split).expect("splits serialize"),
    )?;
    println!(
        "wrote {} ({} train / {} test rows)",
        path.display(),
        split.train_indices.len(),
        split.test_indices.len()
    );
    Ok(0)
}

fn cmd_eval(cli: &Cli) -> Result<u8, Failure> {
    let mut cfg = ExperimentConfig::from_json(&require_config(cli)?)
        .map_err(Failure::from)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    let report = run_experiment(&cfg, cli.threads)?;
    std::fs::create_dir_all(&cli.out)?;
    let path = emit_report(&report, report_format(cli)?, &cli.out)?;
    let failed = report.failed_cells();
    println!(
        "wrote {} ({} cells, {} failed)",
        path.display(),
        report.cells.len(),
        failed
    );
    Ok(if failed > 0 { 3 } else { 0 })
}

#[derive(Debug, Deserialize)]
struct DiagnoseDataset {
    name: String,
    #[serde(flatten)]
    dataset: DatasetRef,
}

#[derive(Debug, Deserialize)]
struct SaliencyRef {
    path: PathBuf,
}

#[derive(Debug, Deserialize)]
struct DiagnoseConfig {
    datasets: Vec<DiagnoseDataset>,
    #[serde(default = "default_collapse_threshold")]
    collapse_threshold: f64,
    #[serde(default)]
    anchors: Option<PathBuf>,
    #[serde(default)]
    anchor_provenance: Option<AnchorProvenance>,
    #[serde(default)]
    saliency_a: Option<SaliencyRef>,
    #[serde(default)]
    saliency_b: Option<SaliencyRef>,
}

fn default_collapse_threshold() -> f64 {
    diagnostics::COLLAPSE_THRESHOLD
}

#[derive(Debug, Serialize)]
struct ImportanceCorrelation {
    pair: (String, String),
    result: PearsonResult,
}

#[derive(Debug, Serialize)]
struct DiagnoseReport {
    similarity: SimilarityMatrix,
    collapse: CollapseReport,
    importance_correlations: Vec<ImportanceCorrelation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt_separation: Option<PromptSeparationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    saliency_correlation: Option<PearsonResult>,
}

/// Loads an EMB1 matrix reinterpreted as an H x W grid via its JSON shape
/// sidecar (`foo.emb1` -> `foo.shape.json`, `{"height": H, "width": W}`).
fn load_saliency(path: &Path) -> Result<SaliencyMap, Failure> {
    #[derive(Deserialize)]
    struct Shape {
        height: usize,
        width: usize,
    }
    let matrix = read_matrix(path)?;
    let sidecar = path.with_extension("shape.json");
    let shape: Shape = serde_json::from_str(
        &std::fs::read_to_string(&sidecar)
            .map_err(|e| Failure::Data(format!("missing shape sidecar {}: {e}", sidecar.display())))?,
    )
    .map_err(|e| Failure::Config(format!("bad shape sidecar: {e}")))?;
    SaliencyMap::new(shape.height, shape.width, matrix.values().to_vec())
        .map_err(|e| Failure::Data(e.to_string()))
}

fn labeled_class_rows(
    matrix: &EmbeddingMatrix,
    labels: &[Label],
    indices: &[usize],
) -> (EmbeddingMatrix, Vec<ClassLabel>) {
    let keep: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| labels[i] != Label::Unlabeled)
        .collect();
    let classes = keep
        .iter()
        .map(|&i| labels[i].as_class().expect("filtered"))
        .collect();
    (matrix.select_rows(&keep), classes)
}

fn cmd_diagnose(cli: &Cli) -> Result<u8, Failure> {
    let cfg: DiagnoseConfig = parse_config(&require_config(cli)?)?;
    if cfg.datasets.is_empty() {
        return Err(Failure::Config("diagnose needs at least one dataset".into()));
    }

    let mut prototypes = Vec::new();
    let mut importances: Vec<(String, Vec<f64>)> = Vec::new();
    let mut collapse = CollapseReport::new(cfg.collapse_threshold);
    for entry in &cfg.datasets {
        let (matrix, manifest) = load_embeddings(&entry.dataset.path)?;
        let mut indices: Vec<usize> = (0..manifest.len()).collect();
        if let Some(domain) = &entry.dataset.domain {
            indices.retain(|&i| &manifest.record(i).domain == domain);
        }
        if let Some(slides) = &entry.dataset.slides {
            let wanted: BTreeSet<&str> = slides.iter().map(|s| s.as_str()).collect();
            indices.retain(|&i| wanted.contains(manifest.record(i).slide_id.as_str()));
        }
        let labels = manifest.labels();
        let (rows, classes) = labeled_class_rows(&matrix, &labels, &indices);
        let protos = build_prototypes(&rows, &classes)
            .map_err(|e| Failure::Data(format!("dataset {}: {e}", entry.name)))?;
        let sim = diagnostics::cosine(&protos.anchors.tumor, &protos.anchors.normal)
            .map_err(|e| Failure::Data(e.to_string()))?;
        collapse.push(entry.name.clone(), sim);
        prototypes.push(DomainPrototype {
            domain: entry.name.clone(),
            class: ClassLabel::Tumor,
            vector: protos.anchors.tumor.clone(),
        });
        prototypes.push(DomainPrototype {
            domain: entry.name.clone(),
            class: ClassLabel::Normal,
            vector: protos.anchors.normal.clone(),
        });
        match diagnostics::feature_importance(&rows, &classes) {
            Ok(vector) => importances.push((entry.name.clone(), vector)),
            Err(e) => eprintln!(
                "note: skipping feature importance for {}: {e}",
                entry.name
            ),
        }
    }

    let similarity = diagnostics::prototype_similarity_matrix(&prototypes)
        .map_err(|e| Failure::Data(e.to_string()))?;

    let mut importance_correlations = Vec::new();
    for i in 0..importances.len() {
        for j in (i + 1)..importances.len() {
            match diagnostics::pearson_r(&importances[i].1, &importances[j].1) {
                Ok(result) => importance_correlations.push(ImportanceCorrelation {
                    pair: (importances[i].0.clone(), importances[j].0.clone()),
                    result,
                }),
                Err(e) => eprintln!(
                    "note: skipping importance correlation {} vs {}: {e}",
                    importances[i].0, importances[j].0
                ),
            }
        }
    }

    let prompt_separation = match &cfg.anchors {
        Some(path) => {
            let matrix = read_matrix(path)?;
            if matrix.rows() != 2 {
                return Err(Failure::Config(format!(
                    "anchor file must hold exactly 2 rows, got {}",
                    matrix.rows()
                )));
            }
            let provenance = cfg.anchor_provenance.clone().unwrap_or(AnchorProvenance {
                prompt: "unspecified".into(),
                encoder: "unspecified".into(),
            });
            let set = TextAnchorSet::new(
                matrix.row(0).to_vec(),
                matrix.row(1).to_vec(),
                provenance,
            )
            .map_err(|e| Failure::Data(e.to_string()))?;
            Some(
                diagnostics::prompt_separation(&set)
                    .map_err(|e| Failure::Data(e.to_string()))?,
            )
        }
        None => None,
    };

    let saliency_correlation = match (&cfg.saliency_a, &cfg.saliency_b) {
        (Some(a), Some(b)) => {
            let map_a = load_saliency(&a.path)?;
            let map_b = load_saliency(&b.path)?;
            Some(
                diagnostics::saliency_correlation(&map_a, &map_b)
                    .map_err(|e| Failure::Data(e.to_string()))?,
            )
        }
        (None, None) => None,
        _ => {
            return Err(Failure::Config(
                "saliency correlation needs both saliency_a and saliency_b".into(),
            ))
        }
    };

    let report = DiagnoseReport {
        similarity,
        collapse,
        importance_correlations,
        prompt_separation,
        saliency_correlation,
    };
    std::fs::create_dir_all(&cli.out)?;
    std::fs::write(
        cli.out.join("diagnostics.json"),
        serde_json::to_string_pretty(&report).expect("diagnostics serialize"),
    )?;
    std::fs::write(cli.out.join("similarity.csv"), report.similarity.to_csv())?;
    println!(
        "wrote diagnostics.json and similarity.csv ({} prototypes)",
        report.similarity.n()
    );
    Ok(0)
}

fn cmd_report(cli: &Cli, input: &Path) -> Result<u8, Failure> {
    let json = std::fs::read_to_string(input)
        .map_err(|e| Failure::Data(format!("cannot read {}: {e}", input.display())))?;
    let report = RunReport::from_json(&json).map_err(|_| {
        Failure::Config(format!("{} is not a run report", input.display()))
    })?;
    std::fs::create_dir_all(&cli.out)?;
    let path = emit_report(&report, report_format(cli)?, &cli.out)?;
    println!("wrote {}", path.display());
    Ok(0)
}

fn load_png_rgb(path: &Path) -> Result<RGBPatch, Failure> {
    let img = image::open(path)
        .map_err(|e| Failure::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    RGBPatch::new(
        img.width() as usize,
        img.height() as usize,
        img.into_raw(),
    )
    .map_err(|e| Failure::Data(e.to_string()))
}

fn save_png_rgb(path: &Path, patch: &RGBPatch) -> Result<(), Failure> {
    let img = image::RgbImage::from_raw(
        patch.width() as u32,
        patch.height() as u32,
        patch.data().to_vec(),
    )
    .expect("buffer matches dimensions");
    img.save(path)
        .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn cmd_preprocess_plan(
    cli: &Cli,
    mask_path: Option<&Path>,
    thumbnail_path: Option<&Path>,
    slide_id: &str,
    slide_dims: (u32, u32),
    downsample: u32,
    patch_size: u32,
    stride: u32,
    min_tissue: f64,
) -> Result<u8, Failure> {
    let mask = match (mask_path, thumbnail_path) {
        (Some(path), None) => {
            let img = image::open(path)
                .map_err(|e| Failure::Data(format!("cannot decode {}: {e}", path.display())))?
                .to_luma8();
            let data: Vec<bool> = img.as_raw().iter().map(|&v| v > 0).collect();
            BinaryMask::new(img.width() as usize, img.height() as usize, data)
                .map_err(|e| Failure::Data(e.to_string()))?
        }
        (None, Some(path)) => {
            let img = image::open(path)
                .map_err(|e| Failure::Data(format!("cannot decode {}: {e}", path.display())))?
                .to_luma8();
            let histogram = GrayHistogram::from_gray_pixels(img.as_raw());
            let threshold =
                otsu_threshold(&histogram).map_err(|e| Failure::Data(e.to_string()))?;
            // Tissue is darker than the white slide background.
            let data: Vec<bool> = img.as_raw().iter().map(|&v| v <= threshold).collect();
            println!("otsu threshold: {threshold}");
            BinaryMask::new(img.width() as usize, img.height() as usize, data)
                .map_err(|e| Failure::Data(e.to_string()))?
        }
        _ => {
            return Err(Failure::Config(
                "provide exactly one of --mask or --thumbnail".into(),
            ))
        }
    };

    let plan = plan_patches(&mask, slide_dims, downsample, patch_size, stride, min_tissue)
        .map_err(|e| Failure::Config(e.to_string()))?;
    std::fs::create_dir_all(&cli.out)?;
    let path = cli.out.join("plan.jsonl");
    std::fs::write(&path, plan.to_jsonl(slide_id))?;
    println!("wrote {} ({} patches)", path.display(), plan.coords.len());
    Ok(0)
}

#[derive(Debug, Serialize)]
struct StainReport {
    order: &'static str,
    fitted: StainFit,
    reference: StainFit,
    output: PathBuf,
}

fn cmd_stain_normalize(
    cli: &Cli,
    input: &Path,
    reference_path: Option<&Path>,
    resize: Option<&[u32]>,
) -> Result<u8, Failure> {
    let patch = load_png_rgb(input)?;
    let params = MacenkoParams::default();
    let reference = match reference_path {
        Some(path) => {
            let json = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            let parsed: ReferenceStain = serde_json::from_str(&json)
                .map_err(|e| Failure::Config(format!("bad reference stain: {e}")))?;
            parsed.to_fit().map_err(|e| Failure::Config(e.to_string()))?
        }
        None => default_reference(),
    };
    let od = rgb_to_od(&patch, params.i0, params.eps);
    let fitted = macenko_fit(&od, &params).map_err(|e| Failure::Data(e.to_string()))?;
    let mut normalized =
        macenko_apply(&patch, &fitted, &reference, &params).map_err(|e| Failure::Data(e.to_string()))?;
    if let Some(dims) = resize {
        normalized = resize_bilinear_aa(&normalized, dims[0] as usize, dims[1] as usize)
            .map_err(|e| Failure::Config(e.to_string()))?;
    }

    std::fs::create_dir_all(&cli.out)?;
    let out_png = cli.out.join("normalized.png");
    save_png_rgb(&out_png, &normalized)?;
    let report = StainReport {
        order: "normalize_then_resize",
        fitted,
        reference,
        output: out_png.clone(),
    };
    std::fs::write(
        cli.out.join("stain_report.json"),
        serde_json::to_string_pretty(&report).expect("stain report serializes"),
    )?;
    println!("wrote {} and stain_report.json", out_png.display());
    Ok(0)
}
