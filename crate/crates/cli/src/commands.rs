use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use caliper_core::augmentation::{augment, AugmentConfig, AugmentFlags};
use caliper_core::checkpoint::Checkpoint;
use caliper_core::dataset::{consensus, load_manifest, GroundTruthPolicy, LoadedManifest, Manifest, Split};
use caliper_core::evaluation::{evaluate, figure_series_csv, EvalOptions, IccMode};
use caliper_core::phantom::{generate_dataset, DatasetConfig, RaterSimulation};
use caliper_core::pipeline::{
    load_predictions, prediction_sets, predict_entries, run_ablation, save_predictions, select, ABLATION_RUNS,
};
use caliper_core::training::{train, EpochMetrics, TrainConfig, TrainingData};
use caliper_core::{CaliperError, CaliperPoint, LandmarkSet, PlaneConfig, Raster};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::{CliError, CliResult};

pub const STORE_ENV: &str = "CALIPER_STORE";

#[derive(Debug, Parser)]
#[command(name = "caliper", version, about = "Caliper placement for fetal head biometry")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    PhantomGen(PhantomGenArgs),
    /// Train a model from a manifest.
    Train(TrainArgs),
    /// Predict calipers for every selected manifest entry.
    Infer(InferArgs),
    /// Score predictions against the manifest annotations.
    Eval(EvalArgs),
    /// Render one panel per augmentation effect.
    AugmentPreview(AugmentPreviewArgs),
    /// Train and evaluate the four {DA, BCS} combinations.
    Ablation(AblationArgs),
    /// Run the review HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    /// Phantoms in the train and validation splits.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    /// Output directory; receives manifest.jsonl and images/.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "TC")]
    pub plane: String,
    #[arg(long, default_value_t = caliper_core::phantom::DEFAULT_WIDTH)]
    pub width: usize,
    #[arg(long, default_value_t = caliper_core::phantom::DEFAULT_HEIGHT)]
    pub height: usize,
    /// Additional held-out phantoms in the test split.
    #[arg(long, default_value_t = 0)]
    pub test: usize,
    /// Train:validation ratio.
    #[arg(long, default_value = "88:12")]
    pub split: String,
    /// Simulated raters; 0 stores the exact ground truth only.
    #[arg(long, default_value_t = 0)]
    pub raters: usize,
    #[arg(long, default_value_t = 1.5)]
    pub rater_bias_px: f64,
    #[arg(long, default_value_t = 1.0)]
    pub rater_pass_px: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub plane: Option<String>,
    /// JSON file with any subset of the training configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path (best validation epoch).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Disable the constraint loss (alpha = 0).
    #[arg(long)]
    pub no_bcs: bool,
    /// Disable data augmentation.
    #[arg(long)]
    pub no_da: bool,
    /// Also write the final-epoch weights here.
    #[arg(long)]
    pub last: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Predictions file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict to one split; all entries otherwise.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IccModeArg {
    AllRaters,
    Consensus,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// per_rater_mean or consensus_mean.
    #[arg(long, default_value = "per_rater_mean")]
    pub policy: String,
    #[arg(long, value_enum, default_value = "all-raters")]
    pub icc_mode: IccModeArg,
    /// Restrict to one split; all entries otherwise.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also print the human-readable table to stderr.
    #[arg(long)]
    pub text: bool,
    /// CSV of the model-vs-rater and inter-rater series.
    #[arg(long)]
    pub series: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentPreviewArgs {
    /// Grayscale PNG.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Output PNG grid.
    #[arg(long)]
    pub out: PathBuf,
    /// Take landmarks from this manifest's `--subject` entry.
    #[arg(long, requires = "subject")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub subject: Option<String>,
    #[arg(long, default_value = "TC")]
    pub plane: String,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Receives one checkpoint and report per run plus the table.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Reuse a trained run: LABEL=CHECKPOINT.
    #[arg(long = "precomputed", value_parser = parse_precomputed)]
    pub precomputed: Vec<(String, PathBuf)>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Used to predict calipers for imported studies.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = STORE_ENV)]
    pub store: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Import entries of this manifest that the store does not hold yet.
    #[arg(long, requires = "checkpoint")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
}

fn parse_precomputed(s: &str) -> Result<(String, PathBuf), String> {
    let (label, path) = s.split_once('=').ok_or_else(|| format!("expected LABEL=PATH, got {s}"))?;
    if !ABLATION_RUNS.iter().any(|(l, _, _)| *l == label) {
        let known: Vec<&str> = ABLATION_RUNS.iter().map(|(l, _, _)| *l).collect();
        return Err(format!("unknown run {label}; expected one of {known:?}"));
    }
    Ok((label.to_string(), PathBuf::from(path)))
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::PhantomGen(a) => phantom_gen(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Infer(a) => infer_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::AugmentPreview(a) => augment_preview(&a),
        Command::Ablation(a) => ablation_cmd(&a),
        Command::Serve(a) => crate::server::serve(&a),
    }
}

fn parse_ratio(s: &str) -> CliResult<(u32, u32)> {
    let parsed = s
        .split_once(':')
        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
    parsed.ok_or_else(|| CliError::Usage(format!("--split expects TRAIN:VALIDATION, got {s}")))
}

pub fn phantom_gen(a: &PhantomGenArgs) -> CliResult<()> {
    let config = DatasetConfig {
        plane: a.plane.clone(),
        width: a.width,
        height: a.height,
        split_ratio: parse_ratio(&a.split)?,
        test_count: a.test,
        raters: (a.raters > 0).then_some(RaterSimulation {
            raters: a.raters,
            bias_sd_px: a.rater_bias_px,
            pass_sd_px: a.rater_pass_px,
        }),
    };
    let manifest = generate_dataset(a.n, a.seed, &config, &a.out)?;
    let count = |s| manifest.entries.iter().filter(|e| e.split == s).count();
    println!(
        "{}",
        json!({
            "manifest": a.out.join("manifest.jsonl"),
            "train": count(Split::Train),
            "validation": count(Split::Validation),
            "test": count(Split::Test),
        })
    );
    Ok(())
}

/// Loads a manifest and refuses one with invalid entries.
pub fn load_clean_manifest(path: &Path) -> CliResult<Manifest> {
    let LoadedManifest { manifest, issues } = load_manifest(path)?;
    if let Some(first) = issues.first() {
        return Err(CaliperError::Manifest(format!(
            "{} invalid entries; first: line {} ({}): {}",
            issues.len(),
            first.line,
            first.subject_id,
            first.message
        ))
        .into());
    }
    Ok(manifest)
}

/// Defaults, overlaid with the config file; explicit flags are applied on top by the caller.
pub fn load_train_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    let base = TrainConfig::default();
    let Some(p) = path else { return Ok(base) };
    let text = std::fs::read_to_string(p).map_err(|e| CaliperError::io(p, e))?;
    Ok(base.overlay_json(&text)?)
}

pub fn resolve_train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut c = load_train_config(a.config.as_deref())?;
    if let Some(p) = &a.plane {
        c.plane = p.clone();
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.learning_rate = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.base_channels {
        c.base_channels = v;
    }
    if let Some(v) = a.depth {
        c.depth = v;
    }
    if a.no_bcs {
        c.bcs = false;
    }
    if a.no_da {
        c.augmentation = AugmentFlags::none();
    }
    c.validate()?;
    Ok(c)
}

/// One JSON log line per epoch; the constraint term reads "excluded" when its weight is zero.
pub fn epoch_log(m: &EpochMetrics, config: &TrainConfig) -> Value {
    let alpha = if config.bcs { config.alpha } else { 0.0 };
    let l_bcs = if alpha == 0.0 {
        json!("excluded")
    } else {
        json!(m.train_constraint_loss)
    };
    json!({
        "epoch": m.epoch,
        "loss": m.train_loss,
        "l_h": m.train_heatmap_loss,
        "l_bcs": l_bcs,
        "alpha": alpha,
        "validation_loss": m.validation_loss,
        "validation_error_px": m.validation_error_px,
        "validation_error_mm": m.validation_error_mm,
        "validation_failures": m.validation_failures,
        "augment_rejections": m.augment_rejections,
    })
}

pub fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    let config = resolve_train_config(a)?;
    let manifest = load_clean_manifest(&a.manifest)?;
    let data = TrainingData::from_manifest(&manifest, &config)?;
    let outcome = train(&data, &config, |m| println!("{}", epoch_log(m, &config)))?;
    outcome.best.save(&a.out)?;
    if let Some(p) = &a.last {
        outcome.last.save(p)?;
    }
    println!(
        "{}",
        json!({ "checkpoint": a.out, "best_epoch": outcome.best.header.best_epoch })
    );
    Ok(())
}

pub fn infer_cmd(a: &InferArgs) -> CliResult<()> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let manifest = load_clean_manifest(&a.manifest)?;
    let entries = select(&manifest, a.split.map(Split::from));
    let records = predict_entries(&checkpoint, &manifest, &entries)?;
    save_predictions(&records, &a.out)?;
    let incomplete = records.iter().filter(|r| !r.failures.is_empty()).count();
    println!("{}", json!({ "predictions": a.out, "records": records.len(), "incomplete": incomplete }));
    Ok(())
}

pub fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let policy: GroundTruthPolicy = a.policy.parse()?;
    let options = EvalOptions {
        policy,
        icc_mode: match a.icc_mode {
            IccModeArg::AllRaters => IccMode::AllRaters,
            IccModeArg::Consensus => IccMode::Consensus,
        },
    };
    let manifest = load_clean_manifest(&a.manifest)?;
    let entries: Vec<_> = select(&manifest, a.split.map(Split::from)).into_iter().cloned().collect();
    let predictions = prediction_sets(&load_predictions(&a.pred)?)?;
    let report = evaluate(&predictions, &entries, options)?;
    report.validate()?;
    let text = report.to_json()?;
    match &a.out {
        Some(p) => std::fs::write(p, &text).map_err(|e| CaliperError::io(p, e))?,
        None => println!("{text}"),
    }
    if let Some(p) = &a.series {
        std::fs::write(p, figure_series_csv(&report)).map_err(|e| CaliperError::io(p, e))?;
    }
    if a.text {
        eprintln!("{}", report.to_text());
    }
    Ok(())
}

/// Preview panel order.
pub const PREVIEW_EFFECTS: [&str; 8] = [
    "rotation",
    "translation",
    "shear",
    "zoom",
    "speckle",
    "resolution",
    "shadow",
    "blur",
];

fn single_effect(name: &str) -> AugmentFlags {
    let mut f = AugmentFlags::none();
    match name {
        "rotation" => f.rotation = true,
        "translation" => f.translation = true,
        "shear" => f.shear = true,
        "zoom" => f.zoom = true,
        "speckle" => f.speckle = true,
        "resolution" => f.resolution = true,
        "shadow" => f.shadow = true,
        _ => f.blur = true,
    }
    f
}

pub const PREVIEW_COLUMNS: usize = 4;
pub const PREVIEW_GAP: usize = 4;

/// Eight panels, one effect each at full probability, laid out 4 x 2.
pub fn preview_grid(image: &Raster, set: &LandmarkSet, seed: u64) -> CliResult<Raster> {
    let (w, h) = (image.width(), image.height());
    let cfg = AugmentConfig {
        apply_probability: 1.0,
        ..AugmentConfig::default().scaled_for_width(w)
    };
    let rows = PREVIEW_EFFECTS.len().div_ceil(PREVIEW_COLUMNS);
    let gw = PREVIEW_COLUMNS * w + (PREVIEW_COLUMNS - 1) * PREVIEW_GAP;
    let gh = rows * h + (rows - 1) * PREVIEW_GAP;
    let mut grid = Raster::filled(gw, gh, 1.0);
    for (i, name) in PREVIEW_EFFECTS.iter().enumerate() {
        let out = augment(image, set, single_effect(name), seed, &cfg)?;
        let (ox, oy) = ((i % PREVIEW_COLUMNS) * (w + PREVIEW_GAP), (i / PREVIEW_COLUMNS) * (h + PREVIEW_GAP));
        for y in 0..h {
            for x in 0..w {
                grid.set(ox + x, oy + y, out.image.get(x, y));
            }
        }
    }
    Ok(grid)
}

pub fn augment_preview(a: &AugmentPreviewArgs) -> CliResult<()> {
    let image = Raster::load_png(&a.image)?;
    let set = match (&a.manifest, &a.subject) {
        (Some(m), Some(s)) => {
            let manifest = load_clean_manifest(m)?;
            let entry = manifest
                .find(s)
                .ok_or_else(|| CliError::Usage(format!("subject {s} is not in {}", m.display())))?;
            if (entry.width, entry.height) != (image.width(), image.height()) {
                return Err(CliError::Usage(format!("--image does not match the size of subject {s}")));
            }
            consensus(entry)?
        }
        _ => {
            // Without annotations every landmark sits at the image centre, so the
            // on-canvas rejection still guards the geometric panels.
            let plane = PlaneConfig::by_name(&a.plane)?;
            let c = CaliperPoint::new((image.width() as f64 - 1.0) / 2.0, (image.height() as f64 - 1.0) / 2.0);
            let points: BTreeMap<String, CaliperPoint> =
                plane.landmark_names().iter().map(|n| (n.clone(), c)).collect();
            LandmarkSet::new(plane, points)?
        }
    };
    preview_grid(&image, &set, a.seed)?.save_png8(&a.out)?;
    println!("{}", json!({ "preview": a.out, "panels": PREVIEW_EFFECTS }));
    Ok(())
}

pub fn ablation_cmd(a: &AblationArgs) -> CliResult<()> {
    let mut base = load_train_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        base.epochs = e;
    }
    if let Some(s) = a.seed {
        base.seed = s;
    }
    let manifest = load_clean_manifest(&a.manifest)?;
    if let Some(first) = manifest.entries.first() {
        base.plane = first.plane.clone();
    }
    base.validate()?;
    let mut precomputed = BTreeMap::new();
    for (label, path) in &a.precomputed {
        precomputed.insert(label.clone(), Checkpoint::load(path)?);
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CaliperError::io(&a.out_dir, e))?;
    let (runs, table) = run_ablation(&manifest, &base, a.split.into(), EvalOptions::default(), precomputed, |label, m| {
        let mut line = epoch_log(m, &base);
        line["run"] = json!(label);
        println!("{line}");
    })?;
    for (i, run) in runs.iter().enumerate() {
        let stem = a.out_dir.join(format!("run{i}"));
        run.checkpoint.save(&stem.with_extension("ckpt"))?;
        let report = stem.with_extension("report.json");
        std::fs::write(&report, run.report.to_json()?).map_err(|e| CaliperError::io(&report, e))?;
    }
    let json_path = a.out_dir.join("ablation.json");
    std::fs::write(&json_path, table.to_json()?).map_err(|e| CaliperError::io(&json_path, e))?;
    let text = table.to_text();
    let text_path = a.out_dir.join("ablation.txt");
    std::fs::write(&text_path, &text).map_err(|e| CaliperError::io(&text_path, e))?;
    eprintln!("{text}");
    Ok(())
}
