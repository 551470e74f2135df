//! Command-line pipeline: fit, transform, reconstruct, features, classify,
//! recos-report and stats.
//!
//! Settings come from an optional TOML file (`--config`); command-line flags
//! override it. Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::classifier::{evaluate, svm_fit, Evaluation, KnnModel, SvmParams, DEFAULT_K};
use crate::dataset::{extract_lc_block, load_idx, prepare_square, ImageSet};
use crate::error::{Error, ErrorKind, Result};
use crate::features::{
    class_moments, feature_matrices, fit_reducers, last_stage_matrix, normality_report, select_features,
    smoothed_histograms, write_histogram_csv, FeatureSpec, Setting,
};
use crate::io::{
    dump_entries, load, read_classifier, read_feature_spec, read_model, save, write_classifier, write_feature_spec,
    write_model, write_pgm, ClassifierModel, CoeffDumpReader, CoeffDumpWriter,
};
use crate::multistage::{fit_model, PsMode, SaakModel};
use crate::recos::{loss_decompose, random_ac_anchors, AnchorSet};
use crate::stage::KernelCap;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

/// Declarative pipeline settings. Every field is optional; flags win.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub side: Option<usize>,
    /// Per-stage caps: integers or `"all"`.
    pub caps: Option<Vec<CapValue>>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum CapValue {
    Count(usize),
    Text(String),
}

impl CapValue {
    fn parse(&self) -> Result<KernelCap> {
        match self {
            CapValue::Count(n) => Ok(KernelCap::Max(*n)),
            CapValue::Text(s) => s.parse(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub setting: Option<u8>,
    pub n: Option<usize>,
    pub reduce: Option<usize>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub kind: Option<ClassifierKind>,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
    pub eta0: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Knn,
    Svm,
    Both,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Parser)]
#[command(name = "saak", version, about = "Data-driven Saak transform pipeline")]
pub struct Cli {
    /// TOML pipeline configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker thread cap
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every random choice
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a cascade on training images
    Fit(FitArgs),
    /// Write forward coefficients of images to a dump
    Transform(TransformArgs),
    /// Synthesize images from leading last-stage coefficients, or invert a dump
    Reconstruct(ReconstructArgs),
    /// Select coefficients and fit the PCA reducer
    Features(FeaturesArgs),
    /// Train and evaluate classifiers
    Classify(ClassifyArgs),
    /// RECOS loss decomposition per sample
    RecosReport(RecosArgs),
    /// Normality report and smoothed coefficient histograms
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct ImageArgs {
    /// IDX image file (optionally gzipped); defaults to the configured training images
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// IDX label file
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Use only the first N images
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: ImageArgs,
    /// Input side after padding/downsampling (power of two)
    #[arg(long)]
    pub side: Option<usize>,
    /// Comma-separated per-stage AC kernel caps, e.g. all,all,all,255,all
    #[arg(long)]
    pub caps: Option<String>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub input: ImageArgs,
    /// Dump only the last stage
    #[arg(long)]
    pub last_only: bool,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub input: ImageArgs,
    /// Invert the last-stage grids of this coefficient dump instead
    #[arg(long, conflicts_with = "images")]
    pub dump: Option<PathBuf>,
    /// Leading coefficient counts; `all` keeps every coefficient
    #[arg(long, default_value = "100,500,1000,2000,all")]
    pub k: String,
    /// Number of images to synthesize
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Position-to-sign rule for lossy inverses
    #[arg(long, value_enum)]
    pub ps_mode: Option<PsModeArg>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PsModeArg {
    Strict,
    Linear,
    Nearest,
}

impl From<PsModeArg> for PsMode {
    fn from(m: PsModeArg) -> Self {
        match m {
            PsModeArg::Strict => PsMode::Strict,
            PsModeArg::Linear => PsMode::Linear,
            PsModeArg::Nearest => PsMode::Nearest,
        }
    }
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub input: ImageArgs,
    /// Selection setting: 1 leading last-stage, 2 F-test last stage, 3 F-test all stages
    #[arg(long)]
    pub setting: Option<u8>,
    /// Number of selected coefficients
    #[arg(long)]
    pub n: Option<usize>,
    /// PCA output dimension (0 disables reduction)
    #[arg(long)]
    pub reduce: Option<usize>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Feature spec from `saak features`
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub train_images: Option<PathBuf>,
    #[arg(long)]
    pub train_labels: Option<PathBuf>,
    #[arg(long)]
    pub test_images: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    /// Use only the first N training images
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, value_enum)]
    pub classifier: Option<ClassifierKind>,
    /// KNN neighbor count
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub eta0: Option<f64>,
    /// Evaluate this saved classifier instead of training
    #[arg(long, conflicts_with_all = ["raw_dims", "reduced_dims"])]
    pub load: Option<PathBuf>,
    /// Raw dimensions for an accuracy table (prefixes of the spec's selection)
    #[arg(long)]
    pub raw_dims: Option<String>,
    /// Reduced dimensions for an accuracy table
    #[arg(long)]
    pub reduced_dims: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecosArgs {
    /// Use this model's stage-1 kernels as anchors and image LCs as inputs
    #[arg(long, requires = "images")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Input dimension of synthetic samples
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Number of synthetic AC anchors
    #[arg(long, default_value_t = 8)]
    pub anchors: usize,
    /// Unit-norm anchors without orthogonalization
    #[arg(long)]
    pub oblique: bool,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub input: ImageArgs,
    /// Per-class sample counts for the normality report
    #[arg(long, default_value = "100,1000")]
    pub samples: String,
    /// Leading last-stage coefficients tested
    #[arg(long, default_value_t = 256)]
    pub leading: usize,
    /// Last-stage channels to histogram
    #[arg(long, default_value = "0,1,2")]
    pub hist_coeffs: String,
    #[arg(long, default_value_t = 100)]
    pub bins: usize,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Parses arguments, runs the command and maps failures to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Argument => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if let Some(t) = cfg.threads {
        if t == 0 {
            return Err(Error::invalid("--threads must be positive"));
        }
        // a second initialization (e.g. in tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Fit(a) => cmd_fit(&cfg, a, &mut out),
        Command::Transform(a) => cmd_transform(&cfg, a, &mut out),
        Command::Reconstruct(a) => cmd_reconstruct(&cfg, a, &mut out),
        Command::Features(a) => cmd_features(&cfg, a, &mut out),
        Command::Classify(a) => cmd_classify(&cfg, a, &mut out),
        Command::RecosReport(a) => cmd_recos_report(&cfg, a, &mut out),
        Command::Stats(a) => cmd_stats(&cfg, a, &mut out),
    }
}

fn required<T: Clone>(flag: &Option<T>, config: &Option<T>, name: &str) -> Result<T> {
    flag.clone()
        .or_else(|| config.clone())
        .ok_or_else(|| Error::invalid(format!("{name} is required (flag or config)")))
}

fn output_path(flag: &Option<PathBuf>, cfg: &PipelineConfig, default_name: &str) -> PathBuf {
    flag.clone().unwrap_or_else(|| {
        cfg.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("."))
            .join(default_name)
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    ensure_parent(path)?;
    Ok(BufWriter::new(File::create(path)?))
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad {what} entry {s:?}")))
        })
        .collect()
}

pub fn parse_caps(text: &str) -> Result<Vec<KernelCap>> {
    text.split(',').map(str::parse).collect()
}

/// Loads images (and labels when a path is known) and resizes to `side`.
fn load_images(images: &Path, labels: Option<&Path>, limit: Option<usize>, side: usize) -> Result<ImageSet> {
    let mut set = load_idx(images, labels)?;
    if let Some(n) = limit {
        set = set.select_range(0..n.min(set.len()));
    }
    if set.is_empty() {
        return Err(Error::Empty("no images"));
    }
    prepare_square(&set, side)
}

fn input_images(a: &ImageArgs, cfg: &PipelineConfig, side: usize, need_labels: bool) -> Result<ImageSet> {
    let images = required(&a.images, &cfg.data.train_images, "--images")?;
    let labels = a.labels.clone().or_else(|| {
        // configured labels belong to the configured images only
        a.images.is_none().then(|| cfg.data.train_labels.clone()).flatten()
    });
    if need_labels && labels.is_none() {
        return Err(Error::invalid("--labels is required for this command"));
    }
    load_images(&images, labels.as_deref(), a.limit.or(cfg.data.limit), side)
}

fn model_path(flag: &Option<PathBuf>, cfg: &PipelineConfig) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.model.path.clone())
        .unwrap_or_else(|| output_path(&None, cfg, "model.saak"))
}

fn load_model(flag: &Option<PathBuf>, cfg: &PipelineConfig) -> Result<SaakModel> {
    load(&model_path(flag, cfg), read_model)
}

pub fn cmd_fit<W: Write>(cfg: &PipelineConfig, a: FitArgs, out: &mut W) -> Result<()> {
    let side = a.side.or(cfg.model.side).unwrap_or(32);
    let images = input_images(&a.input, cfg, side, false)?;
    let p = crate::multistage::stage_count_for_side(side)?;
    let caps = match (&a.caps, &cfg.model.caps) {
        (Some(text), _) => parse_caps(text)?,
        (None, Some(list)) => list.iter().map(CapValue::parse).collect::<Result<_>>()?,
        (None, None) => vec![KernelCap::All; p],
    };
    Error::check_dim(p, caps.len())
        .map_err(|_| Error::invalid(format!("{} caps given for a {p}-stage model (side {side})", caps.len())))?;
    info!("fitting {p} stages on {} images of side {side}", images.len());
    let model = fit_model(&images, &caps)?;
    let path = a.out.clone().unwrap_or_else(|| model_path(&None, cfg));
    ensure_parent(&path)?;
    save(&path, &model, write_model)?;
    writeln!(out, "stages {}", model.stage_count())?;
    for (i, s) in model.stages().iter().enumerate() {
        writeln!(
            out,
            "stage {}: input {} signed {} retention {:.6}",
            i + 1,
            s.input_dim(),
            s.signed_dim(),
            s.energy_retention()
        )?;
    }
    writeln!(out, "lossless {}", model.is_lossless())?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

pub fn cmd_transform<W: Write>(cfg: &PipelineConfig, a: TransformArgs, out: &mut W) -> Result<()> {
    let model = load_model(&a.model, cfg)?;
    let images = input_images(&a.input, cfg, model.side(), false)?;
    let path = output_path(&a.out, cfg, "coeffs.saakc");
    let labeled = images.labels().is_some();
    let mut w = CoeffDumpWriter::new(
        create(&path)?,
        dump_entries(&model, a.last_only),
        labeled,
        images.len() as u64,
    )?;
    for start in (0..images.len()).step_by(crate::features::STREAM_BATCH) {
        let end = (start + crate::features::STREAM_BATCH).min(images.len());
        for (i, c) in (start..end).zip(model.forward_batch(&images, start..end)?) {
            w.push(&c, images.label(i))?;
        }
    }
    w.finish()?;
    writeln!(out, "images {}", images.len())?;
    writeln!(out, "last-stage dim {}", model.last_dim())?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

/// Parses a k-list where `all` stands for `total`.
pub fn parse_k_list(text: &str, total: usize) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| match s.trim() {
            "all" => Ok(total),
            t => {
                let k: usize = t.parse().map_err(|_| Error::invalid(format!("bad k entry {t:?}")))?;
                if k > total {
                    Err(Error::invalid(format!(
                        "k = {k} exceeds the {total} last-stage coefficients"
                    )))
                } else {
                    Ok(k)
                }
            }
        })
        .collect()
}

pub fn cmd_reconstruct<W: Write>(cfg: &PipelineConfig, a: ReconstructArgs, out: &mut W) -> Result<()> {
    let model = load_model(&a.model, cfg)?;
    let dir = a
        .out_dir
        .clone()
        .unwrap_or_else(|| output_path(&None, cfg, "reconstruct"));
    fs::create_dir_all(&dir)?;
    if let Some(dump) = &a.dump {
        let reader = load(dump, CoeffDumpReader::new)?;
        let entry = reader
            .entries()
            .iter()
            .position(|e| e.stage == model.stage_count())
            .ok_or_else(|| Error::Format("dump has no last-stage grids".into()))?;
        let mode = a.ps_mode.map(PsMode::from);
        let mut n = 0;
        for rec in reader {
            let rec = rec?;
            let last = &rec.grids[entry];
            let img = match mode {
                Some(m) => model.inverse_with(last, m)?,
                None => model.inverse(last)?,
            };
            write_pgm(&img, create(&dir.join(format!("img{n:05}.pgm")))?)?;
            n += 1;
        }
        writeln!(out, "inverted {n} records into {}", dir.display())?;
        return Ok(());
    }
    if a.ps_mode.is_some() {
        return Err(Error::invalid("--ps-mode applies to --dump inversion only"));
    }
    let images = input_images(&a.input, cfg, model.side(), false)?;
    let ks = parse_k_list(&a.k, model.last_dim())?;
    let count = a.count.min(images.len());
    let mut csv = csv::Writer::from_writer(create(&dir.join("mse.csv"))?);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    csv.write_record(["image", "k", "mse"]).map_err(csv_err)?;
    let mut mean = vec![0.0; ks.len()];
    for i in 0..count {
        let img = images.image(i);
        write_pgm(&img, create(&dir.join(format!("img{i:04}_orig.pgm")))?)?;
        for (j, &k) in ks.iter().enumerate() {
            let rec = model.reconstruct_topk(&img, k)?;
            let mse = crate::linalg::squared_distance(rec.values(), img.values()) / img.len() as f64;
            mean[j] += mse / count as f64;
            csv.write_record([i.to_string(), k.to_string(), mse.to_string()])
                .map_err(csv_err)?;
            write_pgm(&rec, create(&dir.join(format!("img{i:04}_k{k}.pgm")))?)?;
        }
    }
    csv.flush()?;
    for (k, m) in ks.iter().zip(&mean) {
        writeln!(out, "k {k}: mean mse {m:.3e}")?;
    }
    writeln!(out, "wrote {}", dir.display())?;
    Ok(())
}

fn setting_from(flag: Option<u8>, cfg: &PipelineConfig) -> Result<Setting> {
    Setting::try_from(flag.or(cfg.features.setting).unwrap_or(3))
}

pub fn cmd_features<W: Write>(cfg: &PipelineConfig, a: FeaturesArgs, out: &mut W) -> Result<()> {
    let model = load_model(&a.model, cfg)?;
    let setting = setting_from(a.setting, cfg)?;
    let n = a.n.or(cfg.features.n).unwrap_or(2000);
    let reduce = a.reduce.or(cfg.features.reduce).unwrap_or(64);
    let images = input_images(&a.input, cfg, model.side(), setting.uses_scores() || reduce > 0)?;
    let scores = if setting.uses_scores() {
        Some(class_moments(&model, &images, setting.pool())?.f_scores()?)
    } else {
        None
    };
    let mut spec = select_features(&model, setting, n, scores.as_deref())?;
    if reduce > 0 {
        spec = fit_reducers(&model, &images, vec![spec], reduce)?.remove(0);
    }
    let path = a
        .out
        .clone()
        .or_else(|| cfg.features.path.clone())
        .unwrap_or_else(|| output_path(&None, cfg, "features.saakf"));
    ensure_parent(&path)?;
    save(&path, &spec, write_feature_spec)?;
    writeln!(
        out,
        "setting {} selected {} reduced to {}",
        setting.number(),
        spec.raw_dim(),
        spec.output_dim()
    )?;
    if let Some(s) = spec.scores() {
        for (a, f) in spec.addresses().iter().zip(s).take(5) {
            writeln!(
                out,
                "  F {f:.4e} at stage {} ({}, {}) channel {}",
                a.stage, a.row, a.col, a.channel
            )?;
        }
    }
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

fn write_evaluation(dir: &Path, name: &str, e: &Evaluation) -> Result<()> {
    e.write_confusion_csv(create(&dir.join(format!("confusion_{name}.csv")))?)
}

pub fn cmd_classify<W: Write>(cfg: &PipelineConfig, a: ClassifyArgs, out: &mut W) -> Result<()> {
    let model = load_model(&a.model, cfg)?;
    let spec_path = a
        .spec
        .clone()
        .or_else(|| cfg.features.path.clone())
        .unwrap_or_else(|| output_path(&None, cfg, "features.saakf"));
    let spec = load(&spec_path, read_feature_spec)?;
    spec.validate(&model)?;
    let c = &cfg.classifier;
    let kind = a.classifier.or(c.kind).unwrap_or(ClassifierKind::Both);
    let k = a.k.or(c.k).unwrap_or(DEFAULT_K);
    let defaults = SvmParams::default();
    let params = SvmParams {
        lambda: a.lambda.or(c.lambda).unwrap_or(defaults.lambda),
        epochs: a.epochs.or(c.epochs).unwrap_or(defaults.epochs),
        seed: cfg.seed.unwrap_or(defaults.seed),
        eta0: a.eta0.or(c.eta0).unwrap_or(defaults.eta0),
    };
    let test = load_images(
        &required(&a.test_images, &cfg.data.test_images, "--test-images")?,
        Some(&required(&a.test_labels, &cfg.data.test_labels, "--test-labels")?),
        None,
        model.side(),
    )?;
    let dir = a.out_dir.clone().unwrap_or_else(|| output_path(&None, cfg, "classify"));
    fs::create_dir_all(&dir)?;
    let test_labels = test.labels().expect("labels were loaded");
    if let Some(path) = &a.load {
        let clf = load(path, read_classifier)?;
        let te = feature_matrices(&model, &test, std::slice::from_ref(&spec))?.remove(0);
        let e = evaluate(clf.as_classifier(), &te, test_labels)?;
        write_evaluation(&dir, "loaded", &e)?;
        writeln!(out, "loaded {}: {}", path.display(), e.summary())?;
        return Ok(());
    }
    let train = load_images(
        &required(&a.train_images, &cfg.data.train_images, "--train-images")?,
        Some(&required(&a.train_labels, &cfg.data.train_labels, "--train-labels")?),
        a.limit.or(cfg.data.limit),
        model.side(),
    )?;
    let train_labels = train.labels().expect("labels were loaded").to_vec();

    let run_pair = |train_x: &crate::linalg::Matrix,
                    test_x: &crate::linalg::Matrix|
     -> Result<Vec<(&'static str, ClassifierModel, Evaluation)>> {
        let mut results = Vec::new();
        if matches!(kind, ClassifierKind::Knn | ClassifierKind::Both) {
            let knn = KnnModel::new(k, train_x.clone(), train_labels.clone())?;
            let e = evaluate(&knn, test_x, test_labels)?;
            results.push(("knn", ClassifierModel::Knn(knn), e));
        }
        if matches!(kind, ClassifierKind::Svm | ClassifierKind::Both) {
            let svm = svm_fit(train_x, &train_labels, params)?;
            let e = evaluate(&svm, test_x, test_labels)?;
            results.push(("svm", ClassifierModel::Svm(svm), e));
        }
        Ok(results)
    };

    if a.raw_dims.is_none() && a.reduced_dims.is_none() {
        let tr = feature_matrices(&model, &train, std::slice::from_ref(&spec))?.remove(0);
        let te = feature_matrices(&model, &test, std::slice::from_ref(&spec))?.remove(0);
        let mut summary = csv::Writer::from_writer(create(&dir.join("summary.csv"))?);
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        summary
            .write_record(["classifier", "setting", "raw_dim", "reduced_dim", "accuracy"])
            .map_err(csv_err)?;
        for (name, clf, e) in run_pair(&tr, &te)? {
            save(&dir.join(format!("{name}.saakm")), &clf, write_classifier)?;
            write_evaluation(&dir, name, &e)?;
            summary
                .write_record([
                    name.to_string(),
                    spec.setting().number().to_string(),
                    spec.raw_dim().to_string(),
                    spec.output_dim().to_string(),
                    format!("{:.2}", e.accuracy),
                ])
                .map_err(csv_err)?;
            writeln!(
                out,
                "{name} setting {} {}→{}: {}",
                spec.setting().number(),
                spec.raw_dim(),
                spec.output_dim(),
                e.summary()
            )?;
        }
        summary.flush()?;
        return Ok(());
    }

    let raw_dims: Vec<usize> = match &a.raw_dims {
        Some(t) => parse_list(t, "raw dimension")?,
        None => vec![spec.raw_dim()],
    };
    let reduced_dims: Vec<usize> = match &a.reduced_dims {
        Some(t) => parse_list(t, "reduced dimension")?,
        None => vec![spec.output_dim()],
    };
    let mut specs = Vec::new();
    for &r in &reduced_dims {
        for &n in &raw_dims {
            if r > n {
                return Err(Error::invalid(format!(
                    "reduced dimension {r} exceeds raw dimension {n}"
                )));
            }
            specs.push(spec.truncated(n)?);
        }
    }
    let by_reduced: Vec<FeatureSpec> = reduced_dims
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            fit_reducers(
                &model,
                &train,
                specs[i * raw_dims.len()..(i + 1) * raw_dims.len()].to_vec(),
                r,
            )
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let tr = feature_matrices(&model, &train, &by_reduced)?;
    let te = feature_matrices(&model, &test, &by_reduced)?;
    let mut tables: Vec<(&'static str, Vec<f64>)> = Vec::new();
    for (idx, (x, y)) in tr.iter().zip(&te).enumerate() {
        for (name, _, e) in run_pair(x, y)? {
            match tables.iter_mut().find(|(n, _)| *n == name) {
                Some((_, cells)) => cells.push(e.accuracy),
                None => tables.push((name, vec![e.accuracy])),
            }
            info!("{name} cell {idx}: {}", e.summary());
        }
    }
    for (name, cells) in tables {
        let mut w = csv::Writer::from_writer(create(&dir.join(format!("accuracy_{name}.csv")))?);
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        let mut header = vec!["reduced\\raw".to_string()];
        header.extend(raw_dims.iter().map(usize::to_string));
        w.write_record(&header).map_err(csv_err)?;
        writeln!(
            out,
            "{name} accuracy (rows: reduced dim, columns: raw dim {raw_dims:?})"
        )?;
        for (i, &r) in reduced_dims.iter().enumerate() {
            let row = &cells[i * raw_dims.len()..(i + 1) * raw_dims.len()];
            let mut rec = vec![r.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.2}")));
            w.write_record(&rec).map_err(csv_err)?;
            writeln!(out, "{r:>6} {}", rec[1..].join(" "))?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn cmd_recos_report<W: Write>(cfg: &PipelineConfig, a: RecosArgs, out: &mut W) -> Result<()> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(0));
    let (anchors, inputs): (AnchorSet, Vec<Vec<f64>>) = match (&a.model, &a.images) {
        (Some(m), Some(images)) => {
            let model = load(m, read_model)?;
            let s = model.stage(1);
            let ac: Vec<Vec<f64>> = (1..=s.ac_count()).map(|k| s.ac(k).to_vec()).collect();
            let set = load_images(images, None, None, model.side())?;
            let mut inputs = Vec::with_capacity(a.samples);
            'outer: for i in 0..set.len() {
                let block = extract_lc_block(&set.image(i))?;
                for lc in block.chunks(s.input_dim()) {
                    if inputs.len() == a.samples {
                        break 'outer;
                    }
                    inputs.push(lc.to_vec());
                }
            }
            (AnchorSet::new(s.input_dim(), ac)?, inputs)
        }
        _ => {
            if a.dim < 2 {
                return Err(Error::invalid("--dim must be at least 2"));
            }
            let ac = random_ac_anchors(a.dim, a.anchors, !a.oblique, &mut rng);
            let inputs = (0..a.samples)
                .map(|_| (0..a.dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            (AnchorSet::new(a.dim, ac)?, inputs)
        }
    };
    let path = output_path(&a.out, cfg, "recos.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["sample", "E_total", "E_approx", "E_rect", "cross"])
        .map_err(csv_err)?;
    let mut worst: f64 = 0.0;
    for (i, f) in inputs.iter().enumerate() {
        let r = loss_decompose(f, &anchors)?;
        worst = worst.max((r.total - r.approx - r.rect - r.cross).abs() / r.total.max(f64::MIN_POSITIVE));
        w.write_record([
            i.to_string(),
            r.total.to_string(),
            r.approx.to_string(),
            r.rect.to_string(),
            r.cross.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    writeln!(
        out,
        "samples {} anchors {} dim {}",
        inputs.len(),
        anchors.ac_count(),
        anchors.dim()
    )?;
    writeln!(out, "max relative identity residual {worst:.3e}")?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

pub fn cmd_stats<W: Write>(cfg: &PipelineConfig, a: StatsArgs, out: &mut W) -> Result<()> {
    let model = load_model(&a.model, cfg)?;
    let sizes: Vec<usize> = parse_list(&a.samples, "sample count")?;
    let channels: Vec<usize> = parse_list(&a.hist_coeffs, "histogram channel")?;
    let last_dim = model.last_dim();
    if let Some(&c) = channels.iter().find(|&&c| c >= last_dim) {
        return Err(Error::invalid(format!(
            "channel {c} exceeds last-stage dimension {last_dim}"
        )));
    }
    let all = input_images(&a.input, cfg, model.side(), true)?;
    let per_class = sizes.iter().copied().max().unwrap_or(0);
    let chosen: Vec<usize> = all
        .indices_by_class()
        .into_iter()
        .flat_map(|idx| idx.into_iter().take(per_class))
        .collect();
    let images = all.select(&chosen);
    let labels = images.labels().expect("labels were loaded");
    let last = last_stage_matrix(&model, &images)?;
    let dir = a.out_dir.clone().unwrap_or_else(|| output_path(&None, cfg, "stats"));
    fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("normality.csv"))?);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["samples", "class", "raw_percent", "filtered_percent"])
        .map_err(csv_err)?;
    writeln!(out, "{:>8} {:>5} {:>8} {:>8}", "samples", "class", "raw%", "grubbs%")?;
    for &s in &sizes {
        for r in normality_report(&last, labels, s, a.leading)? {
            w.write_record([
                s.to_string(),
                r.class.to_string(),
                format!("{:.2}", r.raw_percent),
                format!("{:.2}", r.filtered_percent),
            ])
            .map_err(csv_err)?;
            writeln!(
                out,
                "{s:>8} {:>5} {:>8.2} {:>8.2}",
                r.class, r.raw_percent, r.filtered_percent
            )?;
        }
    }
    w.flush()?;
    let classes = images.class_count().unwrap_or(0);
    for &c in &channels {
        let mut per_class_values = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            per_class_values[l as usize].push(last.get(i, c));
        }
        let points = smoothed_histograms(&per_class_values, a.bins)?;
        write_histogram_csv(&points, create(&dir.join(format!("hist_coeff{c}.csv")))?)?;
    }
    writeln!(out, "wrote {}", dir.display())?;
    Ok(())
}
