//! `cystseg` command line: phantom generation, preprocessing, segmentation,
//! training, and evaluation of OCT cyst segmentation runs.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage/argument error,
//! 3 data or model error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cystseg::config;
use cystseg::denoise::tv_denoise;
use cystseg::eval::EvalError;
use cystseg::forest::{load_model, save_model, ForestError};
use cystseg::layers::LayerBoundaries;
use cystseg::pgm;
use cystseg::phantom::{derive_seed, write_phantom, LayerProfile, PhantomError, PhantomSpec};
use cystseg::pipeline::{
    classify_volume, prepare_eval_volumes, process_volume, run_loocv, train_on_volumes,
    PipelineConfig, PipelineError,
};
use cystseg::saliency::center_surround_dark;
use cystseg::volume::{
    load_bundle, normalize_size, BinaryMask, MaskSource, Slice, VolumeBundle, VolumeError,
};

#[derive(Parser)]
#[command(
    name = "cystseg",
    version,
    about = "Detect and segment retinal cysts in SD-OCT volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom volumes with known ground truth.
    PhantomGen(PhantomGenArgs),
    /// Normalize and denoise a volume, writing the intermediate slices.
    Preprocess(PreprocessArgs),
    /// Segment a volume with a trained model.
    Segment(SegmentArgs),
    /// Train the random forest on volumes with ground truth.
    Train(TrainArgs),
    /// Evaluate segmentation quality (leave-one-out or fixed model).
    Eval(EvalArgs),
    /// Paint prediction masks over the slices of a volume.
    Overlay(OverlayArgs),
}

/// Tunables shared by the processing subcommands. Precedence:
/// built-in defaults < `--config` file < explicit flags.
#[derive(Args, Debug, Default)]
struct ConfigOpts {
    /// Config file with `key = value` lines (same keys as the dump).
    #[arg(long)]
    config: Option<PathBuf>,
    /// TV data-fidelity weight.
    #[arg(long)]
    tv_lambda: Option<f64>,
    /// TV stopping tolerance on the relative dual change.
    #[arg(long)]
    tv_tol: Option<f64>,
    /// TV iteration cap.
    #[arg(long)]
    tv_max_iter: Option<usize>,
    /// Denoise in log-intensity space (non-standard extension).
    #[arg(long)]
    tv_log: bool,
    /// Center-surround scales as `c1,c2:d1,d2`.
    #[arg(long)]
    saliency_scales: Option<String>,
    /// Rows below the ILM where the RPE search begins.
    #[arg(long)]
    rpe_offset: Option<usize>,
    /// Largest allowed per-column boundary jump.
    #[arg(long)]
    max_jump: Option<usize>,
    /// MSER stability step on the 0-255 scale.
    #[arg(long)]
    mser_delta: Option<u8>,
    #[arg(long)]
    mser_min_area: Option<usize>,
    #[arg(long)]
    mser_max_area: Option<usize>,
    #[arg(long)]
    mser_max_variation: Option<f64>,
    #[arg(long)]
    mser_min_diversity: Option<f64>,
    /// Minimum fraction of a region inside the ROI.
    #[arg(long)]
    mser_roi_overlap: Option<f64>,
    #[arg(long)]
    forest_max_depth: Option<usize>,
    #[arg(long)]
    forest_min_split: Option<usize>,
    #[arg(long)]
    forest_feature_subset: Option<usize>,
    /// Cyst probability threshold for the output mask.
    #[arg(long)]
    threshold: Option<f64>,
    /// Seed for every stochastic component of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for slice-level parallelism (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct PhantomGenArgs {
    /// Output directory; one subdirectory per volume.
    #[arg(long)]
    out: PathBuf,
    /// Number of volumes.
    #[arg(long, default_value_t = 1)]
    volumes: usize,
    /// Slices per volume.
    #[arg(long, default_value_t = 8)]
    slices: usize,
    /// Base seed; per-volume seeds are derived from it.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Speckle strength (0 disables, 1 = full unit-mean Rayleigh field).
    #[arg(long, default_value_t = 0.3)]
    speckle_sigma: f64,
    /// Regular cysts per slice, as `min:max`.
    #[arg(long, default_value = "2:4")]
    cysts: String,
    /// Cyst area range in pixels, as `min:max`.
    #[arg(long, default_value = "60:2800")]
    area: String,
    /// Leading slices that get a single tiny (sub-detectable) cyst.
    #[arg(long, default_value_t = 0)]
    micro_slices: usize,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the center-surround saliency maps.
    #[arg(long)]
    dump_saliency: bool,
    #[command(flatten)]
    opts: ConfigOpts,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write ILM/RPE boundary overlays.
    #[arg(long)]
    dump_layers: bool,
    /// Write saliency maps.
    #[arg(long)]
    dump_saliency: bool,
    /// Write candidate-region overlays (pre-classifier).
    #[arg(long)]
    dump_candidates: bool,
    #[command(flatten)]
    opts: ConfigOpts,
}

#[derive(Args)]
struct TrainArgs {
    /// Text file listing one manifest path per line.
    #[arg(long)]
    manifest_list: PathBuf,
    /// Output model file.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    opts: ConfigOpts,
}

#[derive(Args)]
struct EvalArgs {
    /// Text file listing one manifest path per line.
    #[arg(long)]
    manifest_list: PathBuf,
    /// Evaluate this fixed model instead of running leave-one-out CV.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Report output path (text; a `.kv` sibling carries the same data).
    #[arg(long)]
    report_out: PathBuf,
    /// Include the statistics blocks that exclude zero-Dice slices.
    #[arg(long)]
    exclude_zero: bool,
    #[command(flatten)]
    opts: ConfigOpts,
}

#[derive(Args)]
struct OverlayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory containing `pred_XXX.pgm` masks.
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Errors carrying their process exit code.
enum CliError {
    Io(String),
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::MissingFile(_) | VolumeError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::InvalidSpec(_) | PhantomError::InfeasibleSpec { .. } => {
                CliError::Usage(e.to_string())
            }
            PhantomError::Volume(v) => v.into(),
        }
    }
}

impl From<ForestError> for CliError {
    fn from(e: ForestError) -> Self {
        match e {
            ForestError::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Volume(v) => v.into(),
            PipelineError::Forest(f) => f.into(),
            PipelineError::Eval(EvalError::MissingGroundTruth(v)) => {
                CliError::Usage(format!("ground truth required: volume '{v}' has none"))
            }
            PipelineError::Eval(EvalError::InsufficientVolumes(n)) => CliError::Usage(format!(
                "need at least 2 volumes for cross-validation, got {n}"
            )),
            PipelineError::Denoise(cystseg::denoise::DenoiseError::InvalidParams(m)) => {
                CliError::Usage(m)
            }
            PipelineError::Saliency(s) => CliError::Usage(s.to_string()),
            PipelineError::Mser(m) => CliError::Usage(m.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PhantomGen(args) => cmd_phantom_gen(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Segment(args) => cmd_segment(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Overlay(args) => cmd_overlay(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// Builds the effective configuration from defaults, config file, and flags.
fn resolve_config(opts: &ConfigOpts) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &opts.config {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        config::apply_kv(&mut cfg, &text).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(v) = opts.tv_lambda {
        cfg.tv.lambda = v;
    }
    if let Some(v) = opts.tv_tol {
        cfg.tv.tol = v;
    }
    if let Some(v) = opts.tv_max_iter {
        cfg.tv.max_iter = v;
    }
    if opts.tv_log {
        cfg.tv_log_transform = true;
    }
    if let Some(v) = &opts.saliency_scales {
        cfg.saliency_scales = v.parse().map_err(CliError::Usage)?;
    }
    if let Some(v) = opts.rpe_offset {
        cfg.layers.rpe_offset = v;
    }
    if let Some(v) = opts.max_jump {
        cfg.layers.max_jump = v;
    }
    if let Some(v) = opts.mser_delta {
        cfg.mser.delta = v;
    }
    if let Some(v) = opts.mser_min_area {
        cfg.mser.min_area = v;
    }
    if let Some(v) = opts.mser_max_area {
        cfg.mser.max_area = v;
    }
    if let Some(v) = opts.mser_max_variation {
        cfg.mser.max_variation = v;
    }
    if let Some(v) = opts.mser_min_diversity {
        cfg.mser.min_diversity = v;
    }
    if let Some(v) = opts.mser_roi_overlap {
        cfg.mser.min_roi_overlap = v;
    }
    if let Some(v) = opts.forest_max_depth {
        cfg.forest.max_depth = v;
    }
    if let Some(v) = opts.forest_min_split {
        cfg.forest.min_samples_split = v;
    }
    if let Some(v) = opts.forest_feature_subset {
        cfg.forest.feature_subset_size = v;
    }
    if let Some(v) = opts.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = opts.seed {
        cfg.seed = v;
    }
    if let Some(v) = opts.jobs {
        cfg.jobs = v;
    }
    config::validate(&cfg).map_err(CliError::Usage)?;
    Ok(cfg)
}

/// Runs `f` inside a rayon pool sized by the config (0 = default pool).
fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    if jobs == 0 {
        Ok(f())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot build thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes the effective-config dump, prefixed with the invocation context.
fn dump_config(
    path: &Path,
    cfg: &PipelineConfig,
    context: &[(&str, String)],
) -> Result<(), CliError> {
    let mut text = String::new();
    for (k, v) in context {
        text.push_str(&format!("# {k} = {v}\n"));
    }
    text.push_str(&config::to_kv(cfg));
    write_text(path, &text)
}

fn parse_range_u(s: &str) -> Result<(usize, usize), CliError> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("expected 'min:max', got '{s}'")))?;
    let lo = a
        .trim()
        .parse()
        .map_err(|e| CliError::Usage(format!("bad min '{a}': {e}")))?;
    let hi = b
        .trim()
        .parse()
        .map_err(|e| CliError::Usage(format!("bad max '{b}': {e}")))?;
    if lo > hi {
        return Err(CliError::Usage(format!("min {lo} exceeds max {hi}")));
    }
    Ok((lo, hi))
}

fn cmd_phantom_gen(args: PhantomGenArgs) -> Result<(), CliError> {
    if args.volumes == 0 {
        return Err(CliError::Usage("--volumes must be >= 1".into()));
    }
    let (cyst_lo, cyst_hi) = parse_range_u(&args.cysts)?;
    let (area_lo, area_hi) = parse_range_u(&args.area)?;
    create_dir(&args.out)?;
    for v in 0..args.volumes {
        let spec = PhantomSpec {
            n_slices: args.slices,
            cysts_per_slice: cyst_lo..=cyst_hi,
            cyst_area_range: area_lo as f64..=area_hi as f64,
            speckle_sigma: args.speckle_sigma,
            layer_profile: LayerProfile::default(),
            micro_cyst_slices: args.micro_slices,
            seed: derive_seed(args.seed, v as u64),
            volume_id: format!("phantom_{v:03}"),
            ..PhantomSpec::default()
        };
        let dir = args.out.join(format!("vol_{v:03}"));
        let manifest = write_phantom(&dir, &spec)?;
        println!("{}", manifest.display());
    }
    Ok(())
}

fn load_bundle_warned(path: &Path) -> Result<VolumeBundle, CliError> {
    let bundle = load_bundle(path)?;
    for w in &bundle.warnings {
        eprintln!("warning: {w}");
    }
    Ok(bundle)
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args.opts)?;
    let bundle = load_bundle_warned(&args.manifest)?;
    create_dir(&args.out)?;

    let normalized = normalize_size(&bundle.volume).map_err(CliError::from)?;
    let results: Vec<Result<(Slice, Option<Slice>), PipelineError>> = with_pool(cfg.jobs, || {
        use rayon::prelude::*;
        normalized
            .slices
            .par_iter()
            .map(|s| {
                let den = tv_denoise(&s.to_unit(), &cfg.tv)?;
                let sal = if args.dump_saliency {
                    Some(center_surround_dark(&den, &cfg.saliency_scales)?)
                } else {
                    None
                };
                Ok((den, sal))
            })
            .collect()
    })?;

    for (i, r) in results.into_iter().enumerate() {
        let (den, sal) = r.map_err(CliError::from)?;
        let p = args.out.join(format!("denoised_{i:03}.pgm"));
        pgm::write_pgm(&p, den.width(), den.height(), &den.quantize_u8())
            .map_err(|e| CliError::Io(e.to_string()))?;
        if let Some(sal) = sal {
            let p = args.out.join(format!("saliency_{i:03}.pgm"));
            pgm::write_pgm(&p, sal.width(), sal.height(), &sal.quantize_u8())
                .map_err(|e| CliError::Io(e.to_string()))?;
        }
    }
    dump_config(
        &args.out.join("cystseg_config.txt"),
        &cfg,
        &[
            ("command", "preprocess".to_string()),
            ("manifest", args.manifest.display().to_string()),
        ],
    )
}

/// Paints layer boundaries (white) onto a slice image.
fn layers_overlay(s: &Slice, b: &LayerBoundaries) -> Vec<u8> {
    let mut bytes = s.quantize_u8();
    for x in 0..s.width() {
        for row in [b.ilm()[x], b.rpe()[x]] {
            bytes[row * s.width() + x] = 255;
        }
    }
    bytes
}

/// Paints mask boundary pixels (white) onto a slice image.
fn mask_outline_overlay(s: &Slice, m: &BinaryMask) -> Vec<u8> {
    let mut bytes = s.quantize_u8();
    let (w, h) = (m.width(), m.height());
    for y in 0..h {
        for x in 0..w {
            if !m.get(x, y) {
                continue;
            }
            let edge = (x == 0 || !m.get(x - 1, y))
                || (x + 1 == w || !m.get(x + 1, y))
                || (y == 0 || !m.get(x, y - 1))
                || (y + 1 == h || !m.get(x, y + 1));
            if edge {
                bytes[y * w + x] = 255;
            }
        }
    }
    bytes
}

fn cmd_segment(args: SegmentArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args.opts)?;
    let bundle = load_bundle_warned(&args.manifest)?;
    let model = load_model(&args.model)?;
    create_dir(&args.out)?;

    let arts = with_pool(cfg.jobs, || process_volume(&bundle.volume, &cfg))??;
    for sa in &arts.slices {
        for w in &sa.warnings {
            eprintln!("warning: {w}");
        }
    }
    let classified = classify_volume(&arts, &model, cfg.threshold).map_err(CliError::from)?;

    for (i, (sa, cs)) in arts.slices.iter().zip(&classified).enumerate() {
        let p = args.out.join(format!("pred_{i:03}.pgm"));
        cs.mask.to_pgm(&p).map_err(CliError::from)?;
        if args.dump_layers {
            if let Some(b) = &sa.boundaries {
                let bytes = layers_overlay(&sa.denoised, b);
                let p = args.out.join(format!("layers_{i:03}.pgm"));
                pgm::write_pgm(&p, sa.denoised.width(), sa.denoised.height(), &bytes)
                    .map_err(|e| CliError::Io(e.to_string()))?;
            }
        }
        if args.dump_saliency {
            let p = args.out.join(format!("saliency_{i:03}.pgm"));
            pgm::write_pgm(
                &p,
                sa.saliency.width(),
                sa.saliency.height(),
                &sa.saliency.quantize_u8(),
            )
            .map_err(|e| CliError::Io(e.to_string()))?;
        }
        if args.dump_candidates {
            let mut bytes = sa.denoised.quantize_u8();
            for c in &sa.candidates {
                for &(x, y) in &c.pixels {
                    bytes[y * sa.denoised.width() + x] = 255;
                }
            }
            let p = args.out.join(format!("candidates_{i:03}.pgm"));
            pgm::write_pgm(&p, sa.denoised.width(), sa.denoised.height(), &bytes)
                .map_err(|e| CliError::Io(e.to_string()))?;
        }
    }

    dump_config(
        &args.out.join("cystseg_config.txt"),
        &cfg,
        &[
            ("command", "segment".to_string()),
            ("manifest", args.manifest.display().to_string()),
            ("model", args.model.display().to_string()),
        ],
    )
}

fn read_manifest_list(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let list: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect();
    if list.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: no manifest paths listed",
            path.display()
        )));
    }
    Ok(list)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args.opts)?;
    let manifests = read_manifest_list(&args.manifest_list)?;
    let mut bundles = Vec::new();
    for m in &manifests {
        bundles.push(load_bundle_warned(m)?);
    }

    let (model, summary) = with_pool(cfg.jobs, || -> Result<_, PipelineError> {
        let volumes = prepare_eval_volumes(&bundles, &cfg)?;
        let inputs: Vec<_> = volumes
            .iter()
            .map(|ev| (&ev.artifacts, ev.gt.as_slice()))
            .collect();
        train_on_volumes(&inputs, &cfg)
    })??;

    save_model(&model, &args.model)?;
    let mut text = String::new();
    text.push_str(&format!("rows = {}\n", summary.n_rows));
    text.push_str(&format!("cyst_rows = {}\n", summary.n_cyst));
    text.push_str(&format!("non_cyst_rows = {}\n", summary.n_non_cyst));
    match summary.oob_accuracy {
        Some(a) => text.push_str(&format!("oob_accuracy = {a:.6}\n")),
        None => text.push_str("oob_accuracy = unavailable\n"),
    }
    text.push_str(&format!("trees = {}\n", model.n_trees()));
    let summary_path = args.model.with_extension("summary.txt");
    write_text(&summary_path, &text)?;
    print!("{text}");

    dump_config(
        &args.model.with_extension("config.txt"),
        &cfg,
        &[
            ("command", "train".to_string()),
            ("manifest_list", args.manifest_list.display().to_string()),
            ("model", args.model.display().to_string()),
        ],
    )
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args.opts)?;
    let manifests = read_manifest_list(&args.manifest_list)?;
    let mut bundles = Vec::new();
    for m in &manifests {
        bundles.push(load_bundle_warned(m)?);
    }

    let mut report = match &args.model {
        Some(model_path) => {
            let model = load_model(model_path)?;
            with_pool(cfg.jobs, || {
                cystseg::pipeline::evaluate_fixed_model(&bundles, &model, &cfg)
            })??
        }
        None => with_pool(cfg.jobs, || run_loocv(&bundles, &cfg))??,
    };
    report.include_nonzero_block = args.exclude_zero;

    write_text(&args.report_out, &report.render_text())?;
    let kv_path = args.report_out.with_extension("kv");
    write_text(&kv_path, &report.render_kv())?;
    print!("{}", report.render_text());

    dump_config(
        &args.report_out.with_extension("config.txt"),
        &cfg,
        &[
            ("command", "eval".to_string()),
            ("manifest_list", args.manifest_list.display().to_string()),
            (
                "model",
                args.model
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "leave-one-out".to_string()),
            ),
            ("exclude_zero", args.exclude_zero.to_string()),
        ],
    )
}

fn cmd_overlay(args: OverlayArgs) -> Result<(), CliError> {
    let bundle = load_bundle_warned(&args.manifest)?;
    let normalized = normalize_size(&bundle.volume).map_err(CliError::from)?;
    create_dir(&args.out)?;
    for (i, slice) in normalized.slices.iter().enumerate() {
        let mask_path = args.masks.join(format!("pred_{i:03}.pgm"));
        let mask =
            BinaryMask::from_pgm(&mask_path, MaskSource::Prediction).map_err(CliError::from)?;
        if mask.width() != slice.width() || mask.height() != slice.height() {
            return Err(CliError::Data(format!(
                "{}: mask is {}x{}, slice is {}x{}",
                mask_path.display(),
                mask.width(),
                mask.height(),
                slice.width(),
                slice.height()
            )));
        }
        let bytes = mask_outline_overlay(slice, &mask);
        let p = args.out.join(format!("overlay_{i:03}.pgm"));
        pgm::write_pgm(&p, slice.width(), slice.height(), &bytes)
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(())
}
