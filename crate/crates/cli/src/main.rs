use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pairsel::bench::{bench, render_table};
use pairsel::config::{effective_config, Overrides, ParseError};
use pairsel::features::{keypoints_json, matches_json};
use pairsel::image_io::{load_sequence, ImageIoError};
use pairsel::quality_metrics::{compare, load_metric_image, MetricError};
use pairsel::selection::{result_json, select_with, PairEvaluator, SelectionError, Strategy};
use pairsel::sim3_align::{align_trajectories, read_poses, AlignError};
use pairsel::synth_culvert::{preset_trajectory, render_scene, write_scene, Preset, SceneConfig, SynthError, TrajectoryParams};

/// Exit codes: 0 success, 1 other failure, 2 usage, 3 config, 4 I/O or
/// decode, 5 invalid input, 6 numerical failure.
#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Input(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Input(_) => 5,
            CliError::Numerical(_) => 6,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Input(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<ParseError> for CliError {
    fn from(e: ParseError) -> Self {
        CliError::Config(format!("config: {e}"))
    }
}

impl From<ImageIoError> for CliError {
    fn from(e: ImageIoError) -> Self {
        match e {
            ImageIoError::Decode { .. } | ImageIoError::Io(_) | ImageIoError::Pattern(_) => CliError::Io(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<SelectionError> for CliError {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<AlignError> for CliError {
    fn from(e: AlignError) -> Self {
        match e {
            AlignError::Io(_) => CliError::Io(e.to_string()),
            AlignError::DegenerateConfiguration(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Decode { .. } => CliError::Io(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) => CliError::Input(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "pairsel", version, about = "Informative frame-pair selection for pipe-interior video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pick the most informative frame pair of a sequence
    Select(SelectArgs),
    /// Sim(3)-align ground-truth camera centers to predicted ones
    Align(AlignArgs),
    /// PSNR and SSIM between a reference and a test image
    Metrics(MetricsArgs),
    /// Render a synthetic culvert sequence with ground-truth poses
    Synth(SynthArgs),
    /// Compare selection strategies on one sequence
    Bench(BenchArgs),
}

#[derive(Args)]
struct SelectionFlags {
    /// Key-value config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    t_flow: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    t_baseline: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    t_angle: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Divide the baseline by its maximum before scoring
    #[arg(long)]
    beta_normalized: bool,
}

impl SelectionFlags {
    fn overrides(&self, strategy: Option<Strategy>) -> Overrides {
        Overrides {
            t_flow: self.t_flow,
            t_baseline: self.t_baseline,
            alpha: self.alpha,
            t_angle: self.t_angle,
            strategy,
            stride: self.stride,
            seed: self.seed,
            beta_normalized: self.beta_normalized.then_some(true),
        }
    }
}

#[derive(Args)]
struct SelectArgs {
    /// Directory of frames
    #[arg(long)]
    frames: PathBuf,
    /// File name glob inside the frame directory
    #[arg(long, default_value = "*.png")]
    pattern: String,
    /// ours, random, first-last or quartiles
    #[arg(long)]
    strategy: Option<Strategy>,
    #[command(flatten)]
    selection: SelectionFlags,
    /// Result JSON path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write keypoint and match dumps here
    #[arg(long)]
    debug: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    /// Ground-truth poses JSON
    #[arg(long)]
    gt: PathBuf,
    /// Predicted poses JSON
    #[arg(long)]
    pred: PathBuf,
    /// Skip the centroid / unit-RMS normalization of the ground truth
    #[arg(long)]
    no_normalize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// dolly, pan or tilt
    #[arg(long, default_value = "dolly")]
    preset: Preset,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Image size as WxH
    #[arg(long, default_value = "160x120", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    #[arg(long, default_value_t = 20.0)]
    length: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Focal length in pixels; defaults to 0.75 * width
    #[arg(long)]
    focal: Option<f64>,
    /// Texture cycles per meter
    #[arg(long, default_value_t = 4.0)]
    texture_scale: f64,
    /// Inverse-square light coefficient
    #[arg(long, default_value_t = 0.05)]
    falloff: f64,
    /// Forward travel per frame in meters
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    /// Per-frame pan/tilt angle in degrees
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    turn_step: f64,
    /// Per-frame roll in degrees
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    roll_step: f64,
    /// Initial distance from the start cap in meters
    #[arg(long, default_value_t = 1.0)]
    start: f64,
    /// Also write per-frame depth maps
    #[arg(long)]
    depth: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long, default_value = "*.png")]
    pattern: String,
    /// Comma-separated strategies
    #[arg(long, value_delimiter = ',', default_value = "ours,random,first-last,quartiles")]
    strategies: Vec<Strategy>,
    #[command(flatten)]
    selection: SelectionFlags,
    /// Rendered views: render_*.png with matching reference_*.png, optionally
    /// in one subdirectory per strategy
    #[arg(long)]
    renders: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size `{s}`: {e}"));
    Ok((parse(w)?, parse(h)?))
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json value prints") + "\n";
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    emit(value, Some(path))
}

fn load_frames(dir: &Path, pattern: &str) -> Result<pairsel::image_io::FrameSequence, CliError> {
    load_sequence(dir, pattern).map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", dir.display())),
        other => other,
    })
}

fn run_select(args: &SelectArgs) -> Result<(), CliError> {
    let config = effective_config(args.selection.config.as_deref(), &args.selection.overrides(args.strategy))?;
    let seq = load_frames(&args.frames, &args.pattern)?;
    let evaluator = PairEvaluator::new(&seq, &config)?;
    let result = select_with(&evaluator, config.strategy)?;
    if let Some(dir) = &args.debug {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        let mut frames: Vec<usize> = result.stats.iter().flat_map(|s| [s.i, s.j]).collect();
        frames.sort_unstable();
        frames.dedup();
        for k in frames {
            write_json(&dir.join(format!("keypoints_{k:04}.json")), &keypoints_json(k, &evaluator.features(k).keypoints))?;
        }
        for s in &result.stats {
            let m = evaluator.match_set(s.i, s.j);
            write_json(&dir.join(format!("matches_{:04}_{:04}.json", s.i, s.j)), &matches_json(m.matches()))?;
        }
    }
    emit(&result_json(&result, &config), args.out.as_deref())
}

fn run_align(args: &AlignArgs) -> Result<(), CliError> {
    let gt = read_poses(&args.gt)?;
    let pred = read_poses(&args.pred)?;
    let report = align_trajectories(&gt, &pred, !args.no_normalize)?;
    let mut json = report.to_json();
    let obj = json.as_object_mut().expect("report is an object");
    obj.insert("tool".into(), "pairsel".into());
    obj.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    obj.insert("normalize_gt".into(), (!args.no_normalize).into());
    emit(&json, args.out.as_deref())
}

fn run_metrics(args: &MetricsArgs) -> Result<(), CliError> {
    let a = load_metric_image(&args.reference)?;
    let b = load_metric_image(&args.test)?;
    let ids = [args.reference.display().to_string(), args.test.display().to_string()];
    let report = compare(&a, &b, ids)?;
    let mut json = serde_json::to_value(&report).expect("report serializes");
    let obj = json.as_object_mut().expect("report is an object");
    obj.insert("tool".into(), "pairsel".into());
    obj.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    emit(&json, args.out.as_deref())
}

fn run_synth(args: &SynthArgs) -> Result<(), CliError> {
    let (width, height) = args.size;
    let params = TrajectoryParams {
        start_z: args.start,
        step: args.step,
        turn_step_deg: args.turn_step,
        roll_step_deg: args.roll_step,
    };
    let config = SceneConfig {
        radius: args.radius,
        length: args.length,
        texture_seed: args.seed,
        texture_scale: args.texture_scale,
        light_falloff: args.falloff,
        width,
        height,
        focal: args.focal.unwrap_or(0.75 * width as f64),
        trajectory: preset_trajectory(args.preset, args.frames, &params),
    };
    let scene = render_scene(&config)?;
    write_scene(&scene, &args.out, args.depth)?;
    eprintln!("wrote {} frames to {}", scene.frames.len(), args.out.display());
    Ok(())
}

fn run_bench(args: &BenchArgs) -> Result<(), CliError> {
    let config = effective_config(args.selection.config.as_deref(), &args.selection.overrides(None))?;
    let seq = load_frames(&args.frames, &args.pattern)?;
    let report = bench(&seq, &config, &args.strategies, args.renders.as_deref()).map_err(|e| match e {
        pairsel::bench::BenchError::Metrics { source: MetricError::Decode { .. }, .. } => CliError::Io(e.to_string()),
        pairsel::bench::BenchError::Listing(_) => CliError::Io(e.to_string()),
        _ => CliError::Input(e.to_string()),
    })?;
    print!("{}", render_table(&report));
    let json = serde_json::to_value(&report).expect("report serializes");
    match &args.out {
        Some(path) => write_json(path, &json),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Select(a) => run_select(a),
        Command::Align(a) => run_align(a),
        Command::Metrics(a) => run_metrics(a),
        Command::Synth(a) => run_synth(a),
        Command::Bench(a) => run_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
