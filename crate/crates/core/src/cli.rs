//! The `scene4d` command line: `synth`, `reconstruct`, `eval` and `export`.
//!
//! Exit codes: 0 on success, 1 for invalid arguments or inputs, 2 when the
//! computation itself fails. Logs go to stderr; data goes to files only,
//! except `eval`, which also prints its metrics to stdout.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::eval::evaluate;
use crate::io::{export_ply, load_reconstruction, load_scene, save_reconstruction, DynamicPoints, PlyFormat, PlyOptions};
use crate::optim::{reconstruct, write_trace, PipelineConfig};
use crate::synth::{generate_scene, Preset, SynthConfig};
use crate::{Error, Result};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "SCENE4D_WORKERS";
pub const CONFIG_FILE: &str = "config.json";
pub const TRACE_FILE: &str = "loss_trace.txt";
/// Written into the output directory when a run fails part-way.
pub const FAILED_FILE: &str = "FAILED";

#[derive(Debug, Parser)]
#[command(name = "scene4d", version, about = "Dynamic-scene 4D reconstruction back-end")]
pub struct Cli {
    /// Worker threads (default: $SCENE4D_WORKERS, else all cores).
    #[arg(long, global = true, allow_negative_numbers = true, value_parser = parse_workers)]
    pub workers: Option<usize>,
    /// Log filter, e.g. `info` or `scene4d=debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Estimate masks, depth, poses and trajectories for a scene directory.
    Reconstruct(ReconstructArgs),
    /// Score a reconstruction against a scene with ground truth.
    Eval(EvalArgs),
    /// Export a reconstruction as a point cloud.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "small")]
    pub preset: Preset,
    /// JSON scene configuration; replaces the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pointmap noise, as a fraction of depth.
    #[arg(long, allow_negative_numbers = true, value_parser = parse_non_negative)]
    pub pointmap_sigma: Option<f64>,
    /// Flow noise in pixels.
    #[arg(long, allow_negative_numbers = true, value_parser = parse_non_negative)]
    pub flow_sigma: Option<f64>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// JSON pipeline configuration (e.g. a previous run's config.json); flags
    /// given explicitly override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Learning rate of both stages.
    #[arg(long, allow_negative_numbers = true, value_parser = parse_positive)]
    pub lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true, value_parser = parse_positive_count)]
    pub stage1_iters: Option<usize>,
    #[arg(long, allow_negative_numbers = true, value_parser = parse_count)]
    pub stage2_iters: Option<usize>,
    #[arg(long, allow_negative_numbers = true, value_parser = parse_non_negative)]
    pub w_ga: Option<f64>,
    #[arg(long, allow_negative_numbers = true, value_parser = parse_non_negative)]
    pub w_cma: Option<f64>,
    #[arg(long, allow_negative_numbers = true, value_parser = parse_non_negative)]
    pub w_cts: Option<f64>,
    #[arg(long, allow_negative_numbers = true, value_parser = parse_non_negative)]
    pub w_pts: Option<f64>,
    /// Smoothing window in frames.
    #[arg(long, allow_negative_numbers = true, value_parser = parse_positive_count)]
    pub window: Option<usize>,
    /// Frames of padding at each window end.
    #[arg(long, allow_negative_numbers = true, value_parser = parse_count)]
    pub pad: Option<usize>,
    /// Absolute epipolar-distance floor of the motion masks, pixels.
    #[arg(long, allow_negative_numbers = true, value_parser = parse_non_negative)]
    pub mask_abs_threshold: Option<f64>,
    /// Multiple of the robust scale in the motion-mask threshold.
    #[arg(long, allow_negative_numbers = true, value_parser = parse_non_negative)]
    pub mask_kappa: Option<f64>,
    /// Seed of the robust fundamental-matrix sampling.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Reconstruction directory.
    #[arg(long)]
    pub pred: PathBuf,
    /// Scene directory with ground truth.
    #[arg(long)]
    pub gt: PathBuf,
    /// Also write the metrics as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Ply,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, value_enum, default_value = "ply")]
    pub format: ExportFormat,
    #[arg(long, value_enum, default_value = "ascii")]
    pub encoding: PlyFormat,
    /// Treatment of points inside the motion masks.
    #[arg(long, value_enum, default_value = "keep")]
    pub dynamic: DynamicPoints,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn parse_positive(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be > 0, got {v}"))
    }
}

fn parse_non_negative(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be >= 0, got {v}"))
    }
}

fn parse_count(s: &str) -> std::result::Result<usize, String> {
    s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))
}

fn parse_positive_count(s: &str) -> std::result::Result<usize, String> {
    match parse_count(s)? {
        0 => Err("must be >= 1".into()),
        n => Ok(n),
    }
}

fn parse_workers(s: &str) -> std::result::Result<usize, String> {
    parse_positive_count(s)
}

/// Exit code for a failed run.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } | Error::NonFinite { .. } | Error::Degenerate(_) => 2,
        Error::Io(e) if e.kind() != std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn synth_config(args: &SynthArgs) -> Result<SynthConfig> {
    let mut cfg = match &args.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::preset(args.preset),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.pointmap_sigma {
        cfg.noise.pointmap_sigma = s;
    }
    if let Some(s) = args.flow_sigma {
        cfg.noise.flow_sigma = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn pipeline_config(args: &ReconstructArgs) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    let opt = &mut cfg.optimizer;
    if let Some(lr) = args.lr {
        opt.stage1.lr = lr;
        opt.stage2.lr = lr;
    }
    if let Some(n) = args.stage1_iters {
        opt.stage1.iters = n;
    }
    if let Some(n) = args.stage2_iters {
        opt.stage2.iters = n;
    }
    let w = &mut opt.stage1.weights;
    for (slot, v) in [(&mut w.ga, args.w_ga), (&mut w.cma, args.w_cma), (&mut w.cts, args.w_cts)] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(v) = args.w_pts {
        opt.stage2.w_pts = v;
    }
    if let Some(v) = args.window {
        cfg.smoothing.window = v;
    }
    if let Some(v) = args.pad {
        cfg.smoothing.pad = v;
    }
    if let Some(v) = args.mask_abs_threshold {
        cfg.masks.abs_threshold = v;
    }
    if let Some(v) = args.mask_kappa {
        cfg.masks.kappa = v;
    }
    if let Some(v) = args.seed {
        cfg.masks.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let cfg = synth_config(args)?;
    fs::create_dir_all(&args.output)?;
    let data = generate_scene(&cfg, &args.output)?;
    write_json(&args.output.join(CONFIG_FILE), &cfg)?;
    log::info!("wrote {} frames to {}", data.num_frames(), args.output.display());
    Ok(())
}

fn run_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let cfg = pipeline_config(args)?;
    let scene = load_scene(&args.input)?;
    fs::create_dir_all(&args.output)?;
    let _ = fs::remove_file(args.output.join(FAILED_FILE));
    write_json(&args.output.join(CONFIG_FILE), &cfg)?;
    let result = reconstruct(&scene, &cfg).and_then(|(rec, run)| {
        save_reconstruction(&args.output, &rec)?;
        write_trace(&args.output.join(TRACE_FILE), &run.trace)
    });
    if let Err(e) = &result {
        fs::write(args.output.join(FAILED_FILE), format!("{e}\n"))?;
    }
    result
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let pred = load_reconstruction(&args.pred)?;
    let gt = load_scene(&args.gt)?;
    let report = evaluate(&pred, &gt)?;
    print!("{}", report.to_text());
    if let Some(p) = &args.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn run_export(args: &ExportArgs) -> Result<()> {
    let ExportFormat::Ply = args.format;
    let rec = load_reconstruction(&args.input)?;
    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let opts = PlyOptions { format: args.encoding, dynamic: args.dynamic };
    let n = export_ply(&args.output, &rec.world_pointmaps(), None, Some(&rec.masks), opts)?;
    log::info!("wrote {n} points to {}", args.output.display());
    Ok(())
}

fn workers(cli: &Cli) -> Result<Option<usize>> {
    if cli.workers.is_some() {
        return Ok(cli.workers);
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => parse_workers(v.trim()).map(Some).map_err(|e| Error::InvalidInput(format!("{WORKERS_ENV}: {e}"))),
        Err(_) => Ok(None),
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level))
        .target(env_logger::Target::Stderr)
        .try_init();
    let result = workers(cli).and_then(|n| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = n {
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        pool.install(|| match &cli.command {
            Command::Synth(a) => run_synth(a),
            Command::Reconstruct(a) => run_reconstruct(a),
            Command::Eval(a) => run_eval(a),
            Command::Export(a) => run_export(a),
        })
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` (including the program name) and runs it.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("scene4d").chain(args.iter().copied()))
    }

    #[test]
    fn negative_lr_is_rejected_at_parse_time() {
        let err = parse(&["reconstruct", "--input", "a", "--output", "b", "--lr", "-1"]).unwrap_err();
        assert!(err.to_string().contains("must be > 0"), "{err}");
        assert_eq!(main_with_args(["scene4d", "reconstruct", "--input", "a", "--output", "b", "--lr", "-1"]), 1);
    }

    #[test]
    fn unknown_flag_exits_one() {
        assert_eq!(main_with_args(["scene4d", "synth", "--output", "x", "--bogus"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(main_with_args(["scene4d", "--help"]), 0);
    }

    #[test]
    fn flags_override_defaults() {
        let cli = parse(&["reconstruct", "--input", "a", "--output", "b", "--lr", "0.05", "--w-cma", "0", "--window", "8"])
            .unwrap();
        let Command::Reconstruct(a) = &cli.command else { panic!() };
        let cfg = pipeline_config(a).unwrap();
        assert_eq!(cfg.optimizer.stage1.lr, 0.05);
        assert_eq!(cfg.optimizer.stage2.lr, 0.05);
        assert_eq!(cfg.optimizer.stage1.weights.cma, 0.0);
        assert_eq!(cfg.smoothing.window, 8);
        assert_eq!(cfg.optimizer.stage1.iters, 300);
    }

    #[test]
    fn zero_workers_rejected() {
        assert!(parse(&["--workers", "0", "eval", "--pred", "a", "--gt", "b"]).is_err());
    }

    #[test]
    fn runtime_failures_map_to_two() {
        assert_eq!(exit_code(&Error::NonFiniteLoss { iteration: 3, term: "ga" }), 2);
        assert_eq!(exit_code(&Error::InvalidInput("x".into())), 1);
    }
}
