//! `splat4d` command-line driver.
//!
//! Every failure is reported as one stderr line `error[<kind>]: <message>`
//! followed by a nonzero exit.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use splat4d::checkpoint::{load_checkpoint, save_checkpoint};
use splat4d::dataset::{split_train_val, Dataset};
use splat4d::gradcheck::{run_gradcheck, Fixture, GradcheckConfig, ParamGroup};
use splat4d::io;
use splat4d::ply::{write_ply, PlyFormat};
use splat4d::rasterizer::RenderSettings;
use splat4d::scene::Camera;
use splat4d::synthetic::{write_dataset, SyntheticConfig};
use splat4d::trainer::{self, write_history_csv, MetricRow, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "splat4d",
    version,
    about = "Depth-regularized dynamic Gaussian splatting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// Dataset manifest (JSON).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Training configuration (JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Normalized render time.
    #[arg(long, global = true, allow_negative_numbers = true)]
    time: Option<f64>,
    /// Frame index supplying camera (and time, unless --time is given).
    #[arg(long, global = true)]
    frame: Option<usize>,
    /// Back-projection pixel stride.
    #[arg(long, global = true)]
    stride: Option<usize>,
    #[arg(long, global = true)]
    tolerance: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Back-project frame 0 into an initial point cloud.
    Init,
    /// Train from scratch and write a checkpoint, history and PLY.
    Train,
    /// Render color, depth and normals from a checkpoint.
    Render,
    /// Validation-split PSNR/SSIM of a checkpoint.
    Eval,
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// Flip the sign of one group's analytic gradient.
        #[arg(long, value_name = "GROUP")]
        corrupt: Option<String>,
    },
    /// Write the procedural deforming-sheet dataset.
    Synth {
        #[arg(long, default_value_t = 10)]
        frames: usize,
    },
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new("usage", message)
    }
}

impl From<splat4d::Error> for CliError {
    fn from(e: splat4d::Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // one line, whatever the message contains
        let msg: String = self
            .message
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        write!(f, "error[{}]: {}", self.kind, msg)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .to_string();
            let msg = first.trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::usage(msg));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let c = &cli.common;
    // validate required flags before doing any work
    match &cli.command {
        Command::Init | Command::Train => {
            require(&c.manifest, "--manifest")?;
            require(&c.out, "--out")?;
        }
        Command::Render => {
            require(&c.checkpoint, "--checkpoint")?;
            require(&c.out, "--out")?;
            if c.time.is_none() && c.frame.is_none() {
                return Err(CliError::usage("render needs --time or --frame"));
            }
            if c.frame.is_some() && c.manifest.is_none() {
                return Err(CliError::usage("--frame needs --manifest"));
            }
        }
        Command::Eval => {
            require(&c.checkpoint, "--checkpoint")?;
            require(&c.manifest, "--manifest")?;
        }
        Command::Gradcheck { corrupt } => {
            if let Some(g) = corrupt {
                if ParamGroup::parse(g).is_none() {
                    let names: Vec<_> = ParamGroup::ALL.iter().map(|g| g.name()).collect();
                    return Err(CliError::usage(format!(
                        "unknown group {g:?}; expected one of {}",
                        names.join(", ")
                    )));
                }
            }
        }
        Command::Synth { .. } => {
            require(&c.out, "--out")?;
        }
    }
    if let Some(t) = c.tolerance {
        if !(t > 0.0) {
            return Err(CliError::usage("--tolerance must be positive"));
        }
    }
    if c.stride == Some(0) {
        return Err(CliError::usage("--stride must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(c.threads)
        .build_global()
        .map_err(|e| CliError::new("threads", e.to_string()))?;

    match &cli.command {
        Command::Init => cmd_init(c),
        Command::Train => cmd_train(c),
        Command::Render => cmd_render(c),
        Command::Eval => cmd_eval(c),
        Command::Gradcheck { corrupt } => cmd_gradcheck(c, corrupt.as_deref()),
        Command::Synth { frames } => cmd_synth(c, *frames),
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    v.as_deref()
        .ok_or_else(|| CliError::usage(format!("missing required flag {flag}")))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))
}

fn load_config(c: &Common) -> CliResult<TrainConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(stride) = c.stride {
        cfg.init.stride = stride;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_init(c: &Common) -> CliResult<()> {
    let cfg = load_config(c)?;
    let dataset = Dataset::load(c.manifest.as_deref().unwrap())?;
    let first = dataset.frame(0)?;
    let state = trainer::initialize(&first, &cfg)?;
    let out = c.out.as_deref().unwrap();
    create_dir(out)?;
    let path = out.join("init.ply");
    write_ply(&state.cloud, &path, PlyFormat::BinaryLittleEndian)?;
    println!("points: {}", state.cloud.len());
    println!("wrote {}", path.display());
    Ok(())
}

fn format_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn cmd_train(c: &Common) -> CliResult<()> {
    let cfg = load_config(c)?;
    let dataset = Dataset::load(c.manifest.as_deref().unwrap())?;
    let out = c.out.as_deref().unwrap();
    create_dir(out)?;
    let settings = RenderSettings::default();
    let start = Instant::now();
    let report = |row: &MetricRow| {
        log::info!(
            "iter {:>6} psnr {} ssim {} loss {:.5}",
            row.iteration,
            format_metric(row.psnr),
            format_metric(row.ssim),
            row.loss.total
        )
    };
    let result = trainer::train(&dataset, &cfg, &settings, Some(&report))?;
    let elapsed = start.elapsed().as_secs_f64();
    save_checkpoint(&result.state, &out.join("checkpoint.s4dg"))?;
    write_history_csv(&out.join("history.csv"), &result.history)?;
    write_ply(
        &result.state.cloud,
        &out.join("cloud.ply"),
        PlyFormat::BinaryLittleEndian,
    )?;

    let (_, val_idx) = split_train_val(dataset.len(), cfg.split);
    let eval = trainer::evaluate(&result.state, &dataset.frames(&val_idx)?, &settings)?;
    println!("iterations: {}", result.state.iteration);
    println!("gaussians: {}", result.state.cloud.len());
    println!("val_psnr: {}", format_metric(eval.mean_psnr));
    println!("val_ssim: {}", format_metric(eval.mean_ssim));
    println!("wall_seconds: {elapsed:.2}");
    if result.skipped_gradients > 0 {
        log::warn!(
            "{} non-finite gradient entries were skipped",
            result.skipped_gradients
        );
    }
    Ok(())
}

fn cmd_render(c: &Common) -> CliResult<()> {
    let state = load_checkpoint(c.checkpoint.as_deref().unwrap())?;
    let (camera, frame_time) = match c.frame {
        Some(k) => {
            let dataset = Dataset::load(c.manifest.as_deref().unwrap())?;
            if k >= dataset.len() {
                return Err(CliError::usage(format!(
                    "--frame {k} is out of range for {} frames",
                    dataset.len()
                )));
            }
            (dataset.camera(k).clone(), Some(dataset.times()[k]))
        }
        None => (Camera::try_from(&state.camera)?, None),
    };
    let mut t = c.time.or(frame_time).unwrap();
    if !t.is_finite() {
        return Err(CliError::usage("--time must be finite"));
    }
    if !(0.0..=1.0).contains(&t) {
        let clamped = t.clamp(0.0, 1.0);
        log::warn!("time {t} is outside [0,1]; clamped to {clamped}");
        t = clamped;
    }
    let out_dir = c.out.as_deref().unwrap();
    create_dir(out_dir)?;
    let r = state.render(&camera, t, &RenderSettings::default());
    let (w, h) = (camera.width, camera.height);
    io::save_rgb(&out_dir.join("render.png"), w, h, &r.color)?;
    io::write_pfm(&out_dir.join("depth.pfm"), w, h, &r.depth)?;
    io::save_normals(&out_dir.join("normal.png"), w, h, &r.normal)?;
    println!("time: {t}");
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn cmd_eval(c: &Common) -> CliResult<()> {
    let state = load_checkpoint(c.checkpoint.as_deref().unwrap())?;
    let dataset = Dataset::load(c.manifest.as_deref().unwrap())?;
    let (_, val_idx) = split_train_val(dataset.len(), state.config.split);
    if val_idx.is_empty() {
        log::warn!("validation split is empty");
    }
    let frames = dataset.frames(&val_idx)?;
    let eval = trainer::evaluate(&state, &frames, &RenderSettings::default())?;
    let mut csv = String::from("frame,psnr,ssim\n");
    for &(k, p, s) in &eval.frames {
        csv.push_str(&format!("{k},{},{}\n", format_metric(p), format_metric(s)));
    }
    if !eval.frames.is_empty() {
        csv.push_str(&format!(
            "mean,{},{}\n",
            format_metric(eval.mean_psnr),
            format_metric(eval.mean_ssim)
        ));
    }
    print!("{csv}");
    if let Some(out) = &c.out {
        create_dir(out)?;
        io::write_file(&out.join("eval.csv"), csv.as_bytes())?;
    }
    Ok(())
}

fn cmd_gradcheck(c: &Common, corrupt: Option<&str>) -> CliResult<()> {
    let cfg = GradcheckConfig {
        tolerance: c.tolerance.unwrap_or(1e-4),
        corrupt: corrupt.and_then(ParamGroup::parse),
        ..GradcheckConfig::default()
    };
    let start = Instant::now();
    let report = run_gradcheck(&Fixture::standard(), &cfg)?;
    print!("{report}");
    for (g, e) in report.max_by_group() {
        println!("max {:<14} {e:.3e}", g.name());
    }
    println!("seconds: {:.2}", start.elapsed().as_secs_f64());
    let offenders = report.offenders();
    if offenders.is_empty() {
        println!("gradcheck passed (tolerance {:e})", cfg.tolerance);
        return Ok(());
    }
    let mut groups: Vec<&str> = offenders.iter().map(|r| r.group.name()).collect();
    groups.dedup();
    groups.sort_unstable();
    groups.dedup();
    let list: Vec<String> = offenders
        .iter()
        .map(|r| {
            format!(
                "{}/{}/{}={:.2e}",
                r.stage.name(),
                r.term.name(),
                r.group.name(),
                r.max_rel_error
            )
        })
        .collect();
    Err(CliError::new(
        "gradcheck",
        format!(
            "groups [{}] exceed tolerance {:e}: {}",
            groups.join(","),
            cfg.tolerance,
            list.join(" ")
        ),
    ))
}

fn cmd_synth(c: &Common, frames: usize) -> CliResult<()> {
    let mut cfg = SyntheticConfig {
        frames,
        ..SyntheticConfig::default()
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let path = write_dataset(c.out.as_deref().unwrap(), &cfg)?;
    println!("wrote {}", path.display());
    Ok(())
}
