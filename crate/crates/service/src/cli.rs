//! `holonav` command line.
//!
//! Exit status: 0 on success, 2 for bad input (flags, missing or malformed
//! files, degenerate data), 1 for internal failures.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use holonav_core::calibration::{
    calibration_quality, pivot_calibrate, PivotSolution, QualityVerdict, DEFAULT_MAX_CONDITION,
    DEFAULT_MAX_RESIDUAL_MM,
};
use holonav_core::registration::{fit_rigid, match_correspondences, Correspondences, FiducialSet};
use holonav_core::scene::Scene;
use holonav_core::session::replay_file;
use holonav_core::tracking::Scenario;
use holonav_core::volume::{
    detect_fiducials, synthesize_phantom, Grid, PhantomSpec, VoxelVolume, DEFAULT_MAX_VOXELS, DEFAULT_MIN_VOXELS,
    DEFAULT_THRESHOLD,
};
use holonav_core::{Point3, RigidTransform};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::persist::{FileLog, LogSink, NoLog};
use crate::server;

#[derive(Debug, Parser)]
#[command(name = "holonav", version, about = "Phantom, registration and navigation tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Synthesize a phantom CT volume.
    Phantom {
        /// `default` or a JSON phantom spec, optionally with a `grid`.
        #[arg(long, default_value = "default")]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect fiducials in a volume and print them as a fiducial set.
    Detect {
        volume: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: i16,
        #[arg(long, default_value_t = DEFAULT_MIN_VOXELS)]
        min_voxels: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_VOXELS)]
        max_voxels: usize,
    },
    /// Rigidly register two fiducial files (source → target).
    Register {
        source: PathBuf,
        target: PathBuf,
        /// Find the pairing instead of pairing points in file order.
        #[arg(long = "match")]
        find_pairing: bool,
    },
    /// Pivot-calibrate a pointer from a JSON list of tracker poses.
    Calibrate {
        poses: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_RESIDUAL_MM)]
        max_residual: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_CONDITION)]
        max_condition: f64,
    },
    /// Run a tracking scenario and print samples as JSON lines.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild session state from a log and print it.
    Replay { log: PathBuf },
    /// Run the wire service until interrupted.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        ws_port: Option<u16>,
        /// JSON config file; `HOLONAV_*` variables and flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Session log to replay on start and append to.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        tick_hz: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

// Every core error the CLI can see comes from a user-supplied file or value.
impl From<holonav_core::Error> for CliError {
    fn from(e: holonav_core::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn with_path(path: &Path) -> impl Fn(holonav_core::Error) -> CliError + '_ {
    move |e| CliError::Validation(format!("{}: {e}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    writeln!(out, "{text}").map_err(|e| CliError::Internal(e.to_string()))
}

#[derive(Deserialize)]
struct PhantomFile {
    #[serde(flatten)]
    spec: PhantomSpec,
    #[serde(default)]
    grid: Option<Grid>,
}

/// A fiducial file is either a full fiducial set or a bare list of points.
#[derive(Deserialize)]
#[serde(untagged)]
enum FiducialFile {
    Set(FiducialSet),
    Points(Vec<Point3>),
}

impl FiducialFile {
    fn into_set(self, frame: &str) -> FiducialSet {
        match self {
            FiducialFile::Set(s) => s,
            FiducialFile::Points(p) => FiducialSet::from_points(frame, p),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PoseFile {
    List(Vec<RigidTransform>),
    Wrapped { poses: Vec<RigidTransform> },
}

#[derive(Serialize)]
struct CalibrationReport {
    #[serde(flatten)]
    solution: PivotSolution,
    #[serde(flatten)]
    verdict: QualityVerdict,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Cmd::Phantom { spec, out: path } => {
            let (spec, grid) = if spec == "default" {
                (PhantomSpec::default(), Grid::default_head())
            } else {
                let file: PhantomFile = read_json(Path::new(&spec))?;
                (file.spec, file.grid.unwrap_or_else(Grid::default_head))
            };
            let volume = synthesize_phantom(&spec, grid)?;
            volume.write(&path).map_err(with_path(&path))?;
            writeln!(out, "wrote {} ({} voxels)", path.display(), volume.intensities().len())
                .map_err(|e| CliError::Internal(e.to_string()))
        }
        Cmd::Detect {
            volume,
            threshold,
            min_voxels,
            max_voxels,
        } => {
            let v = VoxelVolume::read(&volume).map_err(with_path(&volume))?;
            let found = detect_fiducials(&v, threshold, min_voxels, max_voxels);
            print_json(out, &FiducialSet::from_points("patient", found.iter().map(|d| d.centroid)))
        }
        Cmd::Register {
            source,
            target,
            find_pairing,
        } => {
            let src = read_json::<FiducialFile>(&source)?.into_set("source");
            let dst = read_json::<FiducialFile>(&target)?.into_set("target");
            let corr = if find_pairing {
                match_correspondences(&src, &dst)?
            } else {
                Correspondences::in_order(src, dst)?
            };
            print_json(out, &fit_rigid(&corr)?)
        }
        Cmd::Calibrate {
            poses,
            max_residual,
            max_condition,
        } => {
            let poses = match read_json::<PoseFile>(&poses)? {
                PoseFile::List(p) | PoseFile::Wrapped { poses: p } => p,
            };
            let solution = pivot_calibrate(&poses)?;
            let verdict = calibration_quality(&solution, max_residual, max_condition);
            print_json(out, &CalibrationReport { solution, verdict })
        }
        Cmd::Simulate { scenario, out: path } => {
            let samples = Scenario::load(&scenario).map_err(with_path(&scenario))?.run()?;
            let mut text = String::new();
            for s in &samples {
                text.push_str(&serde_json::to_string(s).map_err(|e| CliError::Internal(e.to_string()))?);
                text.push('\n');
            }
            match path {
                Some(p) => fs::write(&p, text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display()))),
                None => out.write_all(text.as_bytes()).map_err(|e| CliError::Internal(e.to_string())),
            }
        }
        Cmd::Replay { log } => {
            let session = replay_file(&log).map_err(with_path(&log))?;
            print_json(out, session.snapshot())
        }
        Cmd::Serve {
            port,
            ws_port,
            config,
            log,
            tick_hz,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => ServiceConfig::from_file(&p).map_err(with_path(&p))?,
                None => ServiceConfig::default(),
            };
            cfg.apply_env(|k| std::env::var(k).ok())?;
            cfg.port = port.unwrap_or(cfg.port);
            cfg.ws_port = ws_port.unwrap_or(cfg.ws_port);
            cfg.log = log.or(cfg.log);
            cfg.tick_hz = tick_hz.unwrap_or(cfg.tick_hz);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.validate()?;
            serve(cfg, out)
        }
    }
}

fn serve(cfg: ServiceConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let _ = tracing_subscriber::fmt().with_writer(io::stderr).try_init();
    let (sink, session): (Box<dyn LogSink>, _) = match &cfg.log {
        Some(p) => {
            let (log, session) = FileLog::open(p).map_err(with_path(p))?;
            (Box::new(log), session)
        }
        None => (Box::new(NoLog), Default::default()),
    };
    let mut scene = Scene::default();
    scene.noise = cfg.noise;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
    runtime.block_on(async {
        let handle = server::start(&cfg, session, scene, sink)
            .await
            .map_err(|e| CliError::Internal(format!("cannot listen on {}:{}: {e}", cfg.host, cfg.port)))?;
        writeln!(out, "listening tcp={} ws={}", handle.tcp_addr(), handle.ws_addr())
            .and_then(|_| out.flush())
            .map_err(|e| CliError::Internal(e.to_string()))?;
        tokio::signal::ctrl_c()
            .await
            .map_err(|e| CliError::Internal(e.to_string()))?;
        let session = handle.shutdown().await;
        tracing::info!(state = %session.state(), events = session.log().len(), "stopped");
        Ok(())
    })
}

/// Parses `args`, runs, and reports errors on standard error.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout with status 0; usage errors exit 2.
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let stdout = io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("holonav: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
