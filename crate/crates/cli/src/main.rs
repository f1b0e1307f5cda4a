use clap::{Args, Parser, Subcommand};
use roadsim_cli::pipeline::{self, FrameSelection, RunOptions, RunOutcome};
use roadsim_cli::{commands, CliError, Config};
use roadsim_core::dataset::to_json_bytes;
use roadsim_core::extrinsics::OptimizerConfig;
use roadsim_core::fixture::{generate_fixture, FixtureConfig};
use roadsim_service::{AppState, ServiceConfig};
use serde::Serialize;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;

/// Roadside multi-camera data synthesis.
///
/// Log level comes from ROADSIM_LOG (e.g. `info`, `roadsim_cli=debug`).
#[derive(Parser)]
#[command(name = "roadsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config worker count.
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config, CliError> {
        let mut cfg = Config::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline over a scene.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Frame indices into the sorted frame list: `3`, `0..4`, `2..=5`, `0,7`.
        #[arg(long)]
        frames: Option<FrameSelection>,
        /// Validate inputs and print the plan without writing anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// Refine camera extrinsics of one frame from a keypoint file.
    Calibrate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        frame: String,
        /// Defaults to the frame's keypoints.json.
        #[arg(long)]
        keypoints: Option<PathBuf>,
        /// Replace the stored calib.json files with the refined poses.
        #[arg(long)]
        write: bool,
    },
    /// Print placement scores for every grid cell of one frame.
    ScoreGrid {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        frame: String,
    },
    /// Run only the foreground depth stage for one frame.
    Depth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        frame: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic scene with known ground truth.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML fixture settings; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cameras: Option<usize>,
        #[arg(long)]
        boxes: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        perturb_rotation_deg: Option<f64>,
        #[arg(long)]
        perturb_translation: Option<f64>,
        #[arg(long)]
        keypoint_noise: Option<f64>,
        #[arg(long)]
        lidar_noise: Option<f64>,
    },
    /// Start the calibration HTTP service.
    Serve {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    std::io::stdout().write_all(&to_json_bytes(value)).map_err(|e| CliError::Internal(format!("stdout: {e}")))
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Simulate { cfg, frames, dry_run } => {
            let cfg = cfg.load()?;
            match pipeline::simulate(&cfg, &RunOptions { frames, dry_run })? {
                RunOutcome::DryRun(plan) => print_json(&plan)?,
                RunOutcome::Completed(report) => {
                    for f in report.frames.iter().filter(|f| f.error.is_some()) {
                        eprintln!(
                            "frame {} failed at stage {}: {}",
                            f.frame_id,
                            f.failed_stage.map_or_else(|| "?".into(), |s| s.to_string()),
                            f.error.as_deref().unwrap_or_default()
                        );
                    }
                    if report.frames_failed > 0 {
                        return Ok(3);
                    }
                }
            }
        }
        Command::Calibrate { scene, frame, keypoints, write } => {
            let entries = commands::calibrate(&scene, &frame, keypoints.as_deref(), &OptimizerConfig::default(), write)?;
            print_json(&entries)?;
        }
        Command::ScoreGrid { cfg, frame } => print_json(&commands::score_grid(&cfg.load()?, &frame)?)?,
        Command::Depth { cfg, frame, out } => print_json(&commands::depth(&cfg.load()?, &frame, out.as_deref())?)?,
        Command::Fixture { out, seed, config, cameras, boxes, frames, perturb_rotation_deg, perturb_translation, keypoint_noise, lidar_noise } => {
            let mut fc = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|source| roadsim_cli::ConfigError::Read { path: p.clone(), source })?;
                    toml::from_str::<FixtureConfig>(&text)
                        .map_err(|e| roadsim_cli::ConfigError::Parse { path: p.clone(), message: e.to_string() })?
                }
                None => FixtureConfig::default(),
            };
            fc.cameras = cameras.unwrap_or(fc.cameras);
            fc.boxes = boxes.unwrap_or(fc.boxes);
            fc.frames = frames.unwrap_or(fc.frames);
            fc.perturb_rotation_deg = perturb_rotation_deg.unwrap_or(fc.perturb_rotation_deg);
            fc.perturb_translation = perturb_translation.unwrap_or(fc.perturb_translation);
            fc.keypoint_noise = keypoint_noise.unwrap_or(fc.keypoint_noise);
            fc.lidar_noise = lidar_noise.unwrap_or(fc.lidar_noise);
            generate_fixture(&fc, seed, &out).map_err(|e| match e {
                roadsim_core::fixture::FixtureError::Config(m) => CliError::Config(roadsim_cli::ConfigError::Invalid(m)),
                other => CliError::Data(other.to_string()),
            })?;
            log::info!("fixture written to {}", out.display());
        }
        Command::Serve { scene, addr } => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(format!("runtime: {e}")))?;
            rt.block_on(roadsim_service::serve(AppState::new(scene, ServiceConfig::default()), addr))
                .map_err(|e| CliError::Data(format!("serve {addr}: {e}")))?;
        }
    }
    Ok(0)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROADSIM_LOG", "warn")).init();
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("roadsim: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
