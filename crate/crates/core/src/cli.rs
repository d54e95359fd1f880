//! Command-line front end: `simulate`, `run`, `evaluate` and `export`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::eval::{ate, metrics_table, read_tum, write_tum, TrajectoryPair};
use crate::pipeline::{load_scene, run_dataset, Built, PipelineError, RunConfig, RunOutput};
use crate::semantics::LayerSet;
use crate::sgraph::{to_dot, GraphDocument};
use crate::simulator::{generate, SimDataset};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

#[derive(Debug, Parser)]
#[command(
    name = "sgraphs",
    version,
    about = "Marker-driven situational graph SLAM backend"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Simulate(RunArgs),
    /// Build, optimize and evaluate the semantic graph and an odometry-only baseline.
    Run(RunArgs),
    /// ATE between two trajectory files (`t tx ty tz qx qy qz qw` per line).
    Evaluate(EvaluateArgs),
    /// Re-emit a graph file as JSON or Graphviz.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Template name (seq01 to seq06) or scene file.
    #[arg(long)]
    pub scene: Option<String>,
    /// Replay this dataset instead of simulating one (`run` only).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated subset of markers,walls,spaces,doorways, or `all`/`none`.
    #[arg(long)]
    pub layers: Option<String>,
    /// Levenberg-Marquardt iteration cap.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub noise: NoiseArgs,
}

/// Noise overrides; angles in radians, lengths in meters.
#[derive(Debug, Args, Default)]
pub struct NoiseArgs {
    #[arg(long = "noise.odom_rot_sigma")]
    pub odom_rot_sigma: Option<f64>,
    #[arg(long = "noise.odom_trans_sigma")]
    pub odom_trans_sigma: Option<f64>,
    #[arg(long = "noise.marker_rot_sigma")]
    pub marker_rot_sigma: Option<f64>,
    #[arg(long = "noise.marker_trans_sigma")]
    pub marker_trans_sigma: Option<f64>,
    #[arg(long = "noise.detection_range")]
    pub detection_range: Option<f64>,
    #[arg(long = "noise.detection_half_fov")]
    pub detection_half_fov: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub estimate: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Json,
    Dot,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn parse_layers(s: &str) -> Result<LayerSet, CliError> {
    let mut l = LayerSet::NONE;
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "all" => l = LayerSet::ALL,
            "none" => l = LayerSet::NONE,
            "markers" => l.markers = true,
            "walls" => l.walls = true,
            "spaces" => l.spaces = true,
            "doorways" => l.doorways = true,
            other => return Err(CliError::Validation(format!("unknown layer {other:?}"))),
        }
    }
    Ok(l)
}

impl RunArgs {
    /// Config file (if any) with command-line overrides applied.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_str(&read(path)?)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?,
            None => RunConfig::default(),
        };
        if let Some(s) = &self.scene {
            cfg.scene = s.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(l) = &self.layers {
            cfg.layers = parse_layers(l)?;
        }
        if let Some(m) = self.max_iters {
            cfg.optimizer.max_iters = m;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        let n = &self.noise;
        let noise = &mut cfg.noise;
        for (value, field) in [
            (n.odom_rot_sigma, &mut noise.odom_rot_sigma),
            (n.odom_trans_sigma, &mut noise.odom_trans_sigma),
            (n.marker_rot_sigma, &mut noise.marker_rot_sigma),
            (n.marker_trans_sigma, &mut noise.marker_trans_sigma),
            (n.detection_range, &mut noise.detection_range),
            (n.detection_half_fov, &mut noise.detection_half_fov),
        ] {
            if let Some(v) = value {
                *field = v;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimDataset, CliError> {
    let scene = load_scene(&cfg.scene)?;
    let dataset = generate(&scene, &cfg.seeded_noise()).map_err(PipelineError::from)?;
    let out = &cfg.out;
    write(&out.join("scene.json"), &scene.to_json())?;
    write(&out.join("dataset.json"), &dataset.to_json())?;
    write(
        &out.join("dictionary.json"),
        &scene.dictionary().map_err(PipelineError::from)?.to_json(),
    )?;
    let gt: Vec<_> = dataset
        .timestamps()
        .into_iter()
        .zip(dataset.ground_truth_poses())
        .collect();
    write(&out.join("ground_truth.tum"), &write_tum(&gt))?;
    Ok(dataset)
}

fn write_method(dir: &Path, built: &Built, d: &SimDataset) -> Result<(), CliError> {
    write(
        &dir.join("graph.json"),
        &GraphDocument::from_graph(&built.graph).to_json(),
    )?;
    write(&dir.join("graph.dot"), &to_dot(&built.graph))?;
    write(
        &dir.join("trajectory.tum"),
        &write_tum(&built.trajectory(&d.timestamps())),
    )
}

pub fn cmd_run(cfg: &RunConfig, dataset: Option<&Path>) -> Result<RunOutput, CliError> {
    let d = match dataset {
        Some(path) => SimDataset::from_json(&read(path)?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?,
        None => {
            let scene = load_scene(&cfg.scene)?;
            generate(&scene, &cfg.seeded_noise()).map_err(PipelineError::from)?
        }
    };
    let output = run_dataset(d, cfg)?;
    let out = &cfg.out;
    write(&out.join("config.json"), &json(cfg))?;
    let gt: Vec<_> = output
        .dataset
        .timestamps()
        .into_iter()
        .zip(output.dataset.ground_truth_poses())
        .collect();
    write(&out.join("ground_truth.tum"), &write_tum(&gt))?;
    write_method(&out.join("semantic"), &output.semantic.0, &output.dataset)?;
    write_method(&out.join("odometry"), &output.baseline.0, &output.dataset)?;
    let rows = output.metrics_rows();
    write(&out.join("metrics.txt"), &metrics_table(&rows))?;
    write(
        &out.join("metrics.json"),
        &json(&serde_json::json!({
            "rows": rows,
            "methods": [&output.baseline.1, &output.semantic.1],
        })),
    )?;
    Ok(output)
}

#[derive(Debug, Serialize)]
struct EvaluateReport {
    aligned: crate::eval::AteReport,
    unaligned: crate::eval::AteReport,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<String, CliError> {
    let load = |p: &Path| {
        read_tum(&read(p)?).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))
    };
    let pair = TrajectoryPair::new(load(&args.estimate)?, load(&args.reference)?)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let runtime = |e: crate::eval::EvalError| CliError::Runtime(e.to_string());
    let report = EvaluateReport {
        aligned: ate(&pair, true).map_err(runtime)?,
        unaligned: ate(&pair, false).map_err(runtime)?,
    };
    Ok(json(&report))
}

pub fn cmd_export(args: &ExportArgs) -> Result<String, CliError> {
    let invalid = |e: crate::sgraph::DocumentError| {
        CliError::Validation(format!("{}: {e}", args.graph.display()))
    };
    let doc = GraphDocument::from_json(&read(&args.graph)?).map_err(invalid)?;
    let graph = doc.to_graph().map_err(invalid)?;
    Ok(match args.format {
        Format::Json => GraphDocument::from_graph(&graph).to_json(),
        Format::Dot => to_dot(&graph),
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => {
            if a.dataset.is_some() {
                return Err(CliError::Validation(
                    "--dataset only applies to `run`".into(),
                ));
            }
            let cfg = a.resolve()?;
            let d = cmd_simulate(&cfg)?;
            log::info!(
                "wrote {} poses and {} detections to {}",
                d.ground_truth.len(),
                d.detections.len(),
                cfg.out.display()
            );
        }
        Command::Run(a) => {
            let cfg = a.resolve()?;
            let output = cmd_run(&cfg, a.dataset.as_deref())?;
            print!("{}", metrics_table(&output.metrics_rows()));
        }
        Command::Evaluate(a) => emit(a.out.as_deref(), &cmd_evaluate(a)?)?,
        Command::Export(a) => emit(a.out.as_deref(), &cmd_export(a)?)?,
    }
    Ok(())
}
