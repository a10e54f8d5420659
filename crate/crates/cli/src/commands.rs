use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use posegraph_slam::eval::evaluate;
use posegraph_slam::io::{
    format_detections, format_edge_file, format_g2o, format_kitti, format_loop_log, load_kitti_poses, parse_detections,
    parse_edge_file, read_text, write_text, WindowKind,
};
use posegraph_slam::loops::{AlwaysAccept, LoopCandidate, LoopVerifier, ProximityOracle};
use posegraph_slam::sim::simulate;

use crate::config::Config;
use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::pipeline::{run_backend, RunFailure, RunOptions};
use crate::plot::{render_svg, tracks_csv};

#[derive(Debug, Parser)]
#[command(
    name = "pgslam",
    version,
    about = "Pose-graph back-end with loop closing, a drift simulator and trajectory evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a drifting front-end: windows, ground truth and loop detections.
    Simulate(SimulateArgs),
    /// Chain windows into a pose graph, close loops and optimize.
    Run(RunArgs),
    /// Compare an estimated trajectory against ground truth.
    Eval(EvalArgs),
    /// Overlay trajectories in the x-z plane as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// key = value config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Window edge file.
    #[arg(long)]
    pub windows: PathBuf,
    /// Loop detection trace.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Optimizer, detector and weight settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Accept loops only when the ground-truth poses of both frames are close.
    #[arg(long)]
    pub verify_with: Option<PathBuf>,
    /// Distance in meters used with --verify-with.
    #[arg(long, default_value_t = 10.0)]
    pub verify_distance: f64,
    /// Chain the windows only; the optimizer never runs.
    #[arg(long, conflicts_with = "optimize_every")]
    pub no_loop_closing: bool,
    /// Relax each window to a consistent one before chaining.
    #[arg(long)]
    pub window_relax: bool,
    /// Also optimize every N frames.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub optimize_every: Option<u64>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub est: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Write the report as CSV here as well.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Start-frame stride of the relative errors.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub stride: u64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// KITTI pose files, drawn in order.
    #[arg(required = true)]
    pub trajectories: Vec<PathBuf>,
    /// Legend labels; file stems by default.
    #[arg(long = "label")]
    pub labels: Vec<String>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// CSV of the plotted positions.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    match path {
        Some(p) => Config::parse(&read_text(p)?).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
            other => other,
        }),
        None => Ok(Config::default()),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<RunManifest, CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.sim.seed = seed;
    }
    let sim = simulate(&cfg.sim)?;
    create_dir(&args.out)?;

    let mut windows: Vec<(WindowKind, _)> = sim.windows.iter().map(|w| (WindowKind::Local, w)).collect();
    windows.extend(sim.loop_windows.iter().map(|w| (WindowKind::Loop, w)));
    let paths = [
        ("windows", args.out.join("windows.txt"), format_edge_file(cfg.sim.window_size, &windows)?),
        ("groundtruth", args.out.join("groundtruth.txt"), format_kitti(&sim.truth)),
        ("detections", args.out.join("detections.txt"), format_detections(&sim.detections)),
    ];
    let mut manifest = RunManifest::new("simulate");
    manifest.seed = Some(cfg.sim.seed);
    manifest.config = cfg.to_text();
    if let Some(c) = &args.config {
        manifest = manifest.input("config", c);
    }
    for (role, path, text) in &paths {
        write_text(path, text)?;
        manifest = manifest.output(role, path);
    }
    let manifest_path = args.out.join("manifest.txt");
    manifest = manifest.output("manifest", &manifest_path);
    write_text(&manifest_path, &manifest.to_text())?;
    log::info!(
        "simulated {} frames, {} loop windows, {} detections",
        sim.truth.len(),
        sim.loop_windows.len(),
        sim.detections.len()
    );
    Ok(manifest)
}

enum Verifier {
    Accept(AlwaysAccept),
    Proximity(ProximityOracle),
}

impl LoopVerifier for Verifier {
    fn verify(&mut self, c: &LoopCandidate) -> bool {
        match self {
            Verifier::Accept(v) => v.verify(c),
            Verifier::Proximity(v) => v.verify(c),
        }
    }
}

pub fn cmd_run(args: &RunArgs) -> Result<RunManifest, CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let edges = parse_edge_file(&read_text(&args.windows)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.windows.display())))?;
    let detections = match &args.detections {
        Some(p) => parse_detections(&read_text(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        None => Vec::new(),
    };
    let verifier = match &args.verify_with {
        Some(p) => {
            if !(args.verify_distance.is_finite() && args.verify_distance > 0.0) {
                return Err(CliError::Usage("--verify-distance must be positive".into()));
            }
            Verifier::Proximity(ProximityOracle::new(load_kitti_poses(p)?.poses, args.verify_distance))
        }
        None => Verifier::Accept(AlwaysAccept),
    };
    let opts = RunOptions {
        loop_closing: !args.no_loop_closing,
        window_relax: args.window_relax,
        optimize_every: args.optimize_every.map(|n| n as usize),
        ..RunOptions::new(cfg.lm.clone(), cfg.detector, cfg.weights)
    };

    let mut manifest = RunManifest::new("run")
        .flag("no_loop_closing", args.no_loop_closing)
        .flag("window_relax", args.window_relax)
        .flag("optimize_every", args.optimize_every.map_or("off".to_string(), |n| n.to_string()))
        .flag("verify_distance", args.verify_distance)
        .input("windows", &args.windows);
    if let Some(p) = &args.detections {
        manifest = manifest.input("detections", p);
    }
    if let Some(p) = &args.config {
        manifest = manifest.input("config", p);
    }
    if let Some(p) = &args.verify_with {
        manifest = manifest.input("verify_with", p);
    }
    manifest.config = cfg.backend_text();
    create_dir(&args.out)?;

    let run = match run_backend(&edges, &detections, verifier, &opts) {
        Ok(run) => run,
        Err(failure) => {
            let RunFailure { graph, loops, error } = *failure;
            if !graph.is_empty() {
                let path = args.out.join("failed_graph.g2o");
                write_text(&path, &format_g2o(&graph))?;
                write_text(&args.out.join("loops.txt"), &format_loop_log(&loops))?;
                log::error!("graph before the failed optimization saved to {}", path.display());
            }
            return Err(error);
        }
    };
    let outputs = [
        ("estimate", args.out.join("estimate.txt"), format_kitti(&run.estimate())),
        ("graph", args.out.join("graph.g2o"), format_g2o(&run.graph)),
        ("loops", args.out.join("loops.txt"), format_loop_log(&run.loops)),
        ("optimizer", args.out.join("optimizer.csv"), run.optimizer_csv()),
    ];
    for (role, path, text) in &outputs {
        write_text(path, text)?;
        manifest = manifest.output(role, path);
    }
    let manifest_path = args.out.join("manifest.txt");
    manifest = manifest.output("manifest", &manifest_path);
    write_text(&manifest_path, &manifest.to_text())?;
    log::info!("{} nodes, {} loops closed, {} optimizations", run.graph.len(), run.loops.len(), run.reports.len());
    Ok(manifest)
}

/// Returns the table printed to standard output.
pub fn cmd_eval(args: &EvalArgs) -> Result<String, CliError> {
    let est = load_kitti_poses(&args.est)?;
    let gt = load_kitti_poses(&args.gt)?;
    let report = evaluate(&est, &gt, args.stride as usize)?;
    if let Some(p) = &args.csv {
        write_text(p, &report.to_csv())?;
    }
    Ok(report.to_table())
}

pub fn cmd_plot(args: &PlotArgs) -> Result<(), CliError> {
    if !args.labels.is_empty() && args.labels.len() != args.trajectories.len() {
        return Err(CliError::Usage(format!(
            "{} labels given for {} trajectories",
            args.labels.len(),
            args.trajectories.len()
        )));
    }
    let loaded = args.trajectories.iter().map(|p| load_kitti_poses(p)).collect::<Result<Vec<_>, _>>()?;
    let tracks: Vec<(String, _)> = loaded
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let name = args.labels.get(k).cloned().unwrap_or_else(|| {
                args.trajectories[k].file_stem().map_or(format!("track{k}"), |s| s.to_string_lossy().into_owned())
            });
            (name, t)
        })
        .collect();
    write_text(&args.out, &render_svg(&tracks)?)?;
    if let Some(p) = &args.csv {
        write_text(p, &tracks_csv(&tracks))?;
    }
    Ok(())
}

/// Runs one parsed command, printing eval tables to `stdout`.
pub fn execute(cli: &Cli, stdout: &mut impl std::io::Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a).map(drop),
        Command::Run(a) => cmd_run(a).map(drop),
        Command::Eval(a) => {
            let table = cmd_eval(a)?;
            stdout.write_all(table.as_bytes()).map_err(|e| CliError::Data(e.to_string()))
        }
        Command::Plot(a) => cmd_plot(a),
    }
}
