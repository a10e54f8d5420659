//! Synthetic front-end: ground-truth paths, noisy windowed pose graphs with drift,
//! and loop detections from ground-truth proximity.
//!
//! Camera frames follow the KITTI convention (x right, y down, z forward); paths lie in the
//! x–z plane and headings rotate about y.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::graph::NodeId;
use crate::lie::{se3_exp, so3_exp, Pose, Twist};
use crate::loops::{crossed_windows, LoopDetection};
use crate::trajectory::Trajectory;
use crate::window::{WindowError, WindowedPoseGraph};

#[derive(Debug, Clone, PartialEq)]
pub enum PathSpec {
    /// Clockwise circle seen from above, starting at the origin heading along +z.
    Circle {
        radius: f64,
        laps: f64,
    },
    /// Two circles tangent at the origin, traversed one after the other.
    FigureEight {
        radius: f64,
        laps: f64,
    },
    Straight {
        length: f64,
    },
    /// Polyline through the given points; heading follows each segment in the x–z plane.
    Waypoints(Vec<Vector3<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub window_size: usize,
    pub path: PathSpec,
    /// Meters travelled per frame.
    pub step: f64,
    /// Standard deviation of rotation noise per edge and axis, radians.
    pub noise_rot: f64,
    /// Standard deviation of translation noise per edge and axis, meters.
    pub noise_trans: f64,
    /// Systematic error added to every frame-to-frame motion.
    pub drift_bias: Twist,
    pub loop_radius: f64,
    /// Detections need the query and match frames to be more than this many frames apart.
    pub min_loop_separation: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            window_size: 3,
            path: PathSpec::Circle { radius: 50.0, laps: 1.1 },
            step: 1.0,
            noise_rot: 0.0,
            noise_trans: 0.0,
            drift_bias: Twist::zero(),
            loop_radius: 7.0,
            min_loop_separation: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulator setting {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("path is degenerate: {0}")]
    DegeneratePath(&'static str),
    #[error("trajectory has {frames} frames, fewer than the window size {window}")]
    TooShort { frames: usize, window: usize },
    #[error(transparent)]
    Window(#[from] WindowError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SimError {
    SimError::InvalidConfig { field, reason: reason.into() }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.window_size < 2 {
            return Err(invalid("window_size", format!("must be at least 2, got {}", self.window_size)));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(SimError::DegeneratePath("step must be positive"));
        }
        for (field, v) in [("noise_rot", self.noise_rot), ("noise_trans", self.noise_trans)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, format!("must be a nonnegative number, got {v}")));
            }
        }
        if !(self.loop_radius.is_finite() && self.loop_radius > 0.0) {
            return Err(invalid("loop_radius", format!("must be positive, got {}", self.loop_radius)));
        }
        if !self.drift_bias.to_vector().iter().all(|v| v.is_finite()) {
            return Err(invalid("drift_bias", "must be finite"));
        }
        let positive = |field: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(field, format!("must be positive, got {v}")))
            }
        };
        match &self.path {
            PathSpec::Circle { radius, laps } | PathSpec::FigureEight { radius, laps } => {
                positive("radius", *radius)?;
                positive("laps", *laps)?;
            }
            PathSpec::Straight { length } => positive("length", *length)?,
            PathSpec::Waypoints(points) => {
                if points.len() < 2 {
                    return Err(invalid("waypoints", "need at least two points"));
                }
                if points.windows(2).any(|w| (w[1] - w[0]).norm() == 0.0) {
                    return Err(SimError::DegeneratePath("repeated waypoint"));
                }
            }
        }
        Ok(())
    }
}

fn heading(yaw: f64) -> crate::lie::Rotation {
    so3_exp(&Vector3::new(0.0, yaw, 0.0))
}

/// Pose at arc length `s` along a circle through the origin; `side` is +1 (turning towards +x) or -1.
fn circle_pose(radius: f64, s: f64, side: f64) -> Pose {
    let theta = s / radius;
    let position = Vector3::new(side * radius * (1.0 - theta.cos()), 0.0, radius * theta.sin());
    Pose::new(heading(side * theta), position)
}

pub fn generate_ground_truth(cfg: &SimConfig) -> Result<Trajectory, SimError> {
    cfg.validate()?;
    let total = match &cfg.path {
        PathSpec::Circle { radius, laps } => 2.0 * PI * radius * laps,
        PathSpec::FigureEight { radius, laps } => 4.0 * PI * radius * laps,
        PathSpec::Straight { length } => *length,
        PathSpec::Waypoints(points) => points.windows(2).map(|w| (w[1] - w[0]).norm()).sum(),
    };
    let frames = (total / cfg.step + 1e-9).floor() as usize + 1;
    let mut poses = Vec::with_capacity(frames);
    for k in 0..frames {
        let s = k as f64 * cfg.step;
        let pose = match &cfg.path {
            PathSpec::Circle { radius, .. } => circle_pose(*radius, s, 1.0),
            PathSpec::FigureEight { radius, .. } => {
                let lap = 2.0 * PI * radius;
                let within = s % (2.0 * lap);
                if within < lap {
                    circle_pose(*radius, within, 1.0)
                } else {
                    circle_pose(*radius, within - lap, -1.0)
                }
            }
            PathSpec::Straight { .. } => Pose::from_translation(Vector3::new(0.0, 0.0, s)),
            PathSpec::Waypoints(points) => waypoint_pose(points, s),
        };
        poses.push(pose);
    }
    Ok(Trajectory::new(poses))
}

fn waypoint_pose(points: &[Vector3<f64>], s: f64) -> Pose {
    let mut remaining = s;
    for (k, w) in points.windows(2).enumerate() {
        let chord = w[1] - w[0];
        let len = chord.norm();
        if remaining <= len || k + 2 == points.len() {
            let t = (remaining / len).min(1.0);
            return Pose::new(heading(chord.x.atan2(chord.z)), w[0] + chord * t);
        }
        remaining -= len;
    }
    unreachable!("waypoints validated to have a segment")
}

fn sample_noise(rng: &mut ChaCha8Rng, cfg: &SimConfig) -> Pose {
    let mut draw = |sigma: f64| {
        let v: f64 = rng.sample(StandardNormal);
        v * sigma
    };
    let rho = Vector3::new(draw(cfg.noise_trans), draw(cfg.noise_trans), draw(cfg.noise_trans));
    let phi = Vector3::new(draw(cfg.noise_rot), draw(cfg.noise_rot), draw(cfg.noise_rot));
    se3_exp(&Twist::new(rho, phi))
}

/// Trajectory the front-end "believes": every frame-to-frame motion carries the drift bias.
pub fn drifted(gt: &Trajectory, cfg: &SimConfig) -> Trajectory {
    let bias = se3_exp(&cfg.drift_bias);
    let mut poses: Vec<Pose> = Vec::with_capacity(gt.len());
    for (k, p) in gt.poses.iter().enumerate() {
        let next = match poses.last() {
            None => *p,
            Some(prev) => prev.compose(&gt.poses[k - 1].between(p)).compose(&bias),
        };
        poses.push(next);
    }
    Trajectory::new(poses)
}

fn measured_window(
    frames: Vec<NodeId>,
    rng: &mut ChaCha8Rng,
    cfg: &SimConfig,
    believed: &Trajectory,
    truth: &Trajectory,
    spliced: bool,
) -> Result<WindowedPoseGraph, SimError> {
    let n = frames.len();
    let mut edges = Vec::with_capacity(n * (n - 1));
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let (fa, fb) = (frames[a], frames[b]);
            // measurements against the spliced frame come straight from the revisit, free of drift
            let source = if spliced && (a == 0 || b == 0) { truth } else { believed };
            let rel = source.poses[fa].between(&source.poses[fb]).compose(&sample_noise(rng, cfg));
            edges.push(((a, b), rel));
        }
    }
    Ok(WindowedPoseGraph::build(frames, edges)?)
}

/// One window per frame from `n−1` on, covering the newest `n` frames. Every edge is perturbed
/// independently.
pub fn emit_windows(gt: &Trajectory, cfg: &SimConfig) -> Result<Vec<WindowedPoseGraph>, SimError> {
    cfg.validate()?;
    let n = cfg.window_size;
    if gt.len() < n {
        return Err(SimError::TooShort { frames: gt.len(), window: n });
    }
    let believed = drifted(gt, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (n - 1..gt.len()).map(|k| measured_window((k + 1 - n..=k).collect(), &mut rng, cfg, &believed, gt, false)).collect()
}

/// Crossed windows for every detection that has enough history, each frame list once,
/// in detection order.
pub fn emit_loop_windows(
    gt: &Trajectory,
    cfg: &SimConfig,
    detections: &[LoopDetection],
) -> Result<Vec<WindowedPoseGraph>, SimError> {
    cfg.validate()?;
    let believed = drifted(gt, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for d in detections {
        let Ok((f1, f2)) = crossed_windows(d.match_frame, d.query_frame, cfg.window_size) else {
            continue;
        };
        for frames in [f1, f2] {
            if frames.iter().all(|&f| f < gt.len()) && seen.insert(frames.clone()) {
                out.push(measured_window(frames, &mut rng, cfg, &believed, gt, true)?);
            }
        }
    }
    Ok(out)
}

/// Every `(query, match)` pair closer than `loop_radius` and more than `min_loop_separation`
/// frames apart. Sorted by query, then by descending score, then by match.
pub fn oracle_detections(gt: &Trajectory, cfg: &SimConfig) -> Vec<LoopDetection> {
    let mut out = Vec::new();
    for q in 0..gt.len() {
        let mut row = Vec::new();
        for m in 0..q.saturating_sub(cfg.min_loop_separation) {
            let d = (gt.poses[q].translation - gt.poses[m].translation).norm();
            if d < cfg.loop_radius {
                row.push(LoopDetection { query_frame: q, match_frame: m, score: 1.0 - d / cfg.loop_radius });
            }
        }
        row.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.match_frame.cmp(&b.match_frame)));
        out.extend(row);
    }
    out
}

/// Everything one simulated sequence produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub truth: Trajectory,
    pub windows: Vec<WindowedPoseGraph>,
    pub loop_windows: Vec<WindowedPoseGraph>,
    pub detections: Vec<LoopDetection>,
}

pub fn simulate(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    let truth = generate_ground_truth(cfg)?;
    let windows = emit_windows(&truth, cfg)?;
    let detections = oracle_detections(&truth, cfg);
    let loop_windows = emit_loop_windows(&truth, cfg, &detections)?;
    Ok(SimOutput { truth, windows, loop_windows, detections })
}
