//! Incremental back-end: chain windows into the global graph, close loops, optimize.

use std::collections::HashMap;
use std::fmt::Write;

use posegraph_slam::graph::{GlobalPoseGraph, KindWeights, NodeId};
use posegraph_slam::io::EdgeFile;
use posegraph_slam::loops::{DetectorConfig, LoopCandidate, LoopDetection, LoopPipeline, LoopVerifier};
use posegraph_slam::optimizer::{optimize, LmConfig, OptReport, OptimizeError};
use posegraph_slam::window::{relax_window_with, WindowedPoseGraph};
use posegraph_slam::Trajectory;

use crate::error::CliError;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub loop_closing: bool,
    pub window_relax: bool,
    /// Also optimize whenever the node count reaches a multiple of this.
    pub optimize_every: Option<usize>,
    pub lm: LmConfig,
    pub detector: DetectorConfig,
    pub weights: KindWeights,
}

impl RunOptions {
    pub fn new(lm: LmConfig, detector: DetectorConfig, weights: KindWeights) -> Self {
        Self { loop_closing: true, window_relax: false, optimize_every: None, lm, detector, weights }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub graph: GlobalPoseGraph,
    /// Closed loops as `(earlier, later)` frame pairs, in closing order.
    pub loops: Vec<(NodeId, NodeId)>,
    pub reports: Vec<OptReport>,
}

impl RunOutput {
    pub fn estimate(&self) -> Trajectory {
        Trajectory::new(self.graph.poses().to_vec())
    }

    /// One row per damped solve of every optimization, tagged with the optimization index.
    pub fn optimizer_csv(&self) -> String {
        let mut out = String::from("run,iteration,lambda,chi2_before,chi2_candidate,step_norm,accepted,termination\n");
        for (k, r) in self.reports.iter().enumerate() {
            for a in &r.attempts {
                let _ = writeln!(
                    out,
                    "{k},{},{:e},{:.17e},{:.17e},{:e},{},{}",
                    a.iteration,
                    a.lambda,
                    a.chi2_before,
                    a.chi2_candidate,
                    a.step_norm,
                    a.accepted,
                    r.termination.as_str()
                );
            }
        }
        out
    }
}

/// The graph as it stood when an optimization failed, with the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub graph: GlobalPoseGraph,
    pub loops: Vec<(NodeId, NodeId)>,
    pub error: CliError,
}

impl From<CliError> for Box<RunFailure> {
    fn from(error: CliError) -> Self {
        Box::new(RunFailure { graph: GlobalPoseGraph::new(), loops: Vec::new(), error })
    }
}

fn relaxed(w: &WindowedPoseGraph, lm: &LmConfig) -> Result<WindowedPoseGraph, CliError> {
    let poses = relax_window_with(w, lm)?;
    Ok(WindowedPoseGraph::from_absolute(w.frame_ids().to_vec(), &poses)?)
}

struct Backend {
    graph: GlobalPoseGraph,
    loops: Vec<(NodeId, NodeId)>,
    reports: Vec<OptReport>,
}

impl Backend {
    fn optimize(&mut self, lm: &LmConfig) -> Result<(), Box<RunFailure>> {
        match optimize(&mut self.graph, lm) {
            Ok(report) => {
                log::info!(
                    "optimized {} nodes: chi2 {:.6e} -> {:.6e} in {} iterations ({})",
                    self.graph.len(),
                    report.initial_chi2,
                    report.final_chi2,
                    report.iterations,
                    report.termination.as_str()
                );
                self.reports.push(report);
                Ok(())
            }
            Err(e) => {
                if let OptimizeError::NumericalFailure { report, .. } = &e {
                    self.reports.push((**report).clone());
                }
                // optimize restores the poses it started from
                Err(Box::new(RunFailure { graph: self.graph.clone(), loops: self.loops.clone(), error: e.into() }))
            }
        }
    }
}

/// Runs the back-end over the local windows in file order. Detections are fed once their query
/// frame has a node; each closed loop adds its crossed-window constraints and triggers a
/// full-graph optimization.
pub fn run_backend<V: LoopVerifier>(
    edges: &EdgeFile,
    detections: &[LoopDetection],
    verifier: V,
    opts: &RunOptions,
) -> Result<RunOutput, Box<RunFailure>> {
    let lookup_table: HashMap<&[NodeId], &WindowedPoseGraph> =
        edges.loop_windows().map(|w| (w.frame_ids(), w)).collect();
    let mut pipeline = LoopPipeline::new(opts.detector, verifier, edges.n);
    let mut be = Backend { graph: GlobalPoseGraph::with_weights(opts.weights), loops: Vec::new(), reports: Vec::new() };
    let mut next_detection = 0;

    for w in edges.local_windows() {
        let w = if opts.window_relax { relaxed(w, &opts.lm)? } else { w.clone() };
        let added = be.graph.append_window(&w).map_err(CliError::from)?;
        if added.is_empty() {
            continue;
        }
        let mut closed = false;
        while let Some(d) = detections.get(next_detection) {
            if d.query_frame >= be.graph.len() {
                break;
            }
            next_detection += 1;
            if !opts.loop_closing {
                continue;
            }
            let found =
                pipeline.process(d, |frames| lookup_table.get(frames).map(|w| (*w).clone())).map_err(CliError::from)?;
            if let Some(cl) = found {
                let LoopCandidate { i, j, .. } = cl.candidate;
                cl.constraints.apply(&mut be.graph).map_err(CliError::from)?;
                log::info!("closed loop ({i}, {j})");
                be.loops.push((i, j));
                be.optimize(&opts.lm)?;
                closed = true;
            }
        }
        if let (Some(every), false, true) = (opts.optimize_every, closed, opts.loop_closing) {
            if added.iter().any(|&id| (id + 1) % every == 0) {
                be.optimize(&opts.lm)?;
            }
        }
    }
    if next_detection < detections.len() {
        log::warn!("{} detections refer to frames past the last window", detections.len() - next_detection);
    }
    Ok(RunOutput { graph: be.graph, loops: be.loops, reports: be.reports })
}
