//! Loop-closure handling: consecutive-detection filtering, verification and
//! crossed-window constraints.

use thiserror::Error;

use crate::graph::{Constraint, GlobalPoseGraph, GraphError, NodeId};
use crate::lie::Pose;
use crate::window::WindowedPoseGraph;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopDetection {
    pub query_frame: NodeId,
    pub match_frame: NodeId,
    /// Similarity in `[0, 1]`.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopCandidate {
    /// Earlier frame.
    pub i: NodeId,
    /// Later frame.
    pub j: NodeId,
    pub consecutive_count: usize,
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoopError {
    #[error("detection for query frame {got} arrived after query frame {last}")]
    OutOfOrder { last: NodeId, got: NodeId },
    #[error("match frame {match_frame} is not earlier than query frame {query_frame}")]
    MatchNotEarlier { query_frame: NodeId, match_frame: NodeId },
    #[error("score {0} is outside [0, 1]")]
    BadScore(f64),
    #[error(
        "loop ({i}, {j}) needs frames {i} and {j} to have {needed} frames of history and to be at least that far apart"
    )]
    InsufficientHistory { i: NodeId, j: NodeId, needed: usize },
    #[error("window size must be at least 2, got {0}")]
    WindowTooSmall(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectorConfig {
    /// Run length at which a candidate is emitted.
    pub required_consecutive: usize,
    /// Largest change of match frame between successive queries that still extends a run.
    pub match_band: usize,
    /// Queries during which a run that just emitted stays quiet.
    pub cooldown: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { required_consecutive: 6, match_band: 10, cooldown: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Run {
    last_query: NodeId,
    last_match: NodeId,
    count: usize,
    /// Emission is suppressed while `last_query < quiet_until`.
    quiet_until: NodeId,
}

/// Tracks runs of detections over successive query frames.
///
/// A run grows by one when the next query frame has a detection whose match lies within
/// `match_band` frames of the run's previous match; each query frame extends a run at most once.
/// Runs that skip a query frame are dropped.
#[derive(Debug, Clone, Default)]
pub struct LoopDetector {
    cfg: DetectorConfig,
    last_query: Option<NodeId>,
    runs: Vec<Run>,
}

impl LoopDetector {
    pub fn new(cfg: DetectorConfig) -> Self {
        Self { cfg, last_query: None, runs: Vec::new() }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn feed(&mut self, d: &LoopDetection) -> Result<Option<LoopCandidate>, LoopError> {
        if let Some(last) = self.last_query {
            if d.query_frame < last {
                return Err(LoopError::OutOfOrder { last, got: d.query_frame });
            }
        }
        if d.match_frame >= d.query_frame {
            return Err(LoopError::MatchNotEarlier { query_frame: d.query_frame, match_frame: d.match_frame });
        }
        if !(0.0..=1.0).contains(&d.score) {
            return Err(LoopError::BadScore(d.score));
        }
        self.last_query = Some(d.query_frame);
        let q = d.query_frame;
        let band = self.cfg.match_band;
        let near = |run: &Run| run.last_match.abs_diff(d.match_frame) <= band;

        self.runs.retain(|r| r.last_query + 1 >= q);
        if self.runs.iter().any(|r| r.last_query == q && near(r)) {
            return Ok(None);
        }
        let idx = match self.runs.iter().position(|r| r.last_query + 1 == q && near(r)) {
            Some(idx) => {
                let run = &mut self.runs[idx];
                run.last_query = q;
                run.last_match = d.match_frame;
                run.count += 1;
                idx
            }
            None => {
                self.runs.push(Run { last_query: q, last_match: d.match_frame, count: 1, quiet_until: 0 });
                self.runs.len() - 1
            }
        };
        let run = &mut self.runs[idx];
        if run.count >= self.cfg.required_consecutive && q >= run.quiet_until {
            run.quiet_until = q + self.cfg.cooldown;
            return Ok(Some(LoopCandidate { i: d.match_frame, j: q, consecutive_count: run.count, verified: false }));
        }
        Ok(None)
    }

    /// Lifts the cooldown armed by `candidate`, so its run may emit again on the next query.
    pub fn forgive(&mut self, candidate: &LoopCandidate) {
        for run in &mut self.runs {
            if run.last_query == candidate.j && run.last_match == candidate.i {
                run.quiet_until = 0;
            }
        }
    }
}

/// Geometric check of a loop candidate.
pub trait LoopVerifier {
    fn verify(&mut self, candidate: &LoopCandidate) -> bool;
}

impl<F: FnMut(&LoopCandidate) -> bool> LoopVerifier for F {
    fn verify(&mut self, candidate: &LoopCandidate) -> bool {
        self(candidate)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysAccept;

impl LoopVerifier for AlwaysAccept {
    fn verify(&mut self, _: &LoopCandidate) -> bool {
        true
    }
}

/// Accepts a candidate iff the true poses of its frames are close.
#[derive(Debug, Clone)]
pub struct ProximityOracle {
    pub truth: Vec<Pose>,
    pub max_distance: f64,
    pub max_angle: f64,
}

impl ProximityOracle {
    pub fn new(truth: Vec<Pose>, max_distance: f64) -> Self {
        Self { truth, max_distance, max_angle: std::f64::consts::PI }
    }
}

impl LoopVerifier for ProximityOracle {
    fn verify(&mut self, c: &LoopCandidate) -> bool {
        let (Some(a), Some(b)) = (self.truth.get(c.i), self.truth.get(c.j)) else {
            return false;
        };
        let rel = a.between(b);
        rel.translation.norm() < self.max_distance && rel.rotation.angle() <= self.max_angle
    }
}

pub fn verify_candidate(c: &LoopCandidate, verifier: &mut impl LoopVerifier) -> LoopCandidate {
    LoopCandidate { verified: verifier.verify(c), ..*c }
}

/// Frame lists of the two crossed windows for a loop between `i < j`:
/// `⟨i, j−1, …, j−n+1⟩` and `⟨j, i−1, …, i−n+1⟩`.
pub fn crossed_windows(i: NodeId, j: NodeId, n: usize) -> Result<(Vec<NodeId>, Vec<NodeId>), LoopError> {
    if n < 2 {
        return Err(LoopError::WindowTooSmall(n));
    }
    // i must precede j's neighbourhood so the first window has distinct frames
    if i < n - 1 || j < n - 1 || i + n > j {
        return Err(LoopError::InsufficientHistory { i, j, needed: n - 1 });
    }
    let first = std::iter::once(i).chain((1..n).map(|k| j - k)).collect();
    let second = std::iter::once(j).chain((1..n).map(|k| i - k)).collect();
    Ok((first, second))
}

/// Constraints contributed by a pair of crossed windows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoopConstraints {
    /// Edges touching a spliced view.
    pub loops: Vec<Constraint>,
    /// Edges inside a neighbourhood.
    pub locals: Vec<Constraint>,
}

/// Splits the edges of crossed windows: edges incident to the spliced (first) view become
/// loop constraints, the rest local ones.
pub fn build_loop_constraints(w1: &WindowedPoseGraph, w2: &WindowedPoseGraph) -> LoopConstraints {
    let mut out = LoopConstraints::default();
    for w in [w1, w2] {
        let ids = w.frame_ids();
        for (a, b, rel) in w.edges() {
            if a == 0 || b == 0 {
                out.loops.push(Constraint::loop_closure(ids[a], ids[b], *rel));
            } else {
                out.locals.push(Constraint::local(ids[a], ids[b], *rel));
            }
        }
    }
    out
}

impl LoopConstraints {
    /// Adds the loop constraints and every local one whose ordered pair is not linked yet.
    /// Returns how many local constraints were added.
    pub fn apply(&self, graph: &mut GlobalPoseGraph) -> Result<usize, LoopError> {
        graph.add_loop_constraints(&self.loops)?;
        let mut added = 0;
        for c in &self.locals {
            if !graph.has_pair(c.from, c.to) {
                graph.add_constraint(*c)?;
                added += 1;
            }
        }
        Ok(added)
    }
}

/// A verified loop with its constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub candidate: LoopCandidate,
    pub constraints: LoopConstraints,
}

/// Detector, verifier and crossed-window lookup chained together.
#[derive(Debug, Clone)]
pub struct LoopPipeline<V> {
    pub detector: LoopDetector,
    pub verifier: V,
    pub window_size: usize,
}

impl<V: LoopVerifier> LoopPipeline<V> {
    pub fn new(cfg: DetectorConfig, verifier: V, window_size: usize) -> Self {
        Self { detector: LoopDetector::new(cfg), verifier, window_size }
    }

    /// Feeds one detection. `lookup` returns the window measured over a given frame list, if any.
    /// Candidates that fail verification or lack windows lift their cooldown and are retried
    /// with the next detection of the same run.
    pub fn process(
        &mut self,
        d: &LoopDetection,
        mut lookup: impl FnMut(&[NodeId]) -> Option<WindowedPoseGraph>,
    ) -> Result<Option<ClosedLoop>, LoopError> {
        let Some(candidate) = self.detector.feed(d)? else {
            return Ok(None);
        };
        let candidate = verify_candidate(&candidate, &mut self.verifier);
        if !candidate.verified {
            log::debug!("loop ({}, {}) failed verification", candidate.i, candidate.j);
            self.detector.forgive(&candidate);
            return Ok(None);
        }
        let windows = crossed_windows(candidate.i, candidate.j, self.window_size)
            .ok()
            .and_then(|(f1, f2)| Some((lookup(&f1)?, lookup(&f2)?)));
        match windows {
            Some((w1, w2)) => Ok(Some(ClosedLoop { candidate, constraints: build_loop_constraints(&w1, &w2) })),
            None => {
                log::debug!("loop ({}, {}) has no crossed windows", candidate.i, candidate.j);
                self.detector.forgive(&candidate);
                Ok(None)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ConstraintKind;
    use crate::lie::testing::random_pose;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(q: NodeId, m: NodeId) -> LoopDetection {
        LoopDetection { query_frame: q, match_frame: m, score: 0.9 }
    }

    fn feed_all(detector: &mut LoopDetector, ds: &[LoopDetection]) -> Vec<(usize, LoopCandidate)> {
        ds.iter().enumerate().filter_map(|(k, d)| detector.feed(d).unwrap().map(|c| (k, c))).collect()
    }

    #[test]
    fn sixth_consecutive_detection_emits() {
        let mut d = LoopDetector::new(DetectorConfig::default());
        let trace: Vec<_> = (0..6).map(|k| det(500 + k, 100 + k)).collect();
        let out = feed_all(&mut d, &trace);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, 5);
        assert_eq!(out[0].1, LoopCandidate { i: 105, j: 505, consecutive_count: 6, verified: false });
    }

    #[test]
    fn gap_resets_the_run() {
        let mut d = LoopDetector::new(DetectorConfig::default());
        let mut trace: Vec<_> = (0..5).map(|k| det(500 + k, 100 + k)).collect();
        trace.extend((0..5).map(|k| det(506 + k, 106 + k)));
        assert!(feed_all(&mut d, &trace).is_empty());
        // the sixth after the gap completes a fresh run
        assert!(d.feed(&det(511, 111)).unwrap().is_some());
    }

    #[test]
    fn match_jump_breaks_the_run() {
        let mut d = LoopDetector::new(DetectorConfig::default());
        let mut trace: Vec<_> = (0..3).map(|k| det(500 + k, 100 + k)).collect();
        trace.extend((3..6).map(|k| det(500 + k, 300 + k)));
        assert!(feed_all(&mut d, &trace).is_empty());
    }

    #[test]
    fn one_candidate_per_cooldown_window() {
        let mut d = LoopDetector::new(DetectorConfig::default());
        let trace: Vec<_> = (0..12).map(|k| det(500 + k, 100 + k)).collect();
        assert_eq!(feed_all(&mut d, &trace).len(), 1);

        let mut d = LoopDetector::new(DetectorConfig::default());
        let trace: Vec<_> = (0..120).map(|k| det(500 + k, 100 + k)).collect();
        let out = feed_all(&mut d, &trace);
        let at: Vec<usize> = out.iter().map(|(k, _)| *k).collect();
        assert_eq!(at, vec![5, 55, 105]);
        assert!(out.iter().all(|(_, c)| c.consecutive_count >= 6));
    }

    #[test]
    fn several_matches_per_query_count_once() {
        let mut d = LoopDetector::new(DetectorConfig::default());
        let mut trace = Vec::new();
        for k in 0..6 {
            for m in [100 + k, 101 + k, 99 + k] {
                trace.push(det(500 + k, m));
            }
        }
        let out = feed_all(&mut d, &trace);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].1.consecutive_count, 6);
        assert_eq!(out[0].1.j, 505);
    }

    #[test]
    fn forgiven_candidate_retries_next_query() {
        let mut d = LoopDetector::new(DetectorConfig::default());
        let trace: Vec<_> = (0..6).map(|k| det(500 + k, 100 + k)).collect();
        let (_, c) = feed_all(&mut d, &trace)[0];
        d.forgive(&c);
        let again = d.feed(&det(506, 106)).unwrap().unwrap();
        assert_eq!(again.consecutive_count, 7);
    }

    #[test]
    fn rejects_bad_input() {
        let mut d = LoopDetector::new(DetectorConfig::default());
        d.feed(&det(10, 1)).unwrap();
        assert_eq!(d.feed(&det(9, 1)), Err(LoopError::OutOfOrder { last: 10, got: 9 }));
        assert!(matches!(d.feed(&det(11, 11)), Err(LoopError::MatchNotEarlier { .. })));
        let bad = LoopDetection { score: 1.5, ..det(12, 1) };
        assert_eq!(d.feed(&bad), Err(LoopError::BadScore(1.5)));
    }

    #[test]
    fn same_trace_same_candidates() {
        let trace: Vec<_> = (0..80).map(|k| det(400 + k, 50 + (k * 7) % 13)).collect();
        let a = feed_all(&mut LoopDetector::new(DetectorConfig::default()), &trace);
        let b = feed_all(&mut LoopDetector::new(DetectorConfig::default()), &trace);
        assert_eq!(a, b);
    }

    #[test]
    fn crossed_window_frames() {
        let (a, b) = crossed_windows(100, 500, 3).unwrap();
        assert_eq!(a, vec![100, 499, 498]);
        assert_eq!(b, vec![500, 99, 98]);
        let (a, b) = crossed_windows(100, 500, 2).unwrap();
        assert_eq!(a, vec![100, 499]);
        assert_eq!(b, vec![500, 99]);
        assert!(matches!(crossed_windows(1, 500, 3), Err(LoopError::InsufficientHistory { .. })));
        assert!(matches!(crossed_windows(100, 101, 3), Err(LoopError::InsufficientHistory { .. })));
    }

    #[test]
    fn proximity_oracle() {
        let mut truth = vec![Pose::identity(); 200];
        truth[150] = Pose::from_translation(Vector3::new(3.0, 0.0, 0.0));
        // a parallel street 20 m over
        truth[180] = Pose::from_translation(Vector3::new(20.0, 0.0, 0.0));
        let mut oracle = ProximityOracle::new(truth, 7.0);
        let c = |j| LoopCandidate { i: 0, j, consecutive_count: 6, verified: false };
        assert!(verify_candidate(&c(150), &mut oracle).verified);
        assert!(!verify_candidate(&c(180), &mut oracle).verified);
        assert!(verify_candidate(&c(180), &mut AlwaysAccept).verified);
        let mut never = |_: &LoopCandidate| false;
        assert!(!verify_candidate(&c(150), &mut never).verified);
    }

    fn window_over(frames: Vec<NodeId>, truth: &[Pose]) -> WindowedPoseGraph {
        let poses: Vec<Pose> = frames.iter().map(|&f| truth[f]).collect();
        WindowedPoseGraph::from_absolute(frames, &poses).unwrap()
    }

    #[test]
    fn loop_constraints_touch_the_spliced_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth: Vec<Pose> = (0..40).map(|_| random_pose(&mut rng)).collect();
        for n in [2usize, 3, 4] {
            let (f1, f2) = crossed_windows(10, 30, n).unwrap();
            let lc = build_loop_constraints(&window_over(f1, &truth), &window_over(f2, &truth));
            assert_eq!(lc.loops.len(), 2 * 2 * (n - 1));
            assert_eq!(lc.locals.len(), 2 * (n - 1) * (n - 2));
            assert!(lc.loops.iter().all(|c| c.kind == ConstraintKind::Loop));
            assert!(lc.loops.iter().all(|c| [10, 30].contains(&c.from) || [10, 30].contains(&c.to)));
        }
    }

    #[test]
    fn applying_skips_linked_local_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth: Vec<Pose> = (0..40).map(|_| random_pose(&mut rng)).collect();
        let mut g = GlobalPoseGraph::new();
        for p in &truth {
            g.add_node(*p);
        }
        g.add_constraint(Constraint::local(29, 28, truth[29].between(&truth[28]))).unwrap();
        let (f1, f2) = crossed_windows(10, 30, 3).unwrap();
        let lc = build_loop_constraints(&window_over(f1, &truth), &window_over(f2, &truth));
        let added = lc.apply(&mut g).unwrap();
        assert_eq!(added, 3);
        assert_eq!(g.constraints().len(), 1 + 8 + 3);
        assert!(g.total_chi2() < 1e-20);
    }

    #[test]
    fn pipeline_closes_a_verified_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth: Vec<Pose> = (0..600).map(|_| random_pose(&mut rng)).collect();
        let mut calls = 0;
        let mut pipe = LoopPipeline::new(DetectorConfig::default(), AlwaysAccept, 3);
        let mut closed = Vec::new();
        for k in 0..10 {
            let d = det(500 + k, 100 + k);
            let lookup = |f: &[NodeId]| {
                calls += 1;
                Some(window_over(f.to_vec(), &truth))
            };
            if let Some(c) = pipe.process(&d, lookup).unwrap() {
                closed.push(c);
            }
        }
        assert_eq!(closed.len(), 1);
        assert_eq!((closed[0].candidate.i, closed[0].candidate.j), (105, 505));
        assert_eq!(closed[0].constraints.loops.len(), 8);
        assert_eq!(calls, 2);
    }

    #[test]
    fn pipeline_retries_when_windows_are_missing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth: Vec<Pose> = (0..600).map(|_| random_pose(&mut rng)).collect();
        let mut pipe = LoopPipeline::new(DetectorConfig::default(), AlwaysAccept, 3);
        let mut closed = Vec::new();
        for k in 0..10 {
            let d = det(500 + k, 100 + k);
            // windows exist only from query 507 on
            let lookup = |f: &[NodeId]| (f[0] >= 507 || f[1] >= 506).then(|| window_over(f.to_vec(), &truth));
            if let Some(c) = pipe.process(&d, lookup).unwrap() {
                closed.push(c.candidate);
            }
        }
        assert_eq!(closed.len(), 1);
        assert_eq!(closed[0].j, 507);
    }
}
