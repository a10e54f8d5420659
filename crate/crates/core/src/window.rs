//! Windowed pose graphs: the complete directed graph of relative motions a pose
//! network predicts over a window of `n` views.
//!
//! Views are indexed `0..n` inside the window; `frame_ids[v]` maps a view to its
//! global frame. The edge `(i, j)` is the motion from view `i` to view `j`, so a
//! window induced by absolute poses has `T_ij = T_i⁻¹ · T_j`.

use thiserror::Error;

use crate::graph::{edge_error_of, Constraint, GlobalPoseGraph, NodeId};
use crate::lie::{se3_exp, se3_log, Pose, Twist};
use crate::optimizer::{optimize, LmConfig, OptimizeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WindowError {
    #[error("a window needs at least 2 views, got {0}")]
    TooSmall(usize),
    #[error("edge ({0}, {1}) is given more than once")]
    DuplicateEdge(usize, usize),
    #[error("edge ({0}, {1}) is missing")]
    MissingEdge(usize, usize),
    #[error("edge ({0}, {1}) is not a valid ordered pair of distinct views in 0..{2}")]
    BadEdge(usize, usize, usize),
    #[error("frame {0} appears twice in the window")]
    RepeatedFrame(NodeId),
    #[error("expected {expected} poses, got {got}")]
    PoseCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedPoseGraph {
    frame_ids: Vec<NodeId>,
    /// Row-major `n × n`; the diagonal holds identities and is never exposed as an edge.
    edges: Vec<Pose>,
}

impl WindowedPoseGraph {
    /// Validates that exactly the `n(n-1)` ordered pairs are supplied.
    pub fn build(
        frame_ids: Vec<NodeId>,
        edge_poses: impl IntoIterator<Item = ((usize, usize), Pose)>,
    ) -> Result<Self, WindowError> {
        let n = frame_ids.len();
        if n < 2 {
            return Err(WindowError::TooSmall(n));
        }
        for (k, f) in frame_ids.iter().enumerate() {
            if frame_ids[..k].contains(f) {
                return Err(WindowError::RepeatedFrame(*f));
            }
        }
        let mut slots: Vec<Option<Pose>> = vec![None; n * n];
        for ((i, j), pose) in edge_poses {
            if i >= n || j >= n || i == j {
                return Err(WindowError::BadEdge(i, j, n));
            }
            if slots[i * n + j].replace(pose).is_some() {
                return Err(WindowError::DuplicateEdge(i, j));
            }
        }
        let mut edges = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                match slots[i * n + j] {
                    Some(p) => edges.push(p),
                    None if i == j => edges.push(Pose::identity()),
                    None => return Err(WindowError::MissingEdge(i, j)),
                }
            }
        }
        Ok(Self { frame_ids, edges })
    }

    /// Exactly consistent window induced by absolute poses.
    pub fn from_absolute(frame_ids: Vec<NodeId>, poses: &[Pose]) -> Result<Self, WindowError> {
        if poses.len() != frame_ids.len() {
            return Err(WindowError::PoseCount { expected: frame_ids.len(), got: poses.len() });
        }
        let n = poses.len();
        let pairs = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| ((i, j), poses[i].between(&poses[j])));
        Self::build(frame_ids, pairs)
    }

    pub fn n(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn frame_ids(&self) -> &[NodeId] {
        &self.frame_ids
    }

    /// Motion from view `i` to view `j`. Panics when either index is out of range.
    pub fn edge(&self, i: usize, j: usize) -> &Pose {
        &self.edges[i * self.n() + j]
    }

    /// All `n(n-1)` edges in row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, &Pose)> + '_ {
        let n = self.n();
        self.edges.iter().enumerate().filter(move |(k, _)| k / n != k % n).map(move |(k, p)| (k / n, k % n, p))
    }

    /// Applies `f(i, j, edge)` to every edge.
    pub fn perturbed(&self, mut f: impl FnMut(usize, usize, Pose) -> Pose) -> Self {
        let n = self.n();
        let edges =
            self.edges.iter().enumerate().map(|(k, p)| if k / n == k % n { *p } else { f(k / n, k % n, *p) }).collect();
        Self { frame_ids: self.frame_ids.clone(), edges }
    }
}

/// A directed cycle of distinct views, stored with its smallest view first.
pub type Cycle = Vec<usize>;

/// Which cycles enter the consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CyclePolicy {
    /// Longest cycle length enumerated (minimum 3).
    pub max_len: usize,
    /// Keep both `(i,j,k)` and `(i,k,j)`; otherwise only the ascending orientation.
    pub both_orientations: bool,
    /// Score a cycle at the starting view with the smallest residual instead of at its
    /// smallest view index. Makes the loss independent of how views are numbered.
    pub best_start: bool,
}

impl Default for CyclePolicy {
    fn default() -> Self {
        Self { max_len: 3, both_orientations: true, best_start: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CycleSet {
    pub cycles: Vec<Cycle>,
}

impl CycleSet {
    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }
}

/// Directed 3-cycles, one representative per cyclic rotation, both orientations.
pub fn enumerate_cycles(n: usize) -> CycleSet {
    enumerate_cycles_with(n, &CyclePolicy::default())
}

pub fn enumerate_cycles_with(n: usize, policy: &CyclePolicy) -> CycleSet {
    fn extend(n: usize, len: usize, path: &mut Vec<usize>, used: &mut [bool], both: bool, out: &mut Vec<Cycle>) {
        if path.len() == len {
            if both || path[1] < path[len - 1] {
                out.push(path.clone());
            }
            return;
        }
        for v in path[0] + 1..n {
            if !used[v] {
                used[v] = true;
                path.push(v);
                extend(n, len, path, used, both, out);
                path.pop();
                used[v] = false;
            }
        }
    }

    let mut cycles = Vec::new();
    for len in 3..=policy.max_len.min(n) {
        for start in 0..n {
            let mut used = vec![false; n];
            used[start] = true;
            extend(n, len, &mut vec![start], &mut used, policy.both_orientations, &mut cycles);
        }
    }
    CycleSet { cycles }
}

/// Sum over cycles of the l1 distance between the composed cycle motion and the identity,
/// taken over the top 3×4 block.
pub fn cycle_consistency_loss(g: &WindowedPoseGraph) -> f64 {
    let policy = CyclePolicy::default();
    cycle_consistency_loss_with(g, &enumerate_cycles_with(g.n(), &policy), policy.best_start)
}

fn cycle_residual(g: &WindowedPoseGraph, cycle: &[usize], start: usize) -> f64 {
    let len = cycle.len();
    let product = (0..len)
        .fold(Pose::identity(), |acc, k| acc.compose(g.edge(cycle[(start + k) % len], cycle[(start + k + 1) % len])));
    let m = product.to_homogeneous();
    let mut l1 = 0.0;
    for r in 0..3 {
        for c in 0..4 {
            let target = if r == c { 1.0 } else { 0.0 };
            l1 += (m[(r, c)] - target).abs();
        }
    }
    l1
}

pub fn cycle_consistency_loss_with(g: &WindowedPoseGraph, cycles: &CycleSet, best_start: bool) -> f64 {
    cycles
        .cycles
        .iter()
        .map(|cycle| {
            if best_start {
                (0..cycle.len()).map(|s| cycle_residual(g, cycle, s)).fold(f64::INFINITY, f64::min)
            } else {
                cycle_residual(g, cycle, 0)
            }
        })
        .sum()
}

/// Window graph as a small global graph: view 0 fixed at identity, the rest chained
/// through consecutive views, every edge a constraint.
pub fn window_as_graph(g: &WindowedPoseGraph) -> GlobalPoseGraph {
    let mut graph = GlobalPoseGraph::new();
    graph.add_node(Pose::identity());
    for v in 1..g.n() {
        let prev = *graph.pose(v - 1).expect("previous view was just added");
        graph.add_node(prev.compose(g.edge(v - 1, v)));
    }
    for (i, j, rel) in g.edges() {
        graph.add_constraint(Constraint::local(i, j, *rel)).expect("window views are distinct and present");
    }
    graph
}

fn window_chi2(g: &WindowedPoseGraph, poses: &[Pose]) -> f64 {
    g.edges().map(|(a, b, rel)| edge_error_of(&poses[a], &poses[b], rel).norm_squared()).sum()
}

/// Relaxes the window into `n` absolute poses in the window frame (view 0 at identity).
pub fn relax_window(g: &WindowedPoseGraph) -> Result<Vec<Pose>, OptimizeError> {
    relax_window_with(g, &LmConfig::default())
}

pub fn relax_window_with(g: &WindowedPoseGraph, cfg: &LmConfig) -> Result<Vec<Pose>, OptimizeError> {
    if g.n() == 2 {
        // log-mean of the forward edge and the inverted backward edge
        let forward = se3_log(g.edge(0, 1));
        let backward = se3_log(&g.edge(1, 0).inverse());
        let mean = Twist::new((forward.rho + backward.rho) * 0.5, (forward.phi + backward.phi) * 0.5);
        let candidate = vec![Pose::identity(), se3_exp(&mean)];
        let chained = window_as_graph(g);
        if window_chi2(g, &candidate) <= chained.total_chi2() {
            return Ok(candidate);
        }
        // the twist-domain mean can lose to the chain when the edges disagree a lot
    }
    let mut graph = window_as_graph(g);
    optimize(&mut graph, cfg)?;
    Ok(graph.poses().to_vec())
}

/// Forward motion from the second-newest view to the newest, read straight from the window.
///
/// Chaining `T_k = T_{k-1} · interframe_motion(w_k)` over successive windows rebuilds the
/// trajectory.
pub fn interframe_motion(g: &WindowedPoseGraph) -> Pose {
    let n = g.n();
    *g.edge(n - 2, n - 1)
}
