//! Global pose graph maintained by the back-end.
//!
//! Every frame is a node. Nodes hold absolute camera-to-world poses `T_i`;
//! a constraint `T_ij` predicts `T_j = T_i · T_ij`. Node 0 anchors the gauge.

use std::collections::{BTreeSet, HashMap, VecDeque};

use thiserror::Error;

use crate::lie::{se3_log, Pose, Twist};
use crate::window::WindowedPoseGraph;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConstraintKind {
    Local,
    Loop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constraint {
    pub from: NodeId,
    pub to: NodeId,
    /// Measured `T_ij`: pose of `to` expressed in the frame of `from`.
    pub relative: Pose,
    pub kind: ConstraintKind,
}

impl Constraint {
    pub fn local(from: NodeId, to: NodeId, relative: Pose) -> Self {
        Self { from, to, relative, kind: ConstraintKind::Local }
    }

    pub fn loop_closure(from: NodeId, to: NodeId, relative: Pose) -> Self {
        Self { from, to, relative, kind: ConstraintKind::Loop }
    }
}

/// Scalar multiplier on `eᵀe` per constraint kind. Both default to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KindWeights {
    pub local: f64,
    pub loop_closure: f64,
}

impl Default for KindWeights {
    fn default() -> Self {
        Self { local: 1.0, loop_closure: 1.0 }
    }
}

impl KindWeights {
    pub fn weight(&self, kind: ConstraintKind) -> f64 {
        match kind {
            ConstraintKind::Local => self.local,
            ConstraintKind::Loop => self.loop_closure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("node {0} does not exist")]
    MissingNode(NodeId),
    #[error("constraint from node {0} to itself")]
    SelfLoop(NodeId),
    #[error("frame ids are not contiguous: expected frame {expected}, found {found}")]
    NonContiguous { expected: NodeId, found: NodeId },
    #[error("no local constraint from frame {} to frame {frame} to chain through", frame - 1)]
    BrokenChain { frame: NodeId },
    #[error("pose graph is disconnected: node {0} is unreachable from node 0")]
    Disconnected(NodeId),
    #[error("pose graph has no fixed node")]
    NoFixedNode,
    #[error("expected a loop constraint, got {0:?}")]
    WrongKind(ConstraintKind),
}

#[derive(Debug, Clone, Default)]
pub struct GlobalPoseGraph {
    poses: Vec<Pose>,
    constraints: Vec<Constraint>,
    fixed: BTreeSet<NodeId>,
    weights: KindWeights,
    local_index: HashMap<(NodeId, NodeId), Vec<usize>>,
}

impl GlobalPoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_weights(weights: KindWeights) -> Self {
        Self { weights, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn pose(&self, id: NodeId) -> Option<&Pose> {
        self.poses.get(id)
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn fixed(&self) -> &BTreeSet<NodeId> {
        &self.fixed
    }

    pub fn weights(&self) -> KindWeights {
        self.weights
    }

    pub fn set_weights(&mut self, weights: KindWeights) {
        self.weights = weights;
    }

    pub fn is_fixed(&self, id: NodeId) -> bool {
        self.fixed.contains(&id)
    }

    /// Appends a node; node 0 is always fixed.
    pub fn add_node(&mut self, pose: Pose) -> NodeId {
        let id = self.poses.len();
        self.poses.push(pose);
        if id == 0 {
            self.fixed.insert(0);
        }
        id
    }

    pub fn set_pose(&mut self, id: NodeId, pose: Pose) -> Result<(), GraphError> {
        let slot = self.poses.get_mut(id).ok_or(GraphError::MissingNode(id))?;
        *slot = pose;
        Ok(())
    }

    pub(crate) fn poses_mut(&mut self) -> &mut [Pose] {
        &mut self.poses
    }

    /// Marks an extra node as fixed (node 0 is always fixed).
    pub fn fix(&mut self, id: NodeId) -> Result<(), GraphError> {
        if id >= self.poses.len() {
            return Err(GraphError::MissingNode(id));
        }
        self.fixed.insert(id);
        Ok(())
    }

    /// Whether some constraint already links `from → to` in that direction.
    pub fn has_pair(&self, from: NodeId, to: NodeId) -> bool {
        self.local_index.contains_key(&(from, to))
            || self.constraints.iter().any(|c| c.kind == ConstraintKind::Loop && c.from == from && c.to == to)
    }

    /// Number of constraints incident to `id`, counting multi-edges.
    pub fn degree(&self, id: NodeId) -> usize {
        self.constraints.iter().filter(|c| c.from == id || c.to == id).count()
    }

    fn check_endpoints(&self, c: &Constraint) -> Result<(), GraphError> {
        for id in [c.from, c.to] {
            if id >= self.poses.len() {
                return Err(GraphError::MissingNode(id));
            }
        }
        if c.from == c.to {
            return Err(GraphError::SelfLoop(c.from));
        }
        Ok(())
    }

    fn push_constraint(&mut self, c: Constraint) {
        if c.kind == ConstraintKind::Local {
            self.local_index.entry((c.from, c.to)).or_default().push(self.constraints.len());
        }
        self.constraints.push(c);
    }

    /// Adds any validated constraint. Multi-edges are kept.
    pub fn add_constraint(&mut self, c: Constraint) -> Result<(), GraphError> {
        self.check_endpoints(&c)?;
        self.push_constraint(c);
        Ok(())
    }

    /// Adds a local constraint unless an identical one (same ordered pair, same measurement) exists.
    /// Returns whether it was inserted.
    pub fn add_local_dedup(&mut self, c: Constraint) -> Result<bool, GraphError> {
        self.check_endpoints(&c)?;
        if let Some(existing) = self.local_index.get(&(c.from, c.to)) {
            if existing.iter().any(|&k| self.constraints[k].relative == c.relative) {
                return Ok(false);
            }
        }
        self.push_constraint(Constraint { kind: ConstraintKind::Local, ..c });
        Ok(true)
    }

    /// Inserts the frames and local edges of a sliding window.
    ///
    /// Unseen frames must continue the dense id sequence; each is initialized by chaining from
    /// its predecessor through the window edge `(f-1) → f`. Returns the ids of new nodes.
    pub fn append_window(&mut self, w: &WindowedPoseGraph) -> Result<Vec<NodeId>, GraphError> {
        let mut unseen: Vec<(usize, NodeId)> =
            w.frame_ids().iter().enumerate().filter(|(_, &f)| f >= self.poses.len()).map(|(v, &f)| (v, f)).collect();
        unseen.sort_by_key(|&(_, f)| f);
        for (offset, &(_, f)) in unseen.iter().enumerate() {
            let expected = self.poses.len() + offset;
            if f != expected {
                return Err(GraphError::NonContiguous { expected, found: f });
            }
        }

        let view_of = |frame: NodeId| w.frame_ids().iter().position(|&f| f == frame);
        let mut added = Vec::with_capacity(unseen.len());
        for &(view, frame) in &unseen {
            let pose = if frame == 0 {
                Pose::identity()
            } else {
                let prev_view = view_of(frame - 1).ok_or(GraphError::BrokenChain { frame })?;
                self.poses[frame - 1].compose(w.edge(prev_view, view))
            };
            added.push(self.add_node(pose));
        }

        for (a, b, rel) in w.edges() {
            let c = Constraint::local(w.frame_ids()[a], w.frame_ids()[b], *rel);
            self.add_local_dedup(c)?;
        }
        Ok(added)
    }

    /// Appends loop constraints; node poses are left untouched.
    pub fn add_loop_constraints(&mut self, constraints: &[Constraint]) -> Result<(), GraphError> {
        for c in constraints {
            if c.kind != ConstraintKind::Loop {
                return Err(GraphError::WrongKind(c.kind));
            }
            self.check_endpoints(c)?;
        }
        for c in constraints {
            self.push_constraint(*c);
        }
        Ok(())
    }

    /// `log(T_ij⁻¹ · T_i⁻¹ · T_j)` at the current node poses.
    pub fn edge_error(&self, c: &Constraint) -> Twist {
        edge_error_of(&self.poses[c.from], &self.poses[c.to], &c.relative)
    }

    /// `Σ w·eᵀe` over all constraints.
    pub fn total_chi2(&self) -> f64 {
        self.constraints.iter().map(|c| self.weights.weight(c.kind) * self.edge_error(c).norm_squared()).sum()
    }

    /// Re-initializes every node after the first by chaining consecutive-frame local constraints.
    pub fn initialize_chain(&mut self) -> Result<(), GraphError> {
        for k in 1..self.poses.len() {
            let idx = self
                .local_index
                .get(&(k - 1, k))
                .and_then(|v| v.first())
                .ok_or(GraphError::BrokenChain { frame: k })?;
            let rel = self.constraints[*idx].relative;
            self.poses[k] = self.poses[k - 1].compose(&rel);
        }
        Ok(())
    }

    /// Fails with the first node unreachable from node 0.
    pub fn check_connected(&self) -> Result<(), GraphError> {
        if self.poses.is_empty() {
            return Ok(());
        }
        let mut adjacency = vec![Vec::new(); self.poses.len()];
        for c in &self.constraints {
            adjacency[c.from].push(c.to);
            adjacency[c.to].push(c.from);
        }
        let mut seen = vec![false; self.poses.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(n) = queue.pop_front() {
            for &m in &adjacency[n] {
                if !seen[m] {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(id) => Err(GraphError::Disconnected(id)),
            None => Ok(()),
        }
    }
}

/// Edge residual for explicit poses.
pub fn edge_error_of(t_i: &Pose, t_j: &Pose, t_ij: &Pose) -> Twist {
    se3_log(&t_ij.inverse().compose(&t_i.inverse()).compose(t_j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::testing::random_pose;
    use crate::lie::{se3_exp, Twist};
    use crate::window::WindowedPoseGraph;
    use nalgebra::{Matrix4, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn consistent_window(frames: &[NodeId], truth: &[Pose]) -> WindowedPoseGraph {
        WindowedPoseGraph::from_absolute(frames.to_vec(), &frames.iter().map(|&f| truth[f]).collect::<Vec<_>>())
            .unwrap()
    }

    fn straight_truth(n: usize) -> Vec<Pose> {
        (0..n)
            .map(|k| {
                se3_exp(&Twist::new(
                    Vector3::new(0.1 * k as f64, 0.0, k as f64),
                    Vector3::new(0.0, 0.02 * k as f64, 0.0),
                ))
            })
            .collect()
    }

    #[test]
    fn bootstrap_and_slide() {
        let truth = straight_truth(6);
        let mut g = GlobalPoseGraph::new();
        g.append_window(&consistent_window(&[0, 1, 2], &truth)).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.constraints().len(), 6);
        assert!(g.is_fixed(0));
        assert_eq!(g.pose(0).unwrap(), &Pose::identity());

        g.append_window(&consistent_window(&[1, 2, 3], &truth)).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.constraints().len(), 10);
    }

    #[test]
    fn gap_in_frames_is_rejected() {
        let truth = straight_truth(6);
        let mut g = GlobalPoseGraph::new();
        g.append_window(&consistent_window(&[0, 1, 2], &truth)).unwrap();
        let err = g.append_window(&consistent_window(&[2, 3, 5], &truth)).unwrap_err();
        assert_eq!(err, GraphError::NonContiguous { expected: 4, found: 5 });
        let err = GlobalPoseGraph::new().append_window(&consistent_window(&[1, 2, 3], &truth)).unwrap_err();
        assert_eq!(err, GraphError::NonContiguous { expected: 0, found: 1 });
    }

    #[test]
    fn loop_constraints_leave_poses_alone() {
        let truth = straight_truth(5);
        let mut g = GlobalPoseGraph::new();
        g.append_window(&consistent_window(&[0, 1, 2], &truth)).unwrap();
        g.append_window(&consistent_window(&[1, 2, 3], &truth)).unwrap();
        let before = g.clone();
        g.add_loop_constraints(&[]).unwrap();
        assert_eq!(g.constraints(), before.constraints());

        let bogus = Constraint::loop_closure(0, 3, Pose::from_translation(Vector3::new(0.0, 5.0, 0.0)));
        let chi_before = g.total_chi2();
        g.add_loop_constraints(&[bogus, bogus]).unwrap();
        assert_eq!(g.poses(), before.poses());
        assert_eq!(g.fixed(), before.fixed());
        assert_eq!(g.constraints().len(), before.constraints().len() + 2);
        assert!(g.total_chi2() > chi_before);

        assert_eq!(
            g.add_loop_constraints(&[Constraint::loop_closure(0, 9, Pose::identity())]),
            Err(GraphError::MissingNode(9))
        );
        assert!(matches!(
            g.add_loop_constraints(&[Constraint::local(0, 1, Pose::identity())]),
            Err(GraphError::WrongKind(_))
        ));
    }

    #[test]
    fn edge_error_cases() {
        let mut g = GlobalPoseGraph::new();
        g.add_node(Pose::identity());
        g.add_node(Pose::identity());
        let c = Constraint::local(0, 1, Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)));
        let e = g.edge_error(&c);
        assert_eq!(e.rho, Vector3::new(-1.0, 0.0, 0.0));
        assert_eq!(e.phi, Vector3::zeros());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (ti, tij) = (random_pose(&mut rng), random_pose(&mut rng));
            let tj = ti * tij;
            assert!(edge_error_of(&ti, &tj, &tij).norm() < 1e-12);

            let tj = random_pose(&mut rng);
            // 4×4 matrix algebra route
            let m: Matrix4<f64> = tij.to_homogeneous().try_inverse().unwrap()
                * ti.to_homogeneous().try_inverse().unwrap()
                * tj.to_homogeneous();
            let err_pose = Pose::from_parts(m.fixed_view::<3, 3>(0, 0).into(), m.fixed_view::<3, 1>(0, 3).into());
            let Ok(err_pose) = err_pose else { continue };
            let oracle = se3_log(&err_pose);
            let got = edge_error_of(&ti, &tj, &tij);
            if oracle.phi.norm() < std::f64::consts::PI - 1e-3 {
                assert!((oracle.to_vector() - got.to_vector()).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn chi2_single_violation_and_gauge() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = GlobalPoseGraph::new();
        for _ in 0..4 {
            g.add_node(random_pose(&mut rng));
        }
        for (a, b) in [(0, 1), (1, 2), (2, 3), (3, 0)] {
            let rel = g.pose(a).unwrap().between(g.pose(b).unwrap());
            g.add_constraint(Constraint::local(a, b, rel)).unwrap();
        }
        assert!(g.total_chi2() < 1e-20);
        let bad = Constraint::loop_closure(0, 2, random_pose(&mut rng));
        g.add_constraint(bad).unwrap();
        let xi = g.edge_error(&bad);
        assert!((g.total_chi2() - xi.norm_squared()).abs() < 1e-12 * xi.norm_squared().max(1.0));

        let brute: f64 = g
            .constraints()
            .iter()
            .map(|c| {
                let e = edge_error_of(&g.poses()[c.from], &g.poses()[c.to], &c.relative).to_vector();
                e.dot(&e)
            })
            .sum();
        assert!((brute - g.total_chi2()).abs() < 1e-12);

        let gauge = random_pose(&mut rng);
        let mut moved = g.clone();
        for id in 0..moved.len() {
            let p = gauge * *g.pose(id).unwrap();
            moved.set_pose(id, p).unwrap();
        }
        for c in g.constraints() {
            let d = g.edge_error(c).to_vector() - moved.edge_error(c).to_vector();
            assert!(d.norm() < 1e-9);
        }
    }

    #[test]
    fn chaining_zeroes_consecutive_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let truth = straight_truth(8);
        let mut g = GlobalPoseGraph::new();
        for start in 0..6 {
            let frames = [start, start + 1, start + 2];
            let mut w = consistent_window(&frames, &truth);
            w = w.perturbed(|_, _, p| p * se3_exp(&crate::lie::testing::random_twist(&mut rng, 0.01, 0.05)));
            g.append_window(&w).unwrap();
        }
        for k in 1..g.len() {
            let p = *g.pose(k).unwrap();
            g.set_pose(k, p * se3_exp(&Twist::new(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()))).unwrap();
        }
        g.initialize_chain().unwrap();
        let mut nonconsecutive = 0.0;
        for c in g.constraints() {
            let e = g.edge_error(c).norm();
            if c.to == c.from + 1
                && g.local_index[&(c.from, c.to)][0] == g.constraints().iter().position(|x| x == c).unwrap()
            {
                assert!(e < 1e-12);
            } else if c.to.abs_diff(c.from) == 2 {
                nonconsecutive += e;
            }
        }
        assert!(nonconsecutive > 1e-3);

        let mut single = GlobalPoseGraph::new();
        single.add_node(Pose::identity());
        single.initialize_chain().unwrap();
        assert_eq!(single.pose(0), Some(&Pose::identity()));

        let mut broken = GlobalPoseGraph::new();
        broken.add_node(Pose::identity());
        broken.add_node(Pose::identity());
        assert_eq!(broken.initialize_chain(), Err(GraphError::BrokenChain { frame: 1 }));
    }

    #[test]
    fn consistent_chain_recovers_truth() {
        let truth = straight_truth(7);
        let mut g = GlobalPoseGraph::new();
        for start in 0..5 {
            g.append_window(&consistent_window(&[start, start + 1, start + 2], &truth)).unwrap();
        }
        g.initialize_chain().unwrap();
        let t0_inv = truth[0].inverse();
        for (k, p) in g.poses().iter().enumerate() {
            let expected = t0_inv * truth[k];
            assert!((p.to_homogeneous() - expected.to_homogeneous()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn connectivity() {
        let mut g = GlobalPoseGraph::new();
        for _ in 0..3 {
            g.add_node(Pose::identity());
        }
        g.add_constraint(Constraint::local(0, 1, Pose::identity())).unwrap();
        assert_eq!(g.check_connected(), Err(GraphError::Disconnected(2)));
        g.add_constraint(Constraint::local(2, 1, Pose::identity())).unwrap();
        assert_eq!(g.check_connected(), Ok(()));
    }
}
