//! Levenberg-Marquardt over node poses with a fixed gauge.

mod jacobian;
mod sparse;

use std::fmt::Write as _;

use nalgebra::{DVector, Matrix6, Vector6};
use thiserror::Error;

pub use jacobian::{analytic_jacobians, linearize, numeric_jacobians, numeric_jacobians_of, JacobianMode};
pub use sparse::{solve_normal_equations, BlockCholesky, BlockSparseSymmetric, SolveError};

use crate::graph::{GlobalPoseGraph, GraphError};
use crate::lie::{se3_exp, Pose, Twist};

const MIN_LAMBDA: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub absolute_chi2_tol: f64,
    pub relative_decrease_tol: f64,
    pub step_norm_tol: f64,
    /// Damping beyond which a failing factorization is a numerical failure.
    pub max_lambda: f64,
    pub jacobians: JacobianMode,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 10.0,
            absolute_chi2_tol: 1e-12,
            relative_decrease_tol: 1e-9,
            step_norm_tol: 1e-10,
            max_lambda: 1e16,
            jacobians: JacobianMode::Exact,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let positive = [
            ("initial_lambda", self.initial_lambda),
            ("absolute_chi2_tol", self.absolute_chi2_tol),
            ("relative_decrease_tol", self.relative_decrease_tol),
            ("step_norm_tol", self.step_norm_tol),
            ("max_lambda", self.max_lambda),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(OptimizeError::InvalidConfig(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.max_iterations == 0 {
            return Err(OptimizeError::InvalidConfig("max_iterations must be positive".into()));
        }
        if !(self.lambda_up > 1.0 && self.lambda_up.is_finite()) {
            return Err(OptimizeError::InvalidConfig(format!("lambda_up must exceed 1, got {}", self.lambda_up)));
        }
        if !(self.lambda_down > 1.0 && self.lambda_down.is_finite()) {
            return Err(OptimizeError::InvalidConfig(format!("lambda_down must exceed 1, got {}", self.lambda_down)));
        }
        if self.max_lambda < self.initial_lambda {
            return Err(OptimizeError::InvalidConfig("max_lambda is below initial_lambda".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    ConvergedChi2,
    ConvergedStep,
    MaxIterations,
    NumericalFailure,
}

impl TerminationReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ConvergedChi2 => "converged_chi2",
            Self::ConvergedStep => "converged_step",
            Self::MaxIterations => "max_iterations",
            Self::NumericalFailure => "numerical_failure",
        }
    }
}

/// One damped solve attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lambda: f64,
    pub chi2_before: f64,
    /// χ² at the candidate; `NaN` when the factorization failed.
    pub chi2_candidate: f64,
    pub step_norm: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptReport {
    pub iterations: usize,
    pub initial_chi2: f64,
    pub final_chi2: f64,
    /// χ² at the start followed by χ² after each accepted step.
    pub chi2_trace: Vec<f64>,
    pub attempts: Vec<IterationRecord>,
    pub termination: TerminationReason,
}

impl OptReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,lambda,chi2_before,chi2_candidate,step_norm,accepted\n");
        for r in &self.attempts {
            let _ = writeln!(
                out,
                "{},{:e},{:.17e},{:.17e},{:e},{}",
                r.iteration, r.lambda, r.chi2_before, r.chi2_candidate, r.step_norm, r.accepted
            );
        }
        let _ = writeln!(
            out,
            "# termination={} iterations={} initial_chi2={:.17e} final_chi2={:.17e}",
            self.termination.as_str(),
            self.iterations,
            self.initial_chi2,
            self.final_chi2
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizeError {
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("damped normal equations could not be solved (last lambda {lambda:e})")]
    NumericalFailure { lambda: f64, report: Box<OptReport> },
}

struct Linearization {
    h: BlockSparseSymmetric,
    b: DVector<f64>,
    chi2: f64,
}

/// Maps node ids to block indices of the free variables.
fn free_blocks(graph: &GlobalPoseGraph) -> (Vec<Option<usize>>, usize) {
    let mut next = 0;
    let map = (0..graph.len())
        .map(|id| {
            if graph.is_fixed(id) {
                None
            } else {
                next += 1;
                Some(next - 1)
            }
        })
        .collect();
    (map, next)
}

fn assemble(graph: &GlobalPoseGraph, block_of: &[Option<usize>], blocks: usize, mode: JacobianMode) -> Linearization {
    let mut h = BlockSparseSymmetric::new(blocks);
    let mut b = DVector::zeros(6 * blocks);
    let mut chi2 = 0.0;
    let poses = graph.poses();
    for c in graph.constraints() {
        let w = graph.weights().weight(c.kind);
        let (e, ji, jj) = linearize(&poses[c.from], &poses[c.to], &c.relative, mode);
        let e = e.to_vector();
        chi2 += w * e.norm_squared();
        let parts: [(Option<usize>, Matrix6<f64>); 2] = [(block_of[c.from], ji), (block_of[c.to], jj)];
        for (bi, ja) in &parts {
            let Some(bi) = *bi else { continue };
            let g: Vector6<f64> = ja.transpose() * e * w;
            let mut seg = b.fixed_rows_mut::<6>(6 * bi);
            seg += g;
            for (bj, jb) in &parts {
                let Some(bj) = *bj else { continue };
                if bi <= bj {
                    h.add_block(bi, bj, &(ja.transpose() * jb * w));
                }
            }
        }
    }
    Linearization { h, b, chi2 }
}

fn apply_step(poses: &[Pose], block_of: &[Option<usize>], step: &DVector<f64>) -> Vec<Pose> {
    poses
        .iter()
        .zip(block_of)
        .map(|(pose, block)| match block {
            Some(k) => {
                let delta: Vector6<f64> = step.fixed_rows::<6>(6 * k).into();
                pose.compose(&se3_exp(&Twist::from_vector(&delta)))
            }
            None => *pose,
        })
        .collect()
}

fn chi2_at(graph: &GlobalPoseGraph, poses: &[Pose]) -> f64 {
    graph
        .constraints()
        .iter()
        .map(|c| {
            let e = crate::graph::edge_error_of(&poses[c.from], &poses[c.to], &c.relative);
            graph.weights().weight(c.kind) * e.norm_squared()
        })
        .sum()
}

/// Minimizes the weighted χ² in place. Fixed nodes are never written.
///
/// On numerical failure the graph keeps its input poses and the error carries the report.
pub fn optimize(graph: &mut GlobalPoseGraph, cfg: &LmConfig) -> Result<OptReport, OptimizeError> {
    cfg.validate()?;
    if graph.is_empty() {
        return Ok(OptReport {
            iterations: 0,
            initial_chi2: 0.0,
            final_chi2: 0.0,
            chi2_trace: vec![0.0],
            attempts: Vec::new(),
            termination: TerminationReason::ConvergedChi2,
        });
    }
    if graph.fixed().is_empty() {
        return Err(GraphError::NoFixedNode.into());
    }
    graph.check_connected()?;

    let (block_of, blocks) = free_blocks(graph);
    let original: Vec<Pose> = graph.poses().to_vec();
    let mut lin = assemble(graph, &block_of, blocks, cfg.jacobians);
    let mut report = OptReport {
        iterations: 0,
        initial_chi2: lin.chi2,
        final_chi2: lin.chi2,
        chi2_trace: vec![lin.chi2],
        attempts: Vec::new(),
        termination: TerminationReason::MaxIterations,
    };

    let fail = |graph: &mut GlobalPoseGraph, mut report: OptReport, lambda: f64| {
        graph.poses_mut().copy_from_slice(&original);
        report.termination = TerminationReason::NumericalFailure;
        report.final_chi2 = report.initial_chi2;
        log::warn!("optimizer gave up at lambda {lambda:e}");
        Err(OptimizeError::NumericalFailure { lambda, report: Box::new(report) })
    };

    if !lin.chi2.is_finite() {
        return fail(graph, report, cfg.initial_lambda);
    }
    if lin.chi2 <= cfg.absolute_chi2_tol || blocks == 0 {
        report.termination = TerminationReason::ConvergedChi2;
        return Ok(report);
    }

    let mut factor = BlockCholesky::analyze(&lin.h);
    let mut lambda = cfg.initial_lambda;
    'outer: while report.iterations < cfg.max_iterations {
        report.iterations += 1;
        loop {
            let mut record = IterationRecord {
                iteration: report.iterations,
                lambda,
                chi2_before: lin.chi2,
                chi2_candidate: f64::NAN,
                step_norm: f64::NAN,
                accepted: false,
            };
            let step = match factor.factorize(&lin.h, lambda).and_then(|_| factor.solve(&(-&lin.b))) {
                Ok(step) if step.iter().all(|v| v.is_finite()) => step,
                _ => {
                    report.attempts.push(record);
                    lambda *= cfg.lambda_up;
                    if lambda > cfg.max_lambda {
                        return fail(graph, report, lambda);
                    }
                    continue;
                }
            };
            record.step_norm = step.norm();
            if record.step_norm < cfg.step_norm_tol {
                report.attempts.push(record);
                report.termination = TerminationReason::ConvergedStep;
                break 'outer;
            }
            let candidate = apply_step(graph.poses(), &block_of, &step);
            let chi2_new = chi2_at(graph, &candidate);
            record.chi2_candidate = chi2_new;
            if chi2_new.is_finite() && chi2_new < lin.chi2 {
                record.accepted = true;
                report.attempts.push(record);
                let previous = lin.chi2;
                for ((slot, pose), block) in graph.poses_mut().iter_mut().zip(candidate).zip(&block_of) {
                    if block.is_some() {
                        *slot = pose.renormalized();
                    }
                }
                lin = assemble(graph, &block_of, blocks, cfg.jacobians);
                report.chi2_trace.push(lin.chi2);
                report.final_chi2 = lin.chi2;
                lambda = (lambda / cfg.lambda_down).max(MIN_LAMBDA);
                if lin.chi2 <= cfg.absolute_chi2_tol || (previous - lin.chi2) <= cfg.relative_decrease_tol * previous {
                    report.termination = TerminationReason::ConvergedChi2;
                    break 'outer;
                }
                break;
            }
            report.attempts.push(record);
            lambda *= cfg.lambda_up;
            if lambda > cfg.max_lambda {
                // no damping makes progress: the current poses are a minimum to working precision
                report.termination = TerminationReason::ConvergedStep;
                break 'outer;
            }
        }
    }
    log::debug!(
        "optimizer: {} after {} iterations, chi2 {:e} -> {:e}",
        report.termination.as_str(),
        report.iterations,
        report.initial_chi2,
        report.final_chi2
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Constraint;
    use crate::lie::testing::{random_pose, random_twist};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn twist_gap(a: &Pose, b: &Pose) -> f64 {
        a.between(b).log().norm()
    }

    /// Chain of `n` random poses with local edges and a few extra edges, all exact.
    fn consistent_graph(rng: &mut ChaCha8Rng, n: usize, extra: usize) -> (GlobalPoseGraph, Vec<Pose>) {
        let mut truth = vec![Pose::identity()];
        for _ in 1..n {
            let step = se3_exp(&random_twist(rng, 0.3, 1.0));
            truth.push(truth.last().unwrap().compose(&step));
        }
        let mut g = GlobalPoseGraph::new();
        for p in &truth {
            g.add_node(*p);
        }
        for k in 1..n {
            g.add_constraint(Constraint::local(k - 1, k, truth[k - 1].between(&truth[k]))).unwrap();
        }
        for _ in 0..extra {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b {
                g.add_constraint(Constraint::loop_closure(a, b, truth[a].between(&truth[b]))).unwrap();
            }
        }
        (g, truth)
    }

    fn noisy_graph(rng: &mut ChaCha8Rng, n: usize) -> GlobalPoseGraph {
        let (clean, truth) = consistent_graph(rng, n, 0);
        let mut g = GlobalPoseGraph::new();
        for p in clean.poses() {
            g.add_node(*p);
        }
        for k in 1..n {
            for d in 1..=3.min(k) {
                let rel = truth[k - d].between(&truth[k]).compose(&se3_exp(&random_twist(rng, 0.02, 0.05)));
                g.add_constraint(Constraint::local(k - d, k, rel)).unwrap();
            }
        }
        let rel = truth[n - 1].between(&truth[0]).compose(&se3_exp(&random_twist(rng, 0.01, 0.01)));
        g.add_constraint(Constraint::loop_closure(n - 1, 0, rel)).unwrap();
        g.initialize_chain().unwrap();
        g
    }

    #[test]
    fn consistent_graph_returns_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut g, truth) = consistent_graph(&mut rng, 10, 5);
        let report = optimize(&mut g, &LmConfig::default()).unwrap();
        assert_eq!(report.termination, TerminationReason::ConvergedChi2);
        assert!(report.final_chi2 <= 1e-12);
        assert_eq!(report.iterations, 0);
        assert_eq!(g.poses(), &truth[..]);
    }

    #[test]
    fn three_node_chain_with_loop_recovers_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut g, truth) = consistent_graph(&mut rng, 3, 0);
        g.add_constraint(Constraint::loop_closure(0, 2, truth[0].between(&truth[2]))).unwrap();
        let bumped = truth[1].compose(&se3_exp(&random_twist(&mut rng, 0.2, 0.5)));
        g.set_pose(1, bumped).unwrap();
        let report = optimize(&mut g, &LmConfig::default()).unwrap();
        for (p, t) in g.poses().iter().zip(&truth) {
            assert!(twist_gap(p, t) < 1e-8, "{}", twist_gap(p, t));
        }
        assert!(report.final_chi2 <= report.initial_chi2);
    }

    #[test]
    fn accepted_chi2_strictly_decreases_and_fixed_nodes_stay() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = noisy_graph(&mut rng, 60);
        g.fix(30).unwrap();
        let before0 = g.poses()[0];
        let before30 = g.poses()[30];
        let report = optimize(&mut g, &LmConfig::default()).unwrap();
        assert!(report.chi2_trace.windows(2).all(|w| w[1] < w[0]));
        assert!(report.final_chi2 < report.initial_chi2);
        assert_eq!(g.poses()[0], before0);
        assert_eq!(g.poses()[30], before30);
        for a in &report.attempts {
            if !a.accepted && a.chi2_candidate.is_finite() {
                assert!(a.chi2_candidate >= a.chi2_before);
            }
        }
    }

    #[test]
    fn gauge_transform_commutes_with_optimization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g0 = noisy_graph(&mut rng, 25);
        let gauge = random_pose(&mut rng);
        let mut moved = g0.clone();
        for id in 0..moved.len() {
            moved.set_pose(id, gauge.compose(&g0.poses()[id])).unwrap();
        }
        let mut base = g0.clone();
        optimize(&mut base, &LmConfig::default()).unwrap();
        optimize(&mut moved, &LmConfig::default()).unwrap();
        for (a, b) in base.poses().iter().zip(moved.poses()) {
            assert!(twist_gap(&gauge.compose(a), b) < 1e-8);
        }
    }

    #[test]
    fn constraint_order_does_not_change_the_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g0 = noisy_graph(&mut rng, 25);
        let mut shuffled_constraints = g0.constraints().to_vec();
        shuffled_constraints.shuffle(&mut rng);
        let mut shuffled = GlobalPoseGraph::new();
        for p in g0.poses() {
            shuffled.add_node(*p);
        }
        for c in shuffled_constraints {
            shuffled.add_constraint(c).unwrap();
        }
        let mut base = g0.clone();
        optimize(&mut base, &LmConfig::default()).unwrap();
        optimize(&mut shuffled, &LmConfig::default()).unwrap();
        for (a, b) in base.poses().iter().zip(shuffled.poses()) {
            assert!(twist_gap(a, b) < 1e-8);
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g0 = noisy_graph(&mut rng, 30);
        let mut a = g0.clone();
        let mut b = g0.clone();
        let ra = optimize(&mut a, &LmConfig::default()).unwrap();
        let rb = optimize(&mut b, &LmConfig::default()).unwrap();
        assert_eq!(a.poses(), b.poses());
        assert_eq!(ra, rb);
    }

    #[test]
    fn first_order_jacobians_also_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g0 = noisy_graph(&mut rng, 30);
        let mut exact = g0.clone();
        let mut approx = g0.clone();
        let re = optimize(&mut exact, &LmConfig::default()).unwrap();
        let cfg = LmConfig { jacobians: JacobianMode::FirstOrder, ..LmConfig::default() };
        let ra = optimize(&mut approx, &cfg).unwrap();
        assert!((ra.final_chi2 - re.final_chi2).abs() <= 1e-6 * re.final_chi2.max(1e-12));
    }

    #[test]
    fn step_norm_shrinks_monotonically_with_damping() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = noisy_graph(&mut rng, 20);
        let (block_of, blocks) = free_blocks(&g);
        let lin = assemble(&g, &block_of, blocks, JacobianMode::Exact);
        let norms: Vec<f64> =
            (0..=6).map(|k| solve_normal_equations(&lin.h, &lin.b, 10f64.powi(k - 3)).unwrap().norm()).collect();
        assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
        assert!(norms[6] < 1e-2 * norms[0]);
    }

    #[test]
    fn preconditions_are_checked() {
        let mut g = GlobalPoseGraph::new();
        g.add_node(Pose::identity());
        g.add_node(Pose::identity());
        assert!(matches!(
            optimize(&mut g, &LmConfig::default()),
            Err(OptimizeError::Graph(GraphError::Disconnected(1)))
        ));
        let bad = LmConfig { lambda_up: 1.0, ..LmConfig::default() };
        assert!(matches!(optimize(&mut g, &bad), Err(OptimizeError::InvalidConfig(_))));
    }

    #[test]
    fn csv_log_has_one_row_per_attempt() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = noisy_graph(&mut rng, 15);
        let report = optimize(&mut g, &LmConfig::default()).unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), report.attempts.len() + 2);
        assert!(csv.lines().last().unwrap().contains(report.termination.as_str()));
    }
}
